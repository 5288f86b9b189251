//! Rician block-fading MIMO channel with per-oscillator phase rotation.
//!
//! Transmit oscillator `i` (zero based) feeds antennas
//! `i * N_ot .. (i + 1) * N_ot`; receive oscillator `i'` feeds receive
//! antennas `i' * N_or .. (i' + 1) * N_or`. Per slot the channel applies
//! `y = Phi_R H Phi_T x + z`.

use nalgebra::{DMatrix, DMatrixView, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// System geometry, energies and frame dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub n_t: usize,
    pub n_r: usize,
    pub o_t: usize,
    pub o_r: usize,
    /// Average data symbol energy.
    pub es: f64,
    /// Channel-pilot to data energy ratio in dB; `None` means perfect CSI.
    pub ec_over_es_db: Option<f64>,
    /// Noise variance per real dimension. Overwritten per SNR point by the
    /// harness.
    pub sigma2: f64,
    pub k_rice_db: f64,
    /// Data slots per frame.
    pub l: usize,
    /// Data slots between phase-pilot blocks.
    pub r: usize,
    /// LDPC codewords per user and frame; `None` fills the frame.
    pub codewords_per_user: Option<usize>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            n_t: 8,
            n_r: 16,
            o_t: 4,
            o_r: 2,
            es: 1.0,
            ec_over_es_db: None,
            sigma2: 0.05,
            k_rice_db: 100.0,
            l: 120,
            r: 24,
            codewords_per_user: None,
        }
    }
}

impl SystemConfig {
    /// The large reference geometry: 16 two-antenna users, 64 receive
    /// antennas on 4 oscillators, 1086 data slots.
    pub fn reference() -> Self {
        SystemConfig {
            n_t: 32,
            n_r: 64,
            o_t: 16,
            o_r: 4,
            es: 1.0,
            ec_over_es_db: None,
            sigma2: 0.05,
            k_rice_db: 100.0,
            l: 1086,
            r: 60,
            codewords_per_user: None,
        }
    }

    pub fn n_ot(&self) -> usize {
        self.n_t / self.o_t
    }

    pub fn n_or(&self) -> usize {
        self.n_r / self.o_r
    }

    pub fn n_osc(&self) -> usize {
        self.o_t + self.o_r
    }

    /// Channel-pilot energy, `+inf` for perfect CSI.
    pub fn ec(&self) -> f64 {
        match self.ec_over_es_db {
            Some(db) => self.es * 10f64.powf(db / 10.0),
            None => f64::INFINITY,
        }
    }

    /// Noise variance per real dimension for a given `Es/N0` in dB, with
    /// `N0 = 2 sigma^2`.
    pub fn sigma2_for_snr_db(&self, snr_db: f64) -> f64 {
        self.es / (2.0 * 10f64.powf(snr_db / 10.0))
    }

    /// Average transmitted energy per symbol including the `N_t` channel
    /// pilot uses that precede the frame.
    pub fn average_symbol_energy(&self) -> f64 {
        let (l, nt) = (self.l as f64, self.n_t as f64);
        if self.ec().is_infinite() {
            return f64::INFINITY;
        }
        (l * self.es + nt * self.ec()) / (l + nt)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: usize, k: &str| {
            if v == 0 {
                Err(Error::config(format!("system.{k}"), "must be >= 1"))
            } else {
                Ok(())
            }
        };
        pos(self.n_t, "n_t")?;
        pos(self.n_r, "n_r")?;
        pos(self.o_t, "o_t")?;
        pos(self.o_r, "o_r")?;
        pos(self.l, "l")?;
        pos(self.r, "r")?;
        if self.n_t % self.o_t != 0 {
            return Err(Error::config("system.o_t", "must divide n_t"));
        }
        if self.n_r % self.o_r != 0 {
            return Err(Error::config("system.o_r", "must divide n_r"));
        }
        if !(self.es > 0.0 && self.es.is_finite()) {
            return Err(Error::config("system.es", "must be positive"));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::config("system.sigma2", "must be positive"));
        }
        if let Some(db) = self.ec_over_es_db {
            if !db.is_finite() {
                return Err(Error::config("system.ec_over_es_db", "must be finite"));
            }
        }
        if !self.k_rice_db.is_finite() {
            return Err(Error::config("system.k_rice_db", "must be finite"));
        }
        if self.codewords_per_user == Some(0) {
            return Err(Error::config("system.codewords_per_user", "must be >= 1"));
        }
        Ok(())
    }
}

/// True channel matrix, `N_r x N_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub h: DMatrix<Complex64>,
}

/// Block selector for oscillator-pair sub-matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    /// Rows of receive oscillator `rx`, columns of transmit oscillator `tx`.
    Pair { rx: usize, tx: usize },
    /// All rows, columns of transmit oscillator `i` (`N_r x N_ot`).
    TxCol(usize),
    /// Rows of receive oscillator `i`, all columns (`N_or x N_t`).
    RxRow(usize),
}

/// Borrowed view of one oscillator block of an `N_r x N_t` matrix.
pub fn block_view<'a>(
    h: &'a DMatrix<Complex64>,
    cfg: &SystemConfig,
    kind: Block,
) -> Result<DMatrixView<'a, Complex64>> {
    let (n_ot, n_or) = (cfg.n_ot(), cfg.n_or());
    if h.shape() != (cfg.n_r, cfg.n_t) {
        return Err(Error::invalid("matrix does not match the system geometry"));
    }
    match kind {
        Block::Pair { rx, tx } => {
            if rx >= cfg.o_r || tx >= cfg.o_t {
                return Err(Error::invalid(format!("pair ({rx}, {tx}) out of range")));
            }
            Ok(h.view((rx * n_or, tx * n_ot), (n_or, n_ot)))
        }
        Block::TxCol(i) => {
            if i >= cfg.o_t {
                return Err(Error::invalid(format!("transmit oscillator {i} out of range")));
            }
            Ok(h.view((0, i * n_ot), (cfg.n_r, n_ot)))
        }
        Block::RxRow(i) => {
            if i >= cfg.o_r {
                return Err(Error::invalid(format!("receive oscillator {i} out of range")));
            }
            Ok(h.view((i * n_or, 0), (n_or, cfg.n_t)))
        }
    }
}

/// Receiver-side channel estimate `Phi_R[0] H Phi_T[0] + Z_C`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedChannel {
    pub h_hat: DMatrix<Complex64>,
    /// Channel-pilot energy used for the estimate; `+inf` for perfect CSI.
    pub ec: f64,
}

impl EstimatedChannel {
    pub fn perfect(h: DMatrix<Complex64>) -> Self {
        EstimatedChannel {
            h_hat: h,
            ec: f64::INFINITY,
        }
    }

    pub fn block(&self, cfg: &SystemConfig, kind: Block) -> Result<DMatrixView<'_, Complex64>> {
        block_view(&self.h_hat, cfg, kind)
    }

    /// `1 / E_C`, zero for perfect CSI.
    pub fn inv_ec(&self) -> f64 {
        if self.ec.is_infinite() {
            0.0
        } else {
            1.0 / self.ec
        }
    }
}

pub(crate) fn cgauss<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im)
}

/// Draws `sqrt(K/(K+1)) H_LOS + sqrt(1/(K+1)) H_w` with unit-modulus,
/// uniform-phase LOS entries and unit-variance circular Gaussian `H_w`.
pub fn gen_rician<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<ChannelMatrix> {
    cfg.validate()?;
    let k = 10f64.powf(cfg.k_rice_db / 10.0);
    let a_los = (k / (k + 1.0)).sqrt();
    let a_nlos = (1.0 / (k + 1.0)).sqrt();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let h = DMatrix::from_fn(cfg.n_r, cfg.n_t, |_, _| {
        let theta = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
        let g = cgauss(rng) * s;
        Complex64::from_polar(a_los, theta) + g * a_nlos
    });
    Ok(ChannelMatrix { h })
}

/// Per-antenna phase factors `(e^{j phi_T}, e^{j phi_R})` for one slot.
pub fn phase_factors(cfg: &SystemConfig, phi_slot: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
    let (n_ot, n_or) = (cfg.n_ot(), cfg.n_or());
    let tx = (0..cfg.n_t)
        .map(|t| Complex64::from_polar(1.0, phi_slot[t / n_ot]))
        .collect();
    let rx = (0..cfg.n_r)
        .map(|r| Complex64::from_polar(1.0, phi_slot[cfg.o_t + r / n_or]))
        .collect();
    (tx, rx)
}

/// `Phi_R H Phi_T` for one slot.
pub fn rotate(cfg: &SystemConfig, h: &DMatrix<Complex64>, phi_slot: &[f64]) -> DMatrix<Complex64> {
    let (tx, rx) = phase_factors(cfg, phi_slot);
    DMatrix::from_fn(h.nrows(), h.ncols(), |r, t| rx[r] * h[(r, t)] * tx[t])
}

/// One channel use: `y = Phi_R H Phi_T x + z`, `z` with variance
/// `cfg.sigma2` per real dimension.
pub fn apply_channel<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    h: &ChannelMatrix,
    phi_slot: &[f64],
    x: &DVector<Complex64>,
    rng: &mut R,
) -> Result<DVector<Complex64>> {
    if h.h.shape() != (cfg.n_r, cfg.n_t) || x.len() != cfg.n_t || phi_slot.len() != cfg.n_osc() {
        return Err(Error::invalid("apply_channel: dimension mismatch"));
    }
    let (tx, rx) = phase_factors(cfg, phi_slot);
    let xr: Vec<Complex64> = x.iter().zip(&tx).map(|(a, b)| a * b).collect();
    let sd = cfg.sigma2.sqrt();
    let y = DVector::from_fn(cfg.n_r, |r, _| {
        let mut acc = Complex64::new(0.0, 0.0);
        for (t, xv) in xr.iter().enumerate() {
            acc += h.h[(r, t)] * xv;
        }
        rx[r] * acc + cgauss(rng) * sd
    });
    Ok(y)
}

/// Noisy channel estimate with i.i.d. error of variance `sigma2 / E_C` per
/// real dimension, or the exact rotated channel when `cfg` has perfect CSI.
pub fn estimate_channel<R: Rng + ?Sized>(
    h: &ChannelMatrix,
    phi0: &[f64],
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<EstimatedChannel> {
    if phi0.len() != cfg.n_osc() || h.h.shape() != (cfg.n_r, cfg.n_t) {
        return Err(Error::invalid("estimate_channel: dimension mismatch"));
    }
    let ec = cfg.ec();
    if !(ec > 0.0) {
        return Err(Error::invalid("channel-pilot energy must be positive"));
    }
    let mut h_hat = rotate(cfg, &h.h, phi0);
    if ec.is_finite() {
        let sd = (cfg.sigma2 / ec).sqrt();
        for v in h_hat.iter_mut() {
            *v += cgauss(rng) * sd;
        }
    }
    Ok(EstimatedChannel { h_hat, ec })
}
