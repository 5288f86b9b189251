//! Oscillator phase-noise processes.
//!
//! Each oscillator contributes an *atomic* phase process. A channel tap
//! between transmit oscillator `i` and receive oscillator `i'` is rotated by
//! the *sum* process `phi_i + phi_{O_t + i'}`. All trajectories use the
//! differential convention: column 0 is the channel-estimation instant and is
//! identically zero, because the initial phases are absorbed into the
//! estimated channel.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Phase-noise model selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PnModel {
    Wiener,
    Mask,
}

/// One piece of a phase-noise mask: level changes by `slope_db_per_decade`
/// between `f_start_hz` and `f_end_hz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSegment {
    pub f_start_hz: f64,
    pub f_end_hz: f64,
    pub slope_db_per_decade: f64,
}

/// Phase-noise configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PnConfig {
    pub model: PnModel,
    /// Standard deviation of the per-slot Wiener increment, radians.
    pub rho: f64,
    pub mask_segments: Vec<MaskSegment>,
    /// Mask level at `mask_ref_freq_hz`, dBc/Hz (single-sideband).
    pub mask_ref_level_dbc: f64,
    pub mask_ref_freq_hz: f64,
    pub sample_rate_hz: f64,
    /// When set, the mask level is shifted so that the per-slot phase
    /// increment has this standard deviation. The mask shape is kept.
    pub mask_target_increment_std: Option<f64>,
}

impl Default for PnConfig {
    fn default() -> Self {
        PnConfig {
            model: PnModel::Wiener,
            rho: 0.2,
            mask_segments: Vec::new(),
            mask_ref_level_dbc: -133.0,
            mask_ref_freq_hz: 100e3,
            sample_rate_hz: 26e6,
            mask_target_increment_std: None,
        }
    }
}

impl PnConfig {
    /// Wiener model with increment standard deviation `rho`.
    pub fn wiener(rho: f64) -> Self {
        PnConfig {
            model: PnModel::Wiener,
            rho,
            ..Default::default()
        }
    }

    /// The three-segment oscillator mask used in the reference BER
    /// experiments: -3, -2 and 0 dB/decade over [2 kHz, 100 kHz),
    /// [100 kHz, 1 MHz) and [1 MHz, 52 MHz), -133 dBc/Hz at 100 kHz,
    /// sampled at 26 MHz.
    pub fn reference_mask() -> Self {
        PnConfig {
            model: PnModel::Mask,
            rho: 0.0,
            mask_segments: vec![
                MaskSegment {
                    f_start_hz: 2e3,
                    f_end_hz: 100e3,
                    slope_db_per_decade: -3.0,
                },
                MaskSegment {
                    f_start_hz: 100e3,
                    f_end_hz: 1e6,
                    slope_db_per_decade: -2.0,
                },
                MaskSegment {
                    f_start_hz: 1e6,
                    f_end_hz: 52e6,
                    slope_db_per_decade: 0.0,
                },
            ],
            mask_ref_level_dbc: -133.0,
            mask_ref_freq_hz: 100e3,
            sample_rate_hz: 26e6,
            mask_target_increment_std: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::config("pn.rho", "must be finite and >= 0"));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::config("pn.sample_rate_hz", "must be > 0"));
        }
        if self.model == PnModel::Mask {
            if self.mask_segments.is_empty() {
                return Err(Error::config("pn.mask_segments", "mask is empty"));
            }
            for (k, s) in self.mask_segments.iter().enumerate() {
                if !(s.f_start_hz > 0.0 && s.f_end_hz > s.f_start_hz) {
                    return Err(Error::config(
                        format!("pn.mask_segments[{k}]"),
                        "need 0 < f_start_hz < f_end_hz",
                    ));
                }
            }
            for (k, w) in self.mask_segments.windows(2).enumerate() {
                if w[0].f_end_hz != w[1].f_start_hz {
                    return Err(Error::config(
                        format!("pn.mask_segments[{}]", k + 1),
                        "segments must be contiguous",
                    ));
                }
            }
            let first = self.mask_segments[0].f_start_hz;
            let last = self.mask_segments[self.mask_segments.len() - 1].f_end_hz;
            if !(self.mask_ref_freq_hz >= first && self.mask_ref_freq_hz <= last) {
                return Err(Error::config(
                    "pn.mask_ref_freq_hz",
                    "reference frequency outside the mask",
                ));
            }
            if let Some(t) = self.mask_target_increment_std {
                if !(t >= 0.0 && t.is_finite()) {
                    return Err(Error::config(
                        "pn.mask_target_increment_std",
                        "must be finite and >= 0",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Per-slot increment standard deviation implied by the configuration.
    /// For the mask model this integrates the synthesized spectrum.
    pub fn equivalent_increment_std(&self) -> f64 {
        match self.model {
            PnModel::Wiener => self.rho,
            PnModel::Mask => match self.mask_target_increment_std {
                Some(t) => t,
                None => mask_increment_variance(self, DEFAULT_MASK_FFT).sqrt(),
            },
        }
    }
}

/// Atomic phase trajectories, one row per oscillator (transmit oscillators
/// first), one column per slot. Column 0 is the reference instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PnTrajectory {
    pub phases: DMatrix<f64>,
}

impl PnTrajectory {
    pub fn zeros(n_osc: usize, n_slots: usize) -> Self {
        PnTrajectory {
            phases: DMatrix::zeros(n_osc, n_slots),
        }
    }

    pub fn n_osc(&self) -> usize {
        self.phases.nrows()
    }

    pub fn n_slots(&self) -> usize {
        self.phases.ncols()
    }

    /// Atomic phases at one slot.
    pub fn slot(&self, n: usize) -> Vec<f64> {
        self.phases.column(n).iter().copied().collect()
    }
}

/// Sum phase trajectories; row `i * O_r + i'` (zero based) holds
/// `phi_i + phi_{O_t + i'}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SumTrajectory {
    pub phases: DMatrix<f64>,
    pub o_t: usize,
    pub o_r: usize,
}

impl SumTrajectory {
    /// The `O_t + O_r - 1` basis rows: `phi_{i,1}` for every transmit
    /// oscillator followed by `phi_{1,i'}` for receive oscillators 2..O_r.
    pub fn basis(&self) -> DMatrix<f64> {
        let n = self.phases.ncols();
        let mut b = DMatrix::zeros(self.o_t + self.o_r - 1, n);
        for i in 0..self.o_t {
            b.row_mut(i).copy_from(&self.phases.row(i * self.o_r));
        }
        for ip in 1..self.o_r {
            b.row_mut(self.o_t + ip - 1).copy_from(&self.phases.row(ip));
        }
        b
    }

    /// Rebuilds every sum process from the basis returned by [`Self::basis`]
    /// using `phi_{ii'} = phi_{i1} + phi_{1i'} - phi_{11}`.
    pub fn from_basis(basis: &DMatrix<f64>, o_t: usize, o_r: usize) -> Result<Self> {
        if basis.nrows() != o_t + o_r - 1 {
            return Err(Error::invalid(format!(
                "basis has {} rows, expected {}",
                basis.nrows(),
                o_t + o_r - 1
            )));
        }
        let n = basis.ncols();
        let mut phases = DMatrix::zeros(o_t * o_r, n);
        for i in 0..o_t {
            for ip in 0..o_r {
                for t in 0..n {
                    let rx = if ip == 0 {
                        0.0
                    } else {
                        basis[(o_t + ip - 1, t)] - basis[(0, t)]
                    };
                    phases[(i * o_r + ip, t)] = basis[(i, t)] + rx;
                }
            }
        }
        Ok(SumTrajectory { phases, o_t, o_r })
    }
}

/// Wraps a finite phase into `(-pi, pi]`.
pub fn wrap_phase(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::invalid(format!("cannot wrap non-finite phase {x}")));
    }
    Ok(crate::wrap(x))
}

fn check_dims(n_osc: usize, n_slots: usize) -> Result<()> {
    if n_osc == 0 || n_slots == 0 {
        return Err(Error::invalid(format!(
            "need at least one oscillator and one slot, got {n_osc} x {n_slots}"
        )));
    }
    Ok(())
}

/// Generates a trajectory for whichever model `cfg` selects.
pub fn generate<R: Rng + ?Sized>(
    cfg: &PnConfig,
    n_osc: usize,
    n_slots: usize,
    rng: &mut R,
) -> Result<PnTrajectory> {
    match cfg.model {
        PnModel::Wiener => gen_wiener(cfg, n_osc, n_slots, rng),
        PnModel::Mask => gen_mask(cfg, n_osc, n_slots, rng),
    }
}

/// Independent Wiener processes with Gaussian increments of standard
/// deviation `cfg.rho`, starting at zero.
pub fn gen_wiener<R: Rng + ?Sized>(
    cfg: &PnConfig,
    n_osc: usize,
    n_slots: usize,
    rng: &mut R,
) -> Result<PnTrajectory> {
    check_dims(n_osc, n_slots)?;
    if cfg.model != PnModel::Wiener {
        return Err(Error::invalid("gen_wiener called with a non-Wiener config"));
    }
    if !(cfg.rho >= 0.0) {
        return Err(Error::invalid("rho must be >= 0"));
    }
    let mut phases = DMatrix::zeros(n_osc, n_slots);
    for i in 0..n_osc {
        let mut acc = 0.0;
        for n in 1..n_slots {
            let w: f64 = rng.sample(StandardNormal);
            acc += cfg.rho * w;
            phases[(i, n)] = acc;
        }
    }
    Ok(PnTrajectory { phases })
}

/// Smallest FFT used for mask synthesis; sets the frequency resolution
/// (`sample_rate / 65536`, about 400 Hz at 26 MHz).
pub const DEFAULT_MASK_FFT: usize = 1 << 16;

/// Segment start levels in dBc/Hz, anchored at the reference point.
fn segment_start_levels(cfg: &PnConfig) -> Vec<f64> {
    let segs = &cfg.mask_segments;
    let n = segs.len();
    let mut levels = vec![0.0; n];
    let k_ref = segs
        .iter()
        .position(|s| cfg.mask_ref_freq_hz >= s.f_start_hz && cfg.mask_ref_freq_hz < s.f_end_hz)
        .unwrap_or(n - 1);
    let s = &segs[k_ref];
    levels[k_ref] =
        cfg.mask_ref_level_dbc - s.slope_db_per_decade * (cfg.mask_ref_freq_hz / s.f_start_hz).log10();
    for k in k_ref + 1..n {
        let p = &segs[k - 1];
        levels[k] = levels[k - 1] + p.slope_db_per_decade * (p.f_end_hz / p.f_start_hz).log10();
    }
    for k in (0..k_ref).rev() {
        let p = &segs[k];
        levels[k] = levels[k + 1] - p.slope_db_per_decade * (p.f_end_hz / p.f_start_hz).log10();
    }
    levels
}

/// Mask level in dBc/Hz at frequency `f`, before any target scaling.
/// Below the first corner the first level is held; above the last corner the
/// level is `-inf`.
pub fn mask_level_dbc(cfg: &PnConfig, f: f64) -> f64 {
    let segs = &cfg.mask_segments;
    if segs.is_empty() {
        return f64::NEG_INFINITY;
    }
    let levels = segment_start_levels(cfg);
    if f < segs[0].f_start_hz {
        return levels[0];
    }
    for (s, l0) in segs.iter().zip(&levels) {
        if f >= s.f_start_hz && f < s.f_end_hz {
            return l0 + s.slope_db_per_decade * (f / s.f_start_hz).log10();
        }
    }
    f64::NEG_INFINITY
}

/// One-sided phase PSD in rad^2/Hz implied by the raw mask (`2 * L(f)`).
pub fn mask_phase_psd(cfg: &PnConfig, f: f64) -> f64 {
    2.0 * 10f64.powf(mask_level_dbc(cfg, f) / 10.0)
}

fn fft_len(n_slots: usize, min: usize) -> usize {
    (2 * n_slots).next_power_of_two().max(min)
}

/// Variance of the per-slot increment of the raw (unscaled) mask process,
/// summed over the synthesis grid of an `n_fft`-point transform.
pub fn mask_increment_variance(cfg: &PnConfig, n_fft: usize) -> f64 {
    let fs = cfg.sample_rate_hz;
    let df = fs / n_fft as f64;
    (1..n_fft / 2)
        .map(|k| {
            let f = k as f64 * df;
            let s = (PI * f / fs).sin();
            mask_phase_psd(cfg, f) * 4.0 * s * s * df
        })
        .sum()
}

/// Phase noise shaped by a piecewise mask.
///
/// White complex Gaussian bins are scaled by the square root of the target
/// one-sided PSD, Hermitian-symmetrized and inverse transformed; sample 0 is
/// then subtracted. The mask is read as the phase PSD itself.
pub fn gen_mask<R: Rng + ?Sized>(
    cfg: &PnConfig,
    n_osc: usize,
    n_slots: usize,
    rng: &mut R,
) -> Result<PnTrajectory> {
    check_dims(n_osc, n_slots)?;
    if cfg.model != PnModel::Mask {
        return Err(Error::invalid("gen_mask called with a non-mask config"));
    }
    if cfg.mask_segments.is_empty() {
        return Err(Error::invalid("empty phase-noise mask"));
    }
    cfg.validate()?;
    let n_fft = fft_len(n_slots, DEFAULT_MASK_FFT);
    let fs = cfg.sample_rate_hz;
    let df = fs / n_fft as f64;
    let scale = match cfg.mask_target_increment_std {
        Some(t) => {
            let v = mask_increment_variance(cfg, n_fft);
            if v > 0.0 {
                t * t / v
            } else {
                0.0
            }
        }
        None => 1.0,
    };
    // E|X_k|^2 = N * fs * S(f_k) / 2 gives per-sample variance sum_k S(f_k) df
    let amps: Vec<f64> = (0..=n_fft / 2)
        .map(|k| {
            if k == 0 || k == n_fft / 2 {
                return 0.0;
            }
            let s = scale * mask_phase_psd(cfg, k as f64 * df);
            (n_fft as f64 * fs * s / 2.0).sqrt()
        })
        .collect();

    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let mut phases = DMatrix::zeros(n_osc, n_slots);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..n_osc {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for k in 1..n_fft / 2 {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let v = Complex64::new(re, im) * (amps[k] * inv_sqrt2);
            buf[k] = v;
            buf[n_fft - k] = v.conj();
        }
        ifft.process(&mut buf);
        let x0 = buf[0].re / n_fft as f64;
        for n in 0..n_slots {
            phases[(i, n)] = buf[n].re / n_fft as f64 - x0;
        }
    }
    Ok(PnTrajectory { phases })
}

/// Maps atomic trajectories to the `O_t * O_r` sum trajectories.
pub fn atomic_to_sum(traj: &PnTrajectory, o_t: usize, o_r: usize) -> Result<SumTrajectory> {
    if traj.n_osc() != o_t + o_r {
        return Err(Error::invalid(format!(
            "trajectory has {} rows, expected O_t + O_r = {}",
            traj.n_osc(),
            o_t + o_r
        )));
    }
    let n = traj.n_slots();
    let mut phases = DMatrix::zeros(o_t * o_r, n);
    for i in 0..o_t {
        for ip in 0..o_r {
            for t in 0..n {
                phases[(i * o_r + ip, t)] = traj.phases[(i, t)] + traj.phases[(o_t + ip, t)];
            }
        }
    }
    Ok(SumTrajectory { phases, o_t, o_r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{stream, Purpose};
    use proptest::prelude::*;

    fn rng() -> crate::streams::SimRng {
        stream(7, 0, 0, Purpose::PhaseNoise)
    }

    #[test]
    fn wiener_zero_rho_is_zero() {
        let t = gen_wiener(&PnConfig::wiener(0.0), 6, 50, &mut rng()).unwrap();
        assert!(t.phases.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn wiener_reference_dimensions() {
        let t = gen_wiener(&PnConfig::wiener(0.2), 20, 1087, &mut rng()).unwrap();
        assert_eq!(t.phases.shape(), (20, 1087));
        assert!(t.phases.column(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn wiener_increment_variance() {
        let n = 100_000;
        let t = gen_wiener(&PnConfig::wiener(0.2), 2, n, &mut rng()).unwrap();
        for i in 0..2 {
            let ms: f64 = (1..n)
                .map(|k| (t.phases[(i, k)] - t.phases[(i, k - 1)]).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
            // estimator std is rho^2 * sqrt(2 / n) ~ 1.8e-4; 5% of 0.04 is 11 sigma
            assert!((ms - 0.04).abs() < 0.05 * 0.04, "row {i}: {ms}");
            // and 5 sigma of the estimator
            assert!((ms - 0.04).abs() < 5.0 * 0.04 * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn wiener_rejects_empty() {
        assert!(matches!(
            gen_wiener(&PnConfig::wiener(0.2), 0, 5, &mut rng()),
            Err(Error::InvalidArgument(_))
        ));
        assert!(gen_wiener(&PnConfig::wiener(0.2), 3, 0, &mut rng()).is_err());
    }

    #[test]
    fn mask_rejects_empty() {
        let mut cfg = PnConfig::reference_mask();
        cfg.mask_segments.clear();
        assert!(gen_mask(&cfg, 2, 10, &mut rng()).is_err());
    }

    #[test]
    fn mask_levels_follow_slopes() {
        let cfg = PnConfig::reference_mask();
        assert!((mask_level_dbc(&cfg, 100e3) + 133.0).abs() < 1e-12);
        // -3 dB/decade over 2k..100k: log10(50) decades above the corner
        let l2k = -133.0 + 3.0 * 50f64.log10();
        assert!((mask_level_dbc(&cfg, 2e3) - l2k).abs() < 1e-9);
        assert!((mask_level_dbc(&cfg, 500.0) - l2k).abs() < 1e-9);
        assert!((mask_level_dbc(&cfg, 1e6) + 135.0).abs() < 1e-9);
        assert!((mask_level_dbc(&cfg, 5e6) + 135.0).abs() < 1e-9);
    }

    #[test]
    fn flat_minus_infinity_mask_is_zero() {
        let mut cfg = PnConfig::reference_mask();
        cfg.mask_segments = vec![MaskSegment {
            f_start_hz: 1e3,
            f_end_hz: 13e6,
            slope_db_per_decade: 0.0,
        }];
        cfg.mask_ref_freq_hz = 1e4;
        cfg.mask_ref_level_dbc = f64::NEG_INFINITY;
        let t = gen_mask(&cfg, 3, 200, &mut rng()).unwrap();
        assert!(t.phases.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_increment_variance_matches_quadrature() {
        // independent log-spaced trapezoid integration of the same PSD
        let cfg = PnConfig::reference_mask();
        let fs = cfg.sample_rate_hz;
        let integrand = |f: f64| {
            let s = (PI * f / fs).sin();
            mask_phase_psd(&cfg, f) * 4.0 * s * s
        };
        let (lo, hi) = (fs / DEFAULT_MASK_FFT as f64, fs / 2.0);
        let m = 200_000;
        let mut q = 0.0;
        let r = (hi / lo).ln() / m as f64;
        for j in 0..m {
            let (a, b) = (lo * (r * j as f64).exp(), lo * (r * (j + 1) as f64).exp());
            q += 0.5 * (integrand(a) + integrand(b)) * (b - a);
        }
        let grid = mask_increment_variance(&cfg, DEFAULT_MASK_FFT);
        assert!((grid - q).abs() / q < 0.02, "grid {grid} quad {q}");

        let n = 1 << 17;
        let t = gen_mask(&cfg, 1, n, &mut rng()).unwrap();
        let emp: f64 = (1..n)
            .map(|k| (t.phases[(0, k)] - t.phases[(0, k - 1)]).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        assert!((emp - q).abs() / q < 0.1, "empirical {emp} quad {q}");
    }

    #[test]
    fn calibrated_mask_matches_target_std() {
        let mut cfg = PnConfig::reference_mask();
        cfg.mask_target_increment_std = Some(0.2);
        let n = 1 << 17;
        let t = gen_mask(&cfg, 1, n, &mut rng()).unwrap();
        let emp = ((1..n)
            .map(|k| (t.phases[(0, k)] - t.phases[(0, k - 1)]).powi(2))
            .sum::<f64>()
            / (n - 1) as f64)
            .sqrt();
        assert!((emp - 0.2).abs() < 0.25 * 0.2, "{emp}");
        assert_eq!(cfg.equivalent_increment_std(), 0.2);
    }

    #[test]
    fn mask_periodogram_tracks_mask() {
        let cfg = PnConfig::reference_mask();
        let fs = cfg.sample_rate_hz;
        let seg = 1 << 15;
        let n_seg = 16;
        let t = gen_mask(&cfg, 1, seg * n_seg, &mut rng()).unwrap();
        let x: Vec<f64> = t.phases.row(0).iter().copied().collect();
        let fft = FftPlanner::<f64>::new().plan_fft_forward(seg);
        let win: Vec<f64> = (0..seg)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / seg as f64).cos())
            .collect();
        let u: f64 = win.iter().map(|w| w * w).sum();
        let mut psd = vec![0.0; seg / 2];
        for s in 0..n_seg {
            let chunk = &x[s * seg..(s + 1) * seg];
            let mean = chunk.iter().sum::<f64>() / seg as f64;
            let mut buf: Vec<Complex64> = chunk
                .iter()
                .zip(&win)
                .map(|(v, w)| Complex64::new((v - mean) * w, 0.0))
                .collect();
            fft.process(&mut buf);
            for k in 1..seg / 2 {
                psd[k] += 2.0 * buf[k].norm_sqr() / (fs * u) / n_seg as f64;
            }
        }
        let df = fs / seg as f64;
        for f_mid in [(2e3f64 * 100e3).sqrt(), (100e3f64 * 1e6).sqrt(), (1e6f64 * 13e6).sqrt()] {
            let k0 = (f_mid / df).round() as usize;
            let half = (k0 / 8).max(2);
            let avg: f64 = psd[k0 - half..=k0 + half].iter().sum::<f64>() / (2 * half + 1) as f64;
            let target = mask_phase_psd(&cfg, f_mid);
            let err_db = 10.0 * (avg / target).log10();
            assert!(err_db.abs() < 3.0, "at {f_mid} Hz: {err_db} dB");
        }
    }

    #[test]
    fn sum_of_zero_is_zero_and_scalar_case() {
        let t = PnTrajectory::zeros(5, 4);
        let s = atomic_to_sum(&t, 3, 2).unwrap();
        assert!(s.phases.iter().all(|&x| x == 0.0));

        let mut t = PnTrajectory::zeros(2, 3);
        t.phases.row_mut(0).copy_from_slice(&[0.0, 0.1, 0.3]);
        t.phases.row_mut(1).copy_from_slice(&[0.0, -0.5, 0.2]);
        let s = atomic_to_sum(&t, 1, 1).unwrap();
        assert_eq!(s.phases.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.1 - 0.5, 0.3 + 0.2]);
    }

    #[test]
    fn sum_rejects_row_mismatch() {
        let t = PnTrajectory::zeros(5, 4);
        assert!(atomic_to_sum(&t, 3, 3).is_err());
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_phase(0.0).unwrap(), 0.0);
        assert!((wrap_phase(1.5 * PI).unwrap() + 0.5 * PI).abs() < 1e-12);
        assert!((wrap_phase(-7.0 * PI / 3.0).unwrap() + PI / 3.0).abs() < 1e-12);
        assert_eq!(wrap_phase(PI).unwrap(), PI);
        assert_eq!(wrap_phase(-PI).unwrap(), PI);
        assert!(wrap_phase(f64::NAN).is_err());
        assert!(wrap_phase(f64::INFINITY).is_err());
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent_and_periodic(x in -1e3f64..1e3, k in -20i32..20) {
            let w = wrap_phase(x).unwrap();
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap_phase(w).unwrap(), w);
            let shifted = wrap_phase(x + 2.0 * PI * k as f64).unwrap();
            // equal modulo rounding; compare on the circle
            prop_assert!(crate::wrap(shifted - w).abs() < 1e-9);
        }

        #[test]
        fn basis_reconstruction_is_exact(o_t in 1usize..6, o_r in 1usize..5, seed in 0u64..1000) {
            let mut r = stream(seed, 0, 0, Purpose::PhaseNoise);
            let t = gen_wiener(&PnConfig::wiener(0.3), o_t + o_r, 12, &mut r).unwrap();
            let s = atomic_to_sum(&t, o_t, o_r).unwrap();
            let rebuilt = SumTrajectory::from_basis(&s.basis(), o_t, o_r).unwrap();
            for (a, b) in rebuilt.phases.iter().zip(s.phases.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            // basis identity phi_ii' = phi_i1 + phi_1i' - phi_11 for all pairs
            for i in 0..o_t {
                for ip in 0..o_r {
                    for n in 0..12 {
                        let lhs = s.phases[(i * o_r + ip, n)];
                        let rhs = s.phases[(i * o_r, n)] + s.phases[(ip, n)] - s.phases[(0, n)];
                        prop_assert!((lhs - rhs).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
