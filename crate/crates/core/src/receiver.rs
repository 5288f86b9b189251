//! Iterative receiver: phase detection, LMMSE demodulation, demapping,
//! LDPC decoding and hard symbol feedback.
//!
//! Iteration 1 demodulates with the pilot-only phase estimate. Every later
//! iteration first refines the phases by steepest ascent using the symbols
//! mapped from the previous iteration's hard code-bit decisions.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{EstimatedChannel, SystemConfig};
use crate::error::{Error, Result};
use crate::frame::{assemble_symbols, pilot_symbols, FrameLayout};
use crate::ldpc::LdpcCode;
use crate::phase::{
    detect_phases, initial_estimate, marginal_variances, sum_phases, Objective, PhaseEstimate, SdConfig,
};
use crate::qam::{Qam64, BITS_PER_SYMBOL};
use crate::wrap;

/// When the receiver stops iterating before `max_rx_iters`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stopping {
    /// Stop once every decoded information bit is correct (simulation only).
    Genie,
    /// Stop once every codeword satisfies its parity checks.
    Syndrome,
    /// Always run `max_rx_iters` iterations.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReceiverConfig {
    pub max_rx_iters: usize,
    pub stopping: Stopping,
    /// With phase detection off the receiver assumes zero phase noise and
    /// makes a single pass.
    pub phase_detection: bool,
    pub ldpc_iters: usize,
    /// Widen the demapper noise variance by the estimated residual phase
    /// error of each slot.
    pub phase_aware_llr: bool,
    pub sd: SdConfig,
    /// Directory for per-call ascent traces (debugging).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_dir: Option<PathBuf>,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        ReceiverConfig {
            max_rx_iters: 10,
            stopping: Stopping::Genie,
            phase_detection: true,
            ldpc_iters: 50,
            phase_aware_llr: true,
            sd: SdConfig::default(),
            trace_dir: None,
        }
    }
}

impl ReceiverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rx_iters == 0 {
            return Err(Error::config("receiver.max_rx_iters", "must be >= 1"));
        }
        if self.ldpc_iters == 0 {
            return Err(Error::config("receiver.ldpc_iters", "must be >= 1"));
        }
        self.sd.validate()
    }
}

/// Operation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OperationCounts {
    pub sums: u64,
    pub products: u64,
    pub divisions: u64,
    pub lut_accesses: u64,
}

impl OperationCounts {
    pub fn scaled(&self, k: u64) -> Self {
        OperationCounts {
            sums: self.sums * k,
            products: self.products * k,
            divisions: self.divisions * k,
            lut_accesses: self.lut_accesses * k,
        }
    }
}

impl std::ops::AddAssign for OperationCounts {
    fn add_assign(&mut self, o: Self) {
        self.sums += o.sums;
        self.products += o.products;
        self.divisions += o.divisions;
        self.lut_accesses += o.lut_accesses;
    }
}

/// Operations per steepest-ascent step and slot for the gradient and
/// step-size computation. `O_t` and `O_r` enter where the per-oscillator
/// terms appear.
pub fn count_ops(cfg: &SystemConfig) -> OperationCounts {
    let (nt, nr, ot, or) = (cfg.n_t as u64, cfg.n_r as u64, cfg.o_t as u64, cfg.o_r as u64);
    OperationCounts {
        sums: 4 * nt * nt + 8 * nr * nt + 12 * or + 11 * ot,
        products: 5 * nt * (nt - 1) + 10 * nr * nt + 7 * (or + ot),
        divisions: ot + or,
        lut_accesses: nt * (nt - 1) + 2 * nr * nt,
    }
}

/// LMMSE filter `(H'H + sigma^2 (N_t / E_C + 1 / E_s) I)^-1 H'`, `N_t x N_r`.
pub fn lmmse_filter(h_hat: &EstimatedChannel, sigma2: f64, es: f64) -> Result<DMatrix<Complex64>> {
    let h = &h_hat.h_hat;
    let nt = h.ncols();
    let reg = sigma2 * (nt as f64 * h_hat.inv_ec() + 1.0 / es);
    let hh = h.adjoint();
    let gram = &hh * h + DMatrix::<Complex64>::identity(nt, nt) * Complex64::new(reg, 0.0);
    let chol = nalgebra::Cholesky::new(gram).ok_or_else(|| Error::Singular("LMMSE system".into()))?;
    Ok(chol.solve(&hh))
}

/// Frame-constant LMMSE demodulator.
///
/// Phase estimates rotate the filter input and output per slot; because the
/// phase matrices are unitary diagonal this equals filtering with the
/// rotated channel, and the per-stream gain and error variance do not depend
/// on the slot.
#[derive(Debug, Clone)]
pub struct Demodulator {
    pub f: DMatrix<Complex64>,
    /// `(F H)_kk`, real.
    pub gain: Vec<f64>,
    /// Complex error variance of `z_k / gain_k`.
    pub var: Vec<f64>,
    n_ot: usize,
    n_or: usize,
    o_t: usize,
}

impl Demodulator {
    pub fn new(cfg: &SystemConfig, h_hat: &EstimatedChannel, sigma2: f64) -> Result<Self> {
        let f = lmmse_filter(h_hat, sigma2, cfg.es)?;
        let fh = &f * &h_hat.h_hat;
        let nt = cfg.n_t;
        let noise = 2.0 * sigma2 * (1.0 + nt as f64 * cfg.es * h_hat.inv_ec());
        let mut gain = Vec::with_capacity(nt);
        let mut var = Vec::with_capacity(nt);
        for k in 0..nt {
            let g = fh[(k, k)].re;
            let interf: f64 = (0..nt).filter(|&j| j != k).map(|j| fh[(k, j)].norm_sqr()).sum();
            let fk: f64 = f.row(k).iter().map(|v| v.norm_sqr()).sum();
            gain.push(g);
            var.push((interf * cfg.es + fk * noise) / (g * g));
        }
        Ok(Demodulator {
            f,
            gain,
            var,
            n_ot: cfg.n_ot(),
            n_or: cfg.n_or(),
            o_t: cfg.o_t,
        })
    }

    /// Normalized filter outputs `z_k / gain_k` for one slot.
    pub fn demodulate_slot(&self, phi_slot: &[f64], y: &[Complex64]) -> Vec<Complex64> {
        let yr: Vec<Complex64> = y
            .iter()
            .enumerate()
            .map(|(r, v)| v * Complex64::from_polar(1.0, -phi_slot[self.o_t + r / self.n_or]))
            .collect();
        let z = &self.f * DVector::from_vec(yr);
        z.iter()
            .enumerate()
            .map(|(k, v)| v * Complex64::from_polar(1.0 / self.gain[k], -phi_slot[k / self.n_ot]))
            .collect()
    }
}

/// Ground truth consulted by the stopping rule and diagnostics only.
#[derive(Debug, Clone, Copy)]
pub struct Genie<'a> {
    pub info: &'a [Vec<Vec<u8>>],
    /// True sum phases at the frame slots, `O_t O_r x T`.
    pub sum_phases: Option<&'a DMatrix<f64>>,
}

/// Diagnostics of one receiver iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationDiag {
    pub sd_steps: usize,
    pub bit_errors: Option<usize>,
    /// Wrapped sum-phase MSE over data slots.
    pub mse: Option<f64>,
    pub all_converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverOutput {
    /// `decoded[user][codeword]` information bits.
    pub decoded: Vec<Vec<Vec<u8>>>,
    pub iterations: usize,
    pub total_sd_steps: usize,
    /// Objective evaluations spent in the first-step line searches.
    pub line_search_evals: usize,
    /// Gradient and step-size operations of the ascent.
    pub ops: OperationCounts,
    /// Objective evaluations of the first-step line search.
    pub line_search_ops: OperationCounts,
    pub phase: PhaseEstimate,
    pub per_iteration: Vec<IterationDiag>,
}

/// Everything about a frame the receiver knows.
#[derive(Debug, Clone, Copy)]
pub struct RxContext<'a> {
    pub cfg: &'a SystemConfig,
    pub layout: &'a FrameLayout,
    pub code: &'a LdpcCode,
    pub qam: &'a Qam64,
    /// Phase-noise increment variance assumed by the prior.
    pub rho2: f64,
}

/// Runs the iterative receiver on one frame. `y` is `N_r x T`.
pub fn receive_frame(
    ctx: &RxContext<'_>,
    y: &DMatrix<Complex64>,
    h_hat: &EstimatedChannel,
    rx: &ReceiverConfig,
    genie: Option<Genie<'_>>,
) -> Result<ReceiverOutput> {
    let (cfg, layout) = (ctx.cfg, ctx.layout);
    rx.validate()?;
    if y.shape() != (cfg.n_r, layout.n_slots()) {
        return Err(Error::invalid("received frame has the wrong shape"));
    }
    if rx.phase_detection && !(ctx.rho2 > 0.0) {
        return Err(Error::config("pn.rho", "must be > 0 when phase detection is enabled"));
    }
    let sigma2 = cfg.sigma2;
    let demod = Demodulator::new(cfg, h_hat, sigma2)?;
    let mut phase = if rx.phase_detection {
        initial_estimate(y, h_hat, layout, cfg)?
    } else {
        PhaseEstimate::zeros(cfg.n_osc(), layout.n_slots())
    };
    let per_step = count_ops(cfg);
    let t_slots = layout.n_slots() as u64;
    let max_iters = if rx.phase_detection { rx.max_rx_iters } else { 1 };

    let mut out = ReceiverOutput {
        decoded: Vec::new(),
        iterations: 0,
        total_sd_steps: 0,
        line_search_evals: 0,
        ops: OperationCounts::default(),
        line_search_ops: OperationCounts::default(),
        phase: phase.clone(),
        per_iteration: Vec::new(),
    };
    let mut x_hat: Option<DMatrix<Complex64>> = None;
    // symbols trusted for the residual phase variance: pilots plus codewords
    // that satisfied their checks
    let mut x_trusted = pilot_symbols(layout, ctx.qam);
    let track_var = rx.phase_detection && rx.phase_aware_llr;
    for l in 1..=max_iters {
        let mut steps = 0;
        if let Some(xh) = &x_hat {
            let obj = Objective::new(cfg, h_hat, y, xh, sigma2, ctx.rho2)?;
            let sd = detect_phases(&phase, &obj, &rx.sd);
            steps = sd.steps;
            out.ops += per_step.scaled(sd.steps as u64 * t_slots);
            out.line_search_ops += per_step.scaled(sd.line_search_evaluations as u64 * t_slots);
            out.line_search_evals += sd.line_search_evaluations;
            if let Some(dir) = &rx.trace_dir {
                sd.trace.write_csv(&dir.join(format!("sd_trace_iter{l}.csv")))?;
            }
            phase = sd.estimate;
        }
        let phase_var = if track_var {
            let obj = Objective::new(cfg, h_hat, y, &x_trusted, sigma2, ctx.rho2)?;
            Some(marginal_variances(&obj.curvature(&phase.phi), ctx.rho2, PHASE_VAR_CAP))
        } else {
            None
        };
        out.total_sd_steps += steps;
        let Decoded {
            info: decoded,
            hard,
            converged,
            all_converged,
        } = demodulate_and_decode(ctx, &demod, &phase, phase_var.as_ref(), y, rx.ldpc_iters)?;
        out.iterations = l;
        let bit_errors = genie.map(|g| count_bit_errors(g.info, &decoded));
        let mse = genie
            .and_then(|g| g.sum_phases)
            .map(|truth| sum_phase_mse(&phase, truth, layout, cfg));
        out.per_iteration.push(IterationDiag {
            sd_steps: steps,
            bit_errors,
            mse,
            all_converged,
        });
        let stop = match rx.stopping {
            Stopping::Genie => bit_errors == Some(0),
            Stopping::Syndrome => all_converged,
            Stopping::None => false,
        };
        let last = stop || l == max_iters;
        if !last {
            let xh = assemble_symbols(layout, ctx.qam, &hard)?;
            if track_var {
                x_trusted = xh.clone();
                drop_unconverged(layout, &converged, &mut x_trusted);
            }
            x_hat = Some(xh);
        }
        out.decoded = decoded;
        if last {
            break;
        }
    }
    out.phase = phase;
    Ok(out)
}

type Bits = Vec<Vec<Vec<u8>>>;

struct Decoded {
    info: Bits,
    hard: Bits,
    /// Per user and codeword, whether the parity checks were satisfied.
    converged: Vec<Vec<bool>>,
    all_converged: bool,
}

/// Zeroes every data symbol that carries a bit of an unconverged codeword.
fn drop_unconverged(layout: &FrameLayout, converged: &[Vec<bool>], x: &mut DMatrix<Complex64>) {
    let coded = layout.codewords_per_user * layout.code_n;
    for (user, conv) in converged.iter().enumerate() {
        for s in 0..layout.symbols_per_user() {
            let first = s * BITS_PER_SYMBOL;
            let last = (first + BITS_PER_SYMBOL).min(coded);
            let bad = (first..last)
                .map(|b| b / layout.code_n)
                .any(|c| !conv[c]);
            if bad {
                let (slot, ant) = layout.symbol_position(user, s);
                x[(ant, slot)] = Complex64::new(0.0, 0.0);
            }
        }
    }
}

/// Variance of a phase about which nothing is known (uniform on a 2 pi
/// interval).
const PHASE_VAR_CAP: f64 = std::f64::consts::PI * std::f64::consts::PI / 3.0;

/// Demodulates every data slot, demaps and decodes each codeword. With
/// `phase_var` the demapper variance of a stream grows by `E_s` times the
/// residual variance of its sum phases.
fn demodulate_and_decode(
    ctx: &RxContext<'_>,
    demod: &Demodulator,
    phase: &PhaseEstimate,
    phase_var: Option<&DMatrix<f64>>,
    y: &DMatrix<Complex64>,
    ldpc_iters: usize,
) -> Result<Decoded> {
    let layout = ctx.layout;
    // equalized symbols, N_t x L
    let mut z = DMatrix::zeros(layout.n_t, layout.l);
    let mut phi_slot = vec![0.0; phase.phi.nrows()];
    for (d, &t) in layout.data_slots.iter().enumerate() {
        for (k, p) in phi_slot.iter_mut().enumerate() {
            *p = phase.phi[(k, t)];
        }
        let col: Vec<Complex64> = y.column(t).iter().copied().collect();
        let zs = demod.demodulate_slot(&phi_slot, &col);
        for (k, v) in zs.into_iter().enumerate() {
            z[(k, d)] = v;
        }
    }
    let (o_t, o_r, n_ot, es) = (layout.o_t, ctx.cfg.o_r, layout.n_ot, ctx.cfg.es);
    let extra_var = |pv: Option<&DMatrix<f64>>, ant: usize, slot: usize| {
        pv.map_or(0.0, |v| {
            let rx_mean = (0..o_r).map(|ip| v[(o_t + ip, slot)]).sum::<f64>() / o_r as f64;
            es * (v[(ant / n_ot, slot)] + rx_mean)
        })
    };
    let n = ctx.code.n();
    let mut llr = vec![0.0; layout.bits_per_user()];
    let mut decoded = Vec::with_capacity(layout.o_t);
    let mut hard = Vec::with_capacity(layout.o_t);
    let mut converged = Vec::with_capacity(layout.o_t);
    let mut all_converged = true;
    for user in 0..layout.o_t {
        for s in 0..layout.symbols_per_user() {
            let (slot, ant) = layout.symbol_position(user, s);
            let d = match layout.kinds[slot] {
                crate::frame::SlotKind::Data { index } => index,
                crate::frame::SlotKind::Pilot { .. } => unreachable!("symbols sit in data slots"),
            };
            ctx.qam.demap_llr_into(
                z[(ant, d)],
                demod.var[ant] + extra_var(phase_var, ant, slot),
                &mut llr[s * BITS_PER_SYMBOL..(s + 1) * BITS_PER_SYMBOL],
            );
        }
        let mut user_info = Vec::with_capacity(layout.codewords_per_user);
        let mut user_hard = Vec::with_capacity(layout.codewords_per_user);
        let mut user_conv = Vec::with_capacity(layout.codewords_per_user);
        for c in 0..layout.codewords_per_user {
            let res = ctx.code.decode(&llr[c * n..(c + 1) * n], ldpc_iters);
            all_converged &= res.converged;
            user_info.push(res.info);
            user_hard.push(res.codeword);
            user_conv.push(res.converged);
        }
        decoded.push(user_info);
        hard.push(user_hard);
        converged.push(user_conv);
    }
    Ok(Decoded {
        info: decoded,
        hard,
        converged,
        all_converged,
    })
}

/// Information-bit errors between transmitted and decoded frames.
pub fn count_bit_errors(truth: &[Vec<Vec<u8>>], decoded: &[Vec<Vec<u8>>]) -> usize {
    truth
        .iter()
        .flatten()
        .zip(decoded.iter().flatten())
        .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count())
        .sum()
}

/// Wrapped sum-phase MSE over the data slots.
pub fn sum_phase_mse(phase: &PhaseEstimate, truth_sums: &DMatrix<f64>, layout: &FrameLayout, cfg: &SystemConfig) -> f64 {
    let est = sum_phases(&phase.phi, cfg.o_t, cfg.o_r);
    let mut acc = 0.0;
    for &t in &layout.data_slots {
        for k in 0..est.nrows() {
            acc += wrap(est[(k, t)] - truth_sums[(k, t)]).powi(2);
        }
    }
    acc / (layout.data_slots.len() * est.nrows()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{apply_channel, estimate_channel, gen_rician, ChannelMatrix};
    use crate::frame::generate_frame;
    use crate::pn::{atomic_to_sum, gen_wiener, PnConfig, PnTrajectory};
    use crate::streams::{stream, Purpose};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn rand_matrix(r: usize, c: usize, seed: u64) -> DMatrix<Complex64> {
        let mut g = stream(seed, 0, 0, Purpose::Channel);
        DMatrix::from_fn(r, c, |_, _| {
            Complex64::new(g.sample::<f64, _>(StandardNormal), g.sample::<f64, _>(StandardNormal))
        })
    }

    #[test]
    fn zero_forcing_limit() {
        let h = EstimatedChannel::perfect(rand_matrix(8, 4, 1));
        let f = lmmse_filter(&h, 1e-8, 1.0).unwrap();
        let err = (&f * &h.h_hat - DMatrix::<Complex64>::identity(4, 4)).norm();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn scaled_identity_channel() {
        let c = Complex64::new(0.6, -0.8) * 1.5;
        let h = EstimatedChannel {
            h_hat: DMatrix::identity(3, 3) * c,
            ec: 10.0,
        };
        let (sigma2, es) = (0.2, 2.0);
        let f = lmmse_filter(&h, sigma2, es).unwrap();
        let expect = c.conj() / (c.norm_sqr() + sigma2 * (3.0 / 10.0 + 1.0 / es));
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { expect } else { Complex64::new(0.0, 0.0) };
                assert!((f[(i, j)] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn filter_matches_dense_solve() {
        let h = EstimatedChannel {
            h_hat: rand_matrix(8, 4, 2),
            ec: 3.0,
        };
        let (sigma2, es) = (0.3, 1.0);
        let f = lmmse_filter(&h, sigma2, es).unwrap();
        let reg = sigma2 * (4.0 / 3.0 + 1.0);
        let hh = h.h_hat.adjoint();
        let m = &hh * &h.h_hat + DMatrix::<Complex64>::identity(4, 4) * Complex64::new(reg, 0.0);
        let want = m.lu().solve(&hh).unwrap();
        assert!((f - want).norm() < 1e-10);
    }

    fn geometry() -> SystemConfig {
        SystemConfig {
            n_t: 4,
            n_r: 8,
            o_t: 2,
            o_r: 2,
            k_rice_db: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn rotated_filter_equals_filter_on_rotated_channel() {
        let cfg = geometry();
        let h = EstimatedChannel {
            h_hat: rand_matrix(8, 4, 3),
            ec: 5.0,
        };
        let phi = [0.3, -1.1, 2.0, 0.4];
        let demod = Demodulator::new(&cfg, &h, 0.1).unwrap();
        let rotated = EstimatedChannel {
            h_hat: crate::channel::rotate(&cfg, &h.h_hat, &phi),
            ec: 5.0,
        };
        let f_eff = lmmse_filter(&rotated, 0.1, 1.0).unwrap();
        let y: Vec<Complex64> = rand_matrix(8, 1, 4).iter().copied().collect();
        let a = demod.demodulate_slot(&phi, &y);
        let b = &f_eff * DVector::from_vec(y);
        for k in 0..4 {
            assert!((a[k] * demod.gain[k] - b[k]).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_phase_is_plain_filtering() {
        let cfg = geometry();
        let h = EstimatedChannel::perfect(rand_matrix(8, 4, 5));
        let demod = Demodulator::new(&cfg, &h, 0.1).unwrap();
        let y: Vec<Complex64> = rand_matrix(8, 1, 6).iter().copied().collect();
        let a = demod.demodulate_slot(&[0.0; 4], &y);
        let b = &demod.f * DVector::from_vec(y);
        for k in 0..4 {
            assert!((a[k] * demod.gain[k] - b[k]).norm() < 1e-14);
        }
    }

    #[test]
    fn noiseless_exact_phase_recovers_symbols() {
        let cfg = SystemConfig {
            sigma2: 1e-300,
            ..geometry()
        };
        let h = gen_rician(&cfg, &mut stream(7, 0, 0, Purpose::Channel)).unwrap();
        let qam = Qam64::new(1.0);
        let x = DVector::from_fn(4, |k, _| qam.point(k as u8 * 13));
        let phi = [0.5, -0.2, 1.3, -2.0];
        let y = apply_channel(&cfg, &h, &phi, &x, &mut stream(7, 0, 0, Purpose::Noise)).unwrap();
        // the filter is built at a tiny but representable noise level
        let demod = Demodulator::new(&cfg, &EstimatedChannel::perfect(h.h.clone()), 1e-14).unwrap();
        let z = demod.demodulate_slot(&phi, y.as_slice());
        for k in 0..4 {
            assert!((z[k] - x[k]).norm() < 1e-8, "{}", (z[k] - x[k]).norm());
        }
    }

    #[test]
    fn variance_formula_matches_monte_carlo() {
        for (seed, ec) in [(8u64, None), (9, Some(10.0))] {
            let cfg = SystemConfig {
                ec_over_es_db: ec,
                sigma2: 0.15,
                ..geometry()
            };
            let h = gen_rician(&cfg, &mut stream(seed, 0, 0, Purpose::Channel)).unwrap();
            let mut r = stream(seed, 0, 0, Purpose::Noise);
            let h_hat = estimate_channel(&h, &[0.0; 4], &cfg, &mut r).unwrap();
            let demod = Demodulator::new(&cfg, &h_hat, cfg.sigma2).unwrap();
            let qam = Qam64::new(1.0);
            let csi_sd = (cfg.sigma2 * h_hat.inv_ec()).sqrt();
            let mut err = [0.0; 4];
            let draws = 10_000;
            for _ in 0..draws {
                let x = DVector::from_fn(4, |_, _| qam.point(r.random_range(0..64)));
                // true channel seen through the estimate: H = H^ - E
                let h_true = DMatrix::from_fn(8, 4, |i, j| {
                    let e = Complex64::new(r.sample::<f64, _>(StandardNormal), r.sample::<f64, _>(StandardNormal));
                    h_hat.h_hat[(i, j)] - e * csi_sd
                });
                let y = apply_channel(&cfg, &ChannelMatrix { h: h_true }, &[0.0; 4], &x, &mut r).unwrap();
                let z = demod.demodulate_slot(&[0.0; 4], y.as_slice());
                for k in 0..4 {
                    err[k] += (z[k] - x[k]).norm_sqr();
                }
            }
            for k in 0..4 {
                let sinr_mc = 1.0 / (err[k] / draws as f64);
                let sinr = 1.0 / demod.var[k];
                assert!((sinr_mc / sinr - 1.0).abs() < 0.1, "stream {k}: {sinr_mc} vs {sinr}");
            }
        }
    }

    #[test]
    fn op_count_formulas() {
        let unit = SystemConfig {
            n_t: 1,
            n_r: 1,
            o_t: 1,
            o_r: 1,
            ..Default::default()
        };
        assert_eq!(count_ops(&unit).sums, 35);
        let full = SystemConfig::reference();
        let ops = count_ops(&full);
        assert_eq!(ops.sums, 4 * 1024 + 8 * 2048 + 12 * 4 + 11 * 16);
        assert_eq!(ops.sums, 20704);
        assert_eq!(ops.divisions, 20);
        let mut acc = OperationCounts::default();
        acc += ops;
        acc += ops.scaled(2);
        assert_eq!(acc, ops.scaled(3));
    }

    #[test]
    fn bit_error_count() {
        let a = vec![vec![vec![0, 1, 1], vec![0, 0, 0]]];
        let b = vec![vec![vec![1, 1, 1], vec![0, 1, 1]]];
        assert_eq!(count_bit_errors(&a, &b), 3);
    }

    struct Sim {
        cfg: SystemConfig,
        layout: FrameLayout,
        code: LdpcCode,
        qam: Qam64,
        info: Vec<Vec<Vec<u8>>>,
        y: DMatrix<Complex64>,
        h_hat: EstimatedChannel,
        sums: DMatrix<f64>,
    }

    fn simulate(cfg: SystemConfig, rho: f64, snr_db: f64, seed: u64) -> Sim {
        let cfg = SystemConfig {
            sigma2: cfg.sigma2_for_snr_db(snr_db),
            ..cfg
        };
        let code = LdpcCode::reference();
        let layout = FrameLayout::new(&cfg, code.n()).unwrap();
        let qam = Qam64::new(cfg.es);
        let frame = generate_frame(&layout, &code, &qam, &mut stream(seed, 0, 0, Purpose::Data)).unwrap();
        let h = gen_rician(&cfg, &mut stream(seed, 0, 0, Purpose::Channel)).unwrap();
        let traj = if rho > 0.0 {
            gen_wiener(&PnConfig::wiener(rho), cfg.n_osc(), layout.n_slots() + 1, &mut stream(seed, 0, 0, Purpose::PhaseNoise)).unwrap()
        } else {
            PnTrajectory::zeros(cfg.n_osc(), layout.n_slots() + 1)
        };
        let h_hat = estimate_channel(&h, &traj.slot(0), &cfg, &mut stream(seed, 0, 0, Purpose::CsiError)).unwrap();
        let mut nr = stream(seed, 0, 0, Purpose::Noise);
        let mut y = DMatrix::zeros(cfg.n_r, layout.n_slots());
        for t in 0..layout.n_slots() {
            let col = apply_channel(&cfg, &h, &traj.slot(t + 1), &frame.x.column(t).into_owned(), &mut nr).unwrap();
            y.set_column(t, &col);
        }
        let all = atomic_to_sum(&traj, cfg.o_t, cfg.o_r).unwrap().phases;
        let sums = all.columns(1, layout.n_slots()).into_owned();
        Sim {
            cfg,
            layout,
            code,
            qam,
            info: frame.info,
            y,
            h_hat,
            sums,
        }
    }

    fn run(s: &Sim, rx: &ReceiverConfig, rho2: f64) -> ReceiverOutput {
        let ctx = RxContext {
            cfg: &s.cfg,
            layout: &s.layout,
            code: &s.code,
            qam: &s.qam,
            rho2,
        };
        let genie = Genie {
            info: &s.info,
            sum_phases: Some(&s.sums),
        };
        receive_frame(&ctx, &s.y, &s.h_hat, rx, Some(genie)).unwrap()
    }

    #[test]
    fn pn_free_high_snr_decodes_without_phase_detection() {
        let s = simulate(SystemConfig::default(), 0.0, 25.0, 1);
        let rx = ReceiverConfig {
            phase_detection: false,
            ..Default::default()
        };
        let out = run(&s, &rx, 0.0);
        assert_eq!(out.iterations, 1);
        assert_eq!(count_bit_errors(&s.info, &out.decoded), 0);
    }

    #[test]
    fn phase_detection_requires_positive_rho() {
        let s = simulate(SystemConfig::default(), 0.0, 25.0, 1);
        let ctx = RxContext {
            cfg: &s.cfg,
            layout: &s.layout,
            code: &s.code,
            qam: &s.qam,
            rho2: 0.0,
        };
        let err = receive_frame(&ctx, &s.y, &s.h_hat, &ReceiverConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::Config { key, .. } if key == "pn.rho"));
    }

    #[test]
    fn iterations_reduce_phase_error() {
        let s = simulate(SystemConfig::default(), 0.05, 16.0, 2);
        let rx = ReceiverConfig {
            stopping: Stopping::None,
            max_rx_iters: 4,
            ..Default::default()
        };
        let out = run(&s, &rx, 0.05 * 0.05);
        assert_eq!(out.iterations, 4);
        let first = out.per_iteration[0].mse.unwrap();
        let last = out.per_iteration[3].mse.unwrap();
        assert!(last < first, "{last} vs {first}");
        assert_eq!(out.per_iteration[0].sd_steps, 0);
        assert!(out.total_sd_steps > 0);
        let per = count_ops(&s.cfg);
        assert_eq!(out.ops, per.scaled((out.total_sd_steps * s.layout.n_slots()) as u64));
    }

    #[test]
    fn genie_stop_holds_the_converged_state() {
        let s = simulate(SystemConfig::default(), 0.02, 18.0, 3);
        let genie = ReceiverConfig::default();
        let full = ReceiverConfig {
            stopping: Stopping::None,
            ..Default::default()
        };
        let a = run(&s, &genie, 4e-4);
        let b = run(&s, &full, 4e-4);
        assert_eq!(count_bit_errors(&s.info, &a.decoded), 0);
        assert_eq!(a.per_iteration[..a.iterations], b.per_iteration[..a.iterations]);
        assert_eq!(count_bit_errors(&s.info, &b.decoded), 0);
    }

    #[test]
    fn trace_files_written_on_request() {
        let s = simulate(SystemConfig::default(), 0.05, 16.0, 4);
        let dir = tempfile::tempdir().unwrap();
        let rx = ReceiverConfig {
            stopping: Stopping::None,
            max_rx_iters: 2,
            trace_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        run(&s, &rx, 0.0025);
        let text = std::fs::read_to_string(dir.path().join("sd_trace_iter2.csv")).unwrap();
        assert!(text.starts_with("step,objective,lambda"));
    }

    #[test]
    fn unconverged_codewords_are_dropped_from_trusted_symbols() {
        let s = simulate(SystemConfig::default(), 0.0, 20.0, 6);
        let codewords: Vec<Vec<Vec<u8>>> = s
            .info
            .iter()
            .map(|u| u.iter().map(|i| s.code.encode(i).unwrap()).collect())
            .collect();
        let full = assemble_symbols(&s.layout, &s.qam, &codewords).unwrap();
        let mut conv = vec![vec![true; s.layout.codewords_per_user]; s.layout.o_t];
        conv[1][0] = false;
        let mut x = full.clone();
        drop_unconverged(&s.layout, &conv, &mut x);
        let n = s.layout.code_n;
        for user in 0..s.layout.o_t {
            for sym in 0..s.layout.symbols_per_user() {
                let (slot, ant) = s.layout.symbol_position(user, sym);
                // codeword 0 covers bits 0..n, so symbols up to the one holding bit n-1
                let hit = user == 1 && sym * BITS_PER_SYMBOL < n;
                if hit {
                    assert_eq!(x[(ant, slot)], Complex64::new(0.0, 0.0));
                } else {
                    assert_eq!(x[(ant, slot)], full[(ant, slot)]);
                }
            }
        }
        for &b in &s.layout.pilot_blocks {
            assert_eq!(x.column(b), full.column(b));
        }
    }

    #[test]
    fn config_validation() {
        let bad = ReceiverConfig {
            max_rx_iters: 0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "receiver.max_rx_iters"));
        assert_relative_eq!(ReceiverConfig::default().sd.theta, 1e-6);
    }
}
