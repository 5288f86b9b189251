//! Phase detection: pilot-based initialization and steepest ascent on the
//! approximate EM objective.
//!
//! Estimates are atomic phases, one row per oscillator (transmit first) and
//! one column per frame slot, relative to the channel-estimation instant.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bcrb::{incidence_matrix, jacobian};
use crate::channel::{EstimatedChannel, SystemConfig};
use crate::error::{Error, Result};
use crate::frame::FrameLayout;
use crate::wrap;

/// Atomic phase estimate, `(O_t + O_r) x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseEstimate {
    pub phi: DMatrix<f64>,
}

impl PhaseEstimate {
    pub fn zeros(n_osc: usize, n_slots: usize) -> Self {
        PhaseEstimate {
            phi: DMatrix::zeros(n_osc, n_slots),
        }
    }

    /// Sum phases, row `i * O_r + i'`.
    pub fn sums(&self, o_t: usize, o_r: usize) -> DMatrix<f64> {
        sum_phases(&self.phi, o_t, o_r)
    }
}

/// Maps atomic phases (one column per slot) to sum phases.
pub fn sum_phases(phi: &DMatrix<f64>, o_t: usize, o_r: usize) -> DMatrix<f64> {
    DMatrix::from_fn(o_t * o_r, phi.ncols(), |row, n| {
        phi[(row / o_r, n)] + phi[(o_t + row % o_r, n)]
    })
}

/// Steepest-ascent parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdConfig {
    /// Relative objective increment below which the ascent stops.
    pub theta: f64,
    pub max_steps: usize,
    pub armijo_c: f64,
    pub lambda_init: f64,
    pub backtrack_factor: f64,
}

impl Default for SdConfig {
    fn default() -> Self {
        SdConfig {
            theta: 1e-6,
            max_steps: 300,
            armijo_c: 0.5,
            lambda_init: 1.0,
            backtrack_factor: 0.5,
        }
    }
}

impl SdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::config("receiver.sd.theta", "must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("receiver.sd.max_steps", "must be >= 1"));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::config("receiver.sd.armijo_c", "must lie in (0, 1)"));
        }
        if !(self.lambda_init > 0.0 && self.lambda_init.is_finite()) {
            return Err(Error::config("receiver.sd.lambda_init", "must be positive"));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::config("receiver.sd.backtrack_factor", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Coarse sum-phase estimates at the pilot blocks, `O_t O_r x B`.
///
/// For pair `(i, i')` and block `b` this is
/// `arg((H_{i'i} p_i)^H y_{i'})` in the slot where oscillator `i` sends its
/// pilot.
pub fn pilot_coarse_estimate(
    y: &DMatrix<Complex64>,
    h_hat: &EstimatedChannel,
    layout: &FrameLayout,
    cfg: &SystemConfig,
) -> Result<DMatrix<f64>> {
    if y.nrows() != cfg.n_r || y.ncols() != layout.n_slots() {
        return Err(Error::invalid(format!(
            "received matrix is {}x{}, expected {}x{}",
            y.nrows(),
            y.ncols(),
            cfg.n_r,
            layout.n_slots()
        )));
    }
    if layout.n_blocks() == 0 {
        return Err(Error::invalid("frame has no pilot blocks"));
    }
    let (o_t, o_r, n_ot, n_or) = (cfg.o_t, cfg.o_r, cfg.n_ot(), cfg.n_or());
    let mut out = DMatrix::zeros(o_t * o_r, layout.n_blocks());
    for (b, &start) in layout.pilot_blocks.iter().enumerate() {
        for i in 0..o_t {
            let p = layout.pilot(i, cfg.es);
            let t = start + i;
            for ip in 0..o_r {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in ip * n_or..(ip + 1) * n_or {
                    let mut hp = Complex64::new(0.0, 0.0);
                    for (j, pj) in p.iter().enumerate() {
                        hp += h_hat.h_hat[(r, i * n_ot + j)] * pj;
                    }
                    acc += hp.conj() * y[(r, t)];
                }
                out[(i * o_r + ip, b)] = acc.arg();
            }
        }
    }
    Ok(out)
}

/// Least-squares atomic phases from sum phases, one column per pilot block.
///
/// Each block's sums are first unwrapped against the sums predicted by the
/// previous block's solution (zero before the first block); the minimum-norm
/// solution then splits the unobservable common mode evenly.
pub fn sum_to_atomic_ls(sums: &DMatrix<f64>, o_t: usize, o_r: usize) -> DMatrix<f64> {
    let a = incidence_matrix(o_t, o_r);
    let j = jacobian(o_t, o_r);
    let mut out = DMatrix::zeros(o_t + o_r, sums.ncols());
    let mut pred = nalgebra::DVector::zeros(o_t * o_r);
    for b in 0..sums.ncols() {
        let s = nalgebra::DVector::from_fn(o_t * o_r, |k, _| {
            pred[k] + wrap(sums[(k, b)] - pred[k])
        });
        let atomic = &j * s;
        pred = &a * &atomic;
        out.set_column(b, &atomic);
    }
    out
}

/// Piecewise-linear interpolation of per-oscillator values known at
/// `times` (ascending) onto slots `0..n_slots`, held constant outside.
/// Each row is unwrapped along time first.
pub fn interpolate_init(values: &DMatrix<f64>, times: &[f64], n_slots: usize) -> Result<PhaseEstimate> {
    if times.is_empty() || values.ncols() != times.len() {
        return Err(Error::invalid("need one value column per pilot time"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("pilot times must increase"));
    }
    let n_osc = values.nrows();
    let mut phi = DMatrix::zeros(n_osc, n_slots);
    for i in 0..n_osc {
        let mut v: Vec<f64> = values.row(i).iter().copied().collect();
        for b in 1..v.len() {
            v[b] = v[b - 1] + wrap(v[b] - v[b - 1]);
        }
        let mut seg = 0;
        for n in 0..n_slots {
            let t = n as f64;
            phi[(i, n)] = if t <= times[0] {
                v[0]
            } else if t >= times[times.len() - 1] {
                v[v.len() - 1]
            } else {
                while times[seg + 1] < t {
                    seg += 1;
                }
                let w = (t - times[seg]) / (times[seg + 1] - times[seg]);
                v[seg] + w * (v[seg + 1] - v[seg])
            };
        }
    }
    Ok(PhaseEstimate { phi })
}

/// Pilot-only initial estimate over the whole frame.
pub fn initial_estimate(
    y: &DMatrix<Complex64>,
    h_hat: &EstimatedChannel,
    layout: &FrameLayout,
    cfg: &SystemConfig,
) -> Result<PhaseEstimate> {
    let sums = pilot_coarse_estimate(y, h_hat, layout, cfg)?;
    let atomic = sum_to_atomic_ls(&sums, cfg.o_t, cfg.o_r);
    let times: Vec<f64> = (0..layout.n_blocks()).map(|b| layout.block_center(b)).collect();
    interpolate_init(&atomic, &times, layout.n_slots())
}

/// Log-prior of a Wiener trajectory up to constants.
pub fn prior_value(phi: &DMatrix<f64>, rho2: f64) -> f64 {
    let mut acc = 0.0;
    for n in 1..phi.ncols() {
        for i in 0..phi.nrows() {
            let d = wrap(phi[(i, n)] - phi[(i, n - 1)]);
            acc += d * d;
        }
    }
    -acc / (2.0 * rho2)
}

/// Adds the gradient of [`prior_value`] to `grad`.
pub fn add_prior_gradient(phi: &DMatrix<f64>, rho2: f64, grad: &mut DMatrix<f64>) {
    let t = phi.ncols();
    for n in 0..t {
        for i in 0..phi.nrows() {
            let mut g = 0.0;
            if n > 0 {
                g += wrap(phi[(i, n - 1)] - phi[(i, n)]);
            }
            if n + 1 < t {
                g += wrap(phi[(i, n + 1)] - phi[(i, n)]);
            }
            grad[(i, n)] += g / rho2;
        }
    }
}

/// The EM objective `g(Phi) = h(Phi) + log f(Phi)` for fixed symbol
/// estimates.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    n_t: usize,
    n_r: usize,
    o_t: usize,
    o_r: usize,
    n_ot: usize,
    n_or: usize,
    h: &'a DMatrix<Complex64>,
    y: &'a DMatrix<Complex64>,
    x: &'a DMatrix<Complex64>,
    rho2: f64,
    /// `1 / (sigma^2 (1 + |x_n|^2 / E_C))` per slot.
    weight: Vec<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(
        cfg: &SystemConfig,
        h_hat: &'a EstimatedChannel,
        y: &'a DMatrix<Complex64>,
        x_hat: &'a DMatrix<Complex64>,
        sigma2: f64,
        rho2: f64,
    ) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::invalid("sigma2 must be positive"));
        }
        if !(rho2 > 0.0 && rho2.is_finite()) {
            return Err(Error::invalid("rho^2 must be positive for phase detection"));
        }
        if h_hat.h_hat.shape() != (cfg.n_r, cfg.n_t)
            || y.nrows() != cfg.n_r
            || x_hat.nrows() != cfg.n_t
            || y.ncols() != x_hat.ncols()
        {
            return Err(Error::invalid("objective: dimension mismatch"));
        }
        let inv_ec = h_hat.inv_ec();
        let weight = x_hat
            .column_iter()
            .map(|c| 1.0 / (sigma2 * (1.0 + inv_ec * c.norm_squared())))
            .collect();
        Ok(Objective {
            n_t: cfg.n_t,
            n_r: cfg.n_r,
            o_t: cfg.o_t,
            o_r: cfg.o_r,
            n_ot: cfg.n_ot(),
            n_or: cfg.n_or(),
            h: &h_hat.h_hat,
            y,
            x: x_hat,
            rho2,
            weight,
        })
    }

    pub fn n_osc(&self) -> usize {
        self.o_t + self.o_r
    }

    pub fn n_slots(&self) -> usize {
        self.y.ncols()
    }

    fn check(&self, phi: &DMatrix<f64>) {
        assert_eq!(phi.shape(), (self.n_osc(), self.n_slots()), "phase matrix shape");
    }

    /// Per-slot likelihood term and, when `grad` is given, its gradient
    /// written into column `n`.
    fn slot(&self, phi: &DMatrix<f64>, n: usize, scratch: &mut Scratch, grad: Option<&mut DMatrix<f64>>) -> f64 {
        let (n_t, n_r) = (self.n_t, self.n_r);
        let hs = self.h.as_slice();
        let w = self.weight[n];
        for t in 0..n_t {
            scratch.xr[t] = self.x[(t, n)] * Complex64::from_polar(1.0, phi[(t / self.n_ot, n)]);
        }
        scratch.u.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for t in 0..n_t {
            let xt = scratch.xr[t];
            if xt.re == 0.0 && xt.im == 0.0 {
                continue;
            }
            let col = &hs[t * n_r..(t + 1) * n_r];
            for (u, h) in scratch.u.iter_mut().zip(col) {
                *u += h * xt;
            }
        }
        let mut corr = 0.0;
        let mut energy = 0.0;
        for r in 0..n_r {
            let rot = Complex64::from_polar(1.0, -phi[(self.o_t + r / self.n_or, n)]);
            let wr = rot * self.y[(r, n)];
            scratch.w[r] = wr;
            let u = scratch.u[r];
            corr += u.re * wr.re + u.im * wr.im;
            energy += u.norm_sqr();
        }
        if let Some(g) = grad {
            for ip in 0..self.o_r {
                let mut acc = 0.0;
                for r in ip * self.n_or..(ip + 1) * self.n_or {
                    // Im(conj(u) w)
                    let (u, wr) = (scratch.u[r], scratch.w[r]);
                    acc += u.re * wr.im - u.im * wr.re;
                }
                g[(self.o_t + ip, n)] = acc * w;
            }
            for r in 0..n_r {
                scratch.d[r] = scratch.w[r] - scratch.u[r];
            }
            for i in 0..self.o_t {
                let mut acc = 0.0;
                for t in i * self.n_ot..(i + 1) * self.n_ot {
                    let xt = scratch.xr[t];
                    if xt.re == 0.0 && xt.im == 0.0 {
                        continue;
                    }
                    let col = &hs[t * n_r..(t + 1) * n_r];
                    let mut q = Complex64::new(0.0, 0.0);
                    for (h, d) in col.iter().zip(&scratch.d) {
                        q += h.conj() * d;
                    }
                    // Im(conj(xr_t) q_t)
                    acc += xt.re * q.im - xt.im * q.re;
                }
                g[(i, n)] = acc * w;
            }
        }
        (corr - 0.5 * energy) * w
    }

    pub fn value(&self, phi: &DMatrix<f64>) -> f64 {
        self.check(phi);
        let mut s = Scratch::new(self.n_t, self.n_r);
        let lik: f64 = (0..self.n_slots()).map(|n| self.slot(phi, n, &mut s, None)).sum();
        lik + prior_value(phi, self.rho2)
    }

    pub fn value_and_gradient(&self, phi: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        self.check(phi);
        let mut s = Scratch::new(self.n_t, self.n_r);
        let mut grad = DMatrix::zeros(self.n_osc(), self.n_slots());
        let mut lik = 0.0;
        for n in 0..self.n_slots() {
            lik += self.slot(phi, n, &mut s, Some(&mut grad));
        }
        add_prior_gradient(phi, self.rho2, &mut grad);
        (lik + prior_value(phi, self.rho2), grad)
    }

    pub fn gradient(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        self.value_and_gradient(phi).1
    }

    /// Gauss-Newton curvature of the likelihood term, one entry per
    /// oscillator and slot: `w ||H_i x_i||^2` for a transmit oscillator and
    /// `w ||u_{i'}||^2` for a receive oscillator.
    pub fn curvature(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        self.check(phi);
        let n_r = self.n_r;
        let hs = self.h.as_slice();
        let mut out = DMatrix::zeros(self.n_osc(), self.n_slots());
        let mut u = vec![Complex64::new(0.0, 0.0); n_r];
        let mut part = vec![Complex64::new(0.0, 0.0); n_r];
        for n in 0..self.n_slots() {
            let w = self.weight[n];
            u.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for i in 0..self.o_t {
                part.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                for t in i * self.n_ot..(i + 1) * self.n_ot {
                    let xt = self.x[(t, n)] * Complex64::from_polar(1.0, phi[(i, n)]);
                    for (p, h) in part.iter_mut().zip(&hs[t * n_r..(t + 1) * n_r]) {
                        *p += h * xt;
                    }
                }
                out[(i, n)] = w * part.iter().map(|p| p.norm_sqr()).sum::<f64>();
                for (a, p) in u.iter_mut().zip(&part) {
                    *a += p;
                }
            }
            for ip in 0..self.o_r {
                let e: f64 = u[ip * self.n_or..(ip + 1) * self.n_or].iter().map(|v| v.norm_sqr()).sum();
                out[(self.o_t + ip, n)] = w * e;
            }
        }
        out
    }
}

/// Marginal variances of each oscillator's phase under a Gaussian model whose
/// precision is the chain prior plus the diagonal `curvature`, oscillators
/// treated independently. Entries are capped at `cap`.
pub fn marginal_variances(curvature: &DMatrix<f64>, rho2: f64, cap: f64) -> DMatrix<f64> {
    let (rows, n) = curvature.shape();
    let mut out = DMatrix::from_element(rows, n, cap);
    let e2 = 1.0 / (rho2 * rho2);
    let diag = |i: usize, k: usize| {
        let neighbours = usize::from(k > 0) + usize::from(k + 1 < n);
        curvature[(i, k)] + neighbours as f64 / rho2
    };
    let mut fwd = vec![0.0; n];
    let mut bwd = vec![0.0; n];
    for i in 0..rows {
        // Schur complements of the chain to the left and to the right of k
        for k in 1..n {
            let s = diag(i, k - 1) - fwd[k - 1];
            fwd[k] = if s > 0.0 { e2 / s } else { f64::INFINITY };
        }
        for k in (0..n.saturating_sub(1)).rev() {
            let s = diag(i, k + 1) - bwd[k + 1];
            bwd[k] = if s > 0.0 { e2 / s } else { f64::INFINITY };
        }
        for k in 0..n {
            let p = diag(i, k) - fwd[k] - bwd[k];
            if p > 0.0 && p.is_finite() {
                out[(i, k)] = (1.0 / p).min(cap);
            }
        }
    }
    out
}

struct Scratch {
    xr: Vec<Complex64>,
    u: Vec<Complex64>,
    w: Vec<Complex64>,
    d: Vec<Complex64>,
}

impl Scratch {
    fn new(n_t: usize, n_r: usize) -> Self {
        let z = Complex64::new(0.0, 0.0);
        Scratch {
            xr: vec![z; n_t],
            u: vec![z; n_r],
            w: vec![z; n_r],
            d: vec![z; n_r],
        }
    }
}

/// Outcome of the backtracking line search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoStep {
    pub lambda: f64,
    /// Objective at the accepted point.
    pub value: f64,
    /// Objective evaluations spent, the accepted one included.
    pub trials: usize,
    /// `false` if no candidate met the condition within the budget; the last
    /// candidate is returned.
    pub satisfied: bool,
}

pub const MAX_HALVINGS: usize = 60;

/// Largest `lambda_init * backtrack_factor^k` with
/// `g(phi0 + lambda grad0) >= g0 + lambda c |grad0|^2`.
pub fn armijo_first_step<F>(phi0: &DMatrix<f64>, g0: f64, grad0: &DMatrix<f64>, mut eval: F, cfg: &SdConfig) -> ArmijoStep
where
    F: FnMut(&DMatrix<f64>) -> f64,
{
    let norm2 = grad0.norm_squared();
    if norm2 == 0.0 {
        return ArmijoStep {
            lambda: cfg.lambda_init,
            value: g0,
            trials: 0,
            satisfied: true,
        };
    }
    let mut lambda = cfg.lambda_init;
    let mut trials = 0;
    loop {
        let cand = phi0 + grad0 * lambda;
        let v = eval(&cand);
        trials += 1;
        if v >= g0 + lambda * cfg.armijo_c * norm2 {
            return ArmijoStep {
                lambda,
                value: v,
                trials,
                satisfied: true,
            };
        }
        if trials > MAX_HALVINGS {
            return ArmijoStep {
                lambda,
                value: v,
                trials,
                satisfied: false,
            };
        }
        lambda *= cfg.backtrack_factor;
    }
}

/// Barzilai-Borwein step `|dphi . dgrad| / |dgrad|^2`; `fallback` when the
/// gradient did not change.
pub fn bb_step(
    phi_prev: &DMatrix<f64>,
    phi_prev2: &DMatrix<f64>,
    grad_prev: &DMatrix<f64>,
    grad_prev2: &DMatrix<f64>,
    fallback: f64,
) -> f64 {
    let dg = grad_prev - grad_prev2;
    let den = dg.norm_squared();
    if den == 0.0 || !den.is_finite() {
        return fallback;
    }
    let dphi = phi_prev - phi_prev2;
    let lambda = dphi.dot(&dg).abs() / den;
    if lambda.is_finite() && lambda > 0.0 {
        lambda
    } else {
        fallback
    }
}

/// Per-step diagnostics of one ascent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SdTrace {
    /// `(step, objective after the step, step size)`.
    pub rows: Vec<(usize, f64, f64)>,
    pub initial_value: f64,
}

impl SdTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,objective,lambda\n");
        let _ = writeln!(s, "0,{:e},", self.initial_value);
        for (m, g, l) in &self.rows {
            let _ = writeln!(s, "{m},{g:e},{l:e}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdOutcome {
    pub estimate: PhaseEstimate,
    /// Ascent steps taken.
    pub steps: usize,
    /// All objective evaluations, the initial one included.
    pub evaluations: usize,
    /// Evaluations spent inside the first-step line search.
    pub line_search_evaluations: usize,
    pub armijo_satisfied: bool,
    pub trace: SdTrace,
}

/// Steepest ascent from `init`: an Armijo first step, Barzilai-Borwein steps
/// afterwards, stopping on a small relative objective change or after
/// `max_steps` steps.
pub fn detect_phases(init: &PhaseEstimate, obj: &Objective<'_>, cfg: &SdConfig) -> SdOutcome {
    let (g0, grad0) = obj.value_and_gradient(&init.phi);
    let mut trace = SdTrace {
        rows: Vec::new(),
        initial_value: g0,
    };
    let armijo = armijo_first_step(&init.phi, g0, &grad0, |p| obj.value(p), cfg);
    let mut evaluations = 1 + armijo.trials;
    let mut phi_prev = init.phi.clone();
    let mut grad_prev = grad0;
    let mut phi = &phi_prev + &grad_prev * armijo.lambda;
    let mut g_prev = g0;
    let mut g = armijo.value;
    let mut lambda = armijo.lambda;
    let mut grad = if armijo.trials == 0 {
        grad_prev.clone()
    } else {
        obj.gradient(&phi)
    };
    trace.rows.push((1, g, lambda));
    let mut steps = 1;
    while steps < cfg.max_steps && !converged(g, g_prev, cfg.theta) {
        lambda = bb_step(&phi, &phi_prev, &grad, &grad_prev, lambda);
        let next = &phi + &grad * lambda;
        let (g_next, grad_next) = obj.value_and_gradient(&next);
        evaluations += 1;
        steps += 1;
        phi_prev = std::mem::replace(&mut phi, next);
        grad_prev = std::mem::replace(&mut grad, grad_next);
        g_prev = g;
        g = g_next;
        trace.rows.push((steps, g, lambda));
    }
    SdOutcome {
        estimate: PhaseEstimate { phi },
        steps,
        evaluations,
        line_search_evaluations: armijo.trials,
        armijo_satisfied: armijo.satisfied,
        trace,
    }
}

fn converged(g: f64, g_prev: f64, theta: f64) -> bool {
    let diff = (g - g_prev).abs();
    if diff == 0.0 {
        return true;
    }
    if g_prev == 0.0 {
        return false;
    }
    diff / g_prev.abs() < theta
}
