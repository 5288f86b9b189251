//! Bayesian Cramér-Rao bound on the mean-square error of sum-phase
//! estimates.
//!
//! The Bayesian information matrix in sum coordinates is block tridiagonal
//! with blocks `M0 = J' M~0 J` and `M1 = J' M~1 J`, where `J = pinv(A)` and
//! `A` maps atomic to sum phases. Whenever `O_t O_r > O_t + O_r - 1` that
//! matrix is singular, because sum phases live on the range of `A`. The bound
//! is then the pseudo-inverse diagonal, which equals
//! `diag((I x A) M~^-1 (I x A)')` for the atomic matrix `M~`: the gauge
//! direction `(1, -1)` is an eigenvector of both `M~0` and `M~1`, so `M~`
//! splits along it. The atomic matrix is positive definite and its
//! diagonal blocks of the inverse come from a forward-backward recursion.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::channel::{block_view, gen_rician, Block, ChannelMatrix, SystemConfig};
use crate::error::{Error, Result};

/// Atomic-to-sum incidence matrix, `O_t O_r x (O_t + O_r)`. Row
/// `i * O_r + i'` has ones in columns `i` and `O_t + i'`.
pub fn incidence_matrix(o_t: usize, o_r: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(o_t * o_r, o_t + o_r);
    for i in 0..o_t {
        for ip in 0..o_r {
            a[(i * o_r + ip, i)] = 1.0;
            a[(i * o_r + ip, o_t + ip)] = 1.0;
        }
    }
    a
}

/// Moore-Penrose pseudo-inverse of [`incidence_matrix`].
///
/// `A` has a one-dimensional null space spanned by `g = (1_T, -1_R)`, so
/// `pinv(A) = (A'A + g g' / |g|^2)^-1 A'`.
pub fn jacobian(o_t: usize, o_r: usize) -> DMatrix<f64> {
    let a = incidence_matrix(o_t, o_r);
    let n = o_t + o_r;
    let g = DVector::from_fn(n, |k, _| if k < o_t { 1.0 } else { -1.0 });
    let gram = a.transpose() * &a + &g * g.transpose() / n as f64;
    let chol = Cholesky::new(gram).expect("regularized Gram matrix is positive definite");
    chol.solve(&a.transpose())
}

/// `M~0^Y` for the true channel, in atomic coordinates.
///
/// `sigma2` is the noise variance per real dimension and `es` the symbol
/// energy; the information scales with `es / sigma2`.
pub fn build_m0y(h: &ChannelMatrix, cfg: &SystemConfig, sigma2: f64, es: f64) -> Result<DMatrix<f64>> {
    if !(sigma2 > 0.0) || !(es > 0.0) {
        return Err(Error::invalid("sigma2 and es must be positive"));
    }
    let (o_t, o_r) = (cfg.o_t, cfg.o_r);
    let mut m = DMatrix::zeros(o_t + o_r, o_t + o_r);
    for i in 0..o_t {
        for ip in 0..o_r {
            let w = block_view(&h.h, cfg, Block::Pair { rx: ip, tx: i })?
                .iter()
                .map(|v| v.norm_sqr())
                .sum::<f64>();
            m[(i, i)] += w;
            m[(o_t + ip, o_t + ip)] += w;
            m[(o_t + ip, i)] = w;
            m[(i, o_t + ip)] = w;
        }
    }
    Ok(m * (es / sigma2))
}

/// The blocks of the information matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BimBlocks {
    pub a: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub m0_tilde_y: DMatrix<f64>,
    /// Atomic diagonal block `M~0^Y + 2/rho^2 I`.
    pub m0_tilde: DMatrix<f64>,
    /// Atomic off-diagonal block `-1/rho^2 I`.
    pub m1_tilde: DMatrix<f64>,
    /// Sum-coordinate blocks `J' M~0 J` and `J' M~1 J`.
    pub m0: DMatrix<f64>,
    pub m1: DMatrix<f64>,
}

impl BimBlocks {
    pub fn new(m0_tilde_y: DMatrix<f64>, o_t: usize, o_r: usize, rho2: f64) -> Result<Self> {
        let n = o_t + o_r;
        if m0_tilde_y.shape() != (n, n) {
            return Err(Error::invalid("M0Y has the wrong size"));
        }
        if !(rho2 > 0.0 && rho2.is_finite()) {
            return Err(Error::invalid("the bound needs rho^2 > 0"));
        }
        let a = incidence_matrix(o_t, o_r);
        let j = jacobian(o_t, o_r);
        let m0_tilde = &m0_tilde_y + DMatrix::identity(n, n) * (2.0 / rho2);
        let m1_tilde = DMatrix::identity(n, n) * (-1.0 / rho2);
        let m0 = j.transpose() * &m0_tilde * &j;
        let m1 = j.transpose() * &m1_tilde * &j;
        Ok(BimBlocks {
            a,
            j,
            m0_tilde_y,
            m0_tilde,
            m1_tilde,
            m0,
            m1,
        })
    }

    pub fn for_channel(h: &ChannelMatrix, cfg: &SystemConfig, sigma2: f64, rho2: f64) -> Result<Self> {
        Self::new(build_m0y(h, cfg, sigma2, cfg.es)?, cfg.o_t, cfg.o_r, rho2)
    }
}

/// Per-slot bound on every sum process.
#[derive(Debug, Clone, PartialEq)]
pub struct Bound {
    /// `O_t O_r x L`; entry `(k, n)` bounds the MSE of sum process `k` at
    /// slot `n`.
    pub per_slot: DMatrix<f64>,
    pub mean: f64,
}

impl Bound {
    /// Mean over a subset of slots.
    pub fn mean_over(&self, slots: &[usize]) -> f64 {
        let s: f64 = slots.iter().map(|&n| self.per_slot.column(n).sum()).sum();
        s / (slots.len() * self.per_slot.nrows()) as f64
    }
}

/// Diagonal of the pseudo-inverse of the `L`-slot information matrix.
pub fn assemble_and_bound(blocks: &BimBlocks, l: usize) -> Result<Bound> {
    if l == 0 {
        return Err(Error::invalid("need at least one slot"));
    }
    let d = &blocks.m0_tilde;
    let b = &blocks.m1_tilde;
    let inv = |m: DMatrix<f64>, what: &str| -> Result<DMatrix<f64>> {
        match Cholesky::new(m.clone()) {
            Some(c) => Ok(c.inverse()),
            None => Err(Error::Singular(format!(
                "{what} block not positive definite (condition ~ {:e})",
                condition_estimate(&m)
            ))),
        }
    };
    // forward: S_n = D - B S_{n-1}^-1 B, backward likewise
    let mut fwd_inv: Vec<DMatrix<f64>> = Vec::with_capacity(l);
    let mut s = d.clone();
    for n in 0..l {
        if n > 0 {
            s = d - b * &fwd_inv[n - 1] * b;
        }
        fwd_inv.push(inv(s.clone(), "forward")?);
    }
    let mut bwd_inv: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); l];
    let mut s = d.clone();
    for n in (0..l).rev() {
        if n + 1 < l {
            s = d - b * &bwd_inv[n + 1] * b;
        }
        bwd_inv[n] = inv(s.clone(), "backward")?;
    }
    let a = &blocks.a;
    let mut per_slot = DMatrix::zeros(a.nrows(), l);
    for n in 0..l {
        let mut c = d.clone();
        if n > 0 {
            c -= b * &fwd_inv[n - 1] * b;
        }
        if n + 1 < l {
            c -= b * &bwd_inv[n + 1] * b;
        }
        let c_inv = inv(c, "central")?;
        let cov = a * c_inv * a.transpose();
        for k in 0..a.nrows() {
            per_slot[(k, n)] = cov[(k, k)];
        }
    }
    let mean = per_slot.mean();
    Ok(Bound { per_slot, mean })
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let ev = m.clone().symmetric_eigenvalues();
    let max = ev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    max / min
}

/// Bound for a given channel, averaged over all slots.
pub fn bound_for_channel(h: &ChannelMatrix, cfg: &SystemConfig, sigma2: f64, rho2: f64, l: usize) -> Result<Bound> {
    assemble_and_bound(&BimBlocks::for_channel(h, cfg, sigma2, rho2)?, l)
}

/// Mean and relative standard deviation of the slot-averaged bound over
/// independent channel draws.
pub fn average_over_channels<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    sigma2: f64,
    rho2: f64,
    l: usize,
    draws: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if draws == 0 {
        return Err(Error::invalid("need at least one channel draw"));
    }
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        let h = gen_rician(cfg, rng)?;
        vals.push(bound_for_channel(&h, cfg, sigma2, rho2, l)?.mean);
    }
    let mean = vals.iter().sum::<f64>() / draws as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws as f64;
    Ok((mean, var.sqrt() / mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{stream, Purpose};
    use approx::assert_relative_eq;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::Rng;

    fn svd_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
        m.clone().svd(true, true).pseudo_inverse(1e-10).unwrap()
    }

    /// Dense sum-coordinate matrix, the independent oracle.
    fn dense_bim(blocks: &BimBlocks, l: usize) -> DMatrix<f64> {
        let k = blocks.m0.nrows();
        let mut m = DMatrix::zeros(k * l, k * l);
        for n in 0..l {
            m.view_mut((n * k, n * k), (k, k)).copy_from(&blocks.m0);
            if n + 1 < l {
                m.view_mut((n * k, (n + 1) * k), (k, k)).copy_from(&blocks.m1);
                m.view_mut(((n + 1) * k, n * k), (k, k)).copy_from(&blocks.m1);
            }
        }
        m
    }

    #[test]
    fn incidence_examples() {
        assert_eq!(incidence_matrix(1, 1), DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
        assert_eq!(
            incidence_matrix(2, 1),
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0])
        );
        let a = incidence_matrix(16, 4);
        assert!(a.row_iter().all(|r| r.sum() == 2.0));
        assert_eq!(a.rank(1e-9), 19);
    }

    #[test]
    fn jacobian_scalar_case() {
        assert!((jacobian(1, 1) - DMatrix::from_column_slice(2, 1, &[0.5, 0.5])).amax() < 1e-15);
    }

    #[test]
    fn jacobian_penrose_conditions() {
        for (o_t, o_r) in [(1, 1), (2, 1), (2, 2), (3, 5), (16, 4)] {
            let a = incidence_matrix(o_t, o_r);
            let j = jacobian(o_t, o_r);
            assert!((&a * &j * &a - &a).amax() < 1e-10);
            assert!((&j * &a * &j - &j).amax() < 1e-10);
            assert!((&j * &a - (&j * &a).transpose()).amax() < 1e-10);
            assert!((&a * &j - (&a * &j).transpose()).amax() < 1e-10);
            // J A projects onto the row space: identity there
            let v = a.transpose() * DVector::from_fn(o_t * o_r, |k, _| k as f64 - 1.5);
            assert!((&j * &a * &v - &v).amax() < 1e-10);
        }
    }

    #[test]
    fn jacobian_matches_svd() {
        let a = incidence_matrix(2, 2);
        assert!((jacobian(2, 2) - svd_pinv(&a)).amax() < 1e-12);
    }

    #[test]
    fn m0y_all_ones() {
        let cfg = SystemConfig {
            n_t: 2,
            n_r: 2,
            o_t: 2,
            o_r: 2,
            ..Default::default()
        };
        let h = ChannelMatrix {
            h: DMatrix::from_element(2, 2, Complex64::new(1.0, 0.0)),
        };
        let m = build_m0y(&h, &cfg, 1.0, 1.0).unwrap();
        // each TX oscillator drives one antenna seen by two receive antennas
        let mut expect = DMatrix::zeros(4, 4);
        expect.view_mut((0, 0), (2, 2)).fill_with_identity();
        expect.view_mut((0, 0), (2, 2)).scale_mut(2.0);
        expect.view_mut((2, 2), (2, 2)).fill_with_identity();
        expect.view_mut((2, 2), (2, 2)).scale_mut(2.0);
        expect.view_mut((0, 2), (2, 2)).fill(1.0);
        expect.view_mut((2, 0), (2, 2)).fill(1.0);
        assert_eq!(m, expect);
    }

    #[test]
    fn m0y_brute_force_and_traces() {
        let cfg = SystemConfig {
            n_t: 6,
            n_r: 8,
            o_t: 3,
            o_r: 2,
            k_rice_db: 0.0,
            ..Default::default()
        };
        let h = gen_rician(&cfg, &mut stream(1, 0, 0, Purpose::Channel)).unwrap();
        let m = build_m0y(&h, &cfg, 0.5, 2.0).unwrap();
        let mut brute = DMatrix::zeros(5, 5);
        for r in 0..8 {
            for t in 0..6 {
                let (i, ip) = (t / 2, 3 + r / 4);
                let p = h.h[(r, t)].norm_sqr() * 4.0;
                brute[(i, i)] += p;
                brute[(ip, ip)] += p;
                brute[(i, ip)] += p;
                brute[(ip, i)] += p;
            }
        }
        assert!((&m - &brute).amax() < 1e-10);
        let total = h.h.norm_squared() * 4.0;
        assert_relative_eq!((0..3).map(|i| m[(i, i)]).sum::<f64>(), total, max_relative = 1e-12);
        assert_relative_eq!((3..5).map(|i| m[(i, i)]).sum::<f64>(), total, max_relative = 1e-12);
        // gauge direction is in the null space
        let g = DVector::from_column_slice(&[1.0, 1.0, 1.0, -1.0, -1.0]);
        assert!((&m * g).amax() < 1e-9);
        assert!(m.clone().symmetric_eigenvalues().min() > -1e-9);
    }

    #[test]
    fn scalar_closed_form() {
        let (h2, sigma2, rho2) = (1.7, 0.3, 0.04);
        let m0y = DMatrix::from_element(2, 2, h2 / sigma2);
        let blocks = BimBlocks::new(m0y, 1, 1, rho2).unwrap();
        let b = assemble_and_bound(&blocks, 1).unwrap();
        let closed = 1.0 / (h2 / sigma2 + 1.0 / rho2);
        assert_relative_eq!(b.mean, closed, max_relative = 1e-12);
        assert_relative_eq!(1.0 / blocks.m0[(0, 0)], closed, max_relative = 1e-12);
    }

    fn random_blocks(seed: u64, o_t: usize, o_r: usize) -> (BimBlocks, SystemConfig) {
        let cfg = SystemConfig {
            n_t: 2 * o_t,
            n_r: 2 * o_r,
            o_t,
            o_r,
            k_rice_db: 0.0,
            ..Default::default()
        };
        let mut r = stream(seed, 0, 0, Purpose::Channel);
        let h = gen_rician(&cfg, &mut r).unwrap();
        let sigma2 = r.random_range(0.01..1.0);
        let rho2 = r.random_range(0.001..0.1);
        (BimBlocks::for_channel(&h, &cfg, sigma2, rho2).unwrap(), cfg)
    }

    #[test]
    fn recursion_matches_dense_pseudo_inverse() {
        for (k, (o_t, o_r)) in [(1, 1), (2, 1), (2, 2), (3, 2), (1, 3)].into_iter().enumerate() {
            for l in [1, 2, 3, 8] {
                let (blocks, _) = random_blocks(10 * k as u64 + l as u64, o_t, o_r);
                let fast = assemble_and_bound(&blocks, l).unwrap();
                let dense = svd_pinv(&dense_bim(&blocks, l));
                let q = o_t * o_r;
                for n in 0..l {
                    for s in 0..q {
                        let want = dense[(n * q + s, n * q + s)];
                        assert_relative_eq!(fast.per_slot[(s, n)], want, max_relative = 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn bound_decreases_with_snr() {
        let cfg = SystemConfig {
            n_t: 8,
            n_r: 16,
            o_t: 4,
            o_r: 2,
            ..Default::default()
        };
        let h = gen_rician(&cfg, &mut stream(3, 0, 0, Purpose::Channel)).unwrap();
        let mut prev = f64::INFINITY;
        for snr in [0.0, 5.0, 10.0, 15.0, 20.0] {
            let b = bound_for_channel(&h, &cfg, cfg.sigma2_for_snr_db(snr), 0.04, 40).unwrap();
            assert!(b.mean < prev && b.mean > 0.0);
            prev = b.mean;
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(BimBlocks::new(DMatrix::zeros(2, 2), 1, 1, 0.0).is_err());
        assert!(BimBlocks::new(DMatrix::zeros(3, 3), 1, 1, 0.1).is_err());
        let blocks = BimBlocks::new(DMatrix::zeros(2, 2), 1, 1, 0.1).unwrap();
        assert!(assemble_and_bound(&blocks, 0).is_err());
    }

    #[test]
    fn blocks_are_symmetric() {
        let (b, _) = random_blocks(77, 3, 2);
        assert!((&b.m0 - b.m0.transpose()).amax() < 1e-9);
        assert!((&b.m0_tilde_y - b.m0_tilde_y.transpose()).amax() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn bounds_are_positive(seed in 0u64..100_000, o_t in 1usize..4, o_r in 1usize..4, l in 1usize..6) {
            let (blocks, _) = random_blocks(seed, o_t, o_r);
            let b = assemble_and_bound(&blocks, l).unwrap();
            prop_assert!(b.per_slot.iter().all(|&v| v > 0.0 && v.is_finite()));
        }
    }
}
