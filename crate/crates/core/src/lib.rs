//! Link-level simulation of a phase-noise-impaired massive MIMO uplink.
//!
//! The crate is organized bottom-up:
//!
//! * [`pn`] generates oscillator phase-noise trajectories (Wiener or
//!   spectral-mask based) and maps atomic oscillator phases to the
//!   observable transmit/receive sum phases.
//! * [`channel`] draws Rician block-fading channels, applies the
//!   phase-rotated MIMO channel per slot and models noisy channel estimates.
//! * [`qam`] and [`ldpc`] are the per-user modem and forward error correction.
//! * [`frame`] fixes the slot layout of a frame (phase pilots, data, filler).
//! * [`phase`] is the phase detector: pilot initialization, the EM objective
//!   and its gradient, and steepest ascent with Armijo/Barzilai-Borwein steps.
//! * [`receiver`] runs the iterative receiver loop (phase detection, LMMSE
//!   demodulation, LDPC decoding, symbol feedback) and its operation counts.
//! * [`bcrb`] evaluates the Bayesian Cramér-Rao bound on sum-phase MSE.
//! * [`harness`] is the seeded Monte Carlo runner, configuration and CSV output.

pub mod bcrb;
pub mod channel;
pub mod error;
pub mod frame;
pub mod harness;
pub mod ldpc;
pub mod phase;
pub mod pn;
pub mod qam;
pub mod receiver;
pub mod streams;

pub use error::{Error, Result};
pub use num_complex::Complex64;

/// Wraps a phase into `(-pi, pi]`.
///
/// Non-finite inputs are rejected by [`pn::wrap_phase`]; this is the
/// unchecked hot-path variant.
#[inline]
pub(crate) fn wrap(x: f64) -> f64 {
    use std::f64::consts::PI;
    let two_pi = 2.0 * PI;
    let mut r = x - two_pi * ((x + PI) / two_pi).floor();
    // floor maps x = pi to -pi; keep the closed upper end
    if r <= -PI {
        r += two_pi;
    }
    r
}
