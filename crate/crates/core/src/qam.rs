//! Gray-labeled square 64-QAM.
//!
//! A 6-bit label `b0 b1 b2 b3 b4 b5` (b0 first on the wire) selects the
//! in-phase level from `b0 b1 b2` and the quadrature level from `b3 b4 b5`.
//! Per axis the Gray sequence `000 001 011 010 110 111 101 100` runs from
//! level -7 to +7, so label `000000` is the corner point `(-7, -7)`. Levels
//! are scaled so the average symbol energy equals `E_s`.
//!
//! LLRs use the convention `LLR = log P(b = 0) / P(b = 1)`: positive values
//! favour bit 0.

use num_complex::Complex64;

use crate::error::{Error, Result};

pub const BITS_PER_SYMBOL: usize = 6;

/// Axis Gray code, indexed by level position (-7 .. +7).
const GRAY8: [u8; 8] = [0, 1, 3, 2, 6, 7, 5, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Qam64 {
    es: f64,
    /// Amplitude of level position `j`, `(2j - 7) * scale`.
    levels: [f64; 8],
    /// Level position for each 3-bit axis label.
    pos_of_label: [usize; 8],
}

impl Qam64 {
    pub fn new(es: f64) -> Self {
        let scale = (es / 42.0).sqrt();
        let mut levels = [0.0; 8];
        let mut pos_of_label = [0usize; 8];
        for j in 0..8 {
            levels[j] = (2.0 * j as f64 - 7.0) * scale;
            pos_of_label[GRAY8[j] as usize] = j;
        }
        Qam64 {
            es,
            levels,
            pos_of_label,
        }
    }

    pub fn es(&self) -> f64 {
        self.es
    }

    /// Point for a 6-bit label (`b0` is bit 5 of `label`).
    pub fn point(&self, label: u8) -> Complex64 {
        let i = (label >> 3) & 7;
        let q = label & 7;
        Complex64::new(
            self.levels[self.pos_of_label[i as usize]],
            self.levels[self.pos_of_label[q as usize]],
        )
    }

    /// All 64 points indexed by label.
    pub fn points(&self) -> Vec<Complex64> {
        (0..64u8).map(|l| self.point(l)).collect()
    }

    /// Maps a bit sequence (one bit per byte, `0` or `1`) to symbols.
    pub fn map(&self, bits: &[u8]) -> Result<Vec<Complex64>> {
        if bits.len() % BITS_PER_SYMBOL != 0 {
            return Err(Error::invalid(format!(
                "bit count {} is not a multiple of {BITS_PER_SYMBOL}",
                bits.len()
            )));
        }
        Ok(bits
            .chunks_exact(BITS_PER_SYMBOL)
            .map(|c| self.point(label_of(c)))
            .collect())
    }

    /// Nearest-point label.
    pub fn hard_label(&self, y: Complex64) -> u8 {
        let axis = |v: f64| -> u8 {
            let j = self
                .levels
                .iter()
                .enumerate()
                .min_by(|a, b| (v - a.1).abs().total_cmp(&(v - b.1).abs()))
                .map(|(j, _)| j)
                .unwrap();
            GRAY8[j]
        };
        (axis(y.re) << 3) | axis(y.im)
    }

    /// Max-log bit LLRs for an equalized sample with complex noise variance
    /// `noise_var`: `(min_{b=1} |y-s|^2 - min_{b=0} |y-s|^2) / noise_var`.
    pub fn demap_llr(&self, y: Complex64, noise_var: f64) -> Result<[f64; 6]> {
        if !(noise_var > 0.0) {
            return Err(Error::invalid(format!("noise variance must be positive, got {noise_var}")));
        }
        let mut out = [0.0; 6];
        self.demap_llr_into(y, noise_var, &mut out);
        Ok(out)
    }

    /// Unchecked variant of [`Self::demap_llr`] writing into `out`.
    pub fn demap_llr_into(&self, y: Complex64, noise_var: f64, out: &mut [f64]) {
        // the squared distance separates per axis, so each axis is demapped alone
        for (axis, v) in [y.re, y.im].into_iter().enumerate() {
            let mut min0 = [f64::INFINITY; 3];
            let mut min1 = [f64::INFINITY; 3];
            for j in 0..8 {
                let d = (v - self.levels[j]).powi(2);
                let g = GRAY8[j];
                for b in 0..3 {
                    if (g >> (2 - b)) & 1 == 0 {
                        min0[b] = min0[b].min(d);
                    } else {
                        min1[b] = min1[b].min(d);
                    }
                }
            }
            for b in 0..3 {
                out[axis * 3 + b] = (min1[b] - min0[b]) / noise_var;
            }
        }
    }
}

/// Packs six bits (`b0` first) into a label.
pub fn label_of(bits: &[u8]) -> u8 {
    bits.iter().take(6).fold(0u8, |acc, &b| (acc << 1) | (b & 1))
}

/// Unpacks a label into six bits, `b0` first.
pub fn bits_of(label: u8) -> [u8; 6] {
    let mut b = [0u8; 6];
    for (k, v) in b.iter_mut().enumerate() {
        *v = (label >> (5 - k)) & 1;
    }
    b
}
