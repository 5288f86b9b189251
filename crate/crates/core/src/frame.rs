//! Slot layout of one frame and the symbol matrix carried by it.
//!
//! A frame has `T = L + B * O_t` slots. Phase-pilot blocks of `O_t` slots
//! open the frame, follow every `R` data slots and close it, so
//! `B = ceil(L / R) + 1`. In slot `i` of a pilot block only transmit
//! oscillator `i` is active and sends its known pilot vector.
//!
//! Each user (transmit oscillator) owns the `N_ot` antennas it drives. Its
//! coded bits are the concatenation of its codewords followed by known
//! filler bits; they are mapped to 64-QAM six at a time and placed in data
//! slot order, antenna index fastest.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::channel::SystemConfig;
use crate::error::{Error, Result};
use crate::ldpc::LdpcCode;
use crate::qam::{Qam64, BITS_PER_SYMBOL};

/// What a frame slot carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Pilot slot of `block` in which oscillator `osc` transmits.
    Pilot { block: usize, osc: usize },
    /// The `index`-th data slot.
    Data { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLayout {
    pub n_t: usize,
    pub o_t: usize,
    pub n_ot: usize,
    pub l: usize,
    pub r: usize,
    /// First slot of each pilot block.
    pub pilot_blocks: Vec<usize>,
    pub kinds: Vec<SlotKind>,
    /// Frame slot of each data slot.
    pub data_slots: Vec<usize>,
    pub codewords_per_user: usize,
    pub code_n: usize,
    /// Known filler bits appended to each user's codewords.
    pub filler_bits: usize,
}

impl FrameLayout {
    pub fn new(cfg: &SystemConfig, code_n: usize) -> Result<Self> {
        cfg.validate()?;
        let (l, r, o_t) = (cfg.l, cfg.r, cfg.o_t);
        let n_blocks = l.div_ceil(r) + 1;
        let mut kinds = Vec::with_capacity(l + n_blocks * o_t);
        let mut pilot_blocks = Vec::with_capacity(n_blocks);
        let mut data_slots = Vec::with_capacity(l);
        let mut placed = 0;
        for block in 0..n_blocks {
            pilot_blocks.push(kinds.len());
            kinds.extend((0..o_t).map(|osc| SlotKind::Pilot { block, osc }));
            let run = r.min(l - placed);
            for _ in 0..run {
                data_slots.push(kinds.len());
                kinds.push(SlotKind::Data { index: placed });
                placed += 1;
            }
        }
        let bits = BITS_PER_SYMBOL * l * cfg.n_ot();
        let max_cw = bits / code_n;
        let cw = cfg.codewords_per_user.unwrap_or(max_cw);
        if cw == 0 || cw > max_cw {
            return Err(Error::config(
                "system.codewords_per_user",
                format!("must be between 1 and {max_cw} for this frame"),
            ));
        }
        Ok(FrameLayout {
            n_t: cfg.n_t,
            o_t,
            n_ot: cfg.n_ot(),
            l,
            r,
            pilot_blocks,
            kinds,
            data_slots,
            codewords_per_user: cw,
            code_n,
            filler_bits: bits - cw * code_n,
        })
    }

    /// Total number of slots `T`.
    pub fn n_slots(&self) -> usize {
        self.kinds.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.pilot_blocks.len()
    }

    pub fn symbols_per_user(&self) -> usize {
        self.l * self.n_ot
    }

    pub fn bits_per_user(&self) -> usize {
        self.symbols_per_user() * BITS_PER_SYMBOL
    }

    /// Frame slot and antenna of a user's `s`-th symbol.
    pub fn symbol_position(&self, user: usize, s: usize) -> (usize, usize) {
        (self.data_slots[s / self.n_ot], user * self.n_ot + s % self.n_ot)
    }

    /// Slot index at the center of a pilot block, as a real number.
    pub fn block_center(&self, block: usize) -> f64 {
        self.pilot_blocks[block] as f64 + 0.5 * (self.o_t as f64 - 1.0)
    }

    /// Known pilot vector of transmit oscillator `osc`.
    pub fn pilot(&self, osc: usize, es: f64) -> Vec<Complex64> {
        (0..self.n_ot).map(|j| pilot_symbol(osc, j, es)).collect()
    }
}

/// QPSK pilot `sqrt(Es) e^{j pi (2k + 1) / 4}`, `k = (osc + j) mod 4`.
pub fn pilot_symbol(osc: usize, antenna: usize, es: f64) -> Complex64 {
    let k = ((osc + antenna) % 4) as f64;
    Complex64::from_polar(es.sqrt(), std::f64::consts::PI * (2.0 * k + 1.0) / 4.0)
}

/// Known filler bit `j` of a user's stream.
pub fn filler_bit(j: usize) -> u8 {
    ((j as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 63) as u8
}

/// Transmitted content of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    /// `info[user][codeword]`.
    pub info: Vec<Vec<Vec<u8>>>,
    pub codewords: Vec<Vec<Vec<u8>>>,
    /// `N_t x T` symbol matrix, pilots included.
    pub x: DMatrix<Complex64>,
}

/// Draws random information bits, encodes and maps them.
pub fn generate_frame<R: Rng + ?Sized>(
    layout: &FrameLayout,
    code: &LdpcCode,
    qam: &Qam64,
    rng: &mut R,
) -> Result<FrameData> {
    let mut info = Vec::with_capacity(layout.o_t);
    let mut codewords = Vec::with_capacity(layout.o_t);
    for _ in 0..layout.o_t {
        let mut ui = Vec::with_capacity(layout.codewords_per_user);
        let mut uc = Vec::with_capacity(layout.codewords_per_user);
        for _ in 0..layout.codewords_per_user {
            let bits: Vec<u8> = (0..code.k()).map(|_| u8::from(rng.random::<bool>())).collect();
            uc.push(code.encode(&bits)?);
            ui.push(bits);
        }
        info.push(ui);
        codewords.push(uc);
    }
    let x = assemble_symbols(layout, qam, &codewords)?;
    Ok(FrameData { info, codewords, x })
}

/// The `N_t x T` symbol matrix holding only the pilots; data slots are zero.
pub fn pilot_symbols(layout: &FrameLayout, qam: &Qam64) -> DMatrix<Complex64> {
    let mut x = DMatrix::zeros(layout.n_t, layout.n_slots());
    for &block_start in &layout.pilot_blocks {
        for osc in 0..layout.o_t {
            for (j, p) in layout.pilot(osc, qam.es()).into_iter().enumerate() {
                x[(osc * layout.n_ot + j, block_start + osc)] = p;
            }
        }
    }
    x
}

/// Builds the `N_t x T` symbol matrix from per-user codewords.
pub fn assemble_symbols(
    layout: &FrameLayout,
    qam: &Qam64,
    codewords: &[Vec<Vec<u8>>],
) -> Result<DMatrix<Complex64>> {
    if codewords.len() != layout.o_t
        || codewords.iter().any(|u| {
            u.len() != layout.codewords_per_user || u.iter().any(|c| c.len() != layout.code_n)
        })
    {
        return Err(Error::invalid("codeword layout does not match the frame"));
    }
    let mut x = pilot_symbols(layout, qam);
    let mut stream = Vec::with_capacity(layout.bits_per_user());
    for (user, cws) in codewords.iter().enumerate() {
        stream.clear();
        for cw in cws {
            stream.extend_from_slice(cw);
        }
        stream.extend((0..layout.filler_bits).map(filler_bit));
        let symbols = qam.map(&stream)?;
        for (s, sym) in symbols.into_iter().enumerate() {
            let (slot, ant) = layout.symbol_position(user, s);
            x[(ant, slot)] = sym;
        }
    }
    Ok(x)
}

/// Re-encodes decoded information bits and rebuilds the symbol matrix.
pub fn rebuild_symbols(
    layout: &FrameLayout,
    code: &LdpcCode,
    qam: &Qam64,
    decoded_info: &[Vec<Vec<u8>>],
) -> Result<DMatrix<Complex64>> {
    let codewords = decoded_info
        .iter()
        .map(|u| u.iter().map(|i| code.encode(i)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    assemble_symbols(layout, qam, &codewords)
}
