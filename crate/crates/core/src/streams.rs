//! Seeded random-stream derivation.
//!
//! Every random draw in a simulation comes from a ChaCha stream whose key is
//! derived from `(seed, snr index, frame index, purpose)`. Draws for one
//! purpose never shift draws for another, so two receivers configured
//! differently see identical channels, phase noise, data and noise on the
//! same frame (paired comparisons), and results do not depend on how frames
//! are scheduled across worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Random stream used by the simulator.
pub type SimRng = ChaCha12Rng;

/// What a stream is used for. The discriminant is folded into the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Channel = 1,
    PhaseNoise = 2,
    Data = 3,
    Noise = 4,
    CsiError = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds the coordinates of a draw into a 64-bit stream key.
pub fn stream_key(seed: u64, point: u64, frame: u64, purpose: Purpose) -> u64 {
    let mut k = splitmix64(seed);
    k = splitmix64(k ^ point);
    k = splitmix64(k ^ frame.rotate_left(17));
    splitmix64(k ^ (purpose as u64).rotate_left(41))
}

/// Opens the stream for one `(seed, point, frame, purpose)` coordinate.
pub fn stream(seed: u64, point: u64, frame: u64, purpose: Purpose) -> SimRng {
    SimRng::seed_from_u64(stream_key(seed, point, frame, purpose))
}
