//! Seeded random streams.
//!
//! Every random draw in the library comes from a ChaCha stream keyed by a
//! master seed and selected by a 64-bit stream id derived from the sample's
//! coordinates. A sample therefore sees the same numbers whether the batch is
//! processed serially or in parallel, and in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SampleRng = ChaCha8Rng;

/// Stream `index` of the generator keyed by `master_seed`.
pub fn stream(master_seed: u64, index: u64) -> SampleRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Stream addressed by a tuple of coordinates, e.g. `(experiment, margin, sample)`.
pub fn substream(master_seed: u64, coords: &[u64]) -> SampleRng {
    let id = coords.iter().fold(0x9e37_79b9_7f4a_7c15_u64, |acc, &c| {
        splitmix64(acc ^ splitmix64(c))
    });
    stream(master_seed, id)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
