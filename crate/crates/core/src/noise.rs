//! Seeded random streams. Every consumer gets its own ChaCha stream so that
//! adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::latent::LatentGrid;

/// Stream ids within one stage seed.
pub mod stream {
    pub const INITIAL_LATENT: u64 = 0;
    pub const GUIDANCE: u64 = 1;
    pub const PATCH_SELECTION: u64 = 2;
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for stage `index`, derived from a master seed by counter.
pub fn derive_stage_seed(master: u64, index: usize) -> u64 {
    use rand::RngCore;
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(0x5747_0000 + index as u64);
    rng.next_u64()
}

pub fn gaussian_grid(
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> LatentGrid {
    LatentGrid::from_fn(channels, height, width, |_, _, _| {
        StandardNormal.sample(rng)
    })
}
