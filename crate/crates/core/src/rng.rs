//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit generator. The generator is
//! ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded through `seed_from_u64`, which
//! is a fixed, platform-independent algorithm: identical seeds give identical
//! plans, samples and augmentations on every machine.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type PipelineRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> PipelineRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for item `index` of a batch, so parallel
/// workers reproduce a serial run regardless of scheduling.
pub fn substream(seed: u64, index: u64) -> PipelineRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
