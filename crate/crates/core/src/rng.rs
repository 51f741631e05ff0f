//! Seeded uniform streams.
//!
//! Every (prompt, slot, epoch) triple owns an independent ChaCha8 substream
//! derived from the experiment seed, so batch items can be processed in any
//! order (or in parallel) without changing results.

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Source of uniform draws in the open interval (0, 1).
///
/// The open interval matters for the acceptance test `u > alpha`: an
/// acceptance probability of 0 always rejects and 1 always accepts.
pub trait UniformStream {
    fn next_uniform(&mut self) -> f64;
}

impl UniformStream for ChaCha8Rng {
    fn next_uniform(&mut self) -> f64 {
        self.sample(Open01)
    }
}

impl<S: UniformStream + ?Sized> UniformStream for &mut S {
    fn next_uniform(&mut self) -> f64 {
        (**self).next_uniform()
    }
}

/// Replays a fixed list of uniforms. Panics when exhausted.
#[derive(Debug, Clone)]
pub struct ReplayStream {
    values: Vec<f64>,
    cursor: usize,
}

impl ReplayStream {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, cursor: 0 }
    }

    /// Number of values consumed so far.
    pub fn consumed(&self) -> usize {
        self.cursor
    }
}

impl UniformStream for ReplayStream {
    fn next_uniform(&mut self) -> f64 {
        let v = *self
            .values
            .get(self.cursor)
            .expect("replay stream exhausted");
        self.cursor += 1;
        v
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream from the experiment seed and a tuple of labels.
pub fn substream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    let key = labels.iter().fold(mix(seed), |acc, &l| mix(acc ^ mix(l)));
    ChaCha8Rng::seed_from_u64(key)
}

// Distinct domains keep rollout streams apart from dataset/initialization streams.
pub(crate) const DOMAIN_ROLLOUT: u64 = 1;
pub(crate) const DOMAIN_DATASET: u64 = 2;
pub(crate) const DOMAIN_SHUFFLE: u64 = 3;

/// The stream that owns one rollout slot of one prompt in one epoch.
pub fn rollout_stream(seed: u64, prompt_id: u32, slot: usize, epoch: usize) -> ChaCha8Rng {
    substream(
        seed,
        &[DOMAIN_ROLLOUT, u64::from(prompt_id), slot as u64, epoch as u64],
    )
}
