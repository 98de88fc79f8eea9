//! Shared fixtures for the criterion benchmarks.

use ldrnn_core::model::Example;
use ldrnn_core::numerics::Rng;

pub const VOCAB: usize = 2000;

/// Random token sequences with story points in [1, 20).
pub fn examples(n: usize, len: usize, seed: u64) -> Vec<Example> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| Example {
            token_ids: (0..len).map(|_| rng.below(VOCAB)).collect(),
            target: rng.uniform_range(1.0, 20.0),
        })
        .collect()
}

pub fn samples(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.uniform_range(0.0, 10.0)).collect()
}
