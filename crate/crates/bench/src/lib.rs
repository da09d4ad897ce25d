//! Shared fixtures for the kernel benchmarks.

use tcp_core::config::RunConfig;
use tcp_core::rng::SplitMix64;
use tcp_core::tensor::Tensor;
use tcp_core::train::{Experiment, Mode};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::new(vec![rows, cols], rng.normal_vec(rows * cols, 1.0)).expect("shape matches data")
}

/// Default-sized experiment in the given mode.
pub fn experiment(mode: Mode) -> Experiment {
    let mut c = RunConfig::default();
    c.train.mode = mode;
    Experiment::prepare(&c).expect("default config is valid")
}
