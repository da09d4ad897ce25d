//! Seeded random streams.
//!
//! Every random quantity in the crate is drawn from [`SplitMix64`], so two
//! implementations that follow this file bit-for-bit generate identical
//! weights, tasks and batches:
//!
//! * state update: `state += 0x9E3779B97F4A7C15` (wrapping)
//! * output: `z = state; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//!   z = (z ^ (z >> 27)) * 0x94D049BB133111EB; z ^ (z >> 31)`
//! * uniform in (0, 1): `((next >> 11) as f64 + 0.5) * 2^-53`
//! * standard normal: Box-Muller, cosine branch only, consuming two uniforms
//!   `u1, u2` per draw: `sqrt(-2 ln u1) * cos(2 pi u2)`
//! * bounded integer in `[0, n)`: `next % n` (the bias is below 2^-50 for the
//!   sizes used here and is part of the contract)
//!
//! Independent sub-streams are derived with [`SplitMix64::derive`], which
//! mixes a seed with a stream tag through one output step.

use std::f64::consts::PI;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Stream for `(seed, tag)`, independent of other tags on the same seed.
    pub fn derive(seed: u64, tag: u64) -> Self {
        let mut mixer = Self::new(seed ^ tag.wrapping_mul(GOLDEN));
        Self::new(mixer.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normal_vec(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| self.normal() * std).collect()
    }
}

/// Stream tags used across the crate.
pub mod tags {
    pub const ENCODER_WEIGHTS: u64 = 1;
    pub const VOCABULARY: u64 = 2;
    pub const GAP_ROTATION: u64 = 3;
    pub const SAMPLE_NOISE: u64 = 4;
    pub const PROMPT_INIT: u64 = 5;
    pub const TKE_INIT: u64 = 6;
    pub const BATCHES: u64 = 7;
    pub const GRADCHECK: u64 = 8;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_outputs() {
        // Published SplitMix64 reference values for seed 1234567.
        let mut rng = SplitMix64::new(1234567);
        let expected = [
            6457827717110365317u64,
            3203168211198807973,
            9817491932198370423,
            4593380528125082431,
            16408922859458223821,
        ];
        for e in expected {
            assert_eq!(rng.next_u64(), e);
        }
    }

    #[test]
    fn uniform_is_open_interval() {
        let mut rng = SplitMix64::new(0);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = SplitMix64::new(42);
        let n = 200_000;
        let xs = rng.normal_vec(n, 1.0);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn derived_streams_differ() {
        let a = SplitMix64::derive(7, tags::VOCABULARY).next_u64();
        let b = SplitMix64::derive(7, tags::BATCHES).next_u64();
        let c = SplitMix64::derive(8, tags::VOCABULARY).next_u64();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = SplitMix64::new(3);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
