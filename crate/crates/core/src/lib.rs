pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod objective;
pub mod prompt;
pub mod rng;
pub mod selftest;
pub mod task;
pub mod tensor;
pub mod train;
