//! Independent reference code for the integration tests. Nothing here calls
//! into the library's math; it only reads parameter values by name.

#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use dstf::mixing::MixingSignature;
use dstf::model::{ModelConfig, StreamMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_ids(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// A tiny model config: L=2, D=8, H=2.
pub fn tiny_config(mode: StreamMode, mixing: MixingSignature, seed: u64) -> ModelConfig {
    let ffn_keeps_width = mixing.ffn_up.preserves_width() || mixing.ffn_down.preserves_width();
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: if ffn_keeps_width { 8 } else { 16 },
        vocab_size: 13,
        max_seq_len: 6,
        mode,
        mixing,
        seed,
        ..ModelConfig::default()
    }
}

/// The four named signatures.
pub fn presets() -> Vec<MixingSignature> {
    MixingSignature::presets().iter().map(|(_, s)| *s).collect()
}

/// Relative error with a floor so near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
