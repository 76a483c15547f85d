//! Checks shared by the acceptance runner and the integration tests.
#![allow(dead_code)]

pub mod checks;
pub mod gradients;
pub mod metrics;
pub mod service;
pub mod timelines;

use medseq::model::{ModelConfig, SequenceModel, Transformer, Variant};
use medseq::numerics::Tensor;
use medseq::rng::{seeded, Rng};
use rand::Rng as _;

/// The eight switchable architecture modifications checked for causality.
pub const CAUSAL_VARIANTS: [&str; 8] = ["base", "rotary", "glu", "memory", "sparse", "talking-heads", "rezero", "residual"];

/// Tiny transformer for `variant`, with a shrunken memory prefix so the
/// memory path stays cheap.
pub fn tiny_transformer(variant: &str, vocab: usize, layers: usize, d_model: usize, seed: u64) -> Transformer {
    let mut base = ModelConfig::small(vocab, layers, 2, d_model);
    base.max_seq = 16;
    let mut config = Variant::parse(variant).unwrap().apply(&base, None).unwrap();
    if config.memory_tokens > 0 {
        config.memory_tokens = 3;
    }
    if config.sparse_topk > 0 {
        config.sparse_topk = 3;
    }
    Transformer::new_random(config, seed).unwrap()
}

/// Adds Gaussian noise to every parameter so no path is inert (zero gates,
/// identity mixers, zero biases).
pub fn jitter<M: SequenceModel>(model: &mut M, std: f64, seed: u64) {
    let mut rng = seeded(seed);
    for p in model.params_mut().iter_mut() {
        let noise = Tensor::<f32>::randn(p.value.shape(), std, &mut rng);
        p.value.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
}

pub fn random_sequence(rng: &mut Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Copies every parameter of `from` whose name exists in `to`.
pub fn copy_shared<M: SequenceModel, N: SequenceModel>(from: &M, to: &mut N) {
    for p in from.params().iter() {
        if let Some(t) = to.params_mut().by_name_mut(&p.name) {
            *t = p.value.clone();
        }
    }
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}
