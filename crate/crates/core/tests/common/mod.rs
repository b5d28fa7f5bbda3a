#![allow(dead_code)]

use bora_core::corpus::{generate_synthetic, split, DocCounts, MultiTaskCorpus, SyntheticSpec};
use bora_core::lora::{inject, AdapterSet};
use bora_core::model::{BaseModel, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        context_length: 12,
        n_layers: 2,
        d_model: 4,
        n_heads: 2,
        d_ff: 8,
    }
}

pub fn tiny_model(vocab: usize, seed: u64) -> BaseModel {
    BaseModel::init(tiny_config(vocab), seed).unwrap().freeze()
}

/// Adapters with both factors random so the low-rank path is exercised.
pub fn random_adapters(model: &BaseModel, targets: &[&str], rank: usize, seed: u64) -> AdapterSet {
    let t: Vec<String> = targets.iter().map(|s| s.to_string()).collect();
    let mut set = inject(model, &t, rank, 2.0 * rank as f64, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for l in set.layers.values_mut() {
        l.b = bora_core::tensor::Tensor::uniform(l.b.shape(), 0.3, &mut rng);
    }
    set
}

pub fn tiny_corpus(n_tasks: usize, docs: Vec<usize>, seed: u64) -> MultiTaskCorpus {
    let spec = SyntheticSpec {
        n_tasks,
        doc_counts: DocCounts::Explicit(docs),
        doc_len: [8, 16],
        vocab_size: 6,
        seed,
        divergence: 0.6,
        branching: 2,
    };
    split(&generate_synthetic(&spec).unwrap(), 0.25, seed + 1).unwrap()
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
