//! Fixtures shared by the benchmarks.

use relgate::synth::{gen_twohop, TwoHopSpec};
use relgate::{Generated, ModelConfig, TrainConfig, Tensor};

/// Deterministic dense matrix with entries in `[-1, 1)`.
pub fn matrix(rows: usize, cols: usize, salt: u64) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| {
            let x = (i as u64 ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 11;
            x as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

pub fn twohop(n_users: usize) -> Generated {
    gen_twohop(&TwoHopSpec {
        n_users,
        n_products: n_users / 10,
        n_reviews: n_users * 4,
        signal: 1.0,
        seed: 1,
    })
    .expect("valid generator parameters")
}

pub fn model_config() -> ModelConfig {
    ModelConfig {
        channels: 32,
        layers: 2,
        cat_dim: 4,
        ..Default::default()
    }
}

pub fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 64,
        neighbor_samples: 32,
        ..Default::default()
    }
}
