#![allow(dead_code)]

use protosent::autodiff::{seeded_rng, Rng, Tensor};
use protosent::data::{generate_synthetic, Dataset, SynthSpec};
use protosent::Config;
use rand::Rng as _;

pub fn tiny_config() -> Config {
    Config {
        hidden_dim: 8,
        num_prototypes: 3,
        heads: 2,
        layers: 2,
        batch_size: 4,
        max_seq_len: 16,
        warmup_steps: 2,
        total_steps: 12,
        learning_rate: 3e-3,
        ..Config::default()
    }
}

pub fn tiny_dataset(seed: u64) -> Dataset {
    generate_synthetic(&SynthSpec {
        seed,
        n_train: 10,
        n_valid: 4,
        n_test: 6,
        lengths: [(2, 6), (1, 5), (3, 4)],
        widths: [5, 4, 3],
        ..SynthSpec::default()
    })
    .unwrap()
}

pub fn rand_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> Rng {
    seeded_rng(seed)
}

pub mod oracle;
