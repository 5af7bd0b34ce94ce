use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::HostTensor;

use super::config::ModelConfig;
use super::weights::WeightFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyWeights {
    /// Small integers in `[-2, 2]`, unit norm gains.
    Integer,
    /// Uniform `±sqrt(3 / fan_in)`, gains near one.
    Random,
}

/// Deterministic model for `config`, seeded by `seed`.
pub fn toy_model(config: &ModelConfig, kind: ToyWeights, seed: u64) -> WeightFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = vec![config.to_tensor()];
    for (name, dims) in config.weight_shapes() {
        let n: usize = dims.iter().product();
        let is_norm = dims.len() == 1;
        let values: Vec<f32> = match (kind, is_norm) {
            (ToyWeights::Integer, true) => vec![1.0; n],
            (ToyWeights::Integer, false) => (0..n).map(|_| rng.gen_range(-2i32..=2) as f32).collect(),
            (ToyWeights::Random, true) => (0..n).map(|_| 1.0 + rng.gen_range(-0.1f32..0.1)).collect(),
            (ToyWeights::Random, false) => {
                let bound = if name == "token_embd" {
                    3f32.sqrt()
                } else {
                    (3.0 / dims[1] as f32).sqrt()
                };
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        tensors.push(HostTensor::from_f32(name, &dims, &values).expect("shape matches"));
    }
    WeightFile::new(tensors)
}
