use crate::tensor::HostTensor;

use super::LoadError;

/// Name of the reserved tensor holding the configuration.
pub const CONFIG_TENSOR: &str = "__config";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub rope_theta: f32,
    pub rms_eps: f32,
    pub max_seq: usize,
}

impl ModelConfig {
    /// Small model used by tests and `make-toy`.
    pub fn toy() -> Self {
        Self {
            vocab_size: 256,
            hidden: 64,
            intermediate: 128,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            rope_theta: 10000.0,
            rms_eps: 1e-5,
            max_seq: 160,
        }
    }

    pub fn validate(&self) -> Result<(), LoadError> {
        let fail = |msg: String| Err(LoadError::Config(msg));
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if let Some((name, v)) = sizes.iter().find(|(_, v)| *v > 1 << 24) {
            return fail(format!("{name}={v} too large"));
        }
        if self.hidden != self.n_heads * self.head_dim {
            return fail(format!(
                "hidden={} != n_heads={} * head_dim={}",
                self.hidden, self.n_heads, self.head_dim
            ));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_heads={} not divisible by n_kv_heads={}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.head_dim % 2 != 0 {
            return fail(format!("head_dim={} must be even", self.head_dim));
        }
        if !(self.rope_theta > 0.0 && self.rms_eps >= 0.0) {
            return fail(format!("rope_theta={} rms_eps={}", self.rope_theta, self.rms_eps));
        }
        Ok(())
    }

    fn values(&self) -> [f32; 10] {
        [
            self.vocab_size as f32,
            self.hidden as f32,
            self.intermediate as f32,
            self.n_layers as f32,
            self.n_heads as f32,
            self.n_kv_heads as f32,
            self.head_dim as f32,
            self.rope_theta,
            self.rms_eps,
            self.max_seq as f32,
        ]
    }

    pub fn to_tensor(&self) -> HostTensor {
        HostTensor::from_f32(CONFIG_TENSOR, &[10], &self.values()).expect("fixed shape")
    }

    pub fn from_tensor(t: &HostTensor) -> Result<Self, LoadError> {
        let v = t.to_f32();
        if v.len() != 10 {
            return Err(LoadError::Config(format!("{CONFIG_TENSOR} holds {} values, expected 10", v.len())));
        }
        let int = |i: usize, name: &str| {
            let x = v[i];
            if x >= 0.0 && x.fract() == 0.0 && x <= (1u32 << 24) as f32 {
                Ok(x as usize)
            } else {
                Err(LoadError::Config(format!("{name}={x} is not a valid count")))
            }
        };
        let cfg = Self {
            vocab_size: int(0, "vocab_size")?,
            hidden: int(1, "hidden")?,
            intermediate: int(2, "intermediate")?,
            n_layers: int(3, "n_layers")?,
            n_heads: int(4, "n_heads")?,
            n_kv_heads: int(5, "n_kv_heads")?,
            head_dim: int(6, "head_dim")?,
            rope_theta: v[7],
            rms_eps: v[8],
            max_seq: int(9, "max_seq")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Expected `(name, dims)` of every weight, in file order.
    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f, hd) = (self.hidden, self.intermediate, self.head_dim);
        let q = self.n_heads * hd;
        let kv = self.n_kv_heads * hd;
        let mut out = vec![("token_embd".to_string(), vec![self.vocab_size, h])];
        for i in 0..self.n_layers {
            for (name, dims) in [
                ("attn_norm", vec![h]),
                ("attn_q", vec![q, h]),
                ("attn_k", vec![kv, h]),
                ("attn_v", vec![kv, h]),
                ("attn_output", vec![h, q]),
                ("ffn_norm", vec![h]),
                ("ffn_gate", vec![f, h]),
                ("ffn_up", vec![f, h]),
                ("ffn_down", vec![h, f]),
            ] {
                out.push((format!("blk.{i}.{name}"), dims));
            }
        }
        out.push(("output_norm".to_string(), vec![h]));
        out.push(("output".to_string(), vec![self.vocab_size, h]));
        out
    }
}
