use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    /// `relu(W_up·x + b)` then down projection (OPT style).
    ReluFfn,
    /// `silu(W_gate·x) ⊙ (W_up·x)` then down projection (LLaMA style).
    SiluGatedFfn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Layernorm,
    Rmsnorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    Learned,
    Rope,
}

fn default_norm_eps() -> f32 {
    1e-5
}

fn default_rope_theta() -> f32 {
    10_000.0
}

/// Contents of a bundle's `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// Neurons per activation layer.
    pub d_ffn: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub activation_kind: ActivationKind,
    pub norm_kind: NormKind,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub position_encoding: PositionEncoding,
    /// Whether projections carry bias vectors.
    #[serde(default)]
    pub bias: bool,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_model != self.n_heads * self.head_dim {
            return fail(format!(
                "d_model {} != n_heads {} x head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if self.d_ffn == 0 {
            return fail("d_ffn must be positive".into());
        }
        if self.n_layers < 4 {
            return fail(format!("n_layers must be at least 4, got {}", self.n_layers));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.n_heads == 0 {
            return fail("vocab_size, max_seq_len and n_heads must be positive".into());
        }
        if self.position_encoding == PositionEncoding::Rope && !self.head_dim.is_multiple_of(2) {
            return fail(format!("rope needs an even head_dim, got {}", self.head_dim));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return fail(format!("norm_eps must be a finite nonnegative number, got {}", self.norm_eps));
        }
        Ok(())
    }

    pub fn is_gated(&self) -> bool {
        self.activation_kind == ActivationKind::SiluGatedFfn
    }

    /// Weight matrices of shape `[d_ffn, d_model]` in each FFN.
    pub fn ffn_matrices(&self) -> u64 {
        if self.is_gated() {
            3
        } else {
            2
        }
    }

    /// FFN FLOPs (two per multiply-add) for one token at one layer when `k`
    /// neurons participate.
    pub fn ffn_flops(&self, k: usize) -> u64 {
        2 * self.ffn_matrices() * k as u64 * self.d_model as u64
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ModelConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Names and shapes of every tensor a bundle must contain, in file order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, n) = (self.d_model, self.d_ffn);
        let mut specs = vec![("tok_embeddings".to_string(), vec![self.vocab_size, d])];
        if self.position_encoding == PositionEncoding::Learned {
            specs.push(("pos_embeddings".into(), vec![self.max_seq_len, d]));
        }
        let norm = |specs: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            specs.push((format!("{prefix}.weight"), vec![d]));
            if self.norm_kind == NormKind::Layernorm {
                specs.push((format!("{prefix}.bias"), vec![d]));
            }
        };
        for l in 0..self.n_layers {
            let p = format!("layers.{l}");
            norm(&mut specs, &format!("{p}.attn_norm"));
            for w in ["wq", "wk", "wv", "wo"] {
                specs.push((format!("{p}.attn.{w}"), vec![d, d]));
                if self.bias {
                    specs.push((format!("{p}.attn.{w}_bias"), vec![d]));
                }
            }
            norm(&mut specs, &format!("{p}.ffn_norm"));
            if self.is_gated() {
                specs.push((format!("{p}.ffn.gate"), vec![n, d]));
                if self.bias {
                    specs.push((format!("{p}.ffn.gate_bias"), vec![n]));
                }
            }
            specs.push((format!("{p}.ffn.up"), vec![n, d]));
            if self.bias {
                specs.push((format!("{p}.ffn.up_bias"), vec![n]));
            }
            specs.push((format!("{p}.ffn.down"), vec![n, d]));
            if self.bias {
                specs.push((format!("{p}.ffn.down_bias"), vec![d]));
            }
        }
        norm(&mut specs, "final_norm");
        specs.push(("lm_head".into(), vec![self.vocab_size, d]));
        specs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 8,
            d_ffn: 16,
            n_heads: 2,
            head_dim: 4,
            activation_kind: ActivationKind::ReluFfn,
            norm_kind: NormKind::Layernorm,
            vocab_size: 10,
            max_seq_len: 32,
            position_encoding: PositionEncoding::Learned,
            bias: true,
            norm_eps: 1e-5,
            rope_theta: 10_000.0,
        }
    }

    #[test]
    fn validation() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.head_dim = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = cfg();
        c.n_layers = 3;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.d_ffn = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_keys() {
        let json = serde_json::to_value(cfg()).unwrap();
        assert_eq!(json["activation_kind"], "relu_ffn");
        assert_eq!(json["norm_kind"], "layernorm");
        assert_eq!(json["position_encoding"], "learned");
        let minimal = r#"{"n_layers":4,"d_model":8,"d_ffn":16,"n_heads":2,"head_dim":4,
            "activation_kind":"silu_gated_ffn","norm_kind":"rmsnorm","vocab_size":10,
            "max_seq_len":32,"position_encoding":"rope"}"#;
        let c: ModelConfig = serde_json::from_str(minimal).unwrap();
        assert!(!c.bias && c.is_gated());
    }

    #[test]
    fn flops_and_specs() {
        let mut c = cfg();
        assert_eq!(c.ffn_flops(16), 2 * 2 * 16 * 8);
        c.activation_kind = ActivationKind::SiluGatedFfn;
        assert_eq!(c.ffn_flops(4), 2 * 3 * 4 * 8);
        let specs = cfg().tensor_specs();
        assert!(specs.iter().any(|(n, s)| n == "layers.3.ffn.down" && s == &vec![16, 8]));
        assert_eq!(specs.last().unwrap().0, "lm_head");
    }
}
