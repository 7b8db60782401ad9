use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architectural hyperparameters. Defaults are the desk-scale model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    /// Recurrent state width per head.
    pub d_state: usize,
    pub headdim: usize,
    pub n_heads: usize,
    pub expand: usize,
    pub d_conv: usize,
    /// Number of B/C sharing groups; must divide `n_heads`.
    pub n_groups: usize,
    /// LoRA rank; 0 disables every adapter path.
    pub lora_rank: usize,
    /// LoRA scale numerator; the effective scale is `lora_alpha / lora_rank`.
    pub lora_alpha: f64,
    pub text_vocab_size: usize,
    pub image_vocab_size: usize,
    pub special_token_count: usize,
    pub max_image_tokens: usize,
    /// Width of the frozen understanding-encoder features.
    pub vision_dim: usize,
    /// Single fused vocabulary and head instead of per-modality tables.
    pub shared_vocab: bool,
    /// Default chunk length of the parallel scan.
    pub chunk_len: usize,
    pub rms_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            d_state: 16,
            headdim: 16,
            n_heads: 8,
            expand: 2,
            d_conv: 4,
            n_groups: 1,
            lora_rank: 8,
            lora_alpha: 16.0,
            text_vocab_size: 512,
            image_vocab_size: 64,
            special_token_count: 6,
            max_image_tokens: 16,
            vision_dim: 128,
            shared_vocab: false,
            chunk_len: 16,
            rms_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// 1.3B-parameter backbone dimensions with rank-8 adapters.
    pub fn billion_scale() -> Self {
        Self {
            d_model: 2048,
            n_layers: 48,
            d_state: 128,
            headdim: 64,
            n_heads: 64,
            expand: 2,
            d_conv: 4,
            n_groups: 1,
            lora_rank: 8,
            lora_alpha: 16.0,
            text_vocab_size: 50_280,
            image_vocab_size: 16_384,
            special_token_count: 6,
            max_image_tokens: 256,
            vision_dim: 2048,
            shared_vocab: false,
            chunk_len: 256,
            rms_eps: 1e-5,
        }
    }

    /// Tiny configuration for gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_layers: 2,
            d_state: 4,
            headdim: 8,
            n_heads: 4,
            expand: 2,
            d_conv: 4,
            n_groups: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            text_vocab_size: 48,
            image_vocab_size: 12,
            special_token_count: 6,
            max_image_tokens: 16,
            vision_dim: 8,
            shared_vocab: false,
            chunk_len: 4,
            rms_eps: 1e-5,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Output width of the fused input projection: `[z, x, B, C, dt]`.
    pub fn d_in_proj(&self) -> usize {
        2 * self.d_inner() + 2 * self.n_groups * self.d_state + self.n_heads
    }

    /// Channels passing through the causal convolution: `[x, B, C]`.
    pub fn conv_dim(&self) -> usize {
        self.d_inner() + 2 * self.n_groups * self.d_state
    }

    pub fn heads_per_group(&self) -> usize {
        self.n_heads / self.n_groups
    }

    pub fn lora_scale(&self) -> f64 {
        if self.lora_rank == 0 {
            0.0
        } else {
            self.lora_alpha / self.lora_rank as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("d_state", self.d_state),
            ("headdim", self.headdim),
            ("n_heads", self.n_heads),
            ("expand", self.expand),
            ("d_conv", self.d_conv),
            ("n_groups", self.n_groups),
            ("text_vocab_size", self.text_vocab_size),
            ("image_vocab_size", self.image_vocab_size),
            ("special_token_count", self.special_token_count),
            ("max_image_tokens", self.max_image_tokens),
            ("vision_dim", self.vision_dim),
            ("chunk_len", self.chunk_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_inner() != self.n_heads * self.headdim {
            return Err(Error::Config(format!(
                "expand*d_model = {} but n_heads*headdim = {}",
                self.d_inner(),
                self.n_heads * self.headdim
            )));
        }
        if self.n_heads % self.n_groups != 0 {
            return Err(Error::Config(format!(
                "n_groups {} does not divide n_heads {}",
                self.n_groups, self.n_heads
            )));
        }
        if self.special_token_count != crate::vocab::SpecialToken::ALL.len() {
            return Err(Error::Config(format!(
                "special_token_count must be {}",
                crate::vocab::SpecialToken::ALL.len()
            )));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::Config("rms_eps must be positive".into()));
        }
        if self.lora_rank > 0 && !self.lora_alpha.is_finite() {
            return Err(Error::Config("lora_alpha must be finite".into()));
        }
        Ok(())
    }

    /// Parameters of one SSM block (pre-norm through out-projection).
    pub fn block_param_count(&self) -> usize {
        let d = self.d_model;
        let di = self.d_inner();
        d // input RMS norm
            + d * self.d_in_proj()
            + self.conv_dim() * self.d_conv
            + 3 * self.n_heads // A_log, dt_bias, D
            + di // gated norm
            + di * d
    }

    /// Base backbone parameters: every block plus the final norm. Excludes
    /// vocabularies, heads, adapters and the vision stack.
    pub fn backbone_param_count(&self) -> usize {
        self.n_layers * self.block_param_count() + self.d_model
    }

    /// Parameters of all adapters (both routes, every layer).
    pub fn lora_param_count(&self) -> usize {
        2 * self.n_layers * self.lora_rank * (self.d_model + self.d_in_proj())
    }

    /// Bytes of one layer's recurrent decode state in 32-bit floats.
    pub fn layer_state_bytes(&self) -> usize {
        let ssm = self.n_heads * self.headdim * self.d_state;
        let conv = (self.d_conv - 1) * self.conv_dim();
        (ssm + conv) * std::mem::size_of::<f32>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::billion_scale().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_inconsistent_heads() {
        let cfg = ModelConfig {
            n_heads: 7,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig {
            n_groups: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn projection_widths() {
        let c = ModelConfig::default();
        assert_eq!(c.d_inner(), 128);
        assert_eq!(c.d_in_proj(), 2 * 128 + 2 * 16 + 8);
        assert_eq!(c.conv_dim(), 128 + 32);
    }
}
