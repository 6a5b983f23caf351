use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    /// GRU hidden width.
    pub d_h: usize,
    /// Latent state dimension.
    pub d_z: usize,
    /// Tokens per channel, each owning an equal slice of [0, 1].
    pub k_token: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_moe_experts: usize,
    pub moe_top_k: usize,
    pub n_csh_tokens: usize,
    pub n_rbf_centers: usize,
    pub max_channels: usize,
    /// Hidden width of each MoE expert.
    pub d_ff: usize,
    /// Hidden width of the embedding MLPs and the parameter head.
    pub d_hidden: usize,
    /// Scales each `A` by `tanh(s)/s`, `s` its Frobenius norm.
    pub stability_clamp: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_h: 64,
            d_z: 8,
            k_token: 16,
            n_blocks: 2,
            n_heads: 4,
            n_moe_experts: 4,
            moe_top_k: 1,
            n_csh_tokens: 8,
            n_rbf_centers: 16,
            max_channels: 8,
            d_ff: 128,
            d_hidden: 64,
            stability_clamp: false,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks and quick tests.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 16,
            d_h: 8,
            d_z: 3,
            k_token: 4,
            n_blocks: 1,
            n_heads: 2,
            n_moe_experts: 3,
            moe_top_k: 2,
            n_csh_tokens: 2,
            n_rbf_centers: 6,
            max_channels: 4,
            d_ff: 16,
            d_hidden: 12,
            stability_clamp: false,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ModelConstruction(m.into()));
        let positive = [
            self.d_model,
            self.d_h,
            self.d_z,
            self.k_token,
            self.n_heads,
            self.n_moe_experts,
            self.moe_top_k,
            self.max_channels,
            self.d_ff,
            self.d_hidden,
        ];
        if positive.contains(&0) {
            return bad("model sizes must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.moe_top_k > self.n_moe_experts {
            return bad("moe_top_k exceeds n_moe_experts");
        }
        if self.n_rbf_centers < 2 {
            return bad("need at least two RBF centers");
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive");
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.d_z * self.d_z + self.d_z
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
