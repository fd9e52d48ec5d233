//! Model hyperparameters with desk-scale and paper-scale presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub sample_rate: u32,
    /// Front-end kernel K; the stride is K/2.
    pub kernel: usize,
    /// Feature dimension D.
    pub dim: usize,
    pub layer_norm_eps: f64,
    pub branchformer: BranchformerConfig,
    pub visual: VisualConfig,
    pub separator: SeparatorConfig,
    pub counting: CountingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchformerConfig {
    /// cgMLP expansion D_hidden.
    pub hidden: usize,
    pub heads: usize,
    /// CSGU depthwise kernel.
    pub csgu_kernel: usize,
    pub blocks: usize,
    /// Debug override of the merge weight; `None` keeps it learnable.
    #[serde(default)]
    pub fixed_alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualConfig {
    /// Per-frame visual feature size F_v.
    pub feature_dim: usize,
    /// Lip-embedding size E.
    pub embed_dim: usize,
    pub frame_rate: u32,
    pub tcn_blocks: usize,
    pub tcn_kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparatorConfig {
    /// Chunk length C (hop C/2).
    pub chunk: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub n_intra: usize,
    pub n_inter: usize,
    /// Intra -> cross-modal -> inter sweeps per separation module.
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountingConfig {
    /// Frame feature size D_c.
    pub dim: usize,
    pub conv_kernel: usize,
    pub pool: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl ModelConfig {
    /// 8 kHz, D=64, two intra and two inter layers.
    pub fn desk() -> Self {
        Self {
            sample_rate: 8000,
            kernel: 16,
            dim: 64,
            layer_norm_eps: 1e-5,
            branchformer: BranchformerConfig { hidden: 256, heads: 4, csgu_kernel: 7, blocks: 1, fixed_alpha: None },
            visual: VisualConfig { feature_dim: 8, embed_dim: 32, frame_rate: 25, tcn_blocks: 3, tcn_kernel: 3 },
            separator: SeparatorConfig { chunk: 80, heads: 4, ffn_mult: 4, n_intra: 2, n_inter: 2, repeats: 1 },
            counting: CountingConfig { dim: 64, conv_kernel: 3, pool: 4, heads: 4, mlp_hidden: 64 },
        }
    }

    /// Published sizes: 16 kHz, K=16, C=160, 8/7 layers, D=256, D_hidden=2048, 8 heads.
    pub fn paper() -> Self {
        Self {
            sample_rate: 16000,
            kernel: 16,
            dim: 256,
            layer_norm_eps: 1e-5,
            branchformer: BranchformerConfig { hidden: 2048, heads: 8, csgu_kernel: 31, blocks: 1, fixed_alpha: None },
            visual: VisualConfig { feature_dim: 8, embed_dim: 512, frame_rate: 25, tcn_blocks: 3, tcn_kernel: 3 },
            separator: SeparatorConfig { chunk: 160, heads: 8, ffn_mult: 4, n_intra: 8, n_inter: 7, repeats: 1 },
            counting: CountingConfig { dim: 128, conv_kernel: 3, pool: 4, heads: 8, mlp_hidden: 128 },
        }
    }

    /// Tiny sizes for unit tests and smoke runs.
    pub fn tiny() -> Self {
        Self {
            sample_rate: 8000,
            kernel: 16,
            dim: 16,
            layer_norm_eps: 1e-5,
            branchformer: BranchformerConfig { hidden: 32, heads: 2, csgu_kernel: 3, blocks: 1, fixed_alpha: None },
            visual: VisualConfig { feature_dim: 8, embed_dim: 8, frame_rate: 25, tcn_blocks: 3, tcn_kernel: 3 },
            separator: SeparatorConfig { chunk: 80, heads: 2, ffn_mult: 2, n_intra: 1, n_inter: 1, repeats: 1 },
            counting: CountingConfig { dim: 8, conv_kernel: 3, pool: 4, heads: 2, mlp_hidden: 8 },
        }
    }

    pub fn stride(&self) -> usize {
        self.kernel / 2
    }

    /// Chunk length that aligns the chunk grid with the video frame rate.
    pub fn aligned_chunk(&self) -> usize {
        2 * self.sample_rate as usize / (self.stride() * self.visual.frame_rate as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kernel < 2 || self.kernel % 2 != 0 {
            return bad(format!("front-end kernel must be even and >= 2, got {}", self.kernel));
        }
        if self.dim % self.branchformer.heads != 0 {
            return bad(format!("dim {} not divisible by {} encoder heads", self.dim, self.branchformer.heads));
        }
        if self.branchformer.hidden % 2 != 0 {
            return bad(format!("cgMLP hidden size must be even, got {}", self.branchformer.hidden));
        }
        if self.branchformer.csgu_kernel % 2 == 0 {
            return bad(format!("CSGU kernel must be odd, got {}", self.branchformer.csgu_kernel));
        }
        if let Some(a) = self.branchformer.fixed_alpha {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("fixed_alpha must lie in [0, 1], got {a}"));
            }
        }
        if self.separator.chunk < 2 || self.separator.chunk % 2 != 0 {
            return bad(format!("chunk length must be even and >= 2, got {}", self.separator.chunk));
        }
        if self.dim % self.separator.heads != 0 {
            return bad(format!("dim {} not divisible by {} separator heads", self.dim, self.separator.heads));
        }
        if self.counting.dim % self.counting.heads != 0 {
            return bad(format!("counting dim {} not divisible by {} heads", self.counting.dim, self.counting.heads));
        }
        if self.counting.conv_kernel % 2 == 0 || self.visual.tcn_kernel % 2 == 0 {
            return bad("counting and TCN kernels must be odd".into());
        }
        if self.separator.repeats == 0 || self.counting.pool == 0 {
            return bad("repeats and pool window must be positive".into());
        }
        Ok(())
    }
}
