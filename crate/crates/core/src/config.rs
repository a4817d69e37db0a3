use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// How the predicted low-pass kernels become the high-pass kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HighpassMode {
    /// `1 − lowpass`, entrywise.
    Literal,
    /// `δ − lowpass` (zero DC gain).
    Delta,
}

/// Local-ensemble weighting of the four neighbors of a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    /// Area of the rectangle spanned by the query and the opposite neighbor.
    Area,
    /// Normalized inverse distance.
    Invdist,
}

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Detail-enhancing high-pass filtering of the latent.
    pub dse: bool,
    /// Unmask attention; when off the MLP receives `F` in place of `E`.
    pub use_attention: bool,
    /// Importance map; when off the MLP receives a constant 1.
    pub pim: bool,
    /// Feed the mask as a fourth encoder input channel.
    pub mask_channel: bool,
    pub latent_channels: usize,
    pub feature_channels: usize,
    pub res_blocks: usize,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    pub filter_kernel: usize,
    pub recon_kernel: usize,
    pub highpass: HighpassMode,
    pub ensemble: EnsembleMode,
    /// Largest number of LR pixels the attention may span.
    pub attention_budget: usize,
    /// Use every `n`-th pixel (per axis) as attention keys.
    pub attention_key_stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dse: true,
            use_attention: true,
            pim: true,
            mask_channel: true,
            latent_channels: 64,
            feature_channels: 64,
            res_blocks: 8,
            mlp_hidden: 256,
            mlp_layers: 4,
            filter_kernel: 3,
            recon_kernel: 3,
            highpass: HighpassMode::Literal,
            ensemble: EnsembleMode::Area,
            attention_budget: 4096,
            attention_key_stride: 1,
        }
    }
}

/// The four cumulative component configurations of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    Base,
    PlusDse,
    PlusUse,
    PlusPim,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Base, Ablation::PlusDse, Ablation::PlusUse, Ablation::PlusPim];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Base => "Base",
            Ablation::PlusDse => "+DSE",
            Ablation::PlusUse => "+USE",
            Ablation::PlusPim => "+PIM",
        }
    }

    /// Applies the component switches of this row to `cfg`.
    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let (dse, use_attention, pim) = match self {
            Ablation::Base => (false, false, false),
            Ablation::PlusDse => (true, false, false),
            Ablation::PlusUse => (true, true, false),
            Ablation::PlusPim => (true, true, true),
        };
        ModelConfig {
            dse,
            use_attention,
            pim,
            ..cfg.clone()
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.latent_channels >= 1, "latent_channels must be positive");
        ensure!(self.feature_channels >= 1, "feature_channels must be positive");
        ensure!(self.mlp_hidden >= 1, "mlp_hidden must be positive");
        ensure!(self.mlp_layers >= 1, "mlp_layers must be at least 1");
        ensure!(self.filter_kernel % 2 == 1, "filter_kernel must be odd, got {}", self.filter_kernel);
        ensure!(self.recon_kernel % 2 == 1, "recon_kernel must be odd, got {}", self.recon_kernel);
        ensure!(self.attention_key_stride >= 1, "attention_key_stride must be positive");
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        if self.mask_channel {
            4
        } else {
            3
        }
    }

    /// The second encoder branch exists when either of its consumers does.
    pub fn has_filter_branch(&self) -> bool {
        self.dse || self.pim
    }

    /// Width of the per-neighbor MLP input: `F ⊕ E ⊕ W ⊕ χ`.
    pub fn mlp_input_dim(&self) -> usize {
        2 * self.feature_channels + 3
    }
}
