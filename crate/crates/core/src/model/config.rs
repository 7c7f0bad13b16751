use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    #[default]
    Average,
    Max,
    Attentive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the per-frame input features.
    pub input_dim: usize,
    /// Embedding width shared by every stage.
    pub d_model: usize,
    pub num_heads: usize,
    /// Hidden width of feed-forward blocks as a multiple of `d_model`.
    pub ffn_multiplier: usize,
    pub cmfe_layers: usize,
    pub fpn_levels: usize,
    pub tgfd_layers: usize,
    pub pooling: PoolingMode,
    pub cmfe_enabled: bool,
    pub tgfd_enabled: bool,
    /// Mix each frame with its neighbours in the video stand-in encoder.
    pub video_temporal_mixing: bool,
    pub max_text_tokens: usize,
    pub vocab_size: usize,
    pub init_std: f64,
    /// Prior foreground probability used to initialise the classification bias.
    pub prior_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            d_model: 32,
            num_heads: 4,
            ffn_multiplier: 4,
            cmfe_layers: 3,
            fpn_levels: 5,
            tgfd_layers: 6,
            pooling: PoolingMode::Average,
            cmfe_enabled: true,
            tgfd_enabled: true,
            video_temporal_mixing: true,
            max_text_tokens: crate::prompt::MAX_TEXT_TOKENS,
            vocab_size: 4096,
            init_std: 0.02,
            prior_prob: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.input_dim == 0 {
            return fail("input_dim and d_model must be positive".into());
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.fpn_levels == 0 {
            return fail("fpn_levels must be at least 1".into());
        }
        if self.ffn_multiplier == 0 || self.max_text_tokens == 0 || self.vocab_size < 3 {
            return fail("ffn_multiplier, max_text_tokens and vocab_size must be positive".into());
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return fail(format!("prior_prob {} outside (0, 1)", self.prior_prob));
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        self.d_model * self.ffn_multiplier
    }

    /// Shortest sequence the pyramid accepts: every level keeps at least one row
    /// from a full stride window.
    pub fn min_frames(&self) -> usize {
        1 << (self.fpn_levels - 1)
    }

    /// Number of multiscale rows for a `frames`-long input.
    pub fn multiscale_rows(&self, frames: usize) -> usize {
        (0..self.fpn_levels).map(|l| frames.div_ceil(1 << l)).sum()
    }
}
