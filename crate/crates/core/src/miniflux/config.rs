use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy backbone.
///
/// Defaults are the calibrated desk-scale configuration used by the
/// end-to-end pipeline; gradient checks and unit tests build smaller (and
/// multi-head) variants explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiniFluxConfig {
    pub n_dual_blocks: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    /// Maximum prompt length accepted by the forward pass.
    pub n_text_tokens: usize,
    /// (height, width) of the pixel-token grid.
    pub pixel_grid: (usize, usize),
    pub vocab_size: usize,
    /// Number of sinusoidal frequencies in the timestep features.
    pub n_timestep_freqs: usize,
    /// Channels of the pixel latent (the toy VAE is the identity, so this is
    /// also the image channel count).
    pub n_channels: usize,
}

impl Default for MiniFluxConfig {
    fn default() -> Self {
        MiniFluxConfig {
            n_dual_blocks: 2,
            n_heads: 1,
            model_dim: 32,
            n_text_tokens: 8,
            pixel_grid: (8, 8),
            vocab_size: 32,
            n_timestep_freqs: 4,
            n_channels: 3,
        }
    }
}

impl MiniFluxConfig {
    /// 1-block, 1-head, dim-4 configuration for finite-difference checks.
    pub fn micro() -> Self {
        MiniFluxConfig {
            n_dual_blocks: 1,
            n_heads: 1,
            model_dim: 4,
            n_text_tokens: 4,
            pixel_grid: (2, 2),
            vocab_size: 8,
            n_timestep_freqs: 2,
            n_channels: 2,
        }
    }

    pub fn n_pixel_tokens(&self) -> usize {
        self.pixel_grid.0 * self.pixel_grid.1
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn time_feat_dim(&self) -> usize {
        2 * self.n_timestep_freqs
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_dual_blocks", self.n_dual_blocks),
            ("n_heads", self.n_heads),
            ("model_dim", self.model_dim),
            ("n_text_tokens", self.n_text_tokens),
            ("pixel_grid.h", self.pixel_grid.0),
            ("pixel_grid.w", self.pixel_grid.1),
            ("vocab_size", self.vocab_size),
            ("n_timestep_freqs", self.n_timestep_freqs),
            ("n_channels", self.n_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }
}
