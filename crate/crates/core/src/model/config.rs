use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Border;

/// Which token mixer the decoder stages use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Deformable MLP with learned per-channel offsets.
    Deformable,
    /// Per-token linear mixing, no spatial context.
    Vanilla,
}

/// Architecture hyperparameters of the segmentation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output stride of each stage relative to the input.
    pub strides: [usize; 4],
    pub channels: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    /// Spatial reduction of keys/values in each stage's attention.
    pub reductions: [usize; 4],
    pub patch_sizes: [usize; 4],
    pub mlp_ratio: usize,
    pub c_emb: usize,
    pub classes: usize,
    /// Offset restriction divisor.
    pub r: f64,
    pub encoder_deformable: bool,
    pub decoder: DecoderKind,
    pub border: Border,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::nano(5)
    }
}

impl ModelConfig {
    /// Desk-scale configuration.
    pub fn nano(classes: usize) -> Self {
        Self {
            in_channels: 3,
            strides: [4, 8, 16, 32],
            channels: [16, 32, 48, 64],
            depths: [1, 1, 1, 1],
            heads: [1, 2, 3, 4],
            reductions: [8, 4, 2, 1],
            patch_sizes: [7, 3, 3, 3],
            mlp_ratio: 2,
            c_emb: 32,
            classes,
            r: 4.0,
            encoder_deformable: true,
            decoder: DecoderKind::Deformable,
            border: Border::Clamp,
        }
    }

    /// The tiny configuration at full width; only used for shape checks.
    pub fn tiny(classes: usize) -> Self {
        Self {
            channels: [64, 128, 320, 512],
            depths: [2, 2, 2, 2],
            heads: [1, 2, 5, 8],
            mlp_ratio: 4,
            c_emb: 128,
            ..Self::nano(classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.strides.windows(2).any(|w| w[1] <= w[0] || w[1] % w[0] != 0) {
            return err(format!("strides {:?} must strictly increase by integer factors", self.strides));
        }
        if self.c_emb == 0 || self.in_channels == 0 {
            return err("c_emb and in_channels must be positive".into());
        }
        if self.classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.c_emb < self.classes {
            return err(format!(
                "c_emb ({}) must be >= classes ({}) for the feature-space CE term",
                self.c_emb, self.classes
            ));
        }
        if !(self.r > 0.0) {
            return err(format!("r = {} must be > 0", self.r));
        }
        for l in 0..4 {
            if self.heads[l] == 0 || self.channels[l] % self.heads[l] != 0 {
                return err(format!(
                    "stage {l}: {} channels not divisible by {} heads",
                    self.channels[l], self.heads[l]
                ));
            }
            if self.reductions[l] == 0 || self.patch_sizes[l] == 0 || self.depths[l] == 0 {
                return err(format!("stage {l}: zero reduction, patch size or depth"));
            }
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Per-stage downsampling factor of the patch embedding.
    pub fn stage_stride(&self, l: usize) -> usize {
        if l == 0 {
            self.strides[0]
        } else {
            self.strides[l] / self.strides[l - 1]
        }
    }

    pub fn stage_in_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.in_channels
        } else {
            self.channels[l - 1]
        }
    }

    /// Checks that an `h×w` input can traverse every stage.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.strides[3];
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be a positive multiple of {s}"
            )));
        }
        for l in 0..4 {
            let (hl, wl) = (h / self.strides[l], w / self.strides[l]);
            if hl % self.reductions[l] != 0 || wl % self.reductions[l] != 0 {
                return Err(Error::Shape(format!(
                    "stage {l} map {hl}x{wl} not divisible by reduction {}",
                    self.reductions[l]
                )));
            }
        }
        Ok(())
    }
}
