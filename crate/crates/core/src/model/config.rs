use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network hyper-parameters. Defaults are desk scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub classes: usize,
    pub dim: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub max_views: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub decoder_heads: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub image_c: usize,
    /// Channel width of each backbone stage.
    pub stage_widths: Vec<usize>,
    /// Stride of each stage's 3×3 convolution.
    pub stage_strides: Vec<usize>,
    pub pos_temperature: f64,
    /// Add segment embeddings to fused tokens.
    pub use_segment: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 12,
            dim: 64,
            feat_h: 4,
            feat_w: 4,
            max_views: 4,
            encoder_layers: 2,
            heads: 4,
            ff_dim: 128,
            decoder_heads: 4,
            image_h: 32,
            image_w: 32,
            image_c: 1,
            stage_widths: vec![16, 32, 64],
            stage_strides: vec![2, 2, 2],
            pos_temperature: 10000.0,
            use_segment: true,
        }
    }
}

fn conv_out(extent: usize, stride: usize) -> usize {
    // 3×3 kernel, padding 1
    (extent - 1) / stride + 1
}

impl ModelConfig {
    /// Spatial extents produced by the backbone for the configured image size.
    pub fn backbone_extents(&self) -> (usize, usize) {
        self.stage_strides
            .iter()
            .fold((self.image_h, self.image_w), |(h, w), &s| {
                (conv_out(h, s), conv_out(w, s))
            })
    }

    pub fn tokens_per_view(&self) -> usize {
        self.feat_h * self.feat_w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes == 0 {
            return bad("classes must be >= 1".into());
        }
        if self.max_views == 0 {
            return bad("max_views must be >= 1".into());
        }
        if self.dim == 0 || self.dim % 4 != 0 {
            return bad(format!("dim must be a positive multiple of 4, got {}", self.dim));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.decoder_heads == 0 || self.dim % self.decoder_heads != 0 {
            return bad(format!(
                "dim {} not divisible by decoder_heads {}",
                self.dim, self.decoder_heads
            ));
        }
        if self.ff_dim == 0 {
            return bad("ff_dim must be >= 1".into());
        }
        if self.image_h == 0 || self.image_w == 0 || self.image_c == 0 {
            return bad("image extents must be positive".into());
        }
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.stage_strides.len() {
            return bad(format!(
                "need one stride per backbone stage, got {} widths and {} strides",
                self.stage_widths.len(),
                self.stage_strides.len()
            ));
        }
        if self.stage_widths.contains(&0) || self.stage_strides.contains(&0) {
            return bad("stage widths and strides must be positive".into());
        }
        if !(self.pos_temperature > 0.0) {
            return bad("pos_temperature must be positive".into());
        }
        let (h, w) = self.backbone_extents();
        if (h, w) != (self.feat_h, self.feat_w) {
            return bad(format!(
                "backbone maps {}x{} images to {h}x{w}, but feature map is configured as {}x{}",
                self.image_h, self.image_w, self.feat_h, self.feat_w
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.backbone_extents(), (4, 4));
    }

    #[test]
    fn rejects_bad_dims() {
        let mut c = ModelConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.dim = 66;
        c.heads = 2;
        c.decoder_heads = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.feat_h = 8;
        assert!(c.validate().is_err());
    }
}
