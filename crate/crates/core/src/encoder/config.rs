use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy image and text encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Shared embedding dimension `D` of region and concept features.
    pub dim: usize,
    /// Output strides of the feature levels, ascending powers of two.
    pub strides: Vec<usize>,
    pub anchors_per_loc: usize,
    pub max_tokens: usize,
    pub bridge_enabled: bool,
    /// Hidden width of backbone and head convolutions.
    pub channels: usize,
    /// Anchor side length in units of the level stride.
    pub anchor_scale: f64,
    /// Size of the hashed token vocabulary.
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            strides: vec![8, 16],
            anchors_per_loc: 1,
            max_tokens: 16,
            bridge_enabled: true,
            channels: 32,
            anchor_scale: 2.0,
            vocab_size: 4096,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.dim < 4 {
            return bad("dim must be >= 4");
        }
        if self.strides.is_empty() {
            return bad("at least one stride is required");
        }
        if self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return bad("strides must be strictly ascending");
        }
        if self.strides.iter().any(|s| *s < 2 || !s.is_power_of_two()) {
            return bad("strides must be powers of two >= 2");
        }
        if self.anchors_per_loc != 1 {
            return bad("anchors_per_loc must be 1");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be >= 1");
        }
        if self.channels < 2 {
            return bad("channels must be >= 2");
        }
        if !(self.anchor_scale > 0.0) {
            return bad("anchor_scale must be positive");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2");
        }
        Ok(())
    }

    pub fn max_stride(&self) -> usize {
        *self.strides.last().expect("validated")
    }

    /// Anchors for an `h × w` input: one square box per feature location per
    /// level, levels in stride order, locations row-major.
    pub fn anchors(&self, h: usize, w: usize) -> (Vec<[f64; 4]>, Vec<usize>) {
        let mut boxes = Vec::new();
        let mut level_of = Vec::new();
        for (l, &s) in self.strides.iter().enumerate() {
            let side = self.anchor_scale * s as f64;
            for i in 0..h / s {
                for j in 0..w / s {
                    let (cx, cy) = ((j as f64 + 0.5) * s as f64, (i as f64 + 0.5) * s as f64);
                    boxes.push([cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0]);
                    level_of.push(l);
                }
            }
        }
        (boxes, level_of)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_count_matches_grid() {
        let cfg = EncoderConfig::default();
        let (boxes, levels) = cfg.anchors(32, 32);
        assert_eq!(boxes.len(), 20);
        assert_eq!(levels.iter().filter(|l| **l == 0).count(), 16);
        assert_eq!(boxes[0], [-4.0, -4.0, 12.0, 12.0]);
    }

    #[test]
    fn validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let mut c = EncoderConfig { strides: vec![16, 8], ..Default::default() };
        assert!(c.validate().is_err());
        c = EncoderConfig { dim: 3, ..Default::default() };
        assert!(c.validate().is_err());
        c = EncoderConfig { strides: vec![12], ..Default::default() };
        assert!(c.validate().is_err());
    }
}
