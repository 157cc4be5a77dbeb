use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionEncoderConfig {
    /// `(D, H, W)` in voxels.
    pub volume_shape: [usize; 3],
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub proj_dim: usize,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        Self {
            volume_shape: [32, 32, 32],
            patch_size: 8,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            mlp_dim: 128,
            proj_dim: 32,
        }
    }
}

impl VisionEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        check_divisible(&self.volume_shape, self.patch_size)?;
        check_heads(self.embed_dim, self.heads)?;
        if self.layers == 0 || self.mlp_dim == 0 || self.proj_dim == 0 {
            return Err(Error::Config(
                "vision encoder dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        num_patches(&self.volume_shape, self.patch_size).expect("validated config")
    }

    pub fn patch_volume(&self) -> usize {
        self.patch_size.pow(3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub proj_dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            max_tokens: 32,
            embed_dim: 64,
            layers: 2,
            heads: 4,
            mlp_dim: 128,
            proj_dim: 32,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::Config("text max_tokens must be at least 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "text vocabulary needs pad and OOV ids".into(),
            ));
        }
        check_heads(self.embed_dim, self.heads)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoundationConfig {
    pub vision: VisionEncoderConfig,
    pub text: TextEncoderConfig,
    /// Contrastive softmax temperature; fixed, not learned.
    pub temperature: f64,
}

impl Default for FoundationConfig {
    fn default() -> Self {
        Self {
            vision: VisionEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            temperature: 0.07,
        }
    }
}

impl FoundationConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        if self.vision.proj_dim != self.text.proj_dim {
            return Err(Error::Config(format!(
                "vision proj_dim {} differs from text proj_dim {}",
                self.vision.proj_dim, self.text.proj_dim
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// `Π (dimᵢ / p)`, or a resolution error when some axis is not divisible.
pub fn num_patches(shape: &[usize], patch: usize) -> Result<usize> {
    check_divisible(shape, patch)?;
    Ok(shape.iter().map(|d| d / patch).product())
}

fn check_divisible(shape: &[usize], patch: usize) -> Result<()> {
    if shape.len() != 3 || patch == 0 || shape.iter().any(|&d| d == 0 || d % patch != 0) {
        return Err(Error::Resolution {
            shape: shape.to_vec(),
            patch,
        });
    }
    Ok(())
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "embed dim {dim} not divisible by {heads} heads"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_count_law() {
        assert_eq!(num_patches(&[96, 96, 96], 16).unwrap(), 216);
        assert_eq!(num_patches(&[32, 32, 32], 8).unwrap(), 64);
        assert_eq!(num_patches(&[48, 48, 48], 8).unwrap(), 216);
        assert_eq!(num_patches(&[16, 32, 8], 8).unwrap(), 2 * 4);
        assert!(matches!(
            num_patches(&[30, 32, 32], 8),
            Err(Error::Resolution { .. })
        ));
    }

    #[test]
    fn defaults_validate() {
        FoundationConfig::default().validate().unwrap();
        let mut bad = FoundationConfig::default();
        bad.text.proj_dim = 16;
        assert!(bad.validate().is_err());
    }
}
