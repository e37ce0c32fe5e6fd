use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ViTConfig {
    /// 32×32 RGB, 8×8 patches (16 image tokens), d=64, 4 heads, 4 layers, d'=128.
    pub const fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            heads: 4,
            layers: 4,
            ffn_hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_hidden", self.ffn_hidden),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
            if v > u32::MAX as usize {
                return Err(Error::Config(format!("model.{name} is too large")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.embed_dim ({}) must be divisible by model.heads ({})",
                self.embed_dim, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "model.image_size ({}) must be divisible by model.patch_size ({})",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Image tokens per image (`n`); the class token is not counted.
    pub fn num_image_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_image_tokens() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub(crate) fn to_bytes(self) -> Vec<u8> {
        [
            self.image_size,
            self.patch_size,
            self.channels,
            self.embed_dim,
            self.heads,
            self.layers,
            self.ffn_hidden,
        ]
        .iter()
        .flat_map(|&v| (v as u32).to_le_bytes())
        .collect()
    }

    pub(crate) const ENCODED_LEN: usize = 7 * 4;

    pub(crate) fn from_bytes(b: &[u8]) -> Self {
        let f = |i: usize| u32::from_le_bytes(b[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        Self {
            image_size: f(0),
            patch_size: f(1),
            channels: f(2),
            embed_dim: f(3),
            heads: f(4),
            layers: f(5),
            ffn_hidden: f(6),
        }
    }

    /// First eight bytes of SHA-256 over the little-endian field encoding.
    pub fn digest(&self) -> u64 {
        let hash = Sha256::digest(self.to_bytes());
        u64::from_le_bytes(hash[..8].try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_derived_sizes() {
        let c = ViTConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.num_image_tokens(), 16);
        assert_eq!(c.seq_len(), 17);
        assert_eq!(c.head_dim(), 16);
        assert_eq!(c.patch_dim(), 192);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ViTConfig::desk();
        c.heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ViTConfig::desk();
        c.patch_size = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ViTConfig::desk();
        c.layers = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn digest_distinguishes_configs() {
        let a = ViTConfig::desk();
        let mut b = a;
        b.ffn_hidden = 64;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), ViTConfig::desk().digest());
        assert_eq!(ViTConfig::from_bytes(&a.to_bytes()), a);
    }
}
