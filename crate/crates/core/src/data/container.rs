//! `MEATDAT1` raw dataset container.
//!
//! ```text
//! magic    8 bytes  "MEATDAT1"
//! N C H W  4 × u32  little-endian
//! classes  u32
//! pixels   N·C·H·W u8, value k stands for k/255
//! labels   N u8
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Dataset, Provenance, Split};
use crate::autograd::Tensor;
use crate::codec::Reader;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MEATDAT1";
pub const HEADER_BYTES: usize = 8 + 5 * 4;

impl Dataset {
    /// Serializes unnormalized pixels; values are rounded to the 8-bit grid.
    pub fn to_container_bytes(&self) -> Result<Vec<u8>> {
        if self.normalized {
            return Err(Error::Contract("only unnormalized datasets can be stored".into()));
        }
        if self.num_classes > 256 {
            return Err(Error::Config(format!(
                "the container stores labels as bytes; {} classes do not fit",
                self.num_classes
            )));
        }
        let mut out = Vec::with_capacity(HEADER_BYTES + self.pixels.len() + self.labels.len());
        out.extend_from_slice(MAGIC);
        for v in self.shape.iter().copied().chain([self.num_classes]) {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend(self.pixels.iter().map(|&p| (p * 255.0).round() as u8));
        out.extend(self.labels.iter().map(|&l| l as u8));
        Ok(out)
    }

    pub fn from_container_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let mut dims = [0usize; 4];
        for (d, field) in dims.iter_mut().zip(["N", "C", "H", "W"]) {
            *d = r.u32(field)? as usize;
        }
        let classes_at = r.offset();
        let classes = r.u32("classes")? as usize;
        if classes == 0 || classes > 256 {
            return Err(Error::format(classes_at, "classes", format!("{classes} is outside 1..=256")));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(8, "dims", "element count overflows"))?;
        let pixels: Vec<f64> = r.bytes(numel, "pixels")?.iter().map(|&b| b as f64 / 255.0).collect();
        let labels_at = r.offset();
        let labels: Vec<usize> = r.bytes(dims[0], "labels")?.iter().map(|&b| b as usize).collect();
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::format(
                labels_at + i,
                "labels",
                format!("label {} exceeds {classes} classes", labels[i]),
            ));
        }
        r.finish()?;
        let digest: [u8; 32] = Sha256::digest(bytes).into();
        Dataset::new(Tensor::new(&dims, pixels)?, labels, classes, Split::Train, Provenance::File(digest))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_container_bytes()?)?;
        Ok(())
    }
}

/// Reads a `MEATDAT1` file. The result is tagged as a training split.
pub fn load_raw_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_container_bytes(&std::fs::read(path)?)
}
