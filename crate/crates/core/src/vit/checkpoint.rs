//! `MEATVIT1` model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "MEATVIT1"
//! version      u8       1
//! config       7 × u32  image_size patch_size channels embed_dim heads layers ffn_hidden
//! frozen       u8       0 | 1
//! count        u32      number of tensors
//! tensor*      u16 name length, UTF-8 name, u8 rank, rank × u32 dims, f64 values
//! ```
//!
//! Backbone tensors come first in canonical order, then `head.<task>.weight`
//! and `head.<task>.bias` in ascending task order.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::ViTConfig;
use super::model::{Head, ViTModel};
use crate::autograd::Tensor;
use crate::codec::{put_f64s, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MEATVIT1";
pub const VERSION: u8 = 1;

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    put_f64s(out, t.data());
}

fn read_tensor(r: &mut Reader<'_>) -> Result<(String, Tensor)> {
    let len = r.u16("tensor name length")? as usize;
    let at = r.offset();
    let name = std::str::from_utf8(r.bytes(len, "tensor name")?)
        .map_err(|_| Error::format(at, "tensor name", "not valid UTF-8"))?
        .to_string();
    let rank = r.u8("tensor rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("tensor dims")? as usize);
    }
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let numel = numel.ok_or_else(|| Error::format(r.offset(), "tensor dims", "element count overflows"))?;
    let data = r.f64s(numel, "tensor data")?;
    Ok((name, Tensor::new(&shape, data)?))
}

impl ViTModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.config().to_bytes());
        out.push(self.is_frozen() as u8);
        let named = self.backbone().named();
        let count = named.len() + 2 * self.heads().len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in named {
            put_tensor(&mut out, &name, t);
        }
        for (id, head) in self.heads() {
            put_tensor(&mut out, &format!("head.{id}.weight"), &head.weight);
            put_tensor(&mut out, &format!("head.{id}.bias"), &head.bias);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let at = r.offset();
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(Error::format(at, "version", format!("unsupported version {version}")));
        }
        let at = r.offset();
        let config = ViTConfig::from_bytes(r.bytes(ViTConfig::ENCODED_LEN, "config")?);
        config
            .validate()
            .map_err(|e| Error::format(at, "config", e.to_string()))?;
        let at = r.offset();
        let frozen = match r.u8("frozen flag")? {
            0 => false,
            1 => true,
            v => return Err(Error::format(at, "frozen flag", format!("invalid value {v}"))),
        };
        let count = r.u32("tensor count")? as usize;

        let mut model = ViTModel::new(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .backbone()
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if count < expected.len() || !(count - expected.len()).is_multiple_of(2) {
            return Err(Error::format(at + 1, "tensor count", format!("{count} is not a valid tensor count")));
        }
        let mut backbone = model.backbone_mut()?.clone();
        for ((want_name, want_shape), slot) in expected.iter().zip(backbone.tensors_mut()) {
            let at = r.offset();
            let (name, t) = read_tensor(&mut r)?;
            if &name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::format(
                    at,
                    "tensor",
                    format!("expected {want_name} {want_shape:?}, found {name} {:?}", t.shape()),
                ));
            }
            *slot = t;
        }
        let mut heads = BTreeMap::new();
        for _ in 0..(count - expected.len()) / 2 {
            let at = r.offset();
            let (wname, weight) = read_tensor(&mut r)?;
            let (bname, bias) = read_tensor(&mut r)?;
            let id = wname
                .strip_prefix("head.")
                .and_then(|s| s.strip_suffix(".weight"))
                .and_then(|s| s.parse::<u32>().ok())
                .ok_or_else(|| Error::format(at, "head", format!("unexpected tensor {wname}")))?;
            let ok = bname == format!("head.{id}.bias")
                && weight.shape().len() == 2
                && weight.shape()[0] == config.embed_dim
                && bias.shape() == [weight.shape()[1]];
            if !ok {
                return Err(Error::format(at, "head", format!("malformed head tensors {wname}/{bname}")));
            }
            heads.insert(id, Head { weight, bias });
        }
        r.finish()?;
        model = ViTModel::from_parts(config, backbone, heads, frozen);
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
