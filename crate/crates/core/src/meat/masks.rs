//! Binarized per-task masks and the `MEATMSK1` file format.
//!
//! ```text
//! magic          8 bytes  "MEATMSK1"
//! version        u8       1
//! task_id        u32
//! config_digest  u64      ViTConfig::digest of the backbone the masks belong to
//! seed           u64      seed the masks were trained with
//! epochs         u32
//! layers         u32      L
//! tokens         u32      n
//! embed_dim      u32      d
//! ffn_hidden     u32      d'
//! payload        per layer: ⌈n/8⌉ token bytes, ⌈d·d'/8⌉ W1 bytes, ⌈d'·d/8⌉ W2 bytes
//! classes        u32      C
//! head           d·C f64 weights (row-major d × C), then C f64 biases
//! ```
//!
//! Bits are packed LSB-first; padding bits must be zero.

use std::path::Path;

use super::params::{binarize_entry, MaskParams};
use crate::autograd::Tensor;
use crate::codec::{put_f64s, Reader};
use crate::error::{Error, Result};
use crate::vit::{Head, LayerMaskView, ViTConfig};

pub const MAGIC: &[u8; 8] = b"MEATMSK1";
pub const VERSION: u8 = 1;
/// Fixed bytes before the payload.
pub const HEADER_BYTES: usize = 8 + 1 + 4 + 8 + 8 + 4 + 4 * 4;

/// Fixed-length bit vector packed LSB-first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bits {
    len: usize,
    bytes: Vec<u8>,
}

impl Bits {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            bytes: vec![0; len.div_ceil(8)],
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut b = Self::zeros(len);
        for i in 0..len {
            b.set(i, true);
        }
        b
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut b = Self::zeros(len);
        for i in 0..len {
            if f(i) {
                b.set(i, true);
            }
        }
        b
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        if v {
            self.bytes[i / 8] |= 1 << (i % 8);
        } else {
            self.bytes[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Fraction of set bits; 0 for an empty vector.
    pub fn ratio(&self) -> f64 {
        if self.len == 0 {
            0.0
        } else {
            self.count_ones() as f64 / self.len as f64
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn from_reader(r: &mut Reader<'_>, len: usize, field: &'static str) -> Result<Self> {
        let at = r.offset();
        let bytes = r.bytes(len.div_ceil(8), field)?.to_vec();
        if !len.is_multiple_of(8) {
            let last = *bytes.last().unwrap();
            if last >> (len % 8) != 0 {
                return Err(Error::format(at + bytes.len() - 1, field, "non-zero padding bits"));
            }
        }
        Ok(Self { len, bytes })
    }

    /// Values as `0.0` / `1.0`.
    pub fn to_tensor(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, (0..self.len).map(|i| if self.get(i) { 1.0 } else { 0.0 }).collect())
    }
}

/// Binary masks of one encoder layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerBits {
    pub tokens: Bits,
    pub ffn1: Bits,
    pub ffn2: Bits,
}

impl LayerBits {
    pub fn ones(config: &ViTConfig) -> Self {
        let dd = config.embed_dim * config.ffn_hidden;
        Self {
            tokens: Bits::ones(config.num_image_tokens()),
            ffn1: Bits::ones(dd),
            ffn2: Bits::ones(dd),
        }
    }
}

/// Argmax over `[active, isolated]` for every entry.
pub fn binarize(params: &MaskParams) -> Vec<LayerBits> {
    let bits = |t: &Tensor| {
        let d = t.data();
        Bits::from_fn(d.len() / 2, |i| binarize_entry(d[2 * i], d[2 * i + 1]))
    };
    params
        .layers
        .iter()
        .map(|l| LayerBits {
            tokens: bits(&l.tokens),
            ffn1: bits(&l.ffn1),
            ffn2: bits(&l.ffn2),
        })
        .collect()
}

/// Everything stored for one learned task: binary masks plus its classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMaskSet {
    pub task_id: u32,
    pub config_digest: u64,
    pub layers: Vec<LayerBits>,
    pub head: Head,
    pub seed: u64,
    pub epochs: u32,
}

/// Per-layer active fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRatios {
    pub tokens: Vec<f64>,
    pub ffn1: Vec<f64>,
    pub ffn2: Vec<f64>,
}

impl TaskMaskSet {
    pub fn new(
        config: &ViTConfig,
        task_id: u32,
        layers: Vec<LayerBits>,
        head: Head,
        seed: u64,
        epochs: u32,
    ) -> Result<Self> {
        let set = Self {
            task_id,
            config_digest: config.digest(),
            layers,
            head,
            seed,
            epochs,
        };
        set.check(config)?;
        Ok(set)
    }

    fn check(&self, config: &ViTConfig) -> Result<()> {
        let (n, dd) = (config.num_image_tokens(), config.embed_dim * config.ffn_hidden);
        if self.layers.len() != config.layers {
            return Err(Error::Contract(format!(
                "mask set has {} layers, config has {}",
                self.layers.len(),
                config.layers
            )));
        }
        for l in &self.layers {
            if l.tokens.len() != n || l.ffn1.len() != dd || l.ffn2.len() != dd {
                return Err(Error::Contract("mask bitset lengths do not match config".into()));
            }
        }
        if self.head.weight.shape() != [config.embed_dim, self.head.num_classes()] {
            return Err(Error::Contract("classifier head does not match embed_dim".into()));
        }
        Ok(())
    }

    /// `0/1` mask tensors for the encoder.
    pub fn layer_views(&self, config: &ViTConfig) -> Result<Vec<LayerMaskView>> {
        self.check(config)?;
        let (n, d, dff) = (config.num_image_tokens(), config.embed_dim, config.ffn_hidden);
        self.layers
            .iter()
            .map(|l| {
                Ok(LayerMaskView {
                    token_weights: l.tokens.to_tensor(&[n])?,
                    ffn1: l.ffn1.to_tensor(&[d, dff])?,
                    ffn2: l.ffn2.to_tensor(&[dff, d])?,
                })
            })
            .collect()
    }

    pub fn activation_ratios(&self) -> ActivationRatios {
        ActivationRatios {
            tokens: self.layers.iter().map(|l| l.tokens.ratio()).collect(),
            ffn1: self.layers.iter().map(|l| l.ffn1.ratio()).collect(),
            ffn2: self.layers.iter().map(|l| l.ffn2.ratio()).collect(),
        }
    }

    /// Bytes occupied by the bit-packed masks alone.
    pub fn payload_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.tokens.as_bytes().len() + l.ffn1.as_bytes().len() + l.ffn2.as_bytes().len())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let first = self.layers.first();
        let n = first.map_or(0, |l| l.tokens.len());
        let d = self.head.weight.shape()[0];
        let dff = first.map_or(0, |l| l.ffn1.len() / d.max(1));
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload_bytes() + 4 + 8 * self.head.num_params());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.task_id.to_le_bytes());
        out.extend_from_slice(&self.config_digest.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epochs.to_le_bytes());
        for v in [self.layers.len(), n, d, dff] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for l in &self.layers {
            out.extend_from_slice(l.tokens.as_bytes());
            out.extend_from_slice(l.ffn1.as_bytes());
            out.extend_from_slice(l.ffn2.as_bytes());
        }
        out.extend_from_slice(&(self.head.num_classes() as u32).to_le_bytes());
        put_f64s(&mut out, self.head.weight.data());
        put_f64s(&mut out, self.head.bias.data());
        out
    }

    /// Parses a mask file and checks that it was produced for `config`.
    pub fn from_bytes(bytes: &[u8], config: &ViTConfig) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let at = r.offset();
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(Error::format(at, "version", format!("unsupported version {version}")));
        }
        let task_id = r.u32("task_id")?;
        let at = r.offset();
        let config_digest = r.u64("config_digest")?;
        if config_digest != config.digest() {
            return Err(Error::format(
                at,
                "config_digest",
                format!(
                    "mask file was made for config {config_digest:016x}, backbone config is {:016x}",
                    config.digest()
                ),
            ));
        }
        let seed = r.u64("seed")?;
        let epochs = r.u32("epochs")?;
        let at = r.offset();
        let dims = [
            r.u32("layers")? as usize,
            r.u32("tokens")? as usize,
            r.u32("embed_dim")? as usize,
            r.u32("ffn_hidden")? as usize,
        ];
        let want = [config.layers, config.num_image_tokens(), config.embed_dim, config.ffn_hidden];
        if dims != want {
            return Err(Error::format(at, "dims", format!("found {dims:?}, config implies {want:?}")));
        }
        let dd = config.embed_dim * config.ffn_hidden;
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerBits {
                tokens: Bits::from_reader(&mut r, config.num_image_tokens(), "token mask")?,
                ffn1: Bits::from_reader(&mut r, dd, "ffn1 mask")?,
                ffn2: Bits::from_reader(&mut r, dd, "ffn2 mask")?,
            });
        }
        let at = r.offset();
        let classes = r.u32("classes")? as usize;
        if classes == 0 {
            return Err(Error::format(at, "classes", "head has zero classes"));
        }
        let weight = Tensor::new(&[config.embed_dim, classes], r.f64s(config.embed_dim * classes, "head weight")?)?;
        let bias = Tensor::new(&[classes], r.f64s(classes, "head bias")?)?;
        r.finish()?;
        Ok(Self {
            task_id,
            config_digest,
            layers,
            head: Head { weight, bias },
            seed,
            epochs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, config: &ViTConfig) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_set(config: &ViTConfig, seed: u64, classes: usize) -> TaskMaskSet {
        let params = MaskParams::init(config, 4.0, 1.0, seed).unwrap();
        TaskMaskSet::new(config, 3, binarize(&params), Head::new(config.embed_dim, classes, seed), seed, 30).unwrap()
    }

    fn odd() -> ViTConfig {
        ViTConfig {
            image_size: 15,
            patch_size: 5,
            channels: 1,
            embed_dim: 6,
            heads: 2,
            layers: 3,
            ffn_hidden: 5,
        }
    }

    #[test]
    fn desk_payload_is_8200_bytes_with_8_token_bytes() {
        let cfg = ViTConfig::desk();
        let set = random_set(&cfg, 1, 10);
        let token_bytes: usize = set.layers.iter().map(|l| l.tokens.as_bytes().len()).sum();
        assert_eq!(token_bytes, 8);
        assert_eq!(set.payload_bytes(), 8200);
    }

    #[test]
    fn corrupted_magic_and_digest_are_rejected() {
        let cfg = ViTConfig::desk();
        let bytes = random_set(&cfg, 2, 4).to_bytes();
        let mut bad = bytes.clone();
        bad[3] ^= 0xff;
        assert!(matches!(TaskMaskSet::from_bytes(&bad, &cfg), Err(Error::Format { field: "magic", .. })));
        let mut other = cfg;
        other.ffn_hidden = 64;
        assert!(matches!(
            TaskMaskSet::from_bytes(&bytes, &other),
            Err(Error::Format { field: "config_digest", .. })
        ));
        assert!(TaskMaskSet::from_bytes(&bytes[..bytes.len() - 1], &cfg).is_err());
    }

    #[test]
    fn padding_bits_must_be_zero() {
        let cfg = odd();
        let bytes = random_set(&cfg, 5, 2).to_bytes();
        // n = 9 tokens → the second token byte carries 7 padding bits
        let mut bad = bytes.clone();
        bad[HEADER_BYTES + 1] |= 0x80;
        assert!(matches!(TaskMaskSet::from_bytes(&bad, &cfg), Err(Error::Format { .. })));
    }

    #[test]
    fn binarize_follows_argmax_with_active_ties() {
        let cfg = odd();
        let mut p = MaskParams::init(&cfg, 4.0, 1.0, 0).unwrap();
        let d = p.layers[0].tokens.data_mut();
        d[..6].copy_from_slice(&[0.3, -0.2, -1.0, 2.0, 0.7, 0.7]);
        let bits = binarize(&p);
        assert!(bits[0].tokens.get(0));
        assert!(!bits[0].tokens.get(1));
        assert!(bits[0].tokens.get(2));
    }

    #[test]
    fn activation_ratio_is_popcount_over_bits() {
        let mut b = Bits::zeros(64);
        for i in 0..48 {
            b.set(i, true);
        }
        assert_eq!(b.ratio(), 0.75);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn serialization_round_trips_bit_exactly(seed in any::<u64>(), classes in 1usize..7) {
            let cfg = odd();
            let set = random_set(&cfg, seed, classes);
            let bytes = set.to_bytes();
            let back = TaskMaskSet::from_bytes(&bytes, &cfg).unwrap();
            prop_assert_eq!(&back, &set);
            prop_assert_eq!(back.to_bytes(), bytes);
        }

        #[test]
        fn binarize_is_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let cfg = odd();
            let p = MaskParams::init(&cfg, 4.0, 1.0, seed).unwrap();
            let mut q = p.clone();
            for t in q.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            prop_assert_eq!(binarize(&p), binarize(&q));
        }
    }
}
