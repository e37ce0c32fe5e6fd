use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::ViTConfig;
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Parameters of one pre-norm encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// `d × d'`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `d' × d`
    pub w2: Tensor,
    pub b2: Tensor,
}

const LAYER_TENSORS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo",
    "attn.bo", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

impl EncoderLayer {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_gain, &self.ln2_bias, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo, &mut self.ln2_gain, &mut self.ln2_bias,
            &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2,
        ]
    }
}

/// Everything except the per-task classifier heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    /// `patch_dim × d`
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub class_token: Tensor,
    /// `(n+1) × d`
    pub pos_embed: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

impl Backbone {
    /// All backbone tensors in canonical order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch.weight".to_string(), &self.patch_weight),
            ("patch.bias".to_string(), &self.patch_bias),
            ("class_token".to_string(), &self.class_token),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("norm.gain".to_string(), &self.norm_gain));
        out.push(("norm.bias".to_string(), &self.norm_bias));
        out
    }

    /// Same order as [`Backbone::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.class_token,
            &mut self.pos_embed,
        ];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.norm_gain);
        out.push(&mut self.norm_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Bytes of the backbone as stored (float64 per parameter).
    pub fn param_bytes(&self) -> usize {
        self.num_params() * 8
    }

    /// SHA-256 over every backbone value in canonical order.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Records every tensor on `g`, trainable or not.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundBackbone {
        let mut leaf = |t: &Tensor| if trainable { g.param(t) } else { g.constant(t) };
        let patch_weight = leaf(&self.patch_weight);
        let patch_bias = leaf(&self.patch_bias);
        let class_token = leaf(&self.class_token);
        let pos_embed = leaf(&self.pos_embed);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let v = l.tensors().map(&mut leaf);
                BoundLayer {
                    ln1_gain: v[0],
                    ln1_bias: v[1],
                    wq: v[2],
                    bq: v[3],
                    wk: v[4],
                    bk: v[5],
                    wv: v[6],
                    bv: v[7],
                    wo: v[8],
                    bo: v[9],
                    ln2_gain: v[10],
                    ln2_bias: v[11],
                    w1: v[12],
                    b1: v[13],
                    w2: v[14],
                    b2: v[15],
                }
            })
            .collect();
        let norm_gain = leaf(&self.norm_gain);
        let norm_bias = leaf(&self.norm_bias);
        BoundBackbone {
            patch_weight,
            patch_bias,
            class_token,
            pos_embed,
            layers,
            norm_gain,
            norm_bias,
        }
    }
}

/// Graph handles for one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Graph handles for the backbone, mirroring [`Backbone`].
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    pub patch_weight: Var,
    pub patch_bias: Var,
    pub class_token: Var,
    pub pos_embed: Var,
    pub layers: Vec<BoundLayer>,
    pub norm_gain: Var,
    pub norm_bias: Var,
}

impl BoundBackbone {
    /// Same order as [`Backbone::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.patch_weight, self.patch_bias, self.class_token, self.pos_embed];
        for l in &self.layers {
            out.extend([
                l.ln1_gain, l.ln1_bias, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_gain, l.ln2_bias,
                l.w1, l.b1, l.w2, l.b2,
            ]);
        }
        out.push(self.norm_gain);
        out.push(self.norm_bias);
        out
    }
}

/// Linear classifier `d → C` for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// `d × C`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn new(embed_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weight: xavier(&mut rng, embed_dim, num_classes),
            bias: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> (Var, Var) {
        if trainable {
            (g.param(&self.weight), g.param(&self.bias))
        } else {
            (g.constant(&self.weight), g.constant(&self.bias))
        }
    }
}

/// Value-level masks for one layer. `token_weights` has length `n` and
/// never includes the class token, which is always fully active.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMaskView {
    pub token_weights: Tensor,
    pub ffn1: Tensor,
    pub ffn2: Tensor,
}

impl LayerMaskView {
    pub fn ones(config: &ViTConfig) -> Self {
        Self {
            token_weights: Tensor::ones(&[config.num_image_tokens()]),
            ffn1: Tensor::ones(&[config.embed_dim, config.ffn_hidden]),
            ffn2: Tensor::ones(&[config.ffn_hidden, config.embed_dim]),
        }
    }
}

/// Graph-level masks for one layer (e.g. relaxed masks under training).
#[derive(Clone, Copy, Debug)]
pub struct LayerMaskVars {
    pub token_weights: Var,
    pub ffn1: Var,
    pub ffn2: Var,
}

/// Which masks the encoder applies.
#[derive(Clone, Copy, Debug)]
pub enum Masks<'a> {
    /// All-to-all token interaction and unmasked FFN weights (the base task).
    Standard,
    Values(&'a [LayerMaskView]),
    Vars(&'a [LayerMaskVars]),
}

/// Backbone plus per-task heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel {
    config: ViTConfig,
    backbone: Backbone,
    heads: BTreeMap<u32, Head>,
    frozen: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, &[fan_in, fan_out], (6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Splits `[B, C, H, W]` images into `[B·n, C·p·p]` patch rows (channel-major within a patch).
pub fn patchify(config: &ViTConfig, images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    let (c, side, p) = (config.channels, config.image_size, config.patch_size);
    if s.len() != 4 || s[1] != c || s[2] != side || s[3] != side {
        return Err(Error::Config(format!(
            "image batch shape {s:?} does not match config [B, {c}, {side}, {side}]"
        )));
    }
    let batch = s[0];
    let per_side = side / p;
    let n = per_side * per_side;
    let pd = config.patch_dim();
    let src = images.data();
    let mut out = vec![0.0; batch * n * pd];
    for b in 0..batch {
        let img = &src[b * c * side * side..(b + 1) * c * side * side];
        for py in 0..per_side {
            for px in 0..per_side {
                let row = &mut out[(b * n + py * per_side + px) * pd..][..pd];
                let mut k = 0;
                for ch in 0..c {
                    for y in 0..p {
                        let start = ch * side * side + (py * p + y) * side + px * p;
                        row[k..k + p].copy_from_slice(&img[start..start + p]);
                        k += p;
                    }
                }
            }
        }
    }
    Tensor::new(&[batch * n, pd], out)
}

impl ViTModel {
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, dff) = (config.embed_dim, config.ffn_hidden);
        // uniform(±0.02·√3) has standard deviation 0.02
        let small = 0.02 * 3f64.sqrt();
        let patch_weight = xavier(&mut rng, config.patch_dim(), d);
        let class_token = uniform(&mut rng, &[d], small);
        let pos_embed = uniform(&mut rng, &[config.seq_len(), d], small);
        let layers = (0..config.layers)
            .map(|_| EncoderLayer {
                ln1_gain: Tensor::ones(&[d]),
                ln1_bias: Tensor::zeros(&[d]),
                wq: xavier(&mut rng, d, d),
                bq: Tensor::zeros(&[d]),
                wk: xavier(&mut rng, d, d),
                bk: Tensor::zeros(&[d]),
                wv: xavier(&mut rng, d, d),
                bv: Tensor::zeros(&[d]),
                wo: xavier(&mut rng, d, d),
                bo: Tensor::zeros(&[d]),
                ln2_gain: Tensor::ones(&[d]),
                ln2_bias: Tensor::zeros(&[d]),
                w1: xavier(&mut rng, d, dff),
                b1: Tensor::zeros(&[dff]),
                w2: xavier(&mut rng, dff, d),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let backbone = Backbone {
            patch_weight,
            patch_bias: Tensor::zeros(&[d]),
            class_token,
            pos_embed,
            layers,
            norm_gain: Tensor::ones(&[d]),
            norm_bias: Tensor::zeros(&[d]),
        };
        Ok(Self {
            config,
            backbone,
            heads: BTreeMap::new(),
            frozen: false,
        })
    }

    pub(crate) fn from_parts(config: ViTConfig, backbone: Backbone, heads: BTreeMap<u32, Head>, frozen: bool) -> Self {
        Self {
            config,
            backbone,
            heads,
            frozen,
        }
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Mutable backbone access; refused once the backbone is frozen.
    pub fn backbone_mut(&mut self) -> Result<&mut Backbone> {
        if self.frozen {
            return Err(Error::Contract("backbone is frozen".into()));
        }
        Ok(&mut self.backbone)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn backbone_checksum(&self) -> [u8; 32] {
        self.backbone.checksum()
    }

    pub fn heads(&self) -> &BTreeMap<u32, Head> {
        &self.heads
    }

    pub fn head(&self, task_id: u32) -> Result<&Head> {
        self.heads
            .get(&task_id)
            .ok_or_else(|| Error::Lookup(format!("no classifier head registered for task {task_id}")))
    }

    pub fn set_head(&mut self, task_id: u32, head: Head) -> Result<()> {
        if head.weight.shape() != [self.config.embed_dim, head.num_classes()] {
            return Err(Error::shape("set_head", head.weight.shape(), &[self.config.embed_dim]));
        }
        self.heads.insert(task_id, head);
        Ok(())
    }

    pub fn remove_head(&mut self, task_id: u32) -> Option<Head> {
        self.heads.remove(&task_id)
    }

    /// Patch projection, class token at sequence index 0, position embeddings.
    /// `patches` is `[B·n, patch_dim]`; the result is `[B·(n+1), d]`.
    pub fn patch_embed(&self, g: &mut Graph, bb: &BoundBackbone, patches: Var, batch: usize) -> Result<Var> {
        let cfg = &self.config;
        let (n, t, d) = (cfg.num_image_tokens(), cfg.seq_len(), cfg.embed_dim);
        if g.shape(patches) != [batch * n, cfg.patch_dim()] {
            return Err(Error::Config(format!(
                "patch rows {:?} do not match config [{}, {}]",
                g.shape(patches),
                batch * n,
                cfg.patch_dim()
            )));
        }
        let x = g.matmul(patches, bb.patch_weight)?;
        let x = g.add_broadcast(x, bb.patch_bias)?;
        let cls = g.reshape(bb.class_token, &[1, d])?;
        let stacked = g.concat(&[cls, x])?;
        let rows: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(0).chain((0..n).map(move |i| 1 + b * n + i)))
            .collect();
        let seq = g.gather_rows(stacked, &rows)?;
        let seq = g.reshape(seq, &[batch, t, d])?;
        let seq = g.add_broadcast(seq, bb.pos_embed)?;
        g.reshape(seq, &[batch * t, d])
    }

    /// Multi-head self-attention with key-side token weights. `key_weights`
    /// has length `n+1` (class token first) and is shared by all heads.
    /// Returns the block output and the attention probabilities `[B·H, T, T]`.
    pub fn mhsa(
        &self,
        g: &mut Graph,
        layer: &BoundLayer,
        x: Var,
        batch: usize,
        key_weights: Option<Var>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let (t, h) = (cfg.seq_len(), cfg.heads);
        let proj = |g: &mut Graph, w: Var, b: Var| -> Result<Var> {
            let y = g.matmul(x, w)?;
            g.add_broadcast(y, b)
        };
        let q = proj(g, layer.wq, layer.bq)?;
        let k = proj(g, layer.wk, layer.bk)?;
        let v = proj(g, layer.wv, layer.bv)?;
        let q = g.split_heads(q, batch, t, h)?;
        let k = g.split_heads(k, batch, t, h)?;
        let v = g.split_heads(v, batch, t, h)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (cfg.head_dim() as f64).sqrt());
        let probs = match key_weights {
            Some(w) => g.masked_softmax_row(scores, w)?,
            None => g.softmax_row(scores)?,
        };
        let ctx = g.batch_matmul(probs, v, false)?;
        let ctx = g.merge_heads(ctx, batch, t, h)?;
        let out = g.matmul(ctx, layer.wo)?;
        Ok((g.add_broadcast(out, layer.bo)?, probs))
    }

    /// `φ(x·(m₁⊙W₁) + b₁)·(m₂⊙W₂) + b₂`; masks never touch the biases.
    pub fn ffn(&self, g: &mut Graph, layer: &BoundLayer, x: Var, masks: Option<(Var, Var)>) -> Result<Var> {
        let (w1, w2) = match masks {
            Some((m1, m2)) => (g.mul(layer.w1, m1)?, g.mul(layer.w2, m2)?),
            None => (layer.w1, layer.w2),
        };
        let hdn = g.matmul(x, w1)?;
        let hdn = g.add_broadcast(hdn, layer.b1)?;
        let hdn = g.gelu(hdn);
        let out = g.matmul(hdn, w2)?;
        g.add_broadcast(out, layer.b2)
    }

    fn layer_mask_vars(&self, g: &mut Graph, masks: Masks<'_>) -> Result<Option<Vec<LayerMaskVars>>> {
        let cfg = &self.config;
        let (n, d, dff) = (cfg.num_image_tokens(), cfg.embed_dim, cfg.ffn_hidden);
        let vars = match masks {
            Masks::Standard => return Ok(None),
            Masks::Values(views) => views
                .iter()
                .map(|v| LayerMaskVars {
                    token_weights: g.constant(&v.token_weights),
                    ffn1: g.constant(&v.ffn1),
                    ffn2: g.constant(&v.ffn2),
                })
                .collect::<Vec<_>>(),
            Masks::Vars(v) => v.to_vec(),
        };
        if vars.len() != cfg.layers {
            return Err(Error::Contract(format!(
                "masks cover {} layers, model has {}",
                vars.len(),
                cfg.layers
            )));
        }
        for m in &vars {
            if g.shape(m.token_weights) != [n] {
                return Err(Error::Contract(format!(
                    "token mask has shape {:?}, expected [{n}]",
                    g.shape(m.token_weights)
                )));
            }
            if g.shape(m.ffn1) != [d, dff] || g.shape(m.ffn2) != [dff, d] {
                return Err(Error::Contract(format!(
                    "FFN mask shapes {:?}/{:?} do not match W1 [{d}, {dff}] and W2 [{dff}, {d}]",
                    g.shape(m.ffn1),
                    g.shape(m.ffn2)
                )));
            }
        }
        Ok(Some(vars))
    }

    /// Runs the encoder stack and returns normalized class-token features
    /// `[B, d]`. When `attention` is given, each layer's probability tensor
    /// is pushed onto it.
    pub fn encode(
        &self,
        g: &mut Graph,
        bb: &BoundBackbone,
        patches: Var,
        batch: usize,
        masks: Masks<'_>,
        mut attention: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let mask_vars = self.layer_mask_vars(g, masks)?;
        let one = g.constant(&Tensor::ones(&[1]));
        let mut x = self.patch_embed(g, bb, patches, batch)?;
        for (l, layer) in bb.layers.iter().enumerate() {
            let lm = mask_vars.as_ref().map(|v| v[l]);
            let key_weights = match lm {
                Some(m) => Some(g.concat(&[one, m.token_weights])?),
                None => None,
            };
            let h = g.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
            let (attn, probs) = self.mhsa(g, layer, h, batch, key_weights)?;
            if let Some(a) = attention.as_deref_mut() {
                a.push(probs);
            }
            x = g.add(x, attn)?;
            let h = g.layer_norm(x, layer.ln2_gain, layer.ln2_bias)?;
            let f = self.ffn(g, layer, h, lm.map(|m| (m.ffn1, m.ffn2)))?;
            x = g.add(x, f)?;
        }
        let t = self.config.seq_len();
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
        let cls = g.gather_rows(x, &cls_rows)?;
        g.layer_norm(cls, bb.norm_gain, bb.norm_bias)
    }

    pub fn apply_head(g: &mut Graph, head: (Var, Var), features: Var) -> Result<Var> {
        let y = g.matmul(features, head.0)?;
        g.add_broadcast(y, head.1)
    }

    /// Logits `[B, C_task]` for a batch `[B, C, H, W]`. Pure function of its inputs.
    pub fn logits(&self, images: &Tensor, task_id: u32, masks: Masks<'_>) -> Result<Tensor> {
        let head = self.head(task_id)?;
        let batch = images.shape().first().copied().unwrap_or(0);
        let patches = patchify(&self.config, images)?;
        let mut g = Graph::new();
        let bb = self.backbone.bind(&mut g, false);
        let p = g.constant(&patches);
        let feats = self.encode(&mut g, &bb, p, batch, masks, None)?;
        let hv = head.bind(&mut g, false);
        let out = Self::apply_head(&mut g, hv, feats)?;
        Ok(g.value(out).clone())
    }

    /// Class-token features `[B, d]` without any head.
    pub fn features(&self, images: &Tensor, masks: Masks<'_>) -> Result<Tensor> {
        let batch = images.shape().first().copied().unwrap_or(0);
        let patches = patchify(&self.config, images)?;
        let mut g = Graph::new();
        let bb = self.backbone.bind(&mut g, false);
        let p = g.constant(&patches);
        let feats = self.encode(&mut g, &bb, p, batch, masks, None)?;
        Ok(g.value(feats).clone())
    }

    /// Logits for a single `[C, H, W]` image.
    pub fn forward(&self, image: &Tensor, task_id: u32, masks: Masks<'_>) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let batch = image.clone().reshaped(&shape)?;
        let out = self.logits(&batch, task_id, masks)?;
        let c = out.numel();
        out.reshaped(&[c])
    }

    /// Per-layer attention probabilities `[B·H, T, T]` (row = query, column = key).
    pub fn attention_maps(&self, images: &Tensor, masks: Masks<'_>) -> Result<Vec<Tensor>> {
        let batch = images.shape().first().copied().unwrap_or(0);
        let patches = patchify(&self.config, images)?;
        let mut g = Graph::new();
        let bb = self.backbone.bind(&mut g, false);
        let p = g.constant(&patches);
        let mut maps = Vec::new();
        self.encode(&mut g, &bb, p, batch, masks, Some(&mut maps))?;
        Ok(maps.into_iter().map(|v| g.value(v).clone()).collect())
    }
}
