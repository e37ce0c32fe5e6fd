use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gumbel::{GumbelSampler, RELAXED_EPS};
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::vit::{LayerMaskVars, ViTConfig};

/// Two-way logits for every mask entry of one layer. The last axis holds
/// `[active, isolated]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerLogits {
    /// `n × 2`
    pub tokens: Tensor,
    /// `d × d' × 2`
    pub ffn1: Tensor,
    /// `d' × d × 2`
    pub ffn2: Tensor,
}

impl LayerLogits {
    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.tokens, &self.ffn1, &self.ffn2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.tokens, &mut self.ffn1, &mut self.ffn2]
    }
}

/// Trainable mask logits for one task plus the relaxation temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskParams {
    pub layers: Vec<LayerLogits>,
    tau: f64,
    gamma: f64,
}

/// Graph handles produced by [`MaskParams::relax`].
#[derive(Clone, Debug)]
pub struct RelaxedMasks {
    /// Logit leaves, `[tokens, ffn1, ffn2]` per layer.
    pub logits: Vec<[Var; 3]>,
    /// Relaxed mask values fed to the encoder.
    pub layers: Vec<LayerMaskVars>,
}

impl RelaxedMasks {
    pub fn token_masks(&self) -> Vec<Var> {
        self.layers.iter().map(|l| l.token_weights).collect()
    }
}

impl MaskParams {
    /// Every logit drawn i.i.d. from `Uniform(-γ, γ)`.
    pub fn init(config: &ViTConfig, gamma: f64, tau: f64, seed: u64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Config(format!("meat.gamma must be positive, got {gamma}")));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Config(format!("meat.tau must be positive, got {tau}")));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d, dff) = (config.num_image_tokens(), config.embed_dim, config.ffn_hidden);
        let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-gamma..gamma));
        let layers = (0..config.layers)
            .map(|_| LayerLogits {
                tokens: draw(&[n, 2]),
                ffn1: draw(&[d, dff, 2]),
                ffn2: draw(&[dff, d, 2]),
            })
            .collect();
        Ok(Self { layers, tau, gamma })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("meat.tau must be positive, got {tau}")));
        }
        self.tau = tau;
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| l.tensors())
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Records trainable logits and their Gumbel-softmax relaxation on `g`.
    /// One fresh noise pair is drawn per mask entry, in layer order
    /// (tokens, ffn1, ffn2).
    pub fn relax(&self, g: &mut Graph, sampler: &mut GumbelSampler) -> Result<RelaxedMasks> {
        let mut logits = Vec::with_capacity(self.layers.len());
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut vars = [None; 3];
            let mut relaxed = [None; 3];
            for (i, t) in layer.tensors().into_iter().enumerate() {
                let lv = g.param(t);
                let noise = g.constant(&sampler.noise(t.shape()));
                let z = g.add(lv, noise)?;
                let z = g.scale(z, 1.0 / self.tau);
                let p = g.softmax_row(z)?;
                let m = g.select_last(p, 0)?;
                relaxed[i] = Some(g.clamp(m, RELAXED_EPS, 1.0 - RELAXED_EPS));
                vars[i] = Some(lv);
            }
            let [t, f1, f2] = relaxed.map(Option::unwrap);
            logits.push(vars.map(Option::unwrap));
            layers.push(LayerMaskVars {
                token_weights: t,
                ffn1: f1,
                ffn2: f2,
            });
        }
        Ok(RelaxedMasks { logits, layers })
    }
}

/// Binary decision for one entry: active iff the active logit is at least
/// the isolated logit (ties count as active).
#[inline]
pub fn binarize_entry(active: f64, isolated: f64) -> bool {
    active >= isolated
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_size: 8,
            channels: 1,
            embed_dim: 8,
            heads: 2,
            layers: 2,
            ffn_hidden: 12,
        }
    }

    #[test]
    fn init_respects_range_and_seed() {
        let cfg = ViTConfig::desk();
        let p = MaskParams::init(&cfg, 4.0, 1.0, 3).unwrap();
        let q = MaskParams::init(&cfg, 4.0, 1.0, 3).unwrap();
        assert_eq!(p, q);
        for l in &p.layers {
            for t in l.tensors() {
                assert!(t.data().iter().all(|v| (-4.0..=4.0).contains(v)));
            }
        }
        assert_eq!(p.layers[0].tokens.shape(), &[16, 2]);
        assert_eq!(p.layers[0].ffn1.shape(), &[64, 128, 2]);
        assert_eq!(p.layers[0].ffn2.shape(), &[128, 64, 2]);
    }

    #[test]
    fn init_mean_is_near_zero() {
        // desk config holds 4·(32 + 2·16384) ≈ 1.3·10⁵ logits
        let p = MaskParams::init(&ViTConfig::desk(), 4.0, 1.0, 11).unwrap();
        let (sum, count) = p
            .layers
            .iter()
            .flat_map(|l| l.tensors())
            .fold((0.0, 0usize), |(s, c), t| (s + t.data().iter().sum::<f64>(), c + t.numel()));
        assert!(count >= 100_000);
        assert!((sum / count as f64).abs() < 0.05);
    }

    #[test]
    fn init_rejects_bad_hyperparameters() {
        let cfg = small();
        assert!(matches!(MaskParams::init(&cfg, 0.0, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(MaskParams::init(&cfg, -1.0, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(MaskParams::init(&cfg, 4.0, 0.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn relaxed_masks_match_scalar_formula() {
        let cfg = small();
        let p = MaskParams::init(&cfg, 4.0, 0.7, 5).unwrap();
        let mut g = Graph::new();
        let mut pinned = GumbelSampler::pinned(0.0);
        let r = p.relax(&mut g, &mut pinned).unwrap();
        let logits = p.layers[1].tokens.data();
        for (i, m) in g.data(r.layers[1].token_weights).iter().enumerate() {
            let (a, b) = (logits[2 * i] / 0.7, logits[2 * i + 1] / 0.7);
            let expect = a.exp() / (a.exp() + b.exp());
            assert!((m - expect).abs() < 1e-14);
            assert!(*m > 0.0 && *m < 1.0);
        }
        assert_eq!(g.shape(r.layers[0].ffn1), &[8, 12]);
    }

    #[test]
    fn binarize_tie_and_cases() {
        assert!(binarize_entry(0.3, -0.2));
        assert!(!binarize_entry(-1.0, 2.0));
        assert!(binarize_entry(0.7, 0.7));
    }
}
