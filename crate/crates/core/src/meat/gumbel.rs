use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Source of standard Gumbel noise `g = -ln(-ln u)`, `u ~ Uniform(0, 1)`.
#[derive(Clone, Debug)]
pub struct GumbelSampler {
    source: Source,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Source {
    Seeded(ChaCha8Rng),
    Pinned(f64),
}

impl GumbelSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            source: Source::Seeded(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Returns `value` for every draw. Test hook for noise-free relaxations.
    pub fn pinned(value: f64) -> Self {
        Self {
            source: Source::Pinned(value),
        }
    }

    pub fn sample(&mut self) -> f64 {
        match &mut self.source {
            Source::Pinned(v) => *v,
            Source::Seeded(rng) => {
                let u: f64 = loop {
                    let u = rng.random::<f64>();
                    if u > 0.0 {
                        break u;
                    }
                };
                -(-u.ln()).ln()
            }
        }
    }

    pub fn noise(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.sample())
    }
}

/// Relaxed masks are kept this far away from 0 and 1.
pub const RELAXED_EPS: f64 = 1e-12;

/// First component of a two-way Gumbel-softmax:
/// `exp((l1+g1)/τ) / (exp((l1+g1)/τ) + exp((l2+g2)/τ))`.
pub fn sample_relaxed_mask(logits: [f64; 2], tau: f64, sampler: &mut GumbelSampler) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let a = (logits[0] + sampler.sample()) / tau;
    let b = (logits[1] + sampler.sample()) / tau;
    let m = 1.0 / (1.0 + (b - a).exp());
    Ok(m.clamp(RELAXED_EPS, 1.0 - RELAXED_EPS))
}
