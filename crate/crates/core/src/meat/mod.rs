//! Per-task token and FFN-weight masks: parameterization, Gumbel-softmax
//! relaxation, binarization, the drop-control objective and mask files.

mod gumbel;
mod loss;
mod masks;
mod overhead;
mod params;

pub use gumbel::{sample_relaxed_mask, GumbelSampler, RELAXED_EPS};
pub use loss::{drop_control_loss, total_loss, ObjectiveWeights};
pub use masks::{
    binarize, ActivationRatios, Bits, LayerBits, TaskMaskSet, HEADER_BYTES as MASK_HEADER_BYTES,
    MAGIC as MASK_MAGIC, VERSION as MASK_VERSION,
};
pub use overhead::{backbone_bytes, individual_storage_bytes, mask_file_bytes, mask_payload_bytes, overhead_report, OverheadReport};
pub use params::{binarize_entry, LayerLogits, MaskParams, RelaxedMasks};

/// Defaults for the mask hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeatHyper {
    /// Logits start at `Uniform(-gamma, gamma)`.
    pub gamma: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Linearly anneal τ to `tau_final` over training.
    pub tau_anneal: bool,
    pub tau_final: f64,
}

impl Default for MeatHyper {
    fn default() -> Self {
        Self {
            gamma: 4.0,
            alpha: 2.0,
            lambda: 0.9,
            tau: 1.0,
            tau_anneal: false,
            tau_final: 0.5,
        }
    }
}

impl MeatHyper {
    pub fn objective(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            alpha: self.alpha,
            lambda: self.lambda,
        }
    }

    /// Temperature for `step` of `total_steps`.
    pub fn tau_at(&self, step: usize, total_steps: usize) -> f64 {
        if !self.tau_anneal || total_steps <= 1 {
            return self.tau;
        }
        let frac = step as f64 / (total_steps - 1) as f64;
        self.tau + (self.tau_final - self.tau) * frac
    }

    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("meat.gamma must be positive, got {}", self.gamma)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("meat.alpha must be non-negative, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("meat.lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.tau > 0.0) || !(self.tau_final > 0.0) {
            return Err(Error::Config("meat.tau and meat.tau_final must be positive".into()));
        }
        Ok(())
    }
}
