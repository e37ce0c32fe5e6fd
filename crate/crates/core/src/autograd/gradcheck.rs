//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default finite-difference step for float64 checks.
pub const DEFAULT_STEP: f64 = 1e-5;

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check target must be scalar-valued".into()));
    }
    Ok(g.value(out).item())
}

/// Largest `|analytic − numeric| / max(1, |analytic|)` over every entry of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_entries(f, x, step, &all)
}

/// Like [`grad_check`] but only perturbs the listed flat indices.
pub fn grad_check_entries<F>(f: F, x: &Tensor, step: f64, entries: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let base = eval(&f, x)?;
    let again = eval(&f, x)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "grad_check target is not deterministic ({base} vs {again})"
        )));
    }

    let mut g = Graph::new();
    let xv = g.param(x);
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = g.grad(xv).unwrap_or(&zeros).to_vec();

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in entries {
        if i >= x.numel() {
            return Err(Error::Index {
                what: "grad_check entry",
                index: i,
                bound: x.numel(),
            });
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
