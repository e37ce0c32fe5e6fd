use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Weight of the drop-control term and its per-layer activation target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { alpha: 2.0, lambda: 0.9 }
    }
}

/// `(1/L) Σ_l (λ − mean_i m_l^i)²` over the per-layer token masks.
pub fn drop_control_loss(g: &mut Graph, token_masks: &[Var], lambda: f64) -> Result<Var> {
    if token_masks.is_empty() {
        return Err(Error::Contract("drop-control loss needs at least one layer".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("meat.lambda must lie in [0, 1], got {lambda}")));
    }
    let mut total: Option<Var> = None;
    for &m in token_masks {
        let mean = g.mean(m);
        let gap = g.add_scalar(mean, -lambda);
        let sq = g.square(gap);
        total = Some(match total {
            Some(t) => g.add(t, sq)?,
            None => sq,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / token_masks.len() as f64))
}

/// Cross-entropy plus `α` times the drop-control loss.
pub fn total_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    token_masks: &[Var],
    weights: ObjectiveWeights,
) -> Result<Var> {
    if !(weights.alpha >= 0.0) {
        return Err(Error::Config(format!("meat.alpha must be non-negative, got {}", weights.alpha)));
    }
    let ce = g.cross_entropy(logits, labels)?;
    if weights.alpha == 0.0 {
        return Ok(ce);
    }
    let dc = drop_control_loss(g, token_masks, weights.lambda)?;
    let dc = g.scale(dc, weights.alpha);
    g.add(ce, dc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check, Tensor, DEFAULT_STEP};

    fn masks(g: &mut Graph, layers: &[&[f64]]) -> Vec<Var> {
        layers
            .iter()
            .map(|m| g.param(&Tensor::new(&[m.len()], m.to_vec()).unwrap()))
            .collect()
    }

    #[test]
    fn all_active_gives_point_zero_one() {
        for l in 1..5 {
            let mut g = Graph::new();
            let ones = vec![1.0; 16];
            let layers: Vec<&[f64]> = (0..l).map(|_| ones.as_slice()).collect();
            let m = masks(&mut g, &layers);
            let v = drop_control_loss(&mut g, &m, 0.9).unwrap();
            assert!((g.value(v).item() - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn two_layer_example() {
        let mut g = Graph::new();
        let m = masks(&mut g, &[&[0.9, 0.9], &[0.6, 0.8]]);
        let v = drop_control_loss(&mut g, &m, 0.9).unwrap();
        // ((0.9-0.9)² + (0.9-0.7)²) / 2 = 0.02
        assert!((g.value(v).item() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn zero_at_target_and_errors() {
        let mut g = Graph::new();
        let m = masks(&mut g, &[&[0.8, 1.0], &[0.9]]);
        let v = drop_control_loss(&mut g, &m, 0.9).unwrap();
        assert!(g.value(v).item().abs() < 1e-15);
        assert!(matches!(drop_control_loss(&mut g, &[], 0.9), Err(Error::Contract(_))));
        assert!(matches!(drop_control_loss(&mut g, &m, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_pushes_layer_mean_toward_target() {
        let mut g = Graph::new();
        let m = masks(&mut g, &[&[0.2, 0.4], &[1.0, 1.0]]);
        let v = drop_control_loss(&mut g, &m, 0.9).unwrap();
        g.backward(v).unwrap();
        // below target → negative gradient (descent raises it); above → positive
        assert!(g.grad(m[0]).unwrap().iter().all(|&x| x < 0.0));
        assert!(g.grad(m[1]).unwrap().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn total_loss_combines_terms() {
        let mut g = Graph::new();
        let logits = g.constant(&Tensor::new(&[1, 2], vec![0.3, -0.4]).unwrap());
        let m = masks(&mut g, &[&[1.0; 4]]);
        let ce = g.cross_entropy(logits, &[0]).unwrap();
        let ce_val = g.value(ce).item();
        let zero = total_loss(&mut g, logits, &[0], &m, ObjectiveWeights { alpha: 0.0, lambda: 0.9 }).unwrap();
        assert_eq!(g.value(zero).item(), ce_val);
        let full = total_loss(&mut g, logits, &[0], &m, ObjectiveWeights::default()).unwrap();
        assert!((g.value(full).item() - (ce_val + 2.0 * 0.01)).abs() < 1e-15);
        assert!(total_loss(&mut g, logits, &[0], &m, ObjectiveWeights { alpha: -1.0, lambda: 0.9 }).is_err());
    }

    #[test]
    fn arithmetic_example() {
        // α = 2, L_dc = 0.01, L_ce = 0.5 → 0.52
        let mut g = Graph::new();
        let ce = g.constant(&Tensor::scalar(0.5));
        let m = masks(&mut g, &[&[1.0; 4]]);
        let dc = drop_control_loss(&mut g, &m, 0.9).unwrap();
        let dc = g.scale(dc, 2.0);
        let t = g.add(ce, dc).unwrap();
        assert!((g.value(t).item() - 0.52).abs() < 1e-15);
    }

    #[test]
    fn drop_control_gradient_check() {
        let x = Tensor::new(&[2, 5], vec![0.1, 0.5, 0.9, 0.3, 0.7, 0.2, 0.95, 0.4, 0.6, 0.8]).unwrap();
        let f = |g: &mut Graph, x: Var| {
            let a = g.gather_rows(x, &[0])?;
            let b = g.gather_rows(x, &[1])?;
            let a = g.reshape(a, &[5])?;
            let b = g.reshape(b, &[5])?;
            drop_control_loss(g, &[a, b], 0.9)
        };
        assert!(grad_check(f, &x, DEFAULT_STEP).unwrap() < 1e-4);
    }
}
