use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Plain central difference, independent of `grad_check`.
fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let o = p[i];
            p[i] = o + h;
            let up = f(&p);
            p[i] = o - h;
            let down = f(&p);
            p[i] = o;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Delete keys whose weight is zero, softmax the rest, scatter back.
fn delete_and_softmax(row: &[f64], mask: &[bool]) -> Vec<f64> {
    let kept: Vec<f64> = row.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
    let max = kept.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = kept.iter().map(|v| (v - max).exp()).sum();
    row.iter()
        .zip(mask)
        .map(|(v, &m)| if m { (v - max).exp() / denom } else { 0.0 })
        .collect()
}

#[test]
fn matmul_identity_and_arithmetic() {
    let mut g = Graph::new();
    let i = g.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
    let v = g.constant(&t(&[2, 1], &[3., 4.]));
    let out = g.matmul(i, v).unwrap();
    assert_eq!(g.data(out), &[3., 4.]);

    let a = g.constant(&t(&[1, 2], &[1., 2.]));
    let out = g.matmul(a, v).unwrap();
    assert_eq!(g.shape(out), &[1, 1]);
    assert_eq!(g.data(out), &[11.]);
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::zeros(&[2, 3]));
    let b = g.constant(&Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_difference() {
    let b = [3.0, 4.0];
    let f = |a: &[f64]| a[0] * b[0] + a[1] * b[1];
    let numeric = numeric_grad(f, &[1.0, 2.0], 1e-6);

    let mut g = Graph::new();
    let a = g.param(&t(&[1, 2], &[1., 2.]));
    let bv = g.constant(&t(&[2, 1], &b));
    let c = g.matmul(a, bv).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    let analytic = g.grad(a).unwrap();
    for (x, y) in analytic.iter().zip(&numeric) {
        assert!((x - y).abs() < 1e-6);
    }
    assert_eq!(analytic, &[3.0, 4.0]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let a = g.constant(&t(&[2], &[0., 0.]));
    let s = g.softmax_row(a).unwrap();
    assert_eq!(g.data(s), &[0.5, 0.5]);

    let a = g.constant(&t(&[2], &[2f64.ln(), 0.]));
    let s = g.softmax_row(a).unwrap();
    assert!((g.data(s)[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.data(s)[1] - 1.0 / 3.0).abs() < 1e-15);

    let a = g.constant(&t(&[2], &[1000., 0.]));
    let s = g.softmax_row(a).unwrap();
    assert!((g.data(s)[0] - 1.0).abs() < 1e-12);
    assert!(g.data(s)[1].abs() < 1e-12);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::new();
    let a = g.constant(&t(&[2], &[f64::NAN, 0.]));
    assert!(matches!(g.softmax_row(a), Err(Error::NumericDomain { .. })));
    let a = g.constant(&t(&[2], &[f64::INFINITY, 0.]));
    assert!(matches!(g.softmax_row(a), Err(Error::NumericDomain { .. })));
}

#[test]
fn masked_softmax_examples() {
    let mut g = Graph::new();
    let w = g.constant(&t(&[3], &[1., 1., 0.]));
    let a = g.constant(&t(&[3], &[0., 0., 0.]));
    let s = g.masked_softmax_row(a, w).unwrap();
    assert_eq!(g.data(s), &[0.5, 0.5, 0.0]);

    // The masked logit is the largest one and must still be ignored.
    let a = g.constant(&t(&[3], &[2f64.ln(), 0., 5.]));
    let s = g.masked_softmax_row(a, w).unwrap();
    assert!((g.data(s)[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.data(s)[1] - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(g.data(s)[2].to_bits(), 0f64.to_bits());
}

#[test]
fn masked_softmax_huge_masked_logit_stays_zero() {
    let mut g = Graph::new();
    let w = g.constant(&t(&[3], &[1., 0., 1.]));
    let a = g.constant(&t(&[3], &[0., 1e6, 1.]));
    let s = g.masked_softmax_row(a, w).unwrap();
    assert!(g.data(s).iter().all(|v| v.is_finite()));
    assert_eq!(g.data(s)[1], 0.0);
}

#[test]
fn masked_softmax_degenerate_and_domain_errors() {
    let mut g = Graph::new();
    let a = g.constant(&t(&[2], &[0., 1.]));
    let w = g.constant(&t(&[2], &[0., 0.]));
    assert!(matches!(g.masked_softmax_row(a, w), Err(Error::DegenerateMask)));
    let w = g.constant(&t(&[2], &[1.5, 0.]));
    assert!(matches!(g.masked_softmax_row(a, w), Err(Error::NumericDomain { .. })));
    let w = g.constant(&t(&[3], &[1., 1., 1.]));
    assert!(matches!(g.masked_softmax_row(a, w), Err(Error::Shape { .. })));
}

#[test]
fn gelu_examples() {
    let mut g = Graph::new();
    let a = g.constant(&t(&[2], &[0., 10.]));
    let y = g.gelu(a);
    assert_eq!(g.data(y)[0], 0.0);
    assert!((g.data(y)[1] - 10.0).abs() < 1e-9);

    let numeric = numeric_grad(|x| kernels::gelu(x[0]), &[0.5], 1e-6)[0];
    let mut g = Graph::new();
    let x = g.param(&t(&[1], &[0.5]));
    let y = g.gelu(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!((g.grad(x).unwrap()[0] - numeric).abs() < 1e-6);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(&Tensor::ones(&[3]));
    let bias = g.constant(&Tensor::zeros(&[3]));
    let x = g.constant(&t(&[1, 3], &[1., 1., 1.]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert_eq!(g.data(y), &[0., 0., 0.]);

    let gain = g.constant(&Tensor::ones(&[2]));
    let bias = g.constant(&Tensor::zeros(&[2]));
    let x = g.constant(&t(&[1, 2], &[1., 3.]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert!((g.data(y)[0] + 1.0).abs() < 1e-6);
    assert!((g.data(y)[1] - 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gain = random(&[5], &mut rng);
    let bias = random(&[5], &mut rng);
    let weights = random(&[3, 5], &mut rng);
    let x = random(&[3, 5], &mut rng);
    let f = |g: &mut Graph, x: Var| {
        let gv = g.constant(&gain);
        let bv = g.constant(&bias);
        let wv = g.constant(&weights);
        let y = g.layer_norm(x, gv, bv)?;
        let y = g.mul(y, wv)?;
        Ok(g.sum(y))
    };
    assert!(grad_check(f, &x, DEFAULT_STEP).unwrap() < 1e-4);
    let f = |g: &mut Graph, gv: Var| {
        let xv = g.constant(&x);
        let bv = g.constant(&bias);
        let wv = g.constant(&weights);
        let y = g.layer_norm(xv, gv, bv)?;
        let y = g.mul(y, wv)?;
        Ok(g.sum(y))
    };
    assert!(grad_check(f, &gain, DEFAULT_STEP).unwrap() < 1e-4);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let l = g.constant(&t(&[1, 2], &[0., 0.]));
    let ce = g.cross_entropy(l, &[0]).unwrap();
    assert!((g.value(ce).item() - 2f64.ln()).abs() < 1e-15);

    let l = g.constant(&t(&[1, 2], &[10., -10.]));
    let ce = g.cross_entropy(l, &[0]).unwrap();
    assert!(g.value(ce).item() < 1e-8);

    assert!(matches!(g.cross_entropy(l, &[2]), Err(Error::Index { .. })));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = [0.3, -1.2, 2.0];
    let mut g = Graph::new();
    let l = g.param(&t(&[1, 3], &logits));
    let ce = g.cross_entropy(l, &[1]).unwrap();
    g.backward(ce).unwrap();
    let max = 2.0;
    let z: f64 = logits.iter().map(|v| f64::exp(v - max)).sum();
    let expected: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, v)| (v - max).exp() / z - if j == 1 { 1.0 } else { 0.0 })
        .collect();
    let numeric = numeric_grad(
        |x| {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - x[1]
        },
        &logits,
        1e-6,
    );
    for ((a, e), n) in g.grad(l).unwrap().iter().zip(&expected).zip(&numeric) {
        assert!((a - e).abs() < 1e-12);
        assert!((a - n).abs() < 1e-6);
    }
}

#[test]
fn backward_examples_and_accumulation() {
    let mut g = Graph::new();
    let x = g.param(&t(&[3], &[1., 2., 3.]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1., 1., 1.]);

    let mut g = Graph::new();
    let x = g.param(&t(&[2], &[1., 2.]));
    let sq = g.square(x);
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2., 4.]);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4., 8.]);
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2., 4.]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.param(&t(&[2], &[1., 2.]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn intermediate_nodes_receive_gradients() {
    let mut g = Graph::new();
    let x = g.param(&t(&[2], &[1., 2.]));
    let y = g.scale(x, 3.0);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(y).unwrap(), &[1., 1.]);
    assert_eq!(g.grad(x).unwrap(), &[3., 3.]);
}

#[test]
fn grad_check_sum_is_exact() {
    let x = t(&[4], &[0.1, -2.0, 3.0, 7.5]);
    let err = grad_check(|g, x| Ok(g.sum(x)), &x, DEFAULT_STEP).unwrap();
    assert!(err < 1e-10);
}

#[test]
fn grad_check_detects_non_determinism() {
    use std::cell::Cell;
    let counter = Cell::new(0.0);
    let x = t(&[2], &[1.0, 2.0]);
    let f = |g: &mut Graph, x: Var| {
        counter.set(counter.get() + 1.0);
        let s = g.sum(x);
        Ok(g.add_scalar(s, counter.get()))
    };
    assert!(matches!(grad_check(f, &x, DEFAULT_STEP), Err(Error::Contract(_))));
}

#[test]
fn grad_check_cross_entropy_of_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(&[4, 4], &mut rng);
    let x = random(&[4, 4], &mut rng);
    let f = |g: &mut Graph, xv: Var| {
        let wv = g.constant(&w);
        let l = g.matmul(xv, wv)?;
        g.cross_entropy(l, &[0, 1, 2, 3])
    };
    assert!(grad_check(f, &x, DEFAULT_STEP).unwrap() < 1e-4);
}

#[test]
fn grad_check_masked_softmax_relaxed_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[3, 5], &mut rng);
    let coeff = random(&[3, 5], &mut rng);
    let w = Tensor::from_fn(&[5], |_| rng.random_range(0.05..0.95));
    let f_w = |g: &mut Graph, wv: Var| {
        let av = g.constant(&a);
        let cv = g.constant(&coeff);
        let y = g.masked_softmax_row(av, wv)?;
        let y = g.mul(y, cv)?;
        Ok(g.sum(y))
    };
    assert!(grad_check(f_w, &w, DEFAULT_STEP).unwrap() < 1e-4);
    let f_a = |g: &mut Graph, av: Var| {
        let wv = g.constant(&w);
        let cv = g.constant(&coeff);
        let y = g.masked_softmax_row(av, wv)?;
        let y = g.mul(y, cv)?;
        Ok(g.sum(y))
    };
    assert!(grad_check(f_a, &a, DEFAULT_STEP).unwrap() < 1e-4);
}

#[test]
fn layout_ops_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2 * 3, 8], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(&x);
    let s = g.split_heads(xv, 2, 3, 4).unwrap();
    assert_eq!(g.shape(s), &[8, 3, 2]);
    let m = g.merge_heads(s, 2, 3, 4).unwrap();
    assert_eq!(g.data(m), x.data());
}

/// Composite exercising every differentiable op at once.
fn composite(g: &mut Graph, x: Var, fixed: &[Tensor]) -> crate::Result<Var> {
    // x: [6, 4] viewed as batch 2, tokens 3, width 4, heads 2
    let w = g.constant(&fixed[0]);
    let bias = g.constant(&fixed[1]);
    let mask = g.constant(&fixed[2]);
    let gain = g.constant(&fixed[3]);
    let h = g.matmul(x, w)?;
    let h = g.add_broadcast(h, bias)?;
    let h = g.layer_norm(h, gain, bias)?;
    let h = g.gelu(h);
    let q = g.split_heads(h, 2, 3, 2)?;
    let scores = g.batch_matmul(q, q, true)?;
    let p = g.masked_softmax_row(scores, mask)?;
    let ctx = g.batch_matmul(p, q, false)?;
    let merged = g.merge_heads(ctx, 2, 3, 2)?;
    let cls = g.gather_rows(merged, &[0, 3])?;
    let tail = g.gather_rows(merged, &[1, 4])?;
    let both = g.concat(&[cls, tail])?;
    let sm = g.softmax_row(both)?;
    let col = g.select_last(sm, 1)?;
    let m = g.mean(col);
    let sq = g.square(m);
    let logits = g.sub(cls, tail)?;
    let ce = g.cross_entropy(logits, &[1, 2])?;
    let r = g.reshape(sq, &[1])?;
    let r = g.sum(r);
    let total = g.add(ce, r)?;
    Ok(g.scale(total, 0.7))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composite_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fixed = vec![
            random(&[4, 4], &mut rng),
            random(&[4], &mut rng),
            Tensor::from_fn(&[3], |_| rng.random_range(0.05..1.0)),
            random(&[4], &mut rng),
        ];
        let x = random(&[6, 4], &mut rng);
        let err = grad_check(|g, x| composite(g, x, &fixed), &x, DEFAULT_STEP).unwrap();
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn masked_softmax_matches_delete_oracle(
        row in prop::collection::vec(-30.0f64..30.0, 1..9),
        bits in prop::collection::vec(any::<bool>(), 9),
    ) {
        let k = row.len();
        let mut mask: Vec<bool> = bits[..k].to_vec();
        mask[0] = true;
        let w: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let mut g = Graph::new();
        let a = g.constant(&t(&[k], &row));
        let wv = g.constant(&t(&[k], &w));
        let y = g.masked_softmax_row(a, wv).unwrap();
        let oracle = delete_and_softmax(&row, &mask);
        let mut sum = 0.0;
        for j in 0..k {
            let v = g.data(y)[j];
            prop_assert!(v >= 0.0);
            prop_assert!((v - oracle[j]).abs() < 1e-12);
            if !mask[j] {
                prop_assert_eq!(v.to_bits(), 0f64.to_bits());
            }
            sum += v;
        }
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_ones_mask_equals_softmax(row in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let k = row.len();
        let mut g = Graph::new();
        let a = g.constant(&t(&[k], &row));
        let w = g.constant(&Tensor::ones(&[k]));
        let masked = g.masked_softmax_row(a, w).unwrap();
        let plain = g.softmax_row(a).unwrap();
        for (x, y) in g.data(masked).iter().zip(g.data(plain)) {
            prop_assert!((x - y).abs() <= 1e-15);
        }
        let sum: f64 = g.data(plain).iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_backward_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fixed = vec![
            random(&[4, 4], &mut rng),
            random(&[4], &mut rng),
            Tensor::from_fn(&[3], |_| rng.random_range(0.05..1.0)),
            random(&[4], &mut rng),
        ];
        let x = random(&[6, 4], &mut rng);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let out = composite(&mut g, xv, &fixed).unwrap();
        g.backward(out).unwrap();
        let first = g.grad(xv).unwrap().to_vec();
        g.zero_grad();
        g.backward(out).unwrap();
        prop_assert_eq!(first, g.grad(xv).unwrap().to_vec());
    }
}
