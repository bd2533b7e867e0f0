use super::*;
use proptest::prelude::*;

fn t1(data: &[f64]) -> Tensor {
    Tensor::vector(data.to_vec())
}

fn pseudo(n: usize, seed: u64) -> Vec<f64> {
    // Small deterministic generator, enough for test inputs.
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

#[test]
fn relu_clips_negatives() {
    let g = Graph::new();
    let x = g.constant(t1(&[-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn identity_matmul_is_noop() {
    let g = Graph::new();
    let a = Tensor::matrix(3, 4, pseudo(12, 3)).unwrap();
    let i3 = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let out = g.matmul(i3, av).unwrap();
    assert_eq!(g.value(out).unwrap(), a);
}

#[test]
fn mean_abs_arithmetic() {
    let g = Graph::new();
    let x = g.constant(t1(&[1.0, -3.0]));
    let m = g.mean(g.abs(x).unwrap()).unwrap();
    assert_eq!(g.item(m).unwrap(), 2.0);
}

#[test]
fn shape_mismatch_names_the_op() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        AdError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("matmul"));
    let c = g.constant(Tensor::zeros(&[4]));
    assert!(matches!(g.add(a, c), Err(AdError::Shape { op: "add", .. })));
}

#[test]
fn foreign_var_rejected() {
    let g1 = Graph::new();
    let g2 = Graph::new();
    let x = g1.scalar(1.0);
    assert_eq!(g2.neg(x).unwrap_err(), AdError::ForeignVar);
}

#[test]
fn square_gradient() {
    let g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let d = g.grad_values(y, &[x]).unwrap();
    assert_eq!(d[0].item(), Some(6.0));
}

#[test]
fn cubic_second_derivative() {
    let g = Graph::new();
    let x = g.param(Tensor::scalar(2.0));
    let x2 = g.mul(x, x).unwrap();
    let x3 = g.mul(x2, x).unwrap();
    let d1 = g.grad(x3, &[x], true).unwrap().vars[0];
    assert_eq!(g.item(d1).unwrap(), 12.0);
    let d2 = g.grad_values(d1, &[x]).unwrap();
    assert_eq!(d2[0].item(), Some(12.0));
}

#[test]
fn non_scalar_loss_is_error() {
    let g = Graph::new();
    let x = g.param(t1(&[1.0, 2.0]));
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.grad(y, &[x], false), Err(AdError::NotScalar { .. })));
}

#[test]
fn disconnected_target_gets_zero_and_flag() {
    let g = Graph::new();
    let x = g.param(t1(&[1.0, 2.0]));
    let unused = g.param(t1(&[5.0, 6.0, 7.0]));
    let y = g.sum(x).unwrap();
    let grads = g.grad(y, &[x, unused], false).unwrap();
    assert_eq!(grads.disconnected, vec![1]);
    assert_eq!(g.value(grads.vars[1]).unwrap(), Tensor::zeros(&[3]));
    assert_eq!(g.value(grads.vars[0]).unwrap().data(), &[1.0, 1.0]);

    let with_graph = g.grad(y, &[unused, x], true).unwrap();
    assert_eq!(with_graph.disconnected, vec![0]);
    assert_eq!(g.value(with_graph.vars[1]).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn detached_value_blocks_gradient() {
    let g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let d = g.detach(x).unwrap();
    let y = g.mul(d, x).unwrap();
    let grads = g.grad_values(y, &[x]).unwrap();
    assert_eq!(grads[0].item(), Some(3.0));
}

#[test]
fn backward_without_create_graph_leaves_tape_clean() {
    let g = Graph::new();
    let x = g.param(t1(&[1.0, -2.0, 3.0]));
    let y = g.sum(g.relu(x).unwrap()).unwrap();
    let before = g.len();
    let grads = g.grad(y, &[x], false).unwrap();
    // Only the detached result constant is appended.
    assert_eq!(g.len(), before + 1);
    assert!(!g.requires_grad(grads.vars[0]).unwrap());
}

/// Two-layer relu MLP with an ℓ1 loss, parameters packed in one flat vector.
fn mlp_l1(g: &Graph, p: Var) -> Result<Var, AdError> {
    let (i, h) = (2, 5);
    let xs = pseudo(14, 7);
    let x = g.constant(Tensor::matrix(7, i, xs)?);
    let target = g.constant(Tensor::matrix(7, 1, pseudo(7, 8))?);
    let w1 = g.slice(p, 0, &[i, h])?;
    let b1 = g.slice(p, i * h, &[h])?;
    let w2 = g.slice(p, i * h + h, &[h, 1])?;
    let b2 = g.slice(p, i * h + 2 * h, &[1])?;
    let a1 = g.relu(g.add(g.matmul(x, w1)?, b1)?)?;
    let out = g.add(g.matmul(a1, w2)?, b2)?;
    g.mean(g.abs(g.sub(out, target)?)?)
}

#[test]
fn mlp_l1_gradient_matches_finite_differences() {
    let params = pseudo(2 * 5 + 5 + 5 + 1, 11);
    let report = check_gradient(mlp_l1, &params, 1e-5).unwrap();
    assert!(report.checked > params.len() / 2, "{report:?}");
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn gradient_check_of_linear_sum_is_exact() {
    let params = pseudo(6, 1);
    let report = check_gradient(|g: &Graph, p| g.sum(p), &params, 1e-5).unwrap();
    assert_eq!(report.kinks.len(), 0);
    assert!(report.max_rel_error < 1e-9, "{report:?}");
}

#[test]
fn gradient_check_flags_relu_kink_at_sample() {
    // relu(x0) has its kink exactly at the sample x0 = 0.
    let params = vec![0.0, 0.7];
    let report = check_gradient(
        |g: &Graph, p| {
            let r = g.relu(p)?;
            g.sum(g.mul(r, r)?).and_then(|s| g.add(s, g.sum(r)?))
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert_eq!(report.kinks, vec![0]);
    assert_eq!(report.checked, 1);
    assert!(report.max_rel_error < 1e-8);
}

#[test]
fn gradient_check_rejects_non_finite_objective() {
    let err = check_gradient(|g: &Graph, p| g.sum(g.log(p)?), &[-1.0], 1e-5).unwrap_err();
    assert!(matches!(err, AdError::NonFinite { .. }));
}

/// Scalar built from every smooth op; used to exercise second-order rules.
fn smooth_mix(g: &Graph, p: Var) -> Result<Var, AdError> {
    let m = g.reshape(p, &[2, 3])?;
    let s = g.sigmoid(m)?;
    let e = g.exp(g.scale(m, 0.3)?)?;
    let l = g.log(g.shift(g.mul(m, m)?, 1.0)?)?;
    let r = g.recip(g.shift(e, 1.0)?)?;
    let row = g.slice(p, 1, &[3])?;
    let prod = g.mul(g.add(s, l)?, row)?;
    let sq = g.matmul_t(prod, r, true, false)?;
    let c = g.concat_cols(&[sq, g.matmul_t(e, g.slice_cols(e, 0, 2)?, true, false)?])?;
    let mean_rows = g.mean_rows(c)?;
    let mx = g.max_rows(g.broadcast_rows(mean_rows, 2)?)?;
    let centred = g.sub(c, g.expand(g.sum(mx)?, &[3, 5])?)?;
    g.mean(g.mul(centred, centred)?)
}

#[test]
fn smooth_ops_first_order_match_finite_differences() {
    let params = pseudo(6, 21);
    let report = check_gradient(smooth_mix, &params, 1e-5).unwrap();
    assert!(report.kinks.is_empty(), "{report:?}");
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn smooth_ops_second_order_match_finite_differences() {
    // f(p) = <c, ∇smooth_mix(p)>: its gradient is a Hessian-vector product.
    let params = pseudo(6, 5);
    let c = pseudo(6, 6);
    let report = check_gradient(
        |g: &Graph, p| {
            let inner = p;
            let y = smooth_mix(g, inner)?;
            let d = g.grad(y, &[inner], true)?.vars[0];
            let cv = g.constant(Tensor::vector(c.clone()));
            let v = g.sum(g.mul(d, cv)?)?;
            Ok(v)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.kinks.is_empty(), "{report:?}");
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn clamp_and_rows_ops_second_order() {
    let params = pseudo(8, 9);
    let report = check_gradient(
        |g: &Graph, p| {
            let inner = p;
            let m = g.reshape(inner, &[4, 2])?;
            let top = g.slice_rows(m, 1, 2)?;
            let cl = g.clamp(top, -0.5, 0.5)?;
            let mixed = g.matmul_t(cl, m, false, true)?;
            let y = g.sum(g.mul(mixed, mixed)?)?;
            let d = g.grad(y, &[inner], true)?.vars[0];
            g.sum(g.mul(d, d)?)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.checked >= 6, "{report:?}");
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn forward_is_bit_reproducible() {
    let params = pseudo(21, 1);
    let run = || {
        let g = Graph::new();
        let p = g.param(Tensor::vector(params.clone()));
        let l = mlp_l1(&g, p).unwrap();
        (g.item(l).unwrap(), g.grad_values(l, &[p]).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}

proptest! {
    #[test]
    fn gradient_is_linear_in_the_loss(
        xs in prop::collection::vec(-2.0f64..2.0, 6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let g = Graph::new();
        let x = g.param(Tensor::vector(xs.clone()));
        let m = g.reshape(x, &[2, 3]).unwrap();
        let l1 = g.mean(g.mul(g.sigmoid(m).unwrap(), m).unwrap()).unwrap();
        let l2 = g.sum(g.abs(g.matmul_t(m, m, false, true).unwrap()).unwrap()).unwrap();
        let combo = g.add(g.scale(l1, a).unwrap(), g.scale(l2, b).unwrap()).unwrap();
        let gc = g.grad_values(combo, &[x]).unwrap().remove(0);
        let g1 = g.grad_values(l1, &[x]).unwrap().remove(0);
        let g2 = g.grad_values(l2, &[x]).unwrap().remove(0);
        for i in 0..6 {
            let want = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((gc.data()[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}


#[test]
fn gradients_with_respect_to_views() {
    let g = Graph::new();
    let flat = g.param(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
    let a = g.slice(flat, 0, &[2]).unwrap();
    let b = g.slice(flat, 2, &[2]).unwrap();
    let l = g.sum(g.mul(a, b).unwrap()).unwrap();
    let grads = g.grad_values(l, &[a, b]).unwrap();
    assert_eq!(grads[0].data(), &[3.0, 4.0]);
    assert_eq!(grads[1].data(), &[1.0, 2.0]);
}
