//! Reconstruction losses.
//!
//! Predictions are `[n, 1]` distance columns, or `[n, 2]` for two-headed nets
//! whose second column is a sign logit. Targets are `[n, 1]` signed distances,
//! negative inside.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_CLAMP: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    L1,
    /// ℓ1 after clamping both sides to `±DEFAULT_CLAMP`.
    ClampedL1,
    /// Distance ℓ1 plus sign cross-entropy with learned log-variance weights.
    Composite,
}

impl LossKind {
    /// Output width the network needs for this loss.
    pub fn out_dim(self) -> usize {
        match self {
            LossKind::Composite => 2,
            _ => 1,
        }
    }
}

/// Learned log-variances of the two composite terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompositeLossState {
    pub log_var_sdf: f64,
    pub log_var_sign: f64,
}

/// Scalar loss together with its unweighted parts for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l1: Var,
    /// Present for the composite loss only.
    pub bce: Option<Var>,
}

fn same_shape(g: &Graph, pred: Var, target: Var) -> Result<usize> {
    let (ps, ts) = (g.shape(pred)?, g.shape(target)?);
    if ps != ts {
        return Err(Error::Mismatch {
            what: "prediction/target length",
            expected: ts.iter().product(),
            got: ps.iter().product(),
        });
    }
    let n = ps.iter().product();
    if n == 0 {
        return Err(Error::Empty("loss batch"));
    }
    Ok(n)
}

pub fn l1_loss(g: &Graph, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target)?;
    Ok(g.mean(g.abs(g.sub(pred, target)?)?)?)
}

pub fn clamped_l1(g: &Graph, pred: Var, target: Var, delta: f64) -> Result<Var> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("clamp delta must be positive, got {delta}")));
    }
    same_shape(g, pred, target)?;
    let p = g.clamp(pred, -delta, delta)?;
    let t = g.clamp(target, -delta, delta)?;
    Ok(g.mean(g.abs(g.sub(p, t)?)?)?)
}

/// 1 for outside (`s > 0`), 0 otherwise; points on the surface count as outside.
pub fn sign_label(s: f64) -> f64 {
    if s >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `labels`.
///
/// Uses `relu(l) − l·y + log(1 + exp(−|l|))`, which never overflows.
pub fn bce_with_logits(g: &Graph, logits: Var, labels: Var) -> Result<Var> {
    same_shape(g, logits, labels)?;
    let soft = g.log(g.shift(g.exp(g.neg(g.abs(logits)?)?)?, 1.0)?)?;
    let per = g.add(g.sub(g.relu(logits)?, g.mul(logits, labels)?)?, soft)?;
    Ok(g.mean(per)?)
}

/// `exp(−a)·ℓ1 + a + exp(−b)·BCE + b` for `[n, 2]` predictions.
///
/// `a` and `b` are scalar vars so they can be trained with the network.
pub fn composite_loss(g: &Graph, pred: Var, target: Var, a: Var, b: Var) -> Result<LossTerms> {
    let ps = g.shape(pred)?;
    if ps.len() != 2 || ps[1] != 2 {
        return Err(Error::Mismatch {
            what: "composite prediction width",
            expected: 2,
            got: ps.get(1).copied().unwrap_or(0),
        });
    }
    let dist = g.slice_cols(pred, 0, 1)?;
    let logit = g.slice_cols(pred, 1, 1)?;
    let labels = {
        let t = g.value(target)?;
        let data = t.data().iter().map(|&s| sign_label(s)).collect();
        g.constant(Tensor::new(t.shape().to_vec(), data)?)
    };
    let l1 = l1_loss(g, dist, target)?;
    let bce = bce_with_logits(g, logit, labels)?;
    let wl1 = g.add(g.mul(g.exp(g.neg(a)?)?, l1)?, a)?;
    let wbce = g.add(g.mul(g.exp(g.neg(b)?)?, bce)?, b)?;
    Ok(LossTerms {
        total: g.add(wl1, wbce)?,
        l1,
        bce: Some(bce),
    })
}

/// Dispatch on `kind`; `weights` must be given for the composite loss.
pub fn loss(
    g: &Graph,
    kind: LossKind,
    pred: Var,
    target: Var,
    weights: Option<(Var, Var)>,
) -> Result<LossTerms> {
    match kind {
        LossKind::L1 => {
            let l = l1_loss(g, pred, target)?;
            Ok(LossTerms {
                total: l,
                l1: l,
                bce: None,
            })
        }
        LossKind::ClampedL1 => {
            let l = clamped_l1(g, pred, target, DEFAULT_CLAMP)?;
            Ok(LossTerms {
                total: l,
                l1: l,
                bce: None,
            })
        }
        LossKind::Composite => {
            let (a, b) = weights
                .ok_or_else(|| Error::Config("composite loss needs log-variance weights".into()))?;
            composite_loss(g, pred, target, a, b)
        }
    }
}

/// Signed distance from a two-headed prediction: `|distance|` with the predicted sign.
pub fn combine_outputs(distance: f64, sign_logit: f64) -> f64 {
    // sigmoid(l) ≥ 0.5 exactly when l ≥ 0.
    if sign_logit >= 0.0 {
        distance.abs()
    } else {
        -distance.abs()
    }
}

/// Signed distances from raw network outputs `[n, 1]` or two-headed `[n, 2]`.
pub fn predicted_sdf(out: &Tensor) -> Result<Vec<f64>> {
    match out.dims2() {
        Some((_, 1)) => Ok(out.data().to_vec()),
        Some((_, 2)) => Ok(out
            .data()
            .chunks_exact(2)
            .map(|r| combine_outputs(r[0], r[1]))
            .collect()),
        _ => Err(Error::Mismatch {
            what: "network output width",
            expected: 1,
            got: out.shape().get(1).copied().unwrap_or(0),
        }),
    }
}

/// Mean absolute difference between predicted and true signed distances.
pub fn mean_abs_error(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Mismatch {
            what: "prediction/target length",
            expected: target.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("error batch"));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradient, sigmoid, Tensor};
    use proptest::prelude::*;

    fn col(g: &Graph, v: &[f64]) -> Var {
        g.constant(Tensor::matrix(v.len(), 1, v.to_vec()).unwrap())
    }

    fn two_col(g: &Graph, d: &[f64], l: &[f64]) -> Var {
        let data = d.iter().zip(l).flat_map(|(&a, &b)| [a, b]).collect();
        g.constant(Tensor::matrix(d.len(), 2, data).unwrap())
    }

    fn bce_ref(logits: &[f64], targets: &[f64]) -> f64 {
        logits
            .iter()
            .zip(targets)
            .map(|(&l, &s)| {
                let p = sigmoid(l);
                let y = sign_label(s);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / logits.len() as f64
    }

    #[test]
    fn l1_basics() {
        let g = Graph::new();
        let p = col(&g, &[0.3, -0.2]);
        assert_eq!(g.item(l1_loss(&g, p, p).unwrap()).unwrap(), 0.0);
        let l = l1_loss(&g, col(&g, &[1.0, -1.0]), col(&g, &[0.0, 0.0])).unwrap();
        assert_eq!(g.item(l).unwrap(), 1.0);
        assert!(matches!(l1_loss(&g, col(&g, &[]), col(&g, &[])), Err(Error::Empty(_))));
        assert!(l1_loss(&g, col(&g, &[1.0]), col(&g, &[1.0, 2.0])).is_err());
    }

    #[test]
    fn clamp_saturates_and_passes_through() {
        let g = Graph::new();
        let sat = clamped_l1(&g, col(&g, &[0.5, -0.4]), col(&g, &[0.3, -0.9]), 0.1).unwrap();
        assert_eq!(g.item(sat).unwrap(), 0.0);
        let (p, t) = (col(&g, &[0.05, -0.02]), col(&g, &[-0.01, 0.08]));
        let inner = g.item(clamped_l1(&g, p, t, 0.1).unwrap()).unwrap();
        assert_eq!(inner, g.item(l1_loss(&g, p, t).unwrap()).unwrap());
        assert!(clamped_l1(&g, p, t, 0.0).is_err());
    }

    #[test]
    fn composite_with_zero_weights_is_plain_sum() {
        let g = Graph::new();
        let d = [0.1, -0.3, 0.02];
        let l = [2.0, -1.0, 0.5];
        let s = [0.15, -0.2, -0.01];
        let (a, b) = (g.scalar(0.0), g.scalar(0.0));
        let terms = composite_loss(&g, two_col(&g, &d, &l), col(&g, &s), a, b).unwrap();
        let l1 = d.iter().zip(&s).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0;
        let want = l1 + bce_ref(&l, &s);
        assert!((g.item(terms.total).unwrap() - want).abs() < 1e-14);
        assert!((g.item(terms.bce.unwrap()).unwrap() - bce_ref(&l, &s)).abs() < 1e-14);
    }

    #[test]
    fn composite_at_optimum_is_weight_offsets() {
        let g = Graph::new();
        let s = [0.2, -0.1];
        let logits = [60.0, -60.0];
        let (a, b) = (g.scalar(-0.4), g.scalar(0.7));
        let terms = composite_loss(&g, two_col(&g, &s, &logits), col(&g, &s), a, b).unwrap();
        let total = g.item(terms.total).unwrap();
        assert!((total - 0.3).abs() < 1e-12, "{total}");
    }

    #[test]
    fn composite_gradient_in_weights() {
        let d = [0.1, -0.3, 0.02, 0.4];
        let l = [2.0, -1.0, 0.5, -0.2];
        let s = [0.15, -0.2, -0.01, 0.3];
        let report = check_gradient(
            |g: &Graph, p| {
                let a = g.slice(p, 0, &[1])?;
                let b = g.slice(p, 1, &[1])?;
                let pred = g.reshape(g.slice(p, 2, &[8])?, &[4, 2])?;
                let t = col(g, &s);
                Ok(composite_loss(g, pred, t, a, b).expect("loss").total)
            },
            &[0.3, -0.6, d[0], l[0], d[1], l[1], d[2], l[2], d[3], l[3]],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.kinks, Vec::<usize>::new());
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let g = Graph::new();
        let v = bce_with_logits(&g, col(&g, &[800.0, -800.0]), col(&g, &[0.0, 1.0])).unwrap();
        assert!((g.item(v).unwrap() - 800.0).abs() < 1e-9);
    }

    #[test]
    fn combine_rules() {
        assert_eq!(combine_outputs(-0.3, 5.0), 0.3);
        assert_eq!(combine_outputs(0.2, -5.0), -0.2);
        assert_eq!(combine_outputs(0.0, 3.0), 0.0);
        assert_eq!(combine_outputs(0.0, -3.0), 0.0);
        assert_eq!(sign_label(0.0), 1.0);
    }

    proptest! {
        #[test]
        fn l1_matches_direct_formula(v in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..40)) {
            let g = Graph::new();
            let p: Vec<f64> = v.iter().map(|x| x.0).collect();
            let t: Vec<f64> = v.iter().map(|x| x.1).collect();
            let got = g.item(l1_loss(&g, col(&g, &p), col(&g, &t)).unwrap()).unwrap();
            let want = v.iter().map(|(a, b)| (a - b).abs()).sum::<f64>() / v.len() as f64;
            prop_assert!((got - want).abs() <= 1e-14);
        }

        #[test]
        fn clamped_matches_direct_formula_and_bounds_l1(
            v in prop::collection::vec((-0.5f64..0.5, -0.5f64..0.5), 1..40),
            delta in 0.01f64..0.3,
        ) {
            let g = Graph::new();
            let p: Vec<f64> = v.iter().map(|x| x.0).collect();
            let t: Vec<f64> = v.iter().map(|x| x.1).collect();
            let got = g.item(clamped_l1(&g, col(&g, &p), col(&g, &t), delta).unwrap()).unwrap();
            let c = |x: f64| x.clamp(-delta, delta);
            let per: Vec<f64> = v.iter().map(|&(a, b)| (c(a) - c(b)).abs()).collect();
            for (k, &(a, b)) in v.iter().enumerate() {
                prop_assert!(per[k] <= (a - b).abs() + 1e-15);
            }
            let want = per.iter().sum::<f64>() / v.len() as f64;
            prop_assert!((got - want).abs() <= 1e-14);
        }

        #[test]
        fn scaling_distances_scales_only_the_l1_term(c in 0.1f64..10.0, seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let l: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = Graph::new();
            let (a, b) = (g.scalar(0.2), g.scalar(-0.1));
            let base = composite_loss(&g, two_col(&g, &d, &l), col(&g, &s), a, b).unwrap();
            let ds: Vec<f64> = d.iter().map(|x| x * c).collect();
            let ss: Vec<f64> = s.iter().map(|x| x * c).collect();
            let scaled = composite_loss(&g, two_col(&g, &ds, &l), col(&g, &ss), a, b).unwrap();
            let (l0, l1) = (g.item(base.l1).unwrap(), g.item(scaled.l1).unwrap());
            prop_assert!((l1 - c * l0).abs() <= 1e-12 * (1.0 + l1.abs()));
            let (b0, b1) = (g.item(base.bce.unwrap()).unwrap(), g.item(scaled.bce.unwrap()).unwrap());
            prop_assert_eq!(b0, b1);
        }
    }
}
