use super::*;
use crate::autodiff::check_gradient;
use crate::optim::AdamConfig;
use crate::sdfdata::{make_task, ContextMode, SdfGrid};

fn small_config(k: usize) -> MetaConfig {
    MetaConfig {
        net: MlpConfig::new(2, 5, 3, 1),
        k,
        alpha_init: 0.05,
        batch_tasks: 2,
        ..MetaConfig::planar()
    }
}

fn blob_grid(shift: f64) -> SdfGrid {
    SdfGrid::from_fn(vec![24, 24], |p| ((p[0] - shift).powi(2) + p[1].powi(2)).sqrt() - 0.45).unwrap()
}

fn task(seed: u64) -> Task {
    make_task("t", &blob_grid(0.1 * seed as f64), ContextMode::Dense, 20, 20, seed).unwrap()
}

#[test]
fn zero_steps_and_zero_rates_leave_theta() {
    let model = MetaModel::new(small_config(3), 1).unwrap();
    let t = task(0);
    let a = inner_adapt_steps(&model, &t.context, 0).unwrap();
    assert_eq!(a.params, model.theta);
    assert_eq!(a.trajectory.len(), 1);

    let mut frozen = model.clone();
    for a in &mut frozen.alpha {
        a.data_mut().fill(0.0);
    }
    let a = inner_adapt(&frozen, &t.context).unwrap();
    assert_eq!(a.params, frozen.theta);
    assert_eq!(a.trajectory.len(), 4);
    assert_eq!(a.context_losses.len(), 4);
    assert!(a.context_losses.iter().all(|&l| l == a.context_losses[0]));
}

#[test]
fn single_step_matches_closed_form() {
    // With unit first layer and x > 0 the net is f(x) = w·x.
    let mut cfg = small_config(1);
    cfg.net = MlpConfig::new(1, 1, 2, 1);
    let mut model = MetaModel::new(cfg, 0).unwrap();
    let (w, x, s, alpha) = (0.7, 0.4, 0.5, 0.3);
    model.theta.data_mut().copy_from_slice(&[1.0, 0.0, w, 0.0]);
    model.alpha[0].data_mut().copy_from_slice(&[0.0, 0.0, alpha, 0.0]);
    let ctx = SampleSet::new(1, vec![x], vec![s]).unwrap();
    let a = inner_adapt(&model, &ctx).unwrap();
    let expected = w - alpha * (w * x - s).signum() * x;
    assert!((a.params.data()[2] - expected).abs() < 1e-15);
    assert_eq!(&a.params.data()[..2], &[1.0, 0.0]);
    assert_eq!(a.params.data()[3], 0.0);
}

fn fd_check(config: MetaConfig, seed: u64) -> crate::autodiff::GradCheck {
    let model = MetaModel::new(config, seed).unwrap();
    let mut model = model;
    for (i, v) in model.alpha.iter_mut().flat_map(|a| a.data_mut().iter_mut()).enumerate() {
        *v = 0.02 + 0.01 * ((i * 7) % 5) as f64;
    }
    let t = task(seed);
    let flat = model.to_flat();
    let check = check_gradient(
        |g, p| {
            let vars = MetaVars::split(g, &config, p).map_err(|_| crate::autodiff::AdError::InvalidArgument("split"))?;
            outer_objective(g, &config, &vars, &t)
                .map(|t| t.total)
                .map_err(|_| crate::autodiff::AdError::InvalidArgument("objective"))
        },
        &flat,
        1e-5,
    )
    .unwrap();
    let direct = meta_gradient(&model, &t).unwrap();
    for (a, b) in direct.grad.iter().zip(&check.analytic) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    check
}

#[test]
fn meta_gradient_matches_finite_differences() {
    for k in [1, 2] {
        let cfg = small_config(k);
        assert!(cfg.net.param_count() <= 64);
        let c = fd_check(cfg, k as u64);
        assert!(c.max_rel_error <= 1e-4, "k={k}: {} at {:?}", c.max_rel_error, c.worst_index);
        assert!(c.checked > c.analytic.len() / 2);
        let n = cfg.net.param_count();
        assert!(c.analytic[n..2 * n].iter().any(|v| v.abs() > 1e-8), "alpha gradient vanished");
    }
    let mut per_step = small_config(2);
    per_step.per_step_alpha = true;
    let c = fd_check(per_step, 5);
    assert!(c.max_rel_error <= 1e-4);
}

#[test]
fn composite_meta_gradient_matches_finite_differences() {
    let mut cfg = small_config(2);
    cfg.net.out_dim = 2;
    cfg.inner_loss = LossKind::Composite;
    cfg.outer_loss = LossKind::Composite;
    let c = fd_check(cfg, 3);
    assert!(c.max_rel_error <= 1e-4, "{}", c.max_rel_error);
    let n = c.analytic.len();
    assert!(c.analytic[n - 2].abs() > 0.0 && c.analytic[n - 1].abs() > 0.0);
}

#[test]
fn first_order_keeps_forward_changes_gradient() {
    let cfg = small_config(2);
    let model = MetaModel::new(cfg, 4).unwrap();
    let mut fo = model.clone();
    fo.config.first_order = true;
    let t = task(2);
    let a = meta_gradient(&model, &t).unwrap();
    let b = meta_gradient(&fo, &t).unwrap();
    assert_eq!(a.total, b.total);
    let n = model.theta.len();
    assert_ne!(a.grad[..n], b.grad[..n]);
}

#[test]
fn outer_step_is_deterministic_and_moves_parameters() {
    let tasks: Vec<Task> = (0..4).map(task).collect();
    let run = || {
        let mut m = MetaModel::new(small_config(2), 9).unwrap();
        let mut opt = Adam::new(AdamConfig::new(1e-2), m.flat_len());
        let losses: Vec<f64> = (0..5).map(|_| outer_step(&mut m, &mut opt, &tasks).unwrap().loss).collect();
        (m, losses)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(m1, m2);
    assert_ne!(m1.theta, MetaModel::new(small_config(2), 9).unwrap().theta);
    assert!(l1[4] < l1[0]);
    let mut opt = Adam::new(AdamConfig::new(1e-2), 3);
    assert!(outer_step(&mut m1.clone(), &mut opt, &tasks).is_err());
    assert!(outer_step(&mut m1.clone(), &mut Adam::new(AdamConfig::new(1e-2), m1.flat_len()), &[]).is_err());
}

#[test]
fn non_finite_losses_skip_the_step() {
    let mut m = MetaModel::new(small_config(2), 0).unwrap();
    m.alpha[0].data_mut().fill(1e200);
    let before = m.clone();
    let mut opt = Adam::new(AdamConfig::new(1e-2), m.flat_len());
    let r = outer_step(&mut m, &mut opt, &[task(0)]).unwrap();
    assert!(r.skipped.is_some());
    assert_eq!(m, before);
    assert!(matches!(inner_adapt(&m, &task(0).context), Err(Error::NonFinite { .. })));
}

#[test]
fn specialization_is_deterministic_and_order_invariant() {
    let model = MetaModel::new(small_config(3), 2).unwrap();
    let t = task(1);
    let a = specialize(&model, &t.context).unwrap();
    assert_eq!(a.params, specialize(&model, &t.context).unwrap().params);
    assert_eq!(a.steps, 3);
    assert_eq!(a.params, inner_adapt(&model, &t.context).unwrap().params);
    let rev: Vec<usize> = (0..t.context.len()).rev().collect();
    let b = specialize(&model, &t.context.select(&rev)).unwrap();
    let diff = a
        .params
        .data()
        .iter()
        .zip(b.params.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-10, "{diff}");
    assert!(specialize(&model, &SampleSet::new(2, vec![], vec![]).unwrap()).is_err());
    assert!(specialize(&model, &SampleSet::new(3, vec![0.0; 3], vec![0.0]).unwrap()).is_err());
}

#[test]
fn config_and_checkpoint_validation() {
    let mut bad = small_config(2);
    bad.inner_loss = LossKind::Composite;
    assert!(MetaModel::new(bad, 0).is_err());
    assert!(MetaModel::new(small_config(0), 0).is_err());
    let mut lr = small_config(1);
    lr.beta = 0.0;
    assert!(lr.validate().is_err());
    MetaConfig::volumetric().validate().unwrap();

    let mut cfg = small_config(3);
    cfg.per_step_alpha = true;
    let mut m = MetaModel::new(cfg, 3).unwrap();
    m.log_vars.log_var_sign = -0.25;
    assert_eq!(m.alpha.len(), 3);
    let c = m.to_checkpoint(serde_json::json!({ "note": "x" }));
    let back = MetaModel::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes(), "m".as_ref()).unwrap()).unwrap();
    assert_eq!(back, m);
    let mut flat = m.to_flat();
    flat[0] += 1.0;
    m.set_flat(&flat).unwrap();
    assert_eq!(m.to_flat(), flat);
    assert!(m.set_flat(&flat[1..]).is_err());
    assert!(inner_adapt_steps(&m, &task(0).context, 4).is_err());
}
