use super::*;
use crate::autodiff::check_gradient;
use proptest::prelude::*;
use rand::Rng;

fn random_points(n: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(n, dim, data).unwrap()
}

fn random_vec(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Concat forward built from a literal `[h, z]` concatenation.
fn concat_literal(config: &ConcatConfig, params: &ParameterVector, z: &[f64], x: &Tensor) -> Tensor {
    let g = Graph::new();
    let vars = params.to_graph(&g, false);
    let n = x.shape()[0];
    let zs: Vec<f64> = (0..n).flat_map(|_| z.iter().copied()).collect();
    let zmat = g.constant(Tensor::matrix(n, z.len(), zs).unwrap());
    let mut h = g.constant(x.clone());
    let layers = config.net.num_layers;
    for l in 0..layers {
        if config.injected(l) {
            h = g.concat_cols(&[h, zmat]).unwrap();
        }
        h = g.add(g.matmul(h, vars[2 * l]).unwrap(), vars[2 * l + 1]).unwrap();
        if l + 1 < layers {
            h = g.relu(h).unwrap();
        }
    }
    g.value(h).unwrap()
}

fn concat_eval(config: &ConcatConfig, params: &ParameterVector, z: &[f64], x: &Tensor) -> Tensor {
    let g = Graph::new();
    let vars = params.to_graph(&g, false);
    let zv = g.constant(Tensor::vector(z.to_vec()));
    let xv = g.constant(x.clone());
    let out = concat_forward(&g, config, &vars, zv, xv).unwrap();
    g.value(out).unwrap()
}

fn hyper_eval(config: &HyperConfig, hparams: &ParameterVector, z: &[f64], x: &Tensor) -> Tensor {
    let g = Graph::new();
    let hv = hparams.to_graph(&g, false);
    let zv = g.constant(Tensor::vector(z.to_vec()));
    let phi = hypernet_forward(&g, config, &hv, zv).unwrap();
    let xv = g.constant(x.clone());
    let out = mlp_forward(&g, &config.target, &phi, xv).unwrap();
    g.value(out).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn init_is_deterministic_with_zero_biases() {
    let cfg = MlpConfig::new(2, 256, 4, 1);
    let a = init_mlp(&cfg, 0).unwrap();
    let b = init_mlp(&cfg, 0).unwrap();
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), init_mlp(&cfg, 1).unwrap().data());
    for l in 0..4 {
        assert!(a.segment(&format!("b{l}")).unwrap().iter().all(|&v| v == 0.0));
    }
    assert_eq!(a.len(), cfg.param_count());
}

#[test]
fn weight_variance_matches_kaiming() {
    let cfg = MlpConfig::new(2, 256, 4, 1);
    let p = init_mlp(&cfg, 3).unwrap();
    let w = p.segment("w1").unwrap();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
    let want = 2.0 / 256.0;
    assert!((var / want - 1.0).abs() < 0.2, "variance {var} vs {want}");
    let bound = (6.0f64 / 256.0).sqrt();
    assert!(w.iter().all(|v| v.abs() <= bound));
}

#[test]
fn invalid_configs_rejected() {
    assert!(init_mlp(&MlpConfig::new(2, 8, 1, 1), 0).is_err());
    assert!(init_mlp(&MlpConfig::new(0, 8, 3, 1), 0).is_err());
}

#[test]
fn zero_weights_give_constant_last_bias() {
    let cfg = MlpConfig::new(2, 6, 3, 2);
    let mut p = ParameterVector::zeros(cfg.layout());
    p.segment_mut("b2").unwrap().copy_from_slice(&[0.25, -1.5]);
    let out = mlp_eval(&cfg, &p, &random_points(5, 2, 1)).unwrap();
    for r in 0..5 {
        assert_eq!(&out.data()[2 * r..2 * r + 2], &[0.25, -1.5]);
    }
}

#[test]
fn batch_matches_single_points() {
    let cfg = MlpConfig::new(2, 16, 4, 1);
    let p = init_mlp(&cfg, 4).unwrap();
    let x = random_points(9, 2, 5);
    let batch = mlp_eval(&cfg, &p, &x).unwrap();
    for r in 0..9 {
        let one = Tensor::matrix(1, 2, x.data()[2 * r..2 * r + 2].to_vec()).unwrap();
        let single = mlp_eval(&cfg, &p, &one).unwrap();
        assert!((single.data()[0] - batch.data()[r]).abs() < 1e-14);
    }
}

#[test]
fn coordinate_dimension_checked() {
    let cfg = MlpConfig::new(3, 4, 2, 1);
    let p = init_mlp(&cfg, 0).unwrap();
    let err = mlp_eval(&cfg, &p, &random_points(2, 2, 0)).unwrap_err();
    assert!(matches!(err, Error::Mismatch { expected: 3, got: 2, .. }));
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let cfg = MlpConfig::new(2, 5, 3, 1);
    let p0 = init_mlp(&cfg, 8).unwrap();
    let layout = cfg.layout();
    // Shift biases off zero so that no unit sits exactly on its kink.
    let mut start = p0.data().to_vec();
    for (i, v) in start.iter_mut().enumerate() {
        *v += 0.01 * ((i * 7 % 11) as f64 - 5.0);
    }
    let x = random_points(6, 2, 9);
    let report = check_gradient(
        |g: &Graph, flat| {
            let vars = split_flat(g, flat, &layout).expect("split");
            let xv = g.constant(x.clone());
            let out = mlp_forward(g, &cfg, &vars, xv).expect("forward");
            g.sum(g.mul(out, out)?)
        },
        &start,
        1e-5,
    )
    .unwrap();
    assert!(report.checked > start.len() / 2);
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn concat_with_zero_code_and_cross_weights_is_plain_mlp() {
    let net = MlpConfig::new(2, 8, 4, 1);
    let cc = ConcatConfig { net, latent_dim: 3 };
    let mut cp = init_concat(&cc, 1).unwrap();
    let plain = init_mlp(&net, 2).unwrap();
    for (l, &(fan_in, fan_out)) in net.layer_dims().iter().enumerate() {
        let w = cp.segment_mut(&format!("w{l}")).unwrap();
        let src = plain.segment(&format!("w{l}")).unwrap();
        w[..fan_in * fan_out].copy_from_slice(src);
        for v in &mut w[fan_in * fan_out..] {
            *v = 0.0;
        }
    }
    let x = random_points(7, 2, 3);
    let got = concat_eval(&cc, &cp, &[0.0; 3], &x);
    let want = mlp_eval(&net, &plain, &x).unwrap();
    assert_eq!(got, want);
}

#[test]
fn concat_split_form_matches_literal_concatenation() {
    let cc = ConcatConfig {
        net: MlpConfig::new(2, 12, 4, 1),
        latent_dim: 5,
    };
    let p = init_concat(&cc, 6).unwrap();
    let x = random_points(20, 2, 7);
    for s in 0..5 {
        let z = random_vec(5, 1.0, 100 + s);
        let d = max_abs_diff(&concat_eval(&cc, &p, &z, &x), &concat_literal(&cc, &p, &z, &x));
        assert!(d < 1e-13, "{d}");
    }
}

#[test]
fn distinct_codes_give_distinct_outputs() {
    let cc = ConcatConfig {
        net: MlpConfig::new(2, 16, 4, 1),
        latent_dim: 4,
    };
    let p = init_concat(&cc, 2).unwrap();
    let x = random_points(10, 2, 1);
    let a = concat_eval(&cc, &p, &random_vec(4, 1.0, 1), &x);
    let b = concat_eval(&cc, &p, &random_vec(4, 1.0, 2), &x);
    assert!(max_abs_diff(&a, &b) > 1e-6);
}

#[test]
fn latent_dimension_checked() {
    let cc = ConcatConfig {
        net: MlpConfig::new(2, 4, 3, 1),
        latent_dim: 4,
    };
    let p = init_concat(&cc, 0).unwrap();
    let g = Graph::new();
    let vars = p.to_graph(&g, false);
    let z = g.constant(Tensor::vector(vec![0.0; 3]));
    let x = g.constant(random_points(2, 2, 0));
    let err = concat_forward(&g, &cc, &vars, z, x).unwrap_err();
    assert!(matches!(err, Error::Mismatch { what: "latent dimension", .. }));
}

#[test]
fn bias_only_hypernet_reproduces_concat() {
    let cc = ConcatConfig {
        net: MlpConfig::new(2, 16, 4, 1),
        latent_dim: 6,
    };
    let p = init_concat(&cc, 11).unwrap();
    let (hc, hp) = build_bias_only_hypernet(&cc, &p).unwrap();
    // Only bias columns of the head may depend on the code.
    let target = cc.net.layout();
    let w = hp.segment("w0").unwrap();
    for s in target.segments().iter().filter(|s| s.shape.len() == 2) {
        for k in 0..cc.latent_dim {
            assert!(w[k * target.len() + s.offset..][..s.len()].iter().all(|&v| v == 0.0));
        }
    }
    let mut worst = 0.0f64;
    for t in 0..100 {
        let z = random_vec(6, 1.0, 1000 + t);
        let x = random_points(1, 2, 2000 + t);
        let a = concat_eval(&cc, &p, &z, &x);
        let b = hyper_eval(&hc, &hp, &z, &x);
        worst = worst.max(max_abs_diff(&a, &b));
    }
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn constant_head_ignores_code() {
    let target = MlpConfig::new(2, 8, 3, 1);
    let hc = HyperConfig::new(target, 4, 10);
    let mut hp = init_hypernet(&hc, 5).unwrap();
    for v in hp.segment_mut("w2").unwrap() {
        *v = 0.0;
    }
    let phi0 = init_mlp(&target, 99).unwrap();
    hp.segment_mut("b2").unwrap().copy_from_slice(phi0.data());
    let x = random_points(6, 2, 4);
    let want = mlp_eval(&target, &phi0, &x).unwrap();
    for s in 0..3 {
        assert_eq!(hyper_eval(&hc, &hp, &random_vec(4, 2.0, s), &x), want);
    }
}

#[test]
fn hypernet_head_starts_small() {
    let target = MlpConfig::new(2, 8, 3, 1);
    let hc = HyperConfig::new(target, 4, 10);
    let hp = init_hypernet(&hc, 0).unwrap();
    let bound = (6.0f64 / 10.0).sqrt() * HYPER_HEAD_SCALE;
    assert!(hp.segment("w2").unwrap().iter().all(|v| v.abs() <= bound));
    let b = hp.segment("b2").unwrap();
    let layout = target.layout();
    let wb = layout.get("b0").unwrap().range();
    assert!(b[wb].iter().all(|&v| v == 0.0));
}

#[test]
fn hypernet_gradient_wrt_code_matches_finite_differences() {
    let target = MlpConfig::new(2, 6, 3, 1);
    let hc = HyperConfig::new(target, 3, 7);
    let mut hp = init_hypernet(&hc, 3).unwrap();
    for v in hp.segment_mut("w2").unwrap() {
        *v *= 50.0;
    }
    let x = random_points(5, 2, 6);
    let z0 = random_vec(3, 0.8, 4);
    let report = check_gradient(
        |g: &Graph, z| {
            let hv = hp.to_graph(g, false);
            let phi = hypernet_forward(g, &hc, &hv, z).expect("hypernet");
            let xv = g.constant(x.clone());
            let out = mlp_forward(g, &target, &phi, xv).expect("forward");
            g.mean(g.mul(out, out)?)
        },
        &z0,
        1e-5,
    )
    .unwrap();
    assert_eq!(report.checked, 3, "{report:?}");
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

fn encode(cfg: &EncoderConfig, p: &ParameterVector, ctx: &Tensor) -> Vec<f64> {
    let g = Graph::new();
    let vars = p.to_graph(&g, false);
    let c = g.constant(ctx.clone());
    let z = set_encode(&g, cfg, &vars, c).unwrap();
    g.value(z).unwrap().into_data()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let cols = t.shape()[1];
    let data = perm
        .iter()
        .flat_map(|&r| t.data()[r * cols..(r + 1) * cols].to_vec())
        .collect();
    Tensor::matrix(perm.len(), cols, data).unwrap()
}

#[test]
fn set_encoder_single_point_is_its_feature() {
    for pooling in [Pooling::Mean, Pooling::Max] {
        let cfg = EncoderConfig::new(2, 12, 5, pooling);
        let p = init_encoder(&cfg, 1).unwrap();
        let ctx = random_points(1, 3, 2);
        let feature = mlp_eval(&cfg.point_net(), &p, &ctx).unwrap();
        assert_eq!(encode(&cfg, &p, &ctx), feature.into_data());
    }
}

#[test]
fn set_encoder_mean_ignores_duplication() {
    let cfg = EncoderConfig::new(2, 12, 5, Pooling::Mean);
    let p = init_encoder(&cfg, 1).unwrap();
    let ctx = random_points(8, 3, 3);
    let doubled: Vec<usize> = (0..8).chain(0..8).collect();
    let a = encode(&cfg, &p, &ctx);
    let b = encode(&cfg, &p, &permute_rows(&ctx, &doubled));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn set_encoder_rejects_empty_context() {
    let cfg = EncoderConfig::new(2, 4, 3, Pooling::Mean);
    let p = init_encoder(&cfg, 0).unwrap();
    let g = Graph::new();
    let vars = p.to_graph(&g, false);
    let c = g.constant(Tensor::zeros(&[0, 3]));
    assert!(matches!(set_encode(&g, &cfg, &vars, c), Err(Error::Empty(_))));
}

#[test]
fn layout_rejects_gaps() {
    let ok = Layout::from_shapes([("a", vec![2, 3]), ("b", vec![4])]);
    assert_eq!(ok.len(), 10);
    assert!(Layout::new(ok.segments().to_vec()).is_ok());
    let mut bad = ok.segments().to_vec();
    bad[1].offset = 7;
    assert!(Layout::new(bad).is_err());
}

proptest! {
    #[test]
    fn set_encoder_is_permutation_invariant(seed in 0u64..1000, max in proptest::bool::ANY) {
        let pooling = if max { Pooling::Max } else { Pooling::Mean };
        let cfg = EncoderConfig::new(2, 10, 4, pooling);
        let p = init_encoder(&cfg, seed).unwrap();
        let ctx = random_points(11, 3, seed + 1);
        let mut perm: Vec<usize> = (0..11).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        for i in (1..11).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let a = encode(&cfg, &p, &ctx);
        let b = encode(&cfg, &p, &permute_rows(&ctx, &perm));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn parameter_vector_round_trips(seed in 0u64..1000, hidden in 1usize..9, layers in 2usize..5) {
        let cfg = MlpConfig::new(3, hidden, layers, 2);
        let p = init_mlp(&cfg, seed).unwrap();
        prop_assert_eq!(p.layout().len(), cfg.param_count());
        let back = ParameterVector::from_tensors(cfg.layout(), &p.tensors()).unwrap();
        prop_assert_eq!(&back, &p);
        let flat = ParameterVector::new(cfg.layout(), p.data().to_vec()).unwrap();
        prop_assert_eq!(&flat, &p);
        let json = serde_json::to_string(&p).unwrap();
        let parsed: ParameterVector = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(parsed, p);
    }

    #[test]
    fn forward_is_pure(seed in 0u64..1000) {
        let cfg = MlpConfig::new(2, 8, 3, 1);
        let p = init_mlp(&cfg, seed).unwrap();
        let x = random_points(4, 2, seed);
        let a = mlp_eval(&cfg, &p, &x).unwrap();
        let b = mlp_eval(&cfg, &p, &x).unwrap();
        prop_assert_eq!(a, b);
    }
}
