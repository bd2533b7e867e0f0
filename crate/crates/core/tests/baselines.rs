use metasdf::baselines::*;
use metasdf::losses::mean_abs_error;
use metasdf::meta::{specialize, MetaConfig, MetaModel};
use metasdf::nets::MlpConfig;
use metasdf::sdfdata::*;
use rand::SeedableRng;
use rayon::prelude::*;

fn blobs(n: u64) -> Vec<(String, SdfGrid)> {
    (0..n)
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(i);
            let img = render_blob(i as usize % 5, 64, &mut rng);
            (format!("blob{i:02}"), raster_to_sdf(&img, 0.5).unwrap())
        })
        .collect()
}

fn small_autodecoder(decoder: DecoderKind) -> AutoDecoderConfig {
    AutoDecoderConfig {
        decoder,
        net: MlpConfig::new(2, 32, 4, 1),
        hyper_hidden: 32,
        lr: 1e-3,
        batch_shapes: 8,
        target_points: Some(256),
        epochs: 50,
        ..AutoDecoderConfig::default()
    }
}

#[test]
fn autodecoder_memorizes_one_shape() {
    let disk = SdfGrid::from_fn(vec![64, 64], |p| ((p[0] - 0.1).powi(2) + (p[1] + 0.05).powi(2)).sqrt() - 0.45).unwrap();
    let cfg = AutoDecoderConfig {
        net: MlpConfig::new(2, 64, 4, 1),
        latent_dim: 16,
        lr: 1e-3,
        lr_halving_steps: Some(600),
        batch_shapes: 1,
        target_points: None,
        epochs: 3000,
        ..AutoDecoderConfig::default()
    };
    let (m, _) = train_autodecoder(&[("disk".into(), disk.clone())], &cfg).unwrap();
    let all = sample_dense(&disk, None, 0).unwrap();
    let pred = m.predict(&m.codes["disk"], &all.coords_tensor()).unwrap();
    let err = mean_abs_error(&pred, &all.values).unwrap();
    assert!(err <= 1e-3, "train l1 {err}");
}

#[test]
fn code_search_recovers_training_codes() {
    let data = blobs(32);
    let (m, _) = train_autodecoder(&data, &small_autodecoder(DecoderKind::Concat)).unwrap();
    let runs: Vec<(f64, f64, bool)> = data
        .par_iter()
        .enumerate()
        .map(|(i, (id, g))| {
            let ctx = sample_dense(g, Some(256), 500 + i as u64).unwrap();
            let s = test_time_optimize_code(&m, &ctx, &CodeSearchConfig::default()).unwrap();
            let found = mean_abs_error(&m.predict(&s.code, &ctx.coords_tensor()).unwrap(), &ctx.values).unwrap();
            let trained = mean_abs_error(&m.predict(&m.codes[id], &ctx.coords_tensor()).unwrap(), &ctx.values).unwrap();
            // Adam jitters step to step on the ℓ1 loss; judge the trend on 10-step means.
            let blocks: Vec<f64> = s.curve[10.min(s.curve.len())..]
                .chunks_exact(10)
                .map(|c| c.iter().sum::<f64>() / 10.0)
                .collect();
            (found, trained, blocks.windows(2).all(|w| w[1] <= w[0]))
        })
        .collect();
    for (found, trained, _) in &runs {
        assert!(*found <= 2.0 * trained, "searched {found} vs trained {trained}");
    }
    let monotone = runs.iter().filter(|r| r.2).count() as f64 / runs.len() as f64;
    println!("code search curves non-increasing after step 10 (10-step means): {:.0}%", 100.0 * monotone);
    assert!(monotone >= 0.9, "only {:.0}% monotone", 100.0 * monotone);
}

#[test]
fn cnp_smoke_training_improves() {
    let data = blobs(32);
    let cfg = CnpConfig {
        net: MlpConfig::new(2, 32, 4, 1),
        encoder_hidden: 32,
        lr: 1e-3,
        batch_tasks: 8,
        sampling: TaskSampling {
            mode: ContextMode::Dense,
            context_points: 256,
            target_points: 256,
        },
        epochs: 50,
        ..CnpConfig::default()
    };
    let (m, log) = train_cnp(&data, &[], &cfg).unwrap();
    assert_eq!(log.rows.len(), 200);
    let first = log.rows[0].outer_loss;
    let last: f64 = log.rows[190..].iter().map(|r| r.outer_loss).sum::<f64>() / 10.0;
    assert!(first >= 3.0 * last, "cnp l1 {first} -> {last}");

    let (again, _) = train_cnp(&data, &[], &CnpConfig { max_steps: Some(20), ..cfg.clone() }).unwrap();
    let (twice, _) = train_cnp(&data, &[], &CnpConfig { max_steps: Some(20), ..cfg.clone() }).unwrap();
    assert_eq!(again, twice);

    // One forward pass beats five gradient steps on a network of the same
    // size; both include decoding the same queries.
    let meta = MetaModel::new(MetaConfig { net: cfg.net, ..MetaConfig::planar() }, 0).unwrap();
    let ctx = sample_dense(&data[0].1, Some(256), 1).unwrap();
    let q = sample_dense(&data[0].1, None, 0).unwrap().coords_tensor();
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let cnp_t = median((0..11).map(|_| cnp_infer(&m, &ctx, &q).unwrap().elapsed.as_secs_f64()).collect());
    let meta_t = median(
        (0..11)
            .map(|_| {
                let t = std::time::Instant::now();
                let s = specialize(&meta, &ctx).unwrap();
                meta.predict(&s.params, &q).unwrap();
                t.elapsed().as_secs_f64()
            })
            .collect(),
    );
    assert!(cnp_t < meta_t, "cnp {cnp_t}s vs specialize {meta_t}s");
    let lattice = SdfGrid::from_fn(vec![33, 33], |_| 0.0).unwrap();
    let p = cnp_infer(&m, &ctx, &sample_dense(&lattice, None, 0).unwrap().coords_tensor()).unwrap();
    assert!(p.values.iter().all(|v| v.is_finite()));
}
