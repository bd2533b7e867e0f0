use super::*;
use proptest::prelude::*;
use rand::Rng;
use std::f64::consts::TAU;

fn disk_image(n: usize, cx: f64, cy: f64, r: f64) -> Image {
    let s = 2.0 / n as f64;
    let mut img = Image::blank(n, n);
    for row in 0..n {
        for col in 0..n {
            let x = (col as f64 + 0.5 - n as f64 / 2.0) * s;
            let y = (row as f64 + 0.5 - n as f64 / 2.0) * s;
            if ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() < r {
                img.data[row * n + col] = 1.0;
            }
        }
    }
    img
}

fn brute_edt(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            (0..h * w)
                .filter(|&j| mask[j])
                .map(|j| ((r - (j / w) as f64).powi(2) + (c - (j % w) as f64).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn len3(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn fibonacci_sphere(n: usize, center: [f64; 3], r: f64) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - y * y).sqrt();
            let t = golden * i as f64;
            [center[0] + r * rho * t.cos(), center[1] + r * y, center[2] + r * rho * t.sin()]
        })
        .collect()
}

fn box_surface(half: [f64; 3], h: f64) -> Vec<[f64; 3]> {
    let mut pts = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let (nu, nv) = ((2.0 * half[u] / h).ceil() as usize, (2.0 * half[v] / h).ceil() as usize);
        for sign in [-1.0, 1.0] {
            for i in 0..=nu {
                for j in 0..=nv {
                    let mut p = [0.0; 3];
                    p[axis] = sign * half[axis];
                    p[u] = -half[u] + 2.0 * half[u] * i as f64 / nu as f64;
                    p[v] = -half[v] + 2.0 * half[v] * j as f64 / nv as f64;
                    pts.push(p);
                }
            }
        }
    }
    pts
}

fn nearest(p: [f64; 3], cloud: &[[f64; 3]]) -> f64 {
    cloud
        .iter()
        .map(|q| len3([p[0] - q[0], p[1] - q[1], p[2] - q[2]]))
        .fold(f64::INFINITY, f64::min)
}

fn check_outside_queries(spec: &ShapeSpec3D, surface: &[[f64; 3]], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    while checked < 20 {
        let p = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
        let d = spec.eval(p);
        if d.abs() < 0.1 || (d < 0.0 && matches!(spec, ShapeSpec3D::Union { .. })) {
            continue;
        }
        let reference = nearest(p, surface);
        assert!((d.abs() - reference).abs() <= 2e-3, "{p:?}: {d} vs {reference}");
        checked += 1;
    }
}

#[test]
fn disk_sdf_matches_analytic_distance() {
    let n = 96;
    let grid = raster_to_sdf(&disk_image(n, 0.1, -0.05, 0.55), DEFAULT_THRESHOLD).unwrap();
    let cell = grid.cell_size();
    for i in 0..grid.len() {
        let p = grid.coord_of(i);
        let exact = ((p[0] - 0.1).powi(2) + (p[1] + 0.05).powi(2)).sqrt() - 0.55;
        assert!((grid.values()[i] - exact).abs() <= cell, "{p:?}");
    }
    let norms = grid.gradient_norms();
    let share = |keep: &dyn Fn(usize) -> bool| {
        let cells: Vec<f64> = norms.iter().filter(|(i, _)| keep(*i)).map(|p| p.1).collect();
        cells.iter().filter(|g| (0.8..=1.2).contains(*g)).count() as f64 / cells.len() as f64
    };
    let all = share(&|_| true);
    let far = share(&|i| grid.values()[i].abs() > 2.0 * cell);
    assert!(all >= 0.95, "{all}");
    assert!(far >= 0.95, "{far}");
}

#[test]
fn inverting_the_raster_negates_the_sdf() {
    let img = disk_image(40, 0.0, 0.2, 0.4);
    let inv = Image::new(40, 40, img.data.iter().map(|v| 1.0 - v).collect()).unwrap();
    let a = raster_to_sdf(&img, DEFAULT_THRESHOLD).unwrap();
    let b = raster_to_sdf(&inv, DEFAULT_THRESHOLD).unwrap();
    for (x, y) in a.values().iter().zip(b.values()) {
        assert_eq!(*x, -*y);
    }
}

#[test]
fn single_pixel_raster() {
    let mut img = Image::blank(9, 9);
    img.data[4 * 9 + 4] = 1.0;
    let g = raster_to_sdf(&img, DEFAULT_THRESHOLD).unwrap();
    let s = g.cell_size();
    assert_eq!(g.values()[4 * 9 + 4], -s);
    assert_eq!(g.values()[4 * 9 + 5], s);
    assert!((g.values()[0] - 32f64.sqrt() * s).abs() < 1e-12);
    assert_eq!(g.values().iter().filter(|&&v| v < 0.0).count(), 1);
}

#[test]
fn degenerate_rasters_are_rejected() {
    assert!(matches!(
        raster_to_sdf(&Image::blank(8, 8), 0.5),
        Err(Error::NoZeroCrossing(_))
    ));
    let full = Image::new(4, 4, vec![1.0; 16]).unwrap();
    assert!(matches!(raster_to_sdf(&full, 0.5), Err(Error::NoZeroCrossing(_))));
    let bad = Image::new(2, 2, vec![0.0, 1.5, 0.0, 0.0]).unwrap();
    assert!(raster_to_sdf(&bad, 0.5).is_err());
    assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
}

#[test]
fn sphere_and_box_sdfs_match_sampled_surfaces() {
    let sphere = ShapeSpec3D::primitive(
        Primitive::Sphere { radius: 0.45 },
        RigidTransform::translate([0.1, -0.1, 0.05]),
    );
    check_outside_queries(&sphere, &fibonacci_sphere(40_000, [0.1, -0.1, 0.05], 0.45), 1);

    let half = [0.5, 0.3, 0.4];
    let cube = ShapeSpec3D::primitive(Primitive::Box { half }, RigidTransform::default());
    check_outside_queries(&cube, &box_surface(half, 0.01), 2);
}

#[test]
fn union_matches_sampled_surface_outside() {
    let (c1, c2) = ([-0.25, 0.0, 0.0], [0.3, 0.1, 0.0]);
    let a = ShapeSpec3D::primitive(Primitive::Sphere { radius: 0.4 }, RigidTransform::translate(c1));
    let b = ShapeSpec3D::primitive(Primitive::Sphere { radius: 0.35 }, RigidTransform::translate(c2));
    let mut surface: Vec<[f64; 3]> = fibonacci_sphere(40_000, c1, 0.4)
        .into_iter()
        .filter(|&p| b.eval(p) >= 0.0)
        .collect();
    surface.extend(fibonacci_sphere(40_000, c2, 0.35).into_iter().filter(|&p| a.eval(p) >= 0.0));
    let u = ShapeSpec3D::Union { children: vec![a, b] };
    check_outside_queries(&u, &surface, 3);
}

#[test]
fn rigid_transforms_and_csg_validation() {
    let t = RigidTransform {
        euler: [0.3, -0.7, 1.1],
        translation: [0.2, 0.0, -0.1],
    };
    let torus = ShapeSpec3D::primitive(Primitive::Torus { major: 0.4, minor: 0.1 }, t);
    // Rotations preserve distance from the translated origin.
    let p = [0.5, 0.2, -0.3];
    let l = t.to_local(p);
    let d = [p[0] - 0.2, p[1], p[2] + 0.1];
    assert!((len3(l) - len3(d)).abs() < 1e-12);
    assert!(torus.validate().is_ok());
    let mut deep = torus.clone();
    for _ in 0..=MAX_CSG_DEPTH {
        deep = ShapeSpec3D::Union { children: vec![deep] };
    }
    assert!(deep.validate().is_err());
    assert!(ShapeSpec3D::Intersection { children: vec![] }.validate().is_err());
    let neg = ShapeSpec3D::primitive(Primitive::Sphere { radius: -1.0 }, RigidTransform::default());
    assert!(neg.validate().is_err());
    let json = serde_json::to_string(&torus).unwrap();
    assert_eq!(serde_json::from_str::<ShapeSpec3D>(&json).unwrap(), torus);
}

#[test]
fn dense_sampling() {
    let grid = SdfGrid::from_fn(vec![64, 64], |p| p[0] + 0.5 * p[1]).unwrap();
    let s = sample_dense(&grid, Some(4096), 0).unwrap();
    assert_eq!(s.len(), 4096);
    let all = sample_dense(&grid, None, 0).unwrap();
    assert_eq!(all.len(), 4096);
    let sub = sample_dense(&grid, Some(500), 7).unwrap();
    assert_eq!(sub, sample_dense(&grid, Some(500), 7).unwrap());
    assert_ne!(sub, sample_dense(&grid, Some(500), 8).unwrap());
    for i in 0..sub.len() {
        let c = sub.coord(i);
        assert!(c.iter().all(|v| v.abs() < 1.0));
        assert!((sub.values[i] - (c[0] + 0.5 * c[1])).abs() < 1e-12);
    }
    assert!(sample_dense(&grid, Some(4097), 0).is_err());
}

#[test]
fn levelset_samples_lie_on_the_contours() {
    let grid = SdfGrid::from_fn(vec![64, 64], |p| {
        let a = ((p[0] - 0.45).powi(2) + p[1].powi(2)).sqrt() - 0.3;
        let b = ((p[0] + 0.45).powi(2) + p[1].powi(2)).sqrt() - 0.3;
        a.min(b)
    })
    .unwrap();
    let s = sample_levelset(&grid, 300, 4).unwrap();
    assert_eq!(s.len(), 300);
    assert!(s.values.iter().all(|&v| v == 0.0));
    let (mut left, mut right) = (0, 0);
    for i in 0..s.len() {
        let c = s.coord(i);
        let cx = if c[0] > 0.0 { right += 1; 0.45 } else { left += 1; -0.45 };
        let r = ((c[0] - cx).powi(2) + c[1].powi(2)).sqrt();
        assert!((r - 0.3).abs() <= grid.cell_size());
    }
    assert!(left > 100 && right > 100);
    let flat = SdfGrid::new(vec![8, 8], vec![1.0; 64]).unwrap();
    assert!(matches!(sample_levelset(&flat, 10, 0), Err(Error::NoZeroCrossing(_))));
}

#[test]
fn levelset_of_raster_sdf_tracks_the_pixel_boundary() {
    let img = render_digit(8, 48, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let grid = raster_to_sdf(&img, DEFAULT_THRESHOLD).unwrap();
    let cell = grid.cell_size();
    let s = sample_levelset(&grid, 2000, 1).unwrap();
    for i in 0..s.len() {
        assert!(grid.interpolate(s.coord(i)).abs() <= 1.5 * cell);
    }
    // Midpoints between horizontally or vertically adjacent inside/outside pixels.
    let (h, w) = (48, 48);
    let fg = |r: usize, c: usize| img.get(r, c) >= DEFAULT_THRESHOLD;
    let mut boundary = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let p = grid.cell_center(&[r, c]);
            if c + 1 < w && fg(r, c) != fg(r, c + 1) {
                boundary.push([p[0] + cell / 2.0, p[1], 0.0]);
            }
            if r + 1 < h && fg(r, c) != fg(r + 1, c) {
                boundary.push([p[0], p[1] + cell / 2.0, 0.0]);
            }
        }
    }
    let samples: Vec<[f64; 3]> = (0..s.len()).map(|i| [s.coord(i)[0], s.coord(i)[1], 0.0]).collect();
    let dense = sample_levelset(&grid, 20_000, 2).unwrap();
    let dense: Vec<[f64; 3]> = (0..dense.len()).map(|i| [dense.coord(i)[0], dense.coord(i)[1], 0.0]).collect();
    let forward = samples.iter().map(|&p| nearest(p, &boundary)).fold(0.0, f64::max);
    let backward = boundary.iter().map(|&p| nearest(p, &dense)).fold(0.0, f64::max);
    assert!(forward <= cell, "{forward}");
    assert!(backward <= cell, "{backward}");
}

#[test]
fn tasks_split_disjointly() {
    let grid = SdfGrid::from_fn(vec![32, 32], |p| (p[0] * p[0] + p[1] * p[1]).sqrt() - 0.5).unwrap();
    let t = make_task("s", &grid, ContextMode::Dense, 100, 200, 3).unwrap();
    assert_eq!((t.context.len(), t.target.len()), (100, 200));
    let key = |s: &SampleSet, i: usize| (s.coord(i)[0].to_bits(), s.coord(i)[1].to_bits());
    let ctx: std::collections::HashSet<_> = (0..100).map(|i| key(&t.context, i)).collect();
    assert!((0..200).all(|i| !ctx.contains(&key(&t.target, i))));
    assert_eq!(t, make_task("s", &grid, ContextMode::Dense, 100, 200, 3).unwrap());
    let l = make_task("s", &grid, ContextMode::Levelset, 64, 200, 3).unwrap();
    assert!(l.context.values.iter().all(|&v| v == 0.0));
    assert_eq!(l.context.rows_tensor().shape(), &[64, 3]);
    assert!(make_task("s", &grid, ContextMode::Dense, 1000, 100, 0).is_err());
    assert!(make_task("s", &grid, ContextMode::Dense, 0, 10, 0).is_err());
    assert_eq!("levelset".parse::<ContextMode>().unwrap(), ContextMode::Levelset);
    assert!("sparse".parse::<ContextMode>().is_err());
}

#[test]
fn rotation_by_full_turns_is_identity() {
    let img = render_digit(4, 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(rotate(&img, 0.0), img);
    let r = rotate(&img, TAU);
    for (a, b) in r.data.iter().zip(&img.data) {
        assert!((a - b).abs() < 1e-9);
    }
    let q = rotate(&rotate(&img, TAU / 4.0), -TAU / 4.0);
    for (a, b) in q.data.iter().zip(&img.data) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn composition_yields_separate_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let placements: Vec<Placement> = (0..3)
        .map(|k| Placement {
            glyph: render_digit(7, 64, &mut rng).unwrap(),
            scale: 1.0 / 3.0,
            center: [(k as f64 - 1.0) * 0.62, 0.0],
        })
        .collect();
    let img = transform_shape(&Image::blank(96, 96), &ShapeOp::Compose { placements: placements.clone() }).unwrap();
    let grid = raster_to_sdf(&img, DEFAULT_THRESHOLD).unwrap();
    let c = crate::geometry::marching_squares(&grid, 0.0).unwrap();
    assert!(c.polylines.len() >= 3);
    let mut off = placements[0].clone();
    off.center = [0.9, 0.0];
    assert!(compose(&Image::blank(16, 16), &[off]).is_err());
}

#[test]
fn edt_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let (h, w) = (rng.gen_range(1..15), rng.gen_range(1..15));
        let mut mask: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.1)).collect();
        mask[rng.gen_range(0..h * w)] = true;
        let fast = distance_transform(&mask, h, w);
        for (a, b) in fast.iter().zip(brute_edt(&mask, h, w)) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn grid_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let g3 = SdfGrid::from_fn(vec![3, 4, 5], |p| p[0] - p[2]).unwrap();
    let path = dir.path().join("g.sdfg");
    write_grid(&path, &g3).unwrap();
    let back = read_grid(&path).unwrap();
    assert_eq!(back.dims(), g3.dims());
    for (a, b) in back.values().iter().zip(g3.values()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    std::fs::write(&path, b"SDFGxx").unwrap();
    assert!(matches!(read_grid(&path), Err(Error::Format { .. })));
    assert!(matches!(read_grid(&dir.path().join("none")), Err(Error::Io { .. })));
}

#[test]
fn glyph_corpus_is_reproducible_and_split() {
    let cfg = CorpusConfig {
        kind: CorpusKind::Blobs,
        count: 100,
        resolution: 24,
        classes: (0..5).collect(),
        holdout_classes: vec![4],
        val_fraction: 0.1,
        test_fraction: 0.0,
        seed: 9,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = build_glyph_corpus(&cfg, a.path()).unwrap();
    build_glyph_corpus(&cfg, b.path()).unwrap();
    assert_eq!(m.shapes.len(), 100);
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "manifest.json"), read(b.path(), "manifest.json"));
    for e in &m.shapes {
        assert_eq!(read(a.path(), &e.path), read(b.path(), &e.path));
        assert_eq!(e.split == Split::Test, e.class == "4");
    }
    assert_eq!(m.shapes.iter().filter(|e| e.split == Split::Val).count(), 8);
    let ds = Dataset::open(a.path()).unwrap();
    for (e, grid) in ds.load_split(Split::Train).unwrap() {
        assert_eq!(grid.dims(), &e.resolution[..]);
        // Blobs always cover the canvas center.
        assert!(grid.interpolate(&[0.0, 0.0]) < 0.0, "{}", e.id);
    }
    assert!(ds.find("shape_00042").is_some());
    let bad = r#"{"kind":"glyphs","count":1,"resolution":16,"classes":[1],"seed":0,"extra":1}"#;
    assert!(serde_json::from_str::<CorpusConfig>(bad).is_err());
}

#[test]
fn variant_corpora_and_analytic_corpus() {
    let dir = tempfile::tempdir().unwrap();
    for variant in [Variant::Rotate, Variant::Compose] {
        let cfg = CorpusConfig {
            count: 4,
            resolution: 48,
            variant,
            classes: vec![0, 1, 7],
            ..Default::default()
        };
        let out = dir.path().join(format!("{variant:?}"));
        let m = build_glyph_corpus(&cfg, &out).unwrap();
        assert!(m.shapes.iter().all(|e| e.transform.as_object().unwrap().len() == 1));
    }
    let cfg = AnalyticCorpusConfig {
        count: 6,
        resolution: 16,
        val_fraction: 0.0,
        test_fraction: 0.5,
        seed: 1,
    };
    let out = dir.path().join("analytic");
    let m = build_analytic_corpus(&cfg, &out).unwrap();
    assert_eq!(m.shapes.iter().filter(|e| e.split == Split::Test).count(), 3);
    let ds = Dataset::open(&out).unwrap();
    for e in &m.shapes {
        let spec: ShapeSpec3D = serde_json::from_value(e.transform["spec"].clone()).unwrap();
        let grid = ds.load(e).unwrap();
        assert_eq!(grid.dims(), &[16, 16, 16]);
        let i = 1000;
        let p = grid.coord_of(i);
        assert!((grid.values()[i] - spec.eval([p[0], p[1], p[2]])).abs() < 1e-6);
    }
}

#[test]
fn ingesting_rasters_uses_directory_classes() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    for (class, r) in [("round", 0.5), ("small", 0.25)] {
        std::fs::create_dir_all(src.join(class)).unwrap();
        let img = disk_image(20, 0.0, 0.0, r);
        let bytes: Vec<u8> = img.data.iter().map(|&v| (v * 255.0) as u8).collect();
        image::GrayImage::from_raw(20, 20, bytes)
            .unwrap()
            .save(src.join(class).join("a.png"))
            .unwrap();
    }
    let out = dir.path().join("out");
    let m = ingest_rasters(&src, &out, &["small".to_string()], 0).unwrap();
    assert_eq!(m.shapes.len(), 2);
    let small = m.shapes.iter().find(|e| e.class == "small").unwrap();
    assert_eq!(small.split, Split::Test);
    assert!(ingest_rasters(&dir.path().join("missing"), &out, &[], 0).is_err());
}

proptest! {
    #[test]
    fn interpolation_reproduces_cell_values(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = vec![rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(2..6)];
        let n: usize = dims.iter().product();
        let grid = SdfGrid::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        for i in 0..n {
            let p = grid.coord_of(i);
            prop_assert!((grid.interpolate(&p) - grid.values()[i]).abs() < 1e-12);
            prop_assert_eq!(grid.unravel(i).len(), 3);
        }
    }

    #[test]
    fn raster_sdf_sign_matches_mask(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Image::new(10, 10, data).unwrap();
        if let Ok(g) = raster_to_sdf(&img, 0.5) {
            for (v, p) in g.values().iter().zip(&img.data) {
                prop_assert_eq!(*v < 0.0, *p >= 0.5);
                prop_assert!(v.abs() >= g.cell_size() - 1e-12);
            }
        }
    }
}
