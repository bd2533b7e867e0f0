use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::glyphs::{compose, render_blob, render_digit, rotate, Image, Placement};
use super::shapes3d::{Primitive, RigidTransform, ShapeSpec3D};
use super::{raster_to_sdf, SdfGrid, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
const GRID_MAGIC: &[u8; 4] = b"SDFG";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub id: String,
    pub class: String,
    pub split: Split,
    pub resolution: Vec<usize>,
    /// Generator metadata: rotation angle, composed classes, analytic spec.
    pub transform: serde_json::Value,
    /// Grid file relative to the dataset directory.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    /// Version of the tool that wrote the corpus.
    #[serde(default)]
    pub software: String,
    pub generator: serde_json::Value,
    pub shapes: Vec<ShapeEntry>,
}

/// Little-endian `"SDFG"`, `u32` D, H, W (D = 0 for 2D), then `f32` values.
pub fn write_grid(path: &Path, grid: &SdfGrid) -> Result<()> {
    let dims = grid.dims();
    let (d, h, w) = match *dims {
        [h, w] => (0u32, h as u32, w as u32),
        [d, h, w] => (d as u32, h as u32, w as u32),
        _ => unreachable!("grids are 2D or 3D"),
    };
    let mut buf = Vec::with_capacity(16 + 4 * grid.len());
    buf.extend_from_slice(GRID_MAGIC);
    for v in [d, h, w] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in grid.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub fn read_grid(path: &Path) -> Result<SdfGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != GRID_MAGIC {
        return Err(Error::format(path, "missing SDFG header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (d, h, w) = (word(0), word(1), word(2));
    let dims = if d == 0 { vec![h, w] } else { vec![d, h, w] };
    let n: usize = dims.iter().product();
    if bytes.len() != 16 + 4 * n {
        return Err(Error::format(
            path,
            format!("expected {} value bytes for dims {dims:?}, found {}", 4 * n, bytes.len() - 16),
        ));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    SdfGrid::new(dims, values)
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    /// Seven-segment style digit strokes, classes 0–9.
    #[default]
    Glyphs,
    /// Star-shaped blobs, class `c` has `c + 2` lobes.
    Blobs,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Plain,
    /// Every raster rotated by a uniform random angle.
    Rotate,
    /// Three glyphs at a third of the size side by side.
    Compose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub kind: CorpusKind,
    pub count: usize,
    pub resolution: usize,
    pub classes: Vec<usize>,
    /// Classes sent entirely to the test split.
    #[serde(default)]
    pub holdout_classes: Vec<usize>,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub val_fraction: f64,
    #[serde(default)]
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            kind: CorpusKind::Glyphs,
            count: 256,
            resolution: 64,
            classes: (0..10).collect(),
            holdout_classes: Vec::new(),
            variant: Variant::Plain,
            val_fraction: 0.0,
            test_fraction: 0.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.count == 0 || self.resolution < 8 || self.classes.is_empty() {
            return Err(Error::Config(format!(
                "corpus needs shapes, classes and resolution ≥ 8: {self:?}"
            )));
        }
        if let Some(c) = self.classes.iter().find(|&&c| c > 9) {
            return Err(Error::Config(format!("class {c} outside 0..=9")));
        }
        let f = self.val_fraction + self.test_fraction;
        if !(0.0..1.0).contains(&f) || self.val_fraction < 0.0 || self.test_fraction < 0.0 {
            return Err(Error::Config("split fractions must be nonnegative and sum below 1".into()));
        }
        Ok(())
    }
}

/// Per-shape generator stream, independent of thread scheduling.
fn shape_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn assign_splits(classes: &[String], holdout: &[String], val: f64, test: f64, seed: u64) -> Vec<Split> {
    let mut splits = vec![Split::Train; classes.len()];
    let mut pool: Vec<usize> = Vec::new();
    for (i, c) in classes.iter().enumerate() {
        if holdout.contains(c) {
            splits[i] = Split::Test;
        } else {
            pool.push(i);
        }
    }
    let mut rng = shape_rng(seed, usize::MAX - 1);
    rand::seq::SliceRandom::shuffle(pool.as_mut_slice(), &mut rng);
    let n_test = (test * pool.len() as f64).round() as usize;
    let n_val = (val * pool.len() as f64).round() as usize;
    for (k, &i) in pool.iter().enumerate() {
        if k < n_test {
            splits[i] = Split::Test;
        } else if k < n_test + n_val {
            splits[i] = Split::Val;
        }
    }
    splits
}

fn glyph(kind: CorpusKind, class: usize, res: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    match kind {
        CorpusKind::Glyphs => render_digit(class, res, rng),
        CorpusKind::Blobs => Ok(render_blob(class, res, rng)),
    }
}

fn finish_corpus(out: &Path, generator: serde_json::Value, mut shapes: Vec<ShapeEntry>) -> Result<Manifest> {
    shapes.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        software: crate::checkpoint::version_string(),
        generator,
        shapes,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// Generate a procedural 2D corpus under `out`.
pub fn build_glyph_corpus(config: &CorpusConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let res = config.resolution;
    let classes: Vec<String> = (0..config.count)
        .map(|i| config.classes[i % config.classes.len()].to_string())
        .collect();
    let holdout: Vec<String> = config.holdout_classes.iter().map(|c| c.to_string()).collect();
    let splits = assign_splits(&classes, &holdout, config.val_fraction, config.test_fraction, config.seed);
    let entries: Vec<ShapeEntry> = (0..config.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = shape_rng(config.seed, i);
            let class = config.classes[i % config.classes.len()];
            let (image, transform) = match config.variant {
                Variant::Plain => (glyph(config.kind, class, res, &mut rng)?, serde_json::json!({})),
                Variant::Rotate => {
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    let img = rotate(&glyph(config.kind, class, res, &mut rng)?, angle);
                    (img, serde_json::json!({ "rotate": angle }))
                }
                Variant::Compose => {
                    let mut parts = vec![class];
                    for _ in 0..2 {
                        parts.push(config.classes[rng.gen_range(0..config.classes.len())]);
                    }
                    let placements = parts
                        .iter()
                        .enumerate()
                        .map(|(k, &c)| {
                            Ok(Placement {
                                glyph: glyph(config.kind, c, res, &mut rng)?,
                                scale: 1.0 / 3.0,
                                center: [(k as f64 - 1.0) * 0.62, rng.gen_range(-0.3..0.3)],
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let img = compose(&Image::blank(res, res), &placements)?;
                    (img, serde_json::json!({ "compose": parts }))
                }
            };
            let grid = raster_to_sdf(&image, DEFAULT_THRESHOLD)?;
            let id = format!("shape_{i:05}");
            let rel = format!("grids/{id}.sdfg");
            write_grid(&out.join(&rel), &grid)?;
            Ok(ShapeEntry {
                id,
                class: classes[i].clone(),
                split: splits[i],
                resolution: grid.dims().to_vec(),
                transform,
                path: rel,
            })
        })
        .collect::<Result<_>>()?;
    let generator = serde_json::to_value(config).expect("config serializes");
    finish_corpus(out, generator, entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticCorpusConfig {
    pub count: usize,
    pub resolution: usize,
    #[serde(default)]
    pub val_fraction: f64,
    #[serde(default)]
    pub test_fraction: f64,
    pub seed: u64,
}

fn random_primitive(rng: &mut ChaCha8Rng) -> (Primitive, &'static str) {
    match rng.gen_range(0..3) {
        0 => (
            Primitive::Sphere {
                radius: rng.gen_range(0.3..0.6),
            },
            "sphere",
        ),
        1 => (
            Primitive::Box {
                half: [0, 1, 2].map(|_| rng.gen_range(0.2..0.5)),
            },
            "box",
        ),
        _ => {
            let major = rng.gen_range(0.35..0.5);
            (
                Primitive::Torus {
                    major,
                    minor: rng.gen_range(0.1..0.2),
                },
                "torus",
            )
        }
    }
}

fn random_transform(rng: &mut ChaCha8Rng, spread: f64) -> RigidTransform {
    RigidTransform {
        euler: [0, 1, 2].map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)),
        translation: [0, 1, 2].map(|_| rng.gen_range(-spread..spread)),
    }
}

/// Random analytic shape: a single primitive or the union of two.
pub fn random_shape3d(rng: &mut ChaCha8Rng) -> (ShapeSpec3D, String) {
    let (p, name) = random_primitive(rng);
    let first = ShapeSpec3D::primitive(p, random_transform(rng, 0.1));
    if rng.gen_bool(0.3) {
        let (q, other) = random_primitive(rng);
        let mut a = first;
        if let ShapeSpec3D::Primitive { transform, .. } = &mut a {
            transform.translation[0] -= 0.2;
        }
        let mut t = random_transform(rng, 0.1);
        t.translation[0] += 0.2;
        let b = ShapeSpec3D::primitive(q, t);
        (ShapeSpec3D::Union { children: vec![a, b] }, format!("{name}+{other}"))
    } else {
        (first, name.to_string())
    }
}

/// Generate a 3D corpus of analytic shapes sampled on `resolution³` grids.
pub fn build_analytic_corpus(config: &AnalyticCorpusConfig, out: &Path) -> Result<Manifest> {
    if config.count == 0 || config.resolution < 4 {
        return Err(Error::Config(format!("invalid analytic corpus: {config:?}")));
    }
    let specs: Vec<(ShapeSpec3D, String)> = (0..config.count)
        .map(|i| random_shape3d(&mut shape_rng(config.seed, i)))
        .collect();
    let classes: Vec<String> = specs.iter().map(|s| s.1.clone()).collect();
    let splits = assign_splits(&classes, &[], config.val_fraction, config.test_fraction, config.seed);
    let r = config.resolution;
    let entries: Vec<ShapeEntry> = specs
        .par_iter()
        .enumerate()
        .map(|(i, (spec, class))| {
            let grid = SdfGrid::from_fn(vec![r, r, r], |p| spec.eval([p[0], p[1], p[2]]))?;
            let id = format!("shape_{i:05}");
            let rel = format!("grids/{id}.sdfg");
            write_grid(&out.join(&rel), &grid)?;
            Ok(ShapeEntry {
                id,
                class: class.clone(),
                split: splits[i],
                resolution: grid.dims().to_vec(),
                transform: serde_json::json!({ "spec": spec }),
                path: rel,
            })
        })
        .collect::<Result<_>>()?;
    let generator = serde_json::to_value(config).expect("config serializes");
    finish_corpus(out, generator, entries)
}

fn load_raster(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Image::new(h as usize, w as usize, data)
}

fn is_raster(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("pgm" | "pnm" | "png")
    )
}

/// Convert a directory of grayscale rasters into a corpus.
///
/// Files in a subdirectory take its name as their class; files at the top
/// level are class `unlabeled`. Bright pixels are foreground.
pub fn ingest_rasters(input: &Path, out: &Path, holdout: &[String], seed: u64) -> Result<Manifest> {
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    let read = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<_>>()?;
        v.sort();
        Ok(v)
    };
    for p in read(input)? {
        if p.is_dir() {
            let class = p.file_name().expect("named dir").to_string_lossy().to_string();
            for f in read(&p)?.into_iter().filter(|f| is_raster(f)) {
                files.push((f, class.clone()));
            }
        } else if is_raster(&p) {
            files.push((p, "unlabeled".to_string()));
        }
    }
    if files.is_empty() {
        return Err(Error::Empty("raster directory"));
    }
    let classes: Vec<String> = files.iter().map(|f| f.1.clone()).collect();
    let splits = assign_splits(&classes, holdout, 0.0, 0.0, seed);
    let entries: Vec<ShapeEntry> = files
        .par_iter()
        .enumerate()
        .map(|(i, (path, class))| {
            let grid = raster_to_sdf(&load_raster(path)?, DEFAULT_THRESHOLD)?;
            let id = format!("shape_{i:05}");
            let rel = format!("grids/{id}.sdfg");
            write_grid(&out.join(&rel), &grid)?;
            let source = path.strip_prefix(input).unwrap_or(path).to_string_lossy().to_string();
            Ok(ShapeEntry {
                id,
                class: class.clone(),
                split: splits[i],
                resolution: grid.dims().to_vec(),
                transform: serde_json::json!({ "source": source }),
                path: rel,
            })
        })
        .collect::<Result<_>>()?;
    let generator = serde_json::json!({ "ingest": input.to_string_lossy(), "holdout": holdout, "seed": seed });
    finish_corpus(out, generator, entries)
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported schema version {}", manifest.schema_version),
            ));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ShapeEntry> {
        self.manifest.shapes.iter().filter(move |e| e.split == split)
    }

    pub fn find(&self, id: &str) -> Option<&ShapeEntry> {
        self.manifest.shapes.iter().find(|e| e.id == id)
    }

    pub fn load(&self, entry: &ShapeEntry) -> Result<SdfGrid> {
        read_grid(&self.root.join(&entry.path))
    }

    /// Every shape of a split with its grid.
    pub fn load_split(&self, split: Split) -> Result<Vec<(ShapeEntry, SdfGrid)>> {
        self.entries(split)
            .map(|e| Ok((e.clone(), self.load(e)?)))
            .collect()
    }
}
