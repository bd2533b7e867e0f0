//! Shape datasets: signed distance grids, samples and tasks.
//!
//! Signed distances are negative strictly inside a shape and positive outside.
//! Grids cover `[-1, 1]` along their longest axis with square cells; values
//! are in the same normalized units as coordinates.
//!
//! Axis order: a 2D grid has dims `[H, W]` and a point `(x, y)` takes `x` from
//! the column and `y` from the row; a 3D grid has dims `[D, H, W]` and
//! `(x, y, z)` follows `(W, H, D)`.

mod corpus;
mod glyphs;
mod shapes3d;

pub use corpus::{
    build_analytic_corpus, build_glyph_corpus, ingest_rasters, random_shape3d, read_grid, write_atomic,
    write_grid,
    AnalyticCorpusConfig, CorpusConfig, CorpusKind, Dataset, Manifest, ShapeEntry, Split,
    Variant, MANIFEST_SCHEMA_VERSION,
};
pub use glyphs::{
    compose, render_blob, render_digit, rotate, transform_shape, Image, Placement, ShapeOp,
};
pub use shapes3d::{analytic_sdf, Primitive, RigidTransform, ShapeSpec3D, MAX_CSG_DEPTH};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{marching_cubes, marching_squares, sample_surface, Surface};

/// Signed distances sampled at the cell centers of a regular lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdfGrid {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl SdfGrid {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if !(dims.len() == 2 || dims.len() == 3) || dims.contains(&0) {
            return Err(Error::Config(format!("grid dims must be 2D or 3D and positive, got {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::Mismatch {
                what: "grid value count",
                expected: n,
                got: values.len(),
            });
        }
        Ok(SdfGrid { dims, values })
    }

    /// Evaluate `f` at every cell center.
    pub fn from_fn(dims: Vec<usize>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let g = SdfGrid::new(dims.clone(), vec![0.0; dims.iter().product()])?;
        let d = g.dim();
        let values = g.all_coords().chunks(d).map(&f).collect();
        SdfGrid::new(dims, values)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Spatial dimension, 2 or 3.
    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cell_size(&self) -> f64 {
        2.0 / *self.dims.iter().max().expect("nonempty dims") as f64
    }

    fn axis_coord(&self, i: usize, n: usize) -> f64 {
        (i as f64 + 0.5 - n as f64 / 2.0) * self.cell_size()
    }

    /// Coordinates of the cell at lattice index `idx` (row-major, as `dims`).
    ///
    /// Returned in `(x, y, z)` order; `z` is 0 for 2D grids.
    pub fn cell_center(&self, idx: &[usize]) -> [f64; 3] {
        match *idx {
            [r, c] => [self.axis_coord(c, self.dims[1]), self.axis_coord(r, self.dims[0]), 0.0],
            [k, j, i] => [
                self.axis_coord(i, self.dims[2]),
                self.axis_coord(j, self.dims[1]),
                self.axis_coord(k, self.dims[0]),
            ],
            _ => panic!("cell index of rank {}", idx.len()),
        }
    }

    pub fn unravel(&self, flat: usize) -> Vec<usize> {
        let mut rest = flat;
        let mut idx = vec![0; self.dims.len()];
        for a in (0..self.dims.len()).rev() {
            idx[a] = rest % self.dims[a];
            rest /= self.dims[a];
        }
        idx
    }

    /// Coordinates of the cell with flat index `flat`, `dim()` values.
    pub fn coord_of(&self, flat: usize) -> Vec<f64> {
        let c = self.cell_center(&self.unravel(flat));
        c[..self.dim()].to_vec()
    }

    /// Flat `[len · dim]` buffer of every cell center in storage order.
    pub fn all_coords(&self) -> Vec<f64> {
        (0..self.len()).flat_map(|i| self.coord_of(i)).collect()
    }

    /// Multilinear interpolation, clamped to the outermost cell centers.
    pub fn interpolate(&self, p: &[f64]) -> f64 {
        let s = self.cell_size();
        // Continuous lattice index along each storage axis.
        let spatial_axis = |a: usize| self.dims.len() - 1 - a;
        let pos: Vec<f64> = (0..self.dims.len())
            .map(|a| {
                let n = self.dims[a];
                let u = p[spatial_axis(a)] / s + n as f64 / 2.0 - 0.5;
                u.clamp(0.0, (n - 1) as f64)
            })
            .collect();
        let base: Vec<usize> = pos
            .iter()
            .zip(&self.dims)
            .map(|(&u, &n)| (u.floor() as usize).min(n.saturating_sub(2)))
            .collect();
        let frac: Vec<f64> = pos.iter().zip(&base).map(|(&u, &b)| u - b as f64).collect();
        let rank = self.dims.len();
        let mut acc = 0.0;
        for corner in 0..(1usize << rank) {
            let mut w = 1.0;
            let mut flat = 0;
            for a in 0..rank {
                let bit = (corner >> (rank - 1 - a)) & 1;
                let i = (base[a] + bit).min(self.dims[a] - 1);
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                flat = flat * self.dims[a] + i;
            }
            acc += w * self.values[flat];
        }
        acc
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SdfGrid {
        SdfGrid {
            dims: self.dims.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Central-difference gradient magnitude on interior cells, in world units.
    pub fn gradient_norms(&self) -> Vec<(usize, f64)> {
        let rank = self.dims.len();
        let s = self.cell_size();
        let strides: Vec<usize> = (0..rank)
            .map(|a| self.dims[a + 1..].iter().product())
            .collect();
        (0..self.len())
            .filter_map(|flat| {
                let idx = self.unravel(flat);
                if idx.iter().zip(&self.dims).any(|(&i, &n)| i == 0 || i + 1 >= n) {
                    return None;
                }
                let sq: f64 = (0..rank)
                    .map(|a| {
                        let d = (self.values[flat + strides[a]] - self.values[flat - strides[a]]) / (2.0 * s);
                        d * d
                    })
                    .sum();
                Some((flat, sq.sqrt()))
            })
            .collect()
    }
}

/// One-dimensional squared Euclidean distance transform of a sampled function.
///
/// Lower envelope of parabolas rooted at every sample.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for q in 1..n {
        let mut s = inter(q, v[k]);
        // z[0] = -inf stops the scan before k underflows.
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance (in pixels) from every pixel to the nearest `true` pixel.
pub fn distance_transform(mask: &[bool], height: usize, width: usize) -> Vec<f64> {
    // Stand-in for +∞ that keeps the parabola intersections finite.
    let far = 1e20;
    let mut grid: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { far }).collect();
    let n = height.max(width);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    for c in 0..width {
        for r in 0..height {
            f[r] = grid[r * width + c];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for r in 0..height {
            grid[r * width + c] = out[r];
        }
    }
    for r in 0..height {
        f[..width].copy_from_slice(&grid[r * width..(r + 1) * width]);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        grid[r * width..(r + 1) * width].copy_from_slice(&out[..width]);
    }
    grid.iter().map(|d| d.sqrt()).collect()
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Signed distance grid of a grayscale raster with values in `[0, 1]`.
///
/// Pixels at or above `threshold` are foreground. The distance to the nearest
/// foreground pixel minus the distance to the nearest background pixel, in
/// pixels, is scaled to normalized units.
pub fn raster_to_sdf(image: &Image, threshold: f64) -> Result<SdfGrid> {
    let (h, w) = (image.height, image.width);
    if let Some(v) = image.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Config(format!("raster value {v} outside [0, 1]")));
    }
    let fg: Vec<bool> = image.data.iter().map(|&v| v >= threshold).collect();
    if fg.iter().all(|&b| b) {
        return Err(Error::NoZeroCrossing("raster is entirely foreground"));
    }
    if !fg.iter().any(|&b| b) {
        return Err(Error::NoZeroCrossing("raster is entirely background"));
    }
    let bg: Vec<bool> = fg.iter().map(|&b| !b).collect();
    let d_out = distance_transform(&fg, h, w);
    let d_in = distance_transform(&bg, h, w);
    let scale = 2.0 / h.max(w) as f64;
    let values = d_out.iter().zip(&d_in).map(|(o, i)| (o - i) * scale).collect();
    SdfGrid::new(vec![h, w], values)
}

/// Coordinates `[n, d]` with matching signed distances `[n]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub dim: usize,
    pub coords: Vec<f64>,
    pub values: Vec<f64>,
}

impl SampleSet {
    pub fn new(dim: usize, coords: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if coords.len() != dim * values.len() {
            return Err(Error::Mismatch {
                what: "sample coordinate count",
                expected: dim * values.len(),
                got: coords.len(),
            });
        }
        Ok(SampleSet { dim, coords, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn coord(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.coords.clone()).expect("consistent sample set")
    }

    pub fn values_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), 1, self.values.clone()).expect("consistent sample set")
    }

    /// `[n, dim + 1]` rows of `(coord, sdf)`.
    pub fn rows_tensor(&self) -> Tensor {
        let data = (0..self.len())
            .flat_map(|i| self.coord(i).iter().copied().chain([self.values[i]]))
            .collect();
        Tensor::matrix(self.len(), self.dim + 1, data).expect("consistent sample set")
    }

    pub fn select(&self, idx: &[usize]) -> SampleSet {
        SampleSet {
            dim: self.dim,
            coords: idx.iter().flat_map(|&i| self.coord(i).to_vec()).collect(),
            values: idx.iter().map(|&i| self.values[i]).collect(),
        }
    }
}

fn grid_samples(grid: &SdfGrid, cells: impl IntoIterator<Item = usize>) -> SampleSet {
    let mut coords = Vec::new();
    let mut values = Vec::new();
    for i in cells {
        coords.extend(grid.coord_of(i));
        values.push(grid.values[i]);
    }
    SampleSet {
        dim: grid.dim(),
        coords,
        values,
    }
}

/// Cell-center samples: the whole lattice for `None`, else `n` distinct cells.
pub fn sample_dense(grid: &SdfGrid, n: Option<usize>, seed: u64) -> Result<SampleSet> {
    match n {
        None => Ok(grid_samples(grid, 0..grid.len())),
        Some(n) if n > grid.len() => Err(Error::Config(format!(
            "cannot draw {n} distinct samples from {} cells",
            grid.len()
        ))),
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(grid_samples(grid, sample_indices(&mut rng, grid.len(), n).into_vec()))
        }
    }
}

/// `n` points on the extracted zero level set, uniform by length or area,
/// each paired with the value 0.
pub fn sample_levelset(grid: &SdfGrid, n: usize, seed: u64) -> Result<SampleSet> {
    let points = match grid.dim() {
        2 => {
            let contour = marching_squares(grid, 0.0)?;
            if contour.is_empty() {
                return Err(Error::NoZeroCrossing("grid has no zero crossing"));
            }
            sample_surface(Surface::Contour(&contour), n, seed)?
        }
        _ => {
            let mesh = marching_cubes(grid, 0.0)?;
            if mesh.is_empty() {
                return Err(Error::NoZeroCrossing("grid has no zero crossing"));
            }
            sample_surface(Surface::Mesh(&mesh), n, seed)?
        }
    };
    let d = grid.dim();
    let coords = points.iter().flat_map(|p| p[..d].to_vec()).collect();
    SampleSet::new(d, coords, vec![0.0; n])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    #[default]
    Dense,
    Levelset,
}

impl std::str::FromStr for ContextMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(ContextMode::Dense),
            "levelset" => Ok(ContextMode::Levelset),
            _ => Err(Error::Config(format!("unknown context mode {s:?}"))),
        }
    }
}

/// How tasks are drawn from a shape during training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSampling {
    pub mode: ContextMode,
    pub context_points: usize,
    pub target_points: usize,
}

impl Default for TaskSampling {
    fn default() -> Self {
        TaskSampling::standard(ContextMode::Dense)
    }
}

impl TaskSampling {
    /// 32² dense context points or 512 surface points, 512 targets.
    pub fn standard(mode: ContextMode) -> Self {
        TaskSampling {
            mode,
            context_points: match mode {
                ContextMode::Dense => 1024,
                ContextMode::Levelset => 512,
            },
            target_points: 512,
        }
    }

    pub fn task(&self, shape_id: &str, grid: &SdfGrid, seed: u64) -> Result<Task> {
        make_task(shape_id, grid, self.mode, self.context_points, self.target_points, seed)
    }
}

/// Context observations for adaptation and targets for scoring, for one shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub shape_id: String,
    pub mode: ContextMode,
    pub context: SampleSet,
    pub target: SampleSet,
}

/// Split a grid into context and target samples.
///
/// Dense contexts and targets are disjoint draws from the lattice. Level-set
/// contexts come from the extracted surface; targets are always lattice cells.
pub fn make_task(
    shape_id: &str,
    grid: &SdfGrid,
    mode: ContextMode,
    context_n: usize,
    target_n: usize,
    seed: u64,
) -> Result<Task> {
    if context_n == 0 || target_n == 0 {
        return Err(Error::Config("context and target must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (context, target) = match mode {
        ContextMode::Dense => {
            if context_n + target_n > grid.len() {
                return Err(Error::Config(format!(
                    "{context_n} context + {target_n} target samples exceed {} cells",
                    grid.len()
                )));
            }
            let idx = sample_indices(&mut rng, grid.len(), context_n + target_n).into_vec();
            (
                grid_samples(grid, idx[..context_n].iter().copied()),
                grid_samples(grid, idx[context_n..].iter().copied()),
            )
        }
        ContextMode::Levelset => {
            if target_n > grid.len() {
                return Err(Error::Config(format!(
                    "{target_n} target samples exceed {} cells",
                    grid.len()
                )));
            }
            let context = sample_levelset(grid, context_n, rand::Rng::gen(&mut rng))?;
            let idx = sample_indices(&mut rng, grid.len(), target_n).into_vec();
            (context, grid_samples(grid, idx))
        }
    };
    Ok(Task {
        shape_id: shape_id.to_string(),
        mode,
        context,
        target,
    })
}

#[cfg(test)]
mod tests;
