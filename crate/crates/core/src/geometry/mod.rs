//! Zero-level-set extraction, surface sampling and Chamfer distance.
//!
//! Extraction treats grid values as samples at cell centers and marches over
//! the cells of the dual lattice, so crossings lie on segments joining
//! neighboring centers. A lattice point counts as inside when its value is
//! below the iso level.

mod chamfer;
mod tables;

pub use chamfer::{chamfer, chamfer_brute_force, chamfer_terms};

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::combine_outputs;
use crate::sdfdata::SdfGrid;
use tables::{CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE};

pub type Point2 = [f64; 2];
pub type Point3 = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Point2>,
    /// Closed loops repeat their first point at the end.
    pub closed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub polylines: Vec<Polyline>,
}

impl Contour {
    pub fn is_empty(&self) -> bool {
        self.polylines.is_empty()
    }

    pub fn vertex_count(&self) -> usize {
        self.polylines.iter().map(|p| p.points.len()).sum()
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        self.polylines
            .iter()
            .flat_map(|p| p.points.windows(2).map(|w| (w[0], w[1])))
    }

    pub fn length(&self) -> f64 {
        self.segments().map(|(a, b)| dist2(a, b)).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("contour serializes")
    }

    /// SVG drawing of the contour over the `[-1, 1]²` domain.
    pub fn to_svg(&self, size_px: u32) -> String {
        let s = size_px as f64 / 2.0;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size_px}" height="{size_px}" viewBox="0 0 {size_px} {size_px}">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        for p in &self.polylines {
            let pts: Vec<String> = p
                .points
                .iter()
                .map(|q| format!("{:.3},{:.3}", (q[0] + 1.0) * s, (q[1] + 1.0) * s))
                .collect();
            let tag = if p.closed { "polygon" } else { "polyline" };
            let _ = writeln!(
                out,
                r#"<{tag} points="{}" fill="none" stroke="black" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

fn dist2(a: Point2, b: Point2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
}

fn sub3(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Unnormalized normal; its length is twice the triangle area.
    pub fn face_normal(&self, t: usize) -> Point3 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        cross(sub3(b, a), sub3(c, a))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * norm3(self.face_normal(t))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// `V − E + F` counting only vertices used by some triangle.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                used[t[k]] = true;
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - edges.len() as i64 + self.triangles.len() as i64
    }

    /// Groups of triangles connected through shared vertices.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for t in &self.triangles {
            for k in 1..3 {
                let (a, b) = (find(&mut parent, t[0]), find(&mut parent, t[k]));
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, t) in self.triangles.iter().enumerate() {
            groups.entry(find(&mut parent, t[0])).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.sort();
        out
    }

    /// Sub-mesh made of the given triangles.
    pub fn select(&self, triangles: &[usize]) -> Mesh {
        let mut remap = HashMap::new();
        let mut mesh = Mesh::default();
        for &t in triangles {
            let tri = self.triangles[t].map(|i| {
                *remap.entry(i).or_insert_with(|| {
                    mesh.vertices.push(self.vertices[i]);
                    mesh.vertices.len() - 1
                })
            });
            mesh.triangles.push(tri);
        }
        mesh
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::with_capacity(32 * (self.vertices.len() + self.triangles.len()));
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        out
    }
}

fn lerp_t(iso: f64, a: f64, b: f64) -> f64 {
    if a == b {
        0.5
    } else {
        ((iso - a) / (b - a)).clamp(0.0, 1.0)
    }
}

/// Iso-contour of a 2D grid with saddles resolved by the cell-center average.
pub fn marching_squares(grid: &SdfGrid, iso: f64) -> Result<Contour> {
    let &[h, w] = grid.dims() else {
        return Err(Error::Config(format!("marching squares needs a 2D grid, got {:?}", grid.dims())));
    };
    let v = grid.values();
    let at = |r: usize, c: usize| v[r * w + c];
    let center = |r: usize, c: usize| grid.cell_center(&[r, c]);
    // Crossing ids: 2·(r·w + c) for the edge to the right, +1 for the edge below.
    let mut points: HashMap<usize, Point2> = HashMap::new();
    let mut crossing = |id: usize| -> usize {
        points.entry(id).or_insert_with(|| {
            let (lin, down) = (id / 2, id % 2 == 1);
            let (r, c) = (lin / w, lin % w);
            let (r2, c2) = if down { (r + 1, c) } else { (r, c + 1) };
            let t = lerp_t(iso, at(r, c), at(r2, c2));
            let (p, q) = (center(r, c), center(r2, c2));
            [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
        });
        id
    };
    let mut segments: Vec<(usize, usize)> = Vec::new();
    for r in 0..h.saturating_sub(1) {
        for c in 0..w.saturating_sub(1) {
            let corners = [at(r, c), at(r, c + 1), at(r + 1, c + 1), at(r + 1, c)];
            let inside = corners.map(|x| x < iso);
            let case = inside
                .iter()
                .enumerate()
                .fold(0u8, |m, (i, &b)| m | ((b as u8) << i));
            if case == 0 || case == 15 {
                continue;
            }
            // Edges: top, right, bottom, left.
            let edge = [
                2 * (r * w + c),
                2 * (r * w + c + 1) + 1,
                2 * ((r + 1) * w + c),
                2 * (r * w + c) + 1,
            ];
            let crosses: Vec<usize> = (0..4).filter(|&e| inside[e] != inside[(e + 1) % 4]).collect();
            if crosses.len() == 2 {
                segments.push((crossing(edge[crosses[0]]), crossing(edge[crosses[1]])));
                continue;
            }
            // Saddle: cut off the two corners whose state differs from the center.
            let mid = corners.iter().sum::<f64>() / 4.0 < iso;
            for k in 0..4 {
                if inside[k] != mid {
                    // Corner k touches the edge before it and the edge starting at it.
                    let before = (k + 3) % 4;
                    segments.push((crossing(edge[before]), crossing(edge[k])));
                }
            }
        }
    }
    Ok(chain_segments(&segments, &points))
}

fn chain_segments(segments: &[(usize, usize)], points: &HashMap<usize, Point2>) -> Contour {
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &(a, b)) in segments.iter().enumerate() {
        adj.entry(a).or_default().push(i);
        adj.entry(b).or_default().push(i);
    }
    let mut used = vec![false; segments.len()];
    let other = |s: usize, p: usize| if segments[s].0 == p { segments[s].1 } else { segments[s].0 };
    let next_free = |used: &[bool], p: usize| adj[&p].iter().copied().find(|&s| !used[s]);
    let mut polylines = Vec::new();
    // Open chains start at endpoints of degree one; loops are handled afterwards.
    let mut starts: Vec<usize> = adj.iter().filter(|(_, s)| s.len() == 1).map(|(&p, _)| p).collect();
    starts.sort_unstable();
    let loop_starts: Vec<usize> = segments.iter().map(|s| s.0).collect();
    for (pass, list) in [starts, loop_starts].into_iter().enumerate() {
        for start in list {
            let Some(first) = next_free(&used, start) else { continue };
            let mut ids = vec![start];
            let mut cur = start;
            let mut seg = Some(first);
            while let Some(s) = seg {
                used[s] = true;
                cur = other(s, cur);
                ids.push(cur);
                if cur == start {
                    break;
                }
                seg = next_free(&used, cur);
            }
            let closed = pass == 1 && cur == start;
            polylines.push(Polyline {
                points: ids.iter().map(|id| points[id]).collect(),
                closed,
            });
        }
    }
    Contour { polylines }
}

/// Iso-surface of a 3D grid with vertices shared along lattice edges.
///
/// Triangles are wound so their normals point toward increasing values.
pub fn marching_cubes(grid: &SdfGrid, iso: f64) -> Result<Mesh> {
    let &[d, h, w] = grid.dims() else {
        return Err(Error::Config(format!("marching cubes needs a 3D grid, got {:?}", grid.dims())));
    };
    let v = grid.values();
    let lin = |x: usize, y: usize, z: usize| (z * h + y) * w + x;
    let mut mesh = Mesh::default();
    let mut vertex_of: HashMap<usize, usize> = HashMap::new();
    for z in 0..d.saturating_sub(1) {
        for y in 0..h.saturating_sub(1) {
            for x in 0..w.saturating_sub(1) {
                let corner = |c: usize| {
                    let o = CORNER_OFFSETS[c];
                    (x + o[0], y + o[1], z + o[2])
                };
                let mut case = 0usize;
                for c in 0..8 {
                    let (cx, cy, cz) = corner(c);
                    if v[lin(cx, cy, cz)] < iso {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut edge_vertex = [usize::MAX; 12];
                for (e, &(ca, cb)) in EDGE_CORNERS.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    // Canonical direction: from the lower lattice point along one axis.
                    let (mut a, mut b) = (corner(ca), corner(cb));
                    if (b.0, b.1, b.2) < (a.0, a.1, a.2) {
                        std::mem::swap(&mut a, &mut b);
                    }
                    let axis = if a.0 != b.0 { 0 } else if a.1 != b.1 { 1 } else { 2 };
                    let id = lin(a.0, a.1, a.2) * 3 + axis;
                    edge_vertex[e] = *vertex_of.entry(id).or_insert_with(|| {
                        let (va, vb) = (v[lin(a.0, a.1, a.2)], v[lin(b.0, b.1, b.2)]);
                        let t = lerp_t(iso, va, vb);
                        let pa = grid.cell_center(&[a.2, a.1, a.0]);
                        let pb = grid.cell_center(&[b.2, b.1, b.0]);
                        mesh.vertices.push([
                            pa[0] + t * (pb[0] - pa[0]),
                            pa[1] + t * (pb[1] - pa[1]),
                            pa[2] + t * (pb[2] - pa[2]),
                        ]);
                        mesh.vertices.len() - 1
                    });
                }
                for tri in TRI_TABLE[case].chunks(3).take_while(|t| t[0] != 255) {
                    let [a, b, c] = [tri[0], tri[1], tri[2]].map(|e| edge_vertex[e as usize]);
                    if a == b || b == c || a == c {
                        continue;
                    }
                    let t = [a, b, c];
                    let n = {
                        let [p, q, r] = t.map(|i| mesh.vertices[i]);
                        norm3(cross(sub3(q, p), sub3(r, p)))
                    };
                    if 0.5 * n > 1e-12 {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

/// Uniform samples on a contour (by length) or mesh (by area).
pub enum Surface<'a> {
    Contour(&'a Contour),
    Mesh(&'a Mesh),
}

/// `n` points drawn uniformly from the geometry; 2D points get `z = 0`.
pub fn sample_surface(shape: Surface<'_>, n: usize, seed: u64) -> Result<Vec<Point3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match shape {
        Surface::Contour(c) => {
            let segs: Vec<(Point2, Point2)> = c.segments().collect();
            let weights: Vec<f64> = segs.iter().map(|&(a, b)| dist2(a, b)).collect();
            let pick = Picker::new(&weights).ok_or(Error::Empty("contour"))?;
            Ok((0..n)
                .map(|_| {
                    let (a, b) = segs[pick.draw(&mut rng)];
                    let t: f64 = rng.gen();
                    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), 0.0]
                })
                .collect())
        }
        Surface::Mesh(m) => {
            let weights: Vec<f64> = (0..m.triangles.len()).map(|t| m.triangle_area(t)).collect();
            let pick = Picker::new(&weights).ok_or(Error::Empty("mesh"))?;
            Ok((0..n)
                .map(|_| {
                    let [a, b, c] = m.triangles[pick.draw(&mut rng)].map(|i| m.vertices[i]);
                    let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
                    let s = r1.sqrt();
                    let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
                    [0, 1, 2].map(|k| wa * a[k] + wb * b[k] + wc * c[k])
                })
                .collect())
        }
    }
}

/// Inverse-CDF sampling over nonnegative weights.
struct Picker {
    cdf: Vec<f64>,
}

impl Picker {
    fn new(weights: &[f64]) -> Option<Self> {
        let mut acc = 0.0;
        let cdf: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        (acc > 0.0).then_some(Picker { cdf })
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cdf.last().expect("nonempty");
        let u = rng.gen::<f64>() * total;
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

/// Rows evaluated per predictor call in [`grid_eval`].
pub const GRID_EVAL_BATCH: usize = 4096;

/// Evaluate a predictor at every cell center of a `resolution^dim` lattice.
///
/// `predict` maps `[n, dim]` coordinates to `[n, 1]` distances or `[n, 2]`
/// (distance, sign logit) pairs; the latter are merged with
/// [`combine_outputs`].
pub fn grid_eval<F>(predict: F, dim: usize, resolution: usize) -> Result<SdfGrid>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    use rayon::prelude::*;
    if !(dim == 2 || dim == 3) || resolution == 0 {
        return Err(Error::Config(format!("cannot evaluate a {dim}D grid at resolution {resolution}")));
    }
    let dims = vec![resolution; dim];
    let template = SdfGrid::new(dims.clone(), vec![0.0; resolution.pow(dim as u32)])?;
    let coords = template.all_coords();
    let total = coords.len() / dim;
    let chunks: Vec<Vec<f64>> = coords
        .par_chunks(GRID_EVAL_BATCH * dim)
        .map(|chunk| {
            let n = chunk.len() / dim;
            let out = predict(&Tensor::matrix(n, dim, chunk.to_vec())?)?;
            match out.shape() {
                [m, 1] if *m == n => Ok(out.into_data()),
                [m, 2] if *m == n => Ok(out
                    .data()
                    .chunks(2)
                    .map(|p| combine_outputs(p[0], p[1]))
                    .collect()),
                other => Err(Error::Config(format!("predictor returned shape {other:?} for {n} points"))),
            }
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = chunks.concat();
    debug_assert_eq!(values.len(), total);
    let bad: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        let shown: Vec<String> = bad.iter().take(5).map(|i| i.to_string()).collect();
        return Err(Error::Format {
            path: "grid_eval".into(),
            msg: format!("{} non-finite predictions, first at cells {}", bad.len(), shown.join(", ")),
        });
    }
    SdfGrid::new(dims, values)
}
