use super::Point3;
use crate::error::{Error, Result};

fn sq(a: &Point3, b: &Point3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check(a: &[Point3], b: &[Point3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer point set"));
    }
    Ok(())
}

/// Squared distance from every point of `a` to its nearest point of `b`.
fn nearest_brute(a: &[Point3], b: &[Point3]) -> Vec<f64> {
    a.iter()
        .map(|p| b.iter().map(|q| sq(p, q)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Symmetric Chamfer distance by exhaustive search.
pub fn chamfer_brute_force(a: &[Point3], b: &[Point3]) -> Result<f64> {
    check(a, b)?;
    Ok(mean(&nearest_brute(a, b)) + mean(&nearest_brute(b, a)))
}

/// Uniform bucket grid over a point set.
struct Buckets<'a> {
    points: &'a [Point3],
    lo: Point3,
    cell: f64,
    n: [usize; 3],
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> Buckets<'a> {
    fn new(points: &'a [Point3]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let ext: Vec<f64> = (0..3).map(|k| hi[k] - lo[k]).collect();
        let span = ext.iter().cloned().fold(0.0, f64::max).max(1e-12);
        // About two points per occupied cell along the dominant extents.
        let per_axis = (points.len() as f64 / 2.0).cbrt().max(1.0);
        let cell = span / per_axis;
        let n = [0, 1, 2].map(|k| ((ext[k] / cell).floor() as usize + 1).min(1 << 10));
        let mut counts = vec![0usize; n[0] * n[1] * n[2] + 1];
        let keys: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = Self::coord(p, &lo, cell, &n);
                (c[2] * n[1] + c[1]) * n[0] + c[0]
            })
            .collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        Buckets {
            points,
            lo,
            cell,
            n,
            start: counts,
            order,
        }
    }

    fn coord(p: &Point3, lo: &Point3, cell: f64, n: &[usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|k| {
            let c = ((p[k] - lo[k]) / cell).floor();
            (c.max(0.0) as usize).min(n[k] - 1)
        })
    }

    /// Exact nearest squared distance, searching shells of cells outward.
    fn nearest(&self, p: &Point3) -> f64 {
        let c = Self::coord(p, &self.lo, self.cell, &self.n);
        let max_r = *self.n.iter().max().expect("3 axes");
        let mut best = f64::INFINITY;
        for r in 0..=max_r {
            // Any point in shell r or beyond is at least (r - 1)·cell from p,
            // because p may sit anywhere inside its own (possibly clamped) cell.
            let gap = ((r as f64 - 1.0).max(0.0)) * self.cell;
            if best <= gap * gap && r > 1 {
                break;
            }
            self.visit_shell(c, r, |i| best = best.min(sq(p, &self.points[i])));
        }
        best
    }

    fn visit_shell(&self, c: [usize; 3], r: usize, mut f: impl FnMut(usize)) {
        let r = r as isize;
        let range = |k: usize| {
            let lo = (c[k] as isize - r).max(0);
            let hi = (c[k] as isize + r).min(self.n[k] as isize - 1);
            lo..=hi
        };
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    let on_shell = (x - c[0] as isize).abs() == r
                        || (y - c[1] as isize).abs() == r
                        || (z - c[2] as isize).abs() == r;
                    if !on_shell {
                        continue;
                    }
                    let key = (z as usize * self.n[1] + y as usize) * self.n[0] + x as usize;
                    for &i in &self.order[self.start[key]..self.start[key + 1]] {
                        f(i);
                    }
                }
            }
        }
    }
}

/// The two directed terms `(mean_a min_b |a−b|², mean_b min_a |a−b|²)`.
pub fn chamfer_terms(a: &[Point3], b: &[Point3]) -> Result<(f64, f64)> {
    check(a, b)?;
    let (ga, gb) = (Buckets::new(a), Buckets::new(b));
    let ab: Vec<f64> = a.iter().map(|p| gb.nearest(p)).collect();
    let ba: Vec<f64> = b.iter().map(|p| ga.nearest(p)).collect();
    Ok((mean(&ab), mean(&ba)))
}

/// Symmetric Chamfer distance with squared distances and mean aggregation.
pub fn chamfer(a: &[Point3], b: &[Point3]) -> Result<f64> {
    let (ab, ba) = chamfer_terms(a, b)?;
    Ok(ab + ba)
}
