use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere { radius: f64 },
    /// Axis-aligned box with the given half extents.
    Box { half: [f64; 3] },
    /// Torus around the local y axis.
    Torus { major: f64, minor: f64 },
}

/// `p_world = R · p_local + translation`, with `R` from XYZ Euler angles (radians).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub euler: [f64; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn translate(t: [f64; 3]) -> Self {
        RigidTransform {
            euler: [0.0; 3],
            translation: t,
        }
    }

    fn matrix(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.euler;
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
        matmul3(&rz, &matmul3(&ry, &rx))
    }

    /// Map a world point into the local frame.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.matrix();
        let d = [0, 1, 2].map(|k| p[k] - self.translation[k]);
        // Rᵀ · d
        [0, 1, 2].map(|j| (0..3).map(|i| r[i][j] * d[i]).sum())
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Analytic 3D shape: a transformed primitive or a min/max combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum ShapeSpec3D {
    Primitive {
        primitive: Primitive,
        #[serde(default)]
        transform: RigidTransform,
    },
    Union { children: Vec<ShapeSpec3D> },
    Intersection { children: Vec<ShapeSpec3D> },
}

pub const MAX_CSG_DEPTH: usize = 3;

impl ShapeSpec3D {
    pub fn primitive(primitive: Primitive, transform: RigidTransform) -> Self {
        ShapeSpec3D::Primitive { primitive, transform }
    }

    pub fn depth(&self) -> usize {
        match self {
            ShapeSpec3D::Primitive { .. } => 0,
            ShapeSpec3D::Union { children } | ShapeSpec3D::Intersection { children } => {
                1 + children.iter().map(|c| c.depth()).max().unwrap_or(0)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth() > MAX_CSG_DEPTH {
            return Err(Error::Config(format!(
                "CSG depth {} exceeds {MAX_CSG_DEPTH}",
                self.depth()
            )));
        }
        self.validate_nodes()
    }

    fn validate_nodes(&self) -> Result<()> {
        match self {
            ShapeSpec3D::Primitive { primitive, .. } => {
                let ok = match *primitive {
                    Primitive::Sphere { radius } => radius > 0.0,
                    Primitive::Box { half } => half.iter().all(|&h| h > 0.0),
                    Primitive::Torus { major, minor } => major > 0.0 && minor > 0.0,
                };
                if ok {
                    Ok(())
                } else {
                    Err(Error::Config(format!("non-positive size in {primitive:?}")))
                }
            }
            ShapeSpec3D::Union { children } | ShapeSpec3D::Intersection { children } => {
                if children.is_empty() {
                    return Err(Error::Config("CSG node without children".into()));
                }
                children.iter().try_for_each(|c| c.validate_nodes())
            }
        }
    }

    /// Signed distance at one point.
    ///
    /// Exact for primitives. Union and intersection take the min and max of
    /// their children, which bounds the true distance from below and is exact
    /// wherever the nearest surface point belongs to the selected child.
    pub fn eval(&self, p: [f64; 3]) -> f64 {
        match self {
            ShapeSpec3D::Primitive { primitive, transform } => {
                primitive_sdf(primitive, transform.to_local(p))
            }
            ShapeSpec3D::Union { children } => children
                .iter()
                .map(|c| c.eval(p))
                .fold(f64::INFINITY, f64::min),
            ShapeSpec3D::Intersection { children } => children
                .iter()
                .map(|c| c.eval(p))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

fn primitive_sdf(prim: &Primitive, p: [f64; 3]) -> f64 {
    let len = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    match *prim {
        Primitive::Sphere { radius } => len(p) - radius,
        Primitive::Box { half } => {
            let q = [0, 1, 2].map(|k| p[k].abs() - half[k]);
            let outside = len(q.map(|v| v.max(0.0)));
            let inside = q[0].max(q[1]).max(q[2]).min(0.0);
            outside + inside
        }
        Primitive::Torus { major, minor } => {
            let ring = (p[0] * p[0] + p[2] * p[2]).sqrt() - major;
            (ring * ring + p[1] * p[1]).sqrt() - minor
        }
    }
}

/// Signed distances for a flat `[n · 3]` coordinate buffer.
pub fn analytic_sdf(spec: &ShapeSpec3D, coords: &[f64]) -> Vec<f64> {
    coords
        .chunks(3)
        .map(|c| spec.eval([c[0], c[1], c[2]]))
        .collect()
}
