use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels;
use super::{AdError, Tensor};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node recorded on a [`Graph`].
///
/// Handles are only meaningful for the graph that created them; passing one
/// to another graph is reported as [`AdError::ForeignVar`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// How the second operand of a binary elementwise op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    None,
    /// `b` has a single element.
    Scalar,
    /// `a` is `[m, n]`, `b` has `n` elements and is repeated for every row.
    Row,
}

// Some variants keep their output geometry for `Debug` output only.
#[allow(dead_code)]
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize, bcast: Bcast },
    Sub { a: usize, b: usize, bcast: Bcast },
    Mul { a: usize, b: usize, bcast: Bcast },
    Neg(usize),
    Scale(usize, f64),
    Shift(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Recip(usize),
    Clamp { a: usize, lo: f64, hi: f64 },
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    BroadcastRows { a: usize, rows: usize },
    Expand(usize),
    Concat { parts: Vec<usize>, widths: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize },
    PadCols { a: usize, start: usize, total: usize },
    SliceRows { a: usize, start: usize, len: usize },
    PadRows { a: usize, start: usize, total: usize },
    Slice { a: usize, offset: usize },
    PadFlat { a: usize, offset: usize },
    Reshape(usize),
    MaxRows { a: usize, argmax: Rc<Vec<usize>> },
    GatherRows { a: usize, idx: Rc<Vec<usize>> },
    ScatterRows { a: usize, idx: Rc<Vec<usize>>, rows: usize },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            MatMul { a, b, .. } | Add { a, b, .. } | Sub { a, b, .. } | Mul { a, b, .. } => {
                vec![*a, *b]
            }
            Neg(a) | Scale(a, _) | Shift(a, _) | Relu(a) | Sigmoid(a) | Exp(a) | Log(a)
            | Abs(a) | Recip(a) | Sum(a) | Mean(a) | SumRows(a) | Expand(a) | Reshape(a) => {
                vec![*a]
            }
            Clamp { a, .. }
            | BroadcastRows { a, .. }
            | SliceCols { a, .. }
            | PadCols { a, .. }
            | SliceRows { a, .. }
            | PadRows { a, .. }
            | Slice { a, .. }
            | PadFlat { a, .. }
            | MaxRows { a, .. }
            | GatherRows { a, .. }
            | ScatterRows { a, .. } => vec![*a],
            Concat { parts, .. } => parts.clone(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only computation tape.
///
/// Insertion order is a topological order, so the backward sweep simply
/// walks node indices in reverse. Interior mutability lets every builder
/// method take `&self`; a graph is confined to one thread.
pub struct Graph {
    id: u32,
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), AdError> {
    t.dims2().ok_or_else(|| AdError::Rank {
        op,
        expected: 2,
        shape: t.shape().to_vec(),
    })
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn var(&self, index: usize) -> Var {
        Var {
            graph: self.id,
            index: index as u32,
        }
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize, AdError> {
        if v.graph != self.id {
            return Err(AdError::ForeignVar);
        }
        Ok(v.index as usize)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.var(nodes.len() - 1)
    }

    pub(crate) fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        self.var(nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        self.var(nodes.len() - 1)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copy of `v`'s value as a fresh constant leaf.
    pub fn detach(&self, v: Var) -> Result<Var, AdError> {
        let t = self.value(v)?;
        Ok(self.constant(t))
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool, AdError> {
        let i = self.check(v)?;
        Ok(self.nodes.borrow()[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> Result<Tensor, AdError> {
        let i = self.check(v)?;
        Ok(self.nodes.borrow()[i].value.clone())
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>, AdError> {
        let i = self.check(v)?;
        Ok(self.nodes.borrow()[i].value.shape().to_vec())
    }

    pub fn item(&self, v: Var) -> Result<f64, AdError> {
        let i = self.check(v)?;
        let nodes = self.nodes.borrow();
        let t = &nodes[i].value;
        t.item().ok_or_else(|| AdError::NotScalar {
            shape: t.shape().to_vec(),
        })
    }

    /// Run `f` on a borrowed view of `v`'s value.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> Result<R, AdError> {
        let i = self.check(v)?;
        Ok(f(&self.nodes.borrow()[i].value))
    }

    fn unary(
        &self,
        v: Var,
        op: impl FnOnce(usize) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var, AdError> {
        let i = self.check(v)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        };
        Ok(self.push(value, op(i)))
    }

    // ---- linear algebra ----

    /// `op(a) · op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, AdError> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (ta_t, tb_t) = (&nodes[ia].value, &nodes[ib].value);
            let (ar, ac) = dims2("matmul", ta_t)?;
            let (br, bc) = dims2("matmul", tb_t)?;
            let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
            let (k2, n) = if tb { (bc, br) } else { (br, bc) };
            if k != k2 {
                return Err(AdError::Shape {
                    op: "matmul",
                    lhs: ta_t.shape().to_vec(),
                    rhs: tb_t.shape().to_vec(),
                });
            }
            let out = kernels::gemm(ta_t.data(), ar, ac, ta, tb_t.data(), br, bc, tb);
            Tensor::from_parts(vec![m, n], out)
        };
        Ok(self.push(
            value,
            Op::MatMul {
                a: ia,
                b: ib,
                ta,
                tb,
            },
        ))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, AdError> {
        self.matmul_t(a, b, false, false)
    }

    // ---- elementwise binary ----

    fn bcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast, AdError> {
        if a.shape() == b.shape() {
            return Ok(Bcast::None);
        }
        if b.numel() == 1 {
            return Ok(Bcast::Scalar);
        }
        if let Some((_, n)) = a.dims2() {
            let row_like = match b.shape() {
                [bn] => *bn == n,
                [1, bn] => *bn == n,
                _ => false,
            };
            if row_like {
                return Ok(Bcast::Row);
            }
        }
        Err(AdError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: impl FnOnce(usize, usize, Bcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AdError> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let (value, bcast) = {
            let nodes = self.nodes.borrow();
            let (at, bt) = (&nodes[ia].value, &nodes[ib].value);
            let bcast = Self::bcast_kind(name, at, bt)?;
            let ad = at.data();
            let bd = bt.data();
            let data: Vec<f64> = match bcast {
                Bcast::None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
                Bcast::Scalar => {
                    let y = bd[0];
                    ad.iter().map(|&x| f(x, y)).collect()
                }
                Bcast::Row => {
                    let n = bd.len();
                    ad.iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, bd[i % n]))
                        .collect()
                }
            };
            (Tensor::from_parts(at.shape().to_vec(), data), bcast)
        };
        Ok(self.push(value, op(ia, ib, bcast)))
    }

    /// `a + b`; `b` may be a scalar or a row broadcast over `a`'s rows.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary("add", a, b, |a, b, bcast| Op::Add { a, b, bcast }, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary("sub", a, b, |a, b, bcast| Op::Sub { a, b, bcast }, |x, y| x - y)
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary("mul", a, b, |a, b, bcast| Op::Mul { a, b, bcast }, |x, y| x * y)
    }

    // ---- elementwise unary ----

    pub fn neg(&self, a: Var) -> Result<Var, AdError> {
        self.unary(a, Op::Neg, |x| -x)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var, AdError> {
        self.unary(a, |i| Op::Scale(i, c), |x| c * x)
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&self, a: Var, c: f64) -> Result<Var, AdError> {
        self.unary(a, |i| Op::Shift(i, c), |x| x + c)
    }

    pub fn relu(&self, a: Var) -> Result<Var, AdError> {
        self.unary(a, Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var, AdError> {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    pub fn exp(&self, a: Var) -> Result<Var, AdError> {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&self, a: Var) -> Result<Var, AdError> {
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn abs(&self, a: Var) -> Result<Var, AdError> {
        self.unary(a, Op::Abs, f64::abs)
    }

    pub fn recip(&self, a: Var) -> Result<Var, AdError> {
        self.unary(a, Op::Recip, |x| 1.0 / x)
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var, AdError> {
        self.unary(a, |i| Op::Clamp { a: i, lo, hi }, |x| x.clamp(lo, hi))
    }

    // ---- reductions and broadcasts ----

    pub fn sum(&self, a: Var) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let s = {
            let nodes = self.nodes.borrow();
            kernels::sum(nodes[i].value.data())
        };
        Ok(self.push(Tensor::scalar(s), Op::Sum(i)))
    }

    pub fn mean(&self, a: Var) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let s = {
            let nodes = self.nodes.borrow();
            let d = nodes[i].value.data();
            if d.is_empty() {
                return Err(AdError::Empty { op: "mean" });
            }
            kernels::sum(d) / d.len() as f64
        };
        Ok(self.push(Tensor::scalar(s), Op::Mean(i)))
    }

    /// `[m, n] -> [n]`, summing over rows.
    pub fn sum_rows(&self, a: Var) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            let (m, n) = dims2("sum_rows", t)?;
            let d = t.data();
            let mut out = vec![0.0; n];
            for r in 0..m {
                for (o, &x) in out.iter_mut().zip(&d[r * n..(r + 1) * n]) {
                    *o += x;
                }
            }
            Tensor::from_parts(vec![n], out)
        };
        Ok(self.push(value, Op::SumRows(i)))
    }

    /// `[m, n] -> [n]`, averaging over rows.
    pub fn mean_rows(&self, a: Var) -> Result<Var, AdError> {
        let m = self.shape(a)?[0];
        if m == 0 {
            return Err(AdError::Empty { op: "mean_rows" });
        }
        let s = self.sum_rows(a)?;
        self.scale(s, 1.0 / m as f64)
    }

    /// `[n] -> [rows, n]`.
    pub fn broadcast_rows(&self, a: Var, rows: usize) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let d = nodes[i].value.data();
            let n = d.len();
            let mut out = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                out.extend_from_slice(d);
            }
            Tensor::from_parts(vec![rows, n], out)
        };
        Ok(self.push(value, Op::BroadcastRows { a: i, rows }))
    }

    /// Repeat a one-element tensor to `shape`.
    pub fn expand(&self, a: Var, shape: &[usize]) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            let x = t.item().ok_or_else(|| AdError::NotScalar {
                shape: t.shape().to_vec(),
            })?;
            Tensor::full(shape, x)
        };
        Ok(self.push(value, Op::Expand(i)))
    }

    /// Column-wise maximum, `[m, n] -> [n]`. Ties pick the first row.
    pub fn max_rows(&self, a: Var) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            let (m, n) = dims2("max_rows", t)?;
            if m == 0 {
                return Err(AdError::Empty { op: "max_rows" });
            }
            let d = t.data();
            let mut best = d[..n].to_vec();
            let mut arg = vec![0usize; n];
            for r in 1..m {
                for c in 0..n {
                    let x = d[r * n + c];
                    if x > best[c] {
                        best[c] = x;
                        arg[c] = r;
                    }
                }
            }
            (Tensor::from_parts(vec![n], best), arg)
        };
        Ok(self.push(
            value,
            Op::MaxRows {
                a: i,
                argmax: Rc::new(argmax),
            },
        ))
    }

    pub(crate) fn gather_rows(&self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            let (_, n) = dims2("gather_rows", t)?;
            let d = t.data();
            Tensor::from_parts(vec![n], (0..n).map(|c| d[idx[c] * n + c]).collect())
        };
        Ok(self.push(value, Op::GatherRows { a: i, idx }))
    }

    pub(crate) fn scatter_rows(
        &self,
        a: Var,
        idx: Rc<Vec<usize>>,
        rows: usize,
    ) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let d = nodes[i].value.data();
            let n = d.len();
            let mut out = vec![0.0; rows * n];
            for c in 0..n {
                out[idx[c] * n + c] = d[c];
            }
            Tensor::from_parts(vec![rows, n], out)
        };
        Ok(self.push(value, Op::ScatterRows { a: i, idx, rows }))
    }

    // ---- structural ----

    /// Concatenate rank-2 tensors with equal row counts along the last axis.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, AdError> {
        if parts.is_empty() {
            return Err(AdError::Empty { op: "concat" });
        }
        let idx: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_, _>>()?;
        let (value, widths) = {
            let nodes = self.nodes.borrow();
            let mut dims = Vec::with_capacity(idx.len());
            for &i in &idx {
                dims.push(dims2("concat", &nodes[i].value)?);
            }
            let m = dims[0].0;
            for (k, &(r, _)) in dims.iter().enumerate() {
                if r != m {
                    return Err(AdError::Shape {
                        op: "concat",
                        lhs: nodes[idx[0]].value.shape().to_vec(),
                        rhs: nodes[idx[k]].value.shape().to_vec(),
                    });
                }
            }
            let widths: Vec<usize> = dims.iter().map(|d| d.1).collect();
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(m * total);
            for r in 0..m {
                for (&i, &w) in idx.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[i].value.data()[r * w..(r + 1) * w]);
                }
            }
            (Tensor::from_parts(vec![m, total], out), widths)
        };
        Ok(self.push(value, Op::Concat { parts: idx, widths }))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            let (m, n) = dims2("slice_cols", t)?;
            if start + len > n {
                return Err(AdError::Range {
                    op: "slice_cols",
                    start,
                    len,
                    extent: n,
                });
            }
            let d = t.data();
            let mut out = Vec::with_capacity(m * len);
            for r in 0..m {
                out.extend_from_slice(&d[r * n + start..r * n + start + len]);
            }
            Tensor::from_parts(vec![m, len], out)
        };
        Ok(self.push(value, Op::SliceCols { a: i, start, len }))
    }

    pub(crate) fn pad_cols(&self, a: Var, start: usize, total: usize) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            let (m, w) = dims2("pad_cols", t)?;
            let d = t.data();
            let mut out = vec![0.0; m * total];
            for r in 0..m {
                out[r * total + start..r * total + start + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            Tensor::from_parts(vec![m, total], out)
        };
        Ok(self.push(value, Op::PadCols { a: i, start, total }))
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            let (m, n) = dims2("slice_rows", t)?;
            if start + len > m {
                return Err(AdError::Range {
                    op: "slice_rows",
                    start,
                    len,
                    extent: m,
                });
            }
            Tensor::from_parts(vec![len, n], t.data()[start * n..(start + len) * n].to_vec())
        };
        Ok(self.push(value, Op::SliceRows { a: i, start, len }))
    }

    pub(crate) fn pad_rows(&self, a: Var, start: usize, total: usize) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            let (m, n) = dims2("pad_rows", t)?;
            let mut out = vec![0.0; total * n];
            out[start * n..(start + m) * n].copy_from_slice(t.data());
            Tensor::from_parts(vec![total, n], out)
        };
        Ok(self.push(value, Op::PadRows { a: i, start, total }))
    }

    /// Flat elements `offset..offset+numel(shape)` reshaped to `shape`.
    pub fn slice(&self, a: Var, offset: usize, shape: &[usize]) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let len: usize = shape.iter().product();
        let value = {
            let nodes = self.nodes.borrow();
            let d = nodes[i].value.data();
            if offset + len > d.len() {
                return Err(AdError::Range {
                    op: "slice",
                    start: offset,
                    len,
                    extent: d.len(),
                });
            }
            Tensor::from_parts(shape.to_vec(), d[offset..offset + len].to_vec())
        };
        Ok(self.push(value, Op::Slice { a: i, offset }))
    }

    pub(crate) fn pad_flat(&self, a: Var, offset: usize, shape: &[usize]) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let d = nodes[i].value.data();
            let mut out = Tensor::zeros(shape);
            out.data_mut()[offset..offset + d.len()].copy_from_slice(d);
            out
        };
        Ok(self.push(value, Op::PadFlat { a: i, offset }))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, AdError> {
        let i = self.check(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            if t.numel() != shape.iter().product::<usize>() {
                return Err(AdError::Shape {
                    op: "reshape",
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            Tensor::from_parts(shape.to_vec(), t.data().to_vec())
        };
        Ok(self.push(value, Op::Reshape(i)))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
