//! Reverse sweep.
//!
//! Every vector-Jacobian product is itself expressed with graph ops, so the
//! gradients produced here are ordinary nodes and can be differentiated
//! again. Without `create_graph` the backward nodes are dropped after the
//! sweep and the results come back as detached constants.

use super::graph::{Bcast, Graph, Op, Var};
use super::{AdError, Tensor};

/// Result of [`Graph::grad`].
#[derive(Clone, Debug)]
pub struct Grads {
    /// One gradient per requested target, in request order.
    pub vars: Vec<Var>,
    /// Positions of targets the loss does not depend on; their gradient is zero.
    pub disconnected: Vec<usize>,
}

impl Grads {
    pub fn has_disconnected(&self) -> bool {
        !self.disconnected.is_empty()
    }
}

impl Graph {
    /// ∂loss/∂wrt for every target.
    ///
    /// With `create_graph` the returned gradients stay on the tape and carry
    /// their own history, which is what second-order meta-gradients need.
    pub fn grad(&self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<Grads, AdError> {
        let li = self.check(loss)?;
        let wrt_idx: Vec<usize> = wrt
            .iter()
            .map(|&w| self.check(w))
            .collect::<Result<_, _>>()?;
        {
            let nodes = self.nodes.borrow();
            let shape = nodes[li].value.shape();
            if nodes[li].value.numel() != 1 {
                return Err(AdError::NotScalar {
                    shape: shape.to_vec(),
                });
            }
        }
        let start_len = self.len();

        let lo = wrt_idx.iter().copied().min().unwrap_or(li).min(li);
        // Nodes between the earliest target and the loss that depend on a target.
        let mut relevant = vec![false; li + 1 - lo];
        {
            let nodes = self.nodes.borrow();
            for &w in &wrt_idx {
                if w <= li {
                    relevant[w - lo] = true;
                }
            }
            for i in lo..=li {
                if relevant[i - lo] || !nodes[i].requires_grad {
                    continue;
                }
                relevant[i - lo] = nodes[i]
                    .op
                    .inputs()
                    .iter()
                    .any(|&j| j >= lo && relevant[j - lo]);
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; li + 1 - lo];
        if relevant[li - lo] {
            let shape = self.shape(loss)?;
            grads[li - lo] = Some(self.constant(Tensor::full(&shape, 1.0)));
        }

        for i in (lo..=li).rev() {
            let Some(g) = grads[i - lo] else { continue };
            if !relevant[i - lo] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            for (input, contrib) in self.vjp(i, &op, g, |j| j >= lo && relevant[j - lo])? {
                let slot = &mut grads[input - lo];
                *slot = Some(match *slot {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }

        let mut vars = Vec::with_capacity(wrt.len());
        let mut disconnected = Vec::new();
        let mut values = Vec::new();
        for (pos, &w) in wrt_idx.iter().enumerate() {
            let found = if w <= li { grads[w - lo] } else { None };
            match found {
                Some(g) if create_graph => vars.push(g),
                Some(g) => values.push((pos, self.value(g)?)),
                None => {
                    disconnected.push(pos);
                    let shape = self.nodes.borrow()[w].value.shape().to_vec();
                    values.push((pos, Tensor::zeros(&shape)));
                }
            }
        }
        if !disconnected.is_empty() {
            log::debug!(
                "grad: {} of {} targets are not reachable from the loss",
                disconnected.len(),
                wrt.len()
            );
        }
        if create_graph {
            // Disconnected targets still need a zero placeholder in order.
            let mut out = Vec::with_capacity(wrt.len());
            let mut it = vars.into_iter();
            let mut zeros = values.into_iter().peekable();
            for pos in 0..wrt.len() {
                if zeros.peek().map(|z| z.0) == Some(pos) {
                    let (_, t) = zeros.next().expect("peeked");
                    out.push(self.constant(t));
                } else {
                    out.push(it.next().expect("gradient for connected target"));
                }
            }
            return Ok(Grads {
                vars: out,
                disconnected,
            });
        }
        self.truncate(start_len);
        values.sort_by_key(|v| v.0);
        Ok(Grads {
            vars: values.into_iter().map(|(_, t)| self.constant(t)).collect(),
            disconnected,
        })
    }

    /// Convenience wrapper returning gradient values.
    pub fn grad_values(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>, AdError> {
        let g = self.grad(loss, wrt, false)?;
        g.vars.iter().map(|&v| self.value(v)).collect()
    }

    fn mask(&self, src: usize, f: impl Fn(f64) -> f64) -> Var {
        let t = {
            let nodes = self.nodes.borrow();
            let v = &nodes[src].value;
            Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
        };
        self.constant(t)
    }

    fn shape_of(&self, i: usize) -> Vec<usize> {
        self.nodes.borrow()[i].value.shape().to_vec()
    }

    /// Sum a gradient shaped like the broadcast result back to operand shape.
    fn unbroadcast(&self, g: Var, bcast: Bcast, target: usize) -> Result<Var, AdError> {
        let shape = self.shape_of(target);
        match bcast {
            Bcast::None => Ok(g),
            Bcast::Scalar => {
                let s = self.sum(g)?;
                self.reshape(s, &shape)
            }
            Bcast::Row => {
                let s = self.sum_rows(g)?;
                self.reshape(s, &shape)
            }
        }
    }

    fn vjp(
        &self,
        i: usize,
        op: &Op,
        g: Var,
        needs: impl Fn(usize) -> bool,
    ) -> Result<Vec<(usize, Var)>, AdError> {
        let out = self.var(i);
        let mut res = Vec::with_capacity(2);
        // Targets can be views of earlier nodes; nothing flows past them.
        if !op.inputs().iter().any(|&j| needs(j)) {
            return Ok(res);
        }
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.var(a), self.var(b));
                if needs(a) {
                    let da = match (ta, tb) {
                        (false, false) => self.matmul_t(g, vb, false, true)?,
                        (false, true) => self.matmul_t(g, vb, false, false)?,
                        (true, false) => self.matmul_t(vb, g, false, true)?,
                        (true, true) => self.matmul_t(vb, g, true, true)?,
                    };
                    res.push((a, da));
                }
                if needs(b) {
                    let db = match (ta, tb) {
                        (false, false) => self.matmul_t(va, g, true, false)?,
                        (false, true) => self.matmul_t(g, va, true, false)?,
                        (true, false) => self.matmul_t(va, g, false, false)?,
                        (true, true) => self.matmul_t(g, va, true, true)?,
                    };
                    res.push((b, db));
                }
            }
            Op::Add { a, b, bcast } => {
                if needs(a) {
                    res.push((a, g));
                }
                if needs(b) {
                    res.push((b, self.unbroadcast(g, bcast, b)?));
                }
            }
            Op::Sub { a, b, bcast } => {
                if needs(a) {
                    res.push((a, g));
                }
                if needs(b) {
                    let n = self.neg(g)?;
                    res.push((b, self.unbroadcast(n, bcast, b)?));
                }
            }
            Op::Mul { a, b, bcast } => {
                let (va, vb) = (self.var(a), self.var(b));
                if needs(a) {
                    res.push((a, self.mul(g, vb)?));
                }
                if needs(b) {
                    let p = self.mul(g, va)?;
                    res.push((b, self.unbroadcast(p, bcast, b)?));
                }
            }
            Op::Neg(a) => res.push((a, self.neg(g)?)),
            Op::Scale(a, c) => res.push((a, self.scale(g, c)?)),
            Op::Shift(a, _) => res.push((a, g)),
            Op::Relu(a) => {
                let m = self.mask(a, |x| if x > 0.0 { 1.0 } else { 0.0 });
                res.push((a, self.mul(g, m)?));
            }
            Op::Sigmoid(a) => {
                // σ' = σ(1 − σ), built from the output node so it stays differentiable.
                let one_minus = self.shift(self.neg(out)?, 1.0)?;
                let d = self.mul(out, one_minus)?;
                res.push((a, self.mul(g, d)?));
            }
            Op::Exp(a) => res.push((a, self.mul(g, out)?)),
            Op::Log(a) => {
                let r = self.recip(self.var(a))?;
                res.push((a, self.mul(g, r)?));
            }
            Op::Abs(a) => {
                let m = self.mask(a, |x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                res.push((a, self.mul(g, m)?));
            }
            Op::Recip(a) => {
                let sq = self.mul(out, out)?;
                let d = self.mul(g, sq)?;
                res.push((a, self.neg(d)?));
            }
            Op::Clamp { a, lo, hi } => {
                let m = self.mask(a, |x| if x > lo && x < hi { 1.0 } else { 0.0 });
                res.push((a, self.mul(g, m)?));
            }
            Op::Sum(a) => {
                let shape = self.shape_of(a);
                res.push((a, self.expand(g, &shape)?));
            }
            Op::Mean(a) => {
                let shape = self.shape_of(a);
                let n: usize = shape.iter().product();
                let e = self.expand(g, &shape)?;
                res.push((a, self.scale(e, 1.0 / n as f64)?));
            }
            Op::SumRows(a) => {
                let rows = self.shape_of(a)[0];
                res.push((a, self.broadcast_rows(g, rows)?));
            }
            Op::BroadcastRows { a, .. } => {
                let shape = self.shape_of(a);
                let s = self.sum_rows(g)?;
                res.push((a, self.reshape(s, &shape)?));
            }
            Op::Expand(a) => {
                let shape = self.shape_of(a);
                let s = self.sum(g)?;
                res.push((a, self.reshape(s, &shape)?));
            }
            Op::Concat {
                ref parts,
                ref widths,
            } => {
                let mut start = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if needs(p) {
                        res.push((p, self.slice_cols(g, start, w)?));
                    }
                    start += w;
                }
            }
            Op::SliceCols { a, start, .. } => {
                let total = self.shape_of(a)[1];
                res.push((a, self.pad_cols(g, start, total)?));
            }
            Op::PadCols { a, start, .. } => {
                let w = self.shape_of(a)[1];
                res.push((a, self.slice_cols(g, start, w)?));
            }
            Op::SliceRows { a, start, .. } => {
                let total = self.shape_of(a)[0];
                res.push((a, self.pad_rows(g, start, total)?));
            }
            Op::PadRows { a, start, .. } => {
                let m = self.shape_of(a)[0];
                res.push((a, self.slice_rows(g, start, m)?));
            }
            Op::Slice { a, offset } => {
                let shape = self.shape_of(a);
                res.push((a, self.pad_flat(g, offset, &shape)?));
            }
            Op::PadFlat { a, offset } => {
                let shape = self.shape_of(a);
                res.push((a, self.slice(g, offset, &shape)?));
            }
            Op::Reshape(a) => {
                let shape = self.shape_of(a);
                res.push((a, self.reshape(g, &shape)?));
            }
            Op::MaxRows { a, ref argmax } => {
                let rows = self.shape_of(a)[0];
                res.push((a, self.scatter_rows(g, argmax.clone(), rows)?));
            }
            Op::GatherRows { a, ref idx } => {
                let rows = self.shape_of(a)[0];
                res.push((a, self.scatter_rows(g, idx.clone(), rows)?));
            }
            Op::ScatterRows { a, ref idx, .. } => {
                res.push((a, self.gather_rows(g, idx.clone())?));
            }
        }
        Ok(res)
    }
}
