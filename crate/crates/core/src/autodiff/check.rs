//! Finite-difference gradient checking.

use super::{AdError, Graph, Tensor, Var};

/// Outcome of [`check_gradient`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst relative error over the coordinates that were compared.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Coordinates whose stencil straddles a non-differentiable point.
    pub kinks: Vec<usize>,
    /// Number of coordinates compared.
    pub checked: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Multiple of `ε·|f|/h` treated as central-difference rounding noise.
const ROUNDOFF_FACTOR: f64 = 8.0;

fn eval<F>(f: &F, x: &[f64]) -> Result<f64, AdError>
where
    F: Fn(&Graph, Var) -> Result<Var, AdError>,
{
    let g = Graph::new();
    // A differentiable leaf, so objectives that take inner gradients work.
    let p = g.param(Tensor::vector(x.to_vec()));
    let out = f(&g, p)?;
    let v = g.item(out)?;
    if !v.is_finite() {
        return Err(AdError::NonFinite { what: "objective" });
    }
    Ok(v)
}

/// Compare the reverse-mode gradient of `f` against central differences.
///
/// `f` builds a scalar on the supplied graph from a flat parameter vector.
/// A coordinate is reported as a kink, and left out of the comparison, when
/// the fourth difference of `f` at step `h` or `h/2` is larger than roundoff
/// explains; the two scales have disjoint blind spots, so any kink within `h`
/// of the sample shows up in at least one of them.
///
/// The relative error of a coordinate is its absolute discrepancy minus the
/// rounding noise of the difference quotient, divided by
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradient<F>(f: F, params: &[f64], h: f64) -> Result<GradCheck, AdError>
where
    F: Fn(&Graph, Var) -> Result<Var, AdError>,
{
    if !(h > 0.0) {
        return Err(AdError::InvalidArgument("finite-difference step must be positive"));
    }
    let analytic = {
        let g = Graph::new();
        let p = g.param(Tensor::vector(params.to_vec()));
        let out = f(&g, p)?;
        let v = g.item(out)?;
        if !v.is_finite() {
            return Err(AdError::NonFinite { what: "objective" });
        }
        g.grad_values(out, &[p])?.remove(0).into_data()
    };
    let f0 = eval(&f, params)?;
    let tol = 1e-13 * f0.abs().max(1.0);

    let mut x = params.to_vec();
    let mut numeric = vec![0.0; params.len()];
    let mut kinks = Vec::new();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for j in 0..params.len() {
        let x0 = x[j];
        let mut at = |t: f64| -> Result<f64, AdError> {
            x[j] = x0 + t;
            let v = eval(&f, &x);
            x[j] = x0;
            v
        };
        let (m1, m2, m4) = (at(-h)?, at(-h / 2.0)?, at(-h / 4.0)?);
        let (p4, p2, p1) = (at(h / 4.0)?, at(h / 2.0)?, at(h)?);
        let coarse = m1 - 4.0 * m2 + 6.0 * f0 - 4.0 * p2 + p1;
        let fine = m2 - 4.0 * m4 + 6.0 * f0 - 4.0 * p4 + p2;
        numeric[j] = (p1 - m1) / (2.0 * h);
        if coarse.abs() > tol || fine.abs() > tol {
            kinks.push(j);
            continue;
        }
        checked += 1;
        // Rounding in the two evaluations bounds how well the difference can resolve.
        let noise = ROUNDOFF_FACTOR * f64::EPSILON * p1.abs().max(m1.abs()) / h;
        let denom = analytic[j].abs().max(numeric[j].abs()).max(REL_ERROR_FLOOR);
        let rel = ((analytic[j] - numeric[j]).abs() - noise).max(0.0) / denom;
        if rel > max_rel || worst.is_none() {
            max_rel = max_rel.max(rel);
            worst = Some(j);
        }
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        worst_index: worst,
        kinks,
        checked,
        analytic,
        numeric,
    })
}
