//! Gradient-based meta-learning of signed distance functions.
//!
//! A [`MetaModel`] holds an initialization θ for Φ and elementwise inner
//! learning rates α. Specializing to a shape takes `k` steps
//! `φ ← φ − α ⊙ ∇φ L_context` from `φ = θ`; training differentiates the target
//! loss at the final φ through all of those steps and updates θ, α and the
//! composite-loss log-variances with one Adam.

mod trainer;

pub use trainer::{
    mean_task_error, train_meta, validation_tasks, EpochSummary, MetaTrainConfig, MetaTrainer,
    BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE,
};

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{loss, mean_abs_error, predicted_sdf, CompositeLossState, LossKind, LossTerms};
use crate::nets::{init_mlp, mlp_eval, mlp_forward, MlpConfig, ParameterVector};
use crate::optim::Adam;
use crate::sdfdata::{SampleSet, Task};

pub const CHECKPOINT_MODE: &str = "metasdf";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub net: MlpConfig,
    /// Inner-loop update steps.
    pub k: usize,
    /// Outer Adam learning rate.
    pub beta: f64,
    pub alpha_init: f64,
    /// One α per inner step instead of one shared across steps.
    #[serde(default)]
    pub per_step_alpha: bool,
    /// Treat inner gradients as constants in the outer backward pass.
    #[serde(default)]
    pub first_order: bool,
    pub inner_loss: LossKind,
    pub outer_loss: LossKind,
    pub batch_tasks: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig::planar()
    }
}

impl MetaConfig {
    /// Defaults for 2D shapes.
    pub fn planar() -> Self {
        MetaConfig {
            net: MlpConfig::default(),
            k: 5,
            beta: 1e-4,
            alpha_init: 1e-1,
            per_step_alpha: false,
            first_order: false,
            inner_loss: LossKind::L1,
            outer_loss: LossKind::L1,
            batch_tasks: 32,
        }
    }

    /// Defaults for 3D shapes: two-headed Φ, composite loss, per-step α.
    pub fn volumetric() -> Self {
        MetaConfig {
            net: MlpConfig::new(3, 256, 4, 2),
            alpha_init: 5e-3,
            per_step_alpha: true,
            inner_loss: LossKind::Composite,
            outer_loss: LossKind::Composite,
            ..MetaConfig::planar()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.beta > 0.0) || !(self.alpha_init > 0.0) || !self.alpha_init.is_finite() {
            return Err(Error::Config(format!(
                "learning rates must be positive: beta {}, alpha_init {}",
                self.beta, self.alpha_init
            )));
        }
        if self.batch_tasks == 0 {
            return Err(Error::Config("batch_tasks must be at least 1".into()));
        }
        for kind in [self.inner_loss, self.outer_loss] {
            if kind.out_dim() != self.net.out_dim {
                return Err(Error::Config(format!(
                    "{kind:?} loss needs {} network outputs, net has {}",
                    kind.out_dim(),
                    self.net.out_dim
                )));
            }
        }
        Ok(())
    }

    fn alpha_sets(&self) -> usize {
        if self.per_step_alpha {
            self.k
        } else {
            1
        }
    }
}

/// Meta-initialization θ, inner rates α and composite-loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaModel {
    pub config: MetaConfig,
    pub theta: ParameterVector,
    /// One vector shared by all steps, or one per step.
    pub alpha: Vec<ParameterVector>,
    pub log_vars: CompositeLossState,
}

impl MetaModel {
    pub fn new(config: MetaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let theta = init_mlp(&config.net, seed)?;
        let alpha = (0..config.alpha_sets())
            .map(|_| ParameterVector::filled(theta.layout().clone(), config.alpha_init))
            .collect();
        Ok(MetaModel {
            config,
            theta,
            alpha,
            log_vars: CompositeLossState::default(),
        })
    }

    pub fn from_parts(
        config: MetaConfig,
        theta: ParameterVector,
        alpha: Vec<ParameterVector>,
        log_vars: CompositeLossState,
    ) -> Result<Self> {
        let m = MetaModel {
            config,
            theta,
            alpha,
            log_vars,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if *self.theta.layout() != self.config.net.layout() {
            return Err(Error::Config("theta layout does not match the network".into()));
        }
        if self.alpha.len() != self.config.alpha_sets() {
            return Err(Error::Mismatch {
                what: "alpha vector count",
                expected: self.config.alpha_sets(),
                got: self.alpha.len(),
            });
        }
        if self.alpha.iter().any(|a| a.layout() != self.theta.layout()) {
            return Err(Error::Config("alpha layout differs from theta".into()));
        }
        Ok(())
    }

    pub fn alpha_at(&self, step: usize) -> &ParameterVector {
        if self.config.per_step_alpha {
            &self.alpha[step]
        } else {
            &self.alpha[0]
        }
    }

    /// Length of [`MetaModel::to_flat`].
    pub fn flat_len(&self) -> usize {
        self.theta.len() * (1 + self.alpha.len()) + 2
    }

    /// `[θ, α…, log_var_sdf, log_var_sign]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.flat_len());
        v.extend_from_slice(self.theta.data());
        for a in &self.alpha {
            v.extend_from_slice(a.data());
        }
        v.push(self.log_vars.log_var_sdf);
        v.push(self.log_vars.log_var_sign);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::Mismatch {
                what: "flat meta-parameter length",
                expected: self.flat_len(),
                got: flat.len(),
            });
        }
        let n = self.theta.len();
        self.theta.data_mut().copy_from_slice(&flat[..n]);
        for (j, a) in self.alpha.iter_mut().enumerate() {
            a.data_mut().copy_from_slice(&flat[n * (j + 1)..n * (j + 2)]);
        }
        let tail = &flat[flat.len() - 2..];
        self.log_vars = CompositeLossState {
            log_var_sdf: tail[0],
            log_var_sign: tail[1],
        };
        Ok(())
    }

    /// Signed distances of Φ with parameters `params` at `coords`.
    pub fn predict(&self, params: &ParameterVector, coords: &Tensor) -> Result<Vec<f64>> {
        predicted_sdf(&mlp_eval(&self.config.net, params, coords)?)
    }

    pub fn to_checkpoint(&self, provenance: serde_json::Value) -> Checkpoint {
        let mut c = Checkpoint::new(CHECKPOINT_MODE, provenance);
        c.header.extra = serde_json::json!({ "model": self.config });
        self.push_buffers(&mut c);
        c
    }

    pub(crate) fn push_buffers(&self, c: &mut Checkpoint) {
        c.push("theta", self.theta.data().to_vec());
        for (j, a) in self.alpha.iter().enumerate() {
            c.push(format!("alpha{j}"), a.data().to_vec());
        }
        c.push("log_vars", vec![self.log_vars.log_var_sdf, self.log_vars.log_var_sign]);
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.header.mode != CHECKPOINT_MODE {
            return Err(Error::Config(format!(
                "checkpoint holds a {} model, not {CHECKPOINT_MODE}",
                c.header.mode
            )));
        }
        let config: MetaConfig = serde_json::from_value(c.header.extra["model"].clone())
            .map_err(|e| Error::Config(format!("checkpoint model config: {e}")))?;
        config.validate()?;
        let layout = config.net.layout();
        let theta = ParameterVector::new(layout.clone(), c.require("theta")?.to_vec())?;
        let alpha = (0..config.alpha_sets())
            .map(|j| ParameterVector::new(layout.clone(), c.require(&format!("alpha{j}"))?.to_vec()))
            .collect::<Result<_>>()?;
        let lv = c.require("log_vars")?;
        if lv.len() != 2 {
            return Err(Error::Mismatch {
                what: "log-variance count",
                expected: 2,
                got: lv.len(),
            });
        }
        MetaModel::from_parts(
            config,
            theta,
            alpha,
            CompositeLossState {
                log_var_sdf: lv[0],
                log_var_sign: lv[1],
            },
        )
    }
}

/// Result of [`inner_adapt`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adaptation {
    /// Final specialized parameters φᵏ.
    pub params: ParameterVector,
    /// φ⁰ = θ through φᵏ.
    pub trajectory: Vec<ParameterVector>,
    /// Context loss at every φʲ, `j = 0..=k`.
    pub context_losses: Vec<f64>,
}

fn log_var_constants(g: &Graph, model: &MetaModel) -> (Var, Var) {
    (
        g.scalar(model.log_vars.log_var_sdf),
        g.scalar(model.log_vars.log_var_sign),
    )
}

fn check_context(context: &SampleSet, in_dim: usize) -> Result<()> {
    if context.is_empty() {
        return Err(Error::Empty("context set"));
    }
    if context.dim != in_dim {
        return Err(Error::Mismatch {
            what: "context coordinate dimension",
            expected: in_dim,
            got: context.dim,
        });
    }
    Ok(())
}

/// Value-level inner loop; `record` keeps the trajectory and the final loss.
fn adapt(model: &MetaModel, context: &SampleSet, steps: usize, record: bool) -> Result<Adaptation> {
    check_context(context, model.config.net.in_dim)?;
    if model.config.per_step_alpha && steps > model.alpha.len() {
        return Err(Error::Config(format!(
            "{steps} steps requested but only {} per-step rates exist",
            model.alpha.len()
        )));
    }
    let coords = context.coords_tensor();
    let values = context.values_tensor();
    let mut phi = model.theta.clone();
    let mut trajectory = Vec::new();
    let mut losses = Vec::new();
    if record {
        trajectory.push(phi.clone());
    }
    for j in 0..=steps {
        if j == steps && !record {
            break;
        }
        let g = Graph::new();
        let vars = phi.to_graph(&g, true);
        let x = g.constant(coords.clone());
        let y = g.constant(values.clone());
        let pred = mlp_forward(&g, &model.config.net, &vars, x)?;
        let l = loss(&g, model.config.inner_loss, pred, y, Some(log_var_constants(&g, model)))?.total;
        let lv = g.item(l)?;
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                what: "inner loss",
                step: j,
            });
        }
        losses.push(lv);
        if j == steps {
            break;
        }
        let grads = g.grad_values(l, &vars)?;
        let alpha = model.alpha_at(j);
        let mut next = phi.clone();
        for (seg, grad) in phi.layout().segments().iter().zip(&grads) {
            let r = seg.range();
            let (p, a, out) = (&phi.data()[r.clone()], &alpha.data()[r.clone()], &mut next.data_mut()[r]);
            for (i, gv) in grad.data().iter().enumerate() {
                out[i] = p[i] - a[i] * gv;
            }
        }
        phi = next;
        if record {
            trajectory.push(phi.clone());
        }
    }
    Ok(Adaptation {
        params: phi,
        trajectory,
        context_losses: losses,
    })
}

/// k inner steps on the mean context loss, with the full trajectory.
pub fn inner_adapt(model: &MetaModel, context: &SampleSet) -> Result<Adaptation> {
    adapt(model, context, model.config.k, true)
}

/// [`inner_adapt`] with an explicit step count, e.g. 0 for diagnostics.
pub fn inner_adapt_steps(model: &MetaModel, context: &SampleSet, steps: usize) -> Result<Adaptation> {
    adapt(model, context, steps, true)
}

/// Graph handles for every meta-parameter.
#[derive(Clone, Debug)]
pub struct MetaVars {
    pub theta: Vec<Var>,
    pub alpha: Vec<Vec<Var>>,
    pub log_vars: (Var, Var),
}

impl MetaVars {
    /// Fresh differentiable leaves holding `model`'s values.
    pub fn leaves(g: &Graph, model: &MetaModel) -> Self {
        MetaVars {
            theta: model.theta.to_graph(g, true),
            alpha: model.alpha.iter().map(|a| a.to_graph(g, true)).collect(),
            log_vars: (
                g.param(Tensor::scalar(model.log_vars.log_var_sdf)),
                g.param(Tensor::scalar(model.log_vars.log_var_sign)),
            ),
        }
    }

    /// Views into one flat var laid out like [`MetaModel::to_flat`].
    pub fn split(g: &Graph, config: &MetaConfig, flat: Var) -> Result<Self> {
        let layout = config.net.layout();
        let n = layout.len();
        let sets = config.alpha_sets();
        let expected = n * (1 + sets) + 2;
        let got = g.shape(flat)?.iter().product::<usize>();
        if got != expected {
            return Err(Error::Mismatch {
                what: "flat meta-parameter length",
                expected,
                got,
            });
        }
        let block = |base: usize| -> Result<Vec<Var>> {
            layout
                .segments()
                .iter()
                .map(|s| Ok(g.slice(flat, base + s.offset, &s.shape)?))
                .collect()
        };
        Ok(MetaVars {
            theta: block(0)?,
            alpha: (0..sets).map(|j| block(n * (j + 1))).collect::<Result<_>>()?,
            log_vars: (g.slice(flat, expected - 2, &[])?, g.slice(flat, expected - 1, &[])?),
        })
    }

    fn all(&self) -> Vec<Var> {
        let mut v = self.theta.clone();
        v.extend(self.alpha.iter().flatten().copied());
        v.extend([self.log_vars.0, self.log_vars.1]);
        v
    }
}

/// Target loss after k differentiable inner steps on the task's context.
///
/// Inner gradients stay on the graph unless `config.first_order` is set.
pub fn outer_objective(g: &Graph, config: &MetaConfig, vars: &MetaVars, task: &Task) -> Result<LossTerms> {
    check_context(&task.context, config.net.in_dim)?;
    check_context(&task.target, config.net.in_dim)?;
    let xc = g.constant(task.context.coords_tensor());
    let yc = g.constant(task.context.values_tensor());
    let mut phi = vars.theta.clone();
    for j in 0..config.k {
        let pred = mlp_forward(g, &config.net, &phi, xc)?;
        let l = loss(g, config.inner_loss, pred, yc, Some(vars.log_vars))?.total;
        if !g.item(l)?.is_finite() {
            return Err(Error::NonFinite {
                what: "inner loss",
                step: j,
            });
        }
        let grads = g.grad(l, &phi, !config.first_order)?.vars;
        let alpha = &vars.alpha[if config.per_step_alpha { j } else { 0 }];
        phi = phi
            .iter()
            .zip(&grads)
            .zip(alpha)
            .map(|((&p, &d), &s)| g.sub(p, g.mul(s, d)?))
            .collect::<Result<_, _>>()?;
    }
    let xt = g.constant(task.target.coords_tensor());
    let yt = g.constant(task.target.values_tensor());
    let pred = mlp_forward(g, &config.net, &phi, xt)?;
    loss(g, config.outer_loss, pred, yt, Some(vars.log_vars))
}

/// Loss and meta-gradient of one task, in [`MetaModel::to_flat`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGradient {
    /// Outer objective being minimized.
    pub total: f64,
    /// Its ℓ1 part.
    pub l1: f64,
    pub grad: Vec<f64>,
}

pub fn meta_gradient(model: &MetaModel, task: &Task) -> Result<TaskGradient> {
    let g = Graph::new();
    let vars = MetaVars::leaves(&g, model);
    let terms = outer_objective(&g, &model.config, &vars, task)?;
    let total = g.item(terms.total)?;
    let l1 = g.item(terms.l1)?;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            what: "outer loss",
            step: model.config.k,
        });
    }
    let grads = g.grad_values(terms.total, &vars.all())?;
    let grad: Vec<f64> = grads.into_iter().flat_map(Tensor::into_data).collect();
    Ok(TaskGradient { total, l1, grad })
}

/// Outcome of one outer update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Mean target ℓ1 over the batch.
    pub loss: f64,
    /// Mean outer objective.
    pub total: f64,
    /// Set when the update was withheld because of a non-finite value.
    pub skipped: Option<String>,
}

/// One Adam step on the batch-mean meta-gradient.
///
/// Tasks are processed in parallel; their gradients are summed in batch
/// order so the result does not depend on scheduling.
pub fn outer_step(model: &mut MetaModel, opt: &mut Adam, tasks: &[Task]) -> Result<StepReport> {
    if tasks.is_empty() {
        return Err(Error::Empty("task batch"));
    }
    if opt.len() != model.flat_len() {
        return Err(Error::Mismatch {
            what: "optimizer state length",
            expected: model.flat_len(),
            got: opt.len(),
        });
    }
    let shared: &MetaModel = model;
    let results: Vec<Result<TaskGradient>> = tasks.par_iter().map(|t| meta_gradient(shared, t)).collect();
    let mut sum = vec![0.0; model.flat_len()];
    let (mut loss_sum, mut total_sum) = (0.0, 0.0);
    for (i, r) in results.into_iter().enumerate() {
        let tg = match r {
            Ok(tg) => tg,
            Err(e @ Error::NonFinite { .. }) => {
                return Ok(StepReport {
                    loss: f64::NAN,
                    total: f64::NAN,
                    skipped: Some(format!("task {}: {e}", tasks[i].shape_id)),
                })
            }
            Err(e) => return Err(e),
        };
        if tg.grad.iter().any(|v| !v.is_finite()) {
            return Ok(StepReport {
                loss: tg.l1,
                total: tg.total,
                skipped: Some(format!("task {}: non-finite meta-gradient", tasks[i].shape_id)),
            });
        }
        loss_sum += tg.l1;
        total_sum += tg.total;
        for (s, v) in sum.iter_mut().zip(&tg.grad) {
            *s += v;
        }
    }
    let n = tasks.len() as f64;
    for s in &mut sum {
        *s /= n;
    }
    let mut flat = model.to_flat();
    opt.step(&mut flat, &sum)?;
    model.set_flat(&flat)?;
    Ok(StepReport {
        loss: loss_sum / n,
        total: total_sum / n,
        skipped: None,
    })
}

/// Specialized parameters with the time it took to get them.
#[derive(Clone, Debug, PartialEq)]
pub struct Specialized {
    pub params: ParameterVector,
    pub steps: usize,
    pub elapsed: Duration,
}

/// Inference-mode specialization: k inner steps, no graph kept between steps.
pub fn specialize(model: &MetaModel, context: &SampleSet) -> Result<Specialized> {
    let start = Instant::now();
    let a = adapt(model, context, model.config.k, false)?;
    Ok(Specialized {
        params: a.params,
        steps: model.config.k,
        elapsed: start.elapsed(),
    })
}

/// Target ℓ1 after specializing on the task's context.
pub fn evaluate_task(model: &MetaModel, task: &Task) -> Result<f64> {
    let s = specialize(model, &task.context)?;
    let pred = model.predict(&s.params, &task.target.coords_tensor())?;
    mean_abs_error(&pred, &task.target.values)
}

#[cfg(test)]
mod tests;
