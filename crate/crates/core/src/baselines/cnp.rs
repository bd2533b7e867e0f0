use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_divergence, check_out_dim, default_divergence, log_var_vars, reconstruction_loss, EPOCH_STREAM,
    INIT_STREAM, SAMPLE_STREAM, VAL_STREAM,
};
use crate::autodiff::{Graph, Tensor, Var};
use crate::checkpoint::{Checkpoint, MetricLog, MetricRow};
use crate::error::{Error, Result};
use crate::losses::{mean_abs_error, predicted_sdf, CompositeLossState, LossKind};
use crate::nets::{
    concat_forward, init_concat, init_encoder, set_encode, ConcatConfig, EncoderConfig, MlpConfig,
    ParameterVector, Pooling,
};
use crate::optim::{Adam, AdamConfig};
use crate::sdfdata::{SampleSet, SdfGrid, Task, TaskSampling};
use crate::seeds::derive_seed;

pub const CNP_MODE: &str = "cnp";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnpConfig {
    /// Concat-conditioned decoder Φ.
    pub net: MlpConfig,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    #[serde(default)]
    pub pooling: Pooling,
    pub loss: LossKind,
    pub lr: f64,
    pub batch_tasks: usize,
    /// Context mode is fixed per model.
    pub sampling: TaskSampling,
    pub epochs: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for CnpConfig {
    fn default() -> Self {
        CnpConfig {
            net: MlpConfig::default(),
            latent_dim: 256,
            encoder_hidden: 256,
            pooling: Pooling::Mean,
            loss: LossKind::L1,
            lr: 1e-4,
            batch_tasks: 32,
            sampling: TaskSampling::default(),
            epochs: 50,
            max_steps: None,
            divergence_threshold: default_divergence(),
            seed: 0,
        }
    }
}

impl CnpConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder_config().validate()?;
        self.encoder_config().point_net().validate()?;
        check_out_dim("cnp", self.loss, self.net.out_dim)?;
        if !(self.lr > 0.0) || self.batch_tasks == 0 {
            return Err(Error::Config(format!("invalid cnp settings: {self:?}")));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig::new(self.net.in_dim, self.encoder_hidden, self.latent_dim, self.pooling)
    }

    pub fn decoder_config(&self) -> ConcatConfig {
        ConcatConfig {
            net: self.net,
            latent_dim: self.latent_dim,
        }
    }
}

/// Set encoder and the concat decoder it conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct CnpModel {
    pub config: CnpConfig,
    pub encoder: ParameterVector,
    pub decoder: ParameterVector,
    pub log_vars: CompositeLossState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnpPrediction {
    pub values: Vec<f64>,
    pub elapsed: Duration,
}

impl CnpModel {
    pub fn new(config: CnpConfig) -> Result<Self> {
        config.validate()?;
        let encoder = init_encoder(&config.encoder_config(), derive_seed(config.seed, &[INIT_STREAM, 0]))?;
        let decoder = init_concat(&config.decoder_config(), derive_seed(config.seed, &[INIT_STREAM, 1]))?;
        Ok(CnpModel {
            config,
            encoder,
            decoder,
            log_vars: CompositeLossState::default(),
        })
    }

    /// Raw decoder output `[m, out_dim]` at `queries` given `context` rows `[n, d + 1]`.
    pub fn forward(&self, g: &Graph, e: &[Var], d: &[Var], context: Var, queries: Var) -> Result<Var> {
        let z = set_encode(g, &self.config.encoder_config(), e, context)?;
        concat_forward(g, &self.config.decoder_config(), d, z, queries)
    }

    pub fn to_checkpoint(&self, provenance: serde_json::Value) -> Checkpoint {
        let mut c = Checkpoint::new(CNP_MODE, provenance);
        c.header.extra = serde_json::json!({ "model": self.config });
        c.push("encoder", self.encoder.data().to_vec());
        c.push("decoder", self.decoder.data().to_vec());
        c.push("log_vars", vec![self.log_vars.log_var_sdf, self.log_vars.log_var_sign]);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.header.mode != CNP_MODE {
            return Err(Error::Config(format!(
                "checkpoint holds a {} model, not {CNP_MODE}",
                c.header.mode
            )));
        }
        let config: CnpConfig = serde_json::from_value(c.header.extra["model"].clone())
            .map_err(|e| Error::Config(format!("checkpoint model config: {e}")))?;
        config.validate()?;
        let encoder = ParameterVector::new(config.encoder_config().layout(), c.require("encoder")?.to_vec())?;
        let decoder = ParameterVector::new(config.decoder_config().layout(), c.require("decoder")?.to_vec())?;
        let lv = c.require("log_vars")?;
        if lv.len() != 2 {
            return Err(Error::Mismatch {
                what: "log-variance count",
                expected: 2,
                got: lv.len(),
            });
        }
        Ok(CnpModel {
            config,
            encoder,
            decoder,
            log_vars: CompositeLossState {
                log_var_sdf: lv[0],
                log_var_sign: lv[1],
            },
        })
    }

    fn flat_len(&self) -> usize {
        self.encoder.len() + self.decoder.len() + 2
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut v = self.encoder.data().to_vec();
        v.extend_from_slice(self.decoder.data());
        v.extend([self.log_vars.log_var_sdf, self.log_vars.log_var_sign]);
        v
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let (ne, nd) = (self.encoder.len(), self.decoder.len());
        self.encoder.data_mut().copy_from_slice(&flat[..ne]);
        self.decoder.data_mut().copy_from_slice(&flat[ne..ne + nd]);
        self.log_vars = CompositeLossState {
            log_var_sdf: flat[ne + nd],
            log_var_sign: flat[ne + nd + 1],
        };
    }
}

fn check_context(context: &SampleSet, dim: usize) -> Result<()> {
    if context.is_empty() {
        return Err(Error::Empty("cnp context"));
    }
    if context.dim != dim {
        return Err(Error::Mismatch {
            what: "context coordinate dimension",
            expected: dim,
            got: context.dim,
        });
    }
    Ok(())
}

/// Predict signed distances at `queries` `[m, d]` from one encoder pass.
pub fn cnp_infer(model: &CnpModel, context: &SampleSet, queries: &Tensor) -> Result<CnpPrediction> {
    check_context(context, model.config.net.in_dim)?;
    let start = Instant::now();
    let g = Graph::new();
    let e = model.encoder.to_graph(&g, false);
    let d = model.decoder.to_graph(&g, false);
    let out = model.forward(&g, &e, &d, g.constant(context.rows_tensor()), g.constant(queries.clone()))?;
    let values = predicted_sdf(&g.value(out)?)?;
    Ok(CnpPrediction {
        values,
        elapsed: start.elapsed(),
    })
}

/// Target ℓ1 of one task.
pub fn cnp_task_error(model: &CnpModel, task: &Task) -> Result<f64> {
    let p = cnp_infer(model, &task.context, &task.target.coords_tensor())?;
    mean_abs_error(&p.values, &task.target.values)
}

fn task_gradient(model: &CnpModel, task: &Task) -> Result<(f64, f64, Vec<f64>)> {
    check_context(&task.context, model.config.net.in_dim)?;
    let g = Graph::new();
    let e = model.encoder.to_graph(&g, true);
    let d = model.decoder.to_graph(&g, true);
    let composite = model.config.loss == LossKind::Composite;
    let lv = log_var_vars(&g, &model.log_vars, composite);
    let pred = model.forward(
        &g,
        &e,
        &d,
        g.constant(task.context.rows_tensor()),
        g.constant(task.target.coords_tensor()),
    )?;
    let terms = reconstruction_loss(&g, model.config.loss, pred, g.constant(task.target.values_tensor()), lv)?;
    let mut wrt = e;
    wrt.extend(d);
    if composite {
        wrt.extend([lv.0, lv.1]);
    }
    let mut grad: Vec<f64> = g
        .grad_values(terms.total, &wrt)?
        .into_iter()
        .flat_map(Tensor::into_data)
        .collect();
    if !composite {
        grad.extend([0.0, 0.0]);
    }
    Ok((g.item(terms.l1)?, g.item(terms.total)?, grad))
}

/// End-to-end training; returns the best-on-validation model (the final one
/// without a validation set) and a log with one row per step.
pub fn train_cnp(
    train: &[(String, SdfGrid)],
    val: &[(String, SdfGrid)],
    config: &CnpConfig,
) -> Result<(CnpModel, MetricLog)> {
    if train.is_empty() {
        return Err(Error::Empty("training shapes"));
    }
    let mut model = CnpModel::new(config.clone())?;
    let mut log = MetricLog::new(serde_json::to_value(config).expect("config serializes"));
    let mut opt = Adam::new(AdamConfig::new(config.lr), model.flat_len());
    let sampling = config.sampling;
    let val_tasks: Vec<Task> = val
        .par_iter()
        .enumerate()
        .map(|(i, (id, grid))| sampling.task(id, grid, derive_seed(config.seed, &[VAL_STREAM, i as u64])))
        .collect::<Result<_>>()?;
    let mut best: Option<(f64, CnpModel)> = None;
    let clock = Instant::now();
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[EPOCH_STREAM, epoch as u64])));
        for batch in order.chunks(config.batch_tasks) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let shared: &CnpModel = &model;
            let results: Vec<(f64, f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let (id, grid) = &train[i];
                    let seed = derive_seed(config.seed, &[SAMPLE_STREAM, epoch as u64, i as u64]);
                    task_gradient(shared, &sampling.task(id, grid, seed)?)
                })
                .collect::<Result<_>>()?;
            let n = batch.len() as f64;
            let mut grad = vec![0.0; model.flat_len()];
            let (mut l1, mut total) = (0.0, 0.0);
            for (a, t, gr) in &results {
                l1 += a / n;
                total += t / n;
                for (s, v) in grad.iter_mut().zip(gr) {
                    *s += v / n;
                }
            }
            step += 1;
            log.push(MetricRow {
                step,
                outer_loss: l1,
                val_loss: None,
                wallclock_ms: clock.elapsed().as_secs_f64() * 1e3,
            });
            check_divergence(step, total, config.divergence_threshold)?;
            if grad.iter().any(|v| !v.is_finite()) {
                log::warn!("cnp step {step} skipped: non-finite gradient");
                continue;
            }
            let mut flat = model.to_flat();
            opt.step(&mut flat, &grad)?;
            model.set_flat(&flat);
        }
        if !val_tasks.is_empty() {
            let errs: Vec<f64> = val_tasks
                .par_iter()
                .map(|t| cnp_task_error(&model, t))
                .collect::<Result<_>>()?;
            let v = errs.iter().sum::<f64>() / errs.len() as f64;
            if let Some(row) = log.rows.last_mut() {
                row.val_loss = Some(v);
            }
            if v.is_finite() && best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.clone()));
            }
        }
        log::info!("cnp epoch {} step {step} val {:?}", epoch + 1, log.last_val());
    }
    Ok((best.map(|b| b.1).unwrap_or(model), log))
}
