use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_task, outer_step, MetaConfig, MetaModel};
use crate::checkpoint::{Checkpoint, MetricLog, MetricRow};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::sdfdata::{SdfGrid, Task, TaskSampling};
use crate::seeds::derive_seed;

const EPOCH_STREAM: u64 = 1;
const TASK_STREAM: u64 = 2;
const VAL_STREAM: u64 = 3;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

fn default_divergence() -> f64 {
    1e3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaTrainConfig {
    pub meta: MetaConfig,
    pub sampling: TaskSampling,
    pub epochs: usize,
    /// Stop after this many outer steps even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Outer ℓ1 above this aborts training.
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            meta: MetaConfig::planar(),
            sampling: TaskSampling::default(),
            epochs: 50,
            max_steps: None,
            divergence_threshold: default_divergence(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub val_loss: Option<f64>,
}

/// Resumable meta-training state.
pub struct MetaTrainer {
    pub config: MetaTrainConfig,
    pub model: MetaModel,
    pub opt: Adam,
    pub log: MetricLog,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed outer steps.
    pub step: usize,
    pub best: Option<(f64, MetaModel)>,
    /// Provenance recorded in checkpoints and logs.
    pub provenance: serde_json::Value,
    elapsed_ms: f64,
    clock: Instant,
}

/// Fixed validation tasks: the same draws every epoch.
pub fn validation_tasks(shapes: &[(String, SdfGrid)], sampling: &TaskSampling, seed: u64) -> Result<Vec<Task>> {
    shapes
        .par_iter()
        .enumerate()
        .map(|(i, (id, grid))| sampling.task(id, grid, derive_seed(seed, &[VAL_STREAM, i as u64])))
        .collect()
}

/// Mean target ℓ1 after specialization.
pub fn mean_task_error(model: &MetaModel, tasks: &[Task]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Empty("evaluation tasks"));
    }
    let errs: Vec<f64> = tasks
        .par_iter()
        .map(|t| evaluate_task(model, t))
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

impl MetaTrainer {
    pub fn new(config: MetaTrainConfig) -> Result<Self> {
        let model = MetaModel::new(config.meta, config.seed)?;
        let opt = Adam::new(AdamConfig::new(config.meta.beta), model.flat_len());
        let provenance = serde_json::to_value(&config).expect("config serializes");
        Ok(MetaTrainer {
            log: MetricLog::new(provenance.clone()),
            provenance,
            config,
            model,
            opt,
            epoch: 0,
            step: 0,
            best: None,
            elapsed_ms: 0.0,
            clock: Instant::now(),
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    fn wallclock_ms(&self) -> f64 {
        self.elapsed_ms + self.clock.elapsed().as_secs_f64() * 1e3
    }

    /// One pass over `train` in a seed-determined order, then validation.
    pub fn run_epoch(&mut self, train: &[(String, SdfGrid)], val: &[Task]) -> Result<EpochSummary> {
        if train.is_empty() {
            return Err(Error::Empty("training shapes"));
        }
        let cfg = &self.config;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[EPOCH_STREAM, self.epoch as u64]));
        order.shuffle(&mut rng);
        let (epoch, seed, sampling) = (self.epoch as u64, cfg.seed, cfg.sampling);
        let mut losses = Vec::new();
        for batch in order.chunks(cfg.meta.batch_tasks) {
            if self.config.max_steps.is_some_and(|m| self.step >= m) {
                break;
            }
            let tasks: Vec<Task> = batch
                .par_iter()
                .map(|&i| {
                    let (id, grid) = &train[i];
                    sampling.task(id, grid, derive_seed(seed, &[TASK_STREAM, epoch, i as u64]))
                })
                .collect::<Result<_>>()?;
            let report = outer_step(&mut self.model, &mut self.opt, &tasks)?;
            self.step += 1;
            self.log.push(MetricRow {
                step: self.step,
                outer_loss: report.loss,
                val_loss: None,
                wallclock_ms: self.wallclock_ms(),
            });
            if let Some(why) = &report.skipped {
                log::warn!("step {} skipped: {why}", self.step);
                continue;
            }
            if report.loss > self.config.divergence_threshold {
                return Err(Error::Diverged {
                    step: self.step,
                    loss: report.loss,
                });
            }
            losses.push(report.loss);
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_task_error(&self.model, val)?)
        };
        if let Some(row) = self.log.rows.last_mut() {
            row.val_loss = val_loss;
        }
        let metric = val_loss.unwrap_or(mean_loss);
        if metric.is_finite() && self.best.as_ref().is_none_or(|(b, _)| metric < *b) {
            self.best = Some((metric, self.model.clone()));
        }
        self.epoch += 1;
        log::info!(
            "epoch {} step {} outer l1 {mean_loss:.5} val {val_loss:?}",
            self.epoch,
            self.step
        );
        Ok(EpochSummary {
            epoch: self.epoch,
            steps: self.step,
            mean_loss,
            val_loss,
        })
    }

    /// Full training state: model, optimizer moments and counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.model.to_checkpoint(self.provenance.clone());
        c.header.epoch = self.epoch;
        c.header.step = self.step;
        c.header.metric = self.best.as_ref().map(|b| b.0);
        c.header.extra["adam_t"] = self.opt.t.into();
        c.header.extra["wallclock_ms"] = self.wallclock_ms().into();
        c.push("adam_m", self.opt.m.clone());
        c.push("adam_v", self.opt.v.clone());
        c
    }

    /// The best-on-validation model so far.
    pub fn best_checkpoint(&self) -> Option<Checkpoint> {
        self.best.as_ref().map(|(metric, m)| {
            let mut c = m.to_checkpoint(self.provenance.clone());
            c.header.epoch = self.epoch;
            c.header.step = self.step;
            c.header.metric = Some(*metric);
            c
        })
    }

    /// Rebuild from a [`MetaTrainer::checkpoint`]; the log is cut back to its step.
    pub fn resume(
        config: MetaTrainConfig,
        last: &Checkpoint,
        best: Option<&Checkpoint>,
        mut log: MetricLog,
    ) -> Result<Self> {
        let model = MetaModel::from_checkpoint(last)?;
        if model.config != config.meta {
            return Err(Error::Config("checkpoint model config differs from the training config".into()));
        }
        let t = last.header.extra["adam_t"].as_u64().unwrap_or(0);
        let opt = Adam::from_state(
            AdamConfig::new(config.meta.beta),
            last.require("adam_m")?.to_vec(),
            last.require("adam_v")?.to_vec(),
            t,
        )?;
        if opt.len() != model.flat_len() {
            return Err(Error::Mismatch {
                what: "optimizer state length",
                expected: model.flat_len(),
                got: opt.len(),
            });
        }
        let best = match best {
            Some(c) => Some((c.header.metric.unwrap_or(f64::INFINITY), MetaModel::from_checkpoint(c)?)),
            None => None,
        };
        log.truncate_after(last.header.step);
        let provenance = serde_json::to_value(&config).expect("config serializes");
        Ok(MetaTrainer {
            provenance,
            config,
            model,
            opt,
            log,
            epoch: last.header.epoch,
            step: last.header.step,
            best,
            elapsed_ms: last.header.extra["wallclock_ms"].as_f64().unwrap_or(0.0),
            clock: Instant::now(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.checkpoint().save(&dir.join(LAST_CHECKPOINT))?;
        if let Some(b) = self.best_checkpoint() {
            b.save(&dir.join(BEST_CHECKPOINT))?;
        }
        self.log.save(&dir.join(METRICS_FILE))
    }

    pub fn load(config: MetaTrainConfig, dir: &Path) -> Result<Self> {
        let last = Checkpoint::load(&dir.join(LAST_CHECKPOINT))?;
        let best_path = dir.join(BEST_CHECKPOINT);
        let best = if best_path.exists() {
            Some(Checkpoint::load(&best_path)?)
        } else {
            None
        };
        let log = MetricLog::load(&dir.join(METRICS_FILE))?;
        MetaTrainer::resume(config, &last, best.as_ref(), log)
    }
}

/// Train to completion and return the best-on-validation model with the curve.
///
/// With `out`, state is saved after every epoch (and on divergence) and
/// `resume` picks up from the saved state.
pub fn train_meta(
    train: &[(String, SdfGrid)],
    val: &[(String, SdfGrid)],
    config: &MetaTrainConfig,
    out: Option<&Path>,
    resume: bool,
) -> Result<(MetaModel, MetricLog)> {
    let mut trainer = match out {
        Some(dir) if resume => MetaTrainer::load(config.clone(), dir)?,
        _ => MetaTrainer::new(config.clone())?,
    };
    let val_tasks = validation_tasks(val, &config.sampling, config.seed)?;
    while !trainer.finished() {
        let r = trainer.run_epoch(train, &val_tasks);
        if let Some(dir) = out {
            trainer.save(dir)?;
        }
        r?;
    }
    let model = trainer.best.map(|b| b.1).unwrap_or(trainer.model);
    Ok((model, trainer.log))
}
