use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_divergence, check_out_dim, default_divergence, log_var_vars, reconstruction_loss, CODE_STREAM,
    EPOCH_STREAM, INIT_STREAM, SAMPLE_STREAM,
};
use crate::autodiff::{Graph, Tensor, Var};
use crate::checkpoint::{Checkpoint, MetricLog, MetricRow};
use crate::error::{Error, Result};
use crate::losses::{predicted_sdf, CompositeLossState, LossKind};
use crate::nets::{
    concat_forward, hypernet_forward, init_concat, init_hypernet, mlp_forward, ConcatConfig, HyperConfig,
    LatentCode, Layout, MlpConfig, ParameterVector,
};
use crate::optim::{Adam, AdamConfig};
use crate::sdfdata::{sample_dense, SampleSet, SdfGrid};
use crate::seeds::derive_seed;

pub const AUTODECODER_MODE: &str = "autodecoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Code appended to the input of Φ and again at layer 3.
    Concat,
    /// Code mapped to all parameters of a plain Φ.
    Hyper,
}

fn default_code_reg() -> f64 {
    1e-4
}
fn default_code_std() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoDecoderConfig {
    pub decoder: DecoderKind,
    pub net: MlpConfig,
    pub latent_dim: usize,
    /// Width of the hypernetwork's hidden layers.
    pub hyper_hidden: usize,
    pub loss: LossKind,
    /// Weight of `‖z‖²` added to every shape's loss.
    #[serde(default = "default_code_reg")]
    pub code_reg_weight: f64,
    #[serde(default = "default_code_std")]
    pub code_init_std: f64,
    pub lr: f64,
    /// Halve the learning rate every this many steps.
    #[serde(default)]
    pub lr_halving_steps: Option<usize>,
    pub batch_shapes: usize,
    /// Lattice points drawn per shape and step; `None` uses the whole grid.
    pub target_points: Option<usize>,
    pub epochs: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for AutoDecoderConfig {
    fn default() -> Self {
        AutoDecoderConfig {
            decoder: DecoderKind::Concat,
            net: MlpConfig::default(),
            latent_dim: 256,
            hyper_hidden: 256,
            loss: LossKind::L1,
            code_reg_weight: default_code_reg(),
            code_init_std: default_code_std(),
            lr: 1e-4,
            lr_halving_steps: None,
            batch_shapes: 32,
            target_points: Some(512),
            epochs: 150,
            max_steps: None,
            divergence_threshold: default_divergence(),
            seed: 0,
        }
    }
}

impl AutoDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.concat().validate()?;
        if self.decoder == DecoderKind::Hyper {
            self.hyper().validate()?;
        }
        check_out_dim("auto-decoder", self.loss, self.net.out_dim)?;
        if !(self.lr > 0.0) || self.batch_shapes == 0 || self.lr_halving_steps == Some(0) || !(self.code_reg_weight >= 0.0) || !(self.code_init_std >= 0.0) {
            return Err(Error::Config(format!("invalid auto-decoder settings: {self:?}")));
        }
        if self.target_points == Some(0) {
            return Err(Error::Config("target_points must be positive".into()));
        }
        Ok(())
    }

    pub fn concat(&self) -> ConcatConfig {
        ConcatConfig {
            net: self.net,
            latent_dim: self.latent_dim,
        }
    }

    pub fn hyper(&self) -> HyperConfig {
        HyperConfig::new(self.net, self.latent_dim, self.hyper_hidden)
    }

    pub fn decoder_layout(&self) -> Layout {
        match self.decoder {
            DecoderKind::Concat => self.concat().layout(),
            DecoderKind::Hyper => self.hyper().layout(),
        }
    }
}

/// Shared decoder plus one learned code per training shape.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoDecoderModel {
    pub config: AutoDecoderConfig,
    pub decoder: ParameterVector,
    pub log_vars: CompositeLossState,
    pub codes: BTreeMap<String, LatentCode>,
}

impl AutoDecoderModel {
    /// Fresh decoder and codes drawn from `N(0, code_init_std²)`.
    pub fn new(config: AutoDecoderConfig, shape_ids: &[String]) -> Result<Self> {
        config.validate()?;
        let dseed = derive_seed(config.seed, &[INIT_STREAM]);
        let decoder = match config.decoder {
            DecoderKind::Concat => init_concat(&config.concat(), dseed)?,
            DecoderKind::Hyper => init_hypernet(&config.hyper(), dseed)?,
        };
        let normal = Normal::new(0.0, config.code_init_std)
            .map_err(|e| Error::Config(format!("code init: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[CODE_STREAM]));
        let mut codes = BTreeMap::new();
        for id in shape_ids {
            let z = (0..config.latent_dim).map(|_| normal.sample(&mut rng)).collect();
            if codes.insert(id.clone(), LatentCode::new(z)?).is_some() {
                return Err(Error::Config(format!("duplicate shape id {id:?}")));
            }
        }
        Ok(AutoDecoderModel {
            config,
            decoder,
            log_vars: CompositeLossState::default(),
            codes,
        })
    }

    /// Decoder output `[n, out_dim]` for code `z` at `coords`.
    pub fn forward(&self, g: &Graph, dparams: &[Var], z: Var, coords: Var) -> Result<Var> {
        match self.config.decoder {
            DecoderKind::Concat => concat_forward(g, &self.config.concat(), dparams, z, coords),
            DecoderKind::Hyper => {
                let phi = hypernet_forward(g, &self.config.hyper(), dparams, z)?;
                mlp_forward(g, &self.config.net, &phi, coords)
            }
        }
    }

    /// Signed distances decoded from `code` at `coords` `[n, d]`.
    pub fn predict(&self, code: &LatentCode, coords: &Tensor) -> Result<Vec<f64>> {
        let g = Graph::new();
        let d = self.decoder.to_graph(&g, false);
        let z = g.constant(code.to_tensor());
        let x = g.constant(coords.clone());
        let out = self.forward(&g, &d, z, x)?;
        predicted_sdf(&g.value(out)?)
    }

    pub fn to_checkpoint(&self, provenance: serde_json::Value) -> Checkpoint {
        let mut c = Checkpoint::new(AUTODECODER_MODE, provenance);
        let ids: Vec<&String> = self.codes.keys().collect();
        c.header.extra = serde_json::json!({ "model": self.config, "codes": ids });
        c.push("decoder", self.decoder.data().to_vec());
        c.push("log_vars", vec![self.log_vars.log_var_sdf, self.log_vars.log_var_sign]);
        c.push("codes", self.codes.values().flat_map(|z| z.values().to_vec()).collect());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.header.mode != AUTODECODER_MODE {
            return Err(Error::Config(format!(
                "checkpoint holds a {} model, not {AUTODECODER_MODE}",
                c.header.mode
            )));
        }
        let config: AutoDecoderConfig = serde_json::from_value(c.header.extra["model"].clone())
            .map_err(|e| Error::Config(format!("checkpoint model config: {e}")))?;
        config.validate()?;
        let ids: Vec<String> = serde_json::from_value(c.header.extra["codes"].clone())
            .map_err(|e| Error::Config(format!("checkpoint code ids: {e}")))?;
        let decoder = ParameterVector::new(config.decoder_layout(), c.require("decoder")?.to_vec())?;
        let lv = c.require("log_vars")?;
        let flat = c.require("codes")?;
        if lv.len() != 2 || flat.len() != ids.len() * config.latent_dim {
            return Err(Error::Mismatch {
                what: "auto-decoder code buffer length",
                expected: ids.len() * config.latent_dim,
                got: flat.len(),
            });
        }
        let codes = ids
            .into_iter()
            .zip(flat.chunks_exact(config.latent_dim.max(1)))
            .map(|(id, z)| Ok((id, LatentCode::new(z.to_vec())?)))
            .collect::<Result<_>>()?;
        Ok(AutoDecoderModel {
            config,
            decoder,
            log_vars: CompositeLossState {
                log_var_sdf: lv[0],
                log_var_sign: lv[1],
            },
            codes,
        })
    }

    fn flat_len(&self) -> usize {
        self.decoder.len() + 2 + self.codes.len() * self.config.latent_dim
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut v = self.decoder.data().to_vec();
        v.extend([self.log_vars.log_var_sdf, self.log_vars.log_var_sign]);
        for z in self.codes.values() {
            v.extend_from_slice(z.values());
        }
        v
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let nd = self.decoder.len();
        self.decoder.data_mut().copy_from_slice(&flat[..nd]);
        self.log_vars = CompositeLossState {
            log_var_sdf: flat[nd],
            log_var_sign: flat[nd + 1],
        };
        let l = self.config.latent_dim;
        for (i, z) in self.codes.values_mut().enumerate() {
            *z = LatentCode::new(flat[nd + 2 + i * l..nd + 2 + (i + 1) * l].to_vec())?;
        }
        Ok(())
    }
}

/// Per-shape gradient: the decoder and log-variance part, then the code's own part.
struct ShapeGradient {
    l1: f64,
    total: f64,
    shared: Vec<f64>,
    code: Vec<f64>,
}

fn shape_gradient(model: &AutoDecoderModel, code: &LatentCode, samples: &SampleSet) -> Result<ShapeGradient> {
    let g = Graph::new();
    let d = model.decoder.to_graph(&g, true);
    let composite = model.config.loss == LossKind::Composite;
    let lv = log_var_vars(&g, &model.log_vars, composite);
    let z = g.param(code.to_tensor());
    let pred = model.forward(&g, &d, z, g.constant(samples.coords_tensor()))?;
    let terms = reconstruction_loss(&g, model.config.loss, pred, g.constant(samples.values_tensor()), lv)?;
    let reg = g.scale(g.sum(g.mul(z, z)?)?, model.config.code_reg_weight)?;
    let total = g.add(terms.total, reg)?;
    let mut wrt = d;
    if composite {
        wrt.extend([lv.0, lv.1]);
    }
    wrt.push(z);
    let mut grads: Vec<f64> = g
        .grad_values(total, &wrt)?
        .into_iter()
        .flat_map(Tensor::into_data)
        .collect();
    let code_grad = grads.split_off(grads.len() - code.dim());
    if !composite {
        grads.extend([0.0, 0.0]);
    }
    Ok(ShapeGradient {
        l1: g.item(terms.l1)?,
        total: g.item(total)?,
        shared: grads,
        code: code_grad,
    })
}

/// Jointly fit the decoder and one code per shape on dense samples.
///
/// Returns the final model and a log with one row per step (`outer_loss` is
/// the batch-mean ℓ1).
pub fn train_autodecoder(
    shapes: &[(String, SdfGrid)],
    config: &AutoDecoderConfig,
) -> Result<(AutoDecoderModel, MetricLog)> {
    if shapes.is_empty() {
        return Err(Error::Empty("training shapes"));
    }
    let ids: Vec<String> = shapes.iter().map(|s| s.0.clone()).collect();
    let mut model = AutoDecoderModel::new(config.clone(), &ids)?;
    let provenance = serde_json::to_value(config).expect("config serializes");
    let mut log = MetricLog::new(provenance);
    let mut opt = Adam::new(AdamConfig::new(config.lr), model.flat_len());
    let (nd, l) = (model.decoder.len() + 2, config.latent_dim);
    // Code slots follow the key order of the table.
    let slot: Vec<usize> = ids
        .iter()
        .map(|id| model.codes.keys().position(|k| k == id).expect("code per shape"))
        .collect();
    let clock = Instant::now();
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..shapes.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[EPOCH_STREAM, epoch as u64])));
        for batch in order.chunks(config.batch_shapes) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let shared: &AutoDecoderModel = &model;
            let results: Vec<ShapeGradient> = batch
                .par_iter()
                .map(|&i| {
                    let (id, grid) = &shapes[i];
                    let seed = derive_seed(config.seed, &[SAMPLE_STREAM, epoch as u64, i as u64]);
                    let samples = sample_dense(grid, config.target_points.map(|n| n.min(grid.len())), seed)?;
                    shape_gradient(shared, &shared.codes[id], &samples)
                })
                .collect::<Result<_>>()?;
            let n = batch.len() as f64;
            let mut grad = vec![0.0; model.flat_len()];
            let (mut l1, mut total) = (0.0, 0.0);
            for (&i, r) in batch.iter().zip(&results) {
                l1 += r.l1 / n;
                total += r.total / n;
                for (s, v) in grad[..nd].iter_mut().zip(&r.shared) {
                    *s += v / n;
                }
                let k = slot[i];
                for (s, v) in grad[nd + k * l..nd + (k + 1) * l].iter_mut().zip(&r.code) {
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
                log::warn!("auto-decoder step {step} skipped: non-finite gradient");
                continue;
            }
            if let Some(h) = config.lr_halving_steps {
                opt.config.lr = config.lr * 0.5f64.powi((step / h) as i32);
            }
            let mut flat = model.to_flat();
            opt.step(&mut flat, &grad)?;
            model.set_flat(&flat)?;
        }
        log::info!("auto-decoder epoch {} step {step} l1 {:?}", epoch + 1, log.rows.last().map(|r| r.outer_loss));
    }
    Ok((model, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeSearchConfig {
    pub steps: usize,
    pub lr: f64,
    /// Stop once the context loss improved by less than this over `patience` steps.
    pub tol: f64,
    pub patience: usize,
}

impl Default for CodeSearchConfig {
    fn default() -> Self {
        CodeSearchConfig {
            steps: 400,
            lr: 5e-3,
            tol: 1e-6,
            patience: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeSearch {
    pub code: LatentCode,
    /// Context loss before each update and after the last one.
    pub curve: Vec<f64>,
    pub elapsed: Duration,
}

impl CodeSearch {
    /// Adam updates actually taken.
    pub fn steps(&self) -> usize {
        self.curve.len() - 1
    }
}

/// Fit a code to `context` with the decoder frozen, starting from `z = 0`.
pub fn test_time_optimize_code(
    model: &AutoDecoderModel,
    context: &SampleSet,
    config: &CodeSearchConfig,
) -> Result<CodeSearch> {
    if context.is_empty() {
        return Err(Error::Empty("code search context"));
    }
    if context.dim != model.config.net.in_dim {
        return Err(Error::Mismatch {
            what: "context coordinate dimension",
            expected: model.config.net.in_dim,
            got: context.dim,
        });
    }
    let start = Instant::now();
    let (x, y) = (context.coords_tensor(), context.values_tensor());
    let mut z = vec![0.0; model.config.latent_dim];
    let mut opt = Adam::new(AdamConfig::new(config.lr), z.len());
    let mut curve = Vec::with_capacity(config.steps + 1);
    let eval = |z: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let g = Graph::new();
        let d = model.decoder.to_graph(&g, false);
        let lv = log_var_vars(&g, &model.log_vars, false);
        let zv = g.param(Tensor::vector(z.to_vec()));
        let pred = model.forward(&g, &d, zv, g.constant(x.clone()))?;
        let l = reconstruction_loss(&g, model.config.loss, pred, g.constant(y.clone()), lv)?.total;
        let value = g.item(l)?;
        let grad = if want_grad {
            g.grad_values(l, &[zv])?.remove(0).into_data()
        } else {
            Vec::new()
        };
        Ok((value, grad))
    };
    for t in 0..config.steps {
        let (value, grad) = eval(&z, true)?;
        curve.push(value);
        if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "code search loss",
                step: t,
            });
        }
        if t >= config.patience && curve[t - config.patience] - value < config.tol {
            return Ok(CodeSearch {
                code: LatentCode::new(z)?,
                curve,
                elapsed: start.elapsed(),
            });
        }
        opt.step(&mut z, &grad)?;
    }
    curve.push(eval(&z, false)?.0);
    Ok(CodeSearch {
        code: LatentCode::new(z)?,
        curve,
        elapsed: start.elapsed(),
    })
}
