//! Checkpoints of any method behind one interface.

use std::path::Path;
use std::time::{Duration, Instant};

use metasdf::autodiff::Tensor;
use metasdf::baselines::{
    cnp_infer, test_time_optimize_code, AutoDecoderModel, CnpModel, CodeSearchConfig, DecoderKind, AUTODECODER_MODE,
    CNP_MODE,
};
use metasdf::checkpoint::Checkpoint;
use metasdf::geometry::grid_eval;
use metasdf::meta::{specialize, MetaModel, CHECKPOINT_MODE};
use metasdf::nets::{LatentCode, ParameterVector};
use metasdf::sdfdata::{SampleSet, SdfGrid};

use crate::config::{experiment_of, ExperimentConfig, Method};
use crate::{CliError, Result};

pub enum Model {
    Meta(MetaModel),
    AutoDecoder(AutoDecoderModel),
    Cnp(CnpModel),
}

/// A model with the record of how it was trained.
pub struct Loaded {
    pub model: Model,
    /// The checkpoint's provenance record.
    pub provenance: serde_json::Value,
    /// The experiment, for checkpoints written by `train`.
    pub experiment: Option<ExperimentConfig>,
}

impl Loaded {
    pub fn open(path: &Path) -> Result<Self> {
        let c = Checkpoint::load(path)?;
        let model = Model::from_checkpoint(&c)?;
        Ok(Loaded {
            experiment: experiment_of(&c.header.config),
            provenance: c.header.config,
            model,
        })
    }
}

/// What adaptation to one context produced.
pub enum Adapted {
    Params(ParameterVector),
    Code(LatentCode),
    Context(SampleSet),
}

pub struct Fit {
    pub adapted: Adapted,
    /// Inner steps or code-search steps; 0 for a single encoder pass.
    pub steps: usize,
    /// Adaptation wallclock; CNP adaptation only stores the context.
    pub elapsed: Duration,
    /// Code-search loss per step.
    pub curve: Vec<f64>,
}

impl Model {
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Ok(match c.header.mode.as_str() {
            CHECKPOINT_MODE => Model::Meta(MetaModel::from_checkpoint(c)?),
            AUTODECODER_MODE => Model::AutoDecoder(AutoDecoderModel::from_checkpoint(c)?),
            CNP_MODE => Model::Cnp(CnpModel::from_checkpoint(c)?),
            other => return Err(CliError::Usage(format!("unknown checkpoint mode {other:?}"))),
        })
    }

    pub fn method(&self) -> Method {
        match self {
            Model::Meta(_) => Method::Metasdf,
            Model::AutoDecoder(m) if m.config.decoder == DecoderKind::Hyper => Method::AutodecHyper,
            Model::AutoDecoder(_) => Method::AutodecConcat,
            Model::Cnp(_) => Method::Cnp,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Model::Meta(m) => m.config.net.in_dim,
            Model::AutoDecoder(m) => m.config.net.in_dim,
            Model::Cnp(m) => m.config.net.in_dim,
        }
    }

    pub fn check_context(&self, context: &SampleSet) -> Result<()> {
        if context.dim != self.in_dim() {
            return Err(CliError::Usage(format!(
                "{}D context for a {}D {} model",
                context.dim,
                self.in_dim(),
                self.method().name()
            )));
        }
        if context.is_empty() {
            return Err(CliError::Usage("empty context".into()));
        }
        Ok(())
    }

    /// Specialize to `context`: inner loop, latent search or context capture.
    pub fn fit(&self, context: &SampleSet, search: &CodeSearchConfig) -> Result<Fit> {
        self.check_context(context)?;
        Ok(match self {
            Model::Meta(m) => {
                let s = specialize(m, context)?;
                Fit {
                    adapted: Adapted::Params(s.params),
                    steps: s.steps,
                    elapsed: s.elapsed,
                    curve: Vec::new(),
                }
            }
            Model::AutoDecoder(m) => {
                let s = test_time_optimize_code(m, context, search)?;
                Fit {
                    steps: s.steps(),
                    adapted: Adapted::Code(s.code),
                    elapsed: s.elapsed,
                    curve: s.curve,
                }
            }
            Model::Cnp(_) => {
                let start = Instant::now();
                let adapted = Adapted::Context(context.clone());
                Fit {
                    adapted,
                    steps: 0,
                    elapsed: start.elapsed(),
                    curve: Vec::new(),
                }
            }
        })
    }

    pub fn predict(&self, adapted: &Adapted, coords: &Tensor) -> Result<Vec<f64>> {
        Ok(match (self, adapted) {
            (Model::Meta(m), Adapted::Params(p)) => m.predict(p, coords)?,
            (Model::AutoDecoder(m), Adapted::Code(z)) => m.predict(z, coords)?,
            (Model::Cnp(m), Adapted::Context(c)) => cnp_infer(m, c, coords)?.values,
            _ => return Err(CliError::Runtime("adaptation does not belong to this model".into())),
        })
    }

    /// Predicted signed distances on a `resolution^dim` lattice.
    pub fn predict_grid(&self, adapted: &Adapted, resolution: usize) -> Result<SdfGrid> {
        let dim = self.in_dim();
        let grid = grid_eval(
            |x| {
                let v = self.predict(adapted, x).map_err(|e| metasdf::Error::Config(e.to_string()))?;
                Ok(Tensor::matrix(v.len(), 1, v)?)
            },
            dim,
            resolution,
        )?;
        Ok(grid)
    }
}
