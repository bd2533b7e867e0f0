//! Experiment configuration files.

use std::path::{Path, PathBuf};

use metasdf::baselines::{AutoDecoderConfig, CnpConfig, CodeSearchConfig, DecoderKind};
use metasdf::losses::LossKind;
use metasdf::meta::{MetaConfig, MetaTrainConfig};
use metasdf::nets::{MlpConfig, Pooling};
use metasdf::sdfdata::{ContextMode, TaskSampling};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Metasdf,
    AutodecConcat,
    AutodecHyper,
    Cnp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Metasdf => "metasdf",
            Method::AutodecConcat => "autodec-concat",
            Method::AutodecHyper => "autodec-hyper",
            Method::Cnp => "cnp",
        }
    }
}

/// Every tunable of every method; each method reads the fields it uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub k: usize,
    pub alpha_init: f64,
    pub per_step_alpha: bool,
    pub first_order: bool,
    pub inner_loss: LossKind,
    /// Training loss of every method; the meta-learner's outer loss.
    pub outer_loss: LossKind,
    pub lr: f64,
    pub lr_halving_steps: Option<usize>,
    pub batch: usize,
    /// Defaults to 32² for dense and 512 for level-set contexts.
    pub context_points: Option<usize>,
    pub target_points: usize,
    /// Defaults to 50, or 150 for the auto-decoders.
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub divergence_threshold: f64,
    pub latent_dim: usize,
    pub hyper_hidden: usize,
    pub encoder_hidden: usize,
    pub pooling: Pooling,
    pub code_reg_weight: f64,
    pub code_init_std: f64,
    pub code_search: CodeSearchConfig,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        let meta = MetaConfig::planar();
        let ad = AutoDecoderConfig::default();
        Hyperparameters {
            hidden_dim: meta.net.hidden_dim,
            num_layers: meta.net.num_layers,
            k: meta.k,
            alpha_init: meta.alpha_init,
            per_step_alpha: meta.per_step_alpha,
            first_order: meta.first_order,
            inner_loss: meta.inner_loss,
            outer_loss: meta.outer_loss,
            lr: meta.beta,
            lr_halving_steps: None,
            batch: meta.batch_tasks,
            context_points: None,
            target_points: TaskSampling::default().target_points,
            epochs: None,
            max_steps: None,
            divergence_threshold: 1e3,
            latent_dim: ad.latent_dim,
            hyper_hidden: ad.hyper_hidden,
            encoder_hidden: CnpConfig::default().encoder_hidden,
            pooling: Pooling::Mean,
            code_reg_weight: ad.code_reg_weight,
            code_init_std: ad.code_init_std,
            code_search: CodeSearchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub dataset: PathBuf,
    #[serde(default)]
    pub context_mode: ContextMode,
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
    #[serde(default)]
    pub hyperparameters: Hyperparameters,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Fully resolved form recorded with every artifact.
    pub fn provenance(&self) -> serde_json::Value {
        serde_json::json!({
            "experiment": self,
            "software": metasdf::checkpoint::version_string(),
        })
    }

    pub fn sampling(&self) -> TaskSampling {
        let h = &self.hyperparameters;
        let standard = TaskSampling::standard(self.context_mode);
        TaskSampling {
            mode: self.context_mode,
            context_points: h.context_points.unwrap_or(standard.context_points),
            target_points: h.target_points,
        }
    }

    fn net(&self, in_dim: usize) -> MlpConfig {
        let h = &self.hyperparameters;
        MlpConfig::new(in_dim, h.hidden_dim, h.num_layers, h.outer_loss.out_dim())
    }

    fn epochs(&self, default: usize) -> usize {
        self.hyperparameters.epochs.unwrap_or(default)
    }

    pub fn meta(&self, in_dim: usize) -> MetaTrainConfig {
        let h = &self.hyperparameters;
        MetaTrainConfig {
            meta: MetaConfig {
                net: self.net(in_dim),
                k: h.k,
                beta: h.lr,
                alpha_init: h.alpha_init,
                per_step_alpha: h.per_step_alpha,
                first_order: h.first_order,
                inner_loss: h.inner_loss,
                outer_loss: h.outer_loss,
                batch_tasks: h.batch,
            },
            sampling: self.sampling(),
            epochs: self.epochs(50),
            max_steps: h.max_steps,
            divergence_threshold: h.divergence_threshold,
            seed: self.seed,
        }
    }

    pub fn autodecoder(&self, in_dim: usize) -> AutoDecoderConfig {
        let h = &self.hyperparameters;
        AutoDecoderConfig {
            decoder: if self.method == Method::AutodecHyper {
                DecoderKind::Hyper
            } else {
                DecoderKind::Concat
            },
            net: self.net(in_dim),
            latent_dim: h.latent_dim,
            hyper_hidden: h.hyper_hidden,
            loss: h.outer_loss,
            code_reg_weight: h.code_reg_weight,
            code_init_std: h.code_init_std,
            lr: h.lr,
            lr_halving_steps: h.lr_halving_steps,
            batch_shapes: h.batch,
            target_points: Some(h.target_points),
            epochs: self.epochs(150),
            max_steps: h.max_steps,
            divergence_threshold: h.divergence_threshold,
            seed: self.seed,
        }
    }

    pub fn cnp(&self, in_dim: usize) -> CnpConfig {
        let h = &self.hyperparameters;
        CnpConfig {
            net: self.net(in_dim),
            latent_dim: h.latent_dim,
            encoder_hidden: h.encoder_hidden,
            pooling: h.pooling,
            loss: h.outer_loss,
            lr: h.lr,
            batch_tasks: h.batch,
            sampling: self.sampling(),
            epochs: self.epochs(50),
            max_steps: h.max_steps,
            divergence_threshold: h.divergence_threshold,
            seed: self.seed,
        }
    }

    /// Reject settings the chosen method cannot run with.
    pub fn validate(&self, in_dim: usize) -> Result<(), CliError> {
        let r = match self.method {
            Method::Metasdf => self.meta(in_dim).meta.validate(),
            Method::AutodecConcat | Method::AutodecHyper => self.autodecoder(in_dim).validate(),
            Method::Cnp => self.cnp(in_dim).validate(),
        };
        r.map_err(|e| CliError::Usage(e.to_string()))?;
        let h = &self.hyperparameters;
        if h.target_points == 0 || h.context_points == Some(0) || h.epochs == Some(0) {
            return Err(CliError::Usage("point counts and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// The experiment recorded in a checkpoint written by `train`, if any.
pub fn experiment_of(provenance: &serde_json::Value) -> Option<ExperimentConfig> {
    serde_json::from_value(provenance.get("experiment")?.clone()).ok()
}
