//! Comparison methods: auto-decoders with test-time code search, and a
//! conditional neural process that encodes the context in one forward pass.

mod autodecoder;
mod cnp;

pub use autodecoder::{
    test_time_optimize_code, train_autodecoder, AutoDecoderConfig, AutoDecoderModel, CodeSearch,
    CodeSearchConfig, DecoderKind, AUTODECODER_MODE,
};
pub use cnp::{cnp_infer, cnp_task_error, train_cnp, CnpConfig, CnpModel, CnpPrediction, CNP_MODE};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{loss, CompositeLossState, LossKind, LossTerms};

const INIT_STREAM: u64 = 10;
const CODE_STREAM: u64 = 11;
const EPOCH_STREAM: u64 = 12;
const SAMPLE_STREAM: u64 = 13;
const VAL_STREAM: u64 = 14;

fn default_divergence() -> f64 {
    1e3
}

/// Log-variance leaves; constants unless trained.
fn log_var_vars(g: &Graph, s: &CompositeLossState, trainable: bool) -> (Var, Var) {
    let mk = |v: f64| {
        if trainable {
            g.param(crate::autodiff::Tensor::scalar(v))
        } else {
            g.constant(crate::autodiff::Tensor::scalar(v))
        }
    };
    (mk(s.log_var_sdf), mk(s.log_var_sign))
}

fn reconstruction_loss(g: &Graph, kind: LossKind, pred: Var, target: Var, lv: (Var, Var)) -> Result<LossTerms> {
    loss(g, kind, pred, target, Some(lv))
}

fn check_out_dim(what: &str, kind: LossKind, out_dim: usize) -> Result<()> {
    if kind.out_dim() != out_dim {
        return Err(Error::Config(format!(
            "{what}: loss {kind:?} needs {} outputs, network has {out_dim}",
            kind.out_dim()
        )));
    }
    Ok(())
}

fn check_divergence(step: usize, loss: f64, threshold: f64) -> Result<()> {
    if !loss.is_finite() || loss > threshold {
        return Err(Error::Diverged { step, loss });
    }
    Ok(())
}
