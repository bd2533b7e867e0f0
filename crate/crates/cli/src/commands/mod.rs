//! Subcommands.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use metasdf::autodiff::Tensor;
use metasdf::geometry::{chamfer, GRID_EVAL_BATCH};
use metasdf::losses::mean_abs_error;
use metasdf::sdfdata::{sample_dense, sample_levelset, ContextMode, Dataset, SampleSet, SdfGrid, ShapeEntry, Split, TaskSampling};
use rayon::prelude::*;

use crate::io::Geometry;
use crate::model::{Adapted, Loaded, Model};
use crate::{CliError, Result};

mod bench;
mod dataset;
mod eval;
mod export;
mod fit;
mod train;

pub use bench::BenchArgs;
pub use dataset::DatasetArgs;
pub use eval::EvalArgs;
pub use export::ExportArgs;
pub use fit::FitArgs;
pub use train::TrainArgs;

#[derive(Debug, Parser)]
#[command(name = "metasdf", version, about = "Meta-learned signed distance functions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a synthetic corpus or ingest raster images.
    Dataset(DatasetArgs),
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Reconstruct one shape from a context set.
    Fit(FitArgs),
    /// Score checkpoints on a dataset split.
    Eval(EvalArgs),
    /// Write specialized parameter vectors, one row per shape.
    ExportParams(ExportArgs),
    /// Time per-shape inference of several checkpoints.
    Bench(BenchArgs),
}

impl Command {
    pub fn run(self) -> Result<()> {
        match self {
            Command::Dataset(a) => dataset::run(a),
            Command::Train(a) => train::run(a),
            Command::Fit(a) => fit::run(a),
            Command::Eval(a) => eval::run(a),
            Command::ExportParams(a) => export::run(a),
            Command::Bench(a) => bench::run(a),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ContextArg {
    Dense,
    Levelset,
}

impl From<ContextArg> for ContextMode {
    fn from(c: ContextArg) -> Self {
        match c {
            ContextArg::Dense => ContextMode::Dense,
            ContextArg::Levelset => ContextMode::Levelset,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn splits(self) -> Vec<Split> {
        match self {
            SplitArg::Train => vec![Split::Train],
            SplitArg::Val => vec![Split::Val],
            SplitArg::Test => vec![Split::Test],
            SplitArg::All => vec![Split::Train, Split::Val, Split::Test],
        }
    }
}

/// How context sets are drawn from ground-truth grids.
#[derive(Clone, Debug, Args)]
pub struct ContextOpts {
    /// Defaults to the mode the checkpoint was trained with.
    #[arg(long, value_enum)]
    pub context_mode: Option<ContextArg>,
    /// Defaults to the training count, else 1024 dense or 512 level-set points.
    #[arg(long)]
    pub context_points: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ContextOpts {
    pub fn sampling_for(&self, loaded: Option<&Loaded>) -> TaskSampling {
        let trained = loaded.and_then(|l| l.experiment.as_ref()).map(|e| e.sampling());
        let mode = self
            .context_mode
            .map(ContextMode::from)
            .or(trained.map(|s| s.mode))
            .unwrap_or_default();
        let standard = TaskSampling::standard(mode);
        let points = self
            .context_points
            .or(trained.filter(|s| s.mode == mode).map(|s| s.context_points))
            .unwrap_or(standard.context_points);
        TaskSampling {
            mode,
            context_points: points,
            target_points: standard.target_points,
        }
    }
}

/// A context set of the sampling's mode and size.
pub fn draw_context(grid: &SdfGrid, sampling: &TaskSampling, seed: u64) -> Result<SampleSet> {
    if sampling.context_points == 0 {
        return Err(CliError::Usage("context points must be positive".into()));
    }
    Ok(match sampling.mode {
        ContextMode::Dense => sample_dense(grid, Some(sampling.context_points), seed)?,
        ContextMode::Levelset => sample_levelset(grid, sampling.context_points, seed)?,
    })
}

/// Shapes of the given splits, in manifest order; `ids` restricts and orders them.
pub fn load_shapes(dataset: &Path, split: SplitArg, ids: &[String]) -> Result<Vec<(ShapeEntry, SdfGrid)>> {
    let ds = Dataset::open(dataset)?;
    let entries: Vec<ShapeEntry> = if ids.is_empty() {
        split.splits().into_iter().flat_map(|s| ds.entries(s).cloned().collect::<Vec<_>>()).collect()
    } else {
        ids.iter()
            .map(|id| ds.find(id).cloned().ok_or_else(|| CliError::Usage(format!("shape {id:?} not in dataset"))))
            .collect::<Result<_>>()?
    };
    if entries.is_empty() {
        return Err(CliError::Usage(format!("no shapes in the {split:?} split of {}", dataset.display())));
    }
    entries
        .into_par_iter()
        .map(|e| {
            let g = ds.load(&e)?;
            Ok((e, g))
        })
        .collect()
}

/// Predictions at every cell center of `like`.
pub fn predict_on(model: &Model, adapted: &Adapted, like: &SdfGrid) -> Result<SdfGrid> {
    let dim = like.dim();
    let coords = like.all_coords();
    let chunks: Vec<Vec<f64>> = coords
        .par_chunks(GRID_EVAL_BATCH * dim)
        .map(|c| model.predict(adapted, &Tensor::matrix(c.len() / dim, dim, c.to_vec()).map_err(metasdf::Error::from)?))
        .collect::<Result<_>>()?;
    Ok(SdfGrid::new(like.dims().to_vec(), chunks.concat())?)
}

/// Scores of a predicted grid against ground truth on the same lattice.
#[derive(Clone, Copy, Debug)]
pub struct Score {
    pub l1: f64,
    /// `None` when the prediction has no zero level set.
    pub chamfer: Option<f64>,
}

pub fn score(pred: &SdfGrid, truth: &SdfGrid, chamfer_points: usize, seed: u64) -> Result<Score> {
    let l1 = mean_abs_error(pred.values(), truth.values())?;
    let chamfer = if chamfer_points == 0 {
        None
    } else {
        let gt = Geometry::extract(truth)?.samples(chamfer_points, metasdf::seeds::derive_seed(seed, &[1]))?;
        let p = Geometry::extract(pred)?.samples(chamfer_points, metasdf::seeds::derive_seed(seed, &[2]))?;
        match (gt, p) {
            (Some(a), Some(b)) => Some(chamfer(&a, &b)?),
            _ => None,
        }
    };
    Ok(Score { l1, chamfer })
}

pub fn parse_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

pub fn checkpoint_labels(paths: &[PathBuf], models: &[Loaded]) -> Vec<String> {
    let mut labels: Vec<String> = Vec::new();
    for m in models {
        let base = m.model.method().name().to_string();
        let n = labels.iter().filter(|l| l.split('#').next() == Some(&base)).count();
        labels.push(if n == 0 { base } else { format!("{base}#{}", n + 1) });
    }
    debug_assert_eq!(labels.len(), paths.len());
    labels
}

pub fn open_checkpoints(paths: &[PathBuf]) -> Result<Vec<Loaded>> {
    if paths.is_empty() {
        return Err(CliError::Usage("at least one --checkpoint is required".into()));
    }
    paths.iter().map(|p| Loaded::open(p)).collect()
}

pub fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}
