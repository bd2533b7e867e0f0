use std::path::{Path, PathBuf};

use clap::Args;
use metasdf::baselines::{train_autodecoder, train_cnp};
use metasdf::checkpoint::MetricLog;
use metasdf::meta::{validation_tasks, MetaTrainer, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE};
use metasdf::sdfdata::{Dataset, SdfGrid, Split};
use metasdf::seeds::derive_seed;

use crate::config::{ExperimentConfig, Method};
use crate::io::{create_dir, samples_csv, write_json, write_text};
use crate::{CliError, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const CONTEXT_SAMPLE_FILE: &str = "context_sample.csv";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from the state saved in the output directory.
    #[arg(long)]
    pub resume: bool,
}

fn split(ds: &Dataset, s: Split) -> Result<Vec<(String, SdfGrid)>> {
    Ok(ds.load_split(s)?.into_iter().map(|(e, g)| (e.id, g)).collect())
}

pub fn run(a: TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let ds = Dataset::open(&cfg.dataset)?;
    let train = split(&ds, Split::Train)?;
    let val = split(&ds, Split::Val)?;
    let Some((first_id, first)) = train.first() else {
        return Err(CliError::Usage(format!("{} has no training shapes", cfg.dataset.display())));
    };
    let in_dim = first.dim();
    cfg.validate(in_dim)?;
    if a.resume && cfg.method != Method::Metasdf {
        return Err(CliError::Usage("--resume is supported for metasdf training only".into()));
    }
    let out = &cfg.output;
    create_dir(out)?;
    let provenance = cfg.provenance();
    write_json(&out.join(CONFIG_FILE), &provenance, serde_json::json!({}))?;

    // One context draw under the configured sampling, for inspection.
    let sample = cfg.sampling().task(first_id, first, derive_seed(cfg.seed, &[u64::MAX]))?;
    write_text(&out.join(CONTEXT_SAMPLE_FILE), &samples_csv(&provenance, &sample.context))?;

    let (checkpoint, mut log) = match cfg.method {
        Method::Metasdf => return train_meta(&cfg, &train, &val, out, a.resume),
        Method::AutodecConcat | Method::AutodecHyper => {
            let (m, log) = train_autodecoder(&train, &cfg.autodecoder(in_dim))?;
            (m.to_checkpoint(provenance.clone()), log)
        }
        Method::Cnp => {
            let (m, log) = train_cnp(&train, &val, &cfg.cnp(in_dim))?;
            (m.to_checkpoint(provenance.clone()), log)
        }
    };
    log.config = provenance;
    let mut checkpoint = checkpoint;
    checkpoint.header.step = log.rows.len();
    checkpoint.header.metric = log.last_val().or(log.rows.last().map(|r| r.outer_loss));
    checkpoint.save(&out.join(BEST_CHECKPOINT))?;
    log.save(&out.join(METRICS_FILE))?;
    report(&log, out);
    Ok(())
}

fn train_meta(
    cfg: &ExperimentConfig,
    train: &[(String, SdfGrid)],
    val: &[(String, SdfGrid)],
    out: &Path,
    resume: bool,
) -> Result<()> {
    let tc = cfg.meta(train[0].1.dim());
    let provenance = cfg.provenance();
    let mut trainer = if resume && out.join(LAST_CHECKPOINT).exists() {
        MetaTrainer::load(tc.clone(), out)?
    } else {
        if resume {
            log::warn!("nothing to resume in {}; starting fresh", out.display());
        }
        MetaTrainer::new(tc.clone())?
    };
    trainer.provenance = provenance.clone();
    trainer.log.config = provenance;
    let val_tasks = validation_tasks(val, &tc.sampling, tc.seed)?;
    while !trainer.finished() {
        let r = trainer.run_epoch(train, &val_tasks);
        trainer.save(out)?;
        r?;
    }
    report(&trainer.log, out);
    Ok(())
}

fn report(log: &MetricLog, out: &Path) {
    let last = log.rows.last().map(|r| r.outer_loss).unwrap_or(f64::NAN);
    println!(
        "{} steps, final train loss {last:.5}, val {:?}; wrote {}",
        log.rows.len(),
        log.last_val(),
        out.display()
    );
}
