use std::path::PathBuf;

use clap::Args;
use metasdf::meta::specialize;
use metasdf::seeds::derive_seed;
use rayon::prelude::*;
use serde_json::json;

use super::{draw_context, load_shapes, ContextOpts, SplitArg};
use crate::io::{csv_string, write_text};
use crate::model::{Loaded, Model};
use crate::{CliError, Result};

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// A metasdf checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub ctx: ContextOpts,
}

pub fn run(a: ExportArgs) -> Result<()> {
    let loaded = Loaded::open(&a.checkpoint)?;
    let Model::Meta(model) = &loaded.model else {
        return Err(CliError::Usage(format!(
            "export-params needs a metasdf checkpoint, got {}",
            loaded.model.method().name()
        )));
    };
    let shapes = load_shapes(&a.dataset, a.split, &[])?;
    let sampling = a.ctx.sampling_for(Some(&loaded));
    let rows: Vec<Vec<String>> = shapes
        .par_iter()
        .enumerate()
        .map(|(i, (entry, grid))| {
            let context = draw_context(grid, &sampling, derive_seed(a.ctx.seed, &[i as u64]))?;
            loaded.model.check_context(&context)?;
            let s = specialize(model, &context)?;
            let mut row = vec![entry.id.clone(), entry.class.clone()];
            row.extend(s.params.data().iter().map(|v| format!("{v:e}")));
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let provenance = json!({
        "software": metasdf::checkpoint::version_string(),
        "checkpoint": a.checkpoint,
        "checkpoint_provenance": loaded.provenance,
        "dataset": a.dataset,
        "sampling": sampling,
        "seed": a.ctx.seed,
    });
    let mut header = vec!["id".to_string(), "class".to_string()];
    header.extend((0..model.theta.len()).map(|i| format!("p{i}")));
    write_text(&a.out, &csv_string(&provenance, &header, rows))?;
    println!("{} rows of {} parameters to {}", shapes.len(), model.theta.len(), a.out.display());
    Ok(())
}
