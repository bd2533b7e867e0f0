use std::path::PathBuf;

use clap::Args;
use metasdf::seeds::derive_seed;
use rayon::prelude::*;
use serde_json::json;

use super::{
    checkpoint_labels, draw_context, load_shapes, ms, open_checkpoints, predict_on, score, ContextOpts, Score,
    SplitArg,
};
use crate::io::{csv_string, median, stats, write_json, write_text};
use crate::Result;

pub const PER_SHAPE_FILE: &str = "per_shape.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TABLE_FILE: &str = "table.csv";
pub const ORACLE_LABEL: &str = "oracle";

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoints to compare; repeat the flag for each.
    #[arg(long = "checkpoint", required_unless_present = "oracle")]
    pub checkpoints: Vec<PathBuf>,
    /// Also score the ground-truth grids themselves.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Comma-separated shape ids instead of a whole split.
    #[arg(long, value_delimiter = ',')]
    pub shapes: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub ctx: ContextOpts,
    /// Surface samples per shape for Chamfer; 0 skips geometry.
    #[arg(long, default_value_t = 2000)]
    pub chamfer_points: usize,
}

struct Row {
    label: String,
    shape: String,
    class: String,
    score: Score,
    steps: usize,
    fit_ms: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub fn run(a: EvalArgs) -> Result<()> {
    let shapes = load_shapes(&a.dataset, a.split, &a.shapes)?;
    let models = if a.checkpoints.is_empty() {
        Vec::new()
    } else {
        open_checkpoints(&a.checkpoints)?
    };
    let mut labels = checkpoint_labels(&a.checkpoints, &models);
    let mut rows: Vec<Row> = Vec::new();
    let mut samplings = Vec::new();
    for (loaded, label) in models.iter().zip(&labels) {
        let sampling = a.ctx.sampling_for(Some(loaded));
        samplings.push(json!({ "method": label, "sampling": sampling }));
        let search = loaded
            .experiment
            .as_ref()
            .map(|e| e.hyperparameters.code_search)
            .unwrap_or_default();
        let scored: Vec<Row> = shapes
            .par_iter()
            .enumerate()
            .map(|(i, (entry, grid))| {
                let seed = derive_seed(a.ctx.seed, &[i as u64]);
                let context = draw_context(grid, &sampling, seed)?;
                let fit = loaded.model.fit(&context, &search)?;
                let pred = predict_on(&loaded.model, &fit.adapted, grid)?;
                Ok(Row {
                    label: label.clone(),
                    shape: entry.id.clone(),
                    class: entry.class.clone(),
                    score: score(&pred, grid, a.chamfer_points, seed)?,
                    steps: fit.steps,
                    fit_ms: ms(fit.elapsed),
                })
            })
            .collect::<Result<_>>()?;
        rows.extend(scored);
    }
    if a.oracle {
        labels.push(ORACLE_LABEL.into());
        let scored: Vec<Row> = shapes
            .par_iter()
            .enumerate()
            .map(|(i, (entry, grid))| {
                Ok(Row {
                    label: ORACLE_LABEL.into(),
                    shape: entry.id.clone(),
                    class: entry.class.clone(),
                    score: score(grid, grid, a.chamfer_points, derive_seed(a.ctx.seed, &[i as u64]))?,
                    steps: 0,
                    fit_ms: 0.0,
                })
            })
            .collect::<Result<_>>()?;
        rows.extend(scored);
    }

    let provenance = json!({
        "software": metasdf::checkpoint::version_string(),
        "dataset": a.dataset,
        "split": format!("{:?}", a.split).to_lowercase(),
        "shapes": shapes.iter().map(|s| &s.0.id).collect::<Vec<_>>(),
        "checkpoints": a.checkpoints,
        "checkpoint_provenance": models.iter().map(|m| &m.provenance).collect::<Vec<_>>(),
        "contexts": samplings,
        "seed": a.ctx.seed,
        "chamfer_points": a.chamfer_points,
    });
    let header = ["method", "shape", "class", "l1", "chamfer", "steps", "fit_ms"].map(String::from);
    let per_shape = rows.iter().map(|r| {
        vec![
            r.label.clone(),
            r.shape.clone(),
            r.class.clone(),
            format!("{:e}", r.score.l1),
            fmt_opt(r.score.chamfer),
            r.steps.to_string(),
            format!("{:.3}", r.fit_ms),
        ]
    });
    write_text(&a.out.join(PER_SHAPE_FILE), &csv_string(&provenance, &header, per_shape))?;

    let mut methods = Vec::new();
    let mut table = Vec::new();
    for label in &labels {
        let mine: Vec<&Row> = rows.iter().filter(|r| &r.label == label).collect();
        let l1: Vec<f64> = mine.iter().map(|r| r.score.l1).collect();
        let ch: Vec<f64> = mine.iter().filter_map(|r| r.score.chamfer).collect();
        let empty = if a.chamfer_points == 0 { 0 } else { mine.len() - ch.len() };
        let (s1, s2) = (stats(&l1), stats(&ch));
        table.push(vec![
            label.clone(),
            mine.len().to_string(),
            fmt_opt(s1["mean"].as_f64()),
            fmt_opt(s1["median"].as_f64()),
            fmt_opt(s1["std"].as_f64()),
            fmt_opt(s2["mean"].as_f64()),
            fmt_opt(s2["median"].as_f64()),
            fmt_opt(s2["std"].as_f64()),
            empty.to_string(),
        ]);
        let fit_ms: Vec<f64> = mine.iter().map(|r| r.fit_ms).collect();
        methods.push(json!({
            "method": label,
            "shapes": mine.len(),
            "l1": s1,
            "chamfer": s2,
            "empty_geometry": empty,
            "median_fit_ms": median(&fit_ms),
        }));
        println!(
            "{label:>16}: l1 mean {} median {}  chamfer mean {} ({empty} empty)",
            fmt_opt(s1["mean"].as_f64()),
            fmt_opt(s1["median"].as_f64()),
            fmt_opt(s2["mean"].as_f64()),
        );
    }
    let table_header = [
        "method",
        "shapes",
        "l1_mean",
        "l1_median",
        "l1_std",
        "chamfer_mean",
        "chamfer_median",
        "chamfer_std",
        "empty_geometry",
    ]
    .map(String::from);
    write_text(&a.out.join(TABLE_FILE), &csv_string(&provenance, &table_header, table))?;
    write_json(&a.out.join(SUMMARY_FILE), &provenance, json!({ "methods": methods }))?;
    Ok(())
}
