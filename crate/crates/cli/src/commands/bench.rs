use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use metasdf::sdfdata::sample_dense;
use metasdf::seeds::derive_seed;
use serde_json::{json, Value};

use super::{checkpoint_labels, draw_context, load_shapes, ms, open_checkpoints, ContextOpts, SplitArg};
use crate::io::{median, write_json};
use crate::{CliError, Result};

/// Query points decoded per shape in the end-to-end timing.
pub const BENCH_QUERIES: usize = 1024;

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Number of shapes taken from the split.
    #[arg(long, default_value_t = 8)]
    pub shapes: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Report JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub ctx: ContextOpts,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median with the interquartile range as the run-to-run noise band.
fn timing(v: &[f64]) -> Value {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    json!({
        "median_ms": median(v),
        "noise_band_ms": [quantile(&s, 0.25), quantile(&s, 0.75)],
        "min_ms": s[0],
        "max_ms": s[s.len() - 1],
    })
}

pub fn run(a: BenchArgs) -> Result<()> {
    if a.shapes == 0 || a.repeats == 0 {
        return Err(CliError::Usage("--shapes and --repeats must be positive".into()));
    }
    let models = open_checkpoints(&a.checkpoints)?;
    let labels = checkpoint_labels(&a.checkpoints, &models);
    let mut shapes = load_shapes(&a.dataset, a.split, &[])?;
    shapes.truncate(a.shapes);

    let mut methods = Vec::new();
    let mut medians = Vec::new();
    for (loaded, label) in models.iter().zip(&labels) {
        let sampling = a.ctx.sampling_for(Some(loaded));
        let search = loaded
            .experiment
            .as_ref()
            .map(|e| e.hyperparameters.code_search)
            .unwrap_or_default();
        let (mut adapt, mut total, mut steps) = (Vec::new(), Vec::new(), Vec::new());
        for (i, (_, grid)) in shapes.iter().enumerate() {
            let seed = derive_seed(a.ctx.seed, &[i as u64]);
            let context = draw_context(grid, &sampling, seed)?;
            let queries = sample_dense(grid, Some(BENCH_QUERIES.min(grid.len())), seed ^ 1)?.coords_tensor();
            // Untimed warm-up.
            let f = loaded.model.fit(&context, &search)?;
            loaded.model.predict(&f.adapted, &queries)?;
            for _ in 0..a.repeats {
                let t = Instant::now();
                let f = loaded.model.fit(&context, &search)?;
                loaded.model.predict(&f.adapted, &queries)?;
                total.push(ms(t.elapsed()));
                adapt.push(ms(f.elapsed));
                steps.push(f.steps as f64);
            }
        }
        let (ta, tt) = (timing(&adapt), timing(&total));
        println!(
            "{label:>16}: adapt {:.3} ms, adapt + {BENCH_QUERIES} queries {:.3} ms, median steps {}",
            ta["median_ms"].as_f64().unwrap_or(f64::NAN),
            tt["median_ms"].as_f64().unwrap_or(f64::NAN),
            median(&steps)
        );
        medians.push((median(&adapt), median(&total)));
        methods.push(json!({
            "method": label,
            "samples": adapt.len(),
            "median_steps": median(&steps),
            "adapt": ta,
            "adapt_and_predict": tt,
        }));
    }
    let mut ratios = Vec::new();
    for (i, a_label) in labels.iter().enumerate() {
        for (j, b_label) in labels.iter().enumerate() {
            if i != j {
                ratios.push(json!({
                    "numerator": a_label,
                    "denominator": b_label,
                    "adapt": medians[i].0 / medians[j].0,
                    "adapt_and_predict": medians[i].1 / medians[j].1,
                }));
            }
        }
    }
    let provenance = json!({
        "software": metasdf::checkpoint::version_string(),
        "dataset": a.dataset,
        "checkpoints": a.checkpoints,
        "checkpoint_provenance": models.iter().map(|m| &m.provenance).collect::<Vec<_>>(),
        "shapes": shapes.iter().map(|s| &s.0.id).collect::<Vec<_>>(),
        "repeats": a.repeats,
        "seed": a.ctx.seed,
        "threads": rayon::current_num_threads(),
    });
    let body = json!({ "methods": methods, "ratios": ratios });
    match &a.out {
        Some(p) => write_json(p, &provenance, body)?,
        None => println!("{}", serde_json::to_string_pretty(&json!({ "provenance": provenance, "report": body })).expect("json")),
    }
    Ok(())
}
