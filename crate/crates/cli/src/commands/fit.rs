use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use metasdf::meta::inner_adapt;
use metasdf::sdfdata::{write_grid, SampleSet, SdfGrid};
use serde_json::json;

use super::{draw_context, load_shapes, ms, predict_on, score, ContextOpts, SplitArg};
use crate::io::{csv_string, read_context_csv, samples_csv, write_json, write_text, Geometry};
use crate::model::{Adapted, Fit, Loaded, Model};
use crate::{CliError, Result};

pub const SNAPSHOT_DIR: &str = "snapshots";
pub const FIT_FILE: &str = "fit.json";

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset holding `--shape`; the context is drawn from its grid.
    #[arg(long, requires = "shape", conflicts_with = "context")]
    pub dataset: Option<PathBuf>,
    #[arg(long, requires = "dataset")]
    pub shape: Option<String>,
    /// CSV of `x, y[, z], sdf` context rows.
    #[arg(long, required_unless_present = "dataset")]
    pub context: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub ctx: ContextOpts,
    /// Output lattice resolution; defaults to the shape's own grid, else 64.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Fit with this many context seeds and keep the lowest-Chamfer result.
    #[arg(long, default_value_t = 1)]
    pub best_of: usize,
    #[arg(long, default_value_t = 2000)]
    pub chamfer_points: usize,
}

struct Run {
    seed: u64,
    context: SampleSet,
    fit: Fit,
    grid: SdfGrid,
    predict_ms: f64,
    l1: Option<f64>,
    chamfer: Option<f64>,
}

pub fn run(a: FitArgs) -> Result<()> {
    if a.best_of == 0 {
        return Err(CliError::Usage("--best-of must be at least 1".into()));
    }
    if a.best_of > 1 && a.dataset.is_none() {
        return Err(CliError::Usage("--best-of needs a ground-truth shape (--dataset and --shape)".into()));
    }
    let loaded = Loaded::open(&a.checkpoint)?;
    let model = &loaded.model;
    let search = loaded
        .experiment
        .as_ref()
        .map(|e| e.hyperparameters.code_search)
        .unwrap_or_default();
    let truth = match (&a.dataset, &a.shape) {
        (Some(d), Some(id)) => Some(load_shapes(d, SplitArg::All, std::slice::from_ref(id))?.remove(0)),
        _ => None,
    };
    let resolution = a
        .resolution
        .or(truth.as_ref().map(|t| t.1.dims()[0]))
        .unwrap_or(64);
    if resolution == 0 {
        return Err(CliError::Usage("--resolution must be positive".into()));
    }
    let sampling = a.ctx.sampling_for(Some(&loaded));

    let mut runs = Vec::new();
    for i in 0..a.best_of as u64 {
        let seed = a.ctx.seed + i;
        let context = match (&truth, &a.context) {
            (Some((_, g)), _) => draw_context(g, &sampling, seed)?,
            (None, Some(path)) => read_context_csv(path)?,
            (None, None) => unreachable!("clap requires a context source"),
        };
        let fit = model.fit(&context, &search)?;
        let t = Instant::now();
        let grid = match &truth {
            Some((_, g)) if g.dims().iter().all(|&n| n == resolution) => predict_on(model, &fit.adapted, g)?,
            _ => model.predict_grid(&fit.adapted, resolution)?,
        };
        let predict_ms = ms(t.elapsed());
        let (l1, chamfer) = match &truth {
            Some((_, g)) if g.dims() == grid.dims() => {
                let s = score(&grid, g, a.chamfer_points, seed)?;
                (Some(s.l1), s.chamfer)
            }
            _ => (None, None),
        };
        runs.push(Run {
            seed,
            context,
            fit,
            grid,
            predict_ms,
            l1,
            chamfer,
        });
    }
    let best = (0..runs.len())
        .min_by(|&i, &j| {
            let key = |r: &Run| r.chamfer.unwrap_or(f64::INFINITY);
            key(&runs[i]).total_cmp(&key(&runs[j]))
        })
        .expect("at least one run");
    let run = &runs[best];

    let provenance = json!({
        "software": metasdf::checkpoint::version_string(),
        "checkpoint": a.checkpoint,
        "checkpoint_provenance": loaded.provenance,
        "shape": a.shape,
        "dataset": a.dataset,
        "context_file": a.context,
        "sampling": sampling,
        "resolution": resolution,
        "best_of": a.best_of,
        "seed": a.ctx.seed,
    });
    let out = &a.out;
    write_text(&out.join("context.csv"), &samples_csv(&provenance, &run.context))?;
    write_grid(&out.join("prediction.sdfg"), &run.grid)?;
    let geometry = Geometry::extract(&run.grid)?;
    geometry.write(out, "reconstruction", &provenance)?;

    let mut extra = json!({});
    match (model, &run.fit.adapted) {
        (Model::Meta(m), Adapted::Params(p)) => {
            let header: Vec<String> = (0..p.len()).map(|i| format!("p{i}")).collect();
            write_text(
                &out.join("params.csv"),
                &csv_string(&provenance, &header, [p.data().iter().map(|v| format!("{v:e}")).collect()]),
            )?;
            // Geometry after every inner step φ⁰ … φᵏ.
            let a = inner_adapt(m, &run.context)?;
            let dir = out.join(SNAPSHOT_DIR);
            let mut files = Vec::new();
            for (j, phi) in a.trajectory.iter().enumerate() {
                let g = model.predict_grid(&Adapted::Params(phi.clone()), resolution)?;
                files.extend(Geometry::extract(&g)?.write(&dir, &format!("step_{j}"), &provenance)?);
            }
            extra = json!({
                "snapshots": a.trajectory.len(),
                "snapshot_files": files.iter().map(|f| f.strip_prefix(out).unwrap_or(f)).collect::<Vec<_>>(),
                "inner_context_losses": a.context_losses,
            });
        }
        (Model::AutoDecoder(_), Adapted::Code(z)) => {
            let header: Vec<String> = (0..z.dim()).map(|i| format!("z{i}")).collect();
            write_text(
                &out.join("code.csv"),
                &csv_string(&provenance, &header, [z.values().iter().map(|v| format!("{v:e}")).collect()]),
            )?;
            let rows = run.fit.curve.iter().enumerate().map(|(s, l)| vec![s.to_string(), format!("{l:e}")]);
            write_text(
                &out.join("loss_curve.csv"),
                &csv_string(&provenance, &["step".into(), "loss".into()], rows),
            )?;
        }
        _ => {}
    }

    let run_json = |r: &Run| {
        json!({
            "seed": r.seed,
            "steps": r.fit.steps,
            "wallclock_ms": ms(r.fit.elapsed),
            "predict_ms": r.predict_ms,
            "l1": r.l1,
            "chamfer": r.chamfer,
        })
    };
    let mut body = json!({
        "method": model.method().name(),
        "steps": run.fit.steps,
        "wallclock_ms": ms(run.fit.elapsed),
        "context_points": run.context.len(),
        "empty_geometry": geometry.is_empty(),
        "best_run": best,
        "runs": runs.iter().map(run_json).collect::<Vec<_>>(),
    });
    if let (Some(b), Some(e)) = (body.as_object_mut(), extra.as_object()) {
        b.extend(e.clone());
    }
    write_json(&out.join(FIT_FILE), &provenance, body)?;
    println!(
        "{}: {} steps in {:.2} ms, l1 {:?}, chamfer {:?}; wrote {}",
        model.method().name(),
        run.fit.steps,
        ms(run.fit.elapsed),
        run.l1,
        run.chamfer,
        out.display()
    );
    Ok(())
}
