use std::path::PathBuf;

use clap::{Args, ValueEnum};
use metasdf::sdfdata::{
    build_analytic_corpus, build_glyph_corpus, ingest_rasters, AnalyticCorpusConfig, CorpusConfig, CorpusKind, Split,
    Variant,
};

use crate::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Synthetic {
    Glyphs,
    Blobs,
    /// Random 3D primitives and CSG combinations.
    Analytic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Plain,
    Rotate,
    Compose,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, conflicts_with = "input", required_unless_present = "input")]
    pub synthetic: Option<Synthetic>,
    /// Directory of PNG/PGM rasters, one subdirectory per class.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub count: usize,
    /// Grid resolution per axis.
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated class labels to generate.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    /// Classes sent entirely to the test split.
    #[arg(long, value_delimiter = ',')]
    pub holdout_classes: Vec<String>,
    #[arg(long, value_enum, default_value_t = VariantArg::Plain)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 0.0)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub test_fraction: f64,
}

fn class_numbers(labels: &[String], flag: &str) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| l.parse().map_err(|_| CliError::Usage(format!("--{flag}: {l:?} is not a class number"))))
        .collect()
}

pub fn run(a: DatasetArgs) -> Result<()> {
    let manifest = match (a.synthetic, &a.input) {
        (_, Some(input)) => {
            if a.variant != VariantArg::Plain || !a.classes.is_empty() {
                return Err(CliError::Usage("--variant and --classes apply to synthetic corpora only".into()));
            }
            ingest_rasters(input, &a.out, &a.holdout_classes, a.seed)?
        }
        (Some(Synthetic::Analytic), None) => {
            if a.variant != VariantArg::Plain || !a.classes.is_empty() || !a.holdout_classes.is_empty() {
                return Err(CliError::Usage("analytic corpora take no classes or variants".into()));
            }
            let cfg = AnalyticCorpusConfig {
                count: a.count,
                resolution: a.res,
                val_fraction: a.val_fraction,
                test_fraction: a.test_fraction,
                seed: a.seed,
            };
            build_analytic_corpus(&cfg, &a.out).map_err(usage_if_config)?
        }
        (Some(kind), None) => {
            let mut cfg = CorpusConfig {
                kind: if kind == Synthetic::Blobs {
                    CorpusKind::Blobs
                } else {
                    CorpusKind::Glyphs
                },
                count: a.count,
                resolution: a.res,
                holdout_classes: class_numbers(&a.holdout_classes, "holdout-classes")?,
                variant: match a.variant {
                    VariantArg::Plain => Variant::Plain,
                    VariantArg::Rotate => Variant::Rotate,
                    VariantArg::Compose => Variant::Compose,
                },
                val_fraction: a.val_fraction,
                test_fraction: a.test_fraction,
                seed: a.seed,
                ..CorpusConfig::default()
            };
            if !a.classes.is_empty() {
                cfg.classes = class_numbers(&a.classes, "classes")?;
            }
            build_glyph_corpus(&cfg, &a.out).map_err(usage_if_config)?
        }
        (None, None) => return Err(CliError::Usage("one of --synthetic or --input is required".into())),
    };
    let count = |s: Split| manifest.shapes.iter().filter(|e| e.split == s).count();
    println!(
        "{} shapes in {} (train {}, val {}, test {})",
        manifest.shapes.len(),
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn usage_if_config(e: metasdf::Error) -> CliError {
    match e {
        metasdf::Error::Config(m) => CliError::Usage(m),
        other => other.into(),
    }
}
