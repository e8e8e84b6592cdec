//! Configuration files, experiment orchestration and the command-line front end.

pub mod cli;
mod config;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    make_splits, AblateConfig, DataConfig, InterveneConfig, RunConfig, SaliencyConfig, Splits, SplitConfig,
    SweepConfig,
};

use crate::graphs::{ContextModel, Dataset, GraphError, MultiViewSample};
use crate::peeling::{extract_saliency, render_svg, saliency_json, trace_batch, BatchInput, PeelError, PeelModel};
use crate::theory::TheoryError;
use crate::trainer::{evaluate, metrics, predict, train, Metrics, TrainConfig, TrainError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] PeelError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("test set has {n} samples, fewer than the largest batch size {b}")]
    TestSetTooSmall { n: usize, b: usize },
    #[error("theory checks failed: {0:?}")]
    TheoryChecksFailed(Vec<String>),
    #[error("usage: {0}")]
    Usage(String),
}

impl HarnessError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config { .. } => "config",
            Self::Io { .. } => "io",
            Self::Graph(_) => "data",
            Self::Train(_) => "train",
            Self::Model(_) => "model",
            Self::Theory(_) => "theory",
            Self::TestSetTooSmall { .. } => "data",
            Self::TheoryChecksFailed(_) => "check-failed",
            Self::Usage(_) => "usage",
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One cell of the re-batching grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRow {
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
    pub r2: f64,
    /// Global Pearson(c^(L), y).
    pub final_corr: f64,
    /// Global Pearson(c^(ℓ), y) for every layer.
    pub layer_corr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub schema_version: u32,
    pub rows: Vec<InterventionRow>,
    /// max − min of `final_corr` over rows.
    pub spread: f64,
}

/// Re-partitions the same test samples under every (batch size, shuffle,
/// seed) cell and records the global fit. Parameters are never touched.
pub fn intervene(
    model: &PeelModel,
    test: &Dataset,
    grid: &InterveneConfig,
    ctx: &ContextModel,
) -> Result<InterventionReport, HarnessError> {
    let max_b = grid.batch_sizes.iter().copied().max().unwrap_or(0);
    if grid.batch_sizes.is_empty() || grid.shuffle.is_empty() || grid.seeds.is_empty() {
        return Err(HarnessError::Config {
            field: "intervene".into(),
            reason: "grid must be non-empty".into(),
        });
    }
    if test.len() < max_b {
        return Err(HarnessError::TestSetTooSmall { n: test.len(), b: max_b });
    }
    let mut rows = Vec::new();
    for &batch_size in &grid.batch_sizes {
        for &shuffle in &grid.shuffle {
            for &seed in &grid.seeds {
                let p = predict(model, test, batch_size, shuffle, seed, ctx, 1e-8)?;
                let layer_corr = p.global_layer_corr(1e-8);
                rows.push(InterventionRow {
                    batch_size,
                    shuffle,
                    seed,
                    r2: metrics(&p.y_hat, &p.y)?.r2,
                    final_corr: *layer_corr.last().expect("depth >= 1"),
                    layer_corr,
                });
            }
        }
    }
    let (lo, hi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.final_corr), hi.max(r.final_corr)));
    Ok(InterventionReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
        spread: hi - lo,
    })
}

/// Ablations of the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationVariant {
    #[serde(rename = "no-split")]
    NoSplit,
    #[serde(rename = "no-schedule")]
    NoSchedule,
    #[serde(rename = "no-trivial")]
    NoTrivial,
    #[serde(rename = "no-mono")]
    NoMono,
    #[serde(rename = "avg-causal-layer")]
    AvgCausalLayer,
    #[serde(rename = "consistency@0.5")]
    ConsistencyHalf,
    #[serde(rename = "consistency@1.0")]
    ConsistencyOne,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        Self::NoSplit,
        Self::NoSchedule,
        Self::NoTrivial,
        Self::NoMono,
        Self::AvgCausalLayer,
        Self::ConsistencyHalf,
        Self::ConsistencyOne,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoSplit => "no-split",
            Self::NoSchedule => "no-schedule",
            Self::NoTrivial => "no-trivial",
            Self::NoMono => "no-mono",
            Self::AvgCausalLayer => "avg-causal-layer",
            Self::ConsistencyHalf => "consistency@0.5",
            Self::ConsistencyOne => "consistency@1.0",
        }
    }

    /// Row label as used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Self::NoSplit => "w/o causal–trivial split",
            Self::NoSchedule => "w/o correlation schedule",
            Self::NoTrivial => "w/o trivial branch",
            Self::NoMono => "No mono penalty",
            Self::AvgCausalLayer => "Average causal layer",
            Self::ConsistencyHalf => "λ_cons = 0.5",
            Self::ConsistencyOne => "λ_cons = 1.0",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        let ab = &mut c.objective.ablations;
        match self {
            Self::NoSplit => ab.no_split = true,
            Self::NoSchedule => ab.no_schedule = true,
            Self::NoTrivial => ab.no_trivial = true,
            Self::NoMono => ab.no_mono = true,
            Self::AvgCausalLayer => ab.average_causal = true,
            Self::ConsistencyHalf => c.objective.lambda_cons = 0.5,
            Self::ConsistencyOne => c.objective.lambda_cons = 1.0,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `full` or a variant name.
    pub variant: String,
    pub label: String,
    pub seed: u64,
    pub test: Metrics,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: String,
    pub label: String,
    pub mean_test_mse: f64,
    /// Seeds on which the full model had strictly lower test MSE.
    pub full_wins: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

pub const FULL_LABEL: &str = "full model";

/// Trains the full model and every variant on each seed (same splits) and
/// compares test MSE seed by seed.
pub fn run_ablation(
    splits: &Splits,
    base: &TrainConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
    ctx: &ContextModel,
) -> Result<AblationReport, HarnessError> {
    let run = |cfg: &TrainConfig, seed: u64| -> Result<(Metrics, usize), HarnessError> {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let out = train(&splits.train, &splits.val, &cfg, ctx, None)?;
        Ok((evaluate(&out.model, &splits.test, cfg.batch_size, ctx, cfg.seed)?, out.history.best_epoch))
    };
    let mut rows = Vec::new();
    let mut full = Vec::new();
    for &seed in seeds {
        let (m, e) = run(base, seed)?;
        full.push(m.mse);
        rows.push(AblationRow {
            variant: "full".into(),
            label: FULL_LABEL.into(),
            seed,
            test: m,
            best_epoch: e,
        });
    }
    let mut summary = Vec::new();
    for &v in variants {
        let cfg = v.apply(base);
        let mut mses = Vec::new();
        for &seed in seeds {
            let (m, e) = run(&cfg, seed)?;
            mses.push(m.mse);
            rows.push(AblationRow {
                variant: v.name().into(),
                label: v.label().into(),
                seed,
                test: m,
                best_epoch: e,
            });
        }
        summary.push(AblationSummary {
            variant: v.name().into(),
            label: v.label().into(),
            mean_test_mse: crate::stats::mean(&mses),
            full_wins: full.iter().zip(&mses).filter(|(f, a)| f < a).count(),
            seeds: seeds.len(),
        });
    }
    Ok(AblationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
        summary,
    })
}

/// First, middle (rounded half up) and last layer, deduplicated.
pub fn default_saliency_layers(depth: usize) -> Vec<usize> {
    let mut v = vec![1, depth.div_ceil(2), depth];
    v.dedup();
    v
}

/// Writes one JSON score file per (sample, layer) and one SVG per view.
/// Returns the paths written, in order.
pub fn emit_saliency(
    model: &PeelModel,
    samples: &[&MultiViewSample],
    layers: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let views = &model.config.views;
    let mut written = Vec::new();
    for s in samples {
        // the forward pass of a sample ignores its batch mates, so a
        // duplicated pair traces a single sample
        let input = BatchInput::new(&[*s, *s], vec![0.0; 2], views)?;
        let trace = trace_batch(model, &input)?;
        for &layer in layers {
            let map = extract_saliency(&trace, layer)?.swap_remove(0);
            let stem = format!("{}_layer{layer}", sanitize(&s.id));
            let json_path = out_dir.join(format!("{stem}.json"));
            std::fs::write(&json_path, saliency_json(&map)).map_err(io_err(&json_path))?;
            written.push(json_path);
            for v in views {
                let svg_path = out_dir.join(format!("{stem}_{v}.svg"));
                std::fs::write(&svg_path, render_svg(&map, s, v)?).map_err(io_err(&svg_path))?;
                written.push(svg_path);
            }
        }
    }
    Ok(written)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
