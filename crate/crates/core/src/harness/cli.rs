//! `peel` command-line front end.
//!
//! Every command writes its artifacts plus a `<command>.manifest.json` under
//! the output directory. Failures print one JSON error record on stderr and
//! exit 2 (bad config or usage) or 1 (runtime).

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use super::{
    default_saliency_layers, emit_saliency, intervene, io_err, make_splits, run_ablation, AblationVariant,
    HarnessError, RunConfig, Splits,
};
use crate::graphs::save_dataset;
use crate::peeling::PeelModel;
use crate::theory::verify_theory;
use crate::trainer::{
    evaluate, load_checkpoint, save_checkpoint, sweep, train, CHECKPOINT_SCHEMA_VERSION, LOG_SCHEMA_VERSION,
};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "peel", version, about = "Layerwise causal peeling for multi-view graph regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args, Clone, Default)]
pub struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `train.depth`.
    #[arg(long)]
    pub depth: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured dataset as JSONL.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train, write the step/epoch log, checkpoint and test metrics.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train once per value of the configured sweep axis.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Re-batch the test split over the configured grid.
    Intervene {
        #[command(flatten)]
        common: Common,
        /// Trained model; trains from the config when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write per-node saliency JSON and SVG for test samples.
    Saliency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// 1-based layers; repeatable.
        #[arg(long = "layer")]
        layers: Vec<usize>,
    },
    /// Run the numerical theory checks.
    VerifyTheory {
        #[arg(long, default_value = "default")]
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        output: PathBuf,
    },
    /// Train the full model and ablation variants on paired seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Variant name; repeatable. Defaults to the config's list.
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GenData { .. } => "gen-data",
            Self::Train { .. } => "train",
            Self::Eval { .. } => "eval",
            Self::Sweep { .. } => "sweep",
            Self::Intervene { .. } => "intervene",
            Self::Saliency { .. } => "saliency",
            Self::VerifyTheory { .. } => "verify-theory",
            Self::Ablate { .. } => "ablate",
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'a str,
    config_hash: String,
    seed: u64,
    version: &'a str,
    log_schema_version: u32,
    checkpoint_schema_version: u32,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'a str>,
    message: String,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return 0;
        }
        Err(e) => {
            report_error(&HarnessError::Usage(e.kind().to_string()), Some(e.to_string()));
            return 2;
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            report_error(&e, None);
            match e {
                HarnessError::Config { .. } | HarnessError::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}

fn report_error(e: &HarnessError, detail: Option<String>) {
    let field = match e {
        HarnessError::Config { field, .. } => Some(field.as_str()),
        _ => None,
    };
    let rec = ErrorRecord {
        error: e.kind(),
        field,
        message: detail.unwrap_or_else(|| e.to_string()),
    };
    eprintln!("{}", serde_json::to_string(&rec).expect("plain data serializes"));
}

fn resolve(common: &Common) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    if let Some(d) = common.depth {
        cfg.train.depth = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf, HarnessError> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

fn write_manifest(cfg: &RunConfig, command: &str) -> Result<(), HarnessError> {
    let m = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        command,
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        version: env!("CARGO_PKG_VERSION"),
        log_schema_version: LOG_SCHEMA_VERSION,
        checkpoint_schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: cfg,
    };
    write_json(&cfg.output_dir, &format!("{command}.manifest.json"), &m)?;
    Ok(())
}

fn prepare(common: &Common, command: &str) -> Result<(RunConfig, Splits), HarnessError> {
    let cfg = resolve(common)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    write_manifest(&cfg, command)?;
    let ds = cfg.load_data()?;
    let splits = make_splits(&ds, &cfg.split, cfg.train.val_fraction);
    Ok((cfg, splits))
}

/// Loads the checkpoint if given, otherwise trains (logging to
/// `<command>.log.jsonl`) and saves `model.ckpt.json`.
fn obtain_model(
    cfg: &RunConfig,
    splits: &Splits,
    checkpoint: Option<&Path>,
    command: &str,
) -> Result<PeelModel, HarnessError> {
    if let Some(p) = checkpoint {
        return Ok(load_checkpoint(p)?);
    }
    let log_path = cfg.output_dir.join(format!("{command}.log.jsonl"));
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let out = train(&splits.train, &splits.val, &cfg.train, &cfg.context_model(), Some(&mut log))?;
    log.flush().map_err(io_err(&log_path))?;
    let ckpt = cfg.output_dir.join("model.ckpt.json");
    save_checkpoint(&out.model, &ckpt)?;
    write_json(&cfg.output_dir, &format!("{command}.history.json"), &out.history)?;
    Ok(out.model)
}

#[derive(Serialize)]
struct EvalReport {
    schema_version: u32,
    split: &'static str,
    n: usize,
    metrics: crate::trainer::Metrics,
}

fn run(cmd: &Command) -> Result<(), HarnessError> {
    let name = cmd.name();
    match cmd {
        Command::GenData { common } => {
            let (cfg, _) = prepare(common, name)?;
            let ds = cfg.load_data()?;
            save_dataset(cfg.output_dir.join("dataset.jsonl"), &ds)?;
        }
        Command::Train { common } => {
            let (cfg, splits) = prepare(common, name)?;
            let model = obtain_model(&cfg, &splits, None, name)?;
            let m = evaluate(&model, &splits.test, cfg.train.batch_size, &cfg.context_model(), cfg.train.seed)?;
            write_json(&cfg.output_dir, "metrics.json", &EvalReport {
                schema_version: super::REPORT_SCHEMA_VERSION,
                split: "test",
                n: splits.test.len(),
                metrics: m,
            })?;
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, splits) = prepare(common, name)?;
            let model = obtain_model(&cfg, &splits, Some(checkpoint), name)?;
            let m = evaluate(&model, &splits.test, cfg.train.batch_size, &cfg.context_model(), cfg.train.seed)?;
            write_json(&cfg.output_dir, "eval.json", &EvalReport {
                schema_version: super::REPORT_SCHEMA_VERSION,
                split: "test",
                n: splits.test.len(),
                metrics: m,
            })?;
        }
        Command::Sweep { common } => {
            let (cfg, s) = prepare(common, name)?;
            let rows = sweep(&cfg.sweep.axis, &cfg.train, &s.train, &s.val, &s.test, &cfg.context_model())?;
            write_json(&cfg.output_dir, "sweep.json", &serde_json::json!({
                "schema_version": super::REPORT_SCHEMA_VERSION,
                "axis": cfg.sweep.axis,
                "rows": rows,
            }))?;
        }
        Command::Intervene { common, checkpoint } => {
            let (cfg, splits) = prepare(common, name)?;
            let model = obtain_model(&cfg, &splits, checkpoint.as_deref(), name)?;
            let report = intervene(&model, &splits.test, &cfg.intervene, &cfg.context_model())?;
            write_json(&cfg.output_dir, "intervention.json", &report)?;
        }
        Command::Saliency {
            common,
            checkpoint,
            layers,
        } => {
            let (cfg, splits) = prepare(common, name)?;
            let model = obtain_model(&cfg, &splits, checkpoint.as_deref(), name)?;
            let layers = if !layers.is_empty() {
                layers.clone()
            } else {
                cfg.saliency
                    .layers
                    .clone()
                    .unwrap_or_else(|| default_saliency_layers(model.config.depth))
            };
            let samples: Vec<_> = splits.test.samples.iter().take(cfg.saliency.samples).collect();
            emit_saliency(&model, &samples, &layers, &cfg.output_dir.join("saliency"))?;
        }
        Command::VerifyTheory { scenario, seed, output } => {
            if scenario != "default" {
                return Err(HarnessError::Config {
                    field: "scenario".into(),
                    reason: format!("unknown scenario \"{scenario}\"; available: default"),
                });
            }
            std::fs::create_dir_all(output).map_err(io_err(output))?;
            let checks = verify_theory(*seed)?;
            write_json(output, "theory.json", &serde_json::json!({
                "schema_version": super::REPORT_SCHEMA_VERSION,
                "scenario": scenario,
                "seed": seed,
                "checks": checks,
            }))?;
            let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
            if !failed.is_empty() {
                return Err(HarnessError::TheoryChecksFailed(failed));
            }
        }
        Command::Ablate { common, variants } => {
            let (cfg, splits) = prepare(common, name)?;
            let variants = if variants.is_empty() {
                cfg.ablate.variants.clone()
            } else {
                variants
                    .iter()
                    .map(|v| {
                        AblationVariant::parse(v).ok_or_else(|| HarnessError::Config {
                            field: "variant".into(),
                            reason: format!(
                                "unknown variant \"{v}\"; expected one of {}",
                                AblationVariant::ALL.map(|a| a.name()).join(", ")
                            ),
                        })
                    })
                    .collect::<Result<_, _>>()?
            };
            let report = run_ablation(&splits, &cfg.train, &variants, &cfg.ablate.seeds, &cfg.context_model())?;
            write_json(&cfg.output_dir, "ablation.json", &report)?;
        }
    }
    Ok(())
}
