//! Mini-batch training, evaluation metrics, early stopping, sweeps and
//! checkpoints.

mod checkpoint;
mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::encoders::EncoderConfig;
use crate::graphs::{assemble_batches, ContextModel, Dataset, GraphError};
use crate::objective::{total_loss, LossBreakdown, ObjectiveConfig, ObjectiveError};
use crate::peeling::{forward_stack, trace_batch, BatchInput, ModelConfig, PeelError, PeelModel, Readout};
use crate::rng::derive_seed;
use crate::stats;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use optim::{clip_global_norm, Optimizer, OptimizerKind};

pub const LOG_SCHEMA_VERSION: u32 = 1;

/// Seed offset of the fixed evaluation batching.
const EVAL_STREAM: u64 = 0xe7a1;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] PeelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("labels have zero variance; R² is undefined")]
    ZeroVariance,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub patience: usize,
    pub val_fraction: f64,
    pub clip_norm: f64,
    pub depth: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub rounds: usize,
    pub tau: f64,
    pub use_context: bool,
    pub objective: ObjectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 3e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            patience: 20,
            val_fraction: 0.15,
            clip_norm: 5.0,
            depth: 5,
            hidden: 32,
            embed_dim: 32,
            rounds: 2,
            tau: 1.0,
            use_context: true,
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        self.objective.validate()?;
        Ok(())
    }

    /// Model layout for a dataset; the ablation switches choose the readout
    /// and whether the trivial branch exists.
    pub fn model_config(&self, ds: &Dataset) -> ModelConfig {
        let ab = &self.objective.ablations;
        ModelConfig {
            views: ds.view_ids.clone(),
            geometric: ds.geometric.clone(),
            encoder: EncoderConfig {
                feature_dim: ds.feature_dim,
                hidden: self.hidden,
                embed_dim: self.embed_dim,
                rounds: self.rounds,
            },
            depth: self.depth,
            tau: self.tau,
            use_context: self.use_context,
            trivial_branch: !ab.no_trivial,
            readout: if ab.average_causal {
                Readout::AverageCausal
            } else {
                Readout::Final
            },
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub r2: f64,
}

/// MAE, MSE and `R² = 1 − SSE/SST`.
pub fn metrics(y_hat: &[f64], y: &[f64]) -> Result<Metrics, TrainError> {
    let n = y.len() as f64;
    let sst: f64 = {
        let m = stats::mean(y);
        y.iter().map(|v| (v - m) * (v - m)).sum()
    };
    if sst == 0.0 {
        return Err(TrainError::ZeroVariance);
    }
    let sse: f64 = y_hat.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(Metrics {
        mae: y_hat.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / n,
        mse: sse / n,
        r2: 1.0 - sse / sst,
    })
}

/// Model outputs for a whole dataset, in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub y: Vec<f64>,
    pub y_hat: Vec<f64>,
    /// n×L causal scalars.
    pub c: Vec<Vec<f64>>,
    pub t_sum: Vec<f64>,
    /// Within-batch Pearson(c^(ℓ), y), per batch, per layer.
    pub batch_layer_corr: Vec<Vec<f64>>,
}

impl Predictions {
    /// Pearson(c^(ℓ), y) over the full set, per layer.
    pub fn global_layer_corr(&self, eps: f64) -> Vec<f64> {
        let depth = self.c.first().map_or(0, Vec::len);
        (0..depth)
            .map(|l| {
                let col: Vec<f64> = self.c.iter().map(|r| r[l]).collect();
                stats::pearson(&col, &self.y, eps)
            })
            .collect()
    }
}

/// Evaluation-mode forward over a partition of `ds`.
pub fn predict(
    model: &PeelModel,
    ds: &Dataset,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    ctx: &ContextModel,
    eps: f64,
) -> Result<Predictions, TrainError> {
    let batches = assemble_batches(ds, batch_size, shuffle, seed, ctx)?;
    let n = ds.len();
    let mut out = Predictions {
        y: ds.labels(),
        y_hat: vec![0.0; n],
        c: vec![Vec::new(); n],
        t_sum: vec![0.0; n],
        batch_layer_corr: Vec::with_capacity(batches.len()),
    };
    for b in &batches {
        let input = BatchInput::from_batch(ds, b, &model.config.views)?;
        let tr = trace_batch(model, &input)?;
        for (k, &i) in b.members.iter().enumerate() {
            out.y_hat[i] = tr.y_hat[k];
            out.c[i] = tr.c[k].clone();
            out.t_sum[i] = tr.t_sum[k];
        }
        out.batch_layer_corr.push(
            (0..tr.depth())
                .map(|l| {
                    let col: Vec<f64> = tr.c.iter().map(|r| r[l]).collect();
                    stats::pearson(&col, &input.y, eps)
                })
                .collect(),
        );
    }
    Ok(out)
}

/// Metrics under the fixed evaluation batching of `seed`.
pub fn evaluate(
    model: &PeelModel,
    ds: &Dataset,
    batch_size: usize,
    ctx: &ContextModel,
    seed: u64,
) -> Result<Metrics, TrainError> {
    let p = predict(model, ds, batch_size, false, derive_seed(seed, EVAL_STREAM), ctx, 1e-8)?;
    metrics(&p.y_hat, &p.y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Metrics,
    /// Global Pearson(c^(ℓ), y) on the validation set.
    pub val_layer_corr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Set when training hit a non-finite value; the kept model is the best finite one.
    pub diverged: Option<String>,
}

impl RunHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }
}

#[derive(Serialize)]
struct LogLine<'a, T: Serialize> {
    schema_version: u32,
    kind: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct StepBody<'a> {
    epoch: usize,
    step: usize,
    loss: &'a LossBreakdown,
}

fn log_line<T: Serialize>(log: &mut Option<&mut dyn Write>, kind: &'static str, body: &T) -> Result<(), TrainError> {
    if let Some(w) = log.as_mut() {
        let line = LogLine {
            schema_version: LOG_SCHEMA_VERSION,
            kind,
            body,
        };
        serde_json::to_writer(&mut **w, &line).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Splits off a seeded validation fraction (at least 2 samples when non-zero).
pub fn split_validation(ds: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((ds.len() as f64 * fraction).round() as usize).clamp(2, ds.len().saturating_sub(2));
    let (val, train) = idx.split_at(n_val);
    let (mut val, mut train) = (val.to_vec(), train.to_vec());
    val.sort_unstable();
    train.sort_unstable();
    (ds.subset(&train), ds.subset(&val))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PeelModel,
    pub history: RunHistory,
}

fn is_divergence(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Autodiff(AutodiffError::NonFinite { .. } | AutodiffError::NonFiniteGradient { .. })
            | TrainError::Model(PeelError::Autodiff(AutodiffError::NonFinite { .. }))
            | TrainError::Objective(ObjectiveError::Autodiff(AutodiffError::NonFinite { .. }))
    )
}

fn train_step(
    model: &PeelModel,
    input: &BatchInput,
    obj: &ObjectiveConfig,
) -> Result<(LossBreakdown, Vec<Tensor>), TrainError> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true)?;
    let vars = forward_stack(&mut tape, &bound, model, input)?;
    let (loss, breakdown) = total_loss(&mut tape, &vars, &input.y, obj)?;
    if !breakdown.total.is_finite() {
        return Err(AutodiffError::NonFinite { op: "total_loss" }.into());
    }
    let grads = tape.backward(loss)?;
    Ok((breakdown, model.params.gradients(&bound, &grads)))
}

/// Trains a fresh model. Batches are reshuffled every epoch from a seed
/// stream derived from `cfg.seed`; the parameters of the epoch with the
/// lowest validation MSE are returned.
pub fn train(
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    ctx: &ContextModel,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_ds.len() < 2 || val_ds.len() < 2 {
        return Err(TrainError::Config("train and validation splits need at least 2 samples".into()));
    }
    let mut model = PeelModel::new(cfg.model_config(train_ds))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, model.params.tensors());
    let mut history = RunHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        diverged: None,
    };
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let eval_seed = derive_seed(cfg.seed, EVAL_STREAM);
    let eps = cfg.objective.eps;

    'epochs: for epoch in 1..=cfg.epochs {
        let batches = assemble_batches(train_ds, cfg.batch_size, true, derive_seed(cfg.seed, epoch as u64), ctx)?;
        let mut losses = Vec::with_capacity(batches.len());
        for (step, b) in batches.iter().enumerate() {
            let input = BatchInput::from_batch(train_ds, b, &model.config.views)?;
            let (breakdown, mut grads) = match train_step(&model, &input, &cfg.objective) {
                Ok(x) => x,
                Err(e) if is_divergence(&e) => {
                    history.diverged = Some(format!("epoch {epoch} step {}: {e}", step + 1));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            clip_global_norm(&mut grads, cfg.clip_norm);
            let mut next = model.params.tensors().to_vec();
            opt.step(&mut next, &grads);
            if next.iter().any(|t| !t.is_finite()) {
                history.diverged = Some(format!("epoch {epoch} step {}: non-finite parameters", step + 1));
                break 'epochs;
            }
            model.params.set_tensors(next)?;
            log_line(
                &mut log,
                "step",
                &StepBody {
                    epoch,
                    step: step + 1,
                    loss: &breakdown,
                },
            )?;
            losses.push(breakdown);
        }
        let p = match predict(&model, val_ds, cfg.batch_size, false, eval_seed, ctx, eps) {
            Ok(p) => p,
            Err(e) if is_divergence(&e) => {
                history.diverged = Some(format!("epoch {epoch} validation: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch,
            train: LossBreakdown::mean(&losses).expect("at least one batch"),
            val: metrics(&p.y_hat, &p.y)?,
            val_layer_corr: p.global_layer_corr(eps),
        };
        log_line(&mut log, "epoch", &record)?;
        let improved = best.as_ref().is_none_or(|(m, _)| record.val.mse < *m);
        if improved {
            best = Some((record.val.mse, model.params.tensors().to_vec()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.epochs.push(record);
        if since_best >= cfg.patience {
            history.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    match best {
        Some((_, params)) => model.params.set_tensors(params)?,
        None => {
            return Err(TrainError::Config(format!(
                "training diverged before the first epoch finished: {}",
                history.diverged.as_deref().unwrap_or("unknown")
            )))
        }
    }
    Ok(TrainOutcome { model, history })
}

/// What a sweep varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Depth(Vec<usize>),
    RhoMax(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub test: Option<Metrics>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

/// One run per axis value with seeds held fixed; rows sorted by value.
/// A failing run is recorded in its row rather than aborting the sweep.
pub fn sweep(
    axis: &SweepAxis,
    base: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    test_ds: &Dataset,
    ctx: &ContextModel,
) -> Result<Vec<SweepRow>, TrainError> {
    let configs: Vec<(f64, TrainConfig)> = match axis {
        SweepAxis::Depth(v) => v
            .iter()
            .map(|&d| {
                (d as f64, TrainConfig {
                    depth: d,
                    ..base.clone()
                })
            })
            .collect(),
        SweepAxis::RhoMax(v) => v
            .iter()
            .map(|&r| {
                let mut c = base.clone();
                c.objective.rho_max = r;
                c.objective.rho_min = c.objective.rho_min.min(r);
                (r, c)
            })
            .collect(),
    };
    if configs.is_empty() {
        return Err(TrainError::Config("sweep needs at least one value".into()));
    }
    let mut rows: Vec<SweepRow> = configs
        .into_iter()
        .map(|(value, cfg)| {
            let run = train(train_ds, val_ds, &cfg, ctx, None)
                .and_then(|o| Ok((evaluate(&o.model, test_ds, cfg.batch_size, ctx, cfg.seed)?, o.history.best_epoch)));
            match run {
                Ok((m, e)) => SweepRow {
                    value,
                    test: Some(m),
                    best_epoch: Some(e),
                    error: None,
                },
                Err(e) => SweepRow {
                    value,
                    test: None,
                    best_epoch: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    rows.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(rows)
}
