//! C ABI over `peel-core`.
//!
//! Datasets and models cross the boundary as opaque handles owned by the
//! caller and released with the matching `*_free`. Every fallible call
//! returns a [`PeelStatus`]; on failure the message is available from
//! [`peel_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use peel_core::graphs::{generate_synthetic, load_dataset, ContextModel, Dataset, SynthScenario};
use peel_core::harness::{make_splits, HarnessError, RunConfig};
use peel_core::peeling::PeelModel as CoreModel;
use peel_core::theory::verify_theory;
use peel_core::trainer::{evaluate, load_checkpoint, predict, save_checkpoint, train, TrainError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeelStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    InvalidData = 4,
    InvalidConfig = 5,
    Model = 6,
    Training = 7,
    Panic = 8,
}

/// Opaque dataset handle.
pub struct PeelDataset(Dataset);

/// Opaque model handle.
pub struct PeelModel(CoreModel);

/// Batch context used when assembling batches; see `ContextModel` in the core crate.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PeelContext {
    pub strength: f64,
    pub gain_lo: f64,
    pub gain_hi: f64,
    pub noise_sd: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PeelMetrics {
    pub mae: f64,
    pub mse: f64,
    pub r2: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes removed")));
}

struct Failure(PeelStatus, String);

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let status = match e {
            TrainError::Config(_) => PeelStatus::InvalidConfig,
            TrainError::Graph(_) | TrainError::ZeroVariance => PeelStatus::InvalidData,
            TrainError::Io(_) => PeelStatus::Io,
            TrainError::Checkpoint(_) | TrainError::Model(_) => PeelStatus::Model,
            _ => PeelStatus::Training,
        };
        Failure(status, e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let status = match e {
            HarnessError::Config { .. } | HarnessError::Usage(_) => PeelStatus::InvalidConfig,
            HarnessError::Io { .. } => PeelStatus::Io,
            HarnessError::Graph(_) | HarnessError::TestSetTooSmall { .. } => PeelStatus::InvalidData,
            HarnessError::Model(_) => PeelStatus::Model,
            _ => PeelStatus::Training,
        };
        Failure(status, e.to_string())
    }
}

impl From<peel_core::graphs::GraphError> for Failure {
    fn from(e: peel_core::graphs::GraphError) -> Self {
        let status = match e {
            peel_core::graphs::GraphError::Io { .. } => PeelStatus::Io,
            _ => PeelStatus::InvalidData,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PeelStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PeelStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PeelStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PeelStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PeelStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn context_arg(ctx: *const PeelContext) -> ContextModel {
    match ctx.as_ref() {
        None => ContextModel::none(),
        Some(c) => ContextModel {
            strength: c.strength,
            gain: (c.gain_lo, c.gain_hi),
            noise_sd: c.noise_sd,
        },
    }
}

fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failing call on this thread, or null. The pointer
/// stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn peel_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn peel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a JSONL dataset.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn peel_dataset_load(path: *const c_char, out: *mut *mut PeelDataset) -> PeelStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        put(out, PeelDataset(load_dataset(p)?))
    })
}

/// Generates `n` samples from the default synthetic scenario with `seed`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn peel_dataset_generate(n: usize, seed: u64, out: *mut *mut PeelDataset) -> PeelStatus {
    guard(|| {
        let s = SynthScenario {
            seed,
            ..SynthScenario::default()
        };
        put(out, PeelDataset(generate_synthetic(&s, n)?))
    })
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn peel_dataset_len(ds: *const PeelDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Copies the labels into `out` (length `len`, which must equal the dataset length).
///
/// # Safety
/// `ds` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn peel_dataset_labels(ds: *const PeelDataset, out: *mut f64, len: usize) -> PeelStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if len != ds.0.len() {
            return Err(Failure(
                PeelStatus::InvalidArgument,
                format!("buffer length {len} != dataset length {}", ds.0.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&ds.0.labels());
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn peel_dataset_free(ds: *mut PeelDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains a model from a TOML run config (null means defaults). Relative
/// data paths resolve against `base_dir` (null means the working directory).
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn peel_train(
    config_toml: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut PeelModel,
) -> PeelStatus {
    guard(|| {
        let text = if config_toml.is_null() {
            String::new()
        } else {
            CStr::from_ptr(config_toml)
                .to_str()
                .map_err(|_| Failure(PeelStatus::InvalidArgument, "config is not UTF-8".into()))?
                .to_owned()
        };
        let base = if base_dir.is_null() {
            PathBuf::from(".")
        } else {
            path_arg(base_dir, "base_dir")?
        };
        let cfg = RunConfig::from_toml(&text, &base)?;
        cfg.validate()?;
        let ds = cfg.load_data()?;
        let s = make_splits(&ds, &cfg.split, cfg.train.val_fraction);
        let run = train(&s.train, &s.val, &cfg.train, &cfg.context_model(), None)?;
        put(out, PeelModel(run.model))
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn peel_model_load(path: *const c_char, out: *mut *mut PeelModel) -> PeelStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        put(out, PeelModel(load_checkpoint(&p)?))
    })
}

/// # Safety
/// `model` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn peel_model_save(model: *const PeelModel, path: *const c_char) -> PeelStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let p = path_arg(path, "path")?;
        save_checkpoint(&m.0, Path::new(&p))?;
        Ok(())
    })
}

/// Number of causal layers, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn peel_model_depth(model: *const PeelModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.depth)
}

/// Predictions in dataset order, batched sequentially with `batch_size`.
/// A null `ctx` disables the batch context.
///
/// # Safety
/// Handles must be live; `out` must hold `len` doubles; `ctx` may be null.
#[no_mangle]
pub unsafe extern "C" fn peel_model_predict(
    model: *const PeelModel,
    ds: *const PeelDataset,
    batch_size: usize,
    seed: u64,
    ctx: *const PeelContext,
    out: *mut f64,
    len: usize,
) -> PeelStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if len != d.0.len() {
            return Err(Failure(
                PeelStatus::InvalidArgument,
                format!("buffer length {len} != dataset length {}", d.0.len()),
            ));
        }
        let p = predict(&m.0, &d.0, batch_size, false, seed, &context_arg(ctx), 1e-8)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&p.y_hat);
        Ok(())
    })
}

/// MAE, MSE and R² under the fixed evaluation batching of `seed`.
///
/// # Safety
/// Handles must be live; `out` must be writable; `ctx` may be null.
#[no_mangle]
pub unsafe extern "C" fn peel_model_evaluate(
    model: *const PeelModel,
    ds: *const PeelDataset,
    batch_size: usize,
    seed: u64,
    ctx: *const PeelContext,
    out: *mut PeelMetrics,
) -> PeelStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = evaluate(&m.0, &d.0, batch_size, &context_arg(ctx), seed)?;
        *out = PeelMetrics {
            mae: r.mae,
            mse: r.mse,
            r2: r.r2,
        };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn peel_model_free(model: *mut PeelModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the numerical theory checks; writes how many ran and how many passed.
///
/// # Safety
/// `passed` and `total` must be writable.
#[no_mangle]
pub unsafe extern "C" fn peel_verify_theory(seed: u64, passed: *mut usize, total: *mut usize) -> PeelStatus {
    guard(|| {
        let p = passed.as_mut().ok_or_else(|| null("passed"))?;
        let t = total.as_mut().ok_or_else(|| null("total"))?;
        let checks = verify_theory(seed).map_err(|e| Failure(PeelStatus::InvalidArgument, e.to_string()))?;
        *t = checks.len();
        *p = checks.iter().filter(|c| c.pass).count();
        Ok(())
    })
}
