//! C ABI over the simulator.
//!
//! Every function returns a [`Fed3crStatus`]; on failure the message is
//! available from [`fed3cr_last_error`] on the same thread. Objects are opaque
//! handles created by `*_new`/`*_load` functions and released by the matching
//! `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fed3cr::datasets::{load_dataset, DataFormat, InteractionDataset};
use fed3cr::degradation::{verify_bound, QuadraticClient};
use fed3cr::evaluation::{hr_ndcg_at_k, metrics_csv, rbo_truncated};
use fed3cr::experiment::{self, load_config, ExperimentConfig, ExperimentRecord};
use fed3cr::numerics::DenseMatrix;
use fed3cr::toy::{toy_dataset, ToySpec};
use fed3cr::{Error, ErrorClass};

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fed3crStatus {
    Ok = 0,
    ConfigError = 2,
    DataError = 3,
    RuntimeError = 4,
    NullArgument = 5,
    InvalidUtf8 = 6,
    Panic = 7,
}

/// Interaction dataset handle.
pub struct Fed3crDataset(InteractionDataset);

/// Experiment configuration handle.
pub struct Fed3crConfig(ExperimentConfig);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct Fed3crStats {
    pub clients: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg: f64,
    pub sparsity: f64,
}

/// Final and best ranking quality of a run. Missing values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct Fed3crSummary {
    pub rounds: usize,
    pub final_hr: f64,
    pub final_ndcg: f64,
    pub best_hr: f64,
    pub best_hr_round: usize,
    pub best_ndcg: f64,
    pub best_ndcg_round: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Failure {
    Core(Error),
    Null(&'static str),
    Utf8(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Fed3crStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => Fed3crStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            match e.class() {
                ErrorClass::Config => Fed3crStatus::ConfigError,
                ErrorClass::Data => Fed3crStatus::DataError,
                ErrorClass::Runtime => Fed3crStatus::RuntimeError,
            }
        }
        Ok(Err(Failure::Null(arg))) => {
            set_last_error(format!("null pointer passed as `{arg}`"));
            Fed3crStatus::NullArgument
        }
        Ok(Err(Failure::Utf8(arg))) => {
            set_last_error(format!("`{arg}` is not valid UTF-8"));
            Fed3crStatus::InvalidUtf8
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            Fed3crStatus::Panic
        }
    }
}

unsafe fn string_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(name))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(name))
}

fn workers(n: usize) -> Option<usize> {
    (n > 0).then_some(n)
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn fed3cr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fed3cr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Truncated rank-biased overlap of two duplicate-free lists of equal length.
///
/// # Safety
/// `a` and `b` must point to `len` readable ids; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fed3cr_rbo(
    a: *const usize,
    b: *const usize,
    len: usize,
    p: f64,
    out: *mut f64,
) -> Fed3crStatus {
    guard(|| {
        let v = rbo_truncated(slice_arg(a, len, "a")?, slice_arg(b, len, "b")?, p)?;
        *out_arg(out, "out")? = v;
        Ok(())
    })
}

/// HR@k and NDCG@k of `test_item` within a ranked candidate list.
///
/// # Safety
/// `ranked` must point to `len` readable ids; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fed3cr_hr_ndcg(
    ranked: *const usize,
    len: usize,
    test_item: usize,
    k: usize,
    out_hr: *mut f64,
    out_ndcg: *mut f64,
) -> Fed3crStatus {
    guard(|| {
        let (hr, ndcg) = hr_ndcg_at_k(slice_arg(ranked, len, "ranked")?, test_item, k)?;
        *out_arg(out_hr, "out_hr")? = hr;
        *out_arg(out_ndcg, "out_ndcg")? = ndcg;
        Ok(())
    })
}

/// Checks the consensus distance bound for quadratic clients.
///
/// `optima` holds `clients` row-major vectors of length `dim`. Per-client
/// distances and bounds are written to `out_distances` / `out_bounds` (each
/// `clients` long) and the number of violated clients to `out_violations`.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn fed3cr_verify_bound(
    optima: *const f64,
    clients: usize,
    dim: usize,
    out_distances: *mut f64,
    out_bounds: *mut f64,
    out_violations: *mut usize,
) -> Fed3crStatus {
    guard(|| {
        let data = slice_arg(optima, clients * dim, "optima")?;
        let qs = data
            .chunks(dim.max(1))
            .map(|r| Ok(QuadraticClient::new(DenseMatrix::new(1, dim, r.to_vec())?)))
            .collect::<Result<Vec<_>, Error>>()?;
        let report = verify_bound(&qs)?;
        if out_distances.is_null() || out_bounds.is_null() {
            return Err(Failure::Null("out_distances/out_bounds"));
        }
        ptr::copy_nonoverlapping(report.distances.as_ptr(), out_distances, clients);
        ptr::copy_nonoverlapping(report.bounds.as_ptr(), out_bounds, clients);
        *out_arg(out_violations, "out_violations")? = report.violations();
        Ok(())
    })
}

/// Loads an interaction file. `format` is `movielens-dat`, `csv` or `tsv`.
///
/// # Safety
/// `path` and `format` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fed3cr_dataset_load(
    path: *const c_char,
    format: *const c_char,
    min_interactions: usize,
    out: *mut *mut Fed3crDataset,
) -> Fed3crStatus {
    guard(|| {
        let path = PathBuf::from(string_arg(path, "path")?);
        let format: DataFormat = string_arg(format, "format")?.parse()?;
        let out = out_arg(out, "out")?;
        let ds = load_dataset(&path, format, min_interactions)?;
        *out = Box::into_raw(Box::new(Fed3crDataset(ds)));
        Ok(())
    })
}

/// Generates the planted-block synthetic dataset.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fed3cr_dataset_toy(
    clients: usize,
    items: usize,
    blocks: usize,
    positives: usize,
    noise: usize,
    seed: u64,
    out: *mut *mut Fed3crDataset,
) -> Fed3crStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec = ToySpec {
            clients,
            items,
            blocks,
            positives,
            noise,
            seed,
        };
        *out = Box::into_raw(Box::new(Fed3crDataset(toy_dataset(&spec)?)));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fed3cr_dataset_stats(ds: *const Fed3crDataset, out: *mut Fed3crStats) -> Fed3crStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or(Failure::Null("ds"))?;
        let s = ds.0.stats();
        *out_arg(out, "out")? = Fed3crStats {
            clients: s.clients,
            items: s.items,
            interactions: s.interactions,
            avg: s.avg,
            sparsity: s.sparsity,
        };
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle from this library that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn fed3cr_dataset_free(ds: *mut Fed3crDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Default configuration (bundled toy data).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fed3cr_config_new(out: *mut *mut Fed3crConfig) -> Fed3crStatus {
    guard(|| {
        *out_arg(out, "out")? = Box::into_raw(Box::new(Fed3crConfig(ExperimentConfig::default())));
        Ok(())
    })
}

/// Reads a TOML config or a run manifest (`.json`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fed3cr_config_load(path: *const c_char, out: *mut *mut Fed3crConfig) -> Fed3crStatus {
    guard(|| {
        let path = PathBuf::from(string_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(Fed3crConfig(load_config(&path, &[])?)));
        Ok(())
    })
}

/// Sets one dotted key, e.g. `training.lr` to `0.05`. The handle is left
/// unchanged on failure.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn fed3cr_config_set(
    cfg: *mut Fed3crConfig,
    key: *const c_char,
    value: *const c_char,
) -> Fed3crStatus {
    guard(|| {
        let key = string_arg(key, "key")?.to_string();
        let value = string_arg(value, "value")?.to_string();
        let cfg = cfg.as_mut().ok_or(Failure::Null("cfg"))?;
        cfg.0 = cfg.0.with_overrides(&[(key, value)])?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle from this library that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn fed3cr_config_free(cfg: *mut Fed3crConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

fn summary(rec: &ExperimentRecord) -> Fed3crSummary {
    let s = &rec.summary;
    Fed3crSummary {
        rounds: rec.rounds.len(),
        final_hr: s.final_hr.unwrap_or(f64::NAN),
        final_ndcg: s.final_ndcg.unwrap_or(f64::NAN),
        best_hr: s.best_hr.unwrap_or(f64::NAN),
        best_hr_round: s.best_hr_round.unwrap_or(0),
        best_ndcg: s.best_ndcg.unwrap_or(f64::NAN),
        best_ndcg_round: s.best_ndcg_round.unwrap_or(0),
    }
}

/// Full run writing its outputs under the configured output directory.
/// `workers = 0` uses the default thread pool.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn fed3cr_run(
    cfg: *const Fed3crConfig,
    workers_n: usize,
    force: bool,
    out: *mut Fed3crSummary,
) -> Fed3crStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or(Failure::Null("cfg"))?;
        let rec = experiment::run(&cfg.0, workers(workers_n), force)?;
        if let Some(o) = out.as_mut() {
            *o = summary(&rec);
        }
        Ok(())
    })
}

/// Trains in memory and returns the metrics CSV as a newly allocated string
/// (release with [`fed3cr_string_free`]). Nothing is written to disk.
///
/// # Safety
/// `cfg` must be a live handle; `out_csv` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fed3cr_train_metrics(
    cfg: *const Fed3crConfig,
    workers_n: usize,
    out_csv: *mut *mut c_char,
) -> Fed3crStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or(Failure::Null("cfg"))?;
        let out_csv = out_arg(out_csv, "out_csv")?;
        cfg.0.validate()?;
        let ds = experiment::prepare_dataset(&cfg.0)?;
        let trained = experiment::train(&ds, &cfg.0, &cfg.0.run_options(workers(workers_n)), false)?;
        let csv = CString::new(metrics_csv(&trained.metrics)).map_err(|e| Error::Runtime(e.to_string()))?;
        *out_csv = csv.into_raw();
        Ok(())
    })
}
