//! C interface to linpath.
//!
//! Objects cross the boundary as opaque handles created by `*_load` or
//! `*_evaluate_*` functions and released with the matching `*_free`.
//! Every fallible call returns an [`LpStatus`]; on failure the message is
//! available from [`lp_last_error_message`] on the same thread until the
//! next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use linpath::analysis::{self, BarrierDefinition};
use linpath::data::{self, Dataset, Split};
use linpath::interp::{self, BnMode, PathCurve};
use linpath::nn::evaluate_batches;
use linpath::trainer::{self, Checkpoint};
use linpath::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Format = 5,
    NotCheckpoint = 6,
    Version = 7,
    Corrupt = 8,
    Integrity = 9,
    Mismatch = 10,
    Numeric = 11,
    Panic = 12,
    Other = 13,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpSplit {
    Train = 0,
    Test = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpBnMode {
    Interpolate = 0,
    Recalibrate = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpBarrierDefinition {
    MaxEndpoint = 0,
    LinearBaseline = 1,
}

/// Mean loss (nats) and error fraction over a dataset.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LpEval {
    pub loss: f64,
    pub error: f64,
    pub examples: usize,
}

/// A loaded checkpoint.
pub struct LpCheckpoint(Checkpoint);

/// A loaded, normalized dataset split.
pub struct LpDataset(Dataset);

/// Loss and error sampled along an interpolation path.
pub struct LpPathCurve(PathCurve);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LpStatus {
    match e {
        Error::Io { .. } => LpStatus::Io,
        Error::Format { .. } | Error::Config(_) => LpStatus::Format,
        Error::NotCheckpoint => LpStatus::NotCheckpoint,
        Error::Version(_) => LpStatus::Version,
        Error::Corrupt { .. } => LpStatus::Corrupt,
        Error::Integrity(_) => LpStatus::Integrity,
        Error::InvalidSpec(_)
        | Error::Shape(_)
        | Error::Length { .. }
        | Error::Precision { .. }
        | Error::Label { .. }
        | Error::CurveMismatch(_) => LpStatus::Mismatch,
        Error::NonFinite { .. } | Error::DegenerateDirection | Error::DegenerateVariance(_) => {
            LpStatus::Numeric
        }
        Error::InvalidArgument(_) | Error::EmptyDataset => LpStatus::InvalidArgument,
        Error::Experiment(_) => LpStatus::Other,
    }
}

struct Fail(LpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(LpStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(LpStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LpStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            LpStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn bn_mode(m: LpBnMode) -> BnMode {
    match m {
        LpBnMode::Interpolate => BnMode::Interpolate,
        LpBnMode::Recalibrate => BnMode::Recalibrate,
    }
}

fn definition(d: LpBarrierDefinition) -> BarrierDefinition {
    match d {
        LpBarrierDefinition::MaxEndpoint => BarrierDefinition::MaxEndpoint,
        LpBarrierDefinition::LinearBaseline => BarrierDefinition::LinearBaseline,
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes the checkpoint iterations for a run of `t_max` iterations into
/// `out`. `*len` receives the schedule length; if it exceeds `capacity`
/// nothing is written and `LP_STATUS_BUFFER_TOO_SMALL` is returned, so a
/// call with `out = NULL, capacity = 0` queries the size.
///
/// # Safety
/// `out` must point to `capacity` writable elements (or be NULL when
/// `capacity` is 0) and `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_checkpoint_schedule(
    t_max: u64,
    out: *mut u64,
    capacity: usize,
    len: *mut usize,
) -> LpStatus {
    guard(|| {
        if len.is_null() {
            return Err(null("len"));
        }
        let s = trainer::checkpoint_schedule(t_max)?;
        *len = s.len();
        if s.len() > capacity {
            return Err(Fail(
                LpStatus::BufferTooSmall,
                format!("schedule has {} entries, buffer holds {capacity}", s.len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(s.as_ptr(), out, s.len());
        Ok(())
    })
}

/// Loads and verifies a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lp_checkpoint_load(
    path: *const c_char,
    out: *mut *mut LpCheckpoint,
) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let ckpt = linpath::checkpoint::load(path)?;
        *out = Box::into_raw(Box::new(LpCheckpoint(ckpt)));
        Ok(())
    })
}

/// Writes a checkpoint to `path` atomically.
///
/// # Safety
/// `ckpt` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lp_checkpoint_save(
    ckpt: *const LpCheckpoint,
    path: *const c_char,
) -> LpStatus {
    guard(|| {
        let c = obj(ckpt, "ckpt")?;
        let path = path_arg(path, "path")?;
        linpath::checkpoint::save(&c.0, path)?;
        Ok(())
    })
}

/// # Safety
/// `ckpt` must be NULL or a handle from [`lp_checkpoint_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lp_checkpoint_free(ckpt: *mut LpCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Training iteration the checkpoint was taken at (0 for NULL).
///
/// # Safety
/// `ckpt` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_checkpoint_iteration(ckpt: *const LpCheckpoint) -> u64 {
    ckpt.as_ref().map_or(0, |c| c.0.iteration)
}

/// Seed of the run that produced the checkpoint (0 for NULL).
///
/// # Safety
/// `ckpt` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_checkpoint_seed(ckpt: *const LpCheckpoint) -> u64 {
    ckpt.as_ref().map_or(0, |c| c.0.seed)
}

/// Number of scalars in the flattened state (0 for NULL).
///
/// # Safety
/// `ckpt` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_checkpoint_param_count(ckpt: *const LpCheckpoint) -> usize {
    ckpt.as_ref().map_or(0, |c| c.0.params.len())
}

/// Copies the flattened state into `out` as doubles, widening f32 values
/// exactly. `len` must equal [`lp_checkpoint_param_count`].
///
/// # Safety
/// `ckpt` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lp_checkpoint_params_f64(
    ckpt: *const LpCheckpoint,
    out: *mut f64,
    len: usize,
) -> LpStatus {
    guard(|| {
        let c = obj(ckpt, "ckpt")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let n = c.0.params.len();
        if len != n {
            return Err(Fail(
                LpStatus::BufferTooSmall,
                format!("checkpoint has {n} values, buffer holds {len}"),
            ));
        }
        let v = c.0.params.values().to_f64_vec();
        ptr::copy_nonoverlapping(v.as_ptr(), out, n);
        Ok(())
    })
}

/// Loads an IDX image/label file pair (MNIST layout and normalization).
///
/// # Safety
/// Both paths must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lp_dataset_load_idx(
    images: *const c_char,
    labels: *const c_char,
    split: LpSplit,
    out: *mut *mut LpDataset,
) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let images = path_arg(images, "images")?;
        let labels = path_arg(labels, "labels")?;
        let split = match split {
            LpSplit::Train => Split::Train,
            LpSplit::Test => Split::Test,
        };
        let d = data::load_idx(images, labels, split)?;
        *out = Box::into_raw(Box::new(LpDataset(d)));
        Ok(())
    })
}

/// Loads the train or test split of a CIFAR-10 binary batch directory.
///
/// # Safety
/// `dir` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lp_dataset_load_cifar_dir(
    dir: *const c_char,
    split: LpSplit,
    out: *mut *mut LpDataset,
) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = path_arg(dir, "dir")?;
        let split = match split {
            LpSplit::Train => Split::Train,
            LpSplit::Test => Split::Test,
        };
        let d = data::load_cifar_dir(dir, split)?;
        *out = Box::into_raw(Box::new(LpDataset(d)));
        Ok(())
    })
}

/// Number of examples (0 for NULL).
///
/// # Safety
/// `data` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_dataset_len(data: *const LpDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `data` must be NULL or a handle from a `lp_dataset_load_*` call not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn lp_dataset_free(data: *mut LpDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Mean loss and error of a checkpoint over a dataset, in batches of
/// `batch_size` (0 means the whole dataset at once).
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_evaluate(
    ckpt: *const LpCheckpoint,
    data: *const LpDataset,
    batch_size: usize,
    out: *mut LpEval,
) -> LpStatus {
    guard(|| {
        let c = obj(ckpt, "ckpt")?;
        let d = obj(data, "data")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let bs = if batch_size == 0 {
            d.0.len()
        } else {
            batch_size
        };
        let r = evaluate_batches(&c.0.params, &c.0.spec, d.0.batches(bs))?;
        *out = LpEval {
            loss: r.loss,
            error: r.error,
            examples: r.examples,
        };
        Ok(())
    })
}

/// Evaluates `n_points` states evenly spaced on the segment from `from` to
/// `to`, endpoints included. `calibration` is required in recalibrate mode
/// and ignored otherwise.
///
/// # Safety
/// Handles must be live (`calibration` may be NULL); `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lp_evaluate_path(
    from: *const LpCheckpoint,
    to: *const LpCheckpoint,
    data: *const LpDataset,
    n_points: usize,
    mode: LpBnMode,
    calibration: *const LpDataset,
    out: *mut *mut LpPathCurve,
) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let from = obj(from, "from")?;
        let to = obj(to, "to")?;
        let d = obj(data, "data")?;
        let mode = bn_mode(mode);
        let calib = calibration.as_ref().map(|c| &c.0);
        if mode == BnMode::Recalibrate && calib.is_none() {
            return Err(invalid("recalibrate mode needs a calibration dataset"));
        }
        let curve = interp::evaluate_path(&from.0, &to.0, n_points, &d.0, mode, calib)?;
        *out = Box::into_raw(Box::new(LpPathCurve(curve)));
        Ok(())
    })
}

/// Number of sampled points (0 for NULL).
///
/// # Safety
/// `curve` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_path_len(curve: *const LpPathCurve) -> usize {
    curve.as_ref().map_or(0, |c| c.0.len())
}

/// Reads point `index` of a curve. Any output pointer may be NULL.
///
/// # Safety
/// `curve` must be a live handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_path_point(
    curve: *const LpPathCurve,
    index: usize,
    alpha: *mut f64,
    loss: *mut f64,
    error: *mut f64,
) -> LpStatus {
    guard(|| {
        let c = &obj(curve, "curve")?.0;
        if index >= c.len() {
            return Err(invalid(format!(
                "index {index} out of range for {} points",
                c.len()
            )));
        }
        if !alpha.is_null() {
            *alpha = c.alphas[index];
        }
        if !loss.is_null() {
            *loss = c.points[index].loss;
        }
        if !error.is_null() {
            *error = c.points[index].error;
        }
        Ok(())
    })
}

/// Loss and error barrier of a curve.
///
/// # Safety
/// `curve` must be a live handle; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn lp_path_barrier(
    curve: *const LpPathCurve,
    def: LpBarrierDefinition,
    loss_barrier: *mut f64,
    error_barrier: *mut f64,
) -> LpStatus {
    guard(|| {
        let c = &obj(curve, "curve")?.0;
        if loss_barrier.is_null() || error_barrier.is_null() {
            return Err(null("output"));
        }
        let b = analysis::barrier_height(c, definition(def));
        *loss_barrier = b.loss;
        *error_barrier = b.error;
        Ok(())
    })
}

/// # Safety
/// `curve` must be NULL or a handle from [`lp_evaluate_path`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lp_path_free(curve: *mut LpPathCurve) {
    if !curve.is_null() {
        drop(Box::from_raw(curve));
    }
}

/// Barrier of `n` sampled values at positions `alphas`.
///
/// # Safety
/// `values` and `alphas` must each point to `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lp_barrier_height(
    values: *const f64,
    alphas: *const f64,
    n: usize,
    def: LpBarrierDefinition,
    out: *mut f64,
) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n == 0 {
            return Err(invalid("empty curve"));
        }
        let v = slice_arg(values, n, "values")?;
        let a = slice_arg(alphas, n, "alphas")?;
        if v.iter().chain(a).any(|x| !x.is_finite()) {
            return Err(Fail(LpStatus::Numeric, "non-finite input".into()));
        }
        *out = analysis::barrier(v, a, definition(def));
        Ok(())
    })
}

/// Largest rise between consecutive values, 0 for a non-increasing curve.
///
/// # Safety
/// `values` must point to `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lp_monotonicity_violation(
    values: *const f64,
    n: usize,
    out: *mut f64,
) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let v = slice_arg(values, n, "values")?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Fail(LpStatus::Numeric, "non-finite input".into()));
        }
        *out = analysis::monotonicity(v);
        Ok(())
    })
}
