//! C ABI over `whitenet`.
//!
//! Conventions:
//! - Every fallible function returns a [`WnStatus`]; on failure a message is
//!   available from [`wn_last_error_message`] on the same thread.
//! - Matrices are `channels × samples`, row-major (`data[c * samples + b]`).
//! - Objects are opaque handles created by `*_new` and released by `*_free`.
//!   Strings returned by the library are released with [`wn_string_free`].
//! - Panics never cross the boundary; they surface as `WN_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::DMatrix;
use whitenet::diagnostics;
use whitenet::sampler::{self, ClassInventory, GrbsParams, GrbsSampler, GroupPlan};
use whitenet::whitening::{self, CovarianceDivisor, WhiteningConfig, WhiteningState};
use whitenet::{Error, FeatureBatch};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NumericalInput = 3,
    LinearAlgebra = 4,
    Uninitialized = 5,
    Config = 6,
    Parse = 7,
    Io = 8,
    NanLoss = 9,
    Checkpoint = 10,
    Panic = 11,
}

/// Covariance normaliser, mirrors `whitenet::whitening::CovarianceDivisor`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WnDivisor {
    Samples = 0,
    Channels = 1,
}

/// Opaque whitening layer state.
pub struct WnWhitening {
    state: WhiteningState,
    last_input: Option<FeatureBatch>,
}

/// Opaque GRBS group plan.
pub struct WnGroupPlan {
    plan: GroupPlan,
}

/// Opaque GRBS batch generator.
pub struct WnGrbsSampler {
    sampler: GrbsSampler,
    batch_size: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    let c = CString::new(text).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn status_of(err: &Error) -> WnStatus {
    match err {
        Error::NumericalInput(_) => WnStatus::NumericalInput,
        Error::LinearAlgebra { .. } => WnStatus::LinearAlgebra,
        Error::InvalidArgument(_) | Error::StreamExhausted { .. } => WnStatus::InvalidArgument,
        Error::UninitializedStatistics => WnStatus::Uninitialized,
        Error::Config(_) | Error::ConfigMismatch(_) => WnStatus::Config,
        Error::Parse { .. } | Error::Json(_) => WnStatus::Parse,
        Error::Checkpoint(_) => WnStatus::Checkpoint,
        Error::NanLoss { .. } => WnStatus::NanLoss,
        Error::Io { .. } => WnStatus::Io,
    }
}

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), FfiError>) -> WnStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => WnStatus::Ok,
        Ok(Err(FfiError::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            WnStatus::NullPointer
        }
        Ok(Err(FfiError::Invalid(msg))) => {
            set_last_error(msg);
            WnStatus::InvalidArgument
        }
        Ok(Err(FfiError::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            WnStatus::Panic
        }
    }
}

enum FfiError {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for FfiError {
    fn from(e: Error) -> Self {
        FfiError::Core(e)
    }
}

type FfiResult<T> = Result<T, FfiError>;

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(FfiError::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &'static str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(FfiError::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &'static str) -> FfiResult<&'a T> {
    ptr.as_ref().ok_or(FfiError::Null(what))
}

unsafe fn handle_mut<'a, T>(ptr: *mut T, what: &'static str) -> FfiResult<&'a mut T> {
    ptr.as_mut().ok_or(FfiError::Null(what))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &'static str) -> FfiResult<()> {
    if out.is_null() {
        return Err(FfiError::Null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn batch(data: *const f64, channels: usize, samples: usize) -> FfiResult<FeatureBatch> {
    let len = channels
        .checked_mul(samples)
        .ok_or_else(|| FfiError::Invalid("channels * samples overflows".into()))?;
    let values = slice(data, len, "data")?;
    Ok(FeatureBatch::from_row_slice(channels, samples, values)?)
}

fn copy_matrix(m: &DMatrix<f64>, out: &mut [f64]) -> FfiResult<()> {
    let (rows, cols) = m.shape();
    if out.len() != rows * cols {
        return Err(FfiError::Invalid(format!(
            "output buffer holds {} values, need {}",
            out.len(),
            rows * cols
        )));
    }
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = m[(r, c)];
        }
    }
    Ok(())
}

unsafe fn path_arg<'a>(ptr: *const c_char, what: &'static str) -> FfiResult<&'a Path> {
    if ptr.is_null() {
        return Err(FfiError::Null(what));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| FfiError::Invalid(format!("{what} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

/// Message for the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn wn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by the library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn wn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------- whitening

/// Creates a whitening layer for `channels` channels.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn wn_whitening_new(
    channels: usize,
    epsilon: f64,
    momentum: f64,
    divisor: WnDivisor,
    out: *mut *mut WnWhitening,
) -> WnStatus {
    guard(|| {
        let config = WhiteningConfig {
            epsilon,
            momentum,
            divisor: match divisor {
                WnDivisor::Samples => CovarianceDivisor::Samples,
                WnDivisor::Channels => CovarianceDivisor::Channels,
            },
        };
        let state = WhiteningState::new(channels, &config)?;
        let boxed = Box::new(WnWhitening {
            state,
            last_input: None,
        });
        write_out(out, Box::into_raw(boxed), "out")
    })
}

/// # Safety
/// `h` must be NULL or a handle from [`wn_whitening_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wn_whitening_free(h: *mut WnWhitening) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Whitens a training batch with its own statistics and remembers the batch
/// for a subsequent [`wn_whitening_backward`]. Running statistics are not
/// touched; call [`wn_whitening_update_running`] for that.
///
/// # Safety
/// `data` and `out` must each hold `channels * samples` doubles.
#[no_mangle]
pub unsafe extern "C" fn wn_whitening_forward(
    h: *mut WnWhitening,
    data: *const f64,
    channels: usize,
    samples: usize,
    out: *mut f64,
) -> WnStatus {
    guard(|| {
        let h = handle_mut(h, "handle")?;
        let x = batch(data, channels, samples)?;
        let y = h.state.forward_train(&x)?;
        copy_matrix(y.matrix(), slice_mut(out, channels * samples, "out")?)?;
        h.last_input = Some(x);
        Ok(())
    })
}

/// Back-propagates `grad_output` through the last forward batch.
/// `degenerate_pairs` may be NULL.
///
/// # Safety
/// `grad_output` and `grad_input` must each hold `channels * samples` doubles.
#[no_mangle]
pub unsafe extern "C" fn wn_whitening_backward(
    h: *const WnWhitening,
    grad_output: *const f64,
    channels: usize,
    samples: usize,
    grad_input: *mut f64,
    degenerate_pairs: *mut usize,
) -> WnStatus {
    guard(|| {
        let h = handle(h, "handle")?;
        let x = h
            .last_input
            .as_ref()
            .ok_or_else(|| FfiError::Invalid("backward called before forward".into()))?;
        let g = batch(grad_output, channels, samples)?;
        let grad = whitening::zca_backward(&g, x, &h.state)?;
        copy_matrix(
            grad.grad_input.matrix(),
            slice_mut(grad_input, channels * samples, "grad_input")?,
        )?;
        if !degenerate_pairs.is_null() {
            degenerate_pairs.write(grad.degenerate_pairs);
        }
        Ok(())
    })
}

/// Folds the last batch statistics into the running averages.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wn_whitening_update_running(h: *mut WnWhitening) -> WnStatus {
    guard(|| {
        let h = handle_mut(h, "handle")?;
        whitening::update_running_stats(&mut h.state);
        Ok(())
    })
}

/// Whitens with the running statistics; any `samples >= 1` is accepted.
///
/// # Safety
/// `data` and `out` must each hold `channels * samples` doubles.
#[no_mangle]
pub unsafe extern "C" fn wn_whitening_inference(
    h: *const WnWhitening,
    data: *const f64,
    channels: usize,
    samples: usize,
    out: *mut f64,
) -> WnStatus {
    guard(|| {
        let h = handle(h, "handle")?;
        let x = batch(data, channels, samples)?;
        let y = whitening::zca_inference(&x, &h.state)?;
        copy_matrix(y.matrix(), slice_mut(out, channels * samples, "out")?)
    })
}

/// Copies the current batch transform `Σ^{-1/2}` (`channels × channels`).
///
/// # Safety
/// `out` must hold `channels * channels` doubles.
#[no_mangle]
pub unsafe extern "C" fn wn_whitening_transform(h: *const WnWhitening, out: *mut f64) -> WnStatus {
    guard(|| {
        let h = handle(h, "handle")?;
        let c = h.state.channels();
        copy_matrix(&h.state.transform, slice_mut(out, c * c, "out")?)
    })
}

// -------------------------------------------------------------------- GRBS

/// Builds a complete GRBS plan from per-class sample counts indexed by class id.
///
/// # Safety
/// `counts` must hold `num_classes` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wn_grbs_plan_new(
    counts: *const usize,
    num_classes: usize,
    groups: usize,
    r0: f64,
    alpha: f64,
    batch_size: usize,
    out: *mut *mut WnGroupPlan,
) -> WnStatus {
    guard(|| {
        let counts = slice(counts, num_classes, "counts")?;
        let inventory = ClassInventory::from_counts(counts)?;
        let params = GrbsParams { groups, r0, alpha };
        let plan = sampler::plan_grbs(&inventory, &params, batch_size)?;
        write_out(out, Box::into_raw(Box::new(WnGroupPlan { plan })), "out")
    })
}

/// # Safety
/// `h` must be NULL or a live plan handle.
#[no_mangle]
pub unsafe extern "C" fn wn_grbs_plan_free(h: *mut WnGroupPlan) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live plan handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wn_grbs_plan_r_min(h: *const WnGroupPlan, out: *mut f64) -> WnStatus {
    guard(|| write_out(out, handle(h, "handle")?.plan.r_min, "out"))
}

/// # Safety
/// `h` must be a live plan handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wn_grbs_plan_scale(h: *const WnGroupPlan, out: *mut f64) -> WnStatus {
    guard(|| write_out(out, handle(h, "handle")?.plan.scale, "out"))
}

/// # Safety
/// `h` must be a live plan handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wn_grbs_plan_num_groups(h: *const WnGroupPlan, out: *mut usize) -> WnStatus {
    guard(|| write_out(out, handle(h, "handle")?.plan.groups.len(), "out"))
}

/// Per-class sampling probability within the class's group, indexed by
/// class id, and the group index of each class. `group_of` may be NULL.
///
/// # Safety
/// `probs` (and `group_of` when non-NULL) must hold `num_classes` values.
#[no_mangle]
pub unsafe extern "C" fn wn_grbs_plan_class_probs(
    h: *const WnGroupPlan,
    num_classes: usize,
    probs: *mut f64,
    group_of: *mut usize,
) -> WnStatus {
    guard(|| {
        let plan = &handle(h, "handle")?.plan;
        let total: usize = plan.groups.iter().map(|g| g.classes.len()).sum();
        if total != num_classes {
            return Err(FfiError::Invalid(format!(
                "plan covers {total} classes, caller passed {num_classes}"
            )));
        }
        let probs = slice_mut(probs, num_classes, "probs")?;
        let mut groups = if group_of.is_null() {
            None
        } else {
            Some(slice_mut(group_of, num_classes, "group_of")?)
        };
        for (gi, g) in plan.groups.iter().enumerate() {
            for (&class, &p) in g.classes.iter().zip(&g.probs) {
                probs[class] = p;
                if let Some(out) = groups.as_deref_mut() {
                    out[class] = gi;
                }
            }
        }
        Ok(())
    })
}

/// Serialises the plan (groups, ratios, probabilities, `r_min`, scale) as
/// JSON. Release the result with [`wn_string_free`].
///
/// # Safety
/// `h` must be a live plan handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wn_grbs_plan_to_json(h: *const WnGroupPlan, out: *mut *mut c_char) -> WnStatus {
    guard(|| {
        let json = handle(h, "handle")?.plan.to_json()?;
        let c = CString::new(json).map_err(|e| FfiError::Invalid(e.to_string()))?;
        write_out(out, c.into_raw(), "out")
    })
}

/// Creates a batch generator over `labels` (class id per sample).
///
/// # Safety
/// `labels` must hold `num_samples` values; `plan` must be live.
#[no_mangle]
pub unsafe extern "C" fn wn_grbs_sampler_new(
    plan: *const WnGroupPlan,
    labels: *const usize,
    num_samples: usize,
    seed: u64,
    out: *mut *mut WnGrbsSampler,
) -> WnStatus {
    guard(|| {
        let plan = &handle(plan, "plan")?.plan;
        let labels = slice(labels, num_samples, "labels")?;
        let sampler = GrbsSampler::new(plan, labels, seed)?;
        let boxed = Box::new(WnGrbsSampler {
            sampler,
            batch_size: plan.batch_size,
        });
        write_out(out, Box::into_raw(boxed), "out")
    })
}

/// # Safety
/// `h` must be NULL or a live sampler handle.
#[no_mangle]
pub unsafe extern "C" fn wn_grbs_sampler_free(h: *mut WnGrbsSampler) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Draws the next batch. Both buffers must hold `batch_size` values;
/// `classes` may be NULL.
///
/// # Safety
/// Buffers must be valid for `batch_size` writes.
#[no_mangle]
pub unsafe extern "C" fn wn_grbs_sampler_next(
    h: *mut WnGrbsSampler,
    batch_size: usize,
    samples: *mut usize,
    classes: *mut usize,
) -> WnStatus {
    guard(|| {
        let h = handle_mut(h, "handle")?;
        if batch_size != h.batch_size {
            return Err(FfiError::Invalid(format!(
                "buffer size {batch_size} differs from plan batch size {}",
                h.batch_size
            )));
        }
        let samples = slice_mut(samples, batch_size, "samples")?;
        let mut classes = if classes.is_null() {
            None
        } else {
            Some(slice_mut(classes, batch_size, "classes")?)
        };
        for (i, (s, c)) in h.sampler.next_grbs_batch().into_iter().enumerate() {
            samples[i] = s;
            if let Some(out) = classes.as_deref_mut() {
                out[i] = c;
            }
        }
        Ok(())
    })
}

// ------------------------------------------------------------- diagnostics

/// Pearson correlation matrix (`channels × channels`) and the mean absolute
/// off-diagonal coefficient. `rho` may be NULL.
///
/// # Safety
/// `data` must hold `channels * samples` doubles, `rho` `channels²`.
#[no_mangle]
pub unsafe extern "C" fn wn_ppmcc(
    data: *const f64,
    channels: usize,
    samples: usize,
    rho: *mut f64,
    mean_abs_offdiag: *mut f64,
) -> WnStatus {
    guard(|| {
        let report = diagnostics::ppmcc(&batch(data, channels, samples)?)?;
        if !rho.is_null() {
            copy_matrix(&report.rho, slice_mut(rho, channels * channels, "rho")?)?;
        }
        write_out(mean_abs_offdiag, report.mean_abs_offdiag, "mean_abs_offdiag")
    })
}

/// Singular values of the centered batch, descending. `out` must hold
/// `min(channels, samples)` values.
///
/// # Safety
/// `data` must hold `channels * samples` doubles.
#[no_mangle]
pub unsafe extern "C" fn wn_singular_spectrum(
    data: *const f64,
    channels: usize,
    samples: usize,
    out: *mut f64,
) -> WnStatus {
    guard(|| {
        let report = diagnostics::singular_spectrum(&batch(data, channels, samples)?)?;
        let out = slice_mut(out, channels.min(samples), "out")?;
        out.copy_from_slice(&report.singular_values);
        Ok(())
    })
}

/// Trace of a `channels × channels` covariance matrix.
///
/// # Safety
/// `covariance` must hold `channels²` doubles.
#[no_mangle]
pub unsafe extern "C" fn wn_stability_e(covariance: *const f64, channels: usize, out: *mut f64) -> WnStatus {
    guard(|| {
        let values = slice(covariance, channels * channels, "covariance")?;
        let m = DMatrix::from_row_slice(channels, channels, values);
        write_out(out, diagnostics::stability_e(&m), "out")
    })
}

// ---------------------------------------------------------------- training

/// Runs the experiment described by a JSON config file and writes its
/// artifacts to `out_dir`. `out_dir` may be NULL to use the config's own.
///
/// # Safety
/// Paths must be NUL-terminated UTF-8; `overall_accuracy` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn wn_train_from_config(
    config_path: *const c_char,
    out_dir: *const c_char,
    overall_accuracy: *mut f64,
) -> WnStatus {
    guard(|| {
        let config_path = path_arg(config_path, "config_path")?;
        let mut config = whitenet::config::ExperimentConfig::load(config_path)?;
        let base = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = if out_dir.is_null() {
            match &config.output_dir {
                Some(d) if d.is_relative() => base.join(d),
                Some(d) => d.clone(),
                None => {
                    return Err(FfiError::Core(Error::Config(vec![
                        "output_dir: required when out_dir is NULL".into(),
                    ])))
                }
            }
        } else {
            path_arg(out_dir, "out_dir")?.to_path_buf()
        };
        config.output_dir = Some(out.clone());
        let result = whitenet::experiment::run_to_dir(&config, &base, &out)?;
        if !overall_accuracy.is_null() {
            overall_accuracy.write(result.metrics.overall);
        }
        Ok(())
    })
}
