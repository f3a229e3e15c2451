//! C interface: opaque dataset and fit handles, status codes, and a
//! per-thread message describing the last failure.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mlca::estimators::{self, FitResult, Method};
use mlca::step1::EmControl;
use mlca::{Dataset, MlcaError};
use ndarray::Array2;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlcaStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// Bad sizes, values, or a model that cannot be fitted to the data.
    InvalidInput = 2,
    /// The estimation failed numerically (singular information, empty class, ...).
    Numerical = 3,
    /// An internal panic was caught at the boundary.
    Panic = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlcaMethod {
    TwoStep = 0,
    OneStep = 1,
    TwoStage = 2,
}

fn method_from_code(code: u32) -> Option<Method> {
    match code {
        c if c == MlcaMethod::TwoStep as u32 => Some(Method::TwoStep),
        c if c == MlcaMethod::OneStep as u32 => Some(Method::OneStep),
        c if c == MlcaMethod::TwoStage as u32 => Some(Method::TwoStage),
        _ => None,
    }
}

/// EM settings; obtain defaults from `mlca_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MlcaOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Random starts in addition to the hierarchical start.
    pub n_starts: usize,
    pub seed: u64,
    /// Evaluate groups on the global thread pool.
    pub parallel: bool,
}

/// Responses, groups and covariates, stored sorted by group.
pub struct MlcaDataset {
    inner: Dataset,
}

/// A fitted model together with the row order of the dataset it came from.
pub struct MlcaFit {
    inner: FitResult,
    original_rows: Vec<usize>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

type Failure = (MlcaStatus, String);

fn from_lib(e: MlcaError) -> Failure {
    let status = if e.is_numerical() {
        MlcaStatus::Numerical
    } else {
        MlcaStatus::InvalidInput
    };
    (status, e.to_string())
}

fn null(name: &str) -> Failure {
    (MlcaStatus::NullPointer, format!("{name} is NULL"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    (MlcaStatus::InvalidInput, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MlcaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MlcaStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            MlcaStatus::Panic
        }
    }
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize, what: &str) -> Result<(), Failure> {
    if dst.is_null() {
        return Err(null(what));
    }
    if len != src.len() {
        return Err(invalid(format!("{what} needs {} elements, got {len}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, len);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mlca_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last call on this thread that did not return `MLCA_STATUS_OK`;
/// empty after a successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mlca_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn mlca_options_default() -> MlcaOptions {
    let d = EmControl::default();
    MlcaOptions {
        max_iter: d.max_iter,
        tol: d.tol,
        n_starts: d.n_starts,
        seed: d.seed,
        parallel: false,
    }
}

/// Builds a dataset from row-major arrays: `y` is `n_units x n_items` with 0/1
/// entries, `groups` holds one integer id per row, and `z` is
/// `n_units x n_covariates` without the intercept (NULL when `n_covariates` is 0).
///
/// # Safety
/// Every non-NULL pointer must reference at least the number of elements given
/// by the sizes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mlca_dataset_new(
    y: *const u8,
    groups: *const i64,
    z: *const f64,
    n_units: usize,
    n_items: usize,
    n_covariates: usize,
    out: *mut *mut MlcaDataset,
) -> MlcaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if y.is_null() {
            return Err(null("y"));
        }
        if groups.is_null() {
            return Err(null("groups"));
        }
        if z.is_null() && n_covariates > 0 {
            return Err(null("z"));
        }
        let cells = n_units.checked_mul(n_items).ok_or_else(|| invalid("n_units * n_items overflows"))?;
        let y = Array2::from_shape_vec((n_units, n_items), std::slice::from_raw_parts(y, cells).to_vec())
            .map_err(|e| invalid(e.to_string()))?;
        let groups = std::slice::from_raw_parts(groups, n_units);
        let zs = if n_covariates > 0 {
            let len = n_units.checked_mul(n_covariates).ok_or_else(|| invalid("n_units * n_covariates overflows"))?;
            std::slice::from_raw_parts(z, len)
        } else {
            &[]
        };
        let design = Array2::from_shape_fn((n_units, n_covariates + 1), |(i, k)| {
            if k == 0 {
                1.0
            } else {
                zs[i * n_covariates + k - 1]
            }
        });
        let inner = Dataset::new(y, groups, design).map_err(from_lib)?;
        *out = Box::into_raw(Box::new(MlcaDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `data` must be NULL or a handle from `mlca_dataset_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mlca_dataset_free(data: *mut MlcaDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Number of distinct groups; 0 for NULL.
///
/// # Safety
/// `data` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn mlca_dataset_n_groups(data: *const MlcaDataset) -> usize {
    data.as_ref().map_or(0, |d| d.inner.n_groups())
}

/// Fits `n_low` low-level and `n_high` high-level classes with one of the
/// `MLCA_METHOD_*` values. `options` may be NULL for the defaults.
///
/// # Safety
/// `data` must be a live dataset handle, `options` NULL or readable, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mlca_fit(
    data: *const MlcaDataset,
    n_low: usize,
    n_high: usize,
    method: u32,
    options: *const MlcaOptions,
    out: *mut *mut MlcaFit,
) -> MlcaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let data = &data.as_ref().ok_or_else(|| null("data"))?.inner;
        let o = options.as_ref().copied().unwrap_or_else(|| mlca_options_default());
        let ctrl = EmControl {
            max_iter: o.max_iter,
            tol: o.tol,
            n_starts: o.n_starts,
            seed: o.seed,
            parallel: o.parallel,
        };
        let method = method_from_code(method).ok_or_else(|| invalid(format!("unknown method code {method}")))?;
        let dims = data.dims(n_low, n_high).map_err(from_lib)?;
        let fit = estimators::fit(data, &dims, &ctrl, method).map_err(from_lib)?;
        *out = Box::into_raw(Box::new(MlcaFit {
            inner: fit,
            original_rows: data.original_rows().to_vec(),
        }));
        Ok(())
    })
}

/// # Safety
/// `fit` must be NULL or a handle from `mlca_fit` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mlca_fit_free(fit: *mut MlcaFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Log-likelihood of the final estimates; NaN for NULL.
///
/// # Safety
/// `fit` must be NULL or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn mlca_fit_loglik(fit: *const MlcaFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.inner.loglik)
}

/// # Safety
/// `fit` must be NULL or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn mlca_fit_converged(fit: *const MlcaFit) -> bool {
    fit.as_ref().is_some_and(|f| f.inner.converged)
}

/// EM iterations summed over all phases.
///
/// # Safety
/// `fit` must be NULL or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn mlca_fit_iterations(fit: *const MlcaFit) -> usize {
    fit.as_ref().map_or(0, |f| f.inner.total_iterations())
}

/// Length of the structural parameter vector: the `M - 1` log-odds of the
/// high-level shares, then the logit coefficients ordered by high-level class,
/// low-level class `2..T`, and design column (intercept first).
///
/// # Safety
/// `fit` must be NULL or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn mlca_fit_n_structural(fit: *const MlcaFit) -> usize {
    fit.as_ref().map_or(0, |f| f.inner.theta2.len())
}

/// Copies structural estimates and their standard errors; `se` may be NULL.
///
/// # Safety
/// `estimates` (and `se` when given) must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mlca_fit_structural(fit: *const MlcaFit, estimates: *mut f64, se: *mut f64, len: usize) -> MlcaStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.inner;
        copy_out(&f.theta2, estimates, len, "estimates")?;
        if !se.is_null() {
            copy_out(&f.se, se, len, "se")?;
        }
        Ok(())
    })
}

/// `P(item h = 1 | low-level class t)` as an `n_items x n_low` row-major array.
///
/// # Safety
/// `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mlca_fit_item_probabilities(fit: *const MlcaFit, out: *mut f64, len: usize) -> MlcaStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.inner;
        let phi: Vec<f64> = f.params.measurement.phi().iter().copied().collect();
        copy_out(&phi, out, len, "out")
    })
}

/// Low-level posterior class probabilities, `n_units x n_low` row-major, rows in
/// the order they were passed to `mlca_dataset_new`.
///
/// # Safety
/// `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mlca_fit_low_posteriors(fit: *const MlcaFit, out: *mut f64, len: usize) -> MlcaStatus {
    guard(|| {
        let f = fit.as_ref().ok_or_else(|| null("fit"))?;
        let low = f.inner.posteriors.low_marginal();
        let t = low.ncols();
        let mut buf = vec![0.0; low.len()];
        for (i, &orig) in f.original_rows.iter().enumerate() {
            buf[orig * t..(orig + 1) * t].copy_from_slice(low.row(i).as_slice().expect("contiguous rows"));
        }
        copy_out(&buf, out, len, "out")
    })
}

/// High-level posterior class probabilities, `n_groups x n_high` row-major,
/// groups in increasing id order.
///
/// # Safety
/// `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mlca_fit_high_posteriors(fit: *const MlcaFit, out: *mut f64, len: usize) -> MlcaStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.inner;
        let u: Vec<f64> = f.posteriors.u.iter().copied().collect();
        copy_out(&u, out, len, "out")
    })
}
