//! C interface to `hohmm`.
//!
//! Models cross the boundary as opaque [`HohmmModel`] handles created from
//! the JSON parameter layout or by fitting. Every fallible call returns a
//! [`HohmmStatus`]; on failure the message is kept per thread and can be
//! fetched with [`hohmm_last_error_message`]. Strings handed out by this
//! library must be released with [`hohmm_string_free`]. State indices are
//! 0-based.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hohmm::io::{params_from_json, params_to_json};
use hohmm::{EmSettings, HmmError, ModelConfig, ObservationSeries, ParameterSet, RecursionOptions};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HohmmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidParameters = 3,
    InvalidData = 4,
    Numerical = 5,
    Estimation = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct HohmmModel {
    params: ParameterSet,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HohmmFitOptions {
    pub max_iterations: usize,
    pub rel_tolerance: f64,
    pub n_starts: usize,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &HmmError) -> HohmmStatus {
    match e {
        HmmError::InvalidConfig(_) | HmmError::TensorShape { .. } | HmmError::IncompatibleWindow(_) => {
            HohmmStatus::InvalidArgument
        }
        HmmError::InvalidParameters(_) | HmmError::Format(_) => HohmmStatus::InvalidParameters,
        HmmError::NonFiniteObservation { .. }
        | HmmError::EmptySeries
        | HmmError::InvalidLength
        | HmmError::Io { .. }
        | HmmError::Parse { .. } => HohmmStatus::InvalidData,
        HmmError::ZeroNormalizer { .. }
        | HmmError::ZeroPosterior { .. }
        | HmmError::Misaligned(_)
        | HmmError::InadmissibleReference { .. }
        | HmmError::Oracle(_) => HohmmStatus::Numerical,
        HmmError::Estimation(_) => HohmmStatus::Estimation,
    }
}

fn fail(status: HohmmStatus, msg: impl Into<String>) -> HohmmStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), (HohmmStatus, String)>) -> HohmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HohmmStatus::Ok,
        Ok(Err((status, msg))) => fail(status, msg),
        Err(_) => fail(HohmmStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: hohmm::Result<T>) -> Result<T, (HohmmStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (HohmmStatus, String) {
    (HohmmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(model: *const HohmmModel) -> Result<&'a HohmmModel, (HohmmStatus, String)> {
    model.as_ref().ok_or_else(|| null("model"))
}

unsafe fn series(y: *const f64, len: usize) -> Result<ObservationSeries, (HohmmStatus, String)> {
    if y.is_null() {
        return Err(null("y"));
    }
    let values = std::slice::from_raw_parts(y, len).to_vec();
    lift(ObservationSeries::new(values))
}

unsafe fn out_slice<'a, T>(out: *mut T, out_len: usize, need: usize) -> Result<&'a mut [T], (HohmmStatus, String)> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if out_len < need {
        return Err((HohmmStatus::BufferTooSmall, format!("output buffer holds {out_len}, need {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(out, need))
}

/// Copies the message of the last failed call on this thread, or returns
/// null if there was none. Free the result with [`hohmm_string_free`].
#[no_mangle]
pub extern "C" fn hohmm_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        Some(c) => c.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hohmm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a model from the JSON parameter layout
/// `{k, h, sigma, early, pi}`.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hohmm_model_from_json(json: *const c_char, out: *mut *mut HohmmModel) -> HohmmStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| (HohmmStatus::InvalidArgument, format!("json is not UTF-8: {e}")))?;
        let params = lift(params_from_json(text))?;
        *out = Box::into_raw(Box::new(HohmmModel { params }));
        Ok(())
    })
}

/// Serializes a model to the JSON parameter layout. Free the result with
/// [`hohmm_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hohmm_model_to_json(model: *const HohmmModel, out: *mut *mut c_char) -> HohmmStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = CString::new(params_to_json(&m.params)).expect("json has no nul").into_raw();
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hohmm_model_free(model: *mut HohmmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of states, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hohmm_model_k(model: *const HohmmModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.k())
}

/// Chain order, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hohmm_model_h(model: *const HohmmModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.h())
}

/// Log-likelihood of `len` observations.
///
/// # Safety
/// `y` must point to `len` doubles and `out` to one.
#[no_mangle]
pub unsafe extern "C" fn hohmm_loglik(model: *const HohmmModel, y: *const f64, len: usize, out: *mut f64) -> HohmmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let y = series(y, len)?;
        let dst = out_slice(out, 1, 1)?;
        dst[0] = lift(hohmm::smooth(&m.params, &y, RecursionOptions::default()))?.loglik;
        Ok(())
    })
}

/// Posterior state marginals as a row-major `len × k` table.
///
/// # Safety
/// `y` must point to `len` doubles and `out` to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hohmm_marginals(
    model: *const HohmmModel,
    y: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> HohmmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let y = series(y, len)?;
        let dst = out_slice(out, out_len, len * m.params.k())?;
        let s = lift(hohmm::smooth(&m.params, &y, RecursionOptions::default()))?;
        for (d, v) in dst.iter_mut().zip(s.marginals.iter().flatten()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Most probable state at each occasion (0-based).
///
/// # Safety
/// `y` must point to `len` doubles and `out` to `len` elements.
#[no_mangle]
pub unsafe extern "C" fn hohmm_decode(model: *const HohmmModel, y: *const f64, len: usize, out: *mut usize) -> HohmmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let y = series(y, len)?;
        let dst = out_slice(out, len, len)?;
        let s = lift(hohmm::smooth(&m.params, &y, RecursionOptions::default()))?;
        dst.copy_from_slice(&hohmm::local_decode(&s.marginals));
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn hohmm_fit_options_default() -> HohmmFitOptions {
    let d = EmSettings::default();
    HohmmFitOptions {
        max_iterations: d.max_iterations,
        rel_tolerance: d.rel_tolerance,
        n_starts: d.n_starts,
        seed: d.seed,
    }
}

/// Fits an `(h, k)` model by EM and returns a new handle with states
/// ordered by increasing volatility. `options` may be null for defaults;
/// `out_loglik` may be null.
///
/// # Safety
/// `y` must point to `len` doubles, `out_model` must be valid and
/// `options`/`out_loglik` null or valid.
#[no_mangle]
pub unsafe extern "C" fn hohmm_fit(
    y: *const f64,
    len: usize,
    h: usize,
    k: usize,
    options: *const HohmmFitOptions,
    out_model: *mut *mut HohmmModel,
    out_loglik: *mut f64,
) -> HohmmStatus {
    guard(|| {
        if out_model.is_null() {
            return Err(null("out_model"));
        }
        let y = series(y, len)?;
        let o = options.as_ref().copied().unwrap_or_else(|| hohmm_fit_options_default());
        let settings = EmSettings {
            max_iterations: o.max_iterations,
            rel_tolerance: o.rel_tolerance,
            n_starts: o.n_starts,
            seed: o.seed,
            ..EmSettings::default()
        };
        let config = lift(ModelConfig::new(k, h))?;
        let r = lift(hohmm::fit(config, &y, &settings))?;
        if let Some(ll) = out_loglik.as_mut() {
            *ll = r.loglik;
        }
        let (params, _) = r.params.sorted_by_sigma();
        *out_model = Box::into_raw(Box::new(HohmmModel { params }));
        Ok(())
    })
}

/// Free parameters of an `(h, k)` model, or 0 if `k` is 0.
#[no_mangle]
pub extern "C" fn hohmm_param_count(k: usize, h: usize) -> usize {
    ModelConfig::new(k, h).map_or(0, |c| hohmm::param_count(&c))
}

/// `-2 loglik + npar ln(len)`.
#[no_mangle]
pub extern "C" fn hohmm_bic(loglik: f64, npar: usize, len: usize) -> f64 {
    hohmm::bic(loglik, npar, len)
}
