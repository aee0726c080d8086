//! C ABI for the spatial field estimator.
//!
//! The surface follows the usual embedding pattern: opaque handles
//! created and freed by this library, integer status codes, caller-owned
//! output buffers for numeric arrays, and a thread-local message for the
//! last error. All entry points catch panics and turn them into
//! [`FieldnetStatus::Panic`].
//!
//! ```c
//! fieldnet_scenario *sc = NULL;
//! if (fieldnet_scenario_from_json(json, &sc) != FIELDNET_OK) { ... }
//! fieldnet_run *run = NULL;
//! if (fieldnet_run_pipeline(sc, true, &run) != FIELDNET_OK) { ... }
//! size_t m = fieldnet_run_grid_len(run);
//! double *mean = malloc(m * sizeof(double));
//! fieldnet_run_posterior_mean(run, mean, m);
//! fieldnet_run_free(run);
//! fieldnet_scenario_free(sc);
//! ```

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use fieldnet::error::Error;
use fieldnet::harness::{run_pipeline, Mode, PipelineResult, ScenarioConfig};

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldnetStatus {
    Ok = 0,
    /// Distributed and centralized results disagree beyond contract, or a
    /// scenario failed validation.
    ToleranceExceeded = 1,
    /// Factorization or iteration failure.
    SolverFailure = 2,
    /// Malformed configuration or arguments.
    InvalidInput = 3,
    /// A required pointer was null.
    NullPointer = 4,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 5,
    /// The library panicked; state is unspecified but memory-safe.
    Panic = 6,
}

/// Parsed scenario configuration (opaque).
pub struct fieldnet_scenario {
    config: ScenarioConfig,
}

/// Finished pipeline run (opaque).
pub struct fieldnet_run {
    result: PipelineResult,
}

/// Scalar summary of a run.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FieldnetSummary {
    pub cost: f64,
    pub iterations: u64,
    pub converged: bool,
    pub rmse_map: f64,
    pub rmse_prior: f64,
    pub coverage95: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let cleaned: String = message.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> FieldnetStatus {
    match err.exit_code() {
        1 => FieldnetStatus::ToleranceExceeded,
        2 => FieldnetStatus::SolverFailure,
        _ => FieldnetStatus::InvalidInput,
    }
}

fn guarded(f: impl FnOnce() -> FieldnetStatus) -> FieldnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("panic inside fieldnet");
            FieldnetStatus::Panic
        }
    }
}

/// Message of the most recent error on this thread; empty string when the
/// last call succeeded. The pointer stays valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn fieldnet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fieldnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Parse a scenario configuration from JSON.
///
/// # Safety
/// `json` must point to a NUL-terminated string and `out` must be a valid
/// pointer; on success `*out` owns the scenario and must be released with
/// [`fieldnet_scenario_free`].
#[no_mangle]
pub unsafe extern "C" fn fieldnet_scenario_from_json(
    json: *const c_char,
    out: *mut *mut fieldnet_scenario,
) -> FieldnetStatus {
    guarded(|| {
        if json.is_null() || out.is_null() {
            set_error("null pointer argument");
            return FieldnetStatus::NullPointer;
        }
        let text = match unsafe { CStr::from_ptr(json) }.to_str() {
            Ok(t) => t,
            Err(_) => {
                set_error("configuration is not valid UTF-8");
                return FieldnetStatus::InvalidUtf8;
            }
        };
        match ScenarioConfig::from_json(text) {
            Ok(config) => {
                unsafe {
                    *out = Box::into_raw(Box::new(fieldnet_scenario { config }));
                }
                FieldnetStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a scenario handle; accepts null.
///
/// # Safety
/// `scenario` must be null or a pointer returned by
/// [`fieldnet_scenario_from_json`] that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn fieldnet_scenario_free(scenario: *mut fieldnet_scenario) {
    if !scenario.is_null() {
        drop(unsafe { Box::from_raw(scenario) });
    }
}

/// Run the full pipeline (generation, fit, posterior, metrics) in
/// centralized or distributed mode.
///
/// # Safety
/// `scenario` must be a live scenario handle and `out` a valid pointer;
/// on success `*out` owns the run and must be released with
/// [`fieldnet_run_free`].
#[no_mangle]
pub unsafe extern "C" fn fieldnet_run_pipeline(
    scenario: *const fieldnet_scenario,
    distributed: bool,
    out: *mut *mut fieldnet_run,
) -> FieldnetStatus {
    guarded(|| {
        if scenario.is_null() || out.is_null() {
            set_error("null pointer argument");
            return FieldnetStatus::NullPointer;
        }
        let config = unsafe { &(*scenario).config };
        let mode = if distributed { Mode::Distributed } else { Mode::Centralized };
        match run_pipeline(config, mode) {
            Ok(result) => {
                unsafe {
                    *out = Box::into_raw(Box::new(fieldnet_run { result }));
                }
                FieldnetStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a run handle; accepts null.
///
/// # Safety
/// `run` must be null or a pointer returned by [`fieldnet_run_pipeline`]
/// that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn fieldnet_run_free(run: *mut fieldnet_run) {
    if !run.is_null() {
        drop(unsafe { Box::from_raw(run) });
    }
}

/// Number of hyperparameters of the fitted model; 0 for null input.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn fieldnet_run_hyper_len(run: *const fieldnet_run) -> usize {
    if run.is_null() {
        return 0;
    }
    unsafe { &*run }.result.ml.gamma_ml.values.len()
}

/// Number of regression grid points; 0 for null input.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn fieldnet_run_grid_len(run: *const fieldnet_run) -> usize {
    if run.is_null() {
        return 0;
    }
    unsafe { &*run }.result.posterior.mean.len()
}

unsafe fn copy_out(values: &[f64], buf: *mut f64, len: usize) -> FieldnetStatus {
    if buf.is_null() {
        set_error("null output buffer");
        return FieldnetStatus::NullPointer;
    }
    if len != values.len() {
        set_error(&format!("buffer holds {len} values, expected {}", values.len()));
        return FieldnetStatus::InvalidInput;
    }
    unsafe {
        std::ptr::copy_nonoverlapping(values.as_ptr(), buf, len);
    }
    FieldnetStatus::Ok
}

macro_rules! array_getter {
    ($(#[$doc:meta])* $name:ident, $extract:expr) => {
        $(#[$doc])*
        ///
        /// # Safety
        /// `run` must be a live run handle and `buf` must point to `len`
        /// writable doubles.
        #[no_mangle]
        pub unsafe extern "C" fn $name(
            run: *const fieldnet_run,
            buf: *mut f64,
            len: usize,
        ) -> FieldnetStatus {
            guarded(|| {
                if run.is_null() {
                    set_error("null run handle");
                    return FieldnetStatus::NullPointer;
                }
                let result = unsafe { &(*run).result };
                let values: Vec<f64> = $extract(result);
                unsafe { copy_out(&values, buf, len) }
            })
        }
    };
}

array_getter!(
    /// Fitted hyperparameters (`fieldnet_run_hyper_len` entries).
    fieldnet_run_gamma,
    |r: &PipelineResult| r.ml.gamma_ml.values.clone()
);
array_getter!(
    /// Auxiliary variable z at the measurement points (N entries).
    fieldnet_run_z,
    |r: &PipelineResult| r.ml.z.clone()
);
array_getter!(
    /// First coordinate of each regression grid point (grid_len entries).
    fieldnet_run_grid,
    |r: &PipelineResult| r.scenario.grid.points().iter().map(|p| p[0]).collect()
);
array_getter!(
    /// Posterior mean over the grid (grid_len entries).
    fieldnet_run_posterior_mean,
    |r: &PipelineResult| r.posterior.mean.clone()
);
array_getter!(
    /// Posterior variance over the grid (grid_len entries).
    fieldnet_run_posterior_variance,
    |r: &PipelineResult| r.posterior.variances()
);
array_getter!(
    /// Lower 95% bound over the grid (grid_len entries).
    fieldnet_run_lower95,
    |r: &PipelineResult| r.posterior.lower95.clone()
);
array_getter!(
    /// Upper 95% bound over the grid (grid_len entries).
    fieldnet_run_upper95,
    |r: &PipelineResult| r.posterior.upper95.clone()
);
array_getter!(
    /// Fitted prior mean over the grid (grid_len entries).
    fieldnet_run_prior_mean,
    |r: &PipelineResult| r.prior_mean.clone()
);

/// Scalar summary of the run.
///
/// # Safety
/// `run` must be a live run handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fieldnet_run_summary(
    run: *const fieldnet_run,
    out: *mut FieldnetSummary,
) -> FieldnetStatus {
    guarded(|| {
        if run.is_null() || out.is_null() {
            set_error("null pointer argument");
            return FieldnetStatus::NullPointer;
        }
        let result = unsafe { &(*run).result };
        unsafe {
            *out = FieldnetSummary {
                cost: result.ml.cost,
                iterations: result.ml.iterations as u64,
                converged: result.ml.converged,
                rmse_map: result.metrics.rmse_map,
                rmse_prior: result.metrics.rmse_prior,
                coverage95: result.metrics.coverage95,
            };
        }
        FieldnetStatus::Ok
    })
}

/// Message trace of a distributed run as CSV; empty string for
/// centralized runs. The caller owns the returned string and must free it
/// with [`fieldnet_string_free`]. Returns null on null input.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn fieldnet_run_trace_csv(run: *const fieldnet_run) -> *mut c_char {
    if run.is_null() {
        return std::ptr::null_mut();
    }
    let result = unsafe { &(*run).result };
    let csv = result.trace.as_ref().map(|t| t.to_csv()).unwrap_or_default();
    CString::new(csv).map(CString::into_raw).unwrap_or(std::ptr::null_mut())
}

/// Free a string returned by this library; accepts null.
///
/// # Safety
/// `s` must be null or a pointer returned by [`fieldnet_run_trace_csv`]
/// that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn fieldnet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn json_config(kind: &str, seed: u64) -> CString {
        CString::new(format!(r#"{{"kind": "{kind}", "seed": {seed}}}"#)).unwrap()
    }

    #[test]
    fn full_round_trip_through_the_c_surface() {
        let json = json_config("spline", 3);
        let mut scenario: *mut fieldnet_scenario = std::ptr::null_mut();
        let status = unsafe { fieldnet_scenario_from_json(json.as_ptr(), &mut scenario) };
        assert_eq!(status, FieldnetStatus::Ok);

        let mut run: *mut fieldnet_run = std::ptr::null_mut();
        let status = unsafe { fieldnet_run_pipeline(scenario, true, &mut run) };
        assert_eq!(status, FieldnetStatus::Ok);

        let p = unsafe { fieldnet_run_hyper_len(run) };
        assert_eq!(p, 5);
        let m = unsafe { fieldnet_run_grid_len(run) };
        assert_eq!(m, 101);

        let mut gamma = vec![0.0; p];
        assert_eq!(
            unsafe { fieldnet_run_gamma(run, gamma.as_mut_ptr(), p) },
            FieldnetStatus::Ok
        );
        assert!(gamma.iter().all(|g| g.is_finite()));

        let mut mean = vec![0.0; m];
        let mut lower = vec![0.0; m];
        let mut upper = vec![0.0; m];
        unsafe {
            assert_eq!(fieldnet_run_posterior_mean(run, mean.as_mut_ptr(), m), FieldnetStatus::Ok);
            assert_eq!(fieldnet_run_lower95(run, lower.as_mut_ptr(), m), FieldnetStatus::Ok);
            assert_eq!(fieldnet_run_upper95(run, upper.as_mut_ptr(), m), FieldnetStatus::Ok);
        }
        for i in 0..m {
            assert!(lower[i] <= mean[i] && mean[i] <= upper[i]);
        }

        let mut summary = FieldnetSummary {
            cost: 0.0,
            iterations: 0,
            converged: false,
            rmse_map: 0.0,
            rmse_prior: 0.0,
            coverage95: 0.0,
        };
        assert_eq!(unsafe { fieldnet_run_summary(run, &mut summary) }, FieldnetStatus::Ok);
        assert!(summary.converged);

        let trace = unsafe { fieldnet_run_trace_csv(run) };
        assert!(!trace.is_null());
        let text = unsafe { CStr::from_ptr(trace) }.to_str().unwrap().to_owned();
        assert!(text.starts_with("round,phase,messages,scalars_sent"));
        unsafe { fieldnet_string_free(trace) };

        unsafe {
            fieldnet_run_free(run);
            fieldnet_scenario_free(scenario);
        }
    }

    #[test]
    fn results_match_the_rust_api() {
        let json = json_config("temperature", 4);
        let mut scenario: *mut fieldnet_scenario = std::ptr::null_mut();
        unsafe { fieldnet_scenario_from_json(json.as_ptr(), &mut scenario) };
        let mut run: *mut fieldnet_run = std::ptr::null_mut();
        unsafe { fieldnet_run_pipeline(scenario, false, &mut run) };

        let direct = run_pipeline(&ScenarioConfig::temperature_default(4), Mode::Centralized)
            .unwrap();
        let p = unsafe { fieldnet_run_hyper_len(run) };
        let mut gamma = vec![0.0; p];
        unsafe { fieldnet_run_gamma(run, gamma.as_mut_ptr(), p) };
        assert_eq!(gamma, direct.ml.gamma_ml.values);

        unsafe {
            fieldnet_run_free(run);
            fieldnet_scenario_free(scenario);
        }
    }

    #[test]
    fn error_paths_set_messages_and_codes() {
        let bad = CString::new("{not json").unwrap();
        let mut scenario: *mut fieldnet_scenario = std::ptr::null_mut();
        let status = unsafe { fieldnet_scenario_from_json(bad.as_ptr(), &mut scenario) };
        assert_eq!(status, FieldnetStatus::InvalidInput);
        let msg = unsafe { CStr::from_ptr(fieldnet_last_error_message()) };
        assert!(!msg.to_bytes().is_empty());

        let status =
            unsafe { fieldnet_scenario_from_json(std::ptr::null(), &mut scenario) };
        assert_eq!(status, FieldnetStatus::NullPointer);

        // Validation failure surfaces as a tolerance/validation status.
        let invalid = CString::new(
            r#"{"kind": "temperature", "seed": 1, "noise_variance": 0.0}"#,
        )
        .unwrap();
        let mut sc2: *mut fieldnet_scenario = std::ptr::null_mut();
        assert_eq!(
            unsafe { fieldnet_scenario_from_json(invalid.as_ptr(), &mut sc2) },
            FieldnetStatus::Ok
        );
        let mut run: *mut fieldnet_run = std::ptr::null_mut();
        let status = unsafe { fieldnet_run_pipeline(sc2, false, &mut run) };
        assert_eq!(status, FieldnetStatus::ToleranceExceeded);
        unsafe { fieldnet_scenario_free(sc2) };
    }

    #[test]
    fn buffer_length_mismatch_is_rejected() {
        let json = json_config("spline", 5);
        let mut scenario: *mut fieldnet_scenario = std::ptr::null_mut();
        unsafe { fieldnet_scenario_from_json(json.as_ptr(), &mut scenario) };
        let mut run: *mut fieldnet_run = std::ptr::null_mut();
        unsafe { fieldnet_run_pipeline(scenario, false, &mut run) };
        let mut too_short = vec![0.0; 3];
        let status = unsafe { fieldnet_run_gamma(run, too_short.as_mut_ptr(), 3) };
        assert_eq!(status, FieldnetStatus::InvalidInput);
        unsafe {
            fieldnet_run_free(run);
            fieldnet_scenario_free(scenario);
        }
    }

    #[test]
    fn version_is_a_c_string() {
        let v = unsafe { CStr::from_ptr(fieldnet_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
