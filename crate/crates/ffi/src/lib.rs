//! C ABI for the trapped-ion SPAD readout toolkit.
//!
//! Conventions:
//!
//! * Opaque handles (`IondetRateModel`, `IondetReport`) are created and
//!   destroyed by this library; never free them with `free()`.
//! * Fallible functions return an [`IondetStatus`]; on failure the
//!   thread-local message from [`iondet_last_error`] describes the
//!   cause.
//! * All quantities are SI (seconds, counts per second, meters).
//!
//! The header `include/iondet.h` is generated at build time by
//! cbindgen.

// The safety contract of every extern fn is the C API contract stated
// in its doc comment (valid handle, valid buffers of the given length).
#![allow(clippy::missing_safety_doc)]

use iondet::discriminator::{DiscriminatorModel, StopReason};
use iondet::harness::{self, ExperimentConfig, FidelityReport, ScanMethod};
use iondet::optics::{self, GeometryStack};
use iondet::source::{IonState, RateModel};
use iondet::stats::{self, PmfKind};
use libc::{c_char, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::ptr;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let cstring = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(cstring));
}

/// Status codes returned by fallible functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IondetStatus {
    Ok = 0,
    /// An argument was out of range or inconsistent.
    InvalidArgument = 1,
    /// A fit or simulation failed at runtime.
    RuntimeError = 2,
    /// A required pointer was null.
    NullPointer = 3,
}

fn status_of(err: &iondet::Error) -> IondetStatus {
    match err.exit_code() {
        1 => IondetStatus::InvalidArgument,
        _ => IondetStatus::RuntimeError,
    }
}

/// Last error message for this thread, or null when no error occurred.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn iondet_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(ptr::null(), |s| s.as_ptr())
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn iondet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque rate model handle.
pub struct IondetRateModel(RateModel);

/// Create a rate model. Returns null on invalid parameters.
#[no_mangle]
pub extern "C" fn iondet_rate_model_new(
    bright_rate_cps: f64,
    dark_rate_cps: f64,
    bin_width_s: f64,
    decay_rate_hz: f64,
    dispersion: f64,
) -> *mut IondetRateModel {
    let model = RateModel {
        bright_rate: bright_rate_cps,
        dark_rate: dark_rate_cps,
        background_breakdown: vec![],
        bin_width: bin_width_s,
        decay_rate: decay_rate_hz,
        dispersion,
    };
    match model.validate() {
        Ok(()) => Box::into_raw(Box::new(IondetRateModel(model))),
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// Load a named built-in preset (e.g. "paper-passive", "paper-no-stray",
/// "projected-active-quench", "pmt-paper"). Returns null if unknown.
#[no_mangle]
pub unsafe extern "C" fn iondet_rate_model_preset(name: *const c_char) -> *mut IondetRateModel {
    if name.is_null() {
        set_error("preset name is null");
        return ptr::null_mut();
    }
    let name = match CStr::from_ptr(name).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("preset name is not valid UTF-8");
            return ptr::null_mut();
        }
    };
    match iondet::presets::rate_model(name) {
        Some(model) => Box::into_raw(Box::new(IondetRateModel(model))),
        None => {
            set_error(format!("unknown rates preset {name}"));
            ptr::null_mut()
        }
    }
}

/// Destroy a rate model handle (null is a no-op).
#[no_mangle]
pub unsafe extern "C" fn iondet_rate_model_free(model: *mut IondetRateModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// How a classification stopped.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IondetStopReason {
    ThresholdReached = 0,
    MaxBins = 1,
    FixedWindow = 2,
}

/// A discriminator verdict with its evidence.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct IondetOutcome {
    /// 1 = bright, 0 = dark.
    pub bright: i32,
    pub posterior_bright: f64,
    pub bins_used: size_t,
    pub log_likelihood_bright: f64,
    pub log_likelihood_dark: f64,
    pub stop_reason: IondetStopReason,
}

impl From<iondet::discriminator::DetectionOutcome> for IondetOutcome {
    fn from(o: iondet::discriminator::DetectionOutcome) -> Self {
        IondetOutcome {
            bright: (o.verdict == IonState::Bright) as i32,
            posterior_bright: o.posterior_bright,
            bins_used: o.bins_used,
            log_likelihood_bright: o.log_likelihood_bright,
            log_likelihood_dark: o.log_likelihood_dark,
            stop_reason: match o.stop_reason {
                StopReason::ThresholdReached => IondetStopReason::ThresholdReached,
                StopReason::MaxBins => IondetStopReason::MaxBins,
                StopReason::FixedWindow => IondetStopReason::FixedWindow,
            },
        }
    }
}

unsafe fn counts_slice<'a>(counts: *const u32, n: size_t) -> Option<&'a [u32]> {
    if counts.is_null() {
        set_error("counts pointer is null");
        return None;
    }
    Some(std::slice::from_raw_parts(counts, n))
}

fn model_for(model: *const IondetRateModel, prior_bright: f64) -> Result<DiscriminatorModel, IondetStatus> {
    if model.is_null() {
        set_error("rate model handle is null");
        return Err(IondetStatus::NullPointer);
    }
    let rates = unsafe { &(*model).0 };
    DiscriminatorModel::new(rates, prior_bright).map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

/// Fixed-threshold classification of a binned count record.
#[no_mangle]
pub unsafe extern "C" fn iondet_classify_threshold(
    model: *const IondetRateModel,
    counts: *const u32,
    n_bins: size_t,
    threshold: f64,
    prior_bright: f64,
    out: *mut IondetOutcome,
) -> IondetStatus {
    if out.is_null() {
        set_error("output pointer is null");
        return IondetStatus::NullPointer;
    }
    let Some(counts) = counts_slice(counts, n_bins) else {
        return IondetStatus::NullPointer;
    };
    let disc = match model_for(model, prior_bright) {
        Ok(d) => d,
        Err(s) => return s,
    };
    match disc.classify_threshold_counts(counts, threshold) {
        Ok(o) => {
            *out = o.into();
            IondetStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            status_of(&e)
        }
    }
}

/// Decay-aware maximum-likelihood classification.
#[no_mangle]
pub unsafe extern "C" fn iondet_classify_mle(
    model: *const IondetRateModel,
    counts: *const u32,
    n_bins: size_t,
    prior_bright: f64,
    out: *mut IondetOutcome,
) -> IondetStatus {
    if out.is_null() {
        set_error("output pointer is null");
        return IondetStatus::NullPointer;
    }
    let Some(counts) = counts_slice(counts, n_bins) else {
        return IondetStatus::NullPointer;
    };
    let disc = match model_for(model, prior_bright) {
        Ok(d) => d,
        Err(s) => return s,
    };
    match disc.classify_mle_counts(counts) {
        Ok(o) => {
            *out = o.into();
            IondetStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            status_of(&e)
        }
    }
}

/// Adaptive Bayesian classification: consumes bins from the front of
/// `counts` until the confidence threshold or `max_bins` is reached.
#[no_mangle]
pub unsafe extern "C" fn iondet_classify_adaptive(
    model: *const IondetRateModel,
    counts: *const u32,
    n_bins: size_t,
    confidence: f64,
    max_bins: size_t,
    prior_bright: f64,
    out: *mut IondetOutcome,
) -> IondetStatus {
    if out.is_null() {
        set_error("output pointer is null");
        return IondetStatus::NullPointer;
    }
    let Some(counts) = counts_slice(counts, n_bins) else {
        return IondetStatus::NullPointer;
    };
    let disc = match model_for(model, prior_bright) {
        Ok(d) => d,
        Err(s) => return s,
    };
    match disc.classify_adaptive(counts.iter().copied(), confidence, max_bins) {
        Ok(o) => {
            *out = o.into();
            IondetStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            status_of(&e)
        }
    }
}

/// Per-bin count probability P(K = k). `kind` 0 = Poisson,
/// 1 = negative binomial with the given dispersion.
#[no_mangle]
pub unsafe extern "C" fn iondet_pmf(
    kind: i32,
    mean: f64,
    dispersion: f64,
    k: u64,
    out: *mut f64,
) -> IondetStatus {
    if out.is_null() {
        set_error("output pointer is null");
        return IondetStatus::NullPointer;
    }
    let kind = match kind {
        0 => PmfKind::Poisson,
        1 => PmfKind::NegBinomial,
        other => {
            set_error(format!("unknown pmf kind {other}"));
            return IondetStatus::InvalidArgument;
        }
    };
    match stats::pmf(kind, mean, dispersion, k) {
        Ok(p) => {
            *out = p;
            IondetStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            status_of(&e)
        }
    }
}

/// Non-paralyzable dead-time saturation R/(1 + R τ).
#[no_mangle]
pub extern "C" fn iondet_observed_rate(true_rate_cps: f64, dead_time_s: f64) -> f64 {
    iondet::spad::observed_rate(true_rate_cps, dead_time_s)
}

/// Opaque fidelity report handle.
pub struct IondetReport(FidelityReport);

/// One row of the error-versus-time scan.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct IondetScanRow {
    pub bins: size_t,
    pub detect_time_s: f64,
    pub eps_bright: f64,
    pub eps_dark: f64,
    pub mean_error: f64,
}

/// Run a single-detector experiment with the decay-aware MLE on every
/// prefix of the window. Returns a report handle, or null on error.
#[no_mangle]
pub unsafe extern "C" fn iondet_run_mle_experiment(
    model: *const IondetRateModel,
    window_s: f64,
    n_trials: u64,
    master_seed: u64,
    prep_bright_probability: f64,
    scan_stride: size_t,
) -> *mut IondetReport {
    if model.is_null() {
        set_error("rate model handle is null");
        return ptr::null_mut();
    }
    let rates = (*model).0.clone();
    let mut config = ExperimentConfig::new(rates, window_s, n_trials, master_seed);
    config.prep_bright_probability = prep_bright_probability;
    config.scan_methods = vec![ScanMethod::Mle];
    config.scan_stride = scan_stride.max(1);
    match harness::run_experiment(&config) {
        Ok(report) => Box::into_raw(Box::new(IondetReport(report))),
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// Number of scan rows in a report.
#[no_mangle]
pub unsafe extern "C" fn iondet_report_len(report: *const IondetReport) -> size_t {
    if report.is_null() {
        return 0;
    }
    (*report).0.points.len()
}

/// Fetch one scan row (method 0 of the configured scan).
#[no_mangle]
pub unsafe extern "C" fn iondet_report_row(
    report: *const IondetReport,
    index: size_t,
    out: *mut IondetScanRow,
) -> IondetStatus {
    if report.is_null() || out.is_null() {
        set_error("null pointer");
        return IondetStatus::NullPointer;
    }
    let points = &(*report).0.points;
    let Some(p) = points.get(index) else {
        set_error(format!("row {index} out of range ({})", points.len()));
        return IondetStatus::InvalidArgument;
    };
    let m = &p.methods[0];
    *out = IondetScanRow {
        bins: p.bins,
        detect_time_s: p.detect_time,
        eps_bright: m.eps_bright,
        eps_dark: m.eps_dark,
        mean_error: m.mean_error,
    };
    IondetStatus::Ok
}

/// Destroy a report handle (null is a no-op).
#[no_mangle]
pub unsafe extern "C" fn iondet_report_free(report: *mut IondetReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Monte Carlo collection efficiency of the fabricated stack at a
/// lateral ion offset (fraction of 4π). Returns a negative value on
/// error.
#[no_mangle]
pub extern "C" fn iondet_collection_efficiency(
    lateral_offset_m: f64,
    n_rays: u64,
    master_seed: u64,
) -> f64 {
    let stack = GeometryStack::paper_default();
    match optics::collection_efficiency_seeded(lateral_offset_m, &stack, n_rays, master_seed, 0) {
        Ok((eff, _)) => eff,
        Err(e) => {
            set_error(e.to_string());
            -1.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_round_trip_through_the_c_abi() {
        let model = iondet_rate_model_new(106_000.0, 38_000.0, 25e-6, 1.0 / 0.390, 1.2);
        assert!(!model.is_null());
        let counts: Vec<u32> = vec![3; 38];
        let mut out = IondetOutcome {
            bright: -1,
            posterior_bright: 0.0,
            bins_used: 0,
            log_likelihood_bright: 0.0,
            log_likelihood_dark: 0.0,
            stop_reason: IondetStopReason::FixedWindow,
        };
        let status = unsafe {
            iondet_classify_threshold(model, counts.as_ptr(), counts.len(), 66.5, 0.5, &mut out)
        };
        assert_eq!(status, IondetStatus::Ok);
        assert_eq!(out.bright, 1); // 114 counts > 66.5
        let status =
            unsafe { iondet_classify_mle(model, counts.as_ptr(), counts.len(), 0.5, &mut out) };
        assert_eq!(status, IondetStatus::Ok);
        assert_eq!(out.bright, 1);
        assert!(out.posterior_bright > 0.99);
        let status = unsafe {
            iondet_classify_adaptive(model, counts.as_ptr(), counts.len(), 0.999, 38, 0.5, &mut out)
        };
        assert_eq!(status, IondetStatus::Ok);
        assert_eq!(out.stop_reason, IondetStopReason::ThresholdReached);
        assert!(out.bins_used < 38);
        unsafe { iondet_rate_model_free(model) };
    }

    #[test]
    fn errors_set_message_and_status() {
        let model = iondet_rate_model_new(10.0, 38_000.0, 25e-6, 2.5, 1.2);
        assert!(model.is_null()); // bright <= dark
        let msg = unsafe { CStr::from_ptr(iondet_last_error()) };
        assert!(msg.to_str().unwrap().contains("bright_rate"));

        let mut out = 0.0f64;
        let status = unsafe { iondet_pmf(1, 1.0, 0.5, 0, &mut out) };
        assert_eq!(status, IondetStatus::InvalidArgument);
        let status = unsafe { iondet_pmf(0, 2.65, 1.0, 0, &mut out) };
        assert_eq!(status, IondetStatus::Ok);
        assert!((out - (-2.65f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn preset_and_experiment_handles() {
        let name = CString::new("paper-passive").unwrap();
        let model = unsafe { iondet_rate_model_preset(name.as_ptr()) };
        assert!(!model.is_null());
        let report = unsafe { iondet_run_mle_experiment(model, 250e-6, 2_000, 9, 0.5, 5) };
        assert!(!report.is_null());
        let n = unsafe { iondet_report_len(report) };
        assert!(n >= 2);
        let mut row = IondetScanRow {
            bins: 0,
            detect_time_s: 0.0,
            eps_bright: 0.0,
            eps_dark: 0.0,
            mean_error: 0.0,
        };
        let status = unsafe { iondet_report_row(report, n - 1, &mut row) };
        assert_eq!(status, IondetStatus::Ok);
        assert!(row.detect_time_s > 0.0);
        assert!(row.mean_error >= 0.0 && row.mean_error <= 1.0);
        unsafe { iondet_report_free(report) };
        unsafe { iondet_rate_model_free(model) };

        let bad = CString::new("missing").unwrap();
        assert!(unsafe { iondet_rate_model_preset(bad.as_ptr()) }.is_null());
    }

    #[test]
    fn efficiency_exported() {
        let eff = iondet_collection_efficiency(0.0, 20_000, 4);
        assert!(eff > 0.005 && eff < 0.05, "eff {eff}");
    }

    #[test]
    fn version_is_a_c_string() {
        let v = unsafe { CStr::from_ptr(iondet_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
