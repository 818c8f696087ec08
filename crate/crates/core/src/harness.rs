//! Batched detection experiments over the dual SPAD/PMT measurement.
//!
//! Each trial draws the prepared state, one shared trajectory, and
//! independent SPAD and PMT count records conditioned on that
//! trajectory. Classification is post-processed on prefixes of one long
//! record per trial, so a single pass yields the whole error-versus-time
//! scan. Truth is the state at detection start: a decay that flips the
//! verdict counts as a detection error of the discriminator.
//!
//! Trials are independent work units on per-trial RNG streams; all
//! aggregation uses exact integer tallies, so reports are bit-identical
//! regardless of thread count or trial order.

use crate::discriminator::{DiscriminatorModel, SequentialLikelihood};
use crate::error::{Error, Result};
use crate::rng::{trial_stream, StreamRole};
use crate::source::{
    sample_trajectory, CountSampler, IonState, OverdispersionMode, RateModel, Trajectory,
};
use crate::stats;
use rand::Rng;
use rayon::prelude::*;

pub use crate::discriminator::optimize_threshold;

/// Confidence level used for the report's intervals (quoted like the
/// one-sigma parenthetical errors in the literature).
pub const REPORT_CI_LEVEL: f64 = 0.68;

/// Which discriminators to evaluate on the time scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScanMethod {
    /// Fixed threshold, or per-time-point optimized when `None`.
    Threshold(Option<f64>),
    Mle,
}

impl ScanMethod {
    pub fn label(&self) -> &'static str {
        match self {
            ScanMethod::Threshold(_) => "threshold",
            ScanMethod::Mle => "mle",
        }
    }
}

/// One detector channel of the experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub rates: RateModel,
    pub prior_bright: f64,
    /// Likelihood dispersion; defaults to the rate model's value.
    pub dispersion: Option<f64>,
}

impl DetectorConfig {
    pub fn new(rates: RateModel) -> Self {
        DetectorConfig {
            rates,
            prior_bright: 0.5,
            dispersion: None,
        }
    }

    fn model(&self) -> Result<DiscriminatorModel> {
        DiscriminatorModel::with_dispersion(
            &self.rates,
            self.prior_bright,
            self.dispersion.unwrap_or(self.rates.dispersion),
        )
    }
}

/// How ε_PMT enters the error accounting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonPmt {
    /// Use a constant (the published 3.5e-4 by default).
    Constant(f64),
    /// Simulate the PMT maximum-likelihood process first.
    Simulate,
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_trials: u64,
    pub master_seed: u64,
    pub prep_bright_probability: f64,
    pub spad: DetectorConfig,
    /// Reference detector; always classified with the decay-aware MLE.
    pub pmt: Option<DetectorConfig>,
    /// Detection window; the scan classifies every prefix up to it.
    pub window: f64,
    pub scan_methods: Vec<ScanMethod>,
    /// Adaptive confidences evaluated in the same pass (may be empty).
    pub adaptive_confidences: Vec<f64>,
    pub adaptive_max_bins: usize,
    pub overdispersion: OverdispersionMode,
    pub epsilon_pmt: EpsilonPmt,
    /// Emit every k-th bin in the report.
    pub scan_stride: usize,
}

impl ExperimentConfig {
    pub fn new(spad_rates: RateModel, window: f64, n_trials: u64, master_seed: u64) -> Self {
        ExperimentConfig {
            n_trials,
            master_seed,
            prep_bright_probability: 0.5,
            spad: DetectorConfig::new(spad_rates),
            pmt: None,
            window,
            scan_methods: vec![ScanMethod::Mle],
            adaptive_confidences: vec![],
            adaptive_max_bins: 0,
            overdispersion: OverdispersionMode::DarkOnly,
            epsilon_pmt: EpsilonPmt::Constant(3.5e-4),
            scan_stride: 1,
        }
    }

    pub fn n_bins(&self) -> usize {
        (self.window / self.spad.rates.bin_width).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_trials < 1 {
            bad.push("n_trials (must be >= 1)".to_string());
        }
        if !(0.0..=1.0).contains(&self.prep_bright_probability) {
            bad.push("prep_bright_probability (must be in [0,1])".to_string());
        }
        if !(self.window > 0.0) {
            bad.push("window_s (must be > 0)".to_string());
        }
        if self.n_bins() < 1 {
            bad.push("window_s (must cover at least one bin)".to_string());
        }
        if self.scan_stride < 1 {
            bad.push("scan_stride (must be >= 1)".to_string());
        }
        if let Err(e) = self.spad.rates.validate() {
            bad.push(format!("rates.spad ({e})"));
        }
        if let Some(pmt) = &self.pmt {
            if let Err(e) = pmt.rates.validate() {
                bad.push(format!("rates.pmt ({e})"));
            }
            if (pmt.rates.bin_width - self.spad.rates.bin_width).abs() > 1e-12 {
                bad.push("rates.pmt.bin_width_s (must match the SPAD bin width)".to_string());
            }
        }
        for &c in &self.adaptive_confidences {
            if !(c > 0.5 && c < 1.0) {
                bad.push(format!("confidence {c} (must be in (0.5, 1))"));
            }
        }
        if !self.adaptive_confidences.is_empty() && self.adaptive_max_bins < 1 {
            bad.push("max_bins (must be >= 1 for adaptive)".to_string());
        }
        if let EpsilonPmt::Constant(e) = self.epsilon_pmt {
            if !(0.0..=1.0).contains(&e) {
                bad.push("epsilon_pmt (must be in [0,1])".to_string());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "invalid experiment configuration: {}",
                bad.join(", ")
            )))
        }
    }
}

/// Truth-referenced and reference-detector statistics for one method at
/// one detection time.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodStats {
    pub method: String,
    /// Threshold in force at this time point (threshold method only).
    pub threshold: Option<f64>,
    pub err_bright: u64,
    pub err_dark: u64,
    /// Trials where this detector's verdict differed from the PMT's.
    pub disagree: u64,
    pub eps_bright: f64,
    pub eps_dark: f64,
    pub mean_error: f64,
    pub mean_error_ci: (f64, f64),
    pub disagreement_rate: f64,
    /// disagreement + ε_PMT when PMT-referenced, truth mean error
    /// otherwise.
    pub reported_infidelity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPoint {
    pub bins: usize,
    pub detect_time: f64,
    pub methods: Vec<MethodStats>,
    /// PMT truth-referenced mean error at this time (when simulated).
    pub pmt_mean_error: Option<f64>,
}

/// Outcome of one adaptive confidence setting.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveStats {
    pub confidence: f64,
    pub max_bins: usize,
    pub err_bright: u64,
    pub err_dark: u64,
    pub disagree: u64,
    pub total_bins: u64,
    pub stopped_by_confidence: u64,
    pub eps_bright: f64,
    pub eps_dark: f64,
    pub mean_error: f64,
    pub mean_error_ci: (f64, f64),
    pub mean_detection_time: f64,
    pub reported_infidelity: f64,
}

/// A decay within this time of detection start counts as "early": the
/// regime where too little dark evidence exists for any detector.
pub const EARLY_DECAY_CUTOFF: f64 = 150e-6;

/// Joint SPAD/PMT error-correlation tallies at the full window.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointErrorStats {
    /// Dark trials that decayed in-window where the PMT erred.
    pub pmt_decay_errors: u64,
    /// ... and where the SPAD (MLE, full window) also erred.
    pub both_err: u64,
    /// The subset of `pmt_decay_errors` whose decay fell within
    /// [`EARLY_DECAY_CUTOFF`] of detection start.
    pub pmt_early_decay_errors: u64,
    /// ... and where the SPAD also erred.
    pub both_err_early: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityReport {
    pub n_trials: u64,
    pub n_bright: u64,
    pub n_dark: u64,
    pub bin_width: f64,
    pub epsilon_pmt: f64,
    pub pmt_referenced: bool,
    pub points: Vec<ScanPoint>,
    pub adaptive: Vec<AdaptiveStats>,
    pub joint: JointErrorStats,
}

impl FidelityReport {
    /// The scan point at (or nearest below) a detection time.
    pub fn point_at(&self, time: f64) -> Option<&ScanPoint> {
        self.points
            .iter()
            .rev()
            .find(|p| p.detect_time <= time * (1.0 + 1e-9))
    }

    pub fn mean_adaptive_time(&self) -> Option<f64> {
        self.adaptive.first().map(|a| a.mean_detection_time)
    }
}

/// The paper's conservative error accounting: every PMT error is assumed
/// to imply a SPAD error, so the reported infidelity is the measured
/// SPAD/PMT disagreement rate plus the estimated PMT error.
pub fn error_accounting(disagreement_rate: f64, epsilon_pmt: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&disagreement_rate));
    debug_assert!((0.0..=1.0).contains(&epsilon_pmt));
    (disagreement_rate + epsilon_pmt).clamp(0.0, 1.0)
}

/// Wilson score interval for a binomial proportion.
pub fn binomial_ci(successes: u64, n: u64, level: f64) -> Result<(f64, f64)> {
    stats::wilson_interval(successes, n, level)
}

// per-thread accumulation state
#[derive(Clone)]
struct Accum {
    n_bright: u64,
    n_dark: u64,
    // per scan point × method
    err_bright: Vec<u64>,
    err_dark: Vec<u64>,
    disagree: Vec<u64>,
    pmt_err_bright: Vec<u64>,
    pmt_err_dark: Vec<u64>,
    // adaptive_confidences × (err_b, err_d, disagree, bins, stopped)
    ad_err_bright: Vec<u64>,
    ad_err_dark: Vec<u64>,
    ad_disagree: Vec<u64>,
    ad_bins: Vec<u64>,
    ad_stopped: Vec<u64>,
    joint: JointErrorStats,
}

impl Accum {
    fn new(scan_methods: usize, scan_points: usize, confidences: usize) -> Self {
        Accum {
            n_bright: 0,
            n_dark: 0,
            err_bright: vec![0; scan_methods * scan_points],
            err_dark: vec![0; scan_methods * scan_points],
            disagree: vec![0; scan_methods * scan_points],
            pmt_err_bright: vec![0; scan_points],
            pmt_err_dark: vec![0; scan_points],
            ad_err_bright: vec![0; confidences],
            ad_err_dark: vec![0; confidences],
            ad_disagree: vec![0; confidences],
            ad_bins: vec![0; confidences],
            ad_stopped: vec![0; confidences],
            joint: JointErrorStats::default(),
        }
    }

    fn merge(mut self, other: &Accum) -> Self {
        self.n_bright += other.n_bright;
        self.n_dark += other.n_dark;
        let add = |a: &mut Vec<u64>, b: &[u64]| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        };
        add(&mut self.err_bright, &other.err_bright);
        add(&mut self.err_dark, &other.err_dark);
        add(&mut self.disagree, &other.disagree);
        add(&mut self.pmt_err_bright, &other.pmt_err_bright);
        add(&mut self.pmt_err_dark, &other.pmt_err_dark);
        add(&mut self.ad_err_bright, &other.ad_err_bright);
        add(&mut self.ad_err_dark, &other.ad_err_dark);
        add(&mut self.ad_disagree, &other.ad_disagree);
        add(&mut self.ad_bins, &other.ad_bins);
        add(&mut self.ad_stopped, &other.ad_stopped);
        self.joint.pmt_decay_errors += other.joint.pmt_decay_errors;
        self.joint.both_err += other.joint.both_err;
        self.joint.pmt_early_decay_errors += other.joint.pmt_early_decay_errors;
        self.joint.both_err_early += other.joint.both_err_early;
        self
    }
}

/// Run the full batched experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<FidelityReport> {
    config.validate()?;
    let n_bins = config.n_bins();
    let scan_bins: Vec<usize> = (1..=n_bins)
        .filter(|i| i % config.scan_stride == 0 || *i == n_bins)
        .collect();

    // resolve per-time thresholds where requested (pass A)
    let mut thresholds: Vec<Vec<Option<f64>>> = Vec::new();
    let needs_auto = config
        .scan_methods
        .iter()
        .any(|m| matches!(m, ScanMethod::Threshold(None)));
    let auto = if needs_auto {
        Some(auto_thresholds(config, &scan_bins)?)
    } else {
        None
    };
    for method in &config.scan_methods {
        let row = match method {
            ScanMethod::Threshold(Some(t)) => vec![Some(*t); scan_bins.len()],
            ScanMethod::Threshold(None) => {
                auto.as_ref().unwrap().iter().map(|&t| Some(t)).collect()
            }
            ScanMethod::Mle => vec![None; scan_bins.len()],
        };
        thresholds.push(row);
    }

    let epsilon_pmt = match config.epsilon_pmt {
        EpsilonPmt::Constant(e) => e,
        EpsilonPmt::Simulate => {
            let pmt = config.pmt.as_ref().ok_or_else(|| {
                Error::invalid("epsilon_pmt = simulate requires a PMT channel")
            })?;
            estimate_pmt_error(
                pmt,
                config.window,
                config.n_trials.min(1_000_000),
                config.master_seed ^ 0x70ab_5eed,
                config.overdispersion,
            )?
            .0
        }
    };

    let acc = simulate_pass(config, &scan_bins, &thresholds)?;

    // derived statistics (single-threaded, exact integer inputs)
    let n_bright = acc.n_bright;
    let n_dark = acc.n_dark;
    let n_trials = config.n_trials;
    let pmt_on = config.pmt.is_some();
    let rate = |num: u64, den: u64| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let mean_ci = |eb: u64, ed: u64| -> (f64, f64) {
        // half-widths of the two per-state intervals combined
        let (bl, bh) = stats::wilson_interval(eb, n_bright.max(1), REPORT_CI_LEVEL)
            .unwrap_or((0.0, 0.0));
        let (dl, dh) = stats::wilson_interval(ed, n_dark.max(1), REPORT_CI_LEVEL)
            .unwrap_or((0.0, 0.0));
        let mean = 0.5 * (rate(eb, n_bright) + rate(ed, n_dark));
        let half = 0.5 * ((bh - bl) / 2.0 + (dh - dl) / 2.0);
        ((mean - half).max(0.0), (mean + half).min(1.0))
    };

    let n_methods = config.scan_methods.len();
    let mut points = Vec::with_capacity(scan_bins.len());
    for (pi, &bins) in scan_bins.iter().enumerate() {
        let mut methods = Vec::with_capacity(n_methods);
        for (mi, method) in config.scan_methods.iter().enumerate() {
            let idx = mi * scan_bins.len() + pi;
            let (eb, ed, dis) = (acc.err_bright[idx], acc.err_dark[idx], acc.disagree[idx]);
            let eps_bright = rate(eb, n_bright);
            let eps_dark = rate(ed, n_dark);
            let mean_error = 0.5 * (eps_bright + eps_dark);
            let disagreement_rate = rate(dis, n_trials);
            methods.push(MethodStats {
                method: method.label().to_string(),
                threshold: thresholds[mi][pi],
                err_bright: eb,
                err_dark: ed,
                disagree: dis,
                eps_bright,
                eps_dark,
                mean_error,
                mean_error_ci: mean_ci(eb, ed),
                disagreement_rate,
                reported_infidelity: if pmt_on {
                    error_accounting(disagreement_rate, epsilon_pmt)
                } else {
                    mean_error
                },
            });
        }
        points.push(ScanPoint {
            bins,
            detect_time: bins as f64 * config.spad.rates.bin_width,
            methods,
            pmt_mean_error: pmt_on.then(|| {
                0.5 * (rate(acc.pmt_err_bright[pi], n_bright)
                    + rate(acc.pmt_err_dark[pi], n_dark))
            }),
        });
    }

    let mut adaptive = Vec::new();
    for (ci, &confidence) in config.adaptive_confidences.iter().enumerate() {
        let (eb, ed) = (acc.ad_err_bright[ci], acc.ad_err_dark[ci]);
        let eps_bright = rate(eb, n_bright);
        let eps_dark = rate(ed, n_dark);
        let disagreement_rate = rate(acc.ad_disagree[ci], n_trials);
        adaptive.push(AdaptiveStats {
            confidence,
            max_bins: config.adaptive_max_bins,
            err_bright: eb,
            err_dark: ed,
            disagree: acc.ad_disagree[ci],
            total_bins: acc.ad_bins[ci],
            stopped_by_confidence: acc.ad_stopped[ci],
            eps_bright,
            eps_dark,
            mean_error: 0.5 * (eps_bright + eps_dark),
            mean_error_ci: mean_ci(eb, ed),
            mean_detection_time: acc.ad_bins[ci] as f64 / n_trials as f64
                * config.spad.rates.bin_width,
            reported_infidelity: if pmt_on {
                error_accounting(disagreement_rate, epsilon_pmt)
            } else {
                0.5 * (eps_bright + eps_dark)
            },
        });
    }

    Ok(FidelityReport {
        n_trials,
        n_bright,
        n_dark,
        bin_width: config.spad.rates.bin_width,
        epsilon_pmt,
        pmt_referenced: pmt_on,
        points,
        adaptive,
        joint: acc.joint,
    })
}

/// Pass A: per-time total-count histograms by truth, reduced to the
/// error-minimizing half-integer threshold at each scan point.
fn auto_thresholds(config: &ExperimentConfig, scan_bins: &[usize]) -> Result<Vec<f64>> {
    let n_bins = config.n_bins();
    let sampler = CountSampler::new(&config.spad.rates, config.overdispersion)?;
    let kcap = (config.spad.rates.bright_bin_mean() * n_bins as f64
        + 8.0 * (config.spad.rates.dispersion * config.spad.rates.bright_bin_mean() * n_bins as f64)
            .sqrt()) as usize
        + 16;

    struct Hists {
        bright: Vec<u64>,
        dark: Vec<u64>,
    }
    let per_point = scan_bins.len();
    let init = || Hists {
        bright: vec![0u64; (kcap + 1) * per_point],
        dark: vec![0u64; (kcap + 1) * per_point],
    };
    let hists = (0..config.n_trials)
        .into_par_iter()
        .fold(init, |mut h, trial| {
            let mut trng = trial_stream(config.master_seed, trial, StreamRole::Trajectory);
            let bright = trng.random::<f64>() < config.prep_bright_probability;
            let traj = draw_trajectory(config, bright, &mut trng);
            let mut crng = trial_stream(config.master_seed, trial, StreamRole::SpadCounts);
            let mut total = 0u64;
            let mut pi = 0usize;
            for bin in 0..n_bins {
                total += sampler.sample_bin(&traj, bin, &mut crng) as u64;
                if pi < scan_bins.len() && bin + 1 == scan_bins[pi] {
                    let k = (total as usize).min(kcap);
                    let row = if bright { &mut h.bright } else { &mut h.dark };
                    row[pi * (kcap + 1) + k] += 1;
                    pi += 1;
                }
            }
            h
        })
        .reduce(init, |mut a, b| {
            for (x, y) in a.bright.iter_mut().zip(&b.bright) {
                *x += y;
            }
            for (x, y) in a.dark.iter_mut().zip(&b.dark) {
                *x += y;
            }
            a
        });

    let mut out = Vec::with_capacity(per_point);
    for pi in 0..per_point {
        let lo = pi * (kcap + 1);
        let hi = lo + kcap + 1;
        let choice = optimize_threshold(&hists.bright[lo..hi], &hists.dark[lo..hi])?;
        out.push(choice.threshold);
    }
    Ok(out)
}

fn draw_trajectory(config: &ExperimentConfig, bright: bool, rng: &mut impl Rng) -> Trajectory {
    if bright {
        Trajectory::bright()
    } else {
        sample_trajectory(
            IonState::Dark,
            config.spad.rates.decay_rate,
            config.window,
            rng,
        )
        .expect("validated config")
    }
}

/// Pass B: the classification pass.
fn simulate_pass(
    config: &ExperimentConfig,
    scan_bins: &[usize],
    thresholds: &[Vec<Option<f64>>],
) -> Result<Accum> {
    let n_bins = config.n_bins();
    let spad_model = config.spad.model()?;
    let spad_sampler = CountSampler::new(&config.spad.rates, config.overdispersion)?;
    let pmt = match &config.pmt {
        Some(p) => Some((
            p.model()?,
            CountSampler::new(&p.rates, config.overdispersion)?,
        )),
        None => None,
    };
    // confidences sorted descending for the single-pass crossing sweep
    let mut conf_order: Vec<usize> = (0..config.adaptive_confidences.len()).collect();
    conf_order.sort_by(|&a, &b| {
        config.adaptive_confidences[b]
            .partial_cmp(&config.adaptive_confidences[a])
            .unwrap()
    });
    let confidences = &config.adaptive_confidences;
    let ad_max = config.adaptive_max_bins.min(n_bins.max(1));

    let n_methods = config.scan_methods.len();
    let per_point = scan_bins.len();
    let init = || Accum::new(n_methods, per_point, confidences.len());

    let acc = (0..config.n_trials)
        .into_par_iter()
        .fold(init, |mut acc, trial| {
            let mut trng = trial_stream(config.master_seed, trial, StreamRole::Trajectory);
            let bright = trng.random::<f64>() < config.prep_bright_probability;
            let traj = draw_trajectory(config, bright, &mut trng);
            if bright {
                acc.n_bright += 1;
            } else {
                acc.n_dark += 1;
            }

            // SPAD pass: cumulative total, sequential likelihood, and the
            // adaptive crossing sweep in one walk over the bins
            let mut crng = trial_stream(config.master_seed, trial, StreamRole::SpadCounts);
            let mut seq = SequentialLikelihood::new();
            let mut total = 0u64;
            let mut pi = 0usize;
            let mut conf_ptr = 0usize;
            let mut spad_mle_final = IonState::Bright;
            let mut spad_verdicts = vec![IonState::Bright; n_methods * per_point];
            // per-confidence adaptive outcome: (bins, verdict, by_confidence)
            let mut ad_out = vec![(0usize, IonState::Bright, false); confidences.len()];
            for bin in 0..n_bins {
                let c = spad_sampler.sample_bin(&traj, bin, &mut crng);
                total += c as u64;
                seq.push(&spad_model, c);
                let posterior =
                    spad_model.posterior_bright(seq.log_bright(), seq.log_dark(&spad_model));
                let verdict = if posterior >= 0.5 {
                    IonState::Bright
                } else {
                    IonState::Dark
                };

                // adaptive: assign every confidence crossed at this bin
                if bin < ad_max {
                    let top = posterior.max(1.0 - posterior);
                    while conf_ptr < conf_order.len()
                        && top >= confidences[conf_order[conf_ptr]]
                    {
                        ad_out[conf_order[conf_ptr]] = (bin + 1, verdict, true);
                        conf_ptr += 1;
                    }
                    if bin + 1 == ad_max {
                        // budget exhausted: the rest classify here
                        for &ci in &conf_order[conf_ptr..] {
                            ad_out[ci] = (ad_max, verdict, false);
                        }
                        conf_ptr = conf_order.len();
                    }
                }

                if pi < per_point && bin + 1 == scan_bins[pi] {
                    for (mi, method) in config.scan_methods.iter().enumerate() {
                        let v = match method {
                            ScanMethod::Threshold(_) => {
                                let thr = thresholds[mi][pi].expect("threshold resolved");
                                if total as f64 > thr {
                                    IonState::Bright
                                } else {
                                    IonState::Dark
                                }
                            }
                            ScanMethod::Mle => verdict,
                        };
                        spad_verdicts[mi * per_point + pi] = v;
                        if (v == IonState::Bright) != bright {
                            let idx = mi * per_point + pi;
                            if bright {
                                acc.err_bright[idx] += 1;
                            } else {
                                acc.err_dark[idx] += 1;
                            }
                        }
                    }
                    pi += 1;
                }
                if bin + 1 == n_bins {
                    spad_mle_final = verdict;
                }
            }

            // PMT pass (decay-aware MLE at every scan point)
            let mut pmt_final: Option<IonState> = None;
            if let Some((pmt_model, pmt_sampler)) = &pmt {
                let mut prng = trial_stream(config.master_seed, trial, StreamRole::PmtCounts);
                let mut pseq = SequentialLikelihood::new();
                let mut pi = 0usize;
                for bin in 0..n_bins {
                    let c = pmt_sampler.sample_bin(&traj, bin, &mut prng);
                    pseq.push(pmt_model, c);
                    if pi < per_point && bin + 1 == scan_bins[pi] {
                        let posterior = pmt_model
                            .posterior_bright(pseq.log_bright(), pseq.log_dark(pmt_model));
                        let v = if posterior >= 0.5 {
                            IonState::Bright
                        } else {
                            IonState::Dark
                        };
                        if (v == IonState::Bright) != bright {
                            if bright {
                                acc.pmt_err_bright[pi] += 1;
                            } else {
                                acc.pmt_err_dark[pi] += 1;
                            }
                        }
                        for mi in 0..n_methods {
                            if spad_verdicts[mi * per_point + pi] != v {
                                acc.disagree[mi * per_point + pi] += 1;
                            }
                        }
                        if bin + 1 == n_bins {
                            pmt_final = Some(v);
                        }
                        pi += 1;
                    }
                }
                // joint early-decay correlation at the full window
                if let (false, Some(td), Some(IonState::Bright)) =
                    (bright, traj.decay_time, pmt_final)
                {
                    acc.joint.pmt_decay_errors += 1;
                    let spad_err = spad_mle_final == IonState::Bright;
                    if spad_err {
                        acc.joint.both_err += 1;
                    }
                    if td <= EARLY_DECAY_CUTOFF {
                        acc.joint.pmt_early_decay_errors += 1;
                        if spad_err {
                            acc.joint.both_err_early += 1;
                        }
                    }
                }
            }

            // adaptive tallies, with disagreement against the
            // full-window PMT reference verdict
            for (ci, &(bins, verdict, stopped)) in ad_out.iter().enumerate() {
                if bins == 0 {
                    continue; // no adaptive configured
                }
                record_adaptive(&mut acc, ci, bright, verdict, bins, stopped);
                if let Some(pv) = pmt_final {
                    if pv != verdict {
                        acc.ad_disagree[ci] += 1;
                    }
                }
            }
            acc
        })
        .reduce(init, |a, b| a.merge(&b));
    Ok(acc)
}

fn record_adaptive(
    acc: &mut Accum,
    ci: usize,
    bright: bool,
    verdict: IonState,
    bins: usize,
    by_confidence: bool,
) {
    acc.ad_bins[ci] += bins as u64;
    if by_confidence {
        acc.ad_stopped[ci] += 1;
    }
    if (verdict == IonState::Bright) != bright {
        if bright {
            acc.ad_err_bright[ci] += 1;
        } else {
            acc.ad_err_dark[ci] += 1;
        }
    }
}

/// Simulated PMT maximum-likelihood error: mean truth-referenced error
/// with its Wilson-style interval.
pub fn estimate_pmt_error(
    pmt: &DetectorConfig,
    window: f64,
    n_trials: u64,
    master_seed: u64,
    overdispersion: OverdispersionMode,
) -> Result<(f64, (f64, f64))> {
    let mut config = ExperimentConfig::new(pmt.rates.clone(), window, n_trials, master_seed);
    config.spad = pmt.clone();
    config.overdispersion = overdispersion;
    config.scan_methods = vec![ScanMethod::Mle];
    config.scan_stride = usize::MAX - 1; // only the final point
    config.validate()?;
    let n_bins = config.n_bins();
    let scan_bins = vec![n_bins];
    let thresholds = vec![vec![None]];
    let acc = simulate_pass(&config, &scan_bins, &thresholds)?;
    let eps_b = acc.err_bright[0] as f64 / acc.n_bright.max(1) as f64;
    let eps_d = acc.err_dark[0] as f64 / acc.n_dark.max(1) as f64;
    let mean = 0.5 * (eps_b + eps_d);
    let (bl, bh) = stats::wilson_interval(acc.err_bright[0], acc.n_bright.max(1), REPORT_CI_LEVEL)?;
    let (dl, dh) = stats::wilson_interval(acc.err_dark[0], acc.n_dark.max(1), REPORT_CI_LEVEL)?;
    let half = 0.5 * ((bh - bl) / 2.0 + (dh - dl) / 2.0);
    Ok((mean, ((mean - half).max(0.0), (mean + half).min(1.0))))
}

/// Calibrate the adaptive confidence so the simulated mean error meets
/// `target_mean_error`, returning the smallest (fastest) such setting.
///
/// The error is a non-increasing but *stepped* function of the
/// confidence (posteriors take discrete values, most visibly in
/// photon-sparse regimes), and it saturates at the full-window error
/// once the confidence exceeds the reachable posterior, so plain
/// bisection is unreliable. The search instead scans a log-odds grid,
/// then bisects within the first bracket whose measured error meets the
/// target. If no setting reaches the target (it sits at or below the
/// decay-limited floor), the grid point with the smallest measured
/// error — the floor itself — is returned.
pub fn calibrate_confidence(
    config: &ExperimentConfig,
    target_mean_error: f64,
    calibration_trials: u64,
    iterations: usize,
) -> Result<f64> {
    if !(target_mean_error > 0.0 && target_mean_error < 0.5) {
        return Err(Error::invalid("target mean error must be in (0, 0.5)"));
    }
    let mut cal = config.clone();
    cal.n_trials = calibration_trials;
    cal.pmt = None;
    cal.scan_methods = vec![];
    cal.scan_stride = usize::MAX - 1;

    let confidence_of = |logodds: f64| 1.0 / (1.0 + (-logodds).exp());
    // measured error and its one-sigma half-width
    let error_at = |logodds: f64| -> Result<(f64, f64)> {
        let mut c = cal.clone();
        c.adaptive_confidences = vec![confidence_of(logodds)];
        let report = run_experiment(&c)?;
        let a = &report.adaptive[0];
        Ok((a.mean_error, (a.mean_error_ci.1 - a.mean_error_ci.0) / 2.0))
    };

    // log-odds grid: 0.6 .. 1 - 1e-7
    let lo_bound = (0.6f64 / 0.4).ln();
    let hi_bound = (1e7f64 - 1.0).ln();
    let grid_n = 25usize;
    let mut measured = Vec::with_capacity(grid_n);
    let mut first_good: Option<usize> = None;
    for i in 0..grid_n {
        let x = lo_bound + (hi_bound - lo_bound) * i as f64 / (grid_n - 1) as f64;
        let (err, sigma) = error_at(x)?;
        measured.push((x, err, sigma));
        if first_good.is_none() && err <= target_mean_error {
            first_good = Some(i);
        }
    }
    let Some(idx) = first_good else {
        // target at or below the decay-limited floor: take the fastest
        // setting statistically indistinguishable from the floor
        let (floor_err, floor_sigma) = measured
            .iter()
            .map(|&(_, e, s)| (e, s))
            .fold((f64::INFINITY, 0.0), |acc, v| if v.0 < acc.0 { v } else { acc });
        let pick = measured
            .iter()
            .find(|&&(_, e, s)| e <= floor_err + floor_sigma.max(s))
            .expect("floor exists");
        return Ok(confidence_of(pick.0));
    };
    if idx == 0 {
        return Ok(confidence_of(lo_bound));
    }
    // refine between the last bad grid point and the first good one
    let step = (hi_bound - lo_bound) / (grid_n - 1) as f64;
    let mut hi = lo_bound + step * idx as f64;
    let mut lo = hi - step;
    let mut best_good = hi;
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if error_at(mid)?.0 <= target_mean_error {
            hi = mid;
            best_good = mid;
        } else {
            lo = mid;
        }
    }
    Ok(confidence_of(best_good))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_rates() -> RateModel {
        RateModel {
            bright_rate: 106_000.0,
            dark_rate: 38_000.0,
            background_breakdown: vec![],
            bin_width: 25e-6,
            decay_rate: 1.0 / 0.390,
            dispersion: 1.2,
        }
    }

    fn small_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::new(paper_rates(), 950e-6, 20_000, 4242);
        c.prep_bright_probability = 0.498;
        c.scan_methods = vec![ScanMethod::Threshold(Some(66.5)), ScanMethod::Mle];
        c.scan_stride = 19;
        c
    }

    #[test]
    fn determinism_bit_identical() {
        let config = small_config();
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn thread_count_invariance() {
        let config = small_config();
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool2 = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .unwrap();
        let a = pool1.install(|| run_experiment(&config).unwrap());
        let b = pool2.install(|| run_experiment(&config).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn prep_fraction_converges() {
        let mut config = small_config();
        config.n_trials = 200_000;
        config.scan_methods = vec![ScanMethod::Mle];
        config.scan_stride = 38;
        let report = run_experiment(&config).unwrap();
        let frac = report.n_bright as f64 / report.n_trials as f64;
        let sigma = (0.498 * 0.502 / report.n_trials as f64).sqrt();
        assert!(
            (frac - 0.498).abs() < 3.5 * sigma,
            "prepared fraction {frac}"
        );
    }

    #[test]
    fn zero_background_no_decay_is_error_free() {
        // bright mean 10/bin over 10 bins, dark exactly zero: the Poisson
        // overlap alone is ~e^-100, so no errors in 10^6 trials
        let rates = RateModel {
            bright_rate: 10.0 / 25e-6,
            dark_rate: 0.0,
            background_breakdown: vec![],
            bin_width: 25e-6,
            decay_rate: 0.0,
            dispersion: 1.0,
        };
        let mut config = ExperimentConfig::new(rates, 10.0 * 25e-6, 1_000_000, 7);
        config.scan_methods = vec![ScanMethod::Mle];
        config.scan_stride = 10;
        let report = run_experiment(&config).unwrap();
        let last = report.points.last().unwrap();
        assert_eq!(last.methods[0].err_bright, 0);
        assert_eq!(last.methods[0].err_dark, 0);
        assert!(last.methods[0].mean_error < 1e-8);
    }

    #[test]
    fn error_accounting_clamps_and_sums() {
        assert_eq!(error_accounting(0.0, 0.0), 0.0);
        assert_eq!(error_accounting(1.0, 1.0), 1.0);
        let r = error_accounting(4.5e-4, 3.5e-4);
        assert!((r - 8.0e-4).abs() < 1e-12);
        assert!((1.0 - r - 0.9992).abs() < 1e-12);
    }

    #[test]
    fn reported_infidelity_dominates_epsilon_pmt() {
        let mut config = small_config();
        config.n_trials = 5_000;
        config.pmt = Some(DetectorConfig::new(RateModel {
            bright_rate: 50_000.0,
            dark_rate: 1_000.0,
            background_breakdown: vec![],
            bin_width: 25e-6,
            decay_rate: 1.0 / 0.390,
            dispersion: 1.0,
        }));
        let report = run_experiment(&config).unwrap();
        assert!(report.pmt_referenced);
        for p in &report.points {
            for m in &p.methods {
                assert!(m.reported_infidelity >= report.epsilon_pmt);
            }
        }
    }

    #[test]
    fn config_errors_list_offending_keys() {
        let mut config = small_config();
        config.prep_bright_probability = 1.5;
        config.scan_stride = 0;
        let err = run_experiment(&config).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("prep_bright_probability"), "{msg}");
        assert!(msg.contains("scan_stride"), "{msg}");
    }

    #[test]
    fn adaptive_sweep_counts_every_trial_once() {
        let mut config = small_config();
        config.n_trials = 10_000;
        config.scan_methods = vec![];
        config.adaptive_confidences = vec![0.99, 0.999, 0.9999];
        config.adaptive_max_bins = 38;
        let report = run_experiment(&config).unwrap();
        for a in &report.adaptive {
            let classified = a.err_bright + a.err_dark; // errors only
            assert!(classified <= config.n_trials);
            assert!(a.total_bins >= config.n_trials); // >= 1 bin each
            assert!(a.total_bins <= config.n_trials * 38);
            // higher confidence, more bins
        }
        assert!(report.adaptive[0].total_bins <= report.adaptive[2].total_bins);
    }

    #[test]
    fn trial_reordering_leaves_aggregates_unchanged() {
        // aggregates are exact integer tallies over per-trial streams, so
        // simulating a permuted subset must give the same totals as the
        // same subset in order: check via two disjoint halves
        let mut config = small_config();
        config.n_trials = 2_000;
        let report = run_experiment(&config).unwrap();
        // same experiment, same seed, but accumulate 2k trials as two
        // overlapping runs is not expressible here; instead verify that
        // a re-run with the rayon order necessarily different (threaded)
        // matches the single-threaded tally
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .unwrap();
        let threaded = pool.install(|| run_experiment(&config).unwrap());
        assert_eq!(report, threaded);
    }
}
