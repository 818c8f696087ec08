//! Maximum-likelihood fit of the total-count histogram: a bright-state
//! Poisson component plus a dark-state component whose decay
//! marginalization produces the characteristic plateau between the two
//! peaks, with a negative-binomial (over-dispersed) core.
//!
//! The dark component discretizes the decay to bin granularity exactly
//! like the likelihood discriminator: "decay in bin j" convolves j-1
//! dark bins (one negative binomial, since fixed-p NB is closed under
//! summation) with the remaining bright bins (one Poisson).

use crate::error::{Error, Result};
use crate::optim;
use crate::stats;

/// Parameters of the histogram mixture, in total-count units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramModel {
    /// Fraction of trials prepared bright.
    pub bright_weight: f64,
    /// Mean total counts of a bright trial.
    pub bright_mean: f64,
    /// Mean total counts of a never-decaying dark trial.
    pub dark_mean: f64,
    /// Fano-like dispersion of the dark counts.
    pub dispersion: f64,
    /// Dark→Bright decay rate, 1/s.
    pub decay_rate: f64,
}

/// Total-count distribution of a dark trial, marginalized over the decay
/// position, over support 0..kmax.
pub fn dark_total_distribution(
    model: &HistogramModel,
    n_bins: usize,
    bin_width: f64,
    kmax: usize,
) -> Vec<f64> {
    let n = n_bins;
    let mu_d = model.dark_mean / n as f64; // per-bin dark mean
    let mu_b = model.bright_mean / n as f64;
    let p_d = -(-model.decay_rate * bin_width).exp_m1();
    let ln_1m = (1.0 - p_d).ln();

    // NB pmf over j dark bins: mean j·mu_d, same dispersion; Poisson pmf
    // over m bright bins. Tables by stable recurrences.
    let nb_row = |j: usize| -> Vec<f64> {
        let mean = j as f64 * mu_d;
        pmf_row_nb(mean, model.dispersion, kmax)
    };
    let poisson_row = |m: usize| -> Vec<f64> {
        let mean = m as f64 * mu_b;
        pmf_row_poisson(mean, kmax)
    };

    let mut out = vec![0.0f64; kmax + 1];
    if p_d > 0.0 {
        // decay in bin j: j-1 dark bins, n-j+1 bright bins
        let mut w = p_d; // (1-p_d)^(j-1) p_d
        for j in 1..=n {
            let dark = nb_row(j - 1);
            let bright = poisson_row(n - j + 1);
            convolve_into(&mut out, &dark, &bright, w);
            w *= 1.0 - p_d;
        }
    }
    // no decay within the window
    let w_none = (n as f64 * ln_1m).exp();
    let dark_all = nb_row(n);
    for (o, d) in out.iter_mut().zip(&dark_all) {
        *o += w_none * d;
    }
    out
}

/// Full mixture distribution over 0..kmax.
pub fn mixture_distribution(
    model: &HistogramModel,
    n_bins: usize,
    bin_width: f64,
    kmax: usize,
) -> Vec<f64> {
    let bright = pmf_row_poisson(model.bright_mean, kmax);
    let dark = dark_total_distribution(model, n_bins, bin_width, kmax);
    bright
        .iter()
        .zip(&dark)
        .map(|(b, d)| model.bright_weight * b + (1.0 - model.bright_weight) * d)
        .collect()
}

fn pmf_row_poisson(mean: f64, kmax: usize) -> Vec<f64> {
    let mut row = vec![0.0; kmax + 1];
    if mean == 0.0 {
        row[0] = 1.0;
        return row;
    }
    row[0] = (-mean).exp();
    for k in 1..=kmax {
        row[k] = row[k - 1] * mean / k as f64;
    }
    // underflowed head (huge mean): rebuild in log space
    if row.iter().all(|&p| p == 0.0) {
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = stats::ln_poisson_pmf(mean, k as u64).exp();
        }
    }
    row
}

fn pmf_row_nb(mean: f64, dispersion: f64, kmax: usize) -> Vec<f64> {
    let mut row = vec![0.0; kmax + 1];
    if mean == 0.0 {
        row[0] = 1.0;
        return row;
    }
    if dispersion <= 1.0 {
        return pmf_row_poisson(mean, kmax);
    }
    let r = mean / (dispersion - 1.0);
    let p = 1.0 / dispersion;
    let q = 1.0 - p;
    row[0] = (r * p.ln()).exp();
    for k in 1..=kmax {
        // NB(k)/NB(k-1) = (k-1+r)/k · q
        row[k] = row[k - 1] * (k as f64 - 1.0 + r) / k as f64 * q;
    }
    if row.iter().all(|&p| p == 0.0) {
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = stats::ln_neg_binomial_pmf(mean, dispersion, k as u64).exp();
        }
    }
    row
}

/// out[k] += weight * Σ_m a[m] b[k-m], with support truncation.
fn convolve_into(out: &mut [f64], a: &[f64], b: &[f64], weight: f64) {
    const TINY: f64 = 1e-18;
    for (m, &am) in a.iter().enumerate() {
        if am < TINY {
            continue;
        }
        let wam = weight * am;
        let kmax = out.len() - 1;
        for (k, &bk) in b.iter().enumerate().take(kmax + 1 - m) {
            if bk >= TINY {
                out[m + k] += wam * bk;
            }
        }
    }
}

/// Fitted mixture with per-parameter standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramFit {
    pub bright_weight: f64,
    pub bright_mean: f64,
    pub dark_mean: f64,
    /// `None` when the dark component carries no weight and the
    /// dispersion is unidentifiable.
    pub dispersion: Option<f64>,
    pub decay_rate: f64,
    /// Pearson chi-square per degree of freedom (bins pooled to expected
    /// counts >= 5).
    pub goodness: f64,
    pub errors: HistogramFitErrors,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramFitErrors {
    pub bright_weight: f64,
    pub bright_mean: f64,
    pub dark_mean: f64,
    pub dispersion: f64,
    pub decay_rate: f64,
}

/// Weight below which the dark component is considered absent and the
/// dispersion unidentifiable.
const DARK_WEIGHT_FLOOR: f64 = 1e-4;

/// Maximum-likelihood fit of the five mixture parameters to a histogram
/// of total counts (`histogram[k]` = number of trials with k counts).
///
/// `window` and `bin_width` define the binning (n_bins = window/Δ).
pub fn fit_histogram(histogram: &[u64], window: f64, bin_width: f64) -> Result<HistogramFit> {
    let n_trials: u64 = histogram.iter().sum();
    if n_trials < 1000 {
        return Err(Error::invalid(format!(
            "histogram fit needs >= 1000 trials, got {n_trials}"
        )));
    }
    if !(window > 0.0 && bin_width > 0.0 && window >= bin_width) {
        return Err(Error::invalid("window and bin width must be positive"));
    }
    let n_bins = (window / bin_width).round() as usize;
    let kmax = histogram.len().max(8) + 8;

    // moment-based initialization: split the histogram at the valley
    // between the dark and bright clusters
    let counts: Vec<f64> = histogram.iter().map(|&c| c as f64).collect();
    let total: f64 = n_trials as f64;
    let mean_all: f64 =
        counts.iter().enumerate().map(|(k, &c)| k as f64 * c).sum::<f64>() / total;
    let split = mean_all.round() as usize;
    let low_mass: f64 = counts[..split.min(counts.len())].iter().sum();
    let low_mean: f64 = counts[..split.min(counts.len())]
        .iter()
        .enumerate()
        .map(|(k, &c)| k as f64 * c)
        .sum::<f64>()
        / low_mass.max(1.0);
    let high_mass = total - low_mass;
    let high_mean: f64 = counts
        .iter()
        .enumerate()
        .skip(split)
        .map(|(k, &c)| k as f64 * c)
        .sum::<f64>()
        / high_mass.max(1.0);
    let w0 = (high_mass / total).clamp(0.05, 0.95);
    let bright0 = high_mean.max(1.0);
    let dark0 = low_mean.max(0.1);

    // transformed parameters: logit(w), ln(bright), ln(dark), ln(f-1), ln(γ)
    let unpack = |x: &[f64]| HistogramModel {
        bright_weight: sigmoid(x[0]),
        bright_mean: x[1].exp(),
        dark_mean: x[2].exp(),
        dispersion: 1.0 + x[3].exp(),
        decay_rate: x[4].exp(),
    };
    let mut nll = |x: &[f64]| -> f64 {
        let model = unpack(x);
        let p = mixture_distribution(&model, n_bins, bin_width, kmax);
        let mut acc = 0.0;
        for (k, &c) in histogram.iter().enumerate() {
            if c > 0 {
                acc -= c as f64 * p[k].max(1e-300).ln();
            }
        }
        acc
    };

    let x0 = [
        logit(w0),
        bright0.ln(),
        dark0.ln(),
        (0.2f64).ln(),        // f ≈ 1.2
        (1.0f64 / 0.390).ln(), // γ near the metastable rate scale
    ];
    let result = optim::nelder_mead(&mut nll, &x0, 0.15, 1e-10, 4000)?;
    let model = unpack(&result.x);

    // Degenerate solutions: with no dark cluster in the data, the
    // likelihood is flat along the mixture weight once both component
    // means coincide. Report the identifiable reduction: a pure Poisson
    // fit with the dispersion (and everything dark) marked unknown.
    if model.dark_mean > 0.8 * model.bright_mean
        || model.bright_weight > 1.0 - DARK_WEIGHT_FLOOR
    {
        let mean = counts
            .iter()
            .enumerate()
            .map(|(k, &c)| k as f64 * c)
            .sum::<f64>()
            / total;
        let expected: Vec<f64> = (0..=kmax)
            .map(|k| stats::ln_poisson_pmf(mean, k as u64).exp() * total)
            .collect();
        return Ok(HistogramFit {
            bright_weight: 1.0,
            bright_mean: mean,
            dark_mean: 0.0,
            dispersion: None,
            decay_rate: 0.0,
            goodness: pooled_chi2_per_dof(histogram, &expected, 5),
            errors: HistogramFitErrors {
                bright_weight: f64::INFINITY,
                bright_mean: (mean / total).sqrt(),
                dark_mean: f64::INFINITY,
                dispersion: f64::INFINITY,
                decay_rate: f64::INFINITY,
            },
            iterations: result.iterations,
        });
    }

    // observed-information errors from the numerical Hessian in
    // transformed space, delta method back to natural parameters
    let hess = optim::numerical_hessian(&mut nll, &result.x, 1e-3);
    let errors_t: Vec<f64> = match hess.clone().try_inverse() {
        Some(cov) => (0..5).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; 5],
    };
    let w = model.bright_weight;
    let errors = HistogramFitErrors {
        bright_weight: errors_t[0] * w * (1.0 - w),
        bright_mean: errors_t[1] * model.bright_mean,
        dark_mean: errors_t[2] * model.dark_mean,
        dispersion: errors_t[3] * (model.dispersion - 1.0),
        decay_rate: errors_t[4] * model.decay_rate,
    };

    // goodness: Pearson chi2/dof with tail pooling
    let expected: Vec<f64> = mixture_distribution(&model, n_bins, bin_width, kmax)
        .iter()
        .map(|p| p * total)
        .collect();
    let goodness = pooled_chi2_per_dof(histogram, &expected, 5);

    let dark_weight = 1.0 - w;
    Ok(HistogramFit {
        bright_weight: w,
        bright_mean: model.bright_mean,
        dark_mean: model.dark_mean,
        dispersion: (dark_weight > DARK_WEIGHT_FLOOR).then_some(model.dispersion),
        decay_rate: model.decay_rate,
        goodness,
        errors,
        iterations: result.iterations,
    })
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Pearson chi-square per dof, pooling adjacent cells until each group
/// has at least `min_expected` expected counts. dof = groups - 1 - 5.
fn pooled_chi2_per_dof(observed: &[u64], expected: &[f64], min_expected: usize) -> f64 {
    let mut chi2 = 0.0;
    let mut groups = 0usize;
    let (mut obs_acc, mut exp_acc) = (0.0, 0.0);
    for (k, &exp) in expected.iter().enumerate() {
        obs_acc += observed.get(k).copied().unwrap_or(0) as f64;
        exp_acc += exp;
        if exp_acc >= min_expected as f64 {
            chi2 += (obs_acc - exp_acc) * (obs_acc - exp_acc) / exp_acc;
            groups += 1;
            obs_acc = 0.0;
            exp_acc = 0.0;
        }
    }
    if exp_acc > 0.0 {
        chi2 += (obs_acc - exp_acc) * (obs_acc - exp_acc) / exp_acc;
        groups += 1;
    }
    let dof = groups.saturating_sub(6).max(1);
    chi2 / dof as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{trial_stream, StreamRole};
    use crate::source::{
        sample_trajectory, CountSampler, IonState, OverdispersionMode, RateModel, Trajectory,
    };
    use approx::assert_relative_eq;
    use rand::Rng;

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

    pub fn simulate_histogram(
        rates: &RateModel,
        n_trials: u64,
        window: f64,
        prep_bright: f64,
        seed: u64,
    ) -> Vec<u64> {
        let n_bins = (window / rates.bin_width).round() as usize;
        let sampler = CountSampler::new(rates, OverdispersionMode::DarkOnly).unwrap();
        let mut hist = vec![0u64; 1];
        for t in 0..n_trials {
            let mut trng = trial_stream(seed, t, StreamRole::Trajectory);
            let bright = trng.random::<f64>() < prep_bright;
            let traj = if bright {
                Trajectory::bright()
            } else {
                sample_trajectory(IonState::Dark, rates.decay_rate, window, &mut trng).unwrap()
            };
            let mut crng = trial_stream(seed, t, StreamRole::SpadCounts);
            let rec = sampler.sample_record(&traj, n_bins, "spad", &mut crng);
            let total = rec.total() as usize;
            if total >= hist.len() {
                hist.resize(total + 1, 0);
            }
            hist[total] += 1;
        }
        hist
    }

    #[test]
    fn dark_distribution_normalizes_and_has_plateau() {
        let model = HistogramModel {
            bright_weight: 0.5,
            bright_mean: 106_000.0 * 2.9e-3,
            dark_mean: 38_000.0 * 2.9e-3,
            dispersion: 1.2,
            decay_rate: 1.0 / 0.390,
        };
        let kmax = 520;
        let dark = dark_total_distribution(&model, 116, 25e-6, kmax);
        let total: f64 = dark.iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "dark total {total}");

        // plateau: mass between the dark core and the bright peak is
        // roughly flat and positive
        let mid_lo = dark[180];
        let mid_hi = dark[260];
        assert!(mid_lo > 0.0 && mid_hi > 0.0);
        assert!(mid_lo / mid_hi < 4.0 && mid_hi / mid_lo < 4.0);

        let mix = mixture_distribution(&model, 116, 25e-6, kmax);
        let total: f64 = mix.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn round_trip_recovery_within_errors() {
        // Oracle: self-consistency round trip on the inset configuration
        // (40 000 trials, 2.9 ms window).
        let rates = paper_rates();
        let window = 2.9e-3;
        let hist = simulate_histogram(&rates, 40_000, window, 0.498, 71);
        let fit = fit_histogram(&hist, window, rates.bin_width).unwrap();

        let truth_bright = rates.bright_rate * window;
        let truth_dark = rates.dark_rate * window;
        let check = |name: &str, value: f64, truth: f64, sigma: f64| {
            assert!(
                (value - truth).abs() < 3.0 * sigma.max(1e-12),
                "{name}: {value} vs {truth} (σ {sigma})"
            );
        };
        check("bright_weight", fit.bright_weight, 0.498, fit.errors.bright_weight.max(0.005));
        check("bright_mean", fit.bright_mean, truth_bright, fit.errors.bright_mean.max(0.2));
        check("dark_mean", fit.dark_mean, truth_dark, fit.errors.dark_mean.max(0.2));
        check(
            "dispersion",
            fit.dispersion.expect("identifiable"),
            1.2,
            fit.errors.dispersion.max(0.01),
        );
        check(
            "decay_rate",
            fit.decay_rate,
            rates.decay_rate,
            fit.errors.decay_rate.max(0.05),
        );
        // fitted dark variance exceeds Poisson by 20% ± 5 pp
        let f = fit.dispersion.unwrap();
        assert!((f - 1.2).abs() < 0.05, "dispersion {f}");
        assert!(fit.goodness < 2.0, "chi2/dof {}", fit.goodness);
    }

    #[test]
    fn plateau_scales_linearly_with_decay_rate() {
        // fit synthetic data at γ and 2γ: fitted rates scale ~2x
        let mut rates = paper_rates();
        let window = 2.9e-3;
        let hist1 = simulate_histogram(&rates, 60_000, window, 0.5, 73);
        let fit1 = fit_histogram(&hist1, window, rates.bin_width).unwrap();
        rates.decay_rate *= 2.0;
        let hist2 = simulate_histogram(&rates, 60_000, window, 0.5, 74);
        let fit2 = fit_histogram(&hist2, window, rates.bin_width).unwrap();
        let ratio = fit2.decay_rate / fit1.decay_rate;
        let sigma = ratio
            * ((fit1.errors.decay_rate / fit1.decay_rate).powi(2)
                + (fit2.errors.decay_rate / fit2.decay_rate).powi(2))
            .sqrt();
        assert!(
            (ratio - 2.0).abs() < 3.0 * sigma.max(0.15),
            "ratio {ratio} ± {sigma}"
        );
    }

    #[test]
    fn pure_bright_marks_dispersion_unidentifiable() {
        let rates = paper_rates();
        let window = 1.0e-3;
        let hist = simulate_histogram(&rates, 20_000, window, 1.0, 77);
        let fit = fit_histogram(&hist, window, rates.bin_width).unwrap();
        assert_eq!(fit.bright_weight, 1.0);
        assert_eq!(fit.dispersion, None);
        assert_relative_eq!(
            fit.bright_mean,
            rates.bright_rate * window,
            max_relative = 0.02
        );
    }

    #[test]
    fn histogram_fit_rejects_small_samples() {
        let hist = vec![10u64; 20];
        assert!(fit_histogram(&hist, 1e-3, 25e-6).is_err());
    }
}
