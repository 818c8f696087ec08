//! Rabi-oscillation thermometry and heating-rate extraction.
//!
//! A thermally occupied motional mode dephases carrier Rabi oscillations:
//! each Fock state n drives at Ω_n = Ω₀ e^{-η²/2} L_n(η²), and the
//! observed transfer is the thermal mixture over n. Fitting the mixture
//! to measured oscillations yields the mean occupation n̄ and Ω₀; fitting
//! n̄ against wait time yields the heating rate.

use crate::error::{Error, Result};
use crate::optim;

pub const HBAR: f64 = 1.054_571_817e-34; // J s
pub const ATOMIC_MASS: f64 = 1.660_539_066_60e-27; // kg

/// Parameters of the thermal Rabi model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherenceParams {
    /// Bare carrier Rabi frequency Ω₀, rad/s.
    pub rabi_frequency: f64,
    /// Mean motional occupation.
    pub nbar: f64,
    /// Lamb–Dicke parameter.
    pub lamb_dicke: f64,
    /// Oscillation contrast in (0, 1].
    pub contrast: f64,
    /// Motional mode angular frequency, rad/s.
    pub mode_frequency: f64,
}

impl CoherenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rabi_frequency >= 0.0 && self.nbar >= 0.0 && self.mode_frequency >= 0.0) {
            return Err(Error::invalid("coherence parameters must be non-negative"));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::invalid("contrast must be in (0,1]"));
        }
        if !(self.lamb_dicke >= 0.0 && self.lamb_dicke < 1.0) {
            return Err(Error::invalid("lamb_dicke must be in [0,1)"));
        }
        Ok(())
    }
}

/// Lamb–Dicke parameter η = k·cos(angle)·sqrt(ħ/(2 m ω)).
pub fn lamb_dicke(wavelength: f64, projection_angle: f64, mass: f64, omega: f64) -> f64 {
    assert!(wavelength > 0.0 && mass > 0.0 && omega > 0.0);
    let k = 2.0 * std::f64::consts::PI / wavelength;
    k * projection_angle.cos() * (HBAR / (2.0 * mass * omega)).sqrt()
}

/// Thermal weight truncation: smallest N with cumulative weight
/// above 1 - 1e-6.
fn fock_cutoff(nbar: f64) -> usize {
    if nbar <= 0.0 {
        return 1;
    }
    let ratio = nbar / (nbar + 1.0);
    // (nbar/(nbar+1))^(N+1) < 1e-6
    let n = ((1e-6f64).ln() / ratio.ln()).ceil() as usize;
    n.clamp(1, 100_000)
}

/// Carrier transfer probability at time t for a thermal state:
/// contrast × Σ_n p_n sin²(Ω_n t / 2).
pub fn rabi_transfer(t: f64, params: &CoherenceParams) -> f64 {
    debug_assert!(t >= 0.0);
    let eta2 = params.lamb_dicke * params.lamb_dicke;
    let carrier_scale = (-eta2 / 2.0).exp();
    let nbar = params.nbar;
    if nbar <= 0.0 {
        let omega = params.rabi_frequency * carrier_scale; // L_0 = 1
        return params.contrast * (omega * t / 2.0).sin().powi(2);
    }
    let cutoff = fock_cutoff(nbar);
    let w_ratio = nbar / (nbar + 1.0);
    let mut weight = 1.0 / (nbar + 1.0); // p_0
    // Laguerre polynomials by stable upward recurrence
    let mut l_prev = 1.0; // L_0(x)
    let mut l_curr = 1.0 - eta2; // L_1(x)
    let mut sum = 0.0;
    for n in 0..=cutoff {
        let laguerre = if n == 0 { l_prev } else { l_curr };
        let omega_n = params.rabi_frequency * carrier_scale * laguerre;
        sum += weight * (omega_n * t / 2.0).sin().powi(2);
        weight *= w_ratio;
        if n >= 1 {
            let nf = n as f64;
            let l_next = ((2.0 * nf + 1.0 - eta2) * l_curr - nf * l_prev) / (nf + 1.0);
            l_prev = l_curr;
            l_curr = l_next;
        }
    }
    params.contrast * sum
}

/// Bright-state probability displayed by the experiment: the complement
/// of the shelving transfer.
pub fn rabi_thermal(t: f64, params: &CoherenceParams) -> f64 {
    1.0 - rabi_transfer(t, params)
}

/// One fitted parameter with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FittedValue {
    pub value: f64,
    pub std_error: f64,
}

/// Result of [`fit_rabi`].
#[derive(Debug, Clone, PartialEq)]
pub struct RabiFit {
    pub rabi_frequency: FittedValue,
    pub nbar: FittedValue,
    pub contrast: FittedValue,
    pub lamb_dicke: f64,
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
}

impl RabiFit {
    pub fn params(&self, mode_frequency: f64) -> CoherenceParams {
        CoherenceParams {
            rabi_frequency: self.rabi_frequency.value,
            nbar: self.nbar.value,
            lamb_dicke: self.lamb_dicke,
            contrast: self.contrast.value,
            mode_frequency,
        }
    }
}

/// Coarse periodogram peak of the oscillating part of the data, used to
/// seed the Rabi frequency.
fn dominant_angular_frequency(data: &[(f64, f64, f64)]) -> f64 {
    let n = data.len() as f64;
    let mean_y: f64 = data.iter().map(|d| d.1).sum::<f64>() / n;
    let span = data.iter().map(|d| d.0).fold(0.0f64, f64::max)
        - data.iter().map(|d| d.0).fold(f64::INFINITY, f64::min);
    let dt_min = span / (n - 1.0).max(1.0);
    let w_max = std::f64::consts::PI / dt_min; // pseudo-Nyquist
    // extend below one cycle per span so sub-period data is detectable
    let w_min = 0.25 * std::f64::consts::PI / span;
    let mut best = (0.0, w_min);
    let steps = 2000;
    for i in 0..steps {
        let w = w_min + (w_max - w_min) * i as f64 / (steps - 1) as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for &(t, y, _) in data {
            let phase = w * t;
            re += (y - mean_y) * phase.cos();
            im += (y - mean_y) * phase.sin();
        }
        let power = re * re + im * im;
        if power > best.0 {
            best = (power, w);
        }
    }
    best.1
}

/// Weighted least-squares fit of (Ω₀, n̄, contrast) to bright-probability
/// data `(t, P_bright, σ)`, with the Lamb–Dicke parameter held fixed.
///
/// Ω₀ is seeded from the periodogram peak and refined from a small
/// multi-start; errors come from the covariance at the optimum. n̄ and
/// contrast are fit through log/logit transforms to stay in range, with
/// errors mapped back by the delta method.
pub fn fit_rabi(data: &[(f64, f64, f64)], eta: f64) -> Result<RabiFit> {
    if data.len() < 8 {
        return Err(Error::invalid("fit_rabi needs at least 8 points"));
    }
    if data.iter().any(|&(t, _, s)| !(t >= 0.0) || !(s > 0.0)) {
        return Err(Error::invalid(
            "fit_rabi needs t >= 0 and positive uncertainties",
        ));
    }
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::invalid("eta must be in [0,1)"));
    }
    let w_peak = dominant_angular_frequency(data);
    let span = data.iter().map(|d| d.0).fold(0.0f64, f64::max);
    if w_peak * span < 2.0 * std::f64::consts::PI {
        return Err(Error::invalid(
            "data must span at least one oscillation period",
        ));
    }

    // parameter transforms: omega raw, nbar = exp(u), contrast = sigmoid(v)
    let model = |x: &[f64], t: f64| -> f64 {
        let params = CoherenceParams {
            rabi_frequency: x[0].abs(),
            nbar: x[1].exp(),
            lamb_dicke: eta,
            contrast: sigmoid(x[2]),
            mode_frequency: 0.0,
        };
        rabi_thermal(t, &params)
    };

    let amp = {
        let max = data.iter().map(|d| d.1).fold(f64::MIN, f64::max);
        let min = data.iter().map(|d| d.1).fold(f64::MAX, f64::min);
        (max - min).clamp(0.05, 1.0)
    };
    let mut best: Option<optim::LeastSquaresResult> = None;
    for &w_scale in &[1.0, 0.5, 2.0] {
        for &nbar0 in &[0.5f64, 4.0, 12.0] {
            let x0 = [w_peak * w_scale, nbar0.ln(), logit(amp.min(0.999))];
            let mut resid = |x: &[f64]| -> Vec<f64> {
                data.iter()
                    .map(|&(t, y, s)| (model(x, t) - y) / s)
                    .collect()
            };
            if let Ok(res) = optim::levenberg_marquardt(&mut resid, &x0, 300, 1e-10) {
                if best.as_ref().is_none_or(|b| res.chi2 < b.chi2) {
                    best = Some(res);
                }
            }
        }
    }
    let res = best.ok_or_else(|| Error::FitFailure {
        message: "no Rabi fit start converged".into(),
        iterations: 0,
        last: vec![w_peak, 1.0, amp],
        objective: f64::NAN,
    })?;

    let x = &res.x;
    let omega = x[0].abs();
    let nbar = x[1].exp();
    let contrast = sigmoid(x[2]);
    // delta method through the transforms
    let se = |i: usize| res.covariance[(i, i)].max(0.0).sqrt();
    let fit = RabiFit {
        rabi_frequency: FittedValue {
            value: omega,
            std_error: se(0),
        },
        nbar: FittedValue {
            value: nbar,
            std_error: se(1) * nbar,
        },
        contrast: FittedValue {
            value: contrast,
            std_error: se(2) * contrast * (1.0 - contrast),
        },
        lamb_dicke: eta,
        chi2: res.chi2,
        dof: data.len().saturating_sub(3),
        iterations: res.iterations,
    };
    Ok(fit)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Result of [`fit_heating`]: n̄(t) = intercept + rate · t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatingFit {
    pub rate: f64,
    pub intercept: f64,
    pub rate_std_error: f64,
    pub intercept_std_error: f64,
}

/// Weighted linear regression of n̄ versus delay.
pub fn fit_heating(points: &[(f64, f64, f64)]) -> Result<HeatingFit> {
    if points.len() < 3 {
        return Err(Error::invalid("fit_heating needs at least 3 points"));
    }
    if points.iter().any(|&(_, _, s)| !(s > 0.0)) {
        return Err(Error::invalid("fit_heating needs positive uncertainties"));
    }
    let (mut sw, mut swx, mut swy, mut swxx, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y, s) in points {
        let w = 1.0 / (s * s);
        sw += w;
        swx += w * x;
        swy += w * y;
        swxx += w * x * x;
        swxy += w * x * y;
    }
    let det = sw * swxx - swx * swx;
    if det <= 0.0 {
        return Err(Error::invalid("degenerate abscissas in heating fit"));
    }
    let slope = (sw * swxy - swx * swy) / det;
    let intercept = (swxx * swy - swx * swxy) / det;
    Ok(HeatingFit {
        rate: slope,
        intercept,
        rate_std_error: (sw / det).sqrt(),
        intercept_std_error: (swxx / det).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{trial_stream, StreamRole};
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, Normal};

    const OMEGA_PAPER: f64 = 2.0 * std::f64::consts::PI * 94_700.0;

    fn paper_params() -> CoherenceParams {
        CoherenceParams {
            rabi_frequency: OMEGA_PAPER,
            nbar: 6.3,
            lamb_dicke: 0.032,
            contrast: 0.998,
            mode_frequency: 2.0 * std::f64::consts::PI * 5e6,
        }
    }

    #[test]
    fn lamb_dicke_paper_geometry() {
        // 674 nm onto an 88 u ion's 2π × 5 MHz radial mode
        let eta = lamb_dicke(
            674e-9,
            0.0,
            88.0 * ATOMIC_MASS,
            2.0 * std::f64::consts::PI * 5e6,
        );
        assert!((eta - 0.032).abs() < 0.001, "eta = {eta}");
    }

    #[test]
    fn lamb_dicke_projection_and_scaling() {
        let m = 88.0 * ATOMIC_MASS;
        let w = 2.0 * std::f64::consts::PI * 5e6;
        assert!(lamb_dicke(674e-9, std::f64::consts::FRAC_PI_2, m, w) < 1e-12);
        // η ∝ ω^{-1/2}
        let e1 = lamb_dicke(674e-9, 0.0, m, w);
        let e4 = lamb_dicke(674e-9, 0.0, m, 4.0 * w);
        assert_relative_eq!(e4, e1 / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn transfer_zero_at_t_zero() {
        assert_eq!(rabi_transfer(0.0, &paper_params()), 0.0);
        assert_eq!(rabi_thermal(0.0, &paper_params()), 1.0);
    }

    #[test]
    fn ground_state_pure_sine() {
        // n̄ = 0, η → 0: pure sin²(Ω t/2); π time = π/Ω ≈ 5.28 µs
        let params = CoherenceParams {
            rabi_frequency: OMEGA_PAPER,
            nbar: 0.0,
            lamb_dicke: 0.0,
            contrast: 1.0,
            mode_frequency: 0.0,
        };
        let t_pi = std::f64::consts::PI / OMEGA_PAPER;
        assert_relative_eq!(t_pi * 1e6, 5.28, epsilon = 0.01);
        assert_relative_eq!(rabi_transfer(t_pi, &params), 1.0, max_relative = 1e-12);
        let quarter = rabi_transfer(t_pi / 2.0, &params);
        assert_relative_eq!(quarter, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn thermal_contrast_stays_high_at_first_pi_time() {
        // n̄ = 6.3 at η = 0.032 barely dephases the first π pulse
        let params = paper_params();
        let eta2 = params.lamb_dicke * params.lamb_dicke;
        let t_pi = std::f64::consts::PI / (params.rabi_frequency * (-eta2 / 2.0).exp());
        let transfer = rabi_transfer(t_pi, &params);
        assert!(transfer >= 0.99, "transfer at pi time {transfer}");
    }

    #[test]
    fn transfer_bounded_and_weights_normalized() {
        let params = paper_params();
        for i in 0..600 {
            let t = i as f64 * 0.4e-6;
            let p = rabi_transfer(t, &params);
            assert!((0.0..=1.0).contains(&p), "transfer {p} at {t}");
        }
        // thermal weights: cumulative mass of the truncation is > 1-1e-6
        let nbar = 6.3f64;
        let cutoff = fock_cutoff(nbar);
        let mut mass = 0.0;
        let mut w = 1.0 / (nbar + 1.0);
        for _ in 0..=cutoff {
            mass += w;
            w *= nbar / (nbar + 1.0);
        }
        assert!(mass > 1.0 - 1e-6, "truncated mass {mass}");
    }

    #[test]
    fn envelope_contrast_non_increasing_in_nbar() {
        // at fixed t = π/Ω the transfer decreases as n̄ grows
        let mut prev = f64::INFINITY;
        for nbar in 0..=20 {
            let params = CoherenceParams {
                nbar: nbar as f64,
                ..paper_params()
            };
            let t_pi = std::f64::consts::PI / OMEGA_PAPER;
            let p = rabi_transfer(t_pi, &params);
            assert!(p <= prev + 1e-12, "transfer rose at nbar {nbar}");
            prev = p;
        }
    }

    fn synthesize(params: &CoherenceParams, sigma: f64, seed: u64) -> Vec<(f64, f64, f64)> {
        let mut rng = trial_stream(seed, 0, StreamRole::Aux);
        let noise = Normal::new(0.0, sigma.max(1e-9)).unwrap();
        // ~6 oscillations: enough span that the thermal envelope decay
        // separates nbar from a small Rabi-frequency shift
        (0..128)
            .map(|i| {
                let t = i as f64 * 0.5e-6;
                let y = rabi_thermal(t, params) + if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (t, y, sigma.max(1e-6))
            })
            .collect()
    }

    #[test]
    fn rabi_fit_recovers_paper_parameters() {
        let truth = paper_params();
        let data = synthesize(&truth, 0.01, 101);
        let fit = fit_rabi(&data, truth.lamb_dicke).unwrap();
        assert!(
            (fit.rabi_frequency.value - truth.rabi_frequency).abs()
                < 3.0 * fit.rabi_frequency.std_error,
            "omega {} ± {} vs {}",
            fit.rabi_frequency.value,
            fit.rabi_frequency.std_error,
            truth.rabi_frequency
        );
        assert!(
            (fit.nbar.value - truth.nbar).abs() < 3.0 * fit.nbar.std_error,
            "nbar {} ± {} vs {}",
            fit.nbar.value,
            fit.nbar.std_error,
            truth.nbar
        );
        assert!(
            (fit.contrast.value - truth.contrast).abs() < 3.0 * fit.contrast.std_error.max(1e-4),
            "contrast {} ± {}",
            fit.contrast.value,
            fit.contrast.std_error
        );
    }

    #[test]
    fn rabi_fit_noise_free_is_tight() {
        let truth = paper_params();
        let data = synthesize(&truth, 0.0, 0);
        let fit = fit_rabi(&data, truth.lamb_dicke).unwrap();
        assert_relative_eq!(
            fit.rabi_frequency.value,
            truth.rabi_frequency,
            max_relative = 1e-6
        );
        assert_relative_eq!(fit.nbar.value, truth.nbar, max_relative = 1e-6);
        assert_relative_eq!(fit.contrast.value, truth.contrast, max_relative = 1e-6);
    }

    #[test]
    fn rabi_fit_ground_state_consistent_with_zero() {
        let truth = CoherenceParams {
            nbar: 0.0,
            ..paper_params()
        };
        let data = synthesize(&truth, 0.01, 33);
        let fit = fit_rabi(&data, truth.lamb_dicke).unwrap();
        // upper bound: value within ~3σ of zero
        assert!(
            fit.nbar.value <= 3.0 * fit.nbar.std_error.max(0.05),
            "nbar {} ± {}",
            fit.nbar.value,
            fit.nbar.std_error
        );
    }

    #[test]
    fn rabi_fit_rejects_bad_input() {
        let truth = paper_params();
        let data = synthesize(&truth, 0.01, 1);
        assert!(fit_rabi(&data[..5], truth.lamb_dicke).is_err());
        // a span covering only a fraction of one oscillation
        let short: Vec<(f64, f64, f64)> = (0..10)
            .map(|i| {
                let t = i as f64 * 0.2e-6; // 2 µs of a ~10.6 µs period
                (t, rabi_thermal(t, &truth), 0.01)
            })
            .collect();
        assert!(fit_rabi(&short, truth.lamb_dicke).is_err());
    }

    #[test]
    fn heating_fit_exact_line() {
        // n̄(t) = 6 + 10000 t: 10 quanta/ms, noise-free
        let points: Vec<(f64, f64, f64)> = (0..10)
            .map(|i| {
                let t = i as f64 * 0.2e-3;
                (t, 6.0 + 10_000.0 * t, 0.3)
            })
            .collect();
        let fit = fit_heating(&points).unwrap();
        assert_relative_eq!(fit.rate, 10_000.0, max_relative = 1e-12);
        assert_relative_eq!(fit.intercept, 6.0, max_relative = 1e-12);
    }

    #[test]
    fn heating_fit_constant_data() {
        let points: Vec<(f64, f64, f64)> =
            (0..5).map(|i| (i as f64 * 1e-3, 4.2, 0.1)).collect();
        let fit = fit_heating(&points).unwrap();
        assert!(fit.rate.abs() < 1e-9);
        assert!(fit.rate_std_error > 0.0);
    }

    #[test]
    fn heating_fit_recovers_slope_with_noise() {
        // Oracle: weighted-regression recovery over repetitions
        let (slope, intercept, sigma) = (10_000.0, 6.0, 0.3);
        let mut pulled = 0u32;
        let reps = 500;
        for rep in 0..reps {
            let mut rng = trial_stream(55, rep, StreamRole::Aux);
            let noise = Normal::new(0.0, sigma).unwrap();
            let points: Vec<(f64, f64, f64)> = (0..10)
                .map(|i| {
                    let t = i as f64 * 2e-3 / 9.0;
                    (t, intercept + slope * t + noise.sample(&mut rng), sigma)
                })
                .collect();
            let fit = fit_heating(&points).unwrap();
            if (fit.rate - slope).abs() < 3.0 * fit.rate_std_error {
                pulled += 1;
            }
        }
        // ~99.7% of repetitions should cover at 3σ; allow slack
        assert!(pulled as f64 / reps as f64 > 0.985, "coverage {pulled}/{reps}");
    }

    #[test]
    fn heating_fit_needs_three_points() {
        assert!(fit_heating(&[(0.0, 1.0, 0.1), (1.0, 2.0, 0.1)]).is_err());
    }
}
