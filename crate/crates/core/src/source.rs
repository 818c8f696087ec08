//! Photon-emission model for a bright or dark ion plus background.
//!
//! A bright ion scatters detection-beam photons continuously; a dark ion
//! contributes only background, and can spontaneously decay back to the
//! bright state during the measurement window. Counts are binned:
//! bright-segment bins are Poisson, dark-segment bins are negative
//! binomial with variance `dispersion * mean` (slow scatter drifts make
//! the background over-dispersed), and the bin containing the decay gets
//! the exact time-weighted mixed mean.

use crate::error::{Error, Result};
use crate::stats::{self, PmfKind};
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Poisson};

pub use crate::stats::pmf;

/// Readout basis of the ion: Bright scatters at 422 nm (ground state),
/// Dark is the metastable shelf state and scatters nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IonState {
    Bright,
    Dark,
}

impl IonState {
    pub fn label(&self) -> &'static str {
        match self {
            IonState::Bright => "bright",
            IonState::Dark => "dark",
        }
    }
}

/// All rates defining the count statistics of one detector channel.
///
/// Rates are observed count rates (saturation already folded in), in
/// counts per second. `decay_rate` is the Dark→Bright rate 1/τ of the
/// metastable state. `dispersion` is the Fano-like factor f >= 1 applied
/// to dark (background-dominated) bins.
#[derive(Debug, Clone, PartialEq)]
pub struct RateModel {
    pub bright_rate: f64,
    pub dark_rate: f64,
    /// Named contributions to the dark rate, counts/s (e.g. laser
    /// scatter, lab light, RF-induced counts, DCR). May be empty.
    pub background_breakdown: Vec<(String, f64)>,
    pub bin_width: f64,
    pub decay_rate: f64,
    pub dispersion: f64,
}

impl RateModel {
    /// Consistency tolerance for the background breakdown: contributions
    /// may sum to slightly more than the observed dark rate because the
    /// detector saturates a few percent at that rate.
    pub const DEFAULT_BACKGROUND_TOLERANCE: f64 = 0.10;

    pub fn validate(&self) -> Result<()> {
        self.validate_with_tolerance(Self::DEFAULT_BACKGROUND_TOLERANCE)
    }

    pub fn validate_with_tolerance(&self, background_tolerance: f64) -> Result<()> {
        if !(self.bright_rate > self.dark_rate) {
            return Err(Error::invalid(format!(
                "bright_rate ({}) must exceed dark_rate ({})",
                self.bright_rate, self.dark_rate
            )));
        }
        if !(self.dark_rate >= 0.0) {
            return Err(Error::invalid("dark_rate must be >= 0"));
        }
        if !(self.bin_width > 0.0) {
            return Err(Error::invalid("bin_width must be > 0"));
        }
        if !(self.decay_rate >= 0.0) {
            return Err(Error::invalid("decay_rate must be >= 0"));
        }
        if !(self.dispersion >= 1.0) {
            return Err(Error::invalid(format!(
                "dispersion must be >= 1, got {}",
                self.dispersion
            )));
        }
        if !self.background_breakdown.is_empty() {
            let sum: f64 = self.background_breakdown.iter().map(|(_, v)| v).sum();
            if self.dark_rate > 0.0 {
                let rel = (sum - self.dark_rate).abs() / self.dark_rate;
                if rel > background_tolerance {
                    return Err(Error::invalid(format!(
                        "background contributions sum to {sum} counts/s, which differs from \
                         dark_rate {} by {:.1}% (tolerance {:.0}%)",
                        self.dark_rate,
                        rel * 100.0,
                        background_tolerance * 100.0
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn bright_bin_mean(&self) -> f64 {
        self.bright_rate * self.bin_width
    }

    pub fn dark_bin_mean(&self) -> f64 {
        self.dark_rate * self.bin_width
    }

    /// Probability that a dark ion decays within one bin.
    pub fn decay_prob_per_bin(&self) -> f64 {
        -(-self.decay_rate * self.bin_width).exp_m1()
    }

    /// Serialize as the plain-text key = value format used by preset
    /// files. Keys carry SI units in their names.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("bright_rate_cps = {}\n", self.bright_rate));
        s.push_str(&format!("dark_rate_cps = {}\n", self.dark_rate));
        s.push_str(&format!("bin_width_s = {}\n", self.bin_width));
        s.push_str(&format!("decay_rate_hz = {}\n", self.decay_rate));
        s.push_str(&format!("dispersion = {}\n", self.dispersion));
        for (name, rate) in &self.background_breakdown {
            s.push_str(&format!("background.{name}_cps = {rate}\n"));
        }
        s
    }

    /// Parse the key = value format written by [`RateModel::to_kv_string`].
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut bright = None;
        let mut dark = None;
        let mut bin = None;
        let mut decay = None;
        let mut dispersion = None;
        let mut background = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config("<rate model>", lineno + 1, "expected key = value")
            })?;
            let key = key.trim();
            let value: f64 = value.trim().parse().map_err(|_| {
                Error::config(
                    "<rate model>",
                    lineno + 1,
                    format!("key {key}: expected a number, got {}", value.trim()),
                )
            })?;
            match key {
                "bright_rate_cps" => bright = Some(value),
                "dark_rate_cps" => dark = Some(value),
                "bin_width_s" => bin = Some(value),
                "decay_rate_hz" => decay = Some(value),
                "dispersion" => dispersion = Some(value),
                _ => {
                    if let Some(name) = key
                        .strip_prefix("background.")
                        .and_then(|k| k.strip_suffix("_cps"))
                    {
                        background.push((name.to_string(), value));
                    } else {
                        return Err(Error::config(
                            "<rate model>",
                            lineno + 1,
                            format!("unknown key {key}"),
                        ));
                    }
                }
            }
        }
        let require = |opt: Option<f64>, key: &str| {
            opt.ok_or_else(|| Error::invalid(format!("rate model missing key {key}")))
        };
        let model = RateModel {
            bright_rate: require(bright, "bright_rate_cps")?,
            dark_rate: require(dark, "dark_rate_cps")?,
            background_breakdown: background,
            bin_width: require(bin, "bin_width_s")?,
            decay_rate: require(decay, "decay_rate_hz")?,
            dispersion: require(dispersion, "dispersion")?,
        };
        model.validate()?;
        Ok(model)
    }
}

/// The true state history of one trial: the prepared state and, for dark
/// preparations, the spontaneous decay time (measured from detection
/// start) if it falls within the record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub initial_state: IonState,
    pub decay_time: Option<f64>,
}

impl Trajectory {
    pub fn bright() -> Self {
        Trajectory {
            initial_state: IonState::Bright,
            decay_time: None,
        }
    }

    pub fn dark(decay_time: Option<f64>) -> Self {
        if let Some(t) = decay_time {
            assert!(t >= 0.0, "decay_time must be >= 0");
        }
        Trajectory {
            initial_state: IonState::Dark,
            decay_time,
        }
    }
}

/// One detection trial: per-bin counts plus the ground truth that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct CountRecord {
    pub counts: Vec<u32>,
    pub trajectory: Trajectory,
    pub rate_model_id: String,
    pub detector_label: String,
}

impl CountRecord {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Draw the Dark→Bright decay time for a trial.
///
/// Bright preparations never decay during readout (the detection beam
/// cannot populate the shelf state). Dark preparations decay at rate
/// `decay_rate`; times beyond `window` are reported as `None`.
pub fn sample_trajectory(
    initial: IonState,
    decay_rate: f64,
    window: f64,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    if !(decay_rate >= 0.0) {
        return Err(Error::invalid(format!(
            "decay rate must be >= 0, got {decay_rate}"
        )));
    }
    if !(window > 0.0) {
        return Err(Error::invalid(format!("window must be > 0, got {window}")));
    }
    match initial {
        IonState::Bright => Ok(Trajectory::bright()),
        IonState::Dark => {
            if decay_rate == 0.0 {
                return Ok(Trajectory::dark(None));
            }
            let t = Exp::new(decay_rate)
                .map_err(|e| Error::invalid(format!("bad decay rate: {e}")))?
                .sample(rng);
            Ok(Trajectory::dark(if t <= window { Some(t) } else { None }))
        }
    }
}

/// Expected counts per bin for a trajectory.
///
/// Bins entirely before the decay use the dark rate, bins entirely after
/// use the bright rate, and the bin containing the decay gets the exact
/// time split. A decay exactly on a bin boundary produces no mixed bin.
pub fn bin_mean_profile(traj: &Trajectory, model: &RateModel, n_bins: usize) -> Vec<f64> {
    assert!(n_bins >= 1, "n_bins must be >= 1");
    let dt = model.bin_width;
    let bright = model.bright_bin_mean();
    match (traj.initial_state, traj.decay_time) {
        (IonState::Bright, _) => vec![bright; n_bins],
        (IonState::Dark, None) => vec![model.dark_bin_mean(); n_bins],
        (IonState::Dark, Some(td)) => (0..n_bins)
            .map(|i| {
                let start = i as f64 * dt;
                let end = start + dt;
                if td >= end {
                    model.dark_bin_mean()
                } else if td <= start {
                    bright
                } else {
                    model.dark_rate * (td - start) + model.bright_rate * (end - td)
                }
            })
            .collect(),
    }
}

/// Whether over-dispersion applies only to dark bins (default; the excess
/// variance comes from scatter-beam pointing drift) or to bright bins too.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverdispersionMode {
    #[default]
    DarkOnly,
    Both,
}

/// Reusable per-bin count sampler for one rate model.
///
/// Caches the fixed-mean distributions so that batched trials do not pay
/// distribution setup per bin.
pub struct CountSampler<'a> {
    model: &'a RateModel,
    mode: OverdispersionMode,
    bright: BinDistribution,
    dark: BinDistribution,
}

enum BinDistribution {
    Zero,
    Poisson(Poisson<f64>),
    /// Gamma-Poisson mixture: λ ~ Gamma(mean/(f-1), f-1), K ~ Poisson(λ).
    NegBinomial(Gamma<f64>),
}

impl BinDistribution {
    fn new(mean: f64, dispersion: f64) -> Result<Self> {
        if mean == 0.0 {
            return Ok(BinDistribution::Zero);
        }
        if dispersion == 1.0 {
            Ok(BinDistribution::Poisson(Poisson::new(mean).map_err(
                |e| Error::invalid(format!("bad bin mean {mean}: {e}")),
            )?))
        } else {
            let shape = mean / (dispersion - 1.0);
            let scale = dispersion - 1.0;
            Ok(BinDistribution::NegBinomial(
                Gamma::new(shape, scale)
                    .map_err(|e| Error::invalid(format!("bad NB shape {shape}: {e}")))?,
            ))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> u32 {
        match self {
            BinDistribution::Zero => 0,
            BinDistribution::Poisson(p) => p.sample(rng) as u32,
            BinDistribution::NegBinomial(g) => {
                let lambda = g.sample(rng);
                if lambda <= 0.0 {
                    0
                } else {
                    Poisson::new(lambda).expect("positive lambda").sample(rng) as u32
                }
            }
        }
    }
}

impl<'a> CountSampler<'a> {
    pub fn new(model: &'a RateModel, mode: OverdispersionMode) -> Result<Self> {
        if !(model.dispersion >= 1.0) {
            return Err(Error::invalid(format!(
                "dispersion must be >= 1, got {}",
                model.dispersion
            )));
        }
        let bright_f = match mode {
            OverdispersionMode::DarkOnly => 1.0,
            OverdispersionMode::Both => model.dispersion,
        };
        Ok(CountSampler {
            model,
            mode,
            bright: BinDistribution::new(model.bright_bin_mean(), bright_f)?,
            dark: BinDistribution::new(model.dark_bin_mean(), model.dispersion)?,
        })
    }

    pub fn model(&self) -> &RateModel {
        self.model
    }

    /// Index of the bin containing the decay, if the trajectory has one.
    fn decay_bin(&self, traj: &Trajectory, n_bins: usize) -> Option<usize> {
        match (traj.initial_state, traj.decay_time) {
            (IonState::Dark, Some(td)) => {
                let idx = (td / self.model.bin_width).floor() as usize;
                (idx < n_bins).then_some(idx)
            }
            _ => None,
        }
    }

    /// Sample one bin given its position relative to the decay.
    pub fn sample_bin(&self, traj: &Trajectory, bin: usize, rng: &mut impl Rng) -> u32 {
        match (traj.initial_state, traj.decay_time) {
            (IonState::Bright, _) => self.bright.sample(rng),
            (IonState::Dark, None) => self.dark.sample(rng),
            (IonState::Dark, Some(td)) => {
                let start = bin as f64 * self.model.bin_width;
                let end = start + self.model.bin_width;
                if td >= end {
                    self.dark.sample(rng)
                } else if td <= start {
                    self.bright.sample(rng)
                } else {
                    // mixed bin: exact time-weighted mean, dark dispersion
                    let mean =
                        self.model.dark_rate * (td - start) + self.model.bright_rate * (end - td);
                    BinDistribution::new(mean, self.model.dispersion)
                        .expect("valid mixed-bin mean")
                        .sample(rng)
                }
            }
        }
    }

    pub fn sample_record(
        &self,
        traj: &Trajectory,
        n_bins: usize,
        detector_label: &str,
        rng: &mut impl Rng,
    ) -> CountRecord {
        assert!(n_bins >= 1, "n_bins must be >= 1");
        let decay_bin = self.decay_bin(traj, n_bins);
        let mut counts = Vec::with_capacity(n_bins);
        for i in 0..n_bins {
            // fast path: only the decay bin needs the general dispatch
            let c = match (traj.initial_state, decay_bin) {
                (IonState::Bright, _) => self.bright.sample(rng),
                (IonState::Dark, None) => self.dark.sample(rng),
                (IonState::Dark, Some(db)) => {
                    if i < db {
                        self.dark.sample(rng)
                    } else if i > db {
                        self.bright.sample(rng)
                    } else {
                        self.sample_bin(traj, i, rng)
                    }
                }
            };
            counts.push(c);
        }
        CountRecord {
            counts,
            trajectory: *traj,
            rate_model_id: String::new(),
            detector_label: detector_label.to_string(),
        }
    }

    pub fn mode(&self) -> OverdispersionMode {
        self.mode
    }
}

/// Sample a full count record for a trajectory (dark-only dispersion).
pub fn sample_counts(
    traj: &Trajectory,
    model: &RateModel,
    n_bins: usize,
    rng: &mut impl Rng,
) -> Result<CountRecord> {
    if n_bins < 1 {
        return Err(Error::invalid("n_bins must be >= 1"));
    }
    let sampler = CountSampler::new(model, OverdispersionMode::DarkOnly)?;
    Ok(sampler.sample_record(traj, n_bins, "", rng))
}

/// Per-bin pmf evaluation for whole-bin states; convenience over
/// [`stats::pmf`] with this model's parameters.
pub fn bin_pmf(model: &RateModel, state: IonState, k: u64) -> Result<f64> {
    match state {
        IonState::Bright => stats::pmf(PmfKind::Poisson, model.bright_bin_mean(), 1.0, k),
        IonState::Dark => stats::pmf(
            PmfKind::NegBinomial,
            model.dark_bin_mean(),
            model.dispersion,
            k,
        ),
    }
}
