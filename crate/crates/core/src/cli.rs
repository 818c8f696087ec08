//! Command-line front end: scenario-driven subcommands with
//! deterministic CSV outputs.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime or fit
//! failure. All CSV files open with a header comment recording the tool
//! version, the scenario hash, and the master seed, and numbers are
//! written in shortest round-trip form, so identical scenario + seed
//! give byte-identical outputs.

use crate::coherence;
use crate::error::{Error, Result};
use crate::harness::{calibrate_confidence, run_experiment, FidelityReport, REPORT_CI_LEVEL};
use crate::histfit;
use crate::optics;
use crate::presets;
use crate::rng::{trial_stream, StreamRole};
use crate::scenario::Scenario;
use crate::source::{sample_trajectory, CountSampler, IonState, Trajectory};
use crate::spad;
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable overriding the output directory (and nothing
/// else).
pub const OUTPUT_DIR_ENV: &str = "IONDET_OUTPUT_DIR";

#[derive(Parser)]
#[command(
    name = "iondet",
    version,
    about = "Trapped-ion readout simulation and inference with trap-integrated SPADs"
)]
struct Cli {
    /// Worker threads (default 1 for reproducible wall-clock behavior;
    /// results are thread-count invariant either way).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file (sectioned key = value with include support).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory (overrides the scenario; IONDET_OUTPUT_DIR
    /// overrides both).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample raw count records and write them as CSV.
    Simulate(ScenarioArgs),
    /// Error-versus-time curves for all configured discriminators, plus
    /// the adaptive summary.
    Fidelity(ScenarioArgs),
    /// Total-count histogram and its mixture fit.
    Histogram(ScenarioArgs),
    /// Collection efficiency and predicted counts versus ion offset.
    Crosstalk {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Offsets in µm as start:stop:step or a comma list.
        #[arg(long)]
        offsets: Option<String>,
    },
    /// Detector characterization utilities.
    #[command(subcommand)]
    Characterize(Characterize),
    /// Fit Rabi oscillations to the thermal-state model.
    FitRabi(ScenarioArgs),
    /// Fit mean occupation versus delay to extract the heating rate.
    FitHeating(ScenarioArgs),
    /// Preset management.
    #[command(subcommand)]
    Presets(PresetsCmd),
}

#[derive(Subcommand)]
enum Characterize {
    /// Time-to-first-pulse PDE estimate from a one-column file of
    /// seconds.
    Ttfp {
        #[arg(long)]
        input: PathBuf,
        /// Mean photon interarrival time (pulse period), seconds.
        #[arg(long)]
        period: f64,
    },
    /// Breakdown voltage from a two-column CSV (volts, amps), given
    /// directly or through a scenario's [iv] section.
    Breakdown {
        #[arg(long, conflicts_with = "scenario")]
        input: Option<PathBuf>,
        /// Scenario with an [iv] section (input_csv, current_limit_a,
        /// threshold_fraction).
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Compliance limit in amps; defaults to max |I| in the file.
        #[arg(long)]
        current_limit: Option<f64>,
        #[arg(long)]
        threshold_fraction: Option<f64>,
    },
    /// Quench and recharge RC constants from circuit values.
    Quench {
        /// Scenario supplying a [spad] section.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        r_internal: Option<f64>,
        #[arg(long)]
        r_probe: Option<f64>,
        #[arg(long)]
        r_quench: Option<f64>,
        #[arg(long)]
        c_total: Option<f64>,
    },
}

#[derive(Subcommand)]
enum PresetsCmd {
    /// List the shipped presets and their values.
    List,
}

/// Entry point used by the binary and by tests; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads > 0 {
        // ignore the error if a pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Fidelity(args) => cmd_fidelity(&args),
        Command::Histogram(args) => cmd_histogram(&args),
        Command::Crosstalk { scenario, offsets } => cmd_crosstalk(&scenario, offsets.as_deref()),
        Command::Characterize(c) => cmd_characterize(c),
        Command::FitRabi(args) => cmd_fit_rabi(&args),
        Command::FitHeating(args) => cmd_fit_heating(&args),
        Command::Presets(PresetsCmd::List) => cmd_presets_list(),
    }
}

fn load_scenario(args: &ScenarioArgs) -> Result<Scenario> {
    Scenario::load(&args.scenario)
}

fn output_dir(args: &ScenarioArgs, scenario: &Scenario) -> Result<PathBuf> {
    // data inputs resolve relative to the scenario file; outputs land
    // relative to the working directory
    let dir = std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .or_else(|| args.out.clone())
        .or_else(|| scenario.output_dir())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

struct CsvWriter {
    file: std::io::BufWriter<fs::File>,
}

impl CsvWriter {
    fn create(path: &Path, scenario: &Scenario, seed: u64) -> Result<Self> {
        let file = fs::File::create(path)?;
        let mut w = CsvWriter {
            file: std::io::BufWriter::new(file),
        };
        writeln!(
            w.file,
            "# iondet {VERSION} scenario={}:{} seed={seed}",
            scenario.name(),
            scenario.hash()
        )?;
        Ok(w)
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.file, "{}", fields.join(","))?;
        Ok(())
    }

    fn header(&mut self, cols: &[&str]) -> Result<()> {
        writeln!(self.file, "{}", cols.join(","))?;
        Ok(())
    }
}

fn f(x: f64) -> String {
    format!("{x}")
}

fn cmd_simulate(args: &ScenarioArgs) -> Result<()> {
    let scenario = load_scenario(args)?;
    let plan = scenario.experiment()?;
    scenario.finish()?;
    let dir = output_dir(args, &scenario)?;
    let config = &plan.config;
    let seed = config.master_seed;
    let n_bins = config.n_bins();

    let mut w = CsvWriter::create(&dir.join("records.csv"), &scenario, seed)?;
    w.header(&["trial", "detector", "initial_state", "decay_time_s", "bin", "count"])?;
    let spad_sampler = CountSampler::new(&config.spad.rates, config.overdispersion)?;
    let pmt_sampler = match &config.pmt {
        Some(p) => Some(CountSampler::new(&p.rates, config.overdispersion)?),
        None => None,
    };
    for trial in 0..config.n_trials {
        let mut trng = trial_stream(seed, trial, StreamRole::Trajectory);
        let bright = trng.random::<f64>() < config.prep_bright_probability;
        let traj = if bright {
            Trajectory::bright()
        } else {
            sample_trajectory(
                IonState::Dark,
                config.spad.rates.decay_rate,
                config.window,
                &mut trng,
            )?
        };
        let mut emit = |detector: &str, sampler: &CountSampler, role: StreamRole| -> Result<()> {
            let mut rng = trial_stream(seed, trial, role);
            let rec = sampler.sample_record(&traj, n_bins, detector, &mut rng);
            for (bin, c) in rec.counts.iter().enumerate() {
                w.row(&[
                    trial.to_string(),
                    detector.to_string(),
                    traj.initial_state.label().to_string(),
                    traj.decay_time.map_or("-".to_string(), f),
                    bin.to_string(),
                    c.to_string(),
                ])?;
            }
            Ok(())
        };
        emit("spad", &spad_sampler, StreamRole::SpadCounts)?;
        if let Some(p) = &pmt_sampler {
            emit("pmt", p, StreamRole::PmtCounts)?;
        }
    }
    println!(
        "wrote {} ({} trials x {} bins)",
        dir.join("records.csv").display(),
        config.n_trials,
        n_bins
    );
    Ok(())
}

fn cmd_fidelity(args: &ScenarioArgs) -> Result<()> {
    let scenario = load_scenario(args)?;
    let plan = scenario.experiment()?;
    scenario.finish()?;
    let dir = output_dir(args, &scenario)?;
    let mut config = plan.config;
    let seed = config.master_seed;

    let mut calibrated: Option<(f64, f64)> = None; // (confidence, target)
    if let Some(adaptive) = &plan.adaptive {
        let mut cal_cfg = config.clone();
        cal_cfg.adaptive_max_bins = adaptive.max_bins;
        let confidence = match adaptive.confidence {
            Some(c) => c,
            None => {
                let trials = config.n_trials.clamp(10_000, 300_000);
                let c = calibrate_confidence(&cal_cfg, adaptive.target_mean_error, trials, 14)?;
                calibrated = Some((c, adaptive.target_mean_error));
                c
            }
        };
        let mut confidences = vec![confidence];
        confidences.extend(adaptive.sweep.iter().copied());
        config.adaptive_confidences = confidences;
        config.adaptive_max_bins = adaptive.max_bins;
    }

    let report = run_experiment(&config)?;
    write_fidelity_csv(&dir.join("fidelity.csv"), &scenario, seed, &report)?;
    if !report.adaptive.is_empty() {
        write_adaptive_csv(&dir.join("adaptive.csv"), &scenario, seed, &report)?;
    }

    // summary block
    let mut summary = String::new();
    summary.push_str(&format!("n_trials = {}\n", report.n_trials));
    summary.push_str(&format!(
        "prepared_bright_fraction = {}\n",
        report.n_bright as f64 / report.n_trials as f64
    ));
    summary.push_str(&format!("epsilon_pmt = {}\n", report.epsilon_pmt));
    summary.push_str(&format!("pmt_referenced = {}\n", report.pmt_referenced));
    if let Some((c, target)) = calibrated {
        summary.push_str(&format!("calibrated_confidence = {c}\n"));
        summary.push_str(&format!("calibration_target_mean_error = {target}\n"));
    }
    if let Some(a) = report.adaptive.first() {
        summary.push_str(&format!(
            "adaptive_mean_detection_time_s = {}\n",
            a.mean_detection_time
        ));
        summary.push_str(&format!("adaptive_mean_error = {}\n", a.mean_error));
        summary.push_str(&format!(
            "adaptive_reported_infidelity = {}\n",
            a.reported_infidelity
        ));
    }
    if let Some(p) = report.points.last() {
        for m in &p.methods {
            summary.push_str(&format!(
                "{}_mean_error_at_{}_bins = {}\n",
                m.method, p.bins, m.mean_error
            ));
        }
    }
    if report.joint.pmt_decay_errors > 0 {
        summary.push_str(&format!(
            "joint_spad_error_given_pmt_decay_error = {}\n",
            report.joint.both_err as f64 / report.joint.pmt_decay_errors as f64
        ));
    }
    fs::write(dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn write_fidelity_csv(
    path: &Path,
    scenario: &Scenario,
    seed: u64,
    report: &FidelityReport,
) -> Result<()> {
    let mut w = CsvWriter::create(path, scenario, seed)?;
    let mut cols = vec!["bins".to_string(), "time_us".to_string()];
    if let Some(p0) = report.points.first() {
        for m in &p0.methods {
            for suffix in [
                "eps_bright",
                "eps_dark",
                "mean_error",
                "ci_lo",
                "ci_hi",
                "disagreement",
                "reported_infidelity",
                "threshold",
            ] {
                cols.push(format!("{}_{suffix}", m.method));
            }
        }
    }
    cols.push("pmt_mean_error".to_string());
    w.row(&cols)?;
    for p in &report.points {
        let mut row = vec![p.bins.to_string(), f(p.detect_time * 1e6)];
        for m in &p.methods {
            row.push(f(m.eps_bright));
            row.push(f(m.eps_dark));
            row.push(f(m.mean_error));
            row.push(f(m.mean_error_ci.0));
            row.push(f(m.mean_error_ci.1));
            row.push(f(m.disagreement_rate));
            row.push(f(m.reported_infidelity));
            row.push(m.threshold.map_or("-".to_string(), f));
        }
        row.push(p.pmt_mean_error.map_or("-".to_string(), f));
        w.row(&row)?;
    }
    Ok(())
}

fn write_adaptive_csv(
    path: &Path,
    scenario: &Scenario,
    seed: u64,
    report: &FidelityReport,
) -> Result<()> {
    let mut w = CsvWriter::create(path, scenario, seed)?;
    w.header(&[
        "confidence",
        "mean_time_us",
        "eps_bright",
        "eps_dark",
        "mean_error",
        "ci_lo",
        "ci_hi",
        "disagreement",
        "reported_infidelity",
        "stopped_by_confidence_fraction",
    ])?;
    for a in &report.adaptive {
        w.row(&[
            f(a.confidence),
            f(a.mean_detection_time * 1e6),
            f(a.eps_bright),
            f(a.eps_dark),
            f(a.mean_error),
            f(a.mean_error_ci.0),
            f(a.mean_error_ci.1),
            f(a.disagree as f64 / report.n_trials as f64),
            f(a.reported_infidelity),
            f(a.stopped_by_confidence as f64 / report.n_trials as f64),
        ])?;
    }
    Ok(())
}

fn cmd_histogram(args: &ScenarioArgs) -> Result<()> {
    let scenario = load_scenario(args)?;
    let plan = scenario.experiment()?;
    scenario.finish()?;
    let dir = output_dir(args, &scenario)?;
    let config = &plan.config;
    let seed = config.master_seed;
    let n_bins = config.n_bins();
    let sampler = CountSampler::new(&config.spad.rates, config.overdispersion)?;

    let mut hist: Vec<u64> = vec![0];
    for trial in 0..config.n_trials {
        let mut trng = trial_stream(seed, trial, StreamRole::Trajectory);
        let bright = trng.random::<f64>() < config.prep_bright_probability;
        let traj = if bright {
            Trajectory::bright()
        } else {
            sample_trajectory(
                IonState::Dark,
                config.spad.rates.decay_rate,
                config.window,
                &mut trng,
            )?
        };
        let mut crng = trial_stream(seed, trial, StreamRole::SpadCounts);
        let rec = sampler.sample_record(&traj, n_bins, "spad", &mut crng);
        let total = rec.total() as usize;
        if total >= hist.len() {
            hist.resize(total + 1, 0);
        }
        hist[total] += 1;
    }

    let mut w = CsvWriter::create(&dir.join("histogram.csv"), &scenario, seed)?;
    w.header(&["count", "frequency"])?;
    for (k, &n) in hist.iter().enumerate() {
        w.row(&[k.to_string(), n.to_string()])?;
    }

    let fit = histfit::fit_histogram(&hist, config.window, config.spad.rates.bin_width)?;
    let mut text = String::new();
    text.push_str(&format!("bright_weight = {} +- {}\n", fit.bright_weight, fit.errors.bright_weight));
    text.push_str(&format!("bright_mean_counts = {} +- {}\n", fit.bright_mean, fit.errors.bright_mean));
    text.push_str(&format!("dark_mean_counts = {} +- {}\n", fit.dark_mean, fit.errors.dark_mean));
    match fit.dispersion {
        Some(d) => text.push_str(&format!("dispersion = {d} +- {}\n", fit.errors.dispersion)),
        None => text.push_str("dispersion = unidentifiable (no dark weight)\n"),
    }
    text.push_str(&format!("decay_rate_hz = {} +- {}\n", fit.decay_rate, fit.errors.decay_rate));
    text.push_str(&format!("chi2_per_dof = {}\n", fit.goodness));
    text.push_str(&format!("iterations = {}\n", fit.iterations));
    fs::write(dir.join("fit.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_crosstalk(args: &ScenarioArgs, offsets_override: Option<&str>) -> Result<()> {
    let scenario = load_scenario(args)?;
    let stack = scenario.geometry()?;
    let seed = scenario.master_seed()?;
    let offsets = scenario.offsets(offsets_override)?;
    let n_rays = scenario.get_u64("geometry", "n_rays")?.unwrap_or(200_000);
    let anchor = scenario.get_f64("geometry", "anchor_kcps")?.map(|k| k * 1e3);
    let scatter = scenario
        .get_f64("geometry", "scatter_rate_cps")?
        .unwrap_or(8.5e6);
    let pde = match scenario.get_f64("geometry", "pde")? {
        Some(p) => p,
        None => scenario
            .spad_params()?
            .map(|p| p.pde)
            .unwrap_or(0.35),
    };
    scenario.finish()?;
    let dir = output_dir(args, &scenario)?;

    let curve = optics::crosstalk_curve(&offsets, &stack, n_rays, scatter, pde, anchor, seed)?;
    let norm = curve.normalized();
    let mut w = CsvWriter::create(&dir.join("crosstalk.csv"), &scenario, seed)?;
    w.header(&["offset_um", "fraction", "stderr", "normalized", "predicted_kcps"])?;
    for (p, (_, n)) in curve.points.iter().zip(&norm) {
        w.row(&[
            f(p.offset * 1e6),
            f(p.collection_fraction),
            f(p.std_error),
            f(*n),
            f(p.predicted_rate / 1e3),
        ])?;
    }
    println!(
        "wrote {} ({} offsets, {} rays each)",
        dir.join("crosstalk.csv").display(),
        offsets.len(),
        n_rays
    );
    Ok(())
}

fn cmd_characterize(cmd: Characterize) -> Result<()> {
    match cmd {
        Characterize::Ttfp { input, period } => {
            let text = fs::read_to_string(&input)?;
            let mut samples = Vec::new();
            for line in text.lines() {
                let lineparsed = line.split(',').next().unwrap_or("").trim();
                if lineparsed.is_empty() || lineparsed.starts_with('#') {
                    continue;
                }
                match lineparsed.parse::<f64>() {
                    Ok(v) => samples.push(v),
                    Err(_) if samples.is_empty() => continue, // header
                    Err(_) => {
                        return Err(Error::invalid(format!(
                            "ttfp input: expected a number, got {lineparsed}"
                        )))
                    }
                }
            }
            let est = spad::estimate_pde_ttfp(&samples, period)?;
            let z = crate::stats::normal_two_sided_z(REPORT_CI_LEVEL);
            println!("pde = {} +- {}", est.pde, est.std_error);
            println!(
                "ci68 = [{}, {}]",
                est.pde - z * est.std_error,
                est.pde + z * est.std_error
            );
            Ok(())
        }
        Characterize::Breakdown {
            input,
            scenario,
            current_limit,
            threshold_fraction,
        } => {
            let (path, limit, fraction) = match (input, scenario) {
                (Some(path), None) => (path, current_limit, threshold_fraction.unwrap_or(0.5)),
                (None, Some(sc)) => {
                    let s = Scenario::load(&sc)?;
                    let input = s.get_str("iv", "input_csv").ok_or_else(|| {
                        Error::invalid("scenario is missing [iv] input_csv")
                    })?;
                    let limit = current_limit.or(s.get_f64("iv", "current_limit_a")?);
                    let fraction = threshold_fraction
                        .or(s.get_f64("iv", "threshold_fraction")?)
                        .unwrap_or(0.5);
                    let _ = s.name();
                    let _ = s.output_dir();
                    s.finish()?;
                    (s.resolve_path(&input), limit, fraction)
                }
                _ => {
                    return Err(Error::invalid(
                        "characterize breakdown needs exactly one of --input or --scenario",
                    ))
                }
            };
            let text = fs::read_to_string(&path)?;
            let curve = spad::IvCurve::from_csv(&text, limit)?;
            let v = spad::breakdown_voltage(&curve, fraction)?;
            println!("breakdown_voltage_v = {v}");
            Ok(())
        }
        Characterize::Quench {
            scenario,
            r_internal,
            r_probe,
            r_quench,
            c_total,
        } => {
            let params = match scenario {
                Some(path) => {
                    let s = Scenario::load(&path)?;
                    let p = s
                        .spad_params()?
                        .ok_or_else(|| Error::invalid("scenario has no [spad] section"))?;
                    s.allow_section("rates.spad");
                    s.allow_section("");
                    p
                }
                None => {
                    let mut p = presets::spad_params("paper-passive").expect("builtin preset");
                    if let Some(v) = r_internal {
                        p.r_internal = v;
                    }
                    if let Some(v) = r_probe {
                        p.r_probe = v;
                    }
                    if let Some(v) = r_quench {
                        p.r_quench = v;
                    }
                    if let Some(v) = c_total {
                        p.c_total = v;
                    }
                    p
                }
            };
            let (quench, recharge) = spad::quench_time_constants(&params)?;
            println!("quench_tau_s = {quench}");
            println!("recharge_tau_s = {recharge}");
            Ok(())
        }
    }
}

/// Three-column CSV: abscissa, value, sigma. Units per caller.
fn read_three_column_csv(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() < 3 {
            if out.is_empty() {
                continue;
            }
            return Err(Error::invalid(format!("expected 3 columns, got {line}")));
        }
        match (
            cols[0].parse::<f64>(),
            cols[1].parse::<f64>(),
            cols[2].parse::<f64>(),
        ) {
            (Ok(a), Ok(b), Ok(c)) => out.push((a, b, c)),
            _ if out.is_empty() => continue, // header row
            _ => return Err(Error::invalid(format!("bad numeric row: {line}"))),
        }
    }
    Ok(out)
}

fn cmd_fit_rabi(args: &ScenarioArgs) -> Result<()> {
    let scenario = load_scenario(args)?;
    let input = scenario
        .get_str("coherence", "input_csv")
        .ok_or_else(|| Error::invalid("scenario is missing [coherence] input_csv"))?;
    let wavelength = scenario
        .get_f64("coherence", "wavelength_nm")?
        .unwrap_or(674.0)
        * 1e-9;
    let mass = scenario.get_f64("coherence", "mass_u")?.unwrap_or(88.0) * coherence::ATOMIC_MASS;
    let mode_freq = scenario
        .get_f64("coherence", "mode_frequency_hz")?
        .unwrap_or(5e6);
    let angle = scenario
        .get_f64("coherence", "projection_angle_rad")?
        .unwrap_or(0.0);
    scenario.allow_section("heating");
    scenario.finish()?;
    let dir = output_dir(args, &scenario)?;

    let omega_mode = 2.0 * std::f64::consts::PI * mode_freq;
    let eta = coherence::lamb_dicke(wavelength, angle, mass, omega_mode);
    // data columns: t_us, p_bright, sigma
    let raw = read_three_column_csv(&scenario.resolve_path(&input))?;
    let data: Vec<(f64, f64, f64)> = raw
        .iter()
        .map(|&(t_us, p, s)| (t_us * 1e-6, p, s))
        .collect();
    let fit = coherence::fit_rabi(&data, eta)?;

    let mut text = String::new();
    text.push_str(&format!(
        "rabi_frequency_hz = {} +- {}\n",
        fit.rabi_frequency.value / (2.0 * std::f64::consts::PI),
        fit.rabi_frequency.std_error / (2.0 * std::f64::consts::PI)
    ));
    text.push_str(&format!(
        "nbar = {} +- {}\n",
        fit.nbar.value, fit.nbar.std_error
    ));
    text.push_str(&format!(
        "contrast = {} +- {}\n",
        fit.contrast.value, fit.contrast.std_error
    ));
    text.push_str(&format!("lamb_dicke = {}\n", fit.lamb_dicke));
    text.push_str(&format!("chi2 = {}\n", fit.chi2));
    text.push_str(&format!("dof = {}\n", fit.dof));
    fs::write(dir.join("rabi-fit.txt"), &text)?;
    print!("{text}");

    // residuals for plotting
    let seed = scenario.master_seed().unwrap_or(0);
    let params = fit.params(omega_mode);
    let mut w = CsvWriter::create(&dir.join("rabi-residuals.csv"), &scenario, seed)?;
    w.header(&["t_us", "p_bright", "model", "residual", "sigma"])?;
    for &(t, y, s) in &data {
        let m = coherence::rabi_thermal(t, &params);
        w.row(&[f(t * 1e6), f(y), f(m), f(y - m), f(s)])?;
    }
    Ok(())
}

fn cmd_fit_heating(args: &ScenarioArgs) -> Result<()> {
    let scenario = load_scenario(args)?;
    let input = scenario
        .get_str("heating", "input_csv")
        .ok_or_else(|| Error::invalid("scenario is missing [heating] input_csv"))?;
    scenario.allow_section("coherence");
    scenario.finish()?;
    let dir = output_dir(args, &scenario)?;

    // data columns: delay_ms, nbar, sigma
    let raw = read_three_column_csv(&scenario.resolve_path(&input))?;
    let points: Vec<(f64, f64, f64)> = raw
        .iter()
        .map(|&(ms, n, s)| (ms * 1e-3, n, s))
        .collect();
    let fit = coherence::fit_heating(&points)?;
    let mut text = String::new();
    text.push_str(&format!(
        "heating_rate_quanta_per_s = {} +- {}\n",
        fit.rate, fit.rate_std_error
    ));
    text.push_str(&format!(
        "heating_rate_quanta_per_ms = {} +- {}\n",
        fit.rate * 1e-3,
        fit.rate_std_error * 1e-3
    ));
    text.push_str(&format!(
        "intercept_quanta = {} +- {}\n",
        fit.intercept, fit.intercept_std_error
    ));
    fs::write(dir.join("heating-fit.txt"), &text)?;
    print!("{text}");

    let seed = scenario.master_seed().unwrap_or(0);
    let mut w = CsvWriter::create(&dir.join("heating-residuals.csv"), &scenario, seed)?;
    w.header(&["delay_ms", "nbar", "model", "residual", "sigma"])?;
    for &(t, n, s) in &points {
        let m = fit.intercept + fit.rate * t;
        w.row(&[f(t * 1e3), f(n), f(m), f(n - m), f(s)])?;
    }
    Ok(())
}

fn cmd_presets_list() -> Result<()> {
    for (name, has_rates, has_spad) in presets::list() {
        let mut kinds = Vec::new();
        if has_rates {
            kinds.push("rates");
        }
        if has_spad {
            kinds.push("spad");
        }
        println!("{name} ({})", kinds.join("+"));
        if let Some(body) = presets::rate_preset_body(name) {
            for line in body.lines().filter(|l| !l.trim_start().starts_with('#')) {
                if !line.trim().is_empty() {
                    println!("  rates.{line}");
                }
            }
        }
        if let Some(body) = presets::spad_preset_body(name) {
            for line in body.lines().filter(|l| !l.trim_start().starts_with('#')) {
                if !line.trim().is_empty() {
                    println!("  spad.{line}");
                }
            }
        }
    }
    Ok(())
}

