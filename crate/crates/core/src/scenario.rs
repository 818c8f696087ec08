//! Scenario files: plain-text sectioned key = value with `include`
//! support and named presets.
//!
//! ```text
//! # comment
//! name = fig3
//! master_seed = 20210515
//! output_dir = out/fig3
//!
//! include presets/common.scn
//!
//! [rates.spad]
//! preset = paper-passive
//! dispersion = 1.2          # later assignments override earlier ones
//! ```
//!
//! Unknown keys are rejected with their file position. Every referenced
//! preset must resolve. Seeds are mandatory for simulation subcommands.

use crate::error::{Error, Result};
use crate::harness::{DetectorConfig, EpsilonPmt, ExperimentConfig, ScanMethod};
use crate::optics::{GeometryStack, Layer};
use crate::presets;
use crate::source::{OverdispersionMode, RateModel};
use crate::spad::SpadParams;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pos {
    pub file: String,
    pub line: usize,
}

impl Pos {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::config(self.file.clone(), self.line, msg)
    }
}

/// A parsed scenario: every `[section] key = value` entry with its
/// source position, plus consumption tracking for unknown-key rejection.
#[derive(Debug, Clone)]
pub struct Scenario {
    entries: BTreeMap<(String, String), (String, Pos)>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<(String, String)>>,
    hash: String,
    base_dir: Option<PathBuf>,
}

const MAX_INCLUDE_DEPTH: usize = 16;

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        parse_file(path, &mut entries, 0)?;
        let mut s = Self::from_entries(entries);
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    /// Parse from a string (tests and embedded presets).
    pub fn from_str(text: &str, virtual_name: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        parse_text(text, virtual_name, None, &mut entries, 0)?;
        Ok(Self::from_entries(entries))
    }

    /// Resolve a path value relative to the scenario file's directory.
    pub fn resolve_path(&self, value: &str) -> PathBuf {
        let p = PathBuf::from(value);
        if p.is_absolute() {
            return p;
        }
        match &self.base_dir {
            Some(d) => d.join(p),
            None => p,
        }
    }

    fn from_entries(entries: BTreeMap<(String, String), (String, Pos)>) -> Self {
        let mut hasher = Sha256::new();
        for ((section, key), (value, _)) in &entries {
            hasher.update(section.as_bytes());
            hasher.update(b".");
            hasher.update(key.as_bytes());
            hasher.update(b"=");
            hasher.update(value.as_bytes());
            hasher.update(b"\n");
        }
        let hash = hex_prefix(&hasher.finalize(), 12);
        Scenario {
            entries,
            consumed: Default::default(),
            hash,
            base_dir: None,
        }
    }

    /// Hash of the fully resolved content (stable across include layout).
    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn get_raw(&self, section: &str, key: &str) -> Option<&(String, Pos)> {
        let k = (section.to_string(), key.to_string());
        let v = self.entries.get(&k);
        if v.is_some() {
            self.consumed.borrow_mut().insert(k);
        }
        v
    }

    pub fn get_str(&self, section: &str, key: &str) -> Option<String> {
        self.get_raw(section, key).map(|(v, _)| v.clone())
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<Option<f64>> {
        match self.get_raw(section, key) {
            None => Ok(None),
            Some((v, pos)) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| pos.err(format!("key {key}: expected a number, got {v}"))),
        }
    }

    pub fn get_u64(&self, section: &str, key: &str) -> Result<Option<u64>> {
        match self.get_raw(section, key) {
            None => Ok(None),
            Some((v, pos)) => v
                .parse::<u64>()
                .map(Some)
                .map_err(|_| pos.err(format!("key {key}: expected an integer, got {v}"))),
        }
    }

    pub fn get_bool(&self, section: &str, key: &str) -> Result<Option<bool>> {
        match self.get_raw(section, key) {
            None => Ok(None),
            Some((v, pos)) => match v.as_str() {
                "on" | "true" | "yes" => Ok(Some(true)),
                "off" | "false" | "no" => Ok(Some(false)),
                other => Err(pos.err(format!("key {key}: expected on/off, got {other}"))),
            },
        }
    }

    fn pos_of(&self, section: &str, key: &str) -> Pos {
        self.entries
            .get(&(section.to_string(), key.to_string()))
            .map(|(_, p)| p.clone())
            .unwrap_or(Pos {
                file: "<scenario>".into(),
                line: 0,
            })
    }

    pub fn require_f64(&self, section: &str, key: &str) -> Result<f64> {
        self.get_f64(section, key)?.ok_or_else(|| {
            Error::invalid(format!("scenario is missing [{section}] {key}"))
        })
    }

    /// Seed is mandatory for every simulation subcommand.
    pub fn master_seed(&self) -> Result<u64> {
        self.get_u64("", "master_seed")?
            .ok_or_else(|| Error::invalid("scenario is missing master_seed"))
    }

    pub fn name(&self) -> String {
        self.get_str("", "name").unwrap_or_else(|| "scenario".into())
    }

    pub fn output_dir(&self) -> Option<PathBuf> {
        self.get_str("", "output_dir").map(PathBuf::from)
    }

    /// Rate model from a `[rates.*]` section: preset base plus explicit
    /// overrides.
    pub fn rate_model(&self, section: &str) -> Result<Option<RateModel>> {
        let preset = self.get_str(section, "preset");
        let mut model = match &preset {
            Some(name) => Some(presets::rate_model(name).ok_or_else(|| {
                self.pos_of(section, "preset")
                    .err(format!("unknown rates preset {name}"))
            })?),
            None => None,
        };
        let has_any = self
            .entries
            .keys()
            .any(|(s, _)| s == section);
        if model.is_none() && !has_any {
            return Ok(None);
        }
        let mut m = model.take().unwrap_or(RateModel {
            bright_rate: 0.0,
            dark_rate: 0.0,
            background_breakdown: vec![],
            bin_width: 0.0,
            decay_rate: 0.0,
            dispersion: 1.0,
        });
        if let Some(v) = self.get_f64(section, "bright_rate_cps")? {
            m.bright_rate = v;
        }
        if let Some(v) = self.get_f64(section, "dark_rate_cps")? {
            m.dark_rate = v;
        }
        if let Some(v) = self.get_f64(section, "bin_width_s")? {
            m.bin_width = v;
        }
        if let Some(v) = self.get_f64(section, "decay_rate_hz")? {
            m.decay_rate = v;
        }
        if let Some(v) = self.get_f64(section, "dispersion")? {
            m.dispersion = v;
        }
        // named background contributions
        let bg_keys: Vec<String> = self
            .entries
            .keys()
            .filter(|(s, k)| s == section && k.starts_with("background.") && k.ends_with("_cps"))
            .map(|(_, k)| k.clone())
            .collect();
        for key in bg_keys {
            let v = self.get_f64(section, &key)?.unwrap();
            let name = key
                .strip_prefix("background.")
                .and_then(|k| k.strip_suffix("_cps"))
                .unwrap()
                .to_string();
            if let Some(slot) = m.background_breakdown.iter_mut().find(|(n, _)| *n == name) {
                slot.1 = v;
            } else {
                m.background_breakdown.push((name, v));
            }
        }
        let tolerance = self
            .get_f64(section, "background_tolerance")?
            .unwrap_or(RateModel::DEFAULT_BACKGROUND_TOLERANCE);
        m.validate_with_tolerance(tolerance)
            .map_err(|e| Error::invalid(format!("[{section}]: {e}")))?;
        Ok(Some(m))
    }

    /// SPAD device parameters from `[spad]`.
    pub fn spad_params(&self) -> Result<Option<SpadParams>> {
        let section = "spad";
        let preset = self.get_str(section, "preset");
        let mut params = match &preset {
            Some(name) => Some(presets::spad_params(name).ok_or_else(|| {
                self.pos_of(section, "preset")
                    .err(format!("unknown spad preset {name}"))
            })?),
            None => None,
        };
        let has_any = self.entries.keys().any(|(s, _)| s == section);
        if params.is_none() && !has_any {
            return Ok(None);
        }
        let mut p = params.take().unwrap_or(SpadParams {
            breakdown_voltage: 0.0,
            overbias: 0.0,
            pde: 0.0,
            dcr: 0.0,
            quench_tau: 0.0,
            recharge_tau: 0.0,
            effective_dead_time: 0.0,
            r_internal: 0.0,
            r_probe: 0.0,
            r_quench: 0.0,
            c_total: 0.0,
        });
        let set = |field: &mut f64, key: &str| -> Result<()> {
            if let Some(v) = self.get_f64(section, key)? {
                *field = v;
            }
            Ok(())
        };
        set(&mut p.breakdown_voltage, "breakdown_voltage_v")?;
        set(&mut p.overbias, "overbias_v")?;
        set(&mut p.pde, "pde")?;
        set(&mut p.dcr, "dcr_cps")?;
        set(&mut p.quench_tau, "quench_tau_s")?;
        set(&mut p.recharge_tau, "recharge_tau_s")?;
        set(&mut p.effective_dead_time, "effective_dead_time_s")?;
        set(&mut p.r_internal, "r_internal_ohm")?;
        set(&mut p.r_probe, "r_probe_ohm")?;
        set(&mut p.r_quench, "r_quench_ohm")?;
        set(&mut p.c_total, "c_total_f")?;
        p.validate()?;
        Ok(Some(p))
    }

    /// Experiment plus discriminator configuration for the fidelity and
    /// histogram subcommands.
    pub fn experiment(&self) -> Result<ExperimentPlan> {
        let spad_rates = self
            .rate_model("rates.spad")?
            .ok_or_else(|| Error::invalid("scenario is missing [rates.spad]"))?;
        let seed = self.master_seed()?;
        let window = self.require_f64("experiment", "window_s")?;
        let n_trials = self
            .get_u64("experiment", "n_trials")?
            .ok_or_else(|| Error::invalid("scenario is missing [experiment] n_trials"))?;

        let mut config = ExperimentConfig::new(spad_rates, window, n_trials, seed);
        if let Some(v) = self.get_f64("experiment", "prep_bright_probability")? {
            config.prep_bright_probability = v;
        }
        if let Some(v) = self.get_u64("experiment", "scan_stride")? {
            config.scan_stride = v as usize;
        }
        if let Some(v) = self.get_str("experiment", "overdispersion") {
            config.overdispersion = match v.as_str() {
                "dark-only" => OverdispersionMode::DarkOnly,
                "both" => OverdispersionMode::Both,
                other => {
                    return Err(self
                        .pos_of("experiment", "overdispersion")
                        .err(format!("expected dark-only or both, got {other}")))
                }
            };
        }
        if let Some(v) = self.get_str("experiment", "epsilon_pmt") {
            config.epsilon_pmt = if v == "simulate" {
                EpsilonPmt::Simulate
            } else {
                EpsilonPmt::Constant(v.parse::<f64>().map_err(|_| {
                    self.pos_of("experiment", "epsilon_pmt")
                        .err(format!("expected a number or 'simulate', got {v}"))
                })?)
            };
        }
        let pmt_on = self.get_bool("experiment", "pmt")?.unwrap_or(false);
        if pmt_on {
            let rates = self
                .rate_model("rates.pmt")?
                .ok_or_else(|| Error::invalid("pmt = on requires [rates.pmt]"))?;
            let mut det = DetectorConfig::new(rates);
            if let Some(v) = self.get_f64("discriminator.pmt", "prior_bright")? {
                det.prior_bright = v;
            }
            if let Some(v) = self.get_f64("discriminator.pmt", "dispersion")? {
                det.dispersion = Some(v);
            }
            config.pmt = Some(det);
        }

        // discriminator.spad
        let dsec = "discriminator.spad";
        if let Some(v) = self.get_f64(dsec, "prior_bright")? {
            config.spad.prior_bright = v;
        }
        if let Some(v) = self.get_f64(dsec, "dispersion")? {
            config.spad.dispersion = Some(v);
        }
        let methods_str = self
            .get_str(dsec, "methods")
            .unwrap_or_else(|| "threshold,mle,adaptive".into());
        let mut scan_methods = Vec::new();
        let mut adaptive = None;
        for raw in methods_str.split(',') {
            match raw.trim() {
                "threshold" => {
                    let t = match self.get_str(dsec, "threshold") {
                        None => None,
                        Some(v) if v == "auto" => None,
                        Some(v) => Some(v.parse::<f64>().map_err(|_| {
                            self.pos_of(dsec, "threshold")
                                .err(format!("expected a number or 'auto', got {v}"))
                        })?),
                    };
                    scan_methods.push(ScanMethod::Threshold(t));
                }
                "mle" => scan_methods.push(ScanMethod::Mle),
                "adaptive" => {
                    let confidence = match self.get_str(dsec, "confidence") {
                        None => None,
                        Some(v) if v == "auto" => None,
                        Some(v) => Some(v.parse::<f64>().map_err(|_| {
                            self.pos_of(dsec, "confidence")
                                .err(format!("expected a number or 'auto', got {v}"))
                        })?),
                    };
                    let max_bins = self
                        .get_u64(dsec, "max_bins")?
                        .unwrap_or(config.n_bins() as u64) as usize;
                    let target = self.get_f64(dsec, "target_mean_error")?.unwrap_or(8e-4);
                    let sweep = match self.get_str(dsec, "confidence_sweep") {
                        None => vec![],
                        Some(list) => {
                            let mut out = Vec::new();
                            for item in list.split(',') {
                                out.push(item.trim().parse::<f64>().map_err(|_| {
                                    self.pos_of(dsec, "confidence_sweep")
                                        .err(format!("bad confidence {item}"))
                                })?);
                            }
                            out
                        }
                    };
                    adaptive = Some(AdaptivePlan {
                        confidence,
                        target_mean_error: target,
                        max_bins,
                        sweep,
                    });
                }
                other => {
                    return Err(self
                        .pos_of(dsec, "methods")
                        .err(format!("unknown method {other}")))
                }
            }
        }
        config.scan_methods = scan_methods;
        Ok(ExperimentPlan { config, adaptive })
    }

    /// Geometry from `[geometry]`, defaulting to the fabricated stack.
    pub fn geometry(&self) -> Result<GeometryStack> {
        let section = "geometry";
        let mut stack = GeometryStack::paper_default();
        if let Some(v) = self.get_f64(section, "ion_height_um")? {
            stack.ion_height = v * 1e-6;
        }
        if let Some(v) = self.get_f64(section, "spad_active_um")? {
            stack.spad_active_diameter = v * 1e-6;
        }
        if let Some(v) = self.get_f64(section, "lateral_offset_um")? {
            stack.lateral_offset = v * 1e-6;
        }
        if let Some(v) = self.get_bool(section, "fresnel")? {
            stack.fresnel = v;
        }
        if let Some(v) = self.get_bool(section, "reflections")? {
            stack.reflections = v;
        }
        if let Some(spec) = self.get_str(section, "layers") {
            stack.layers = parse_layers(&spec).map_err(|e| {
                self.pos_of(section, "layers").err(e)
            })?;
        }
        stack.validate()?;
        Ok(stack)
    }

    /// Offsets for the crosstalk scan: `start:stop:step` in µm.
    pub fn offsets(&self, cli_override: Option<&str>) -> Result<Vec<f64>> {
        let spec = match cli_override {
            Some(s) => Some(s.to_string()),
            None => self.get_str("geometry", "offsets_um"),
        };
        let spec = spec.unwrap_or_else(|| "0:480:24".into());
        parse_offsets(&spec).map_err(Error::invalid)
    }

    /// Reject any keys that no consumer asked for. The top-level
    /// identity keys (name, master_seed, output_dir) are always allowed:
    /// not every subcommand needs them.
    pub fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let mut unknown = Vec::new();
        for ((section, key), (_, pos)) in &self.entries {
            if section.is_empty() && matches!(key.as_str(), "name" | "master_seed" | "output_dir")
            {
                continue;
            }
            if !consumed.contains(&(section.clone(), key.clone())) {
                let loc = if section.is_empty() {
                    key.clone()
                } else {
                    format!("[{section}] {key}")
                };
                unknown.push(format!("{}:{}: unknown key {loc}", pos.file, pos.line));
            }
        }
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "unknown scenario keys:\n  {}",
                unknown.join("\n  ")
            )))
        }
    }

    /// Mark a whole section as consumed (sections meant for other tools).
    pub fn allow_section(&self, section: &str) {
        let mut consumed = self.consumed.borrow_mut();
        for (s, k) in self.entries.keys() {
            if s == section {
                consumed.insert((s.clone(), k.clone()));
            }
        }
    }
}

/// Experiment plus the adaptive-readout plan parsed from the scenario.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub config: ExperimentConfig,
    pub adaptive: Option<AdaptivePlan>,
}

#[derive(Debug, Clone)]
pub struct AdaptivePlan {
    /// Explicit confidence; `None` means calibrate against the target.
    pub confidence: Option<f64>,
    pub target_mean_error: f64,
    pub max_bins: usize,
    /// Extra confidences to evaluate for the error-versus-time curve.
    pub sweep: Vec<f64>,
}

fn parse_file(
    path: &Path,
    entries: &mut BTreeMap<(String, String), (String, Pos)>,
    depth: usize,
) -> Result<()> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(Error::invalid(format!(
            "include depth exceeds {MAX_INCLUDE_DEPTH} at {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::invalid(format!("cannot read scenario {}: {e}", path.display()))
    })?;
    let dir = path.parent().map(Path::to_path_buf);
    parse_text(&text, &path.display().to_string(), dir.as_deref(), entries, depth)
}

fn parse_text(
    text: &str,
    file_name: &str,
    dir: Option<&Path>,
    entries: &mut BTreeMap<(String, String), (String, Pos)>,
    depth: usize,
) -> Result<()> {
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let pos = Pos {
            file: file_name.to_string(),
            line: i + 1,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("include") {
            let rest = rest.trim().trim_matches('"');
            if rest.is_empty() {
                return Err(pos.err("include needs a path"));
            }
            if let Some(name) = rest.strip_prefix("preset:") {
                let body = presets::raw_preset(name)
                    .ok_or_else(|| pos.err(format!("unknown preset include {name}")))?;
                parse_text(&body, &format!("preset:{name}"), None, entries, depth + 1)?;
            } else {
                let inc = match dir {
                    Some(d) => d.join(rest),
                    None => PathBuf::from(rest),
                };
                parse_file(&inc, entries, depth + 1)?;
            }
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| pos.err("unterminated section header"))?;
            section = name.trim().to_string();
            if section.is_empty() {
                return Err(pos.err("empty section name"));
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| pos.err("expected key = value"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(pos.err("empty key"));
        }
        let value = value.trim().trim_matches('"').to_string();
        // later assignments override earlier ones (include-then-override)
        entries.insert((section.clone(), key.to_string()), (value, pos));
    }
    Ok(())
}

/// `metal(t_um=1, aperture_um=30) | oxide(t_um=10, n=1.46) | ...`
fn parse_layers(spec: &str) -> std::result::Result<Vec<Layer>, String> {
    let mut layers = Vec::new();
    for part in spec.split('|') {
        let part = part.trim();
        let (kind, args) = part
            .split_once('(')
            .ok_or_else(|| format!("layer must look like kind(args): {part}"))?;
        let args = args
            .strip_suffix(')')
            .ok_or_else(|| format!("unterminated layer args: {part}"))?;
        let mut map = BTreeMap::new();
        for kv in args.split(',') {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| format!("layer arg must be k=v: {kv}"))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| format!("layer arg {k} must be numeric"))?;
            map.insert(k.trim().to_string(), v);
        }
        let take = |map: &mut BTreeMap<String, f64>, k: &str| -> std::result::Result<f64, String> {
            map.remove(k).ok_or_else(|| format!("layer missing {k}: {part}"))
        };
        match kind.trim() {
            "metal" => layers.push(Layer::Metal {
                thickness: take(&mut map, "t_um")? * 1e-6,
                aperture_diameter: take(&mut map, "aperture_um")? * 1e-6,
            }),
            "oxide" => layers.push(Layer::Oxide {
                thickness: take(&mut map, "t_um")? * 1e-6,
                index: take(&mut map, "n")?,
            }),
            other => return Err(format!("unknown layer kind {other}")),
        }
        if let Some(k) = map.keys().next() {
            return Err(format!("unknown layer arg {k}: {part}"));
        }
    }
    if layers.is_empty() {
        return Err("layer list is empty".into());
    }
    Ok(layers)
}

/// `start:stop:step` (µm) or a comma list, returned in meters.
fn parse_offsets(spec: &str) -> std::result::Result<Vec<f64>, String> {
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("offsets must be start:stop:step, got {spec}"));
        }
        let start: f64 = parts[0].parse().map_err(|_| "bad offsets start".to_string())?;
        let stop: f64 = parts[1].parse().map_err(|_| "bad offsets stop".to_string())?;
        let step: f64 = parts[2].parse().map_err(|_| "bad offsets step".to_string())?;
        if !(step > 0.0 && stop >= start) {
            return Err("offsets need step > 0 and stop >= start".into());
        }
        let mut out = Vec::new();
        let n = ((stop - start) / step).round() as usize;
        for i in 0..=n {
            out.push((start + i as f64 * step) * 1e-6);
        }
        Ok(out)
    } else {
        let mut out = Vec::new();
        for item in spec.split(',') {
            out.push(
                item.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("bad offset {item}"))?
                    * 1e-6,
            );
        }
        Ok(out)
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_overrides() {
        let text = "\
name = test
master_seed = 7
[rates.spad]
preset = paper-passive
dispersion = 1.3
";
        let s = Scenario::from_str(text, "test.scn").unwrap();
        assert_eq!(s.name(), "test");
        assert_eq!(s.master_seed().unwrap(), 7);
        let rates = s.rate_model("rates.spad").unwrap().unwrap();
        assert_eq!(rates.bright_rate, 106_000.0);
        assert_eq!(rates.dispersion, 1.3); // override wins
        s.finish().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let text = "name = x\nmaster_seed = 1\n[rates.spad]\npreset = paper-passive\nbogus_key = 3\n";
        let s = Scenario::from_str(text, "bad.scn").unwrap();
        let _ = s.rate_model("rates.spad").unwrap();
        let _ = s.master_seed();
        let _ = s.get_str("", "name");
        let err = s.finish().unwrap_err().to_string();
        assert!(err.contains("bogus_key"), "{err}");
        assert!(err.contains("bad.scn:5"), "{err}");
    }

    #[test]
    fn missing_seed_is_an_error() {
        let s = Scenario::from_str("name = x\n", "x.scn").unwrap();
        assert!(s.master_seed().is_err());
    }

    #[test]
    fn unknown_preset_is_an_error() {
        let s =
            Scenario::from_str("[rates.spad]\npreset = nope\n", "x.scn").unwrap();
        let err = s.rate_model("rates.spad").unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
    }

    #[test]
    fn include_preset_scheme_works() {
        let text = "master_seed = 3\ninclude preset:paper-passive\n";
        let s = Scenario::from_str(text, "inc.scn").unwrap();
        let rates = s.rate_model("rates.spad").unwrap().unwrap();
        assert_eq!(rates.bright_rate, 106_000.0);
        let _ = s.master_seed();
        let _ = s.spad_params().unwrap();
        s.finish().unwrap();
    }

    #[test]
    fn include_files_resolve_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.scn"), "[experiment]\nn_trials = 5\n").unwrap();
        std::fs::write(
            dir.path().join("top.scn"),
            "master_seed = 1\ninclude base.scn\n",
        )
        .unwrap();
        let s = Scenario::load(&dir.path().join("top.scn")).unwrap();
        assert_eq!(s.get_u64("experiment", "n_trials").unwrap(), Some(5));
    }

    #[test]
    fn hash_is_stable_under_key_order_and_file_name() {
        let a = Scenario::from_str("master_seed = 1\n[x]\nk = 2\nj = 3\n", "a.scn").unwrap();
        let b = Scenario::from_str("master_seed = 1\n[x]\nj = 3\nk = 2\n", "b.scn").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = Scenario::from_str("master_seed = 2\n[x]\nj = 3\nk = 2\n", "c.scn").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn layers_dsl_round_trip() {
        let layers = parse_layers(
            "metal(t_um=1, aperture_um=30) | oxide(t_um=10, n=1.46) | metal(t_um=0.5, aperture_um=40) | oxide(t_um=2, n=1.46)",
        )
        .unwrap();
        let expected = GeometryStack::paper_default().layers;
        assert_eq!(layers.len(), expected.len());
        for (got, want) in layers.iter().zip(&expected) {
            match (got, want) {
                (
                    Layer::Metal {
                        thickness: t1,
                        aperture_diameter: a1,
                    },
                    Layer::Metal {
                        thickness: t2,
                        aperture_diameter: a2,
                    },
                ) => {
                    assert!((t1 - t2).abs() < 1e-12 && (a1 - a2).abs() < 1e-12);
                }
                (
                    Layer::Oxide {
                        thickness: t1,
                        index: n1,
                    },
                    Layer::Oxide {
                        thickness: t2,
                        index: n2,
                    },
                ) => {
                    assert!((t1 - t2).abs() < 1e-12 && (n1 - n2).abs() < 1e-12);
                }
                other => panic!("layer kind mismatch: {other:?}"),
            }
        }
        assert!(parse_layers("glass(t_um=1)").is_err());
        assert!(parse_layers("metal(t_um=1)").is_err());
    }

    #[test]
    fn offsets_spec_forms() {
        let o = parse_offsets("0:480:24").unwrap();
        assert_eq!(o.len(), 21);
        assert!((o[0] - 0.0).abs() < 1e-18);
        assert!((o[20] - 480e-6).abs() < 1e-12);
        let o = parse_offsets("0, 60, 300").unwrap();
        assert_eq!(o.len(), 3);
        assert!(parse_offsets("5:1:2").is_err());
    }

    #[test]
    fn experiment_plan_from_scenario() {
        let text = "\
master_seed = 11
[rates.spad]
preset = paper-passive
[experiment]
n_trials = 100
window_s = 950e-6
prep_bright_probability = 0.498
pmt = on
[rates.pmt]
preset = pmt-paper
[discriminator.spad]
methods = threshold,mle,adaptive
threshold = 66.5
confidence = auto
target_mean_error = 8e-4
max_bins = 38
";
        let s = Scenario::from_str(text, "exp.scn").unwrap();
        let plan = s.experiment().unwrap();
        assert_eq!(plan.config.n_trials, 100);
        assert_eq!(plan.config.scan_methods.len(), 2);
        assert!(plan.config.pmt.is_some());
        let adaptive = plan.adaptive.unwrap();
        assert_eq!(adaptive.confidence, None);
        assert_eq!(adaptive.max_bins, 38);
        s.finish().unwrap();
    }
}
