//! Named presets shipped with the toolkit.
//!
//! Each preset is a plain-text key = value file embedded at build time;
//! the same files serve as the documented defaults. `paper-passive`,
//! `paper-no-stray`, and `projected-active-quench` carry both a rate
//! model and device parameters; `pmt-paper` is the reference-PMT rate
//! convention (see the file comment for how it was calibrated).

use crate::source::RateModel;
use crate::spad::SpadParams;

const RATE_PRESETS: &[(&str, &str)] = &[
    (
        "paper-passive",
        include_str!("../presets/rates-paper-passive.preset"),
    ),
    (
        "paper-no-stray",
        include_str!("../presets/rates-paper-no-stray.preset"),
    ),
    (
        "projected-active-quench",
        include_str!("../presets/rates-projected-active-quench.preset"),
    ),
    (
        "pmt-paper",
        include_str!("../presets/rates-pmt-paper.preset"),
    ),
];

const SPAD_PRESETS: &[(&str, &str)] = &[
    (
        "paper-passive",
        include_str!("../presets/spad-paper-passive.preset"),
    ),
    (
        "paper-no-stray",
        include_str!("../presets/spad-paper-no-stray.preset"),
    ),
    (
        "projected-active-quench",
        include_str!("../presets/spad-projected-active-quench.preset"),
    ),
];

pub fn rate_model(name: &str) -> Option<RateModel> {
    RATE_PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, body)| RateModel::from_kv_str(body).expect("embedded preset parses"))
}

pub fn spad_params(name: &str) -> Option<SpadParams> {
    SPAD_PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, body)| SpadParams::from_kv_str(body).expect("embedded preset parses"))
}

/// Scenario fragment for `include preset:<name>`: the rate model under
/// `[rates.spad]` plus, when available, device constants under `[spad]`.
pub fn raw_preset(name: &str) -> Option<String> {
    let rates = RATE_PRESETS.iter().find(|(n, _)| *n == name);
    let spad = SPAD_PRESETS.iter().find(|(n, _)| *n == name);
    if rates.is_none() && spad.is_none() {
        return None;
    }
    let mut out = String::new();
    if let Some((_, body)) = rates {
        out.push_str("[rates.spad]\n");
        out.push_str(body);
    }
    if let Some((_, body)) = spad {
        out.push_str("[spad]\n");
        out.push_str(body);
    }
    Some(out)
}

/// (name, has rate model, has device params) for `presets list`.
pub fn list() -> Vec<(&'static str, bool, bool)> {
    let mut names: Vec<&'static str> = RATE_PRESETS.iter().map(|(n, _)| *n).collect();
    for (n, _) in SPAD_PRESETS {
        if !names.contains(n) {
            names.push(n);
        }
    }
    names
        .into_iter()
        .map(|n| {
            (
                n,
                RATE_PRESETS.iter().any(|(p, _)| *p == n),
                SPAD_PRESETS.iter().any(|(p, _)| *p == n),
            )
        })
        .collect()
}

pub fn rate_preset_body(name: &str) -> Option<&'static str> {
    RATE_PRESETS.iter().find(|(n, _)| *n == name).map(|(_, b)| *b)
}

pub fn spad_preset_body(name: &str) -> Option<&'static str> {
    SPAD_PRESETS.iter().find(|(n, _)| *n == name).map(|(_, b)| *b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_parse_and_validate() {
        for (name, _) in RATE_PRESETS {
            let m = rate_model(name).unwrap();
            m.validate().unwrap();
        }
        for (name, _) in SPAD_PRESETS {
            let p = spad_params(name).unwrap();
            p.validate().unwrap();
        }
    }

    #[test]
    fn paper_passive_matches_published_numbers() {
        let m = rate_model("paper-passive").unwrap();
        assert_eq!(m.bright_rate, 106_000.0);
        assert_eq!(m.dark_rate, 38_000.0);
        assert_eq!(m.bin_width, 25e-6);
        assert!((m.decay_rate - 1.0 / 0.390).abs() < 1e-9);
        assert_eq!(m.dispersion, 1.2);
        let total: f64 = m.background_breakdown.iter().map(|(_, v)| v).sum();
        assert!((total - 39_620.0).abs() < 1e-9);

        let p = spad_params("paper-passive").unwrap();
        assert_eq!(p.breakdown_voltage, -28.0);
        assert_eq!(p.dcr, 109.0);
    }

    #[test]
    fn no_stray_and_active_quench_regimes() {
        let m = rate_model("paper-no-stray").unwrap();
        assert!((m.bright_rate - m.dark_rate - 68_000.0).abs() < 1e-9);
        let m = rate_model("projected-active-quench").unwrap();
        assert_eq!(m.bright_rate, 150_000.0);
        assert_eq!(m.dark_rate, 600.0);
    }

    #[test]
    fn unknown_preset_is_none() {
        assert!(rate_model("nothing").is_none());
        assert!(raw_preset("nothing").is_none());
    }
}
