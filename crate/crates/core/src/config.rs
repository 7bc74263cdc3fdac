//! Experiment configuration: a flat `key = value` file, one setting per line,
//! `#` starts a comment. Unknown or repeated keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::link::SelectionPolicy;
use crate::ssl::{SslHyper, ThresholdPolicy, WeakAugment};
use crate::{Error, Result};

/// Training variant: the full method or one of its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    LeoSplit,
    /// Constant pseudo-label threshold for every satellite and class.
    FixedThreshold,
    /// No auxiliary head: satellites only train during contact, through the
    /// ground station's server model, like conventional split learning.
    NoAm,
    /// No activation interpolation at the ground station.
    NoAai,
    /// Thresholds without the class-distribution term.
    NoPaClass,
    /// Thresholds without the data-quantity term.
    NoPaQuantity,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::LeoSplit,
        Mode::FixedThreshold,
        Mode::NoAm,
        Mode::NoAai,
        Mode::NoPaClass,
        Mode::NoPaQuantity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::LeoSplit => "leo-split",
            Mode::FixedThreshold => "fixed-threshold",
            Mode::NoAm => "no-am",
            Mode::NoAai => "no-aai",
            Mode::NoPaClass => "no-pa-class",
            Mode::NoPaQuantity => "no-pa-quantity",
        }
    }

    pub fn threshold_policy(self) -> ThresholdPolicy {
        match self {
            Mode::FixedThreshold => ThresholdPolicy::Fixed,
            Mode::NoPaClass => ThresholdPolicy::NoClassTerm,
            Mode::NoPaQuantity => ThresholdPolicy::NoQuantityTerm,
            Mode::LeoSplit | Mode::NoAm | Mode::NoAai => ThresholdPolicy::Adaptive,
        }
    }

    /// Whether satellites train on their own between contacts.
    pub fn trains_offline(self) -> bool {
        self != Mode::NoAm
    }

    pub fn interpolates(self) -> bool {
        !matches!(self, Mode::NoAai | Mode::NoAm)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!(
                    "unknown mode {s:?} (expected one of {})",
                    known.join(", ")
                ))
            })
    }
}

/// Which activations a satellite sends first when the downlink is short.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionSetting {
    /// Class-cycling for the full method and its ablations, random for no-am.
    Auto,
    Fixed(SelectionPolicy),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub satellites: usize,
    pub altitude_km: f64,
    pub min_elevation_deg: f64,
    /// Overrides the geometric contact fraction when set; `1.0` means
    /// permanent connectivity.
    pub contact_fraction: Option<f64>,
    /// Satellite-to-ground rate.
    pub downlink_bps: f64,
    /// Ground-to-satellite rate.
    pub uplink_bps: f64,
    /// Replaces the fixed rates with a measured trace.
    pub rate_trace: Option<PathBuf>,

    pub labeling_rate: f64,
    pub dirichlet_alpha: f64,
    pub quantity_ratios: Vec<f64>,

    pub rounds: usize,
    pub agg_every: usize,
    /// Widths of the global network, input first.
    pub layers: Vec<usize>,
    pub cut_index: usize,
    pub aux_hidden: usize,

    pub hyper: SslHyper,
    pub tau: f64,
    pub tau_cap: f64,
    pub beta: f64,
    pub interp_j: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub step_time_s: f64,
    pub server_steps: usize,
    pub aug_noise: f64,
    pub selection: SelectionSetting,

    pub seed: u64,
    pub mode: Mode,

    pub train_samples: usize,
    pub test_samples: usize,
    pub class_separation: f64,
    pub clusters_per_class: usize,
    /// Size of the rarest class relative to the most common one (1 = balanced).
    pub class_imbalance: f64,
    pub dataset_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            satellites: 10,
            altitude_km: 547.0,
            min_elevation_deg: 25.0,
            contact_fraction: None,
            downlink_bps: 100e6,
            uplink_bps: 12e6,
            rate_trace: None,
            labeling_rate: 0.1,
            dirichlet_alpha: 0.5,
            quantity_ratios: vec![1.0],
            rounds: 20,
            agg_every: 1,
            layers: vec![32, 64, 64, 64, 10],
            cut_index: 1,
            aux_hidden: 32,
            hyper: SslHyper::default(),
            tau: 0.7,
            tau_cap: 0.95,
            beta: 0.75,
            interp_j: 500,
            learning_rate: 0.005,
            batch_size: 128,
            step_time_s: 5.0,
            server_steps: 50,
            aug_noise: 0.05,
            selection: SelectionSetting::Auto,
            seed: 0,
            mode: Mode::LeoSplit,
            train_samples: 6000,
            test_samples: 2000,
            class_separation: 3.0,
            clusters_per_class: 1,
            class_imbalance: 1.0,
            dataset_csv: None,
            test_csv: None,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str, sep: char) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    value.split(sep).map(|v| parse_num(key, v.trim())).collect()
}

impl ExperimentConfig {
    pub fn classes(&self) -> usize {
        *self.layers.last().expect("validated layer list")
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0]
    }

    pub fn augment(&self) -> WeakAugment {
        WeakAugment::noise(self.aug_noise)
    }

    pub fn selection_policy(&self) -> SelectionPolicy {
        match self.selection {
            SelectionSetting::Fixed(p) => p,
            SelectionSetting::Auto if self.mode == Mode::NoAm => SelectionPolicy::Random,
            SelectionSetting::Auto => SelectionPolicy::ClassCyclingLargest,
        }
    }

    /// Interpolations per round after applying the mode.
    pub fn effective_interp_j(&self) -> usize {
        if self.mode.interpolates() {
            self.interp_j
        } else {
            0
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "satellites" => self.satellites = parse_num(key, value)?,
            "altitude_km" => self.altitude_km = parse_num(key, value)?,
            "min_elevation_deg" => self.min_elevation_deg = parse_num(key, value)?,
            "contact_fraction" => {
                self.contact_fraction = if value.is_empty() || value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "downlink_bps" => self.downlink_bps = parse_num(key, value)?,
            "uplink_bps" => self.uplink_bps = parse_num(key, value)?,
            "rate_trace" => self.rate_trace = opt_path(value),
            "labeling_rate" => self.labeling_rate = parse_num(key, value)?,
            "dirichlet_alpha" => self.dirichlet_alpha = parse_num(key, value)?,
            "quantity_ratios" => self.quantity_ratios = parse_list(key, value, ':')?,
            "rounds" => self.rounds = parse_num(key, value)?,
            "agg_every" => self.agg_every = parse_num(key, value)?,
            "layers" => self.layers = parse_list(key, value, ',')?,
            "cut_index" => self.cut_index = parse_num(key, value)?,
            "aux_hidden" => self.aux_hidden = parse_num(key, value)?,
            "lambda_u" => self.hyper.lambda_u = parse_num(key, value)?,
            "lambda_v" => self.hyper.lambda_v = parse_num(key, value)?,
            "phi" => self.hyper.phi = parse_num(key, value)?,
            "ema_decay" => self.hyper.ema_decay = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "tau_cap" => self.tau_cap = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "interp_j" => self.interp_j = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "step_time_s" => self.step_time_s = parse_num(key, value)?,
            "server_steps" => self.server_steps = parse_num(key, value)?,
            "aug_noise" => self.aug_noise = parse_num(key, value)?,
            "selection" => {
                self.selection = match value {
                    "auto" => SelectionSetting::Auto,
                    "random" => SelectionSetting::Fixed(SelectionPolicy::Random),
                    "class-cycling" => {
                        SelectionSetting::Fixed(SelectionPolicy::ClassCyclingLargest)
                    }
                    other => return Err(format!("selection: unknown policy {other:?}")),
                }
            }
            "seed" => self.seed = parse_num(key, value)?,
            "mode" => self.mode = value.parse().map_err(|e: Error| e.to_string())?,
            "train_samples" => self.train_samples = parse_num(key, value)?,
            "test_samples" => self.test_samples = parse_num(key, value)?,
            "class_separation" => self.class_separation = parse_num(key, value)?,
            "clusters_per_class" => self.clusters_per_class = parse_num(key, value)?,
            "class_imbalance" => self.class_imbalance = parse_num(key, value)?,
            "dataset_csv" => self.dataset_csv = opt_path(value),
            "test_csv" => self.test_csv = opt_path(value),
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. `origin` is only used in
    /// error messages; relative data paths are resolved against its directory.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n as u64 + 1,
                message,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(parse_err(format!("{key} set twice")));
            }
            cfg.set(key, value).map_err(parse_err)?;
        }
        let base = origin.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.rate_trace, &mut cfg.dataset_csv, &mut cfg.test_csv]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.satellites == 0 {
            return fail("satellites must be at least 1".into());
        }
        if !(self.labeling_rate > 0.0 && self.labeling_rate <= 1.0) {
            return fail(format!(
                "labeling_rate {} outside (0, 1]",
                self.labeling_rate
            ));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return fail(format!(
                "dirichlet_alpha {} must be positive",
                self.dirichlet_alpha
            ));
        }
        if self.quantity_ratios.is_empty()
            || self
                .quantity_ratios
                .iter()
                .any(|r| !(*r > 0.0 && r.is_finite()))
        {
            return fail("quantity_ratios must be positive numbers".into());
        }
        if !self.satellites.is_multiple_of(self.quantity_ratios.len()) {
            return fail(format!(
                "{} quantity ratios do not divide {} satellites",
                self.quantity_ratios.len(),
                self.satellites
            ));
        }
        if self.agg_every == 0 {
            return fail("agg_every must be at least 1".into());
        }
        if self.layers.len() < 3 || self.layers.contains(&0) {
            return fail("layers needs at least three positive widths".into());
        }
        if self.classes() < 2 {
            return fail("at least two classes are required".into());
        }
        if !(1..self.layers.len() - 1).contains(&self.cut_index) {
            return fail(format!(
                "cut_index {} must leave at least one layer on each side",
                self.cut_index
            ));
        }
        if self.aux_hidden == 0 || self.batch_size == 0 {
            return fail("aux_hidden and batch_size must be positive".into());
        }
        if let Some(f) = self.contact_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return fail(format!("contact_fraction {f} outside (0, 1]"));
            }
        }
        if !(self.downlink_bps >= 0.0 && self.uplink_bps >= 0.0) {
            return fail("link rates must be non-negative".into());
        }
        if !(self.tau > 0.0) || !(self.tau_cap > 0.0 && self.tau_cap <= 1.0) {
            return fail(format!(
                "tau {} / tau_cap {} out of range",
                self.tau, self.tau_cap
            ));
        }
        if !(self.beta > 0.0) {
            return fail(format!("beta {} must be positive", self.beta));
        }
        if !(self.learning_rate > 0.0) || !(self.step_time_s > 0.0) {
            return fail("learning_rate and step_time_s must be positive".into());
        }
        if !(self.aug_noise >= 0.0) {
            return fail("aug_noise must be non-negative".into());
        }
        if !(self.class_imbalance > 0.0 && self.class_imbalance <= 1.0) {
            return fail(format!(
                "class_imbalance {} outside (0, 1]",
                self.class_imbalance
            ));
        }
        if self.clusters_per_class == 0 || self.test_samples == 0 {
            return fail("clusters_per_class and test_samples must be positive".into());
        }
        if self.dataset_csv.is_none() && self.train_samples < self.satellites {
            return fail("fewer training samples than satellites".into());
        }
        self.hyper
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        crate::orbit::OrbitConfig {
            altitude_km: self.altitude_km,
            min_elevation_deg: self.min_elevation_deg,
            phase_offset_s: 0.0,
        }
        .validate()
        .map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_overrides_and_comments() {
        let text = "# desk run\nsatellites = 3\nquantity_ratios = 1:2:4  # skewed\nmode = no-aai\n\nlayers = 8,16,4\n";
        let cfg = ExperimentConfig::parse(text, Path::new("x.cfg")).unwrap();
        assert_eq!(cfg.satellites, 3);
        assert_eq!(cfg.quantity_ratios, vec![1.0, 2.0, 4.0]);
        assert_eq!(cfg.mode, Mode::NoAai);
        assert_eq!(cfg.effective_interp_j(), 0);
        assert_eq!(cfg.classes(), 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_and_repeated_keys_fail_with_line() {
        let err =
            ExperimentConfig::parse("rounds = 2\nrounsd = 3\n", Path::new("a.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(err.is_config_error());
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2\n", Path::new("a.cfg")).is_err());
        assert!(ExperimentConfig::parse("seed 1\n", Path::new("a.cfg")).is_err());
        assert!(ExperimentConfig::parse("seed = x\n", Path::new("a.cfg")).is_err());
    }

    #[test]
    fn validation_rules() {
        let check = |f: fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            c.validate()
        };
        assert!(check(|c| c.labeling_rate = 0.0).is_err());
        assert!(check(|c| c.labeling_rate = 1.0).is_ok());
        assert!(check(|c| c.dirichlet_alpha = 0.0).is_err());
        assert!(check(|c| c.quantity_ratios = vec![1.0, 2.0, 4.0]).is_err());
        assert!(check(|c| c.cut_index = 4).is_err());
        assert!(check(|c| c.contact_fraction = Some(1.5)).is_err());
        assert!(matches!(check(|c| c.satellites = 0), Err(Error::Config(_))));
    }

    #[test]
    fn mode_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("leo".parse::<Mode>().is_err());
        assert_eq!(
            Mode::FixedThreshold.threshold_policy(),
            ThresholdPolicy::Fixed
        );
        assert!(!Mode::NoAm.trains_offline());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let cfg = ExperimentConfig::parse("dataset_csv = data.csv\n", Path::new("/etc/runs/a.cfg"))
            .unwrap();
        assert_eq!(
            cfg.dataset_csv.unwrap(),
            PathBuf::from("/etc/runs/data.csv")
        );
    }
}
