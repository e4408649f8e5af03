//! Flat key-value run configuration with a strict schema.
//!
//! One `key = value` per line; `#` starts a comment. Unknown keys are
//! rejected by name so a typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Loss parameterization: branch probabilities or coupling rates.
#[derive(Debug, Clone, Copy)]
pub enum LossParams {
    Probabilities { p0: f64, p1: f64, p2: f64 },
    Rates { lambda1: f64, lambda2: f64, dt: f64 },
}

/// Every tunable of the experiment pipeline, with defaults matching the
/// reference setup (T_f = 40, ω₁ = 1, ω₂ = 2).
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Resource photon number; `None` defers to the per-command default
    /// (1 for synthesis/protocol/scaling, 3 for the loss pipeline).
    pub n: Option<usize>,
    /// Auxiliary occupation N_x; defaults to N.
    pub n_x: Option<usize>,
    pub omega1: f64,
    pub omega2: f64,
    pub t_final: f64,
    pub n_steps: usize,
    /// Fock levels retained above the target occupation.
    pub cutoff_headroom: usize,
    pub lambda_a: f64,
    pub ramp_fraction: f64,
    pub target_infidelity: f64,
    pub max_iters: usize,
    pub phi_points: usize,
    pub guess_amplitude: f64,
    pub guess_seed: Option<u64>,
    pub loss: LossParams,
    pub out_dir: PathBuf,
    pub pulse_cache: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: None,
            n_x: None,
            omega1: 1.0,
            omega2: 2.0,
            t_final: 40.0,
            n_steps: 2000,
            cutoff_headroom: 2,
            lambda_a: 2.0,
            ramp_fraction: 0.1,
            target_infidelity: 1e-3,
            max_iters: 5000,
            phi_points: 6000,
            guess_amplitude: 0.1,
            guess_seed: None,
            loss: LossParams::Probabilities {
                p0: 0.9,
                p1: 0.05,
                p2: 0.05,
            },
            out_dir: PathBuf::from("out"),
            pulse_cache: PathBuf::from("cache"),
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "n",
    "n_x",
    "omega1",
    "omega2",
    "t_final",
    "n_steps",
    "cutoff_headroom",
    "lambda_a",
    "ramp_fraction",
    "target_infidelity",
    "max_iters",
    "phi_points",
    "guess_amplitude",
    "guess_seed",
    "p0",
    "p1",
    "p2",
    "lambda1",
    "lambda2",
    "loss_dt",
    "out_dir",
    "pulse_cache",
];

impl RunConfig {
    /// Parse a configuration file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Self, CliError> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Validation(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    line_no + 1
                )));
            };
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Validation(format!(
                    "unknown configuration key '{key}'"
                )));
            }
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::Validation(format!("duplicate key '{key}'")));
            }
        }
        Self::from_entries(&entries)
    }

    fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut config = RunConfig::default();

        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e| {
                CliError::Validation(format!("key '{key}': cannot parse '{value}': {e}"))
            })
        }

        for (key, value) in entries {
            match key.as_str() {
                "n" => config.n = Some(parse(key, value)?),
                "n_x" => config.n_x = Some(parse(key, value)?),
                "omega1" => config.omega1 = parse(key, value)?,
                "omega2" => config.omega2 = parse(key, value)?,
                "t_final" => config.t_final = parse(key, value)?,
                "n_steps" => config.n_steps = parse(key, value)?,
                "cutoff_headroom" => config.cutoff_headroom = parse(key, value)?,
                "lambda_a" => config.lambda_a = parse(key, value)?,
                "ramp_fraction" => config.ramp_fraction = parse(key, value)?,
                "target_infidelity" => config.target_infidelity = parse(key, value)?,
                "max_iters" => config.max_iters = parse(key, value)?,
                "phi_points" => config.phi_points = parse(key, value)?,
                "guess_amplitude" => config.guess_amplitude = parse(key, value)?,
                "guess_seed" => config.guess_seed = Some(parse(key, value)?),
                "out_dir" => config.out_dir = PathBuf::from(value),
                "pulse_cache" => config.pulse_cache = PathBuf::from(value),
                "p0" | "p1" | "p2" | "lambda1" | "lambda2" | "loss_dt" => {}
                _ => unreachable!("filtered above"),
            }
        }

        let prob_keys = ["p0", "p1", "p2"].map(|k| entries.contains_key(k));
        let rate_keys = ["lambda1", "lambda2", "loss_dt"].map(|k| entries.contains_key(k));
        let any_prob = prob_keys.iter().any(|&b| b);
        let any_rate = rate_keys.iter().any(|&b| b);
        if any_prob && any_rate {
            return Err(CliError::Validation(
                "give either probabilities (p0, p1, p2) or rates (lambda1, lambda2, loss_dt), \
                 not both"
                    .into(),
            ));
        }
        if any_rate {
            if !rate_keys.iter().all(|&b| b) {
                return Err(CliError::Validation(
                    "rate parameterization needs all of lambda1, lambda2, loss_dt".into(),
                ));
            }
            config.loss = LossParams::Rates {
                lambda1: parse("lambda1", &entries["lambda1"])?,
                lambda2: parse("lambda2", &entries["lambda2"])?,
                dt: parse("loss_dt", &entries["loss_dt"])?,
            };
        } else if any_prob {
            if !prob_keys.iter().all(|&b| b) {
                return Err(CliError::Validation(
                    "probability parameterization needs all of p0, p1, p2".into(),
                ));
            }
            config.loss = LossParams::Probabilities {
                p0: parse("p0", &entries["p0"])?,
                p1: parse("p1", &entries["p1"])?,
                p2: parse("p2", &entries["p2"])?,
            };
        }

        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("t_final", self.t_final),
            ("lambda_a", self.lambda_a),
            ("guess_amplitude", self.guess_amplitude),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CliError::Validation(format!("{key} must be positive, got {v}")));
            }
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction < 0.5) {
            return Err(CliError::Validation(format!(
                "ramp_fraction must lie in (0, 0.5), got {}",
                self.ramp_fraction
            )));
        }
        if !(self.target_infidelity > 0.0 && self.target_infidelity < 1.0) {
            return Err(CliError::Validation(format!(
                "target_infidelity must lie in (0, 1), got {}",
                self.target_infidelity
            )));
        }
        if self.n_steps == 0 || self.phi_points < 2 {
            return Err(CliError::Validation(
                "n_steps must be ≥ 1 and phi_points ≥ 2".into(),
            ));
        }
        if self.cutoff_headroom < 2 {
            return Err(CliError::Validation(
                "cutoff_headroom must be at least 2 (one level above the target occupation)"
                    .into(),
            ));
        }
        if let Some(n) = self.n {
            if n == 0 {
                return Err(CliError::Validation("n must be at least 1".into()));
            }
        }
        if let LossParams::Probabilities { p0, p1, p2 } = self.loss {
            if ((p0 + p1 + p2) - 1.0).abs() > 1e-12 || [p0, p1, p2].iter().any(|&p| p < 0.0) {
                return Err(CliError::Validation(format!(
                    "loss probabilities must be nonnegative and sum to 1, got {p0}, {p1}, {p2}"
                )));
            }
        }
        Ok(())
    }

    /// Resolved photon number for a command with the given default.
    pub fn n_or(&self, default: usize) -> usize {
        self.n.unwrap_or(default)
    }

    /// Resolved auxiliary occupation.
    pub fn n_x_for(&self, n: usize) -> usize {
        self.n_x.unwrap_or(n)
    }
}
