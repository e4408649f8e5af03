//! Atomic file emission and cache-key construction.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

/// Write bytes via a temp file in the same directory plus rename, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = path.to_path_buf();
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".into());
    tmp.set_file_name(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Validation(format!("serialization failure: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Which mappings the synthesized pulse must realize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthesisMode {
    Closed,
    Adapted,
}

impl SynthesisMode {
    pub fn tag(&self) -> &'static str {
        match self {
            SynthesisMode::Closed => "closed",
            SynthesisMode::Adapted => "adapted",
        }
    }
}

/// Content hash over every parameter that influences the optimized pulse.
/// Any change to the problem or optimizer settings changes the key.
pub fn pulse_cache_key(config: &RunConfig, n: usize, mode: SynthesisMode) -> String {
    let cutoff = n + config.cutoff_headroom;
    let canonical = format!(
        "mode={};n={};n_x={};omega1={:.17e};omega2={:.17e};t_final={:.17e};n_steps={};\
         cutoff1={};cutoff2={};lambda_a={:.17e};ramp={:.17e};target={:.17e};max_iters={};\
         guess_amplitude={:.17e};guess_seed={:?}",
        mode.tag(),
        n,
        config.n_x_for(n),
        config.omega1,
        config.omega2,
        config.t_final,
        config.n_steps,
        cutoff,
        cutoff,
        config.lambda_a,
        config.ramp_fraction,
        config.target_infidelity,
        config.max_iters,
        config.guess_amplitude,
        config.guess_seed,
    );
    let digest = Sha256::digest(canonical.as_bytes());
    let mut hex = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

pub fn pulse_cache_path(config: &RunConfig, n: usize, mode: SynthesisMode) -> PathBuf {
    let key = pulse_cache_key(config, n, mode);
    config
        .pulse_cache
        .join(format!("pulse_{}_n{}_{}.csv", mode.tag(), n, key))
}

pub fn convergence_cache_path(config: &RunConfig, n: usize, mode: SynthesisMode) -> PathBuf {
    let key = pulse_cache_key(config, n, mode);
    config
        .pulse_cache
        .join(format!("convergence_{}_n{}_{}.csv", mode.tag(), n, key))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_key_tracks_pulse_relevant_parameters() {
        let base = RunConfig::default();
        let k0 = pulse_cache_key(&base, 2, SynthesisMode::Closed);

        let mut changed = base.clone();
        changed.lambda_a += 1.0;
        assert_ne!(k0, pulse_cache_key(&changed, 2, SynthesisMode::Closed));

        let mut changed = base.clone();
        changed.n_steps += 1;
        assert_ne!(k0, pulse_cache_key(&changed, 2, SynthesisMode::Closed));

        assert_ne!(k0, pulse_cache_key(&base, 3, SynthesisMode::Closed));
        assert_ne!(k0, pulse_cache_key(&base, 2, SynthesisMode::Adapted));

        // parameters that do not affect the pulse leave the key unchanged
        let mut changed = base.clone();
        changed.phi_points = 17;
        changed.out_dir = PathBuf::from("elsewhere");
        assert_eq!(k0, pulse_cache_key(&changed, 2, SynthesisMode::Closed));
    }
}
