//! Layered configuration: built-in defaults, then an optional TOML file,
//! then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use demian_core::composite::{CompositeConfig, DEFAULT_DONE_THRESHOLD, DEFAULT_EPISODES, DEFAULT_MAX_STEPS};
use demian_core::instructor::{DEFAULT_TEMPERATURE, DEFAULT_TOP_K};
use demian_core::rollout::{RolloutConfig, DEFAULT_CHUNK_HORIZON, DEFAULT_STEP_DURATION, ROBOCASA_MAX_STEPS};
use demian_core::vlm::ClientConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub reward_table: Option<PathBuf>,
    pub episodes: Option<PathBuf>,
    pub suite: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutDefaults {
    pub chunk_horizon: u32,
    pub step_duration: f64,
    pub max_steps: u32,
    pub episodes: usize,
}

impl Default for RolloutDefaults {
    fn default() -> Self {
        Self {
            chunk_horizon: DEFAULT_CHUNK_HORIZON,
            step_duration: DEFAULT_STEP_DURATION,
            max_steps: ROBOCASA_MAX_STEPS,
            episodes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompositeDefaults {
    pub done_threshold: f64,
    pub max_steps: u32,
    pub episodes: usize,
}

impl Default for CompositeDefaults {
    fn default() -> Self {
        Self {
            done_threshold: DEFAULT_DONE_THRESHOLD,
            max_steps: DEFAULT_MAX_STEPS,
            episodes: DEFAULT_EPISODES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingDefaults {
    pub n_examples: usize,
    pub temperature: f64,
    pub top_k: usize,
}

impl Default for SamplingDefaults {
    fn default() -> Self {
        Self {
            n_examples: 3200,
            temperature: DEFAULT_TEMPERATURE,
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub seed: u64,
    pub workers: usize,
    pub paths: Paths,
    pub client: ClientConfig,
    pub rollout: RolloutDefaults,
    pub composite: CompositeDefaults,
    pub sampling: SamplingDefaults,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 4,
            paths: Paths::default(),
            client: ClientConfig::default(),
            rollout: RolloutDefaults::default(),
            composite: CompositeDefaults::default(),
            sampling: SamplingDefaults::default(),
        }
    }
}

impl GlobalConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: GlobalConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        self.client.validate().map_err(|e| e.to_string())?;
        RolloutConfig {
            chunk_horizon: self.rollout.chunk_horizon,
            step_duration: self.rollout.step_duration,
            max_steps: self.rollout.max_steps,
            ..RolloutConfig::default()
        }
        .validate()
        .map_err(|e| e.to_string())?;
        CompositeConfig {
            done_threshold: self.composite.done_threshold,
            max_steps: self.composite.max_steps,
            chunk_horizon: self.rollout.chunk_horizon,
        }
        .validate()
        .map_err(|e| e.to_string())?;
        if !(self.sampling.temperature > 0.0 && self.sampling.temperature.is_finite()) {
            return Err(format!(
                "sampling.temperature must be positive, got {}",
                self.sampling.temperature
            ));
        }
        if !(1..=4).contains(&self.sampling.top_k) {
            return Err(format!("sampling.top_k must be in 1..=4, got {}", self.sampling.top_k));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(GlobalConfig::from_toml("").unwrap(), GlobalConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = GlobalConfig::from_toml(
            "seed = 7\n[rollout]\nchunk_horizon = 16\n[client]\nrate_limit = 2.5\n[paths]\ncorpus = \"data/corpus\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.rollout.chunk_horizon, 16);
        assert_eq!(cfg.rollout.step_duration, DEFAULT_STEP_DURATION);
        assert_eq!(cfg.client.rate_limit, 2.5);
        assert_eq!(cfg.paths.corpus.as_deref(), Some(Path::new("data/corpus")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(GlobalConfig::from_toml("sede = 1").is_err());
        assert!(GlobalConfig::from_toml("[rollout]\nhorizon = 8").is_err());
        assert!(GlobalConfig::from_toml("[client]\napi_key = \"x\"").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(GlobalConfig::from_toml("workers = 0").is_err());
        assert!(GlobalConfig::from_toml("[client]\nrate_limit = 0.0").is_err());
        assert!(GlobalConfig::from_toml("[composite]\ndone_threshold = 1.5").is_err());
        assert!(GlobalConfig::from_toml("[sampling]\ntop_k = 5").is_err());
    }
}
