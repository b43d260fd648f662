//! The versioned run configuration: one TOML document covering every
//! subsystem. Unknown keys are rejected; a hash of the effective config is
//! recorded in every output manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::IngestConfig;
use crate::models::{ModelSpec, RuleConfig};
use crate::pitch_control::{PpcfParams, DEFAULT_SCORING_ALPHA, DEFAULT_TRANSITION_SIGMA};
use crate::synth::SynthConfig;
use crate::training::TrainConfig;
use crate::types::PitchSpec;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceModelConfig {
    /// Std (m) of the Gaussian next-event location model.
    pub transition_sigma: f64,
    /// Decay rate (1/m) of the scoring probability with goal distance.
    pub scoring_alpha: f64,
}

impl Default for SpaceModelConfig {
    fn default() -> Self {
        SpaceModelConfig {
            transition_sigma: DEFAULT_TRANSITION_SIGMA,
            scoring_alpha: DEFAULT_SCORING_ALPHA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_inferences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_inferences: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub pitch: PitchSpec,
    pub synth: SynthConfig,
    pub ingest: IngestConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub rule: RuleConfig,
    pub ppcf: PpcfParams,
    pub space: SpaceModelConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            pitch: PitchSpec::default(),
            synth: SynthConfig::default(),
            ingest: IngestConfig::default(),
            model: ModelSpec::new(crate::models::Arch::Grnn),
            train: TrainConfig::default(),
            rule: RuleConfig::default(),
            ppcf: PpcfParams::default(),
            space: SpaceModelConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.pitch.validate()?;
        self.synth.validate()?;
        self.ingest.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.ppcf.validate()?;
        if self.space.transition_sigma <= 0.0 || self.space.scoring_alpha <= 0.0 {
            return Err(Error::Config("space model params must be positive".into()));
        }
        if self.eval.n_inferences == 0 {
            return Err(Error::Config("n_inferences must be at least 1".into()));
        }
        Ok(())
    }

    /// Hash of the effective configuration (after any flag overrides);
    /// stable across runs because serialization order is fixed.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_stably() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.train.seed = 1;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);

        let err = toml::from_str::<RunConfig>("version = 1\n[mystery]\nx = 1\n");
        assert!(err.is_err(), "unknown sections must be rejected");
        let err = toml::from_str::<RunConfig>("version = 1\n[train]\nbatch_sizes = 4\n");
        assert!(err.is_err(), "unknown keys must be rejected");
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = toml::from_str("[synth]\nn_matches = 3\n").unwrap();
        assert_eq!(cfg.synth.n_matches, 3);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.model.num_hid, 8);
    }

    #[test]
    fn bad_version_is_rejected() {
        let cfg: RunConfig = toml::from_str("version = 99\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
