//! Pipeline configuration: one JSON document, unknown keys rejected.

use std::path::Path;

use emgpinn::data::{Processing, SplitSpec, SynthConfig};
use emgpinn::dynamics::{estimate_segment_params, Anthropometrics, LimbModel, RegressionCoeffs, SegmentParams, STANDARD_GRAVITY};
use emgpinn::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub signals: Processing,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segments {
    pub upper_arm: SegmentParams,
    pub forearm: SegmentParams,
}

/// Segment parameters, given directly or estimated from body measurements.
/// Exactly one of `segments` and `anthropometrics` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub segments: Option<Segments>,
    pub anthropometrics: Option<Anthropometrics>,
    pub regression: RegressionCoeffs,
    pub gravity: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            segments: None,
            anthropometrics: Some(Anthropometrics {
                height: 1.75,
                weight: 74.0,
                upper_arm_length: 0.30,
                forearm_length: 0.27,
                arm_circumference: 0.30,
                biceps_circumference: 0.32,
                forearm_circumference: 0.27,
                wrist_circumference: 0.17,
            }),
            regression: RegressionCoeffs::default(),
            gravity: STANDARD_GRAVITY,
        }
    }
}

impl ModelConfig {
    pub fn limb_model(&self) -> Result<LimbModel, CliError> {
        let (upper, fore) = match (&self.segments, &self.anthropometrics) {
            (Some(s), None) => (s.upper_arm, s.forearm),
            (None, Some(a)) => estimate_segment_params(a, &self.regression).map_err(|e| CliError::Config(format!("model: {e}")))?,
            _ => {
                return Err(CliError::Config(
                    "model: set exactly one of `segments` and `anthropometrics`".into(),
                ))
            }
        };
        let model = LimbModel::new(upper, fore).with_gravity(self.gravity);
        model.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub split: SplitSpec,
    /// Fixed independently of `--seed` so training and evaluation agree on
    /// the test runs.
    pub split_seed: u64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split: SplitSpec::default(),
            split_seed: 7,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Row label in the summary table.
    pub dataset_name: String,
    pub traces: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset_name: "synthetic".into(),
            traces: true,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Config = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_json(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.limb_model()?;
        self.training
            .validate()
            .map_err(|e| CliError::Config(format!("training: {e}")))?;
        self.data
            .synth
            .trajectory
            .validate()
            .map_err(|e| CliError::Config(format!("data.synth.trajectory: {e}")))?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// First 16 hex digits of the SHA-256 of the serialized config.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("resolved_config.json");
        std::fs::write(&path, self.to_json()).map_err(|e| CliError::io(&path, e))
    }
}
