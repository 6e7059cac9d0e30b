use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use freqdrop_core::mc::{UncertaintySummary, PROTOCOL_RATES, PROTOCOL_REPETITIONS};
use freqdrop_core::nn::TrainOptions;
use freqdrop_core::synth::GenParams;
use freqdrop_core::{Architecture, DropoutKind, Placement};
use serde::{Deserialize, Serialize};

/// Bad user input. Reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Accepts `"repetitions": 30` as well as `"repetitions": [5, 30]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Repetitions {
    One(usize),
    Many(Vec<usize>),
}

impl Repetitions {
    pub fn to_vec(&self) -> Vec<usize> {
        match self {
            Repetitions::One(r) => vec![*r],
            Repetitions::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub count: usize,
    pub params: GenParams,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            count: 40,
            params: GenParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub architecture: Architecture,
    pub options: TrainOptions,
    /// Leading fraction of the dataset used for training; the rest is held out.
    pub train_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            options: TrainOptions::default(),
            train_fraction: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Square feature-map side lengths.
    pub sizes: Vec<usize>,
    pub rates: Vec<f64>,
    /// Timed batches per measurement; the median is reported.
    pub repetitions: usize,
    /// Minimum wall time of one timed batch, in milliseconds.
    pub min_batch_ms: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            sizes: vec![64, 128, 256, 512, 1024],
            rates: vec![0.1],
            repetitions: 7,
            min_batch_ms: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub output: PathBuf,
    pub kinds: Vec<DropoutKind>,
    pub rates: Vec<f64>,
    pub placements: Vec<Placement>,
    pub repetitions: Repetitions,
    pub seed: u64,
    pub bins: usize,
    pub hermitian: bool,
    pub rescale: bool,
    pub uncertainty: UncertaintySummary,
    pub emit_maps: bool,
    pub generate: GenerateSection,
    pub train: TrainSection,
    pub bench: BenchSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            model: PathBuf::from("model/model.fdn"),
            output: PathBuf::from("results"),
            kinds: DropoutKind::ALL.to_vec(),
            rates: PROTOCOL_RATES.to_vec(),
            placements: Placement::ALL.to_vec(),
            repetitions: Repetitions::One(PROTOCOL_REPETITIONS),
            seed: 0,
            bins: 10,
            hermitian: true,
            rescale: false,
            uncertainty: UncertaintySummary::ReferenceClass,
            emit_maps: false,
            generate: GenerateSection::default(),
            train: TrainSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| {
            config_error(format!(
                "{}: line {} column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 4, "kinds": ["frequency"], "repetitions": [5, 30]}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.kinds, vec![DropoutKind::Frequency]);
        assert_eq!(c.repetitions.to_vec(), vec![5, 30]);
        assert_eq!(c.rates.len(), 6);
        assert_eq!(c.generate.count, 40);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 1}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
