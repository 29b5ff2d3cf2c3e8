//! Run configuration: one JSON document with `dataset`, `network`, `train`
//! and `metrics` sections. Every field is optional and unknown keys are
//! rejected with the path of the offending key.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tcnl_core::data::{DatasetConfig, DatasetManifest};
use tcnl_core::net::{NetworkSpec, Template};
use tcnl_core::train::TrainConfig;

/// Architecture knobs. Input size, class count and concept list always come
/// from the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub template: Template,
    pub shallow_channels: Vec<usize>,
    pub extractor_channels: Vec<usize>,
    pub mapper_channels: Vec<usize>,
    pub classifier_hidden: usize,
    pub discriminator_channels: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = NetworkSpec::default();
        NetworkSection {
            template: d.template,
            shallow_channels: d.shallow_channels,
            extractor_channels: d.extractor_channels,
            mapper_channels: d.mapper_channels,
            classifier_hidden: d.classifier_hidden,
            discriminator_channels: d.discriminator_channels,
            leaky_slope: d.leaky_slope,
        }
    }
}

impl NetworkSection {
    pub fn to_spec(&self, manifest: &DatasetManifest) -> NetworkSpec {
        let size = manifest.config.image_size;
        NetworkSpec {
            template: self.template,
            input_size: size,
            classes: manifest.config.classes.len(),
            concepts: manifest.concept_names(),
            shallow_channels: self.shallow_channels.clone(),
            extractor_channels: self.extractor_channels.clone(),
            mapper_channels: self.mapper_channels.clone(),
            classifier_hidden: self.classifier_hidden,
            discriminator_channels: self.discriminator_channels.clone(),
            leaky_slope: self.leaky_slope,
            instance_size: size,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Split evaluated by `eval` and `ablate`.
    pub split: Split,
    /// Evaluate only the first `limit` samples of the split.
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub network: NetworkSection,
    pub train: TrainConfig,
    pub metrics: MetricsSection,
}

/// A config that failed to parse; the message carries the key path.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                ConfigError(format!("config: {inner}"))
            } else {
                ConfigError(format!("config key `{path}`: {inner}"))
            }
        })
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config = RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate().map_err(|e| ConfigError(format!("config key `dataset`: {e}")))?;
        self.train.validate().map_err(|e| ConfigError(format!("config key `train`: {e}")))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the config with the ablation flag
    /// cleared, so a constrained run and its ablation twin share a hash.
    pub fn hash_without_constraint_flag(&self) -> String {
        let mut c = self.clone();
        c.train.disable_concept_constraint = false;
        let json = serde_json::to_vec(&c).expect("config serialises");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named_with_its_path() {
        let err = RunConfig::parse(r#"{"train": {"epochz": 3}}"#).unwrap_err();
        assert!(err.0.contains("train.epochz") || (err.0.contains("train") && err.0.contains("epochz")), "{err}");
    }

    #[test]
    fn wrong_type_names_key_and_expected_type() {
        let err = RunConfig::parse(r#"{"train": {"epochs": "many"}}"#).unwrap_err();
        assert!(err.0.contains("train.epochs"), "{err}");
        assert!(err.0.contains("expected usize"), "{err}");
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::parse(r#"{"dataset": {"n_train": 8}, "train": {"weights": {"mu": 0.5}}}"#).unwrap();
        assert_eq!(c.dataset.n_train, 8);
        assert_eq!(c.dataset.image_size, DatasetConfig::default().image_size);
        assert_eq!(c.train.weights.mu, 0.5);
        assert_eq!(c.train.weights.eta, TrainConfig::default().weights.eta);
    }

    #[test]
    fn hash_ignores_only_the_constraint_flag() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.disable_concept_constraint = true;
        assert_eq!(a.hash_without_constraint_flag(), b.hash_without_constraint_flag());
        b.train.seed = 9;
        assert_ne!(a.hash_without_constraint_flag(), b.hash_without_constraint_flag());
    }
}
