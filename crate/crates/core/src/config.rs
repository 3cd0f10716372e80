//! Experiment configuration: a JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentConfig;
use crate::data::synth::SynthSpec;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::post::PostConfig;
use crate::sst::SstConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Where training volumes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        spec: SynthSpec,
        #[serde(default)]
        seed: u64,
    },
    /// Image and label volume files (either file of each pair, or the stem).
    Files { image: PathBuf, labels: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic {
            spec: SynthSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub sst: SstConfig,
    pub losses: LossWeights,
    pub post: PostConfig,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub data: DataSource,
    /// Save a checkpoint every this many iterations; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Directory for the checkpoint and the training log.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            sst: SstConfig::default(),
            losses: LossWeights::default(),
            post: PostConfig::default(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            batch_size: 1,
            iterations: 500,
            seed: 0,
            data: DataSource::default(),
            checkpoint_every: 0,
            output_dir: PathBuf::from("run"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            path: origin.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sst.validate()?;
        self.losses.validate()?;
        self.post.validate()?;
        self.augment.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", format!("must be positive, got {}", o.lr)));
        }
        for (name, b) in [("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.iterations < 1 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if let DataSource::Synthetic { spec, .. } = &self.data {
            spec.validate()?;
            let p = self.model.patch;
            if (0..3).any(|a| p[a] > spec.dims[a]) {
                return Err(Error::config(
                    "model.patch",
                    format!("patch {p:?} exceeds synthetic volume {:?}", spec.dims),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_json(text, Path::new("test.json"))
    }

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(parse("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig {
            iterations: 7,
            data: DataSource::Files {
                image: "a.json".into(),
                labels: "b.raw".into(),
            },
            ..ExperimentConfig::default()
        };
        assert_eq!(parse(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn zero_iterations_name_the_field() {
        let err = parse(r#"{"iterations": 0}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "iterations"), "{err}");
        assert!(err.is_validation());
    }

    #[test]
    fn unknown_keys_and_enum_values_are_rejected() {
        assert!(parse(r#"{"iteratons": 5}"#).unwrap_err().is_validation());
        assert!(parse(r#"{"sst": {"fusion": "multiply"}}"#).is_err());
        assert!(parse(r#"{"post": {"connectivity": 8}}"#).is_err());
        let ok = parse(r#"{"sst": {"fusion": "concat", "topology": "temporal-then-spatial"}, "post": {"connectivity": 6}}"#);
        assert!(ok.is_ok());
    }

    #[test]
    fn nonpositive_learning_rate_is_rejected() {
        let err = parse(r#"{"optimizer": {"lr": 0.0}}"#).unwrap_err();
        assert!(err.to_string().contains("optimizer.lr"), "{err}");
    }
}
