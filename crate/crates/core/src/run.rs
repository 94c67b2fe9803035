//! The JSON run configuration shared by the command-line workflows.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::LabeledDataset;
use crate::dccnn::DccnnConfig;
use crate::error::{io_err, Error, Result};
use crate::eval::{ProtocolSeeds, ProtocolSpec};
use crate::mil::MilConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root in `root/<class>/<image>` layout; the CLI `--data` flag
    /// takes precedence.
    pub root: Option<PathBuf>,
    pub train_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            train_ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub repetitions: usize,
    pub split_seed: u64,
    pub model_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            repetitions: 10,
            split_seed: 0,
            model_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dccnn: DccnnConfig,
    pub mil: MilConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub protocol: ProtocolConfig,
}

/// Dotted paths of keys in `value` that do not appear in `known`.
fn unknown_keys(value: &Value, known: &Value, path: &str, out: &mut Vec<String>) {
    let (Value::Object(given), Value::Object(schema)) = (value, known) else {
        return;
    };
    for (key, v) in given {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match schema.get(key) {
            None => out.push(format!("unknown key '{full}'")),
            Some(k) => unknown_keys(v, k, &full, out),
        }
    }
}

impl RunConfig {
    /// Parses and validates; every unknown key and every rule violation is
    /// reported in one `Error::Config`.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("malformed JSON: {e}")]))?;
        let known = serde_json::to_value(RunConfig::default())?;
        let mut problems = Vec::new();
        unknown_keys(&value, &known, "", &mut problems);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.dccnn.violations();
        v.extend(self.mil.violations());
        v.extend(self.train.violations());
        if !(self.data.train_ratio > 0.0 && self.data.train_ratio < 1.0) {
            v.push(format!("data.train_ratio {} must lie in (0, 1)", self.data.train_ratio));
        }
        if self.protocol.repetitions == 0 {
            v.push("protocol.repetitions must be at least 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// The dataset must carry exactly `dccnn.num_classes` classes.
    pub fn check_dataset(&self, data: &LabeledDataset) -> Result<()> {
        if data.num_classes() != self.dccnn.num_classes {
            return Err(Error::Config(vec![format!(
                "dccnn.num_classes is {} but the dataset has {} classes ({})",
                self.dccnn.num_classes,
                data.num_classes(),
                data.class_names.join(", ")
            )]));
        }
        Ok(())
    }

    pub fn protocol_spec(&self) -> ProtocolSpec {
        ProtocolSpec {
            dccnn: self.dccnn.clone(),
            mil: self.mil.clone(),
            train: self.train.clone(),
            train_ratio: self.data.train_ratio,
            repetitions: self.protocol.repetitions,
            seeds: ProtocolSeeds {
                split_base: self.protocol.split_seed,
                model_base: self.protocol.model_seed,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.dccnn.num_classes, 21);
        assert_eq!(c.protocol.repetitions, 10);
        assert_eq!(c.data.train_ratio, 0.8);
    }

    #[test]
    fn resolved_copy_round_trips() {
        let c = RunConfig::from_json(r#"{"dccnn": {"input_size": 96}, "mil": {"method": "max"}}"#).unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(c.to_json().contains("\"stage_epochs\": 40"));
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let err = RunConfig::from_json(r#"{"bogus": 1, "train": {"lr": 0.1, "adam": {"beta3": 0}}}"#).unwrap_err();
        let Error::Config(v) = err else { panic!("{err:?}") };
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(v.iter().any(|s| s.contains("'train.adam.beta3'")));
        assert!(v.iter().any(|s| s.contains("'train.lr'")));
    }

    #[test]
    fn every_violation_is_listed() {
        let err = RunConfig::from_json(
            r#"{"dccnn": {"input_size": 100}, "train": {"lr0": -1, "batch_size": 0}, "data": {"train_ratio": 1.0}, "protocol": {"repetitions": 0}}"#,
        )
        .unwrap_err();
        let Error::Config(v) = err else { panic!("{err:?}") };
        assert!(v.len() >= 5, "{v:?}");
    }

    #[test]
    fn type_errors_and_bad_json_are_config_errors() {
        assert!(matches!(RunConfig::from_json(r#"{"train": {"lr0": "fast"}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json("{"), Err(Error::Config(_))));
    }

    #[test]
    fn class_count_mismatch() {
        let c = RunConfig::default();
        let ds = synth_generate(3, 2, 32, 0).unwrap();
        let err = c.check_dataset(&ds).unwrap_err();
        assert!(err.to_string().contains("21"), "{err}");
        let c = RunConfig {
            dccnn: DccnnConfig::desk(3),
            ..RunConfig::default()
        };
        c.check_dataset(&ds).unwrap();
    }
}
