//! The run configuration file: TOML with `[train]`, `[train.beta_params]`,
//! `[augment]` and `[model]` tables.
//!
//! Parsing is strict. Every field must be present and no other key may
//! appear, so a run directory's config copy fully determines the run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
}

fn check_keys(given: &toml::Table, reference: &toml::Table, prefix: &str) -> Result<()> {
    let qualified = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    for key in given.keys() {
        if !reference.contains_key(key) {
            return Err(Error::Config(format!("unknown key `{}`", qualified(key))));
        }
    }
    for (key, expected) in reference {
        let Some(value) = given.get(key) else {
            return Err(Error::Config(format!("missing key `{}`", qualified(key))));
        };
        if let (toml::Value::Table(sub_ref), toml::Value::Table(sub)) = (expected, value) {
            check_keys(sub, sub_ref, &qualified(key))?;
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let given: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let reference = toml::Table::try_from(RunConfig::default()).expect("default config serializes");
        check_keys(&given, &reference, "")?;
        let cfg: RunConfig = given.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical text with every field written out.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate().map_err(|e| Error::Config(format!("augment: {e}")))?;
        self.model.validate()?;
        if self.train.seed > i64::MAX as u64 || self.model.init_seed > i64::MAX as u64 {
            return Err(Error::Config("seeds must be below 2^63".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::ClsLoss;

    #[test]
    fn default_text_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        assert!(text.contains("[train.beta_params]"));
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn edited_values_survive_a_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 3;
        cfg.train.lr0 = 1.234_567_890_123e-3;
        cfg.train.cls_loss = ClsLoss::SigmoidBce;
        cfg.model.channels = vec![4, 8];
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = RunConfig::default().to_text().replace("[augment]", "[augment]\nwarp = 3");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("augment.warp"), "{err}");
    }

    #[test]
    fn missing_key_is_named() {
        let text: String = RunConfig::default()
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("alpha"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("train.beta_params.alpha"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let text = RunConfig::default().to_text().replace("epochs = 70", "epochs = 0");
        assert!(matches!(RunConfig::parse(&text), Err(Error::Config(_))));
        let text = RunConfig::default().to_text().replace("proj_dim = 128", "proj_dim = 64");
        assert!(matches!(RunConfig::parse(&text), Err(Error::Config(_))));
    }
}
