//! Experiment configuration file: TOML with `[encoder]`, `[augmentation]`,
//! `[training]` and `[data]` sections, plus dotted `section.key=value`
//! overrides.

use crate::augment::AugmentationSpec;
use crate::data::SynthSpec;
use crate::encoder::EncoderConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` is not of the form section.key=value")]
    OverrideSyntax(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub lr_factor: f64,
    pub checkpoint_avg_k: usize,
    pub seed: u64,
    /// Global gradient-norm clip threshold.
    pub grad_clip: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 500,
            lr_factor: 0.5,
            checkpoint_avg_k: 3,
            seed: 1,
            grad_clip: 5.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(ConfigError::Invalid {
                key: format!("training.{key}"),
                reason: reason.into(),
            })
        };
        if self.warmup_steps < 1 {
            return bad("warmup_steps", "must be at least 1");
        }
        if self.checkpoint_avg_k < 1 {
            return bad("checkpoint_avg_k", "must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1");
        }
        if self.epochs < 1 {
            return bad("epochs", "must be at least 1");
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(k, "must be in (0, 1)");
            }
        }
        if !(self.eps > 0.0 && self.lr_factor > 0.0 && self.grad_clip > 0.0) {
            return bad("eps/lr_factor/grad_clip", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synth: SynthSpec,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    /// Corpus files; generated from `synth` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            dev_utterances: 200,
            test_utterances: 200,
            train_path: None,
            dev_path: None,
            test_path: None,
        }
    }
}

/// Full experiment: model, augmentation, optimisation and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub augmentation: AugmentationSpec,
    pub training: TrainingConfig,
    pub data: DataConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate().map_err(|e| ConfigError::Invalid {
            key: "encoder".into(),
            reason: e.to_string(),
        })?;
        self.augmentation.validate().map_err(|e| ConfigError::Invalid {
            key: "augmentation".into(),
            reason: e.to_string(),
        })?;
        self.training.validate()?;
        self.data.synth.validate().map_err(|e| ConfigError::Invalid {
            key: "data.synth".into(),
            reason: e.to_string(),
        })?;
        if self.encoder.vocab_size_ext != self.data.synth.vocab_size + 1 {
            return Err(ConfigError::Invalid {
                key: "encoder.vocab_size_ext".into(),
                reason: format!("must equal data.synth.vocab_size + 1 = {}", self.data.synth.vocab_size + 1),
            });
        }
        if self.encoder.input_dim != self.data.synth.feature_dim {
            return Err(ConfigError::Invalid {
                key: "encoder.input_dim".into(),
                reason: format!("must equal data.synth.feature_dim = {}", self.data.synth.feature_dim),
            });
        }
        Ok(())
    }

    /// Applies `section.key=value` overrides. Keys must already exist in the
    /// fully populated config (optional fields that are unset are accepted as
    /// documented extras). Values are parsed as TOML, falling back to a bare
    /// string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::OverrideSyntax(o.to_string()))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
                return Err(ConfigError::OverrideSyntax(o.to_string()));
            }
            let value = parse_value(raw.trim());
            let mut table = &mut root;
            for seg in &path[..path.len() - 1] {
                table = table
                    .get_mut(*seg)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
            }
            let leaf = path[path.len() - 1];
            if !table.contains_key(leaf) && !OPTIONAL_KEYS.contains(&key.trim()) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
            table.insert(leaf.to_string(), value);
        }
        let text = toml::to_string(&root).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_toml(&text)
    }
}

const OPTIONAL_KEYS: &[&str] = &[
    "encoder.attention_window",
    "data.train_path",
    "data.dev_path",
    "data.test_path",
];

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{AugOperator, MaskWidth};

    #[test]
    fn default_roundtrips_and_validates() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let text = c.to_toml();
        for section in ["[encoder]", "[augmentation]", "[training]", "[data]"] {
            assert!(text.contains(section), "{section} missing");
        }
    }

    #[test]
    fn overrides() {
        let c = TrainConfig::default()
            .with_overrides(&[
                "augmentation.p_del=0.2",
                "augmentation.operator=token_delete",
                "training.seed=7",
                "augmentation.w_tau=5",
                "encoder.intermediate_layers=[1, 3]",
            ])
            .unwrap();
        assert_eq!(c.augmentation.p_del, 0.2);
        assert_eq!(c.augmentation.operators(), &[AugOperator::TokenDelete]);
        assert_eq!(c.training.seed, 7);
        assert_eq!(c.augmentation.w_tau, MaskWidth::Frames(5));
        assert_eq!(c.encoder.intermediate_layers, vec![1, 3]);
    }

    #[test]
    fn unknown_override_key() {
        let err = TrainConfig::default().with_overrides(&["training.nope=1"]).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "training.nope"));
        let err = TrainConfig::default().with_overrides(&["seed"]).unwrap_err();
        assert!(matches!(err, ConfigError::OverrideSyntax(_)));
    }

    #[test]
    fn validation_names_field() {
        let c = TrainConfig::default()
            .with_overrides(&["data.synth.vocab_size=0"])
            .unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("vocab_size"), "{msg}");
    }
}
