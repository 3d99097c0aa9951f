use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const RUN_CONFIG_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config is not a JSON object: {0}")]
    Parse(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {msg}")]
    BadValue { key: String, msg: String },
    #[error("unsupported schema_version {0} (expected {RUN_CONFIG_SCHEMA_VERSION})")]
    Schema(Value),
    #[error("override {0:?} is not KEY=VALUE")]
    Override(String),
    #[error("{0}")]
    Invalid(String),
}

/// Model and training settings as one flat JSON object:
///
/// ```json
/// { "schema_version": 1, "embed_dim": 64, "epochs": 20, "lr0": 0.001 }
/// ```
///
/// Every key is optional and unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("configs serialize to objects"),
    }
}

fn keys_of<T: serde::Serialize>(t: &T) -> Vec<String> {
    object(serde_json::to_value(t).expect("config serializes")).into_iter().map(|(k, _)| k).collect()
}

/// Guesses the JSON type of an override value; anything unparsable is a
/// string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        match v {
            Value::Object(m) => Self::from_map(m),
            other => Err(ConfigError::Parse(format!("top level is {other}"))),
        }
    }

    pub fn from_map(mut map: Map<String, Value>) -> Result<Self, ConfigError> {
        if let Some(v) = map.remove("schema_version") {
            if v.as_u64() != Some(RUN_CONFIG_SCHEMA_VERSION) {
                return Err(ConfigError::Schema(v));
            }
        }
        let model_keys = keys_of(&ModelConfig::default());
        let train_keys = keys_of(&TrainConfig::default());
        let (mut model, mut train) = (Map::new(), Map::new());
        for (k, v) in map {
            if model_keys.contains(&k) {
                model.insert(k, v);
            } else if train_keys.contains(&k) {
                train.insert(k, v);
            } else {
                return Err(ConfigError::UnknownKey(k));
            }
        }
        let bad = |e: serde_json::Error| ConfigError::BadValue { key: "config".into(), msg: e.to_string() };
        let cfg = Self {
            model: serde_json::from_value(Value::Object(model)).map_err(bad)?,
            train: serde_json::from_value(Value::Object(train)).map_err(bad)?,
        };
        cfg.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_map(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("schema_version".into(), RUN_CONFIG_SCHEMA_VERSION.into());
        m.extend(object(serde_json::to_value(&self.model).expect("serializes")));
        m.extend(object(serde_json::to_value(&self.train).expect("serializes")));
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.to_map())).expect("serializes")
    }

    /// Applies `KEY=VALUE` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut map = self.to_map();
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.to_string()))?;
            let k = k.trim();
            if !map.contains_key(k) {
                return Err(ConfigError::UnknownKey(k.to_string()));
            }
            map.insert(k.to_string(), parse_value(v.trim()));
        }
        Self::from_map(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_all_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::default().with_overrides(&["embed_dim=64", "lr0=0.002", "max_steps=10"]).unwrap();
        assert_eq!(c.model.embed_dim, 64);
        assert_eq!(c.train.max_steps, Some(10));
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_versions_are_errors() {
        assert_eq!(RunConfig::from_json(r#"{"embed_dims": 3}"#), Err(ConfigError::UnknownKey("embed_dims".into())));
        assert!(matches!(RunConfig::from_json(r#"{"schema_version": 2}"#), Err(ConfigError::Schema(_))));
        assert!(matches!(RunConfig::from_json("[1]"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::default().with_overrides(&["lr0"]), Err(ConfigError::Override(_))));
        assert!(matches!(RunConfig::default().with_overrides(&["nope=1"]), Err(ConfigError::UnknownKey(_))));
    }

    #[test]
    fn invalid_values_are_reported() {
        assert!(matches!(RunConfig::from_json(r#"{"lr0": "fast"}"#), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::from_json(r#"{"lr0": 0}"#), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_json(r#"{"heads": 3}"#), Err(ConfigError::Invalid(_))));
    }
}
