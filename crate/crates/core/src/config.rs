//! Run configuration: one JSON document plus dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, ZipError};
use crate::eval::DEFAULT_BUDGETS;
use crate::geometry::NmsConfig;
use crate::inference::TestConfig;
use crate::zipnet::{TrainConfig, ZipConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub budgets: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            budgets: DEFAULT_BUDGETS.to_vec(),
        }
    }
}

/// Synthetic dataset written by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub side: usize,
    pub seed: u64,
    /// Fractions of small, medium and large shapes.
    pub mix: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 800,
            side: 192,
            seed: 0,
            mix: crate::data::DEFAULT_MIX,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ZipConfig,
    pub train: TrainConfig,
    pub nms: NmsConfig,
    pub test: TestConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.nms.validate()?;
        self.test.validate()?;
        if self.eval.budgets.is_empty() || self.eval.budgets.contains(&0) {
            return Err(ZipError::config("eval.budgets", "need at least one positive budget"));
        }
        if self.data.side < 64 {
            return Err(ZipError::config("data.side", "must be at least 64"));
        }
        let m = self.data.mix;
        if m.iter().any(|v| !(*v >= 0.0)) || (m.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(ZipError::config("data.mix", "fractions must be non-negative and sum to 1"));
        }
        Ok(())
    }

    /// Parses `text` (empty means all defaults), applies `key=value`
    /// overrides and validates.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text).map_err(|e| ZipError::config("<root>", e.to_string()))?
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_value(doc)
    }

    pub fn from_value(doc: Value) -> Result<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            ZipError::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_json_with_overrides(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets `a.b.c` to `value`, parsed as JSON when possible and kept as a
/// string otherwise. Missing objects along the path are created.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ZipError::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ZipError::config(key, "malformed key"));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            _ => return Err(ZipError::config(parts[..i].join("."), "not an object")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(e: ZipError) -> String {
        match e {
            ZipError::Config { field, .. } => field,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json_with_overrides(&cfg.to_json(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.model.q, 2);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.nms.inter, 0.5);
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_json_with_overrides(
            r#"{"model": {"q": 3}}"#,
            &["nms.inner=0.6".into(), "test.scales=[128,160]".into(), "precision=f64".into()],
        )
        .unwrap();
        assert_eq!(cfg.model.q, 3);
        assert_eq!(cfg.nms.inner, 0.6);
        assert_eq!(cfg.test.scales, vec![128, 160]);
        assert_eq!(cfg.precision, Precision::F64);
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let e = RunConfig::from_json_with_overrides("", &["model.depth=3".into()]).unwrap_err();
        assert!(field_of(e).starts_with("model"));
        let e = RunConfig::from_json_with_overrides(r#"{"bogus": 1}"#, &[]).unwrap_err();
        assert!(matches!(e, ZipError::Config { .. }));
    }

    #[test]
    fn range_errors_name_the_field() {
        let e = RunConfig::from_json_with_overrides("", &["model.q=0".into()]).unwrap_err();
        assert_eq!(field_of(e), "model.q");
        let e = RunConfig::from_json_with_overrides("", &["nms.final=1.5".into()]).unwrap_err();
        assert_eq!(field_of(e), "nms.final");
        let e = RunConfig::from_json_with_overrides("", &["nms.inner=0".into()]).unwrap_err();
        assert_eq!(field_of(e), "nms.inner");
        let e = RunConfig::from_json_with_overrides("", &["model.q=\"two\"".into()]).unwrap_err();
        assert_eq!(field_of(e), "model.q");
    }

    #[test]
    fn malformed_override() {
        assert!(RunConfig::from_json_with_overrides("", &["model.q".into()]).is_err());
        assert!(RunConfig::from_json_with_overrides("", &["seed.x=1".into()]).is_err());
    }
}
