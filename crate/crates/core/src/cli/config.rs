use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::GridAxis;
use crate::error::{Error, Result};
use crate::eval::{FeatureSource, ProbeConfig, DEFAULT_BINS};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub source: FeatureSource,
    pub bins: usize,
    pub probe: ProbeConfig,
    pub histogram_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            source: FeatureSource::RepresentationH,
            bins: DEFAULT_BINS,
            probe: ProbeConfig::default(),
            histogram_seed: 0,
        }
    }
}

/// A run config file: every training field at the top level, plus
/// `out_dir` and `eval`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
    pub eval: EvalOptions,
}

fn config_error(e: serde_json::Error, fallback: &str) -> Error {
    let msg = e.to_string();
    let key = msg
        .split_once("unknown field `")
        .or_else(|| msg.split_once("missing field `"))
        .and_then(|(_, rest)| rest.split_once('`'))
        .map_or_else(|| fallback.to_string(), |(k, _)| k.to_string());
    Error::Config { key, reason: msg }
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(mut map) = value else {
            return Err(Error::Config {
                key: "<root>".into(),
                reason: "config must be a JSON object".into(),
            });
        };
        let out_dir = match map.remove("out_dir") {
            None | Some(Value::Null) => None,
            Some(v) => Some(serde_json::from_value(v).map_err(|e| config_error(e, "out_dir"))?),
        };
        let eval = match map.remove("eval") {
            None => EvalOptions::default(),
            Some(v) => serde_json::from_value(v).map_err(|e| config_error(e, "eval"))?,
        };
        let train: TrainConfig = serde_json::from_value(Value::Object(map)).map_err(|e| config_error(e, "<root>"))?;
        train.validate()?;
        if eval.bins < 10 {
            return Err(Error::Config {
                key: "eval.bins".into(),
                reason: "at least 10 bins are required".into(),
            });
        }
        Ok(RunConfig { train, out_dir, eval })
    }

    /// The fully materialized config, defaults included.
    pub fn to_value(&self) -> Result<Value> {
        let mut map = match serde_json::to_value(&self.train)? {
            Value::Object(m) => m,
            _ => unreachable!("TrainConfig serializes to an object"),
        };
        map.insert("out_dir".into(), serde_json::to_value(&self.out_dir)?);
        map.insert("eval".into(), serde_json::to_value(&self.eval)?);
        Ok(Value::Object(map))
    }

    /// Read `path` (or start from defaults) and apply `KEY=VALUE` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingArtifact(p.to_path_buf()));
                }
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let value: Value = serde_json::from_str(&text).map_err(|e| Error::Config {
                    key: "<root>".into(),
                    reason: format!("{}: {e}", p.display()),
                })?;
                RunConfig::from_value(value)?
            }
        };
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config {
                key: o.clone(),
                reason: "override must look like KEY=VALUE".into(),
            })?;
            cfg = cfg.with_override(key.trim(), parse_scalar(raw))?;
        }
        Ok(cfg)
    }

    pub fn with_override(&self, key: &str, value: Value) -> Result<Self> {
        let mut v = self.to_value()?;
        apply_override(&mut v, key, value)?;
        RunConfig::from_value(v).map_err(|e| match e {
            Error::Config { reason, .. } => Error::Config { key: key.into(), reason },
            other => other,
        })
    }

    pub fn out_dir_or(&self, name: &str) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| Path::new("runs").join(name))
    }
}

/// JSON if it parses, else a bare string.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()))
}

/// Replace the value at dotted `key`; every segment must already exist.
pub fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let missing = || Error::Config {
        key: key.into(),
        reason: "not a config key".into(),
    };
    let mut cur = root;
    for seg in key.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(seg).ok_or_else(missing)?,
            _ => return Err(missing()),
        };
    }
    *cur = value;
    Ok(())
}

/// `KEY=V1,V2,...` into a grid axis.
pub fn parse_grid_param(spec: &str) -> Result<GridAxis> {
    let (key, values) = spec.split_once('=').ok_or_else(|| Error::Config {
        key: spec.into(),
        reason: "grid axis must look like KEY=V1,V2,...".into(),
    })?;
    let values: Vec<Value> = values.split(',').filter(|v| !v.trim().is_empty()).map(parse_scalar).collect();
    if values.is_empty() {
        return Err(Error::Config {
            key: key.into(),
            reason: "grid axis has no values".into(),
        });
    }
    Ok(GridAxis {
        key: key.trim().into(),
        values,
    })
}

pub(super) fn load_grid(path: &Path) -> Result<Vec<GridAxis>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: Map<String, Value> = serde_json::from_str(&text).map_err(|e| Error::Config {
        key: "grid".into(),
        reason: e.to_string(),
    })?;
    map.into_iter()
        .map(|(key, v)| match v {
            Value::Array(values) if !values.is_empty() => Ok(GridAxis { key, values }),
            _ => Err(Error::Config {
                key,
                reason: "grid values must be a non-empty list".into(),
            }),
        })
        .collect()
}
