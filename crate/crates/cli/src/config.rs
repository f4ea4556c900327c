//! Training configuration files: a preset plus overrides, TOML or JSON.

use std::path::Path;

use serde_json::{Map, Value};
use vaanet::harness::TrainConfig;
use vaanet::loss::LossKind;
use vaanet::model::AttentionFlags;
use vaanet::{Error, Result};

/// Starting point that a config file refines.
pub fn preset(name: &str, classes: usize) -> Result<TrainConfig> {
    match name {
        "paper" => Ok(TrainConfig::paper(classes)),
        "desk" => Ok(TrainConfig::desk(classes)),
        "micro" => Ok(TrainConfig::micro(classes)),
        other => Err(Error::Config(format!(
            "unknown preset {other:?}; expected paper, desk or micro"
        ))),
    }
}

/// Reads a TOML (`.toml`) or JSON file into a JSON value.
pub fn read_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        let v: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(serde_json::to_value(v)?)
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn merge(base: &mut Value, over: &Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Applies the keys of `file` over the preset it names (default `desk`).
pub fn from_value(file: &Value, classes: usize) -> Result<TrainConfig> {
    let mut over = match file {
        Value::Object(m) => m.clone(),
        _ => return Err(Error::Config("config must be a table of keys".into())),
    };
    let name = match over.remove("preset") {
        Some(Value::String(s)) => s,
        Some(other) => return Err(Error::Config(format!("key `preset` must be a string, got {other}"))),
        None => "desk".to_string(),
    };
    let mut base = serde_json::to_value(preset(&name, classes)?)?;
    merge(&mut base, &Value::Object(over), "")?;
    if let Some(c) = base.pointer("/model/classes").and_then(Value::as_u64) {
        if c as usize != classes {
            return Err(Error::Config(format!(
                "key `model.classes` is {c} but the dataset taxonomy has {classes} classes"
            )));
        }
    }
    let cfg: TrainConfig = serde_json::from_value(base).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    Ok(cfg)
}

/// Command-line overrides, applied after the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub loss: Option<LossKind>,
    pub lambda: Option<f64>,
    pub attn: Option<AttentionFlags>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.loss {
            cfg.loss = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v as _;
        }
        if let Some(v) = self.attn {
            cfg.model.attention = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v as _;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
    }
}

/// Config file (or the desk preset) plus overrides, validated.
pub fn resolve(path: Option<&Path>, classes: usize, overrides: &Overrides) -> Result<TrainConfig> {
    let file = match path {
        Some(p) => read_value(p)?,
        None => Value::Object(Map::new()),
    };
    let mut cfg = from_value(&file, classes)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}
