//! Layered application config: flag > environment > file > default.
//!
//! Environment overrides use `COUGHDETECT__<SECTION>__<FIELD>`, e.g.
//! `COUGHDETECT__DETECTOR__DELTA=0.01` or `COUGHDETECT__TRAIN__MAX_EPOCHS=20`.
//! Values are parsed as JSON when possible and taken as strings otherwise.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use coughdetect_core::model::{ModelConfig, TrainConfig};
use coughdetect_core::PipelineConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const ENV_PREFIX: &str = "COUGHDETECT__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub max_body_bytes: usize,
    /// Requests analysed at once; further requests wait.
    pub workers: usize,
    /// Where opted-in uploads are kept. Nothing is stored when unset.
    pub store_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            max_body_bytes: 20 * 1024 * 1024,
            workers: 4,
            store_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl AppConfig {
    /// Model config whose input matches the configured tensor layout.
    pub fn model_config(&self, n_classes: usize) -> ModelConfig {
        let s = &self.pipeline.sonograph;
        ModelConfig {
            input_shape: (s.bands(), s.n_frames, self.pipeline.tensor_mode.channels()),
            n_classes,
            ..self.model.clone()
        }
    }
}

/// A single `section.field = value` override, as set by a command-line flag.
pub type Override = (&'static str, Value);

/// Build the config from defaults, an optional file, the environment and
/// flag overrides, in increasing precedence.
pub fn load(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    flags: &[Override],
) -> Result<AppConfig> {
    let defaults = serde_json::to_value(AppConfig::default())?;
    let mut merged = defaults.clone();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: Value = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => {
                let t: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                serde_json::to_value(t)?
            }
        };
        check_keys(&defaults, &value, "")?;
        merge(&mut merged, value);
    }
    let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (key, raw) in env {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|p| p.to_ascii_lowercase()).collect();
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        set_path(&defaults, &mut merged, &path, value).with_context(|| format!("environment variable {key}"))?;
    }
    for (key, value) in flags {
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        set_path(&defaults, &mut merged, &path, value.clone())?;
    }
    let cfg: AppConfig = serde_json::from_value(merged).context("invalid configuration")?;
    cfg.pipeline.validate()?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Reject keys that the default config does not have.
fn check_keys(defaults: &Value, value: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(d), Value::Object(v)) = (defaults, value) {
        for (k, child) in v {
            let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match d.get(k) {
                Some(dc) => check_keys(dc, child, &name)?,
                None => bail!("unknown config key `{name}`"),
            }
        }
    }
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(defaults: &Value, target: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut d = defaults;
    let mut t = target;
    for (i, key) in path.iter().enumerate() {
        d = d.get(key).with_context(|| format!("unknown config key `{}`", path.join(".")))?;
        let obj = t.as_object_mut().context("config path crosses a scalar")?;
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        t = obj.get_mut(key).expect("merged config mirrors defaults");
    }
    Ok(())
}
