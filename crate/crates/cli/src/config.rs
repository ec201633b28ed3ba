//! Run configuration: TOML sections layered over defaults, then flag
//! overrides, then a content hash over the resolved result.
//!
//! The `[model]` section starts from its `preset`; `windowing.adaptive_threshold`
//! and `windowing.seq_len` follow the model's `points` and `seq_len` unless
//! given explicitly.

use std::path::Path;

use anyhow::{bail, Context, Result};
use fapnet::metrics::EvalConfig;
use fapnet::model::{ModelConfig, Preset};
use fapnet::synth::SynthConfig;
use fapnet::train::TrainConfig;
use fapnet::windowing::WindowingConfig;
use fapnet::Resolution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `synth.seed` and `train.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Sensor `[width, height]` for CSV event files, which carry no header.
    #[serde(default)]
    pub sensor: Option<[u32; 2]>,
    pub synth: SynthConfig,
    pub windowing: WindowingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Key paths set from the command line, applied over the file.
#[derive(Default)]
pub struct Overrides(Vec<(&'static str, &'static str, Value)>);

impl Overrides {
    pub fn set(&mut self, section: &'static str, key: &'static str, value: impl Into<Value>) {
        self.0.push((section, key, value.into()));
    }

    pub fn opt<T: Into<Value>>(&mut self, section: &'static str, key: &'static str, value: Option<T>) {
        if let Some(v) = value {
            self.set(section, key, v);
        }
    }
}

const SECTIONS: [&str; 5] = ["synth", "windowing", "model", "train", "eval"];

fn to_table<T: Serialize>(v: &T) -> Result<Table> {
    match Value::try_from(v)? {
        Value::Table(t) => Ok(t),
        _ => unreachable!("config sections serialize to tables"),
    }
}

fn section<'a>(root: &'a mut Table, name: &str) -> Result<&'a mut Table> {
    let entry = root.entry(name.to_string()).or_insert_with(|| Value::Table(Table::new()));
    entry.as_table_mut().with_context(|| format!("config key `{name}` must be a table"))
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        let origin = path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
        Self::from_toml(&text, overrides).with_context(|| format!("invalid config {origin}"))
    }

    pub fn from_toml(text: &str, overrides: &Overrides) -> Result<Self> {
        let mut user: Table = toml::from_str(text)?;
        for (sec, key, value) in &overrides.0 {
            if sec.is_empty() {
                user.insert(key.to_string(), value.clone());
            } else {
                section(&mut user, sec)?.insert(key.to_string(), value.clone());
            }
        }
        let preset: Preset = match section(&mut user, "model")?.get("preset") {
            Some(v) => v.clone().try_into().context("model.preset")?,
            None => Preset::Fapnet,
        };
        let model_base = ModelConfig::preset(preset);
        let defaults = [
            to_table(&SynthConfig::default())?,
            to_table(&WindowingConfig::default())?,
            to_table(&model_base)?,
            to_table(&TrainConfig::default())?,
            to_table(&EvalConfig::default())?,
        ];
        let model_user = section(&mut user, "model")?.clone();
        let win_user = section(&mut user, "windowing")?.clone();
        let mut merged = Table::new();
        for (key, value) in &user {
            if !SECTIONS.contains(&key.as_str()) {
                merged.insert(key.clone(), value.clone());
            }
        }
        for (name, mut base) in SECTIONS.iter().zip(defaults) {
            if let Some(Value::Table(t)) = user.get(*name) {
                for (k, v) in t {
                    base.insert(k.clone(), v.clone());
                }
            }
            merged.insert(name.to_string(), Value::Table(base));
        }
        let model = section(&mut merged, "model")?.clone();
        let win = section(&mut merged, "windowing")?;
        match (model_user.get("seq_len"), win_user.get("seq_len")) {
            (Some(m), Some(w)) if m != w => bail!("model.seq_len = {m} conflicts with windowing.seq_len = {w}"),
            (_, None) => {
                win.insert("seq_len".into(), model["seq_len"].clone());
            }
            (None, Some(w)) => {
                let w = w.clone();
                section(&mut merged, "model")?.insert("seq_len".into(), w);
            }
            _ => {}
        }
        let win = section(&mut merged, "windowing")?;
        if !win_user.contains_key("adaptive_threshold") {
            win.insert("adaptive_threshold".into(), model["points"].clone());
        }
        let mut cfg: RunConfig = Value::Table(merged).try_into()?;
        if let Some(seed) = cfg.seed {
            cfg.synth.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.windowing.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if let Some([w, h]) = self.sensor {
            if w == 0 || h == 0 {
                bail!("sensor resolution must be positive");
            }
        }
        Ok(())
    }

    pub fn sensor(&self) -> Option<Resolution> {
        self.sensor.map(|[w, h]| Resolution::new(w, h))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Lists `model.*` keys whose values differ between two configurations.
pub fn model_differences(stored: &ModelConfig, requested: &ModelConfig) -> Vec<String> {
    let (a, b) = (to_table(stored).unwrap_or_default(), to_table(requested).unwrap_or_default());
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| {
            let show = |v: Option<&Value>| v.map_or_else(|| "unset".to_string(), |v| v.to_string());
            format!("model.{k}: checkpoint {} vs requested {}", show(a.get(k)), show(b.get(k)))
        })
        .collect()
}
