//! Layered run configuration: built-in defaults, then a `key = value` file,
//! then `HEE_*` environment variables, then command-line overrides.
//!
//! Keys are the dotted paths of [`Settings`]. Seeds and worker counts of the
//! individual stages are not keys of their own; they follow the top-level
//! `seed` and `workers`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use hee::experiment::ExperimentConfig;
use hee::features::{frames_for_duration, MelConfig};
use hee::model::HeeConfig;
use hee::pipeline::PipelineConfig;
use hee::synth::SynthConfig;
use hee::toy::{SessionConfig, ToyCorpusConfig};
use hee::train::{PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UserError;

pub const ENV_PREFIX: &str = "HEE_";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// `speaker<TAB>wav` manifest of the training corpus.
    pub corpus: String,
    pub noise_dir: String,
    pub rir_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub n_sessions: usize,
    pub oracle_count: bool,
    pub refine: bool,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        let d = ExperimentConfig::desk();
        Self { n_sessions: d.n_sessions, oracle_count: d.oracle_count, refine: d.refine }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub workers: usize,
    pub data: DataSettings,
    pub mel: MelConfig,
    pub model: HeeConfig,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub toy: ToyCorpusConfig,
    pub session: SessionConfig,
    pub experiment: ExperimentSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            data: DataSettings::default(),
            mel: MelConfig::default(),
            model: HeeConfig::default(),
            synth: SynthConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            toy: ToyCorpusConfig::default(),
            session: SessionConfig::default(),
            experiment: ExperimentSettings::default(),
        }
    }
}

/// Keys filled in from other settings rather than set directly.
fn is_derived(key: &str) -> bool {
    key.ends_with(".seed")
        || key.ends_with(".workers")
        || matches!(key, "model.n_mels" | "model.n_classes" | "train.frames_per_sample")
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("keys never collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// JSON if it parses, otherwise the raw text as a string.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Where a value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

/// Settings under construction, one layer at a time.
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    values: BTreeMap<String, Value>,
    /// Defaults of derived fields, overwritten in `propagate`.
    derived: BTreeMap<String, Value>,
    sources: BTreeMap<String, Source>,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfigBuilder {
    pub fn new() -> Self {
        let mut values = BTreeMap::new();
        flatten("", &serde_json::to_value(Settings::default()).expect("defaults serialise"), &mut values);
        let (derived, values): (BTreeMap<_, _>, BTreeMap<_, _>) = values.into_iter().partition(|(k, _)| is_derived(k));
        let sources = values.keys().map(|k| (k.clone(), Source::Default)).collect();
        Self { values, derived, sources }
    }

    fn parse(&self) -> serde_json::Result<Settings> {
        let mut all = self.derived.clone();
        all.extend(self.values.clone());
        serde_json::from_value(unflatten(&all))
    }

    #[cfg(test)]
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Sets one key; unknown keys and values of the wrong type are user
    /// errors.
    pub fn set(&mut self, key: &str, value: Value, source: Source) -> Result<()> {
        let Some(slot) = self.values.get_mut(key) else {
            let hint = if is_derived(key) { " (derived from another setting)" } else { "" };
            return Err(UserError::new(format!("unknown config key {key:?}{hint}")).into());
        };
        let old = std::mem::replace(slot, value);
        if let Err(e) = self.parse() {
            *self.values.get_mut(key).expect("present") = old;
            return Err(UserError::new(format!("bad value for {key}: {e}")).into());
        }
        self.sources.insert(key.to_string(), source);
        Ok(())
    }

    /// Parses `raw` as JSON, falling back to a plain string when the key
    /// expects one.
    pub fn set_raw(&mut self, key: &str, raw: &str, source: Source) -> Result<()> {
        let parsed = parse_value(raw);
        if parsed.is_string() {
            return self.set(key, parsed, source);
        }
        self.set(key, parsed, source).or_else(|e| self.set(key, Value::String(raw.trim().to_string()), source).map_err(|_| e))
    }

    /// `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| UserError::new(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set_raw(k.trim(), v, Source::File).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UserError::new(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `HEE_TRAIN__FREEZE_EPOCHS=3` sets `train.freeze_epochs`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (name, raw) in vars {
            let key = name[ENV_PREFIX.len()..].to_lowercase().replace("__", ".");
            self.set_raw(&key, &raw, Source::Env).with_context(|| format!("environment variable {name}"))?;
        }
        Ok(())
    }

    /// `key=value` as given to `--set`.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| UserError::new(format!("--set expects key=value, got {assignment:?}")))?;
        self.set_raw(k.trim(), v, Source::Flag)
    }

    pub fn build(&self) -> Result<Resolved> {
        let mut s = self.parse().context("resolving settings")?;
        s.propagate()?;
        Ok(Resolved { settings: s, values: self.values.clone(), sources: self.sources.clone() })
    }
}

impl Settings {
    /// Fills derived fields and checks cross-field constraints.
    fn propagate(&mut self) -> Result<()> {
        let seed = self.seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self.pipeline.seed = seed;
        self.pipeline.refine.seed = seed;
        self.toy.seed = seed;
        if self.workers == 0 {
            return Err(UserError::new("workers must be positive").into());
        }
        self.pretrain.workers = self.workers;
        self.train.workers = self.workers;
        self.model.n_mels = self.mel.n_mels;
        let user = |e: hee::Error| UserError::new(e.to_string());
        self.mel.validate().map_err(user)?;
        self.synth.validate().map_err(user)?;
        self.pipeline.validate().map_err(user)?;
        let frames = frames_for_duration(self.synth.mixture_dur_s, self.mel.frame_hop_s).map_err(user)?;
        self.train.frames_per_sample = frames / self.synth.samples_per_mixture;
        Ok(())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            corpus: self.toy.clone(),
            mel: self.mel.clone(),
            model: self.model.clone(),
            pretrain: self.pretrain.clone(),
            train: self.train.clone(),
            synth: self.synth.clone(),
            sessions: self.session.clone(),
            n_sessions: self.experiment.n_sessions,
            oracle_count: self.experiment.oracle_count,
            refine: self.experiment.refine,
            workers: self.workers,
            seed: self.seed,
        }
    }
}

/// Final settings with the flat view recorded in run manifests.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub settings: Settings,
    pub values: BTreeMap<String, Value>,
    pub sources: BTreeMap<String, Source>,
}

/// Text form of a resolved configuration, readable back with `--config`.
pub fn render(values: &BTreeMap<String, Value>) -> String {
    values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
