//! Run configuration: a preset, an optional TOML file, `--set` overrides and
//! ablation flags, applied in that order.

use std::path::Path;

use clap::ValueEnum;
use nfs_core::model::NfsConfig;
use nfs_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size network.
    #[default]
    Default,
    /// Full-length frames, narrow network.
    Desk,
    /// Frame 64, chan 4.
    Tiny,
}

impl Preset {
    pub fn model(self) -> NfsConfig {
        match self {
            Preset::Default => NfsConfig::default(),
            Preset::Desk => NfsConfig::desk(),
            Preset::Tiny => NfsConfig::tiny(),
        }
    }
}

/// Effective configuration of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: NfsConfig,
    pub train: TrainConfig,
}

/// Command-line adjustments layered over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    /// `dotted.key=value` pairs; values parse as TOML, falling back to strings.
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub no_ni: bool,
    pub no_lff: bool,
    pub no_shifter: bool,
    pub no_geowarp: bool,
    pub frame_ms: Option<f64>,
    pub hop_ms: Option<f64>,
}

impl RunConfig {
    pub fn load(file: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let mut doc = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
                text.parse::<Table>().map_err(|e| CliError::input(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for kv in &ov.set {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| CliError::input(format!("override `{kv}` is not key=value")))?;
            set_dotted(&mut doc, key.trim(), parse_value(raw.trim()))?;
        }
        let preset = match (ov.preset, doc.remove("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v.try_into().map_err(|e| CliError::input(format!("preset: {e}")))?,
            (None, None) => Preset::default(),
        };

        let mut model_doc = to_table(&preset.model())?;
        let mut train_doc = to_table(&TrainConfig::default())?;
        for (key, v) in doc {
            match (key.as_str(), v) {
                ("model", Value::Table(t)) => merge(&mut model_doc, t),
                ("train", Value::Table(t)) => merge(&mut train_doc, t),
                (other, _) => return Err(CliError::input(format!("unknown config section `{other}`"))),
            }
        }
        let mut model: NfsConfig =
            Value::Table(model_doc).try_into().map_err(|e| CliError::input(format!("[model]: {e}")))?;
        let mut train: TrainConfig =
            Value::Table(train_doc).try_into().map_err(|e| CliError::input(format!("[train]: {e}")))?;

        if let Some(s) = ov.seed {
            train.seed = s;
        }
        let ab = &mut model.ablation;
        ab.ni &= !ov.no_ni;
        ab.lff &= !ov.no_lff;
        ab.shifter &= !ov.no_shifter;
        ab.geowarp &= !ov.no_geowarp;
        if let Some(ms) = ov.frame_ms {
            model.frame_len = ms_to_samples(ms, model.sample_rate, "--frame-ms")?;
        }
        if let Some(ms) = ov.hop_ms {
            model.hop = ms_to_samples(ms, model.sample_rate, "--hop-ms")?;
        }
        model.validate().map_err(|e| CliError::input(e.to_string()))?;
        train.validate_config().map_err(|e| CliError::input(e.to_string()))?;
        Ok(Self { preset, model, train })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

fn to_table<T: Serialize>(v: &T) -> Result<Table, CliError> {
    Table::try_from(v).map_err(|e| CliError::Internal(e.to_string()))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(doc: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::input(format!("bad override key `{key}`")));
    }
    let mut t = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| CliError::input(format!("override `{key}`: `{p}` is not a section")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn ms_to_samples(ms: f64, sample_rate: u32, flag: &str) -> Result<usize, CliError> {
    let n = ms * sample_rate as f64 / 1000.0;
    if !(n >= 1.0) || (n - n.round()).abs() > 1e-9 {
        return Err(CliError::input(format!("{flag} {ms} is not a whole number of samples at {sample_rate} Hz")));
    }
    Ok(n.round() as usize)
}
