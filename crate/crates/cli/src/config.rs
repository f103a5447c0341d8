//! Run configuration: defaults, an optional JSON file, then `--key=value`
//! overrides, in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use smaformer::model::ModelConfig;
use smaformer::train::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub split_ratios: [f64; 3],
    /// Existing dataset directory; when empty the dataset is generated in
    /// memory from the fields above.
    pub dir: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 100,
            height: 64,
            width: 64,
            seed: 0,
            split_ratios: [0.8, 0.15, 0.05],
            dir: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub op_threshold: f64,
    pub model_threshold: f64,
    pub seeds: Vec<u64>,
    /// Coordinates checked per parameter tensor in the model-level check.
    pub per_param: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            op_threshold: smaformer::verify::OP_THRESHOLD,
            model_threshold: smaformer::verify::MODEL_THRESHOLD,
            seeds: smaformer::verify::DEFAULT_SEEDS.to_vec(),
            per_param: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub gradcheck: GradcheckConfig,
    /// Output directory.
    pub out: String,
    /// Checkpoint directory read by `eval` and `predict`.
    pub checkpoint: String,
    /// SMT1 image read by `predict`.
    pub image: String,
    /// Split scored by `eval`.
    pub split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            gradcheck: GradcheckConfig::default(),
            out: String::new(),
            checkpoint: String::new(),
            image: String::new(),
            split: "val".into(),
        }
    }
}

impl RunConfig {
    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        if self.out.is_empty() {
            return Err(CliError::Usage("--out=DIR is required".into()));
        }
        Ok(PathBuf::from(&self.out))
    }
}

/// Parsed command line.
#[derive(Clone, Debug, PartialEq)]
pub struct Invocation {
    pub command: String,
    pub config: RunConfig,
    pub overwrite: bool,
}

pub const COMMANDS: [&str; 5] = ["synth", "gradcheck", "train", "eval", "predict"];

/// Parses `COMMAND [--config=PATH] [--overwrite] [--key=value ...]`.
pub fn parse_args<I: IntoIterator<Item = String>>(args: I) -> Result<Invocation, CliError> {
    let mut args = args.into_iter();
    let command = args
        .next()
        .ok_or_else(|| CliError::Usage(format!("missing command; expected one of {COMMANDS:?}")))?;
    if !COMMANDS.contains(&command.as_str()) {
        return Err(CliError::Usage(format!("unknown command {command:?}; expected one of {COMMANDS:?}")));
    }
    let mut overwrite = false;
    let mut config_path = None;
    let mut overrides = Vec::new();
    for arg in args {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(CliError::Usage(format!("unexpected argument {arg:?}")));
        };
        match flag.split_once('=') {
            None if flag == "overwrite" => overwrite = true,
            None => return Err(CliError::Usage(format!("flag --{flag} needs a value (--{flag}=VALUE)"))),
            Some(("config", path)) => config_path = Some(PathBuf::from(path)),
            Some((key, value)) => overrides.push((key.to_string(), value.to_string())),
        }
    }
    let config = build_config(config_path.as_deref(), &overrides)?;
    Ok(Invocation {
        command,
        config,
        overwrite,
    })
}

/// Defaults, then the file, then the overrides.
pub fn build_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut tree = serde_json::to_value(RunConfig::default()).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        merge(&mut tree, patch, "")?;
    }
    for (key, raw) in overrides {
        apply_override(&mut tree, key, raw)?;
    }
    serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

/// Recursively copies `patch` into `base`, rejecting keys `base` lacks.
fn merge(base: &mut Value, patch: Value, at: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| CliError::Usage(format!("unknown config key {path:?}")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

/// `--seed` sets every seed; a dotted key names one field; a bare key sets
/// that field in every section that has it.
fn apply_override(tree: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let value = parse_value(raw);
    if key == "seed" {
        for path in ["data.seed", "train.seed", "model.init_seed"] {
            set_path(tree, path, value.clone())?;
        }
        return Ok(());
    }
    if key.contains('.') || tree.get(key).is_some() {
        return set_path(tree, key, value);
    }
    let sections: Vec<String> = tree
        .as_object()
        .expect("config is an object")
        .iter()
        .filter(|(_, v)| v.get(key).is_some())
        .map(|(k, _)| k.clone())
        .collect();
    if sections.is_empty() {
        return Err(CliError::Usage(format!("unknown config key {key:?}")));
    }
    for s in sections {
        set_path(tree, &format!("{s}.{key}"), value.clone())?;
    }
    Ok(())
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut node = tree;
    for part in path.split('.') {
        node = node
            .get_mut(part)
            .ok_or_else(|| CliError::Usage(format!("unknown config key {path:?}")))?;
    }
    *node = value;
    Ok(())
}

/// JSON literal when it parses as one, otherwise a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}
