//! Run configuration, merged from four layers. Later layers win:
//!
//! 1. built-in defaults
//! 2. `NEURMATCH_*` environment variables
//! 3. the `--config` TOML file
//! 4. command-line flags (`--seed`, `--tau`, `--set key=value`, ...)
//!
//! Environment keys map to dotted paths with `__` as the separator, so
//! `NEURMATCH_VERIFY__TAU=0.1` sets `verify.tau`. Unknown keys in any layer
//! are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use neurmatch::baseline::RansacConfig;
use neurmatch::evalmetrics::TreEstimator;
use neurmatch::gccm::{default_train_config, CorruptionConfig, VerifyConfig};
use neurmatch::matcher::MatcherConfig;
use neurmatch::nn::TrainConfig;
use neurmatch::synthdata::{AugmentConfig, DeformConfig, SceneConfig, TaskOptions};

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "NEURMATCH_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Table,
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSection {
    pub train: TrainConfig,
    /// Dual-softmax temperature of the training loss.
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GccmSection {
    pub pretrain_samples_per_class: usize,
    pub finetune_samples_per_class: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub corruption: CorruptionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub format: OutputFormat,
    pub scene: SceneConfig,
    pub deform: DeformConfig,
    pub augment: AugmentConfig,
    pub task: TaskOptions,
    pub matcher: MatcherConfig,
    pub verify: VerifyConfig,
    pub ransac: RansacConfig,
    pub tre: TreEstimator,
    pub fusion: FusionSection,
    pub gccm: GccmSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            format: OutputFormat::Table,
            scene: SceneConfig::default(),
            deform: DeformConfig::default(),
            augment: AugmentConfig::default(),
            task: TaskOptions::default(),
            matcher: MatcherConfig::default(),
            verify: VerifyConfig::default(),
            ransac: RansacConfig::default(),
            tre: TreEstimator::default(),
            fusion: FusionSection {
                train: TrainConfig {
                    learning_rate: 1e-3,
                    batch_size: 4,
                    epochs: 20,
                    ..TrainConfig::default()
                },
                temperature: 0.1,
            },
            gccm: GccmSection {
                pretrain_samples_per_class: 10_000,
                finetune_samples_per_class: 3000,
                pretrain: default_train_config(0),
                finetune: TrainConfig {
                    learning_rate: 5e-4,
                    batch_size: 64,
                    epochs: 10,
                    ..TrainConfig::default()
                },
                corruption: CorruptionConfig::default(),
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.scene.validate()?;
        self.deform.validate()?;
        self.matcher.validate()?;
        self.verify.validate()?;
        self.ransac.validate()?;
        self.fusion.train.validate()?;
        self.gccm.pretrain.validate()?;
        self.gccm.finetune.validate()?;
        if self.augment.count() == 0 {
            return Err(CliError::Config(
                "augment needs at least one rotation and contrast variant".into(),
            ));
        }
        if !(self.fusion.temperature > 0.0) {
            return Err(CliError::Config("fusion.temperature must be > 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// One override layer, as a TOML table.
#[derive(Debug, Clone, Default)]
pub struct Layer {
    pub name: String,
    pub table: Table,
}

impl Layer {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            table: Table::new(),
        }
    }

    /// Set a dotted key, creating intermediate tables.
    pub fn set(&mut self, key: &str, value: Value) -> CliResult<()> {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(CliError::Config(format!("{}: malformed key {key:?}", self.name)));
        }
        let mut table = &mut self.table;
        for part in &parts[..parts.len() - 1] {
            let entry = table
                .entry(part.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            table = match entry {
                Value::Table(t) => t,
                _ => {
                    return Err(CliError::Config(format!(
                        "{}: {key:?} crosses a non-table key",
                        self.name
                    )))
                }
            };
        }
        table.insert(parts[parts.len() - 1].to_string(), value);
        Ok(())
    }

    /// Parse `key=value`; the value is read as a TOML literal, falling back
    /// to a bare string.
    pub fn set_assignment(&mut self, assignment: &str) -> CliResult<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{}: expected key=value, got {assignment:?}", self.name)))?;
        self.set(key.trim(), parse_literal(raw.trim()))
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self {
            name: path.display().to_string(),
            table,
        })
    }

    pub fn from_env(vars: impl IntoIterator<Item = (String, String)>) -> CliResult<Self> {
        let mut layer = Self::new("environment");
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (k, v) in vars {
            let key = k[ENV_PREFIX.len()..].to_ascii_lowercase().replace("__", ".");
            layer.set(&key, parse_literal(&v))?;
        }
        Ok(layer)
    }
}

fn parse_literal(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Deep merge; a table carrying a different `kind` tag replaces the base
/// table instead of merging into it.
fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) if !kind_changes(b, o) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn kind_changes(base: &Table, over: &Table) -> bool {
    matches!((base.get("kind"), over.get("kind")), (Some(a), Some(b)) if a != b)
}

/// Keys that are absent from the serialized defaults because they default
/// to `None`.
const OPTIONAL_KEYS: &[&str] = &["verify.n_subsets"];

fn unknown_keys(defaults: &Table, over: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in over {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (defaults.get(k), v) {
            (Some(Value::Table(d)), Value::Table(o)) => unknown_keys(d, o, &path, out),
            (Some(_), _) => {}
            (None, _) if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            // Fields of another enum variant (`kind` switched) are checked
            // by deserialization.
            (None, _) if defaults.contains_key("kind") && over.contains_key("kind") => {}
            (None, _) => out.push(path),
        }
    }
}

/// Merge `layers` over the defaults and deserialize, rejecting unknown keys.
pub fn resolve(layers: &[Layer]) -> CliResult<RunConfig> {
    let defaults = match Value::try_from(RunConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => return Err(CliError::Config("defaults do not serialize to a table".into())),
    };
    let mut merged = defaults.clone();
    for layer in layers {
        let mut unknown = Vec::new();
        unknown_keys(&defaults, &layer.table, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(CliError::Config(format!(
                "{}: unknown keys: {}",
                layer.name,
                unknown.join(", ")
            )));
        }
        merge(&mut merged, &layer.table);
    }
    let cfg: RunConfig = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(name: &str, pairs: &[&str]) -> Layer {
        let mut l = Layer::new(name);
        for p in pairs {
            l.set_assignment(p).unwrap();
        }
        l
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = resolve(&[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn later_layers_win() {
        let env = layer("env", &["seed=1", "verify.tau=0.2"]);
        let file = layer("file", &["seed=2"]);
        let flags = layer("flags", &["verify.tau=0.3"]);
        let cfg = resolve(&[env, file, flags]).unwrap();
        assert_eq!(cfg.seed, 2);
        assert_eq!(cfg.verify.tau, 0.3);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = resolve(&[layer("file", &["verify.taux=0.2"])]).unwrap_err();
        assert!(err.to_string().contains("verify.taux"), "{err}");
        assert!(resolve(&[layer("file", &["bogus=1"])]).is_err());
    }

    #[test]
    fn env_names_map_to_paths() {
        let l = Layer::from_env([
            ("NEURMATCH_VERIFY__MIN_COVERAGE".to_string(), "12".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ])
        .unwrap();
        assert_eq!(resolve(&[l]).unwrap().verify.min_coverage, 12);
    }

    #[test]
    fn tagged_enum_switch() {
        let cfg = resolve(&[layer("flags", &["tre.kind=\"similarity\""])]).unwrap();
        assert_eq!(cfg.tre, TreEstimator::Similarity);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(resolve(&[layer("flags", &["verify.tau=1.5"])]).is_err());
        assert!(resolve(&[layer("flags", &["seed=\"abc\""])]).is_err());
    }

    #[test]
    fn optional_key_accepted() {
        let cfg = resolve(&[layer("flags", &["verify.n_subsets=500"])]).unwrap();
        assert_eq!(cfg.verify.n_subsets, Some(500));
    }
}
