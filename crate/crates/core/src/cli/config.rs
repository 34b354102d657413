use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DegradationPreset, EpisodeSpec, SplitRole};
use crate::error::{BmlError, Result};
use crate::evaluator::Fusion;
use crate::trainer::TrainConfig;

/// Environment variable naming the default run root.
pub const RUN_ROOT_ENV: &str = "BML_RUN_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// A dataset directory or a `synthetic://` URI.
    pub source: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "synthetic://classes=32,per=40,size=84,seed=7".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: SplitRole,
    pub specs: Vec<EpisodeSpec>,
    pub n_episodes: usize,
    pub fusion: Fusion,
    /// Presets evaluated in addition to clean images.
    pub degradations: Vec<DegradationPreset>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: SplitRole::Novel,
            specs: vec![
                EpisodeSpec { n_way: 5, k_shot: 1, q_query: 15 },
                EpisodeSpec { n_way: 5, k_shot: 5, q_query: 15 },
            ],
            n_episodes: 2000,
            fusion: Fusion::Sum,
            degradations: Vec::new(),
        }
    }
}

/// Everything a run needs. The training fields sit at the top level, so
/// overrides read `mode=…`, `epochs=…`, `losses.elastic.enabled=…`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    pub data: DataConfig,
    pub eval: EvalConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `dotted.key=value` override. Values are read as TOML
/// (`3`, `0.5`, `true`, `[[0, 0.1]]`), falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| BmlError::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(BmlError::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| BmlError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Keys present in `given` but absent from `known`, as dotted paths.
fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => unknown_keys(g, kn, &path, out),
            (_, Some(_)) => {}
            // Optional fields are omitted when unset.
            (_, None) if path == "steps_per_epoch" => {}
            (_, None) => out.push(path),
        }
    }
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = table
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| BmlError::Config(e.to_string()))?;
        let known = toml::Table::try_from(&cfg).map_err(|e| BmlError::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&table, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(BmlError::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or the defaults when `None`) and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| BmlError::Config(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| BmlError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(BmlError::Config(format!("invalid run name `{}`", self.name)));
        }
        if self.eval.n_episodes == 0 {
            return Err(BmlError::Config("eval.n_episodes must be >= 1".into()));
        }
        self.eval.specs.iter().try_for_each(EpisodeSpec::validate)?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| BmlError::Config(e.to_string()))
    }

    /// A small, fast configuration on the synthetic dataset.
    pub fn desk() -> Self {
        let mut cfg = Self {
            name: "desk".into(),
            ..Self::default()
        };
        cfg.train = TrainConfig::desk();
        cfg.eval.n_episodes = 500;
        cfg
    }
}

/// `--run-root`, else `$BML_RUN_ROOT`, else `./runs`.
pub fn resolve_run_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}
