//! Run configuration: one TOML file plus dotted-path overrides.
//!
//! Only the top-level `seed` is required. Sections (`dataset`, `encoder`,
//! `adam`, `pool`, `trainer`, `eval`, `ablation`) fall back to their
//! defaults field by field. A section `seed` left unset is derived from the
//! top-level seed, so one number reproduces the whole run.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use insclr::ablation::{derive_seed, AblationSettings, Experiment, Variant};
use insclr::candidates::PoolConfig;
use insclr::encoder::{AdamConfig, EncoderConfig};
use insclr::evaluator::EvalConfig;
use insclr::synthdata::DatasetConfig;
use insclr::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

/// Sections whose `seed` is derived from the top-level seed, with the
/// section index fed to the derivation.
pub const SEEDED_SECTIONS: [(&str, u64); 4] = [("dataset", 1), ("encoder", 2), ("trainer", 3), ("eval", 4)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    /// Master seeds run per variant; empty means `[seed, seed+1, seed+2]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "all_variants")]
    pub variants: Vec<String>,
    #[serde(default = "default_random_negatives")]
    pub random_negatives: usize,
}

fn all_variants() -> Vec<String> {
    Variant::ALL.iter().map(|v| v.name().to_string()).collect()
}

fn default_random_negatives() -> usize {
    AblationSettings::default().random_negatives
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            seeds: Vec::new(),
            variants: all_variants(),
            random_negatives: default_random_negatives(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_true() -> bool {
    true
}

fn default_window() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Record label-based mining precision during training.
    #[serde(default = "default_true")]
    pub analytics: bool,
    /// Trailing window of the smoothed curves.
    #[serde(default = "default_window")]
    pub curves_window: usize,
    /// Load this dataset file instead of generating one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_file: Option<PathBuf>,
    /// Load precomputed descriptors instead of generating a dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_file: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationSection,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    /// Malformed file or override, with the parser's location diagnostics.
    Parse(String),
    /// Every violated invariant (unknown keys included).
    Validation(Vec<String>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse(m) => write!(f, "config parse error: {m}"),
            ConfigError::Validation(v) => {
                write!(f, "config validation failed ({} problem(s)):", v.len())?;
                for p in v {
                    write!(f, "\n  - {p}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

/// Command-line adjustments applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `path` (dot-separated) in `root`, creating intermediate tables.
pub fn set_path(root: &mut toml::Table, path: &str, value: Value) -> Result<(), ConfigError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Parse(format!("bad override key {path:?}")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Parse(format!("override {path:?}: {k} is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Builds a validated config from optional file text and overrides.
/// `base_dir` resolves relative input paths.
pub fn resolve(text: Option<&str>, overrides: &Overrides, base_dir: &Path) -> Result<RunConfig, ConfigError> {
    let mut root: toml::Table = match text {
        Some(t) => t
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?,
        None => toml::Table::new(),
    };
    for s in &overrides.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| ConfigError::Parse(format!("override {s:?} is not key=value")))?;
        set_path(&mut root, k.trim(), parse_value(v.trim()))?;
    }
    if let Some(seed) = overrides.seed {
        root.insert("seed".into(), Value::Integer(seed_to_toml(seed)?));
    }
    if let Some(dir) = &overrides.output_dir {
        root.insert("output_dir".into(), Value::String(dir.display().to_string()));
    }
    let master = match root.get("seed") {
        Some(Value::Integer(s)) if *s >= 0 => *s as u64,
        Some(_) => {
            return Err(ConfigError::Validation(vec![
                "seed must be a non-negative integer".into()
            ]))
        }
        None => return Err(ConfigError::Validation(vec!["seed is required".into()])),
    };
    for (section, index) in SEEDED_SECTIONS {
        let entry = root
            .entry(section.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
        if let Some(t) = entry.as_table_mut() {
            t.entry("seed".to_string())
                .or_insert(Value::Integer(derive_seed(master, index) as i64));
        }
    }

    let mut cfg: RunConfig = Value::Table(root).try_into().map_err(|e: toml::de::Error| {
        let msg = e.to_string();
        if msg.contains("unknown field") || msg.contains("unknown variant") || msg.contains("missing field") {
            ConfigError::Validation(vec![msg.trim().to_string()])
        } else {
            ConfigError::Parse(msg)
        }
    })?;
    for p in [&mut cfg.dataset_file, &mut cfg.feature_file].into_iter().flatten() {
        if p.is_relative() {
            *p = base_dir.join(&*p);
        }
    }
    let v = cfg.violations();
    if v.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Validation(v))
    }
}

fn seed_to_toml(seed: u64) -> Result<i64, ConfigError> {
    i64::try_from(seed).map_err(|_| ConfigError::Validation(vec![format!("seed {seed} exceeds {}", i64::MAX)]))
}

/// Reads and resolves a config file (or defaults when `path` is `None`).
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?;
            resolve(Some(&text), overrides, p.parent().unwrap_or(Path::new(".")))
        }
        None => resolve(None, overrides, Path::new(".")),
    }
}

impl RunConfig {
    pub fn uses_external_data(&self) -> bool {
        self.dataset_file.is_some() || self.feature_file.is_some()
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            dataset: self.dataset.clone(),
            encoder: self.encoder.clone(),
            adam: self.adam.clone(),
            pool: self.pool.clone(),
            trainer: self.trainer.clone(),
            eval: self.eval.clone(),
        }
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        if self.ablation.seeds.is_empty() {
            (0..3).map(|k| self.seed.wrapping_add(k)).collect()
        } else {
            self.ablation.seeds.clone()
        }
    }

    pub fn ablation_variants(&self) -> insclr::Result<Vec<Variant>> {
        self.ablation.variants.iter().map(|s| Variant::parse(s)).collect()
    }

    /// Every violated invariant across the whole config.
    pub fn violations(&self) -> Vec<String> {
        let external = self.uses_external_data();
        let mut v: Vec<String> = self
            .experiment()
            .violations()
            .into_iter()
            // External data fixes its own dimension; checked after loading.
            .filter(|m| !(external && m.starts_with("encoder.input_dim")))
            .collect();
        if self.dataset_file.is_some() && self.feature_file.is_some() {
            v.push("set at most one of dataset_file and feature_file".into());
        }
        for p in [&self.dataset_file, &self.feature_file].into_iter().flatten() {
            if !p.is_file() {
                v.push(format!("input file {} does not exist", p.display()));
            }
        }
        if self.curves_window < 1 {
            v.push("curves_window must be >= 1".into());
        }
        if self.ablation.random_negatives < 1 {
            v.push("ablation.random_negatives must be >= 1".into());
        }
        for name in &self.ablation.variants {
            if Variant::parse(name).is_err() {
                v.push(format!("ablation.variants: unknown variant {name:?}"));
            }
        }
        if self.ablation.variants.is_empty() {
            v.push("ablation.variants must not be empty".into());
        }
        v
    }

    /// The resolved config as TOML, for the run directory.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}
