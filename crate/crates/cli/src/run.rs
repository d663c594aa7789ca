//! Subcommand execution and the run-directory layout.
//!
//! ```text
//! <output_dir>/
//!   config.toml            resolved config, every default spelled out
//!   manifest.json          per command: master seed, config and artifact sha256
//!   dataset.json           gen-data
//!   pool.json              build-pool
//!   checkpoints/           train: initial.json, round_<r>.json, final.json
//!   pools/                 train: round_<r>.json
//!   history.csv            train
//!   curves.csv             train (analytics on, labelled data)
//!   metrics.json           train, eval
//!   rankings.csv           eval --rankings
//!   ablation.csv           ablate
//! ```
//!
//! Commands that need a dataset take it from `dataset_file` or
//! `feature_file` when set, then from `<output_dir>/dataset.json` when a
//! previous `gen-data` left one, and otherwise regenerate it from the
//! `dataset` section. Commands that need an encoder use
//! `checkpoints/final.json` when present and the seeded initial encoder
//! otherwise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use insclr::ablation::{run_ablation, summarize, write_ablation, AblationSettings};
use insclr::analytics::export_curves;
use insclr::candidates::{build_candidate_pool, encode_clean};
use insclr::encoder::{init_encoder, Encoder, EncoderState};
use insclr::evaluator::{evaluate_features, multiview_features, EvalReport};
use insclr::synthdata::{generate_dataset, Dataset};
use insclr::trainer::{train, write_history};
use insclr::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    BuildPool,
    Train,
    Eval { rankings: bool },
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::BuildPool => "build-pool",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub config_sha256: String,
    /// Artifact path relative to the run directory -> sha256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

/// Keyed by command name; later runs of a command replace its entry.
pub type Manifest = BTreeMap<String, ManifestEntry>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics<'a> {
    pub map: f64,
    pub num_queries: usize,
    pub per_class_ap: &'a BTreeMap<usize, f64>,
    /// mAP of the untrained encoder, when `train` produced these metrics.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_map: Option<f64>,
    pub encoder_checksum: String,
    pub config: &'a RunConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha256(path: &Path) -> Result<String> {
    fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

/// Resolves the dataset as described in the module docs.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = if let Some(p) = &cfg.dataset_file {
        Dataset::load(p)?
    } else if let Some(p) = &cfg.feature_file {
        Dataset::from_feature_file(p, &cfg.dataset)?
    } else {
        let cached = cfg.output_dir.join("dataset.json");
        if cached.is_file() {
            let ds = Dataset::load(&cached)?;
            if ds.config == cfg.dataset {
                return check_dims(cfg, ds);
            }
        }
        generate_dataset(&cfg.dataset)?
    };
    check_dims(cfg, ds)
}

fn check_dims(cfg: &RunConfig, ds: Dataset) -> Result<Dataset> {
    if ds.input_dim() != cfg.encoder.input_dim {
        return Err(Error::InvalidConfig(format!(
            "encoder.input_dim ({}) must equal the data dimension ({})",
            cfg.encoder.input_dim,
            ds.input_dim()
        )));
    }
    Ok(ds)
}

/// The trained encoder if this run directory has one, else the initial one.
pub fn current_encoder(cfg: &RunConfig) -> Result<EncoderState> {
    let trained = cfg.output_dir.join("checkpoints").join("final.json");
    if trained.is_file() {
        let enc = EncoderState::load(&trained)?;
        if enc.input_dim() != cfg.encoder.input_dim || enc.embed_dim() != cfg.encoder.embed_dim {
            return Err(Error::InvalidConfig(format!(
                "{} does not match the encoder section ({}x{})",
                trained.display(),
                cfg.encoder.input_dim,
                cfg.encoder.embed_dim
            )));
        }
        return Ok(enc);
    }
    init_encoder(&cfg.encoder)
}

/// Runs `cmd`, writes its artifacts and manifest entry, and returns the
/// artifact paths relative to the run directory.
pub fn run_command(cmd: Command, cfg: &RunConfig) -> Result<Vec<String>> {
    let out = &cfg.output_dir;
    create_dir(out)?;
    let config_text = cfg.to_toml();
    write_text(&out.join("config.toml"), &config_text)?;

    let artifacts = match cmd {
        Command::GenData => gen_data(cfg)?,
        Command::BuildPool => build_pool(cfg)?,
        Command::Train => run_train(cfg)?,
        Command::Eval { rankings } => run_eval(cfg, rankings)?,
        Command::Ablate => run_ablate(cfg)?,
    };

    let mut entry = ManifestEntry {
        seed: cfg.seed,
        config_sha256: sha256_hex(config_text.as_bytes()),
        artifacts: BTreeMap::new(),
    };
    for a in &artifacts {
        entry.artifacts.insert(a.clone(), file_sha256(&out.join(a))?);
    }
    let manifest_path = out.join("manifest.json");
    let mut manifest: Manifest = match fs::read_to_string(&manifest_path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e))?,
        Err(_) => Manifest::new(),
    };
    manifest.insert(cmd.name().to_string(), entry);
    write_json(&manifest_path, &manifest)?;
    Ok(artifacts)
}

fn gen_data(cfg: &RunConfig) -> Result<Vec<String>> {
    let ds = match (&cfg.dataset_file, &cfg.feature_file) {
        (None, None) => generate_dataset(&cfg.dataset)?,
        _ => load_dataset(cfg)?,
    };
    ds.save(&cfg.output_dir.join("dataset.json"))?;
    Ok(vec!["dataset.json".into()])
}

fn build_pool(cfg: &RunConfig) -> Result<Vec<String>> {
    let ds = load_dataset(cfg)?;
    let enc = current_encoder(cfg)?;
    let pool = build_candidate_pool(&encode_clean(&enc, &ds)?, &cfg.pool)?.with_encoder_checksum(enc.checksum());
    pool.save(&cfg.output_dir.join("pool.json"))?;
    Ok(vec!["pool.json".into()])
}

fn evaluate(enc: &EncoderState, ds: &Dataset, cfg: &RunConfig, rankings: bool) -> Result<EvalReport> {
    let labels = ds.labels().ok_or(Error::MissingLabels("evaluation"))?;
    let features = multiview_features(enc, ds, cfg.eval.num_views)?;
    evaluate_features(&features, &labels, &cfg.eval, rankings)
}

fn write_metrics(cfg: &RunConfig, report: &EvalReport, initial_map: Option<f64>, enc: &EncoderState) -> Result<()> {
    let metrics = Metrics {
        map: report.map,
        num_queries: report.num_queries,
        per_class_ap: &report.per_class_ap,
        initial_map,
        encoder_checksum: enc.checksum(),
        config: cfg,
    };
    write_json(&cfg.output_dir.join("metrics.json"), &metrics)
}

fn run_train(cfg: &RunConfig) -> Result<Vec<String>> {
    let out = &cfg.output_dir;
    let ds = load_dataset(cfg)?;
    let labels = ds.labels();
    let initial = init_encoder(&cfg.encoder)?;
    let mut artifacts = Vec::new();
    let mut save = |rel: String, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        f(&out.join(&rel))?;
        artifacts.push(rel);
        Ok(())
    };

    create_dir(&out.join("checkpoints"))?;
    create_dir(&out.join("pools"))?;
    save("checkpoints/initial.json".into(), &|p| initial.save(p))?;
    let initial_map = labels
        .as_ref()
        .map(|_| evaluate(&initial, &ds, cfg, false))
        .transpose()?;

    let analytics_labels = if cfg.analytics { labels.as_ref() } else { None };
    let output = train(&ds, initial, &cfg.trainer, &cfg.adam, &cfg.pool, analytics_labels)?;
    for (r, ck) in output.checkpoints.iter().enumerate() {
        save(format!("checkpoints/round_{r}.json"), &|p| ck.save(p))?;
    }
    for (r, pool) in output.pools.iter().enumerate() {
        save(format!("pools/round_{r}.json"), &|p| pool.save(p))?;
    }
    save("checkpoints/final.json".into(), &|p| output.encoder.save(p))?;
    save("history.csv".into(), &|p| write_history(&output.history, p))?;
    if analytics_labels.is_some() && !output.history.is_empty() {
        save("curves.csv".into(), &|p| {
            export_curves(&output.history, p, cfg.curves_window)
        })?;
    }
    if labels.is_some() {
        let report = evaluate(&output.encoder, &ds, cfg, false)?;
        let initial_map = initial_map.map(|r| r.map);
        save("metrics.json".into(), &|_| {
            write_metrics(cfg, &report, initial_map, &output.encoder)
        })?;
    }
    Ok(artifacts)
}

fn run_eval(cfg: &RunConfig, rankings: bool) -> Result<Vec<String>> {
    let ds = load_dataset(cfg)?;
    let enc = current_encoder(cfg)?;
    let report = evaluate(&enc, &ds, cfg, rankings)?;
    write_metrics(cfg, &report, None, &enc)?;
    let mut artifacts = vec!["metrics.json".to_string()];
    if rankings {
        let mut text = String::from("query_id,class_id,ap,ranking\n");
        for q in &report.queries {
            let ranked: Vec<String> = q.ranking.iter().flatten().map(|id| id.to_string()).collect();
            let _ = writeln!(text, "{},{},{},{}", q.id, q.class_id, q.ap, ranked.join(" "));
        }
        write_text(&cfg.output_dir.join("rankings.csv"), &text)?;
        artifacts.push("rankings.csv".into());
    }
    Ok(artifacts)
}

fn run_ablate(cfg: &RunConfig) -> Result<Vec<String>> {
    let variants = cfg.ablation_variants()?;
    let fixed = if cfg.uses_external_data() {
        Some(load_dataset(cfg)?)
    } else {
        None
    };
    let settings = AblationSettings {
        random_negatives: cfg.ablation.random_negatives,
    };
    let mut exp = cfg.experiment();
    if let Some(ds) = &fixed {
        // External data fixes the input dimension.
        exp.dataset.input_dim = ds.input_dim();
    }
    let mut rows = run_ablation(&exp, fixed.as_ref(), &cfg.ablation_seeds(), &variants, &settings)?;
    rows.extend(summarize(&rows, &variants));
    write_ablation(&rows, &cfg.output_dir.join("ablation.csv"))?;
    Ok(vec!["ablation.csv".into()])
}
