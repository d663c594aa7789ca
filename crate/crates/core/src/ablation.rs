//! The mining-variant grid and one-call experiment runs.
//!
//! | variant | batch selection | memory mining | extra negatives |
//! |---------|-----------------|---------------|-----------------|
//! | A | `nn` | off | none |
//! | B | `nn` | off | random memory |
//! | C | `unaugmented` | off | random memory |
//! | D-anchor | `unaugmented` | anchor only | candidate pool |
//! | D | `unaugmented` | query set | candidate pool |
//!
//! Everything not named in the table (thresholds, k, iterations, schedule)
//! comes from the base configuration.
//!
//! # ablation.csv
//!
//! Header `variant,seed,map,initial_map,batch_precision,mem_precision`. One
//! row per variant and seed, followed by one `mean` row per variant.
//! Precisions are run-wide means over steps where they are defined.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analytics::mean_present;
use crate::candidates::PoolConfig;
use crate::encoder::{init_encoder, AdamConfig, EncoderConfig, EncoderState};
use crate::evaluator::{evaluate_map, EvalConfig, EvalReport};
use crate::loss::NegativeSource;
use crate::miner::{BatchStrategy, QuerySetMode};
use crate::synthdata::{generate_dataset, Dataset, DatasetConfig};
use crate::trainer::{train, TrainOutput, TrainerConfig};
use crate::{Error, Result};

pub const ABLATION_HEADER: &str = "variant,seed,map,initial_map,batch_precision,mem_precision";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    #[serde(rename = "D-anchor")]
    DAnchor,
    D,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::DAnchor, Variant::D];

    pub fn name(self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::DAnchor => "D-anchor",
            Variant::D => "D",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation variant {s:?}")))
    }

    /// `base` with this variant's mining switches applied.
    pub fn apply(self, base: &TrainerConfig, random_negatives: usize) -> TrainerConfig {
        let mut cfg = base.clone();
        let (strategy, mining, negatives) = match self {
            Variant::A => (BatchStrategy::Nn, None, NegativeSource::None),
            Variant::B => (
                BatchStrategy::Nn,
                None,
                NegativeSource::RandomMemory { n: random_negatives },
            ),
            Variant::C => (
                BatchStrategy::Unaugmented,
                None,
                NegativeSource::RandomMemory { n: random_negatives },
            ),
            Variant::DAnchor => (
                BatchStrategy::Unaugmented,
                Some(QuerySetMode::AnchorOnly),
                NegativeSource::CandidatePool,
            ),
            Variant::D => (
                BatchStrategy::Unaugmented,
                Some(QuerySetMode::Full),
                NegativeSource::CandidatePool,
            ),
        };
        cfg.batch.strategy = strategy;
        match mining {
            Some(mode) => {
                cfg.memory.query_set_mode = mode;
                if cfg.memory.iterations == 0 {
                    cfg.memory.iterations = 1;
                }
            }
            None => cfg.memory.iterations = 0,
        }
        cfg.negative_source = negatives;
        cfg
    }
}

/// Every section needed for one end-to-end run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub adam: AdamConfig,
    pub pool: PoolConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

/// A section seed derived from a master seed (splitmix64 of the pair),
/// kept below 2^63 so it survives signed-integer config formats.
pub fn derive_seed(master: u64, section: u64) -> u64 {
    let mut z = master
        .wrapping_add(section.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) >> 1
}

impl Experiment {
    /// Copy with every section seed derived from `master`.
    pub fn with_seed(&self, master: u64) -> Experiment {
        let mut e = self.clone();
        e.dataset.seed = derive_seed(master, 1);
        e.encoder.seed = derive_seed(master, 2);
        e.trainer.seed = derive_seed(master, 3);
        e.eval.seed = derive_seed(master, 4);
        e
    }

    /// Every violated invariant across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        v.extend(self.dataset.violations().into_iter().map(|s| format!("dataset.{s}")));
        v.extend(self.encoder.violations().into_iter().map(|s| format!("encoder.{s}")));
        v.extend(self.adam.violations());
        v.extend(self.trainer.violations());
        v.extend(self.eval.violations());
        if self.pool.pool_size < 1 {
            v.push("pool.pool_size must be >= 1".to_string());
        }
        if self.pool.pool_size < self.trainer.batch.n_b {
            v.push(format!(
                "pool.pool_size ({}) must be >= trainer.batch.n_b ({})",
                self.pool.pool_size, self.trainer.batch.n_b
            ));
        }
        for (key, views) in [
            ("eval.num_views", self.eval.num_views),
            ("trainer.multiscale_views", self.trainer.multiscale_views),
        ] {
            if views > self.dataset.num_aux_views {
                v.push(format!(
                    "{key} ({views}) must not exceed dataset.num_aux_views ({})",
                    self.dataset.num_aux_views
                ));
            }
        }
        if self.encoder.input_dim != self.dataset.input_dim {
            v.push(format!(
                "encoder.input_dim ({}) must equal dataset.input_dim ({})",
                self.encoder.input_dim, self.dataset.input_dim
            ));
        }
        v
    }
}

/// Outcome of training and evaluating one configuration.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub initial: EvalReport,
    pub final_report: EvalReport,
    pub output: TrainOutput,
}

/// Trains from `exp.encoder`'s initialization on `dataset` and evaluates
/// before and after.
pub fn run_experiment(exp: &Experiment, dataset: &Dataset) -> Result<RunResult> {
    let encoder: EncoderState = init_encoder(&exp.encoder)?;
    let labels = dataset.labels();
    let initial = evaluate_map(&encoder, dataset, &exp.eval)?;
    let output = train(dataset, encoder, &exp.trainer, &exp.adam, &exp.pool, labels.as_ref())?;
    let final_report = evaluate_map(&output.encoder, dataset, &exp.eval)?;
    Ok(RunResult {
        initial,
        final_report,
        output,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// `None` on the per-variant mean rows.
    pub seed: Option<u64>,
    pub map: f64,
    pub initial_map: f64,
    pub batch_precision: Option<f64>,
    pub mem_precision: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSettings {
    /// Bank samples drawn per step by the random-memory variants.
    pub random_negatives: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings { random_negatives: 64 }
    }
}

/// Runs each variant for each seed. With `fixed` the same dataset is used
/// throughout; otherwise one is generated per seed from `exp.dataset`.
pub fn run_ablation(
    exp: &Experiment,
    fixed: Option<&Dataset>,
    seeds: &[u64],
    variants: &[Variant],
    settings: &AblationSettings,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let seeded = exp.with_seed(seed);
        let generated;
        let dataset = match fixed {
            Some(d) => d,
            None => {
                generated = generate_dataset(&seeded.dataset)?;
                &generated
            }
        };
        for &variant in variants {
            let run_exp = Experiment {
                trainer: variant.apply(&seeded.trainer, settings.random_negatives),
                ..seeded.clone()
            };
            let r = run_experiment(&run_exp, dataset)?;
            rows.push(AblationRow {
                variant,
                seed: Some(seed),
                map: r.final_report.map,
                initial_map: r.initial.map,
                batch_precision: mean_present(r.output.history.iter().map(|h| h.batch_precision)),
                mem_precision: mean_present(r.output.history.iter().map(|h| h.mem_precision)),
            });
        }
    }
    Ok(rows)
}

/// One mean row per variant, in `variants` order.
pub fn summarize(rows: &[AblationRow], variants: &[Variant]) -> Vec<AblationRow> {
    variants
        .iter()
        .filter_map(|&v| {
            let of: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v && r.seed.is_some()).collect();
            if of.is_empty() {
                return None;
            }
            let n = of.len() as f64;
            Some(AblationRow {
                variant: v,
                seed: None,
                map: of.iter().map(|r| r.map).sum::<f64>() / n,
                initial_map: of.iter().map(|r| r.initial_map).sum::<f64>() / n,
                batch_precision: mean_present(of.iter().map(|r| r.batch_precision)),
                mem_precision: mean_present(of.iter().map(|r| r.mem_precision)),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variant.name(),
            r.seed.map_or("mean".to_string(), |s| s.to_string()),
            r.map,
            r.initial_map,
            opt(r.batch_precision),
            opt(r.mem_precision)
        );
    }
    out
}

pub fn write_ablation(rows: &[AblationRow], path: &Path) -> Result<()> {
    fs::write(path, ablation_csv(rows)).map_err(|e| Error::io(path, e))
}
