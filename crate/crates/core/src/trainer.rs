//! Batches, the per-step pipeline and the multi-round schedule.
//!
//! One step: encode augmented and clean views of every batch image, write
//! both memory banks, then per tuple select batch positives, mine the memory
//! bank, build the loss context and evaluate the loss. Tuple losses are
//! averaged; their gradients are reduced in a fixed order and applied with a
//! single Adam update.
//!
//! A run has `rounds` rounds of `steps_per_round` steps. The first round
//! uses a candidate pool built from the initial encoder; every later round
//! starts from a pool rebuilt with the current encoder. The learning rate
//! restarts at the base rate each round and drops ×0.1 at each configured
//! fraction of the round.
//!
//! # history.csv
//!
//! Header `step,round,loss,lr,n_batch_pos,n_mem_pos,batch_precision,mem_precision`,
//! one row per step. Counts are per-tuple means; precisions are empty when
//! labels are unavailable or nothing was selected.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{mean_present, mining_precision, true_positive_count};
use crate::candidates::{build_candidate_pool, encode_clean, refresh_pool, CandidatePool, PoolConfig};
use crate::encoder::{AdamConfig, Encoder, EncoderState, Forward};
use crate::evaluator::multiview_feature;
use crate::loss::{build_loss_context, contrastive_loss, BatchFeatures, NegativeSource, DEFAULT_GATE};
use crate::membank::{init_banks, MemoryBank};
use crate::miner::{
    mine_memory_positives, select_batch_positives, BatchMiningConfig, BatchStrategy, MemoryMining, MemoryMiningConfig,
    MiningResult, QueryFeatureSource, QuerySet, TupleViews,
};
use crate::numerics::{Matrix, RawVector, UnitVector};
use crate::synthdata::{Dataset, Labels};
use crate::{Error, Result};

pub const HISTORY_HEADER: &str = "step,round,loss,lr,n_batch_pos,n_mem_pos,batch_precision,mem_precision";

/// Random stream ids carved out of the run seed.
const ANCHOR_STREAM: u64 = 1;
const BANK_STREAM: u64 = 2;
const STEP_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub tuples_per_batch: usize,
    pub steps_per_round: usize,
    pub rounds: usize,
    /// Fractions of a round at which the learning rate drops ×0.1.
    pub lr_drops: Vec<f64>,
    pub seed: u64,
    pub batch: BatchMiningConfig,
    pub memory: MemoryMiningConfig,
    pub negative_source: NegativeSource,
    pub gate: f64,
    /// Views fused by the `multiscale` batch strategy.
    pub multiscale_views: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            tuples_per_batch: 16,
            steps_per_round: 300,
            rounds: 2,
            lr_drops: vec![0.8],
            seed: 0,
            batch: BatchMiningConfig::default(),
            memory: MemoryMiningConfig::default(),
            negative_source: NegativeSource::CandidatePool,
            gate: DEFAULT_GATE,
            multiscale_views: 3,
        }
    }
}

impl TrainerConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.tuples_per_batch < 1 {
            v.push("trainer.tuples_per_batch must be >= 1".to_string());
        }
        if self.rounds < 1 {
            v.push("trainer.rounds must be >= 1".to_string());
        }
        if self.batch.n_b < 1 {
            v.push("trainer.batch.n_b must be >= 1 (N_b >= 1)".to_string());
        }
        if !self.batch.threshold.is_finite() {
            v.push("trainer.batch.threshold must be finite".to_string());
        }
        if !self.gate.is_finite() {
            v.push("trainer.gate must be finite".to_string());
        }
        if self.multiscale_views < 1 {
            v.push("trainer.multiscale_views must be >= 1".to_string());
        }
        if self.lr_drops.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            v.push("trainer.lr_drops must lie in (0, 1)".to_string());
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) {
            v.push("trainer.lr_drops must be strictly increasing".to_string());
        }
        if let NegativeSource::RandomMemory { n } = self.negative_source {
            if n < 1 {
                v.push("trainer.negative_source.n must be >= 1".to_string());
            }
        }
        v.extend(self.memory.violations());
        v
    }

    pub fn batch_size(&self) -> usize {
        self.tuples_per_batch * (self.batch.n_b + 1)
    }

    /// `(round step, lr)` breakpoints for a base rate.
    pub fn lr_schedule(&self, base_lr: f64) -> Vec<(usize, f64)> {
        let mut out = vec![(0, base_lr)];
        let mut lr = base_lr;
        for f in &self.lr_drops {
            lr *= 0.1;
            out.push(((f * self.steps_per_round as f64).floor() as usize, lr));
        }
        out
    }

    /// Learning rate at zero-based `round_step`.
    pub fn lr_at(&self, base_lr: f64, round_step: usize) -> f64 {
        self.lr_schedule(base_lr)
            .into_iter()
            .take_while(|&(s, _)| s <= round_step)
            .last()
            .map_or(base_lr, |(_, lr)| lr)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seeded permutation of all ids, consumed in order and reshuffled when
/// exhausted.
#[derive(Debug, Clone)]
pub struct AnchorSampler {
    order: Vec<usize>,
    next: usize,
    rng: ChaCha8Rng,
}

impl AnchorSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        AnchorSampler {
            order: (0..n).collect(),
            next: n,
            rng: stream_rng(seed, ANCHOR_STREAM),
        }
    }

    fn pull(&mut self) -> usize {
        if self.next == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }

    /// `count` distinct anchors.
    pub fn next_batch(&mut self, count: usize) -> Result<Vec<usize>> {
        if count > self.order.len() {
            return Err(Error::InvalidConfig(format!(
                "{count} anchors requested from {} images",
                self.order.len()
            )));
        }
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let id = self.pull();
            if seen.insert(id) {
                out.push(id);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrainingTuple {
    pub anchor_id: usize,
    pub neighbor_ids: Vec<usize>,
}

impl TrainingTuple {
    /// Anchor first, then neighbors.
    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.anchor_id).chain(self.neighbor_ids.iter().copied())
    }
}

/// One tuple per anchor, each with the first `n_b` pool entries not already
/// in the batch. Anchors are reserved before any neighbor is placed.
pub fn build_batch(anchor_ids: &[usize], pool: &CandidatePool, n_b: usize) -> Result<Vec<TrainingTuple>> {
    let mut placed: HashSet<usize> = HashSet::new();
    for &a in anchor_ids {
        if !placed.insert(a) {
            return Err(Error::InvalidInput(format!("anchor {a} appears twice in one batch")));
        }
    }
    anchor_ids
        .iter()
        .map(|&anchor| {
            let mut neighbor_ids = Vec::with_capacity(n_b);
            for n in pool.neighbors(anchor)? {
                if neighbor_ids.len() == n_b {
                    break;
                }
                if placed.insert(n.id) {
                    neighbor_ids.push(n.id);
                }
            }
            if neighbor_ids.len() < n_b {
                return Err(Error::PoolExhausted { anchor, needed: n_b });
            }
            Ok(TrainingTuple {
                anchor_id: anchor,
                neighbor_ids,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// One-based global step.
    pub step: u64,
    /// Zero-based round.
    pub round: usize,
    pub loss: f64,
    pub lr: f64,
    /// Mean batch positives per tuple.
    pub n_batch_pos: f64,
    /// Mean memory positives per tuple.
    pub n_mem_pos: f64,
    pub batch_precision: Option<f64>,
    pub mem_precision: Option<f64>,
    /// Memory positives sharing their anchor's class, summed over tuples.
    #[serde(skip)]
    pub mem_true_positives: Option<usize>,
}

/// Mutable training state carried across steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub encoder: EncoderState,
    pub clean_bank: MemoryBank,
    pub aug_bank: MemoryBank,
    /// Steps completed so far.
    pub step: u64,
}

impl TrainState {
    pub fn new(encoder: EncoderState, dataset: &Dataset, seed: u64) -> Result<Self> {
        let bank_seed: u64 = stream_rng(seed, BANK_STREAM).random();
        let (clean_bank, aug_bank) = init_banks(&encoder, dataset, bank_seed)?;
        Ok(TrainState {
            encoder,
            clean_bank,
            aug_bank,
            step: 0,
        })
    }
}

struct TupleOutcome {
    loss: f64,
    grads: BTreeMap<usize, Vec<f64>>,
    n_batch: usize,
    n_mem: usize,
    batch_precision: Option<f64>,
    mem_precision: Option<f64>,
    mem_true_positives: usize,
}

/// Everything a tuple reads during a step.
struct StepInputs<'a> {
    ids: &'a [usize],
    augmented: &'a [Forward],
    clean: &'a [UnitVector],
    multiscale: Option<&'a [UnitVector]>,
    random_ids: &'a [usize],
}

fn run_tuple(
    offset: usize,
    tuple: &TrainingTuple,
    inputs: &StepInputs,
    state: &TrainState,
    pool: &CandidatePool,
    cfg: &TrainerConfig,
    labels: Option<&Labels>,
) -> Result<TupleOutcome> {
    let span = offset..offset + tuple.neighbor_ids.len() + 1;
    let aug_feats: Vec<UnitVector> = inputs.augmented[span.clone()]
        .iter()
        .map(|f| f.feature.clone())
        .collect();
    let views = TupleViews {
        clean: Some(&inputs.clean[span.clone()]),
        augmented: Some(&aug_feats),
        multiscale: inputs.multiscale.map(|m| &m[span.clone()]),
    };
    let selection = select_batch_positives(&tuple.neighbor_ids, &views, &cfg.batch)?;

    let query_feature = |k: usize, id: usize| -> Result<UnitVector> {
        match cfg.memory.query_features {
            QueryFeatureSource::Fresh => Ok(inputs.clean[offset + k].clone()),
            QueryFeatureSource::Bank => state.clean_bank.get(id).cloned(),
        }
    };
    let mut query = QuerySet::new(tuple.anchor_id, query_feature(0, tuple.anchor_id)?);
    for (k, &id) in tuple.neighbor_ids.iter().enumerate() {
        if selection.selected.contains(&id) {
            query.push(id, query_feature(k + 1, id)?);
        }
    }
    let pool_ids = pool.neighbor_ids(tuple.anchor_id)?;
    let (memory, _): (MemoryMining, QuerySet) =
        mine_memory_positives(&query, &pool_ids, &state.clean_bank, &cfg.memory, inputs.ids)?;

    let mining = MiningResult {
        batch_positive_ids: selection.selected,
        batch_negative_ids: selection.rejected,
        memory_positive_ids: memory.positives,
        memory_negative_ids: memory.negatives,
    };
    let batch = BatchFeatures {
        ids: inputs.ids,
        augmented: inputs.augmented,
    };
    let ctx = build_loss_context(
        tuple.anchor_id,
        &mining,
        &batch,
        &state.aug_bank,
        cfg.negative_source,
        inputs.random_ids,
        cfg.gate,
    )?;
    let report = contrastive_loss(&ctx)?;

    let (batch_precision, mem_precision, mem_true_positives) = match labels {
        Some(l) => {
            let c = l.class_of(tuple.anchor_id)?;
            (
                mining_precision(&mining.batch_positive_ids, c, l)?,
                mining_precision(&mining.memory_positive_ids, c, l)?,
                true_positive_count(&mining.memory_positive_ids, c, l)?,
            )
        }
        None => (None, None, 0),
    };
    Ok(TupleOutcome {
        loss: report.value,
        grads: report.grads,
        n_batch: mining.batch_positive_ids.len(),
        n_mem: mining.memory_positive_ids.len(),
        batch_precision,
        mem_precision,
        mem_true_positives,
    })
}

/// One optimization step over `tuples`. `adam.lr` is the rate for this step.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    state: &mut TrainState,
    dataset: &Dataset,
    tuples: &[TrainingTuple],
    pool: &CandidatePool,
    cfg: &TrainerConfig,
    adam: &AdamConfig,
    round: usize,
    labels: Option<&Labels>,
) -> Result<StepRecord> {
    if tuples.is_empty() {
        return Err(Error::InvalidInput("a step needs at least one tuple".into()));
    }
    let step = state.step + 1;
    let mut rng = stream_rng(cfg.seed, STEP_STREAM_BASE + step);
    let ids: Vec<usize> = tuples.iter().flat_map(TrainingTuple::ids).collect();

    // Step 1: encode and refresh both banks.
    let inputs_aug: Vec<RawVector> = ids
        .iter()
        .map(|&id| dataset.augmented_view(id, &mut rng))
        .collect::<Result<_>>()?;
    let augmented: Vec<Forward> = inputs_aug
        .par_iter()
        .map(|x| state.encoder.forward(x))
        .collect::<Result<_>>()?;
    let clean: Vec<UnitVector> = ids
        .par_iter()
        .map(|&id| state.encoder.encode(&dataset.clean_view(id)?))
        .collect::<Result<_>>()?;
    let multiscale: Option<Vec<UnitVector>> = match cfg.batch.strategy {
        BatchStrategy::Multiscale => Some(
            ids.par_iter()
                .map(|&id| multiview_feature(&state.encoder, dataset, id, cfg.multiscale_views))
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };
    let aug_feats: Vec<UnitVector> = augmented.iter().map(|f| f.feature.clone()).collect();
    state.clean_bank.update_entries(&ids, &clean, step)?;
    state.aug_bank.update_entries(&ids, &aug_feats, step)?;

    let random_ids = match cfg.negative_source {
        NegativeSource::RandomMemory { n } => state.aug_bank.sample_ids(n, &ids, &mut rng),
        _ => Vec::new(),
    };

    // Steps 2-4 per tuple.
    let inputs = StepInputs {
        ids: &ids,
        augmented: &augmented,
        clean: &clean,
        multiscale: multiscale.as_deref(),
        random_ids: &random_ids,
    };
    let mut offsets = Vec::with_capacity(tuples.len());
    let mut at = 0;
    for t in tuples {
        offsets.push(at);
        at += t.neighbor_ids.len() + 1;
    }
    let frozen: &TrainState = state;
    let outcomes: Vec<TupleOutcome> = tuples
        .par_iter()
        .zip(&offsets)
        .map(|(t, &off)| {
            run_tuple(off, t, &inputs, frozen, pool, cfg, labels).map_err(|e| Error::TupleFailed {
                anchor: t.anchor_id,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    // Fixed-order reduction of the mean tuple loss's gradient.
    let scale = 1.0 / tuples.len() as f64;
    let mut per_id: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for o in &outcomes {
        for (&id, g) in &o.grads {
            let acc = per_id.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            acc.iter_mut().zip(g).for_each(|(a, x)| *a += scale * x);
        }
    }
    let (rows, cols) = state.encoder.weights.shape();
    let mut grads = Matrix::zeros(rows, cols);
    for (k, id) in ids.iter().enumerate() {
        if let Some(g) = per_id.get(id) {
            state.encoder.accumulate_backward(&mut grads, &inputs_aug[k], g)?;
        }
    }
    state.encoder.adam_step(&grads, adam)?;
    state.step = step;

    let n = outcomes.len() as f64;
    Ok(StepRecord {
        step,
        round,
        loss: outcomes.iter().map(|o| o.loss).sum::<f64>() * scale,
        lr: adam.lr,
        n_batch_pos: outcomes.iter().map(|o| o.n_batch as f64).sum::<f64>() / n,
        n_mem_pos: outcomes.iter().map(|o| o.n_mem as f64).sum::<f64>() / n,
        batch_precision: mean_present(outcomes.iter().map(|o| o.batch_precision)),
        mem_precision: mean_present(outcomes.iter().map(|o| o.mem_precision)),
        mem_true_positives: labels.map(|_| outcomes.iter().map(|o| o.mem_true_positives).sum()),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub encoder: EncoderState,
    pub history: Vec<StepRecord>,
    /// Encoder at the end of each round.
    pub checkpoints: Vec<EncoderState>,
    /// The pool used by each round.
    pub pools: Vec<CandidatePool>,
}

/// Runs every round. `labels` only feeds the precision columns of the
/// history.
pub fn train(
    dataset: &Dataset,
    encoder: EncoderState,
    cfg: &TrainerConfig,
    adam: &AdamConfig,
    pool_cfg: &PoolConfig,
    labels: Option<&Labels>,
) -> Result<TrainOutput> {
    let mut v = cfg.violations();
    v.extend(adam.violations());
    if !v.is_empty() {
        return Err(Error::InvalidConfig(v.join("; ")));
    }
    check_encoder_fits(&encoder, dataset)?;
    if cfg.steps_per_round == 0 {
        return Ok(TrainOutput {
            encoder,
            history: Vec::new(),
            checkpoints: Vec::new(),
            pools: Vec::new(),
        });
    }
    if cfg.batch_size() > dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "batch of {} images exceeds the dataset size {}",
            cfg.batch_size(),
            dataset.len()
        )));
    }

    let mut pool =
        build_candidate_pool(&encode_clean(&encoder, dataset)?, pool_cfg)?.with_encoder_checksum(encoder.checksum());
    let mut state = TrainState::new(encoder, dataset, cfg.seed)?;
    let mut sampler = AnchorSampler::new(dataset.len(), cfg.seed);
    let mut history = Vec::with_capacity(cfg.rounds * cfg.steps_per_round);
    let mut checkpoints = Vec::with_capacity(cfg.rounds);
    let mut pools = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        if round > 0 {
            let prev = PoolConfig {
                round: pool.round(),
                ..pool_cfg.clone()
            };
            pool = refresh_pool(&state.encoder, dataset, &prev)?;
        }
        for round_step in 0..cfg.steps_per_round {
            let anchors = sampler.next_batch(cfg.tuples_per_batch)?;
            let tuples = build_batch(&anchors, &pool, cfg.batch.n_b)?;
            let step_adam = AdamConfig {
                lr: cfg.lr_at(adam.lr, round_step),
                ..adam.clone()
            };
            history.push(train_step(
                &mut state, dataset, &tuples, &pool, cfg, &step_adam, round, labels,
            )?);
        }
        checkpoints.push(state.encoder.clone());
        pools.push(pool.clone());
    }
    Ok(TrainOutput {
        encoder: state.encoder,
        history,
        checkpoints,
        pools,
    })
}

fn check_encoder_fits(encoder: &EncoderState, dataset: &Dataset) -> Result<()> {
    if encoder.input_dim() != dataset.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: dataset.input_dim(),
            actual: encoder.input_dim(),
        });
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn history_csv(history: &[StepRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.round,
            r.loss,
            r.lr,
            r.n_batch_pos,
            r.n_mem_pos,
            opt(r.batch_precision),
            opt(r.mem_precision)
        );
    }
    out
}

pub fn write_history(history: &[StepRecord], path: &Path) -> Result<()> {
    fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::format(path, "unexpected history header"));
    }
    let bad = |what: &str| Error::format(path, format!("bad {what}"));
    let num = |s: &str, what: &str| -> Result<f64> { s.parse().map_err(|_| bad(what)) };
    let maybe = |s: &str, what: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s, what).map(Some)
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(Error::format(path, format!("expected 8 fields, got {}", f.len())));
            }
            Ok(StepRecord {
                step: f[0].parse().map_err(|_| bad("step"))?,
                round: f[1].parse().map_err(|_| bad("round"))?,
                loss: num(f[2], "loss")?,
                lr: num(f[3], "lr")?,
                n_batch_pos: num(f[4], "n_batch_pos")?,
                n_mem_pos: num(f[5], "n_mem_pos")?,
                batch_precision: maybe(f[6], "batch_precision")?,
                mem_precision: maybe(f[7], "mem_precision")?,
                mem_true_positives: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, EncoderConfig};
    use crate::miner::Selection;
    use crate::synthdata::{generate_dataset, DatasetConfig};

    fn small_dataset() -> Dataset {
        generate_dataset(&DatasetConfig {
            num_classes: 6,
            instances_per_class: 8,
            input_dim: 12,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_encoder() -> EncoderState {
        init_encoder(&EncoderConfig {
            input_dim: 12,
            embed_dim: 6,
            init_scale: 0.3,
            seed: 5,
        })
        .unwrap()
    }

    fn small_cfg() -> TrainerConfig {
        TrainerConfig {
            tuples_per_batch: 4,
            steps_per_round: 5,
            rounds: 2,
            seed: 9,
            batch: BatchMiningConfig {
                threshold: 0.3,
                ..Default::default()
            },
            memory: MemoryMiningConfig {
                selection: Selection::Topk { k: 2 },
                iterations: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn pool_cfg() -> PoolConfig {
        PoolConfig {
            pool_size: 10,
            round: 0,
        }
    }

    fn pool_for(enc: &EncoderState, ds: &Dataset) -> CandidatePool {
        build_candidate_pool(&encode_clean(enc, ds).unwrap(), &pool_cfg()).unwrap()
    }

    #[test]
    fn batch_of_sixteen_tuples_has_sixty_four_ids() {
        let ds = generate_dataset(&DatasetConfig {
            num_classes: 10,
            instances_per_class: 10,
            input_dim: 12,
            ..Default::default()
        })
        .unwrap();
        let enc = small_encoder();
        let pool = build_candidate_pool(
            &encode_clean(&enc, &ds).unwrap(),
            &PoolConfig {
                pool_size: 50,
                round: 0,
            },
        )
        .unwrap();
        let anchors = AnchorSampler::new(ds.len(), 1).next_batch(16).unwrap();
        let tuples = build_batch(&anchors, &pool, 3).unwrap();
        let ids: Vec<usize> = tuples.iter().flat_map(TrainingTuple::ids).collect();
        assert_eq!(ids.len(), 64);
        assert_eq!(ids.iter().collect::<HashSet<_>>().len(), 64);
        assert_eq!(tuples, build_batch(&anchors, &pool, 3).unwrap());
    }

    #[test]
    fn single_anchor_takes_its_top_neighbor() {
        let ds = small_dataset();
        let pool = pool_for(&small_encoder(), &ds);
        let t = build_batch(&[7], &pool, 1).unwrap();
        assert_eq!(t[0].neighbor_ids, vec![pool.neighbors(7).unwrap()[0].id]);
    }

    #[test]
    fn collisions_skip_to_next_entry_and_can_exhaust() {
        let ds = small_dataset();
        let pool = pool_for(&small_encoder(), &ds);
        let top = pool.neighbors(0).unwrap()[0].id;
        // Making the top neighbor an anchor pushes tuple 0 to later entries.
        let t = build_batch(&[0, top], &pool, 2).unwrap();
        assert!(!t[0].neighbor_ids.contains(&top));
        assert!(!t[0].neighbor_ids.contains(&0));
        let expected: Vec<usize> = pool
            .neighbors(0)
            .unwrap()
            .iter()
            .map(|n| n.id)
            .filter(|&id| id != top)
            .take(2)
            .collect();
        assert_eq!(t[0].neighbor_ids, expected);

        let all: Vec<usize> = (0..12).collect();
        assert!(matches!(build_batch(&all, &pool, 5), Err(Error::PoolExhausted { .. })));
        assert!(matches!(build_batch(&[1, 1], &pool, 1), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn anchor_sampler_covers_ids_before_repeating() {
        let mut s = AnchorSampler::new(10, 4);
        let mut seen: Vec<usize> = Vec::new();
        for _ in 0..5 {
            seen.extend(s.next_batch(2).unwrap());
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut again = AnchorSampler::new(10, 4);
        let mut s2 = AnchorSampler::new(10, 4);
        for _ in 0..7 {
            let b = again.next_batch(3).unwrap();
            assert_eq!(b.iter().collect::<HashSet<_>>().len(), 3);
            assert_eq!(b, s2.next_batch(3).unwrap());
        }
    }

    #[test]
    fn lr_schedule_drops_by_ten() {
        let cfg = TrainerConfig {
            steps_per_round: 100,
            lr_drops: vec![0.5, 0.9],
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(1.0, 0), 1.0);
        assert_eq!(cfg.lr_at(1.0, 49), 1.0);
        assert!((cfg.lr_at(1.0, 50) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at(1.0, 99) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_freezes_weights_but_updates_banks() {
        let ds = small_dataset();
        let enc = small_encoder();
        let pool = pool_for(&enc, &ds);
        let cfg = small_cfg();
        let mut state = TrainState::new(enc.clone(), &ds, 1).unwrap();
        let before = state.aug_bank.clone();
        let tuples = build_batch(&[0, 20, 40], &pool, 3).unwrap();
        let adam = AdamConfig {
            lr: 0.0,
            ..Default::default()
        };
        let rec = train_step(&mut state, &ds, &tuples, &pool, &cfg, &adam, 0, None).unwrap();
        assert_eq!(state.encoder.weights, enc.weights);
        assert_eq!(rec.step, 1);
        assert_eq!(state.aug_bank.last_update_step(0).unwrap(), 1);
        assert_ne!(state.aug_bank.get(0).unwrap(), before.get(0).unwrap());
        assert_eq!(state.aug_bank.get(1).unwrap(), before.get(1).unwrap());
        assert!(rec.batch_precision.is_none());
    }

    #[test]
    fn row_a_data_flow_uses_only_the_batch() {
        let ds = small_dataset();
        let enc = small_encoder();
        let pool = pool_for(&enc, &ds);
        let cfg = TrainerConfig {
            batch: BatchMiningConfig {
                strategy: BatchStrategy::Nn,
                ..Default::default()
            },
            memory: MemoryMiningConfig {
                iterations: 0,
                ..Default::default()
            },
            negative_source: NegativeSource::None,
            ..small_cfg()
        };
        let mut state = TrainState::new(enc, &ds, 1).unwrap();
        let tuples = build_batch(&[0, 20], &pool, 3).unwrap();
        let labels = ds.labels().unwrap();
        let rec = train_step(
            &mut state,
            &ds,
            &tuples,
            &pool,
            &cfg,
            &AdamConfig::default(),
            0,
            Some(&labels),
        )
        .unwrap();
        assert_eq!(rec.n_batch_pos, 3.0);
        assert_eq!(rec.n_mem_pos, 0.0);
        assert_eq!(rec.mem_precision, None);
        assert!(rec.batch_precision.is_some());
    }

    #[test]
    fn training_is_deterministic_and_bounded() {
        let ds = small_dataset();
        let labels = ds.labels().unwrap();
        let cfg = small_cfg();
        let run = || {
            train(
                &ds,
                small_encoder(),
                &cfg,
                &AdamConfig::default(),
                &pool_cfg(),
                Some(&labels),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_eq!(a.encoder.weights, b.encoder.weights);
        assert_eq!(a.history.len(), 10);
        assert_eq!(a.checkpoints.len(), 2);
        assert_eq!(a.pools[0].round(), 0);
        assert_eq!(a.pools[1].round(), 1);
        assert_eq!(
            a.pools[1].encoder_checksum(),
            Some(a.checkpoints[0].checksum().as_str())
        );
        for r in &a.history {
            assert!(r.n_batch_pos >= 0.0 && r.n_batch_pos <= 3.0);
            assert!(r.n_mem_pos >= 0.0 && r.n_mem_pos <= 4.0);
            for p in [r.batch_precision, r.mem_precision].into_iter().flatten() {
                assert!((0.0..=1.0).contains(&p));
            }
        }
        assert_eq!(
            a.history.iter().map(|r| r.step).collect::<Vec<_>>(),
            (1..=10).collect::<Vec<u64>>()
        );
    }

    #[test]
    fn labels_do_not_change_training() {
        let ds = small_dataset();
        let labels = ds.labels().unwrap();
        let cfg = small_cfg();
        let with = train(
            &ds,
            small_encoder(),
            &cfg,
            &AdamConfig::default(),
            &pool_cfg(),
            Some(&labels),
        )
        .unwrap();
        let without = train(&ds, small_encoder(), &cfg, &AdamConfig::default(), &pool_cfg(), None).unwrap();
        assert_eq!(with.encoder.checksum(), without.encoder.checksum());
        assert!(without.history.iter().all(|r| r.batch_precision.is_none()));
    }

    #[test]
    fn degenerate_schedules() {
        let ds = small_dataset();
        let enc = small_encoder();
        let none = TrainerConfig {
            steps_per_round: 0,
            ..small_cfg()
        };
        let out = train(&ds, enc.clone(), &none, &AdamConfig::default(), &pool_cfg(), None).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.encoder.weights, enc.weights);

        let one = TrainerConfig {
            rounds: 1,
            ..small_cfg()
        };
        let out = train(&ds, enc, &one, &AdamConfig::default(), &pool_cfg(), None).unwrap();
        assert_eq!(out.pools.len(), 1);
        assert_eq!(out.pools[0].round(), 0);
    }

    #[test]
    fn invalid_configs_list_every_violation() {
        let cfg = TrainerConfig {
            rounds: 0,
            batch: BatchMiningConfig {
                n_b: 0,
                ..Default::default()
            },
            lr_drops: vec![0.5, 0.2],
            ..Default::default()
        };
        let v = cfg.violations();
        assert_eq!(v.len(), 3, "{v:?}");
        let ds = small_dataset();
        assert!(matches!(
            train(&ds, small_encoder(), &cfg, &AdamConfig::default(), &pool_cfg(), None),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn history_file_round_trips() {
        let ds = small_dataset();
        let labels = ds.labels().unwrap();
        let out = train(
            &ds,
            small_encoder(),
            &small_cfg(),
            &AdamConfig::default(),
            &pool_cfg(),
            Some(&labels),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history(&out.history, &path).unwrap();
        let back = read_history(&path).unwrap();
        let strip: Vec<StepRecord> = out
            .history
            .iter()
            .map(|r| StepRecord {
                mem_true_positives: None,
                ..r.clone()
            })
            .collect();
        assert_eq!(back, strip);
    }

    #[test]
    fn multiscale_strategy_runs() {
        let ds = small_dataset();
        let cfg = TrainerConfig {
            batch: BatchMiningConfig {
                strategy: BatchStrategy::Multiscale,
                threshold: 0.2,
                ..Default::default()
            },
            rounds: 1,
            steps_per_round: 2,
            ..small_cfg()
        };
        let out = train(&ds, small_encoder(), &cfg, &AdamConfig::default(), &pool_cfg(), None).unwrap();
        assert_eq!(out.history.len(), 2);
    }
}
