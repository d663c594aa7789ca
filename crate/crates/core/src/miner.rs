//! Pseudo-positive mining.
//!
//! Two stages run per training tuple:
//!
//! 1. **In-batch selection.** The anchor's `N_b` neighbors in the tuple are
//!    accepted or rejected by thresholding a similarity to the anchor. The
//!    similarity comes from augmented features, clean features, clean
//!    features scaled by the tuple maximum, or multi-view clean descriptors.
//!    The `nn` baseline accepts every neighbor.
//! 2. **Memory mining.** The anchor and its accepted neighbors form a query
//!    set. Every remaining candidate-pool image gets one similarity per query
//!    member (optionally zeroing entries at or below a sparsity threshold),
//!    aggregated by mean or max into a set score. Top-k or threshold
//!    selection picks new positives, which join the query set, and the
//!    procedure repeats. Whatever is never selected becomes a negative.
//!
//! All thresholds are strict (`>`). Ties in top-k go to the smaller id.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::membank::MemoryBank;
use crate::numerics::{dot, UnitVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStrategy {
    Nn,
    Augmented,
    Unaugmented,
    Relative,
    Multiscale,
}

impl BatchStrategy {
    pub fn name(self) -> &'static str {
        match self {
            BatchStrategy::Nn => "nn",
            BatchStrategy::Augmented => "augmented",
            BatchStrategy::Unaugmented => "unaugmented",
            BatchStrategy::Relative => "relative",
            BatchStrategy::Multiscale => "multiscale",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchMiningConfig {
    pub strategy: BatchStrategy,
    /// `T_b`; ignored by `nn`.
    pub threshold: f64,
    /// `N_b`, neighbors per tuple.
    pub n_b: usize,
}

impl Default for BatchMiningConfig {
    fn default() -> Self {
        BatchMiningConfig {
            strategy: BatchStrategy::Unaugmented,
            threshold: 0.6,
            n_b: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Selection {
    /// The `k` best-scoring candidates per iteration.
    Topk { k: usize },
    /// Every candidate scoring above `t_m`.
    Threshold { t_m: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySetMode {
    /// Score against the growing query set.
    Full,
    /// Score against the anchor alone; selections still accumulate.
    AnchorOnly,
}

/// Where the features of in-batch query members come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryFeatureSource {
    /// This step's clean forward pass.
    Fresh,
    /// The clean memory bank.
    Bank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryMiningConfig {
    pub aggregation: Aggregation,
    pub selection: Selection,
    /// Per-query similarities at or below this are replaced by zero.
    pub sparsify_threshold: Option<f64>,
    /// Zero disables memory mining.
    pub iterations: usize,
    pub query_set_mode: QuerySetMode,
    pub query_features: QueryFeatureSource,
}

impl Default for MemoryMiningConfig {
    fn default() -> Self {
        MemoryMiningConfig {
            aggregation: Aggregation::Avg,
            selection: Selection::Topk { k: 5 },
            sparsify_threshold: None,
            iterations: 4,
            query_set_mode: QuerySetMode::Full,
            query_features: QueryFeatureSource::Fresh,
        }
    }
}

impl MemoryMiningConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match self.selection {
            Selection::Topk { k } if k < 1 => v.push("trainer.memory.selection.k must be >= 1".to_string()),
            Selection::Threshold { t_m } if !t_m.is_finite() => {
                v.push("trainer.memory.selection.t_m must be finite".to_string())
            }
            _ => {}
        }
        if let Some(s) = self.sparsify_threshold {
            if !s.is_finite() {
                v.push("trainer.memory.sparsify_threshold must be finite".to_string());
            }
        }
        v
    }
}

/// The anchor plus accepted positives, anchor first.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    member_ids: Vec<usize>,
    member_features: Vec<UnitVector>,
}

impl QuerySet {
    pub fn new(anchor_id: usize, anchor_feature: UnitVector) -> Self {
        QuerySet {
            member_ids: vec![anchor_id],
            member_features: vec![anchor_feature],
        }
    }

    /// Adds a member; returns false (and changes nothing) for duplicates.
    pub fn push(&mut self, id: usize, feature: UnitVector) -> bool {
        if self.member_ids.contains(&id) {
            return false;
        }
        self.member_ids.push(id);
        self.member_features.push(feature);
        true
    }

    pub fn anchor_id(&self) -> usize {
        self.member_ids[0]
    }

    pub fn ids(&self) -> &[usize] {
        &self.member_ids
    }

    pub fn features(&self) -> &[UnitVector] {
        &self.member_features
    }

    /// `N_p`.
    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }
}

/// Per-tuple mining outcome.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningResult {
    pub batch_positive_ids: Vec<usize>,
    pub batch_negative_ids: Vec<usize>,
    pub memory_positive_ids: Vec<usize>,
    pub memory_negative_ids: Vec<usize>,
}

impl MiningResult {
    /// Checks that the four lists are pairwise disjoint and free of
    /// duplicates.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, list) in [
            ("batch positives", &self.batch_positive_ids),
            ("batch negatives", &self.batch_negative_ids),
            ("memory positives", &self.memory_positive_ids),
            ("memory negatives", &self.memory_negative_ids),
        ] {
            for &id in list {
                if !seen.insert(id) {
                    return Err(Error::InconsistentMining(format!(
                        "id {id} in {name} appears more than once"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Features of a tuple for batch selection; index 0 is the anchor, the
/// remaining entries follow the tuple's neighbor order.
#[derive(Debug, Clone, Copy, Default)]
pub struct TupleViews<'a> {
    pub clean: Option<&'a [UnitVector]>,
    pub augmented: Option<&'a [UnitVector]>,
    pub multiscale: Option<&'a [UnitVector]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSelection {
    pub selected: Vec<usize>,
    pub rejected: Vec<usize>,
}

/// The score each neighbor is thresholded on, or `None` for `nn`.
pub fn batch_scores(views: &TupleViews, strategy: BatchStrategy, n: usize) -> Result<Option<Vec<f64>>> {
    let pick = |v: Option<&[UnitVector]>, view: &'static str| -> Result<Vec<f64>> {
        let feats = v.ok_or(Error::MissingView {
            strategy: strategy.name(),
            view,
        })?;
        if feats.len() != n + 1 {
            return Err(Error::InvalidInput(format!(
                "{view} view has {} features for a tuple of {}",
                feats.len(),
                n + 1
            )));
        }
        Ok(feats[1..].iter().map(|f| dot(&feats[0], f)).collect())
    };
    Ok(match strategy {
        BatchStrategy::Nn => None,
        BatchStrategy::Augmented => Some(pick(views.augmented, "augmented")?),
        BatchStrategy::Unaugmented => Some(pick(views.clean, "clean")?),
        BatchStrategy::Multiscale => Some(pick(views.multiscale, "multiscale")?),
        BatchStrategy::Relative => {
            let sims = pick(views.clean, "clean")?;
            let top = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // No positive reference similarity: nothing can be relative-selected.
            if top > 0.0 {
                Some(sims.iter().map(|s| s / top).collect())
            } else {
                Some(vec![f64::NEG_INFINITY; sims.len()])
            }
        }
    })
}

/// Splits the tuple's neighbors into accepted and rejected ids.
pub fn select_batch_positives(
    neighbor_ids: &[usize],
    views: &TupleViews,
    cfg: &BatchMiningConfig,
) -> Result<BatchSelection> {
    if neighbor_ids.len() != cfg.n_b {
        return Err(Error::InvalidInput(format!(
            "tuple has {} neighbors, expected N_b = {}",
            neighbor_ids.len(),
            cfg.n_b
        )));
    }
    let scores = batch_scores(views, cfg.strategy, neighbor_ids.len())?;
    let mut out = BatchSelection {
        selected: Vec::new(),
        rejected: Vec::new(),
    };
    for (k, &id) in neighbor_ids.iter().enumerate() {
        let keep = scores.as_ref().is_none_or(|s| s[k] > cfg.threshold);
        if keep {
            out.selected.push(id);
        } else {
            out.rejected.push(id);
        }
    }
    Ok(out)
}

/// Reduces one candidate's per-query similarities to a set score.
pub fn aggregate_scores(sims: &[f64], aggregation: Aggregation, sparsify: Option<f64>) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let kept = |s: f64| match sparsify {
        Some(t) if s <= t => 0.0,
        _ => s,
    };
    Ok(match aggregation {
        Aggregation::Avg => sims.iter().map(|&s| kept(s)).sum::<f64>() / sims.len() as f64,
        Aggregation::Max => sims.iter().map(|&s| kept(s)).fold(f64::NEG_INFINITY, f64::max),
    })
}

/// `S_set` of one candidate against a query set.
pub fn aggregate_set_similarity(
    candidate: &UnitVector,
    query: &QuerySet,
    aggregation: Aggregation,
    sparsify: Option<f64>,
) -> Result<f64> {
    let sims: Vec<f64> = query.features().iter().map(|q| dot(candidate, q)).collect();
    aggregate_scores(&sims, aggregation, sparsify)
}

/// Output of memory mining for one tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryMining {
    /// In selection order.
    pub positives: Vec<usize>,
    /// Unselected candidates in pool order.
    pub negatives: Vec<usize>,
    /// Set scores of every still-unselected candidate, per iteration.
    pub trace: Vec<Vec<(usize, f64)>>,
}

/// The mining loop over an arbitrary pairwise similarity between image ids.
///
/// `query_ids` starts with the anchor. Candidates are `pool_ids` minus
/// duplicates, `exclude_ids` and query members.
pub fn mine_by_similarity<F>(
    query_ids: &[usize],
    pool_ids: &[usize],
    exclude_ids: &[usize],
    cfg: &MemoryMiningConfig,
    sim: F,
) -> Result<MemoryMining>
where
    F: Fn(usize, usize) -> f64,
{
    if query_ids.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::InvalidConfig(v.join("; ")));
    }
    let mut blocked: HashSet<usize> = exclude_ids.iter().chain(query_ids).copied().collect();
    let candidates: Vec<usize> = pool_ids.iter().copied().filter(|id| blocked.insert(*id)).collect();

    let mut scoring: Vec<usize> = match cfg.query_set_mode {
        QuerySetMode::Full => query_ids.to_vec(),
        QuerySetMode::AnchorOnly => vec![query_ids[0]],
    };
    // sims[c][q]: similarity of candidate c to scoring member q, grown lazily.
    let mut sims: Vec<Vec<f64>> = vec![Vec::new(); candidates.len()];
    let mut selected = vec![false; candidates.len()];
    let mut positives = Vec::new();
    let mut trace = Vec::with_capacity(cfg.iterations);

    for _ in 0..cfg.iterations {
        let mut scored: Vec<(usize, usize, f64)> = Vec::new();
        for (c, &cid) in candidates.iter().enumerate() {
            if selected[c] {
                continue;
            }
            let have = sims[c].len();
            sims[c].extend(scoring[have..].iter().map(|&q| sim(q, cid)));
            scored.push((
                c,
                cid,
                aggregate_scores(&sims[c], cfg.aggregation, cfg.sparsify_threshold)?,
            ));
        }
        trace.push(scored.iter().map(|&(_, id, s)| (id, s)).collect());
        if scored.is_empty() {
            break;
        }
        let picked: Vec<(usize, usize)> = match cfg.selection {
            Selection::Topk { k } => {
                scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1)));
                scored.iter().take(k).map(|&(c, id, _)| (c, id)).collect()
            }
            Selection::Threshold { t_m } => scored.iter().filter(|e| e.2 > t_m).map(|&(c, id, _)| (c, id)).collect(),
        };
        if picked.is_empty() {
            break;
        }
        for (c, id) in picked {
            selected[c] = true;
            positives.push(id);
            if cfg.query_set_mode == QuerySetMode::Full {
                scoring.push(id);
            }
        }
    }
    let negatives = candidates
        .iter()
        .zip(&selected)
        .filter(|(_, &s)| !s)
        .map(|(&id, _)| id)
        .collect();
    Ok(MemoryMining {
        positives,
        negatives,
        trace,
    })
}

/// Memory mining with candidate features from the clean bank. Query members
/// use the features carried by `query`; mined members use bank features.
/// Returns the mining outcome and the query set grown by the mined positives.
pub fn mine_memory_positives(
    query: &QuerySet,
    pool_ids: &[usize],
    clean_bank: &MemoryBank,
    cfg: &MemoryMiningConfig,
    exclude_ids: &[usize],
) -> Result<(MemoryMining, QuerySet)> {
    if query.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    for &id in pool_ids {
        clean_bank.get(id)?;
    }
    let feature = |id: usize| -> &UnitVector {
        match query.ids().iter().position(|&q| q == id) {
            Some(k) => &query.features()[k],
            None => clean_bank.get(id).expect("pool ids checked above"),
        }
    };
    let mined = mine_by_similarity(query.ids(), pool_ids, exclude_ids, cfg, |a, b| {
        dot(feature(a), feature(b))
    })?;
    let mut grown = query.clone();
    for &id in &mined.positives {
        grown.push(id, clean_bank.get(id)?.clone());
    }
    Ok((mined, grown))
}
