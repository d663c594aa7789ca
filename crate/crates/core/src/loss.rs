//! The gated contrastive objective for one training tuple.
//!
//! With `Q` the query set (`N_p = |Q|`) and `N_iter` every item in the
//! context:
//!
//! ```text
//! L = 1/N_p · Σ_{i∈Q} [ Σ_{j∈N_iter, neg} S_ij·1[S_ij > gate] − Σ_{j∈N_iter, pos, j≠i} S_ij ]
//! ```
//!
//! Self-pairs are skipped. Gradients flow only into items that carry their
//! pre-normalization vector (the current batch's augmented forward pass);
//! memory-bank features enter the value but never the gradient. A negative at
//! or below the gate has zero gradient.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::encoder::Forward;
use crate::membank::MemoryBank;
use crate::miner::MiningResult;
use crate::numerics::{dot, project_grad, RawVector, UnitVector};
use crate::{Error, Result};

pub const DEFAULT_GATE: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabel {
    Positive,
    Negative,
}

/// Extra negatives beyond the mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NegativeSource {
    /// Mini-batch only.
    None,
    /// `n` images sampled from the augmented bank per step.
    RandomMemory { n: usize },
    /// The anchor's candidate pool minus mined positives.
    CandidatePool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossItem {
    pub id: usize,
    pub feature: UnitVector,
    /// `Some` iff this item is differentiable (came from the current forward
    /// pass).
    pub raw: Option<RawVector>,
    pub label: PseudoLabel,
}

impl LossItem {
    pub fn grad_enabled(&self) -> bool {
        self.raw.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossContext {
    /// Indices into `items` of the query members.
    query: Vec<usize>,
    items: Vec<LossItem>,
    gate: f64,
}

impl LossContext {
    /// `query_ids` must each name a positive item of `items`.
    pub fn new(query_ids: &[usize], items: Vec<LossItem>, gate: f64) -> Result<Self> {
        let mut index = std::collections::HashMap::new();
        for (k, it) in items.iter().enumerate() {
            if index.insert(it.id, k).is_some() {
                return Err(Error::InconsistentMining(format!(
                    "id {} appears twice in N_iter",
                    it.id
                )));
            }
        }
        if query_ids.is_empty() {
            return Err(Error::EmptyQuerySet);
        }
        let mut query = Vec::with_capacity(query_ids.len());
        let mut seen = HashSet::new();
        for &id in query_ids {
            let k = *index
                .get(&id)
                .ok_or_else(|| Error::InconsistentMining(format!("query member {id} is not in N_iter")))?;
            if items[k].label != PseudoLabel::Positive {
                return Err(Error::InconsistentMining(format!(
                    "query member {id} is labeled negative"
                )));
            }
            if !seen.insert(id) {
                return Err(Error::InconsistentMining(format!("query member {id} listed twice")));
            }
            query.push(k);
        }
        Ok(LossContext { query, items, gate })
    }

    /// Context whose query set is every positive item.
    pub fn with_all_positives(items: Vec<LossItem>, gate: f64) -> Result<Self> {
        let ids: Vec<usize> = items
            .iter()
            .filter(|i| i.label == PseudoLabel::Positive)
            .map(|i| i.id)
            .collect();
        Self::new(&ids, items, gate)
    }

    pub fn items(&self) -> &[LossItem] {
        &self.items
    }

    pub fn gate(&self) -> f64 {
        self.gate
    }

    pub fn query_ids(&self) -> Vec<usize> {
        self.query.iter().map(|&k| self.items[k].id).collect()
    }

    pub fn label_of(&self, id: usize) -> Option<PseudoLabel> {
        self.items.iter().find(|i| i.id == id).map(|i| i.label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairTerm {
    pub query_id: usize,
    pub other_id: usize,
    pub similarity: f64,
    /// Signed contribution before the `1/N_p` factor.
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub terms: Option<Vec<PairTerm>>,
    /// `∂L/∂raw` for every grad-enabled item.
    pub grads: BTreeMap<usize, Vec<f64>>,
}

pub fn contrastive_loss(ctx: &LossContext) -> Result<LossReport> {
    evaluate(ctx, false)
}

/// As [`contrastive_loss`], also listing every pair term.
pub fn contrastive_loss_audited(ctx: &LossContext) -> Result<LossReport> {
    evaluate(ctx, true)
}

fn evaluate(ctx: &LossContext, audit: bool) -> Result<LossReport> {
    let items = &ctx.items;
    let query = &ctx.query;
    if query.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let dim = items[query[0]].feature.dim();
    let scale = 1.0 / query.len() as f64;
    let mut upstream: Vec<Option<Vec<f64>>> = items
        .iter()
        .map(|it| it.grad_enabled().then(|| vec![0.0; dim]))
        .collect();
    let mut terms = audit.then(Vec::new);
    let mut total = 0.0;

    for &i in query {
        for (j, other) in items.iter().enumerate() {
            if j == i {
                continue;
            }
            let s = dot(&items[i].feature, &other.feature);
            let coeff = match other.label {
                PseudoLabel::Positive => -1.0,
                PseudoLabel::Negative if s > ctx.gate => 1.0,
                PseudoLabel::Negative => 0.0,
            };
            if let Some(t) = terms.as_mut() {
                t.push(PairTerm {
                    query_id: items[i].id,
                    other_id: other.id,
                    similarity: s,
                    contribution: coeff * s,
                });
            }
            if coeff == 0.0 {
                continue;
            }
            total += coeff * s;
            let w = coeff * scale;
            if let Some(g) = upstream[i].as_mut() {
                g.iter_mut().zip(other.feature.iter()).for_each(|(g, f)| *g += w * f);
            }
            if let Some(g) = upstream[j].as_mut() {
                g.iter_mut().zip(items[i].feature.iter()).for_each(|(g, f)| *g += w * f);
            }
        }
    }

    let mut grads = BTreeMap::new();
    for (it, up) in items.iter().zip(upstream) {
        if let (Some(raw), Some(up)) = (&it.raw, up) {
            grads.insert(it.id, project_grad(raw, &up)?);
        }
    }
    Ok(LossReport {
        value: total * scale,
        terms,
        grads,
    })
}

/// This step's batch: ids with their augmented forward outputs, in batch
/// order.
#[derive(Debug, Clone, Copy)]
pub struct BatchFeatures<'a> {
    pub ids: &'a [usize],
    pub augmented: &'a [Forward],
}

/// Assembles `N_iter` for one tuple.
///
/// Batch images come first (differentiable); then memory-mined positives and
/// the configured extra negatives, both read from the augmented bank.
/// `random_ids` supplies the sample for [`NegativeSource::RandomMemory`].
pub fn build_loss_context(
    anchor_id: usize,
    mining: &MiningResult,
    batch: &BatchFeatures,
    aug_bank: &MemoryBank,
    negative_source: NegativeSource,
    random_ids: &[usize],
    gate: f64,
) -> Result<LossContext> {
    mining.validate()?;
    if batch.ids.len() != batch.augmented.len() {
        return Err(Error::DimensionMismatch {
            expected: batch.ids.len(),
            actual: batch.augmented.len(),
        });
    }
    let in_batch: HashSet<usize> = batch.ids.iter().copied().collect();
    if !in_batch.contains(&anchor_id) {
        return Err(Error::InconsistentMining(format!(
            "anchor {anchor_id} is not in the batch"
        )));
    }
    let all_lists = [
        &mining.batch_positive_ids,
        &mining.batch_negative_ids,
        &mining.memory_positive_ids,
        &mining.memory_negative_ids,
    ];
    if all_lists.iter().any(|l| l.contains(&anchor_id)) {
        return Err(Error::InconsistentMining(format!("anchor {anchor_id} was also mined")));
    }
    for &id in mining.batch_positive_ids.iter().chain(&mining.batch_negative_ids) {
        if !in_batch.contains(&id) {
            return Err(Error::InconsistentMining(format!(
                "batch-mined id {id} is not in the batch"
            )));
        }
    }
    for &id in mining.memory_positive_ids.iter().chain(&mining.memory_negative_ids) {
        if in_batch.contains(&id) {
            return Err(Error::InconsistentMining(format!(
                "memory-mined id {id} is in the batch"
            )));
        }
    }

    let positives: HashSet<usize> = std::iter::once(anchor_id)
        .chain(mining.batch_positive_ids.iter().copied())
        .collect();
    let mut items: Vec<LossItem> = batch
        .ids
        .iter()
        .zip(batch.augmented)
        .map(|(&id, fw)| LossItem {
            id,
            feature: fw.feature.clone(),
            raw: Some(fw.raw.clone()),
            label: if positives.contains(&id) {
                PseudoLabel::Positive
            } else {
                PseudoLabel::Negative
            },
        })
        .collect();
    let mut present = in_batch;
    let mut push_memory = |items: &mut Vec<LossItem>, id: usize, label| -> Result<()> {
        if present.insert(id) {
            items.push(LossItem {
                id,
                feature: aug_bank.get(id)?.clone(),
                raw: None,
                label,
            });
        }
        Ok(())
    };
    for &id in &mining.memory_positive_ids {
        push_memory(&mut items, id, PseudoLabel::Positive)?;
    }
    match negative_source {
        NegativeSource::None => {}
        NegativeSource::CandidatePool => {
            for &id in &mining.memory_negative_ids {
                push_memory(&mut items, id, PseudoLabel::Negative)?;
            }
        }
        NegativeSource::RandomMemory { n } => {
            for &id in random_ids.iter().take(n) {
                push_memory(&mut items, id, PseudoLabel::Negative)?;
            }
        }
    }
    LossContext::with_all_positives(items, gate)
}
