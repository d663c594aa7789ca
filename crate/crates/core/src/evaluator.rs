//! Retrieval evaluation: multi-view descriptors and mean average precision.
//!
//! Each class is split, with a seeded shuffle, into queries and gallery.
//! Every query ranks the whole gallery by cosine similarity (ties by
//! ascending id); an item is relevant when it shares the query's class.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::numerics::{check_dims, dot, mean_direction, UnitVector};
use crate::synthdata::{Dataset, Labels};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Views averaged per descriptor: the clean view plus `num_views − 1`
    /// auxiliary views.
    pub num_views: usize,
    /// Fraction of each class used as queries.
    pub query_fraction: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            num_views: 3,
            query_fraction: 0.2,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_views < 1 {
            v.push("eval.num_views must be >= 1".to_string());
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            v.push(format!(
                "eval.query_fraction must be in (0, 1), got {}",
                self.query_fraction
            ));
        }
        v
    }
}

/// Encodes `num_views` views of image `id` and returns the normalized mean
/// of the (unit) encodings.
pub fn multiview_feature(encoder: &impl Encoder, dataset: &Dataset, id: usize, num_views: usize) -> Result<UnitVector> {
    if num_views < 1 {
        return Err(Error::InvalidConfig("num_views must be >= 1".into()));
    }
    let views = (0..num_views)
        .map(|v| encoder.encode(&dataset.aux_view(id, v)?))
        .collect::<Result<Vec<_>>>()?;
    if views.len() == 1 {
        return Ok(views.into_iter().next().expect("one view"));
    }
    mean_direction(&views)
}

/// Multi-view descriptors of every image, in id order.
pub fn multiview_features(
    encoder: &(impl Encoder + Sync),
    dataset: &Dataset,
    num_views: usize,
) -> Result<Vec<UnitVector>> {
    (0..dataset.len())
        .into_par_iter()
        .map(|id| multiview_feature(encoder, dataset, id, num_views))
        .collect()
}

/// `(1/num_relevant) · Σ_k precision@k · rel(k)` over the ranked list.
pub fn average_precision(ranked_relevance: &[bool], num_relevant: usize) -> Result<f64> {
    if num_relevant == 0 {
        return Err(Error::InvalidInput(
            "average precision needs at least one relevant item".into(),
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits > num_relevant {
        return Err(Error::InvalidInput(format!(
            "ranking has {hits} relevant items but num_relevant is {num_relevant}"
        )));
    }
    Ok(sum / num_relevant as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub id: usize,
    pub class_id: usize,
    pub ap: f64,
    /// Gallery ids in rank order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranking: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub map: f64,
    pub num_queries: usize,
    /// Mean AP of each class's queries.
    pub per_class_ap: BTreeMap<usize, f64>,
    #[serde(skip)]
    pub queries: Vec<QueryResult>,
}

/// Seeded per-class query/gallery split. Returns `(queries, gallery)`, both
/// sorted by id.
pub fn split_queries(labels: &Labels, cfg: &EvalConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::InvalidConfig(v.join("; ")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (id, &c) in labels.as_slice().iter().enumerate() {
        by_class.entry(c).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for (class, mut members) in by_class {
        if members.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "class {class} has {} image(s); evaluation needs a query and a gallery item per class",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let q = ((cfg.query_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        queries.extend_from_slice(&members[..q]);
        gallery.extend_from_slice(&members[q..]);
    }
    queries.sort_unstable();
    gallery.sort_unstable();
    Ok((queries, gallery))
}

/// mAP over precomputed descriptors.
pub fn evaluate_features(
    features: &[UnitVector],
    labels: &Labels,
    cfg: &EvalConfig,
    keep_rankings: bool,
) -> Result<EvalReport> {
    check_dims(labels.len(), features.len())?;
    let (queries, gallery) = split_queries(labels, cfg)?;
    let cls = labels.as_slice();
    let results: Vec<QueryResult> = queries
        .par_iter()
        .map(|&q| {
            let mut ranked: Vec<(usize, f64)> = gallery.iter().map(|&g| (g, dot(&features[q], &features[g]))).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let rel: Vec<bool> = ranked.iter().map(|&(g, _)| cls[g] == cls[q]).collect();
            let num_relevant = rel.iter().filter(|&&r| r).count();
            Ok(QueryResult {
                id: q,
                class_id: cls[q],
                ap: average_precision(&rel, num_relevant)?,
                ranking: keep_rankings.then(|| ranked.iter().map(|&(g, _)| g).collect()),
            })
        })
        .collect::<Result<_>>()?;

    let mut per_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in &results {
        let e = per_class.entry(r.class_id).or_default();
        e.0 += r.ap;
        e.1 += 1;
    }
    Ok(EvalReport {
        map: results.iter().map(|r| r.ap).sum::<f64>() / results.len() as f64,
        num_queries: results.len(),
        per_class_ap: per_class.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect(),
        queries: results,
    })
}

/// mAP of `encoder` on `dataset` using the dataset's own labels.
pub fn evaluate_map(encoder: &(impl Encoder + Sync), dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let labels = dataset.labels().ok_or(Error::MissingLabels("evaluation"))?;
    let features = multiview_features(encoder, dataset, cfg.num_views)?;
    evaluate_features(&features, &labels, cfg, false)
}
