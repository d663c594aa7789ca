//! Per-image candidate pools: the exact top-P cosine neighbors of every
//! image, computed offline and rebuilt between training rounds.
//!
//! # Pool file
//!
//! JSON object `{"format": "insclr-pool", "version": 1, "n": N, "p": P,
//! "round": r, "encoder_checksum": "<sha256 hex or null>", "rows": [[[id,
//! sim], ..], ..]}` with row `i` holding anchor `i`'s neighbors in rank order.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderState};
use crate::numerics::{check_dims, dot, UnitVector};
use crate::synthdata::Dataset;
use crate::{Error, Result};

pub const POOL_FORMAT: &str = "insclr-pool";
pub const POOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub pool_size: usize,
    pub round: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            pool_size: 50,
            round: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: usize,
    pub similarity: f64,
}

/// Rank order: similarity descending, then id ascending.
pub fn rank_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(&b.id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    round: usize,
    encoder_checksum: Option<String>,
    rows: Vec<Vec<Neighbor>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolFile {
    format: String,
    version: u32,
    n: usize,
    p: usize,
    round: usize,
    encoder_checksum: Option<String>,
    rows: Vec<Vec<(usize, f64)>>,
}

/// Exact brute-force top-P neighbors of every feature.
pub fn build_candidate_pool(features: &[UnitVector], config: &PoolConfig) -> Result<CandidatePool> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 features, got {n}")));
    }
    let p = config.pool_size;
    if p < 1 || p > n - 1 {
        return Err(Error::InvalidConfig(format!(
            "pool_size must be in [1, {}] (got {p})",
            n - 1
        )));
    }
    let dim = features[0].dim();
    for f in features {
        check_dims(dim, f.dim())?;
    }
    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut all: Vec<Neighbor> = (0..n)
                .filter(|&j| j != i)
                .map(|j| Neighbor {
                    id: j,
                    similarity: dot(&features[i], &features[j]),
                })
                .collect();
            if p < all.len() {
                all.select_nth_unstable_by(p - 1, rank_order);
                all.truncate(p);
            }
            all.sort_by(rank_order);
            all
        })
        .collect();
    Ok(CandidatePool {
        round: config.round,
        encoder_checksum: None,
        rows,
    })
}

/// Clean-view features of every image under `encoder`.
pub fn encode_clean(encoder: &impl Encoder, dataset: &Dataset) -> Result<Vec<UnitVector>> {
    dataset.records().iter().map(|r| encoder.encode(&r.base)).collect()
}

/// Re-encodes every clean view with `encoder` and rebuilds the pool for the
/// next round.
pub fn refresh_pool(encoder: &EncoderState, dataset: &Dataset, config: &PoolConfig) -> Result<CandidatePool> {
    let features = encode_clean(encoder, dataset)?;
    let next = PoolConfig {
        round: config.round + 1,
        ..config.clone()
    };
    let mut pool = build_candidate_pool(&features, &next)?;
    pool.encoder_checksum = Some(encoder.checksum());
    Ok(pool)
}

impl CandidatePool {
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn pool_size(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn encoder_checksum(&self) -> Option<&str> {
        self.encoder_checksum.as_deref()
    }

    pub fn with_encoder_checksum(mut self, checksum: String) -> Self {
        self.encoder_checksum = Some(checksum);
        self
    }

    pub fn neighbors(&self, anchor: usize) -> Result<&[Neighbor]> {
        self.rows.get(anchor).map(Vec::as_slice).ok_or(Error::UnknownId(anchor))
    }

    pub fn neighbor_ids(&self, anchor: usize) -> Result<Vec<usize>> {
        Ok(self.neighbors(anchor)?.iter().map(|n| n.id).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = PoolFile {
            format: POOL_FORMAT.into(),
            version: POOL_VERSION,
            n: self.len(),
            p: self.pool_size(),
            round: self.round,
            encoder_checksum: self.encoder_checksum.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|n| (n.id, n.similarity)).collect())
                .collect(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::format(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<CandidatePool> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: PoolFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if f.format != POOL_FORMAT || f.version != POOL_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported pool {} v{}", f.format, f.version),
            ));
        }
        if f.rows.len() != f.n || f.rows.iter().any(|r| r.len() != f.p) {
            return Err(Error::format(path, "row count or width disagrees with header"));
        }
        Ok(CandidatePool {
            round: f.round,
            encoder_checksum: f.encoder_checksum,
            rows: f
                .rows
                .into_iter()
                .map(|r| {
                    r.into_iter()
                        .map(|(id, similarity)| Neighbor { id, similarity })
                        .collect()
                })
                .collect(),
        })
    }
}
