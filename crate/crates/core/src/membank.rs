//! Per-image feature memories.
//!
//! Two banks are kept: the clean bank (features of unaugmented views) is used
//! for mining, the augmented bank (features of the latest augmented view) for
//! the loss. Entries are overwritten directly; there is no momentum blending.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::numerics::{check_dims, UnitVector, UNIT_TOL};
use crate::synthdata::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankKind {
    Clean,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    kind: BankKind,
    entries: Vec<UnitVector>,
    last_update_step: Vec<u64>,
}

impl MemoryBank {
    pub fn new(kind: BankKind, entries: Vec<UnitVector>) -> Result<Self> {
        if let Some(first) = entries.first() {
            for e in &entries {
                check_dims(first.dim(), e.dim())?;
            }
        }
        let n = entries.len();
        Ok(MemoryBank {
            kind,
            entries,
            last_update_step: vec![0; n],
        })
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, UnitVector::dim)
    }

    /// Borrowed view of one entry.
    pub fn get(&self, id: usize) -> Result<&UnitVector> {
        self.entries.get(id).ok_or(Error::UnknownId(id))
    }

    pub fn last_update_step(&self, id: usize) -> Result<u64> {
        self.last_update_step.get(id).copied().ok_or(Error::UnknownId(id))
    }

    /// Owned copies of the requested entries.
    pub fn fetch(&self, ids: &[usize]) -> Result<Vec<UnitVector>> {
        ids.iter().map(|&id| self.get(id).cloned()).collect()
    }

    /// Overwrites each listed entry. Either all ids are valid and every
    /// entry is written, or nothing changes.
    pub fn update_entries(&mut self, ids: &[usize], features: &[UnitVector], step: u64) -> Result<()> {
        check_dims(ids.len(), features.len())?;
        for (&id, f) in ids.iter().zip(features) {
            if id >= self.entries.len() {
                return Err(Error::UnknownId(id));
            }
            check_dims(self.dim(), f.dim())?;
        }
        for (&id, f) in ids.iter().zip(features) {
            self.entries[id] = f.clone();
            self.last_update_step[id] = step;
        }
        Ok(())
    }

    /// `n` distinct ids drawn uniformly from the bank, skipping `exclude`.
    pub fn sample_ids(&self, n: usize, exclude: &[usize], rng: &mut impl Rng) -> Vec<usize> {
        let mut excluded = vec![false; self.len()];
        for &id in exclude {
            if let Some(slot) = excluded.get_mut(id) {
                *slot = true;
            }
        }
        let eligible: Vec<usize> = (0..self.len()).filter(|&i| !excluded[i]).collect();
        let n = n.min(eligible.len());
        let mut picked: Vec<usize> = index::sample(rng, eligible.len(), n)
            .into_iter()
            .map(|k| eligible[k])
            .collect();
        picked.sort_unstable();
        picked
    }

    /// Largest deviation of any entry's norm from 1.
    pub fn max_norm_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| (crate::numerics::norm(e) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_unit_norm(&self) -> bool {
        self.max_norm_error() <= UNIT_TOL
    }
}

/// Fills both banks with one full pass over the dataset: clean views into
/// the clean bank, one seeded augmented view per image into the augmented
/// bank.
pub fn init_banks(encoder: &impl Encoder, dataset: &Dataset, seed: u64) -> Result<(MemoryBank, MemoryBank)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clean = Vec::with_capacity(dataset.len());
    let mut aug = Vec::with_capacity(dataset.len());
    for r in dataset.records() {
        clean.push(encoder.encode(&r.base)?);
        let x = dataset.augmented_view(r.id, &mut rng)?;
        aug.push(encoder.encode(&x)?);
    }
    Ok((
        MemoryBank::new(BankKind::Clean, clean)?,
        MemoryBank::new(BankKind::Augmented, aug)?,
    ))
}
