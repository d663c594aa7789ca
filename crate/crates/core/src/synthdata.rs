//! Seeded synthetic instance-retrieval datasets.
//!
//! Each class has a prototype drawn uniformly on the unit sphere; an instance
//! is the prototype plus isotropic Gaussian spread, re-normalized. The
//! `chain` layout instead spreads a class along an arc so that its two ends
//! are only connected through intermediate instances.
//!
//! Every image exposes three kinds of views:
//! - the clean view (the base vector itself),
//! - augmented views (noise plus coordinate dropout, drawn from a caller-owned
//!   random stream),
//! - auxiliary views (fixed per image and view index, standing in for
//!   multi-scale inputs).
//!
//! Class labels live on the records but are only reachable through
//! [`Dataset::labels`]; the views never read them.
//!
//! # Dataset file
//!
//! JSON object `{"format": "insclr-dataset", "version": 1, "config": {..},
//! "records": [{"id", "class_id", "base", "aux_seeds"}, ..]}`. `class_id` is
//! `null` for unlabeled data. Floats are written in shortest round-trip form,
//! so write-then-read is lossless.
//!
//! # External feature file
//!
//! Plain text, one image per line: `id,class_id,v0,v1,...`. `class_id` may
//! be empty. Blank lines and lines starting with `#` are skipped. Ids must be
//! exactly `0..N-1` in some order.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::{normalize, RawVector, UnitVector, NORM_EPS};
use crate::{Error, Result};

pub const DATASET_FORMAT: &str = "insclr-dataset";
pub const DATASET_VERSION: u32 = 1;

/// How instances are placed around their class prototype.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layout {
    /// Isotropic spread around the prototype.
    Clusters,
    /// Instances evenly spaced along a great-circle arc of `arc` radians
    /// centred on the prototype, plus isotropic spread.
    Chain { arc: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub instances_per_class: usize,
    pub input_dim: usize,
    pub sigma_intra: f64,
    pub sigma_aug: f64,
    pub drop_prob: f64,
    pub num_aux_views: usize,
    /// Noise of auxiliary views; `sigma_aug / 2` when absent.
    pub aux_sigma: Option<f64>,
    pub layout: Layout,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 50,
            instances_per_class: 40,
            input_dim: 64,
            sigma_intra: 0.15,
            sigma_aug: 0.06,
            drop_prob: 0.1,
            num_aux_views: 3,
            aux_sigma: None,
            layout: Layout::Clusters,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    /// Every violated invariant, in field order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_classes < 2 {
            v.push(format!("num_classes must be >= 2 (got {})", self.num_classes));
        }
        if self.instances_per_class < 2 {
            v.push(format!(
                "instances_per_class must be >= 2 (got {})",
                self.instances_per_class
            ));
        }
        if self.input_dim < 4 {
            v.push(format!("input_dim must be >= 4 (got {})", self.input_dim));
        }
        if !(self.sigma_intra >= 0.0 && self.sigma_intra.is_finite()) {
            v.push(format!("sigma_intra must be >= 0 (got {})", self.sigma_intra));
        }
        v.extend(self.view_violations());
        if let Layout::Chain { arc } = self.layout {
            if !(arc >= 0.0 && arc.is_finite()) {
                v.push(format!("layout.arc must be >= 0 (got {arc})"));
            }
        }
        v
    }

    fn view_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.sigma_aug >= 0.0 && self.sigma_aug.is_finite()) {
            v.push(format!("sigma_aug must be >= 0 (got {})", self.sigma_aug));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            v.push(format!("drop_prob must be in [0, 1) (got {})", self.drop_prob));
        }
        if self.num_aux_views < 1 {
            v.push("num_aux_views must be >= 1".to_string());
        }
        if let Some(s) = self.aux_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                v.push(format!("aux_sigma must be >= 0 (got {s})"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v.join("; ")))
        }
    }

    pub fn aux_view_sigma(&self) -> f64 {
        self.aux_sigma.unwrap_or(self.sigma_aug / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: usize,
    class_id: Option<usize>,
    pub base: UnitVector,
    pub aux_seeds: Vec<u64>,
}

/// Hidden ground-truth classes, for evaluation and analysis only.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels(Vec<usize>);

impl Labels {
    pub fn new(classes: Vec<usize>) -> Self {
        Labels(classes)
    }

    pub fn class_of(&self, id: usize) -> Result<usize> {
        self.0.get(id).copied().ok_or(Error::UnknownId(id))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: DatasetConfig,
    records: Vec<ImageRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    dataset: Dataset,
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> UnitVector {
    loop {
        if let Ok(u) = normalize(&gaussian(rng, dim)) {
            return u;
        }
    }
}

/// A unit vector orthogonal to `p`.
fn random_orthogonal(rng: &mut impl Rng, p: &UnitVector) -> UnitVector {
    loop {
        let mut v = gaussian(rng, p.dim());
        let along: f64 = v.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(p.iter()).for_each(|(a, b)| *a -= along * b);
        if let Ok(u) = normalize(&v) {
            return u;
        }
    }
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.input_dim;
    let prototypes: Vec<UnitVector> = (0..config.num_classes).map(|_| random_unit(&mut rng, dim)).collect();
    let mut records = Vec::with_capacity(config.num_classes * config.instances_per_class);
    for (class, proto) in prototypes.iter().enumerate() {
        let direction = match config.layout {
            Layout::Chain { .. } => Some(random_orthogonal(&mut rng, proto)),
            Layout::Clusters => None,
        };
        for t in 0..config.instances_per_class {
            let mut center = proto.as_slice().to_vec();
            if let (Layout::Chain { arc }, Some(d)) = (config.layout, &direction) {
                let frac = t as f64 / (config.instances_per_class - 1) as f64;
                let theta = arc * (frac - 0.5);
                center = proto
                    .iter()
                    .zip(d.iter())
                    .map(|(p, q)| theta.cos() * p + theta.sin() * q)
                    .collect();
            }
            let noise = gaussian(&mut rng, dim);
            let x: Vec<f64> = center
                .iter()
                .zip(&noise)
                .map(|(c, g)| c + config.sigma_intra * g)
                .collect();
            let aux_seeds = (0..config.num_aux_views).map(|_| rng.random()).collect();
            records.push(ImageRecord {
                id: records.len(),
                class_id: Some(class),
                base: normalize(&x)?,
                aux_seeds,
            });
        }
    }
    Ok(Dataset {
        config: config.clone(),
        records,
    })
}

/// The unaugmented view: the base vector, bit for bit.
pub fn clean_view(record: &ImageRecord) -> RawVector {
    RawVector::from(record.base.clone())
}

/// One random augmentation of `record`, consuming only `rng`.
pub fn augmented_view(record: &ImageRecord, config: &DatasetConfig, rng: &mut impl Rng) -> Result<RawVector> {
    let mut last_norm = 0.0;
    for _ in 0..2 {
        let mut x: Vec<f64> = record.base.to_vec();
        if config.sigma_aug > 0.0 {
            for v in x.iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                *v += config.sigma_aug * g;
            }
        }
        if config.drop_prob > 0.0 {
            for v in x.iter_mut() {
                if rng.random::<f64>() < config.drop_prob {
                    *v = 0.0;
                }
            }
        }
        match normalize(&x) {
            Ok(u) => return Ok(RawVector::from(u)),
            Err(Error::DegenerateVector { norm }) => last_norm = norm,
            Err(e) => return Err(e),
        }
    }
    debug_assert!(last_norm <= NORM_EPS);
    Err(Error::DegenerateVector { norm: last_norm })
}

/// Deterministic auxiliary view `view_index`; view 0 is the clean view.
pub fn aux_view(record: &ImageRecord, config: &DatasetConfig, view_index: usize) -> Result<RawVector> {
    let seed = *record.aux_seeds.get(view_index).ok_or(Error::IndexOutOfRange {
        index: view_index,
        len: record.aux_seeds.len(),
    })?;
    if view_index == 0 {
        return Ok(clean_view(record));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = config.aux_view_sigma();
    let x: Vec<f64> = record
        .base
        .iter()
        .map(|b| {
            let g: f64 = StandardNormal.sample(&mut rng);
            b + sigma * g
        })
        .collect();
    Ok(RawVector::from(normalize(&x)?))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn record(&self, id: usize) -> Result<&ImageRecord> {
        self.records.get(id).ok_or(Error::UnknownId(id))
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn clean_view(&self, id: usize) -> Result<RawVector> {
        Ok(clean_view(self.record(id)?))
    }

    pub fn augmented_view(&self, id: usize, rng: &mut impl Rng) -> Result<RawVector> {
        augmented_view(self.record(id)?, &self.config, rng)
    }

    pub fn aux_view(&self, id: usize, view_index: usize) -> Result<RawVector> {
        aux_view(self.record(id)?, &self.config, view_index)
    }

    /// Ground-truth classes, when every record has one. Analysis and
    /// evaluation only.
    pub fn labels(&self) -> Option<Labels> {
        self.records
            .iter()
            .map(|r| r.class_id)
            .collect::<Option<Vec<_>>>()
            .map(Labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = DatasetFile {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            dataset: self.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::format(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if file.format != DATASET_FORMAT || file.version != DATASET_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported format {} v{}", file.format, file.version),
            ));
        }
        let ds = file.dataset;
        ds.check_records().map_err(|e| Error::format(path, e))?;
        Ok(ds)
    }

    fn check_records(&self) -> std::result::Result<(), String> {
        for (i, r) in self.records.iter().enumerate() {
            if r.id != i {
                return Err(format!("record {i} has id {}", r.id));
            }
            if r.base.dim() != self.config.input_dim {
                return Err(format!("record {i} has dimension {}", r.base.dim()));
            }
            if r.aux_seeds.len() != self.config.num_aux_views {
                return Err(format!("record {i} has {} aux seeds", r.aux_seeds.len()));
            }
        }
        Ok(())
    }

    /// Reads precomputed descriptors. View parameters (`sigma_aug`,
    /// `drop_prob`, `num_aux_views`, `aux_sigma`, `seed`) come from `views`;
    /// class counts and `input_dim` are derived from the file.
    pub fn from_feature_file(path: &Path, views: &DatasetConfig) -> Result<Dataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows: Vec<(usize, Option<usize>, Vec<f64>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", lineno + 1));
            let mut fields = line.split(',').map(str::trim);
            let id = fields
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| bad("bad id"))?;
            let class = match fields.next() {
                Some("") => None,
                Some(s) => Some(s.parse::<usize>().map_err(|_| bad("bad class_id"))?),
                None => return Err(bad("missing class_id column")),
            };
            let values = fields
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("bad feature value"))?;
            rows.push((id, class, values));
        }
        if rows.len() < 2 {
            return Err(Error::format(path, "need at least two feature rows"));
        }
        rows.sort_by_key(|r| r.0);
        let dim = rows[0].2.len();
        let mut seeder = ChaCha8Rng::seed_from_u64(views.seed);
        let mut records = Vec::with_capacity(rows.len());
        for (i, (id, class, values)) in rows.into_iter().enumerate() {
            if id != i {
                return Err(Error::format(path, format!("ids must be dense 0..N-1; missing {i}")));
            }
            if values.len() != dim {
                return Err(Error::format(
                    path,
                    format!("id {id}: expected {dim} values, got {}", values.len()),
                ));
            }
            let base = normalize(&values).map_err(|e| Error::format(path, format!("id {id}: {e}")))?;
            records.push(ImageRecord {
                id,
                class_id: class,
                base,
                aux_seeds: (0..views.num_aux_views).map(|_| seeder.random()).collect(),
            });
        }
        let classes: BTreeSet<usize> = records.iter().filter_map(|r| r.class_id).collect();
        let config = DatasetConfig {
            num_classes: classes.len(),
            instances_per_class: 0,
            input_dim: dim,
            sigma_intra: 0.0,
            layout: Layout::Clusters,
            ..views.clone()
        };
        let v = config.view_violations();
        if !v.is_empty() {
            return Err(Error::InvalidConfig(v.join("; ")));
        }
        Ok(Dataset { config, records })
    }
}
