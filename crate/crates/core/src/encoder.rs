//! Encoders map a raw input view to a unit feature.
//!
//! [`Encoder`] is the contract the rest of the pipeline relies on.
//! [`EncoderState`] is the trainable reference implementation: a single
//! bias-free linear layer followed by L2 normalization, with hand-written
//! reverse mode and an Adam optimizer using decoupled weight decay.
//!
//! # Checkpoint file
//!
//! JSON object `{"format": "insclr-encoder", "version": 1, "config": {..},
//! "weights": M, "adam_m": M, "adam_v": M, "adam_t": n}` where each `M` is
//! `{"rows", "cols", "data"}` in row-major order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{check_dims, normalize, Matrix, RawVector, UnitVector};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "insclr-encoder";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Anything that turns an input view into a unit feature.
pub trait Encoder {
    fn input_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn encode(&self, x: &[f64]) -> Result<UnitVector>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 64,
            embed_dim: 32,
            init_scale: 0.125,
            seed: 1,
        }
    }
}

impl EncoderConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.embed_dim < 2 {
            v.push(format!("embed_dim must be >= 2 (got {})", self.embed_dim));
        }
        if self.embed_dim > self.input_dim {
            v.push(format!(
                "embed_dim ({}) must not exceed input_dim ({})",
                self.embed_dim, self.input_dim
            ));
        }
        if !self.init_scale.is_finite() {
            v.push("init_scale must be finite".to_string());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.lr.is_nan() || self.lr <= 0.0 {
            v.push(format!("adam.lr must be > 0 (got {})", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if b.is_nan() || b <= 0.0 || b >= 1.0 {
                v.push(format!("adam.{name} must be in (0, 1) (got {b})"));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            v.push(format!("adam.eps must be > 0 (got {})", self.eps));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            v.push(format!("adam.weight_decay must be >= 0 (got {})", self.weight_decay));
        }
        v
    }
}

/// Output of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `W·x`, before normalization.
    pub raw: RawVector,
    pub feature: UnitVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub weights: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
    pub adam_t: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    state: EncoderState,
}

pub fn init_encoder(config: &EncoderConfig) -> Result<EncoderState> {
    let v = config.violations();
    if !v.is_empty() {
        return Err(Error::InvalidConfig(v.join("; ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (rows, cols) = (config.embed_dim, config.input_dim);
    let data = (0..rows * cols)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * config.init_scale
        })
        .collect();
    Ok(EncoderState {
        config: config.clone(),
        weights: Matrix::from_vec(rows, cols, data)?,
        adam_m: Matrix::zeros(rows, cols),
        adam_v: Matrix::zeros(rows, cols),
        adam_t: 0,
    })
}

impl EncoderState {
    /// An encoder with the given weights and fresh optimizer state.
    pub fn from_weights(weights: Matrix, seed: u64) -> Result<Self> {
        let (rows, cols) = weights.shape();
        let config = EncoderConfig {
            input_dim: cols,
            embed_dim: rows,
            init_scale: 0.0,
            seed,
        };
        Ok(EncoderState {
            config,
            adam_m: Matrix::zeros(rows, cols),
            adam_v: Matrix::zeros(rows, cols),
            adam_t: 0,
            weights,
        })
    }

    /// Projection onto the first `embed_dim` input coordinates.
    pub fn identity(input_dim: usize, embed_dim: usize) -> Result<Self> {
        let mut w = Matrix::zeros(embed_dim, input_dim);
        for i in 0..embed_dim.min(input_dim) {
            w.set(i, i, 1.0);
        }
        Self::from_weights(w, 0)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let raw = self.weights.mul_vec(x)?;
        let feature = normalize(&raw)?;
        Ok(Forward {
            raw: RawVector::new(raw)?,
            feature,
        })
    }

    /// `∂L/∂W` for one input, given `∂L/∂(W·x)`: the outer product
    /// `grad_raw ⊗ x`.
    pub fn encode_backward(&self, x: &[f64], grad_raw: &[f64]) -> Result<Matrix> {
        let mut g = Matrix::zeros(self.weights.rows(), self.weights.cols());
        self.accumulate_backward(&mut g, x, grad_raw)?;
        Ok(g)
    }

    /// Adds one item's weight gradient into `acc`.
    pub fn accumulate_backward(&self, acc: &mut Matrix, x: &[f64], grad_raw: &[f64]) -> Result<()> {
        check_dims(self.weights.cols(), x.len())?;
        check_dims(self.weights.rows(), grad_raw.len())?;
        acc.add_outer(grad_raw, x, 1.0)
    }

    /// One Adam update with bias correction and decoupled weight decay:
    /// `w ← w − lr·(m̂/(√v̂ + eps) + weight_decay·w)`.
    pub fn adam_step(&mut self, grads: &Matrix, cfg: &AdamConfig) -> Result<()> {
        if grads.shape() != self.weights.shape() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.as_slice().len(),
                actual: grads.as_slice().len(),
            });
        }
        self.adam_t += 1;
        let t = self.adam_t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let w = self.weights.as_mut_slice();
        let m = self.adam_m.as_mut_slice();
        let v = self.adam_v.as_mut_slice();
        for (k, &g) in grads.as_slice().iter().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            w[k] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w[k]);
        }
        Ok(())
    }

    /// SHA-256 of the weights as little-endian `f64` bytes, hex-encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for w in self.weights.as_slice() {
            h.update(w.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            state: self.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::format(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EncoderState> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint {} v{}", file.format, file.version),
            ));
        }
        let s = file.state;
        let shape = (s.config.embed_dim, s.config.input_dim);
        if s.weights.shape() != shape || s.adam_m.shape() != shape || s.adam_v.shape() != shape {
            return Err(Error::format(path, "matrix shapes disagree with config"));
        }
        Ok(s)
    }
}

impl Encoder for EncoderState {
    fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    fn embed_dim(&self) -> usize {
        self.weights.rows()
    }

    fn encode(&self, x: &[f64]) -> Result<UnitVector> {
        normalize(&self.weights.mul_vec(x)?)
    }
}
