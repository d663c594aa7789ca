//! Vector primitives: normalization, cosine similarity, similarity matrices
//! and the analytic gradient of a cosine through L2 normalization.
//!
//! All arithmetic is `f64`. A [`UnitVector`] carries the unit-norm invariant,
//! so cosine between two of them is a plain dot product.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Allowed deviation of a [`UnitVector`]'s norm from 1.
pub const UNIT_TOL: f64 = 1e-5;

/// A feature before normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RawVector(Vec<f64>);

impl RawVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite entry at index {i}")));
        }
        Ok(RawVector(values))
    }

    pub fn zeros(len: usize) -> Self {
        RawVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl Deref for RawVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<UnitVector> for RawVector {
    fn from(u: UnitVector) -> Self {
        RawVector(u.0)
    }
}

/// An L2-normalized feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Wraps values that are already unit-norm, checking the invariant.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if values.is_empty() || !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidInput(format!("vector of norm {n} is not unit length")));
        }
        Ok(UnitVector(values))
    }

    /// The i-th standard basis vector of length `dim`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        UnitVector(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl Deref for UnitVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for UnitVector {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        UnitVector::from_unit(values)
    }
}

impl From<UnitVector> for Vec<f64> {
    fn from(u: UnitVector) -> Self {
        u.0
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self · x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dims(self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// `self += scale · (a ⊗ b)`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) -> Result<()> {
        check_dims(self.rows, a.len())?;
        check_dims(self.cols, b.len())?;
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let s = scale * ar;
            for (w, &bc) in self.row_mut(r).iter_mut().zip(b) {
                *w += s * bc;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `v / ‖v‖₂`, rejecting vectors whose norm does not exceed [`NORM_EPS`].
pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    let n = norm(v);
    if n <= NORM_EPS || !n.is_finite() {
        return Err(Error::DegenerateVector { norm: n });
    }
    Ok(UnitVector(v.iter().map(|x| x / n).collect()))
}

pub fn cosine(a: &UnitVector, b: &UnitVector) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    Ok(dot(a, b))
}

/// `|A| × |B|` matrix of pairwise cosines.
pub fn similarity_matrix(a: &[UnitVector], b: &[UnitVector]) -> Result<Matrix> {
    if let Some(first) = a.first().or(b.first()) {
        let d = first.dim();
        for v in a.iter().chain(b) {
            check_dims(d, v.dim())?;
        }
    }
    let mut m = Matrix::zeros(a.len(), b.len());
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            m.set(i, j, dot(ai, bj));
        }
    }
    Ok(m)
}

/// Gradient of `cos(normalize(u), b)` with respect to `u`:
/// `b/‖u‖ − (û·b)·u/‖u‖³`.
pub fn cosine_grad_raw(u: &[f64], b: &UnitVector) -> Result<RawVector> {
    check_dims(u.len(), b.dim())?;
    project_grad(u, b).map(RawVector)
}

/// Pulls an upstream gradient `g = ∂L/∂û` back through `û = u/‖u‖`:
/// `(g − (û·g)·û) / ‖u‖`. Linear in `g`, so summed upstream gradients can be
/// projected once.
pub(crate) fn project_grad(u: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let n = norm(u);
    if n <= NORM_EPS || n.is_nan() {
        return Err(Error::DegenerateVector { norm: n });
    }
    let along = dot(u, g) / n;
    Ok(u.iter().zip(g).map(|(&ui, &gi)| (gi - along * ui / n) / n).collect())
}

/// Mean of unit vectors, re-normalized.
pub fn mean_direction(vs: &[UnitVector]) -> Result<UnitVector> {
    let first = vs
        .first()
        .ok_or_else(|| Error::InvalidInput("mean of zero vectors".into()))?;
    let mut acc = vec![0.0; first.dim()];
    for v in vs {
        check_dims(acc.len(), v.dim())?;
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    let k = vs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    normalize(&acc)
}
