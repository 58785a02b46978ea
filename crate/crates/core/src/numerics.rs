//! Normalization, similarity and distance matrices, and stable softmax helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, squared_distance, Matrix};

/// Guard below which a vector is treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// A `B x d` block of embeddings with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    data: Matrix,
    labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(data: Matrix, labels: Vec<usize>) -> Result<Self> {
        if data.rows() == 0 || data.cols() == 0 {
            return Err(Error::EmptyInput);
        }
        if labels.len() != data.rows() {
            return Err(Error::DimensionMismatch {
                expected: data.rows(),
                found: labels.len(),
            });
        }
        Ok(Self { data, labels })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], labels: &[usize]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?, labels.to_vec())
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Matrix {
        &mut self.data
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    /// Copy with every row scaled to unit length.
    pub fn normalized(&self) -> Result<Self> {
        Ok(Self {
            data: normalize_rows(&self.data)?,
            labels: self.labels.clone(),
        })
    }

    /// True when every row has norm within `tol` of one.
    pub fn is_normalized(&self, tol: f64) -> bool {
        self.data.iter_rows().all(|r| (norm(r) - 1.0).abs() <= tol)
    }

    /// Number of distinct labels present.
    pub fn num_classes(&self) -> usize {
        let mut seen: Vec<usize> = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            data: self.data.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    SquaredEuclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetKind {
    Sample,
    Proxy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Matrix,
    pub metric: Metric,
    pub row_kind: SetKind,
    pub col_kind: SetKind,
}

impl SimilarityMatrix {
    pub fn new(values: Matrix, metric: Metric) -> Self {
        Self {
            values,
            metric,
            row_kind: SetKind::Sample,
            col_kind: SetKind::Sample,
        }
    }

    pub fn with_kinds(mut self, row_kind: SetKind, col_kind: SetKind) -> Self {
        self.row_kind = row_kind;
        self.col_kind = col_kind;
        self
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= NORM_EPS || !n.is_finite() {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let unit = l2_normalize(m.row(i))?;
        out.row_mut(i).copy_from_slice(&unit);
    }
    Ok(out)
}

fn check_cols(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            expected: a.cols(),
            found: b.cols(),
        });
    }
    Ok(())
}

/// `values[i][j] = cos(a_i, b_j)`, clamped to `[-1, 1]`.
pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix) -> Result<SimilarityMatrix> {
    check_cols(a, b)?;
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    let mut values = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let c = dot(a.row(i), b.row(j)) / (na[i] * nb[j]);
            values.set(i, j, c.clamp(-1.0, 1.0));
        }
    }
    Ok(SimilarityMatrix::new(values, Metric::Cosine))
}

fn row_norms(m: &Matrix) -> Result<Vec<f64>> {
    m.iter_rows()
        .map(|r| {
            let n = norm(r);
            if n <= NORM_EPS {
                Err(Error::ZeroVector { norm: n })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// `values[i][j] = ||a_i - b_j||^2`.
pub fn squared_euclidean_matrix(a: &Matrix, b: &Matrix) -> Result<SimilarityMatrix> {
    check_cols(a, b)?;
    let mut values = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            values.set(i, j, squared_distance(a.row(i), b.row(j)));
        }
    }
    Ok(SimilarityMatrix::new(values, Metric::SquaredEuclidean))
}

pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    match values {
        [] => Err(Error::EmptyInput),
        [single] => Ok(*single),
        _ => {
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Ok(max);
            }
            let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
            Ok(max + s.ln())
        }
    }
}

pub fn softmax(row: &[f64]) -> Result<Vec<f64>> {
    masked_softmax(row, &vec![true; row.len()])
}

/// Softmax restricted to `mask`; masked-out entries are exactly zero.
pub fn masked_softmax(row: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if row.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            expected: row.len(),
            found: mask.len(),
        });
    }
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut out: Vec<f64> = row
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// `log(1 + sum_k exp(x_k))` and the weights `exp(x_k) / (1 + sum)`, which
/// are its partial derivatives. Empty input gives `(0, [])`.
pub fn log1p_sum_exp(xs: &[f64]) -> (f64, Vec<f64>) {
    let max = xs.iter().copied().fold(0.0_f64, f64::max);
    let base = (-max).exp();
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let denom = base + exps.iter().sum::<f64>();
    let weights = exps.iter().map(|e| e / denom).collect();
    (max + denom.ln(), weights)
}
