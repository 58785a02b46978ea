//! Loss result type and the chain rules from similarity/distance matrices
//! back to the vectors they were built from.

use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};

/// Scalar loss with gradients for every trainable input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_embeddings: Matrix,
    pub grad_proxies: Option<Matrix>,
}

impl LossOutput {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self {
            value: 0.0,
            grad_embeddings: Matrix::zeros(rows, cols),
            grad_proxies: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_embeddings.is_finite()
            && self.grad_proxies.as_ref().is_none_or(Matrix::is_finite)
    }

    /// `self + weight * other`, gradients included.
    pub fn combined(&self, other: &LossOutput, weight: f64) -> Result<LossOutput> {
        if self.grad_embeddings.shape() != other.grad_embeddings.shape() {
            return Err(Error::ShapeMismatch(format!(
                "embedding gradients {:?} vs {:?}",
                self.grad_embeddings.shape(),
                other.grad_embeddings.shape()
            )));
        }
        let mut grad_embeddings = self.grad_embeddings.clone();
        grad_embeddings.add_scaled(&other.grad_embeddings, weight)?;
        let grad_proxies = match (&self.grad_proxies, &other.grad_proxies) {
            (None, None) => None,
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => {
                let mut g = b.clone();
                g.scale(weight);
                Some(g)
            }
            (Some(a), Some(b)) => {
                let mut g = a.clone();
                g.add_scaled(b, weight)
                    .map_err(|_| Error::ShapeMismatch(format!("proxy gradients {:?} vs {:?}", a.shape(), b.shape())))?;
                Some(g)
            }
        };
        Ok(LossOutput {
            value: self.value + weight * other.value,
            grad_embeddings,
            grad_proxies,
        })
    }
}

/// For `S = F F^T`: `dL/dF = (G + G^T) F`.
pub(crate) fn chain_gram(g: &Matrix, f: &Matrix) -> Matrix {
    let n = f.rows();
    let mut out = Matrix::zeros(n, f.cols());
    for i in 0..n {
        for j in 0..n {
            let w = g.get(i, j) + g.get(j, i);
            if w != 0.0 {
                axpy(out.row_mut(i), w, f.row(j));
            }
        }
    }
    out
}

/// For `S = A B^T`: returns `(G B, G^T A)`.
pub(crate) fn chain_cross(g: &Matrix, a: &Matrix, b: &Matrix) -> (Matrix, Matrix) {
    let mut ga = Matrix::zeros(a.rows(), a.cols());
    let mut gb = Matrix::zeros(b.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let w = g.get(i, j);
            if w != 0.0 {
                axpy(ga.row_mut(i), w, b.row(j));
                axpy(gb.row_mut(j), w, a.row(i));
            }
        }
    }
    (ga, gb)
}

/// For `D_ij = ||a_i - b_j||^2`: returns `(dL/dA, dL/dB)`.
pub(crate) fn chain_sqdist_cross(g: &Matrix, a: &Matrix, b: &Matrix) -> (Matrix, Matrix) {
    let mut ga = Matrix::zeros(a.rows(), a.cols());
    let mut gb = Matrix::zeros(b.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let w = 2.0 * g.get(i, j);
            if w == 0.0 {
                continue;
            }
            let (ai, bj) = (a.row(i), b.row(j));
            for k in 0..a.cols() {
                let diff = ai[k] - bj[k];
                ga.add_at(i, k, w * diff);
                gb.add_at(j, k, -w * diff);
            }
        }
    }
    (ga, gb)
}

/// For `D_ij = ||f_i - f_j||^2` within one set.
pub(crate) fn chain_sqdist_gram(g: &Matrix, f: &Matrix) -> Matrix {
    let (ga, gb) = chain_sqdist_cross(g, f, f);
    let mut out = ga;
    out.add_scaled(&gb, 1.0).expect("same shape");
    out
}
