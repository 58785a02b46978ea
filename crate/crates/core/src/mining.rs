//! Multi-Similarity pair mining.
//!
//! For anchor `i` with easiest-to-miss positive similarity `S_ik` (the
//! minimum over its positives) and hardest negative similarity `S_ij` (the
//! maximum over its negatives):
//!
//! * negative `n` is kept iff `S_in > S_ik - eps`
//! * positive `p` is kept iff `S_ip < S_ij + eps`

use crate::error::{Error, Result};
use crate::numerics::{Metric, SimilarityMatrix};

pub const DEFAULT_MS_EPSILON: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipReason {
    NoPositive,
    NoNegative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsMiningMasks {
    size: usize,
    positive: Vec<bool>,
    negative: Vec<bool>,
    pub epsilon: f64,
    /// Anchors left out of mining, with the reason.
    pub skipped: Vec<(usize, SkipReason)>,
}

impl MsMiningMasks {
    pub fn empty(size: usize, epsilon: f64) -> Self {
        Self {
            size,
            positive: vec![false; size * size],
            negative: vec![false; size * size],
            epsilon,
            skipped: Vec::new(),
        }
    }

    /// Masks from explicit `(anchor, other)` pairs.
    pub fn from_pairs(size: usize, epsilon: f64, positives: &[(usize, usize)], negatives: &[(usize, usize)]) -> Self {
        let mut m = Self::empty(size, epsilon);
        for &(i, j) in positives {
            m.positive[i * size + j] = true;
        }
        for &(i, j) in negatives {
            m.negative[i * size + j] = true;
        }
        m
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn positive(&self, i: usize, j: usize) -> bool {
        self.positive[i * self.size + j]
    }

    #[inline]
    pub fn negative(&self, i: usize, j: usize) -> bool {
        self.negative[i * self.size + j]
    }

    pub fn positives_of(&self, i: usize) -> Vec<usize> {
        (0..self.size).filter(|&j| self.positive(i, j)).collect()
    }

    pub fn negatives_of(&self, i: usize) -> Vec<usize> {
        (0..self.size).filter(|&j| self.negative(i, j)).collect()
    }

    pub fn selected_pairs(&self) -> usize {
        self.positive.iter().chain(&self.negative).filter(|&&b| b).count()
    }
}

/// Mines informative pairs from a cosine similarity matrix over one batch.
/// Anchors with no positive or no negative are skipped and listed in
/// [`MsMiningMasks::skipped`].
pub fn ms_mine(s: &SimilarityMatrix, labels: &[usize], epsilon: f64) -> Result<MsMiningMasks> {
    let (rows, cols) = s.shape();
    if rows != cols {
        return Err(Error::ShapeMismatch(format!(
            "mining needs a square matrix, got {rows}x{cols}"
        )));
    }
    if rows != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: rows,
            found: labels.len(),
        });
    }
    if s.metric != Metric::Cosine {
        return Err(Error::InvalidConfig("mining expects cosine similarities".into()));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let mut masks = MsMiningMasks::empty(rows, epsilon);
    for i in 0..rows {
        let mut min_pos = f64::INFINITY;
        let mut max_neg = f64::NEG_INFINITY;
        for j in 0..rows {
            if j == i {
                continue;
            }
            let v = s.get(i, j);
            if labels[j] == labels[i] {
                min_pos = min_pos.min(v);
            } else {
                max_neg = max_neg.max(v);
            }
        }
        if min_pos == f64::INFINITY {
            masks.skipped.push((i, SkipReason::NoPositive));
            continue;
        }
        if max_neg == f64::NEG_INFINITY {
            masks.skipped.push((i, SkipReason::NoNegative));
            continue;
        }
        for j in 0..rows {
            if j == i {
                continue;
            }
            let v = s.get(i, j);
            let idx = i * rows + j;
            if labels[j] == labels[i] {
                masks.positive[idx] = v < max_neg + epsilon;
            } else {
                masks.negative[idx] = v > min_pos - epsilon;
            }
        }
    }
    Ok(masks)
}
