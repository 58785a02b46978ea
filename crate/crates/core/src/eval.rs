//! Retrieval and separation metrics over a set of embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::class_groups;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::numerics::{cosine_similarity_matrix, squared_euclidean_matrix, EmbeddingBatch};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    #[default]
    Cosine,
    SquaredEuclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub recall_at_k: BTreeMap<usize, f64>,
    pub mean_intra_cos: f64,
    pub mean_inter_cos: f64,
    pub separation_gap: f64,
}

/// Neighbours of every sample, nearest first, self excluded. Ties go to the
/// lower index.
fn neighbour_lists(embeddings: &Matrix, metric: EvalMetric, depth: usize) -> Result<Vec<Vec<usize>>> {
    let n = embeddings.rows();
    // larger score is nearer
    let scores = match metric {
        EvalMetric::Cosine => cosine_similarity_matrix(embeddings, embeddings)?.values,
        EvalMetric::SquaredEuclidean => {
            let mut d = squared_euclidean_matrix(embeddings, embeddings)?.values;
            d.scale(-1.0);
            d
        }
    };
    Ok((0..n)
        .map(|i| {
            let row = scores.row(i);
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            others.truncate(depth);
            others
        })
        .collect())
}

fn check_recall_inputs(labels: &[usize], ks: &[usize]) -> Result<()> {
    let n = labels.len();
    for (label, members) in class_groups(labels).iter().enumerate() {
        if members.len() == 1 {
            return Err(Error::SingletonClass { label });
        }
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::KTooLarge { k, n });
    }
    Ok(())
}

/// Fraction of samples with a same-class sample among their `k` nearest
/// neighbours by cosine similarity.
pub fn recall_at_k(embeddings: &EmbeddingBatch, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    recall_at_k_with(embeddings, ks, EvalMetric::Cosine)
}

pub fn recall_at_k_with(embeddings: &EmbeddingBatch, ks: &[usize], metric: EvalMetric) -> Result<BTreeMap<usize, f64>> {
    let labels = embeddings.labels();
    check_recall_inputs(labels, ks)?;
    let depth = ks.iter().copied().max().unwrap_or(0);
    let neighbours = neighbour_lists(embeddings.data(), metric, depth)?;
    // rank of the first same-class neighbour, if within depth
    let first_hit: Vec<Option<usize>> = neighbours
        .iter()
        .enumerate()
        .map(|(i, nb)| nb.iter().position(|&j| labels[j] == labels[i]))
        .collect();
    let n = labels.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|r| r.is_some_and(|r| r < k)).count();
            (k, hits as f64 / n)
        })
        .collect())
}

/// Mean cosine over same-label pairs and over different-label pairs
/// (unordered, `i < j`).
pub fn separation_stats(embeddings: &EmbeddingBatch) -> Result<(f64, f64)> {
    let labels = embeddings.labels();
    let classes = class_groups(labels).iter().filter(|g| !g.is_empty()).count();
    if classes < 2 {
        return Err(Error::InsufficientClasses {
            needed: 2,
            available: classes,
        });
    }
    let s = cosine_similarity_matrix(embeddings.data(), embeddings.data())?.values;
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                intra += s.get(i, j);
                n_intra += 1;
            } else {
                inter += s.get(i, j);
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 {
        return Err(Error::BadBatchStructure("no same-class pair".into()));
    }
    Ok((intra / n_intra as f64, inter / n_inter as f64))
}

pub fn evaluate(embeddings: &EmbeddingBatch, ks: &[usize], metric: EvalMetric) -> Result<RetrievalReport> {
    let recall_at_k = recall_at_k_with(embeddings, ks, metric)?;
    let (mean_intra_cos, mean_inter_cos) = separation_stats(embeddings)?;
    Ok(RetrievalReport {
        recall_at_k,
        mean_intra_cos,
        mean_inter_cos,
        separation_gap: mean_intra_cos - mean_inter_cos,
    })
}
