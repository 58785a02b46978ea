//! Multi-proxy graph metric loss.
//!
//! Pipeline per batch:
//! 1. sample-to-proxy similarities `S^p = P F^T`, shape `(M*C) x B`
//! 2. per sample, keep all `M` proxies of its own class plus the `K - M`
//!    most similar remaining proxies
//! 3. sum the kept similarities per class; classes with no kept proxy are
//!    masked out
//! 4. masked softmax over classes, negative log-likelihood at the label
//! 5. proxy-to-proxy regularizer: class-summed `P P^T`, softmax, NLL at each
//!    proxy's own class, weighted by `lambda`
//!
//! Selection is a constant of the batch for differentiation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss::{chain_cross, chain_gram, LossOutput};
use crate::numerics::{masked_softmax, softmax, EmbeddingBatch, SimilarityMatrix};
use crate::proxy::ProxySet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyGmlConfig {
    /// Proxies kept per sample.
    pub k: usize,
    /// Regularizer weight.
    pub lambda: f64,
    /// Proxies per class.
    pub m: usize,
}

impl ProxyGmlConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let max = self.m * num_classes;
        if self.m == 0 || self.k < self.m || self.k > max {
            return Err(Error::KOutOfRange {
                k: self.k,
                min: self.m,
                max,
            });
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Per-sample proxy selection, each list sorted by proxy index.
///
/// `s_p` is the `(M*C) x B` proxy-by-sample similarity matrix. Ties among
/// the free slots go to the lowest proxy index.
pub fn proxygml_select(
    s_p: &SimilarityMatrix,
    labels: &[usize],
    proxies: &ProxySet,
    cfg: &ProxyGmlConfig,
) -> Result<Vec<Vec<usize>>> {
    cfg.validate(proxies.num_classes())?;
    let (np, b) = s_p.shape();
    if np != proxies.len() {
        return Err(Error::DimensionMismatch {
            expected: proxies.len(),
            found: np,
        });
    }
    if b != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: b,
        });
    }
    if proxies.per_class() != cfg.m {
        return Err(Error::InvalidConfig(format!(
            "config M = {} but proxy set has {} per class",
            cfg.m,
            proxies.per_class()
        )));
    }
    (0..b)
        .map(|i| {
            let y = labels[i];
            if y >= proxies.num_classes() {
                return Err(Error::MissingProxy { class: y });
            }
            let mut chosen = proxies.proxies_of(y);
            let mut rest: Vec<usize> = (0..np).filter(|&j| proxies.class_of(j) != y).collect();
            // stable sort keeps lower indices first among equal similarities
            rest.sort_by(|&a, &c| s_p.get(c, i).total_cmp(&s_p.get(a, i)));
            chosen.extend_from_slice(&rest[..cfg.k - cfg.m]);
            chosen.sort_unstable();
            Ok(chosen)
        })
        .collect()
}

/// Intermediate quantities of one ProxyGML evaluation.
#[derive(Clone, Debug)]
pub struct ProxyGmlParts {
    pub selection: Vec<Vec<usize>>,
    /// `B x C` class-aggregated similarities.
    pub class_similarity: Matrix,
    /// `B x C` masked softmax probabilities.
    pub probabilities: Matrix,
    pub class_mask: Vec<Vec<bool>>,
    pub ce: f64,
    pub reg: f64,
}

pub fn proxygml_loss(batch: &EmbeddingBatch, proxies: &ProxySet, cfg: &ProxyGmlConfig) -> Result<LossOutput> {
    proxygml_loss_with_parts(batch, proxies, cfg).map(|(out, _)| out)
}

pub fn proxygml_loss_with_parts(
    batch: &EmbeddingBatch,
    proxies: &ProxySet,
    cfg: &ProxyGmlConfig,
) -> Result<(LossOutput, ProxyGmlParts)> {
    if batch.dim() != proxies.dim() {
        return Err(Error::DimensionMismatch {
            expected: batch.dim(),
            found: proxies.dim(),
        });
    }
    let s_p = SimilarityMatrix::new(
        proxies.vectors().matmul_t(batch.data())?,
        crate::numerics::Metric::Cosine,
    )
    .with_kinds(crate::numerics::SetKind::Proxy, crate::numerics::SetKind::Sample);
    let selection = proxygml_select(&s_p, batch.labels(), proxies, cfg)?;
    proxygml_eval(batch, proxies, cfg, &s_p, selection)
}

/// Evaluates the loss with a fixed selection.
pub(crate) fn proxygml_eval(
    batch: &EmbeddingBatch,
    proxies: &ProxySet,
    cfg: &ProxyGmlConfig,
    s_p: &SimilarityMatrix,
    selection: Vec<Vec<usize>>,
) -> Result<(LossOutput, ProxyGmlParts)> {
    let b = batch.len();
    let c = proxies.num_classes();
    let np = proxies.len();
    let inv_b = 1.0 / b as f64;

    let mut class_similarity = Matrix::zeros(b, c);
    let mut class_mask = vec![vec![false; c]; b];
    for (i, sel) in selection.iter().enumerate() {
        for &j in sel {
            let cls = proxies.class_of(j);
            class_similarity.add_at(i, cls, s_p.get(j, i));
            class_mask[i][cls] = true;
        }
    }

    // dL/dS^p, (M*C) x B
    let mut g_sp = Matrix::zeros(np, b);
    let mut probabilities = Matrix::zeros(b, c);
    let mut ce = 0.0;
    for i in 0..b {
        let y = batch.labels()[i];
        if !class_mask[i].iter().any(|&m| m) {
            return Err(Error::DegenerateRow { sample: i });
        }
        let p = masked_softmax(class_similarity.row(i), &class_mask[i])?;
        ce -= p[y].ln();
        probabilities.row_mut(i).copy_from_slice(&p);
        for &j in &selection[i] {
            let cls = proxies.class_of(j);
            let target = if cls == y { 1.0 } else { 0.0 };
            g_sp.set(j, i, (p[cls] - target) * inv_b);
        }
    }
    ce *= inv_b;

    // proxy-to-proxy regularizer
    let sp = proxies.vectors().matmul_t(proxies.vectors())?;
    let inv_np = 1.0 / np as f64;
    let mut g_pp = Matrix::zeros(np, np);
    let mut reg = 0.0;
    for j in 0..np {
        let mut agg = vec![0.0; c];
        for k in 0..np {
            agg[proxies.class_of(k)] += sp.get(j, k);
        }
        let q = softmax(&agg)?;
        let own = proxies.class_of(j);
        reg -= q[own].ln();
        for k in 0..np {
            let cls = proxies.class_of(k);
            let target = if cls == own { 1.0 } else { 0.0 };
            g_pp.set(j, k, cfg.lambda * (q[cls] - target) * inv_np);
        }
    }
    reg *= inv_np;

    let (gp_ce, gf) = chain_cross(&g_sp, proxies.vectors(), batch.data());
    let mut gp = chain_gram(&g_pp, proxies.vectors());
    gp.add_scaled(&gp_ce, 1.0)?;

    let out = LossOutput {
        value: ce + cfg.lambda * reg,
        grad_embeddings: gf,
        grad_proxies: Some(gp),
    };
    let parts = ProxyGmlParts {
        selection,
        class_similarity,
        probabilities,
        class_mask,
        ce,
        reg,
    };
    Ok((out, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Metric, SetKind};

    fn proxies_2x3() -> ProxySet {
        ProxySet::class_major(Matrix::zeros(6, 2), 2).unwrap()
    }

    fn sp(rows: &[&[f64]]) -> SimilarityMatrix {
        SimilarityMatrix::new(Matrix::from_rows(rows).unwrap(), Metric::Cosine)
            .with_kinds(SetKind::Proxy, SetKind::Sample)
    }

    #[test]
    fn select_k_equals_m() {
        let p = proxies_2x3();
        let s = sp(&[&[0.1], &[0.2], &[0.9], &[0.8], &[0.7], &[0.6]]);
        let cfg = ProxyGmlConfig {
            k: 2,
            lambda: 0.0,
            m: 2,
        };
        assert_eq!(proxygml_select(&s, &[0], &p, &cfg).unwrap(), vec![vec![0, 1]]);
    }

    #[test]
    fn select_full() {
        let p = proxies_2x3();
        let s = sp(&[&[0.1], &[0.2], &[0.9], &[0.8], &[0.7], &[0.6]]);
        let cfg = ProxyGmlConfig {
            k: 6,
            lambda: 0.0,
            m: 2,
        };
        assert_eq!(
            proxygml_select(&s, &[1], &p, &cfg).unwrap(),
            vec![(0..6).collect::<Vec<_>>()]
        );
    }

    #[test]
    fn select_ties_lowest_index() {
        let p = proxies_2x3();
        let s = sp(&[&[0.0], &[0.0], &[0.5], &[0.5], &[0.5], &[0.5]]);
        let cfg = ProxyGmlConfig {
            k: 3,
            lambda: 0.0,
            m: 2,
        };
        assert_eq!(proxygml_select(&s, &[0], &p, &cfg).unwrap(), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn k_out_of_range() {
        let p = proxies_2x3();
        let s = sp(&[&[0.0], &[0.0], &[0.5], &[0.5], &[0.5], &[0.5]]);
        for k in [1, 7] {
            let cfg = ProxyGmlConfig { k, lambda: 0.0, m: 2 };
            assert!(matches!(
                proxygml_select(&s, &[0], &p, &cfg),
                Err(Error::KOutOfRange { .. })
            ));
        }
    }

    #[test]
    fn single_class_has_zero_ce() {
        let p = ProxySet::class_major(Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), 1).unwrap();
        let batch = EmbeddingBatch::from_rows(&[[0.6, 0.8], [0.0, 1.0]], &[0, 0]).unwrap();
        let cfg = ProxyGmlConfig {
            k: 1,
            lambda: 0.5,
            m: 1,
        };
        let (out, parts) = proxygml_loss_with_parts(&batch, &p, &cfg).unwrap();
        assert_eq!(parts.ce, 0.0);
        assert_eq!(out.value, 0.0);
    }
}
