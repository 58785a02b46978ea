//! Language-guided similarity distillation and direction regularization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, check_same_dim, dot, norm, squared_distance, sub, Matrix};
use crate::loss::{chain_gram, LossOutput};
use crate::mining::MsMiningMasks;
use crate::numerics::{cosine_similarity_matrix, l2_normalize, softmax, EmbeddingBatch, Metric, SimilarityMatrix};
use crate::pair::{ms_loss_impl, DirectionTerm, MsParams};
use crate::proxy::{proxynca_impl, ProxySet};

/// Minimum length of a displacement vector fed to [`direction_cos`].
pub const DIRECTION_EPS: f64 = 1e-9;

pub const DEFAULT_PROMPT_TEMPLATE: &str = "A photo of {label}";

/// Sign attached to the cosine term inside a directed loss.
///
/// `Penalize` adds `+gamma * cos`, so minimizing the loss pushes the
/// anchor-to-negative direction away from the anchor-to-positive direction.
/// `Printed` uses `-gamma * cos`, which rewards alignment instead.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSign {
    #[default]
    Penalize,
    Printed,
}

impl DirectionSign {
    pub fn factor(self) -> f64 {
        match self {
            DirectionSign::Penalize => 1.0,
            DirectionSign::Printed => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionOptions {
    pub sign: DirectionSign,
    /// Apply `[.]_+` to the whole directed triplet expression.
    pub hinge: bool,
}

impl Default for DirectionOptions {
    fn default() -> Self {
        Self {
            sign: DirectionSign::Penalize,
            hinge: true,
        }
    }
}

/// Gradients of the direction cosine with respect to each of the three points.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionGrads {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// `cos(n - a, p - a)`.
pub fn direction_cos(a: &[f64], p: &[f64], n: &[f64]) -> Result<f64> {
    direction_cos_with_grad(a, p, n).map(|(c, _)| c)
}

pub fn direction_cos_with_grad(a: &[f64], p: &[f64], n: &[f64]) -> Result<(f64, DirectionGrads)> {
    check_same_dim(a, p)?;
    check_same_dim(a, n)?;
    let u = sub(n, a);
    let v = sub(p, a);
    let (nu, nv) = (norm(&u), norm(&v));
    for len in [nu, nv] {
        if len < DIRECTION_EPS {
            return Err(Error::DegenerateDirection { norm: len });
        }
    }
    let inv = 1.0 / (nu * nv);
    let c = (dot(&u, &v) * inv).clamp(-1.0, 1.0);
    let du: Vec<f64> = u.iter().zip(&v).map(|(ui, vi)| vi * inv - c * ui / (nu * nu)).collect();
    let dv: Vec<f64> = u.iter().zip(&v).map(|(ui, vi)| ui * inv - c * vi / (nv * nv)).collect();
    let da = du.iter().zip(&dv).map(|(x, y)| -(x + y)).collect();
    Ok((
        c,
        DirectionGrads {
            anchor: da,
            positive: dv,
            negative: du,
        },
    ))
}

/// Triplet loss with a direction term, default sign and hinge.
pub fn directed_triplet_loss(fa: &[f64], fp: &[f64], fn_: &[f64], alpha: f64, gamma: f64) -> Result<LossOutput> {
    directed_triplet_loss_with(fa, fp, fn_, alpha, gamma, DirectionOptions::default())
}

/// `||a-p||^2 - ||a-n||^2 + alpha + s * gamma * cos(n-a, p-a)` with `s` from
/// `opts.sign`. Gradient rows are in argument order.
pub fn directed_triplet_loss_with(
    fa: &[f64],
    fp: &[f64],
    fn_: &[f64],
    alpha: f64,
    gamma: f64,
    opts: DirectionOptions,
) -> Result<LossOutput> {
    check_same_dim(fa, fp)?;
    check_same_dim(fa, fn_)?;
    check_gamma(gamma)?;
    let mut arg = squared_distance(fa, fp) - squared_distance(fa, fn_) + alpha;
    let cos = if gamma != 0.0 {
        let (c, g) = direction_cos_with_grad(fa, fp, fn_)?;
        arg += opts.sign.factor() * gamma * c;
        Some(g)
    } else {
        None
    };
    let mut out = LossOutput::zero(3, fa.len());
    if opts.hinge && arg <= 0.0 {
        return Ok(out);
    }
    out.value = arg;
    for k in 0..fa.len() {
        out.grad_embeddings.set(0, k, 2.0 * (fn_[k] - fp[k]));
        out.grad_embeddings.set(1, k, 2.0 * (fp[k] - fa[k]));
        out.grad_embeddings.set(2, k, 2.0 * (fa[k] - fn_[k]));
    }
    if let Some(g) = cos {
        let s = opts.sign.factor() * gamma;
        axpy(out.grad_embeddings.row_mut(0), s, &g.anchor);
        axpy(out.grad_embeddings.row_mut(1), s, &g.positive);
        axpy(out.grad_embeddings.row_mut(2), s, &g.negative);
    }
    Ok(out)
}

/// Mean directed triplet loss over every valid `(a, p, n)` in the batch.
pub fn directed_triplet_batch_loss(
    batch: &EmbeddingBatch,
    alpha: f64,
    gamma: f64,
    opts: DirectionOptions,
) -> Result<LossOutput> {
    let labels = batch.labels();
    let b = batch.len();
    let mut out = LossOutput::zero(b, batch.dim());
    let mut count = 0usize;
    for a in 0..b {
        for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
            for n in (0..b).filter(|&n| labels[n] != labels[a]) {
                count += 1;
                let t = directed_triplet_loss_with(batch.row(a), batch.row(p), batch.row(n), alpha, gamma, opts)?;
                out.value += t.value;
                for (row, idx) in [a, p, n].into_iter().enumerate() {
                    axpy(out.grad_embeddings.row_mut(idx), 1.0, t.grad_embeddings.row(row));
                }
            }
        }
    }
    if count > 0 {
        let s = 1.0 / count as f64;
        out.value *= s;
        out.grad_embeddings.scale(s);
    }
    Ok(out)
}

/// Multi-Similarity loss whose negative exponent carries
/// `s * gamma * cos(n - a, p* - a)`, `p*` being the anchor's least similar
/// mined positive. Anchors without a mined positive get no direction term.
pub fn directed_ms_loss(
    batch: &EmbeddingBatch,
    masks: &MsMiningMasks,
    params: MsParams,
    gamma: f64,
    sign: DirectionSign,
) -> Result<LossOutput> {
    check_gamma(gamma)?;
    ms_loss_impl(batch, masks, params, Some(DirectionTerm { gamma, sign }))
}

/// ProxyNCA whose denominator logit for class `k` carries
/// `s * gamma * cos(P_k - f, P_y - f)`.
pub fn directed_proxynca_loss(
    batch: &EmbeddingBatch,
    proxies: &ProxySet,
    gamma: f64,
    sign: DirectionSign,
) -> Result<LossOutput> {
    check_gamma(gamma)?;
    proxynca_impl(batch, proxies, Some(DirectionTerm { gamma, sign }))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma >= 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("gamma must be >= 0, got {gamma}")))
    }
}

/// Fixed text embeddings, one per class. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbeddingTable {
    vectors: BTreeMap<usize, Vec<f64>>,
    dim: usize,
    /// File path, or `"synthetic"`.
    pub source: String,
    pub prompt_template: String,
}

impl LabelEmbeddingTable {
    pub fn new(vectors: BTreeMap<usize, Vec<f64>>, source: impl Into<String>) -> Result<Self> {
        let dim = vectors.values().next().map(Vec::len).ok_or(Error::EmptyInput)?;
        if dim == 0 {
            return Err(Error::EmptyInput);
        }
        for v in vectors.values() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            let n = norm(v);
            if !(n > crate::numerics::NORM_EPS) {
                return Err(Error::ZeroVector { norm: n });
            }
        }
        Ok(Self {
            vectors,
            dim,
            source: source.into(),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
        })
    }

    /// Seeded random unit vectors for classes `0..num_classes`.
    pub fn synthetic(num_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::EmptyInput);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = BTreeMap::new();
        for c in 0..num_classes {
            let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            vectors.insert(c, l2_normalize(&raw)?);
        }
        Self::new(vectors, "synthetic")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.vectors.keys().copied()
    }

    pub fn get(&self, class: usize) -> Result<&[f64]> {
        self.vectors
            .get(&class)
            .map(Vec::as_slice)
            .ok_or(Error::MissingLabelEmbedding { class })
    }

    pub fn prompt_for(&self, label: &str) -> String {
        self.prompt_template.replace("{label}", label)
    }

    /// Teacher matrix: cosine similarity between the label vectors of each
    /// pair of batch samples.
    pub fn similarity_for_labels(&self, labels: &[usize]) -> Result<SimilarityMatrix> {
        let rows = labels.iter().map(|&l| self.get(l)).collect::<Result<Vec<_>>>()?;
        let m = Matrix::from_rows(&rows)?;
        cosine_similarity_matrix(&m, &m)
    }
}

/// Mean row-wise `KL(softmax(S_I) || softmax(S_L + gamma_l))`.
///
/// The returned `grad_embeddings` holds `dL/dS_I`; the teacher gets no
/// gradient.
pub fn language_distill_loss(s_i: &SimilarityMatrix, s_l: &SimilarityMatrix, gamma_l: f64) -> Result<LossOutput> {
    let (rows, cols) = s_i.shape();
    if s_l.shape() != (rows, cols) {
        let (lr, lc) = s_l.shape();
        return Err(if lr != rows {
            Error::DimensionMismatch {
                expected: rows,
                found: lr,
            }
        } else {
            Error::DimensionMismatch {
                expected: cols,
                found: lc,
            }
        });
    }
    if rows != cols {
        return Err(Error::DimensionMismatch {
            expected: rows,
            found: cols,
        });
    }
    if rows == 0 {
        return Err(Error::EmptyInput);
    }
    let inv = 1.0 / rows as f64;
    let mut grad = Matrix::zeros(rows, cols);
    let mut value = 0.0;
    for i in 0..rows {
        let p = softmax(s_i.values.row(i))?;
        let teacher: Vec<f64> = s_l.values.row(i).iter().map(|x| x + gamma_l).collect();
        let q = softmax(&teacher)?;
        let logs: Vec<f64> = p
            .iter()
            .zip(&q)
            .map(|(pj, qj)| if *pj > 0.0 { (pj / qj).ln() } else { 0.0 })
            .collect();
        let kl: f64 = p.iter().zip(&logs).map(|(pj, lj)| pj * lj).sum();
        value += kl;
        for j in 0..cols {
            grad.set(i, j, p[j] * (logs[j] - kl) * inv);
        }
    }
    Ok(LossOutput {
        value: value * inv,
        grad_embeddings: grad,
        grad_proxies: None,
    })
}

/// Distillation on a batch of unit rows, with `S_I = F F^T` and the teacher
/// built from `table`. Gradients are with respect to the embeddings.
pub fn language_loss(batch: &EmbeddingBatch, table: &LabelEmbeddingTable, gamma_l: f64) -> Result<LossOutput> {
    let f = batch.data();
    let s_i = SimilarityMatrix::new(f.matmul_t(f)?, Metric::Cosine);
    let s_l = table.similarity_for_labels(batch.labels())?;
    let out = language_distill_loss(&s_i, &s_l, gamma_l)?;
    Ok(LossOutput {
        value: out.value,
        grad_embeddings: chain_gram(&out.grad_embeddings, f),
        grad_proxies: None,
    })
}

/// `dml + omega * lang`.
pub fn combine_with_language(dml: &LossOutput, lang: &LossOutput, omega: f64) -> Result<LossOutput> {
    dml.combined(lang, omega)
}
