//! Contrastive, triplet, N-pair and Multi-Similarity losses.
//!
//! Single-tuple losses return one gradient row per input vector, in argument
//! order. Batch losses return gradients shaped like the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, check_same_dim, dot, norm, squared_distance, Matrix};
use crate::loss::{chain_cross, chain_gram, LossOutput};
use crate::mining::MsMiningMasks;
use crate::numerics::{log1p_sum_exp, softmax, EmbeddingBatch};
use crate::regularizers::{direction_cos_with_grad, DirectionSign};

pub const DEFAULT_TRIPLET_MARGIN: f64 = 0.2;
pub const DEFAULT_CONTRASTIVE_MARGIN: f64 = 1.0;

/// Unit-norm tolerance for inputs to the cosine triplet loss.
pub const UNIT_TOL: f64 = 1e-6;

pub fn contrastive_loss(fi: &[f64], fj: &[f64], same_class: bool, alpha: f64) -> Result<LossOutput> {
    check_same_dim(fi, fj)?;
    let d = squared_distance(fi, fj);
    let mut out = LossOutput::zero(2, fi.len());
    // +1 pulls together, -1 pushes apart, 0 inactive hinge
    let sign = if same_class {
        out.value = d;
        1.0
    } else if !(alpha - d <= 0.0) {
        out.value = alpha - d;
        -1.0
    } else {
        0.0
    };
    if sign != 0.0 {
        for k in 0..fi.len() {
            let g = sign * 2.0 * (fi[k] - fj[k]);
            out.grad_embeddings.set(0, k, g);
            out.grad_embeddings.set(1, k, -g);
        }
    }
    Ok(out)
}

pub fn triplet_loss_euclidean(fa: &[f64], fp: &[f64], fn_: &[f64], alpha: f64) -> Result<LossOutput> {
    check_same_dim(fa, fp)?;
    check_same_dim(fa, fn_)?;
    let arg = squared_distance(fa, fp) - squared_distance(fa, fn_) + alpha;
    let mut out = LossOutput::zero(3, fa.len());
    // NaN counts as active so it reaches the loss value
    if !(arg <= 0.0) {
        out.value = arg;
        for k in 0..fa.len() {
            out.grad_embeddings.set(0, k, 2.0 * (fn_[k] - fp[k]));
            out.grad_embeddings.set(1, k, 2.0 * (fp[k] - fa[k]));
            out.grad_embeddings.set(2, k, 2.0 * (fa[k] - fn_[k]));
        }
    }
    Ok(out)
}

/// Triplet loss on pre-normalized vectors. No normalization Jacobian is
/// applied; inputs must already be unit-norm within [`UNIT_TOL`].
pub fn triplet_loss_cosine(fa: &[f64], fp: &[f64], fn_: &[f64], alpha: f64) -> Result<LossOutput> {
    check_same_dim(fa, fp)?;
    check_same_dim(fa, fn_)?;
    for v in [fa, fp, fn_] {
        let n = norm(v);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotNormalized { norm: n });
        }
    }
    Ok(triplet_cosine_unchecked(fa, fp, fn_, alpha))
}

pub(crate) fn triplet_cosine_unchecked(fa: &[f64], fp: &[f64], fn_: &[f64], alpha: f64) -> LossOutput {
    let arg = dot(fa, fn_) - dot(fa, fp) + alpha;
    let mut out = LossOutput::zero(3, fa.len());
    if !(arg <= 0.0) {
        out.value = arg;
        for k in 0..fa.len() {
            out.grad_embeddings.set(0, k, fn_[k] - fp[k]);
            out.grad_embeddings.set(1, k, -fa[k]);
            out.grad_embeddings.set(2, k, fa[k]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletMetric {
    #[default]
    Euclidean,
    Cosine,
}

/// Mean over every triplet `(a, p, n)` in the batch with `y_a == y_p`,
/// `a != p` and `y_n != y_a`. Inactive triplets count toward the mean.
pub fn triplet_batch_loss(batch: &EmbeddingBatch, alpha: f64, metric: TripletMetric) -> LossOutput {
    let labels = batch.labels();
    let b = batch.len();
    let mut out = LossOutput::zero(b, batch.dim());
    let mut count = 0usize;
    for a in 0..b {
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..b {
                if labels[n] == labels[a] {
                    continue;
                }
                count += 1;
                let (fa, fp, fn_) = (batch.row(a), batch.row(p), batch.row(n));
                let t = match metric {
                    TripletMetric::Euclidean => triplet_loss_euclidean(fa, fp, fn_, alpha).expect("same batch"),
                    TripletMetric::Cosine => triplet_cosine_unchecked(fa, fp, fn_, alpha),
                };
                if !(t.value <= 0.0) {
                    out.value += t.value;
                    for (row, idx) in [a, p, n].into_iter().enumerate() {
                        axpy(out.grad_embeddings.row_mut(idx), 1.0, t.grad_embeddings.row(row));
                    }
                }
            }
        }
    }
    if count > 0 {
        let s = 1.0 / count as f64;
        out.value *= s;
        out.grad_embeddings.scale(s);
    }
    out
}

/// Mean contrastive loss over all unordered pairs in the batch.
pub fn contrastive_batch_loss(batch: &EmbeddingBatch, alpha: f64) -> LossOutput {
    let labels = batch.labels();
    let b = batch.len();
    let mut out = LossOutput::zero(b, batch.dim());
    let mut count = 0usize;
    for i in 0..b {
        for j in i + 1..b {
            count += 1;
            let t = contrastive_loss(batch.row(i), batch.row(j), labels[i] == labels[j], alpha).expect("same batch");
            out.value += t.value;
            axpy(out.grad_embeddings.row_mut(i), 1.0, t.grad_embeddings.row(0));
            axpy(out.grad_embeddings.row_mut(j), 1.0, t.grad_embeddings.row(1));
        }
    }
    if count > 0 {
        let s = 1.0 / count as f64;
        out.value *= s;
        out.grad_embeddings.scale(s);
    }
    out
}

/// How the N-pair log-sum is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NpairForm {
    /// `log(1 + sum_j exp(s_ij - s_ii))`.
    #[default]
    Exponential,
    /// `log(1 + sum_j (s_ij - s_ii))`, without exponentials. Only defined
    /// while the log argument stays positive.
    Literal,
}

/// `(anchor_row, positive_row)` per class, classes in order of first
/// appearance. Within a class the earlier row is the anchor.
pub fn npair_pairs(labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let mut order: Vec<usize> = Vec::new();
    let mut rows: Vec<Vec<usize>> = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        match order.iter().position(|&c| c == y) {
            Some(k) => rows[k].push(i),
            None => {
                order.push(y);
                rows.push(vec![i]);
            }
        }
    }
    rows.iter()
        .zip(&order)
        .map(|(r, &c)| match r.as_slice() {
            [a, p] => Ok((*a, *p)),
            _ => Err(Error::BadBatchStructure(format!(
                "class {c} has {} samples, N-pair needs exactly 2",
                r.len()
            ))),
        })
        .collect()
}

pub fn npair_loss(batch: &EmbeddingBatch) -> Result<LossOutput> {
    npair_loss_with(batch, NpairForm::Exponential)
}

/// N-pair loss averaged over the `C` anchors of a two-per-class batch.
pub fn npair_loss_with(batch: &EmbeddingBatch, form: NpairForm) -> Result<LossOutput> {
    let pairs = npair_pairs(batch.labels())?;
    let c = pairs.len();
    let anchors = batch.data().select_rows(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let positives = batch.data().select_rows(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let s = anchors.matmul_t(&positives)?;
    let mut g = Matrix::zeros(c, c);
    let mut value = 0.0;
    let inv_c = 1.0 / c as f64;
    for i in 0..c {
        let row = s.row(i);
        match form {
            NpairForm::Exponential => {
                // log(1 + sum_{j!=i} e^{s_ij - s_ii}) is cross-entropy on row i
                let p = softmax(row)?;
                let lse = row[i] - p[i].ln();
                value += lse - row[i];
                for j in 0..c {
                    let target = if i == j { 1.0 } else { 0.0 };
                    g.set(i, j, (p[j] - target) * inv_c);
                }
            }
            NpairForm::Literal => {
                let arg = 1.0 + (0..c).filter(|&j| j != i).map(|j| row[j] - row[i]).sum::<f64>();
                if arg <= 0.0 {
                    return Err(Error::LogDomain(arg));
                }
                value += arg.ln();
                for j in 0..c {
                    let d = if i == j { -((c - 1) as f64) } else { 1.0 };
                    g.set(i, j, d / arg * inv_c);
                }
            }
        }
    }
    let (ga, gp) = chain_cross(&g, &anchors, &positives);
    let mut grad = Matrix::zeros(batch.len(), batch.dim());
    for (k, &(a, p)) in pairs.iter().enumerate() {
        grad.row_mut(a).copy_from_slice(ga.row(k));
        grad.row_mut(p).copy_from_slice(gp.row(k));
    }
    Ok(LossOutput {
        value: value * inv_c,
        grad_embeddings: grad,
        grad_proxies: None,
    })
}

/// Multi-Similarity hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for MsParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 50.0,
            lambda: 0.5,
        }
    }
}

/// Multi-Similarity loss on unit rows. Masks are treated as constants.
pub fn ms_loss(batch: &EmbeddingBatch, masks: &MsMiningMasks, params: MsParams) -> Result<LossOutput> {
    ms_loss_impl(batch, masks, params, None)
}

pub(crate) struct DirectionTerm {
    pub gamma: f64,
    pub sign: DirectionSign,
}

pub(crate) fn ms_loss_impl(
    batch: &EmbeddingBatch,
    masks: &MsMiningMasks,
    params: MsParams,
    direction: Option<DirectionTerm>,
) -> Result<LossOutput> {
    let MsParams { alpha, beta, lambda } = params;
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "MS needs alpha > 0 and beta > 0, got {alpha}, {beta}"
        )));
    }
    let b = batch.len();
    if masks.size() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            found: masks.size(),
        });
    }
    let f = batch.data();
    let s = f.matmul_t(f)?;
    let inv_b = 1.0 / b as f64;
    let mut g = Matrix::zeros(b, b);
    let mut grad = Matrix::zeros(b, batch.dim());
    let mut value = 0.0;
    for i in 0..b {
        let pos = masks.positives_of(i);
        let neg = masks.negatives_of(i);

        let xs: Vec<f64> = pos.iter().map(|&p| -alpha * (s.get(i, p) - lambda)).collect();
        let (lp, wp) = log1p_sum_exp(&xs);
        value += lp / alpha;
        for (&p, w) in pos.iter().zip(&wp) {
            g.add_at(i, p, -w * inv_b);
        }

        // hardest mined positive anchors the direction term
        let hardest = pos.iter().copied().min_by(|&x, &y| s.get(i, x).total_cmp(&s.get(i, y)));
        let mut cos_terms = Vec::with_capacity(neg.len());
        let xs: Vec<f64> = neg
            .iter()
            .map(|&n| {
                let mut x = s.get(i, n) - lambda;
                if let (Some(dir), Some(p)) = (&direction, hardest) {
                    if dir.gamma != 0.0 {
                        let (c, grads) = direction_cos_with_grad(f.row(i), f.row(p), f.row(n))?;
                        x += dir.sign.factor() * dir.gamma * c;
                        cos_terms.push(Some((p, grads)));
                        return Ok(beta * x);
                    }
                }
                cos_terms.push(None);
                Ok(beta * x)
            })
            .collect::<Result<_>>()?;
        let (ln, wn) = log1p_sum_exp(&xs);
        value += ln / beta;
        for ((&n, w), cos) in neg.iter().zip(&wn).zip(&cos_terms) {
            g.add_at(i, n, w * inv_b);
            if let (Some((p, cg)), Some(dir)) = (cos, &direction) {
                let scale = w * inv_b * dir.sign.factor() * dir.gamma;
                axpy(grad.row_mut(i), scale, &cg.anchor);
                axpy(grad.row_mut(*p), scale, &cg.positive);
                axpy(grad.row_mut(n), scale, &cg.negative);
            }
        }
    }
    grad.add_scaled(&chain_gram(&g, f), 1.0)?;
    Ok(LossOutput {
        value: value * inv_b,
        grad_embeddings: grad,
        grad_proxies: None,
    })
}
