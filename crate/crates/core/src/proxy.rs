//! Proxy sets and the NCA family of losses, plus Proxy Anchor.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::loss::{chain_cross, chain_sqdist_cross, chain_sqdist_gram, LossOutput};
use crate::numerics::{log1p_sum_exp, normalize_rows, softmax, squared_euclidean_matrix, EmbeddingBatch};
use crate::pair::DirectionTerm;
use crate::regularizers::direction_cos_with_grad;

/// Trainable class representatives. Proxy `j` belongs to class
/// `proxy_class[j]`; each of the `C` classes owns exactly `per_class`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxySet {
    vectors: Matrix,
    proxy_class: Vec<usize>,
    per_class: usize,
    num_classes: usize,
}

impl ProxySet {
    pub fn new(vectors: Matrix, proxy_class: Vec<usize>, per_class: usize) -> Result<Self> {
        if per_class == 0 || vectors.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        if proxy_class.len() != vectors.rows() {
            return Err(Error::DimensionMismatch {
                expected: vectors.rows(),
                found: proxy_class.len(),
            });
        }
        if !vectors.rows().is_multiple_of(per_class) {
            return Err(Error::InvalidConfig(format!(
                "{} proxies is not a multiple of {per_class} per class",
                vectors.rows()
            )));
        }
        let num_classes = vectors.rows() / per_class;
        let mut counts = vec![0usize; num_classes];
        for &c in &proxy_class {
            if c >= num_classes {
                return Err(Error::InvalidConfig(format!(
                    "proxy class {c} outside [0, {num_classes})"
                )));
            }
            counts[c] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n != per_class) {
            return Err(Error::InvalidConfig(format!(
                "class {c} owns {} proxies, expected {per_class}",
                counts[c]
            )));
        }
        Ok(Self {
            vectors,
            proxy_class,
            per_class,
            num_classes,
        })
    }

    /// Class-major layout: proxies `c*M .. (c+1)*M` belong to class `c`.
    pub fn class_major(vectors: Matrix, per_class: usize) -> Result<Self> {
        let classes = (0..vectors.rows()).map(|j| j / per_class.max(1)).collect();
        Self::new(vectors, classes, per_class)
    }

    /// Standard-normal rows, L2-normalized.
    pub fn random<R: Rng + ?Sized>(num_classes: usize, per_class: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let n = num_classes * per_class;
        let data: Vec<f64> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
        let vectors = normalize_rows(&Matrix::from_vec(n, dim, data)?)?;
        Self::class_major(vectors, per_class)
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut Matrix {
        &mut self.vectors
    }

    pub fn with_vectors(&self, vectors: Matrix) -> Result<Self> {
        if vectors.shape() != self.vectors.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                vectors.shape(),
                self.vectors.shape()
            )));
        }
        Ok(Self {
            vectors,
            ..self.clone()
        })
    }

    pub fn proxy_class(&self) -> &[usize] {
        &self.proxy_class
    }

    pub fn class_of(&self, proxy: usize) -> usize {
        self.proxy_class[proxy]
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn proxies_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.proxy_class[j] == class).collect()
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        self.vectors
            .iter_rows()
            .all(|r| (crate::linalg::norm(r) - 1.0).abs() <= tol)
    }

    /// Index of the single proxy of `class`; requires one proxy per class.
    fn single_proxy(&self, class: usize) -> Result<usize> {
        if self.per_class != 1 {
            return Err(Error::InvalidConfig(format!(
                "loss needs one proxy per class, set has {}",
                self.per_class
            )));
        }
        if class >= self.num_classes {
            return Err(Error::MissingProxy { class });
        }
        Ok(self.proxies_of(class)[0])
    }
}

fn check_compatible(batch: &EmbeddingBatch, proxies: &ProxySet) -> Result<()> {
    if batch.dim() != proxies.dim() {
        return Err(Error::DimensionMismatch {
            expected: batch.dim(),
            found: proxies.dim(),
        });
    }
    if let Some(&c) = batch.labels().iter().find(|&&c| c >= proxies.num_classes()) {
        return Err(Error::MissingProxy { class: c });
    }
    Ok(())
}

/// Neighbourhood Component Analysis over the batch itself, squared
/// Euclidean distances. Anchors without a same-class partner are skipped and
/// the mean runs over the remaining anchors.
pub fn nca_loss(batch: &EmbeddingBatch) -> Result<LossOutput> {
    let b = batch.len();
    let labels = batch.labels();
    let f = batch.data();
    let d = squared_euclidean_matrix(f, f)?.values;
    let anchors: Vec<usize> = (0..b)
        .filter(|&i| (0..b).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Err(Error::NoPositive { anchor: 0 });
    }
    let inv = 1.0 / anchors.len() as f64;
    let mut g = Matrix::zeros(b, b);
    let mut value = 0.0;
    for &i in &anchors {
        let others: Vec<usize> = (0..b).filter(|&k| k != i).collect();
        let pos: Vec<usize> = others.iter().copied().filter(|&k| labels[k] == labels[i]).collect();
        let all_logits: Vec<f64> = others.iter().map(|&k| -d.get(i, k)).collect();
        let pos_logits: Vec<f64> = pos.iter().map(|&k| -d.get(i, k)).collect();
        let q = softmax(&all_logits)?;
        let r = softmax(&pos_logits)?;
        let lse_all = crate::numerics::log_sum_exp(&all_logits)?;
        let lse_pos = crate::numerics::log_sum_exp(&pos_logits)?;
        value += lse_all - lse_pos;
        // dL_i/dD_ik = -q_k + [k positive] r_k
        for (&k, qk) in others.iter().zip(&q) {
            g.add_at(i, k, -qk * inv);
        }
        for (&k, rk) in pos.iter().zip(&r) {
            g.add_at(i, k, rk * inv);
        }
    }
    Ok(LossOutput {
        value: value * inv,
        grad_embeddings: chain_sqdist_gram(&g, f),
        grad_proxies: None,
    })
}

/// ProxyNCA with the denominator over the other classes' proxies only. The
/// value can be negative.
pub fn proxynca_loss(batch: &EmbeddingBatch, proxies: &ProxySet) -> Result<LossOutput> {
    proxynca_impl(batch, proxies, None)
}

pub(crate) fn proxynca_impl(
    batch: &EmbeddingBatch,
    proxies: &ProxySet,
    direction: Option<DirectionTerm>,
) -> Result<LossOutput> {
    check_compatible(batch, proxies)?;
    let b = batch.len();
    let f = batch.data();
    let p = proxies.vectors();
    let d = squared_euclidean_matrix(f, p)?.values;
    let inv = 1.0 / b as f64;
    let mut g = Matrix::zeros(b, proxies.len());
    let mut grad_f = Matrix::zeros(b, batch.dim());
    let mut grad_p = Matrix::zeros(proxies.len(), proxies.dim());
    let mut value = 0.0;
    for i in 0..b {
        let own = proxies.single_proxy(batch.labels()[i])?;
        let negs: Vec<usize> = (0..proxies.len()).filter(|&k| k != own).collect();
        if negs.is_empty() {
            return Err(Error::InvalidConfig("ProxyNCA needs at least two classes".into()));
        }
        let mut cos_grads = Vec::with_capacity(negs.len());
        let mut logits = Vec::with_capacity(negs.len());
        for &k in &negs {
            let mut x = -d.get(i, k);
            if let Some(dir) = direction.as_ref().filter(|dir| dir.gamma != 0.0) {
                let (c, cg) = direction_cos_with_grad(f.row(i), p.row(own), p.row(k))?;
                x += dir.sign.factor() * dir.gamma * c;
                cos_grads.push(Some(cg));
            } else {
                cos_grads.push(None);
            }
            logits.push(x);
        }
        let q = softmax(&logits)?;
        value += d.get(i, own) + crate::numerics::log_sum_exp(&logits)?;
        g.add_at(i, own, inv);
        for ((&k, qk), cg) in negs.iter().zip(&q).zip(&cos_grads) {
            // d(logit)/dD = -1
            g.add_at(i, k, -qk * inv);
            if let (Some(cg), Some(dir)) = (cg, &direction) {
                let s = qk * inv * dir.sign.factor() * dir.gamma;
                axpy(grad_f.row_mut(i), s, &cg.anchor);
                axpy(grad_p.row_mut(own), s, &cg.positive);
                axpy(grad_p.row_mut(k), s, &cg.negative);
            }
        }
    }
    let (gf, gp) = chain_sqdist_cross(&g, f, p);
    grad_f.add_scaled(&gf, 1.0)?;
    grad_p.add_scaled(&gp, 1.0)?;
    Ok(LossOutput {
        value: value * inv,
        grad_embeddings: grad_f,
        grad_proxies: Some(grad_p),
    })
}

/// ProxyNCA++: softmax over all proxies of `-D / T`, cross-entropy at the
/// sample's own proxy.
pub fn proxynca_pp_loss(batch: &EmbeddingBatch, proxies: &ProxySet, temperature: f64) -> Result<LossOutput> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    check_compatible(batch, proxies)?;
    let b = batch.len();
    let f = batch.data();
    let p = proxies.vectors();
    let d = squared_euclidean_matrix(f, p)?.values;
    let inv = 1.0 / b as f64;
    let mut g = Matrix::zeros(b, proxies.len());
    let mut value = 0.0;
    for i in 0..b {
        let own = proxies.single_proxy(batch.labels()[i])?;
        let logits: Vec<f64> = d.row(i).iter().map(|v| -v / temperature).collect();
        let q = softmax(&logits)?;
        value += -q[own].ln();
        for (k, qk) in q.iter().enumerate() {
            let target = if k == own { 1.0 } else { 0.0 };
            g.set(i, k, -(qk - target) / temperature * inv);
        }
    }
    let (gf, gp) = chain_sqdist_cross(&g, f, p);
    Ok(LossOutput {
        value: value * inv,
        grad_embeddings: gf,
        grad_proxies: Some(gp),
    })
}

/// Proxy Anchor loss value and `dL/dS` for `S = F P^T` (rows of `F` and `P`
/// assumed unit-norm so `S` is cosine similarity).
pub fn proxy_anchor_similarity_grad(
    batch: &EmbeddingBatch,
    proxies: &ProxySet,
    alpha: f64,
    delta: f64,
) -> Result<(f64, Matrix)> {
    if !(alpha > 0.0) || !(delta >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "Proxy Anchor needs alpha > 0 and delta >= 0, got {alpha}, {delta}"
        )));
    }
    check_compatible(batch, proxies)?;
    let s = batch.data().matmul_t(proxies.vectors())?;
    let labels = batch.labels();
    let (b, np) = s.shape();
    let positive_proxies: Vec<usize> = (0..np).filter(|&p| labels.contains(&proxies.class_of(p))).collect();
    let inv_pos = if positive_proxies.is_empty() {
        0.0
    } else {
        1.0 / positive_proxies.len() as f64
    };
    let inv_all = 1.0 / np as f64;
    let mut g = Matrix::zeros(b, np);
    let mut value = 0.0;
    for p in 0..np {
        let class = proxies.class_of(p);
        let (pos, neg): (Vec<usize>, Vec<usize>) = (0..b).partition(|&i| labels[i] == class);
        if !pos.is_empty() {
            let xs: Vec<f64> = pos.iter().map(|&i| -alpha * (s.get(i, p) - delta)).collect();
            let (v, w) = log1p_sum_exp(&xs);
            value += inv_pos * v;
            for (&i, wi) in pos.iter().zip(&w) {
                g.set(i, p, -alpha * wi * inv_pos);
            }
        }
        let xs: Vec<f64> = neg.iter().map(|&i| alpha * (s.get(i, p) + delta)).collect();
        let (v, w) = log1p_sum_exp(&xs);
        value += inv_all * v;
        for (&i, wi) in neg.iter().zip(&w) {
            g.set(i, p, alpha * wi * inv_all);
        }
    }
    Ok((value, g))
}

pub fn proxy_anchor_loss(batch: &EmbeddingBatch, proxies: &ProxySet, alpha: f64, delta: f64) -> Result<LossOutput> {
    let (value, g) = proxy_anchor_similarity_grad(batch, proxies, alpha, delta)?;
    let (gf, gp) = chain_cross(&g, batch.data(), proxies.vectors());
    Ok(LossOutput {
        value,
        grad_embeddings: gf,
        grad_proxies: Some(gp),
    })
}
