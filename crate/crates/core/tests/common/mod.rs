#![allow(dead_code)]

use metric_forge::mining::MsMiningMasks;
use metric_forge::numerics::l2_normalize;
use metric_forge::{EmbeddingBatch, Matrix, ProxySet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    l2_normalize(&gaussian_vec(rng, d)).unwrap()
}

pub fn unit_matrix(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Matrix {
    let data: Vec<f64> = (0..rows).flat_map(|_| unit_vec(rng, d)).collect();
    Matrix::from_vec(rows, d, data).unwrap()
}

/// Two samples of each class, shuffled.
pub fn paired_labels(rng: &mut ChaCha8Rng, classes: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut labels: Vec<usize> = (0..2 * classes).map(|i| i / 2).collect();
    labels.shuffle(rng);
    labels
}

pub fn unit_batch(rng: &mut ChaCha8Rng, labels: &[usize], d: usize) -> EmbeddingBatch {
    EmbeddingBatch::new(unit_matrix(rng, labels.len(), d), labels.to_vec()).unwrap()
}

pub fn unit_proxies(rng: &mut ChaCha8Rng, classes: usize, per_class: usize, d: usize) -> ProxySet {
    ProxySet::class_major(unit_matrix(rng, classes * per_class, d), per_class).unwrap()
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let orig = x.get(i, j);
            probe.set(i, j, orig + h);
            let up = f(&probe);
            probe.set(i, j, orig - h);
            let down = f(&probe);
            probe.set(i, j, orig);
            g.set(i, j, (up - down) / (2.0 * h));
        }
    }
    g
}

/// Largest `|a-n| / max(|a|, |n|, floor)` over all entries.
pub fn max_rel_err(a: &Matrix, n: &Matrix, floor: f64) -> f64 {
    a.as_slice()
        .iter()
        .zip(n.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Five-point central differences, error `O(h^4)`. Lets `h` grow enough to
/// keep roundoff far below the entries being checked.
pub fn numeric_grad5(f: impl Fn(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let orig = x.get(i, j);
            let mut at = |t: f64| {
                probe.set(i, j, orig + t);
                f(&probe)
            };
            let v = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            probe.set(i, j, orig);
            g.set(i, j, v);
        }
    }
    g
}

/// Closed-form `dL/dS`: positive entries `-alpha h+ / (|P+| (1 + sum h+))`,
/// negative entries `alpha h- / (|P| (1 + sum h-))`.
pub fn proxy_anchor_closed_form(s: &Matrix, labels: &[usize], alpha: f64, delta: f64) -> Matrix {
    let (b, np) = (s.rows(), s.cols());
    let n_pos = (0..np).filter(|p| labels.contains(p)).count() as f64;
    let mut g = Matrix::zeros(b, np);
    for p in 0..np {
        let hp: Vec<f64> = (0..b).map(|i| (-alpha * (s.get(i, p) - delta)).exp()).collect();
        let hn: Vec<f64> = (0..b).map(|i| (alpha * (s.get(i, p) + delta)).exp()).collect();
        let sum_p: f64 = (0..b).filter(|&i| labels[i] == p).map(|i| hp[i]).sum();
        let sum_n: f64 = (0..b).filter(|&i| labels[i] != p).map(|i| hn[i]).sum();
        for i in 0..b {
            let v = if labels[i] == p {
                -alpha * hp[i] / (n_pos * (1.0 + sum_p))
            } else {
                alpha * hn[i] / (np as f64 * (1.0 + sum_n))
            };
            g.set(i, p, v);
        }
    }
    g
}

/// Brute-force MS masks: a negative is kept if some positive of the anchor
/// lies within `eps` above it; a positive is kept if some negative lies
/// within `eps` below it.
pub fn brute_force_masks(s: &Matrix, labels: &[usize], eps: f64) -> (Vec<Vec<bool>>, Vec<Vec<bool>>) {
    let b = labels.len();
    let mut pos = vec![vec![false; b]; b];
    let mut neg = vec![vec![false; b]; b];
    for i in 0..b {
        let is_pos = |j: usize| j != i && labels[j] == labels[i];
        let is_neg = |j: usize| labels[j] != labels[i];
        let has_pos = (0..b).any(is_pos);
        let has_neg = (0..b).any(is_neg);
        if !(has_pos && has_neg) {
            continue;
        }
        for j in 0..b {
            if is_neg(j) {
                neg[i][j] = (0..b).any(|k| is_pos(k) && s.get(i, j) > s.get(i, k) - eps);
            }
            if is_pos(j) {
                pos[i][j] = (0..b).any(|k| is_neg(k) && s.get(i, j) < s.get(i, k) + eps);
            }
        }
    }
    (pos, neg)
}

pub fn masks_equal(m: &MsMiningMasks, expect: &(Vec<Vec<bool>>, Vec<Vec<bool>>)) -> bool {
    let b = m.size();
    (0..b).all(|i| (0..b).all(|j| m.positive(i, j) == expect.0[i][j] && m.negative(i, j) == expect.1[i][j]))
}
