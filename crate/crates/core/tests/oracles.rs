//! Reference values and independent oracles: hand-evaluated scalars,
//! brute-force searches and central finite differences written against the
//! formulas directly rather than against library internals.

mod common;

use common::*;
use metric_forge::data::{generate_synthetic, SyntheticSpec};
use metric_forge::eval::{recall_at_k, separation_stats};
use metric_forge::linalg::{dot, squared_distance};
use metric_forge::mining::ms_mine;
use metric_forge::numerics::{cosine_similarity_matrix, Metric, SetKind};
use metric_forge::pair::{
    contrastive_loss, ms_loss, npair_loss, triplet_batch_loss, triplet_loss_euclidean, MsParams, TripletMetric,
};
use metric_forge::proxy::{nca_loss, proxy_anchor_loss, proxy_anchor_similarity_grad, proxynca_loss, proxynca_pp_loss};
use metric_forge::proxygml::{proxygml_loss_with_parts, proxygml_select, ProxyGmlConfig};
use metric_forge::regularizers::{
    combine_with_language, directed_proxynca_loss, language_distill_loss, language_loss, DirectionSign,
    LabelEmbeddingTable,
};
use metric_forge::trainer::{train, EncoderMode};
use metric_forge::{EmbeddingBatch, LossConfig, LossName, Matrix, ProxySet, SimilarityMatrix, TrainConfig};
use rand::seq::SliceRandom;

const H: f64 = 1e-6;

fn batch_fn(labels: &[usize], f: impl Fn(&EmbeddingBatch) -> f64) -> impl Fn(&Matrix) -> f64 {
    let labels = labels.to_vec();
    move |x: &Matrix| f(&EmbeddingBatch::new(x.clone(), labels.clone()).unwrap())
}

#[test]
fn contrastive_negative_pair_value_and_gradient() {
    let (fi, fj) = ([1.0, 0.0], [0.9, 0.1]);
    let out = contrastive_loss(&fi, &fj, false, 1.0).unwrap();
    assert!((out.value - 0.98).abs() < 1e-12);
    let x = Matrix::from_rows(&[fi, fj]).unwrap();
    let num = numeric_grad(
        |m| contrastive_loss(m.row(0), m.row(1), false, 1.0).unwrap().value,
        &x,
        H,
    );
    assert!(out.grad_embeddings.max_abs_diff(&num) < 1e-6);
}

#[test]
fn triplet_euclidean_matches_differences() {
    let mut checked = 0;
    for seed in 0..50 {
        let mut r = rng(seed);
        let x = unit_matrix(&mut r, 3, 6);
        let f = |m: &Matrix| triplet_loss_euclidean(m.row(0), m.row(1), m.row(2), 0.5).unwrap().value;
        let out = triplet_loss_euclidean(x.row(0), x.row(1), x.row(2), 0.5).unwrap();
        if out.value == 0.0 {
            assert!(out.grad_embeddings.as_slice().iter().all(|&g| g == 0.0));
            continue;
        }
        checked += 1;
        let num = numeric_grad(f, &x, H);
        assert!(max_rel_err(&out.grad_embeddings, &num, 1e-8) < 1e-6, "seed {seed}");
    }
    assert!(checked > 10);
}

#[test]
fn triplet_cosine_matches_differences() {
    for seed in 0..30 {
        let mut r = rng(100 + seed);
        let labels = [0, 0, 1];
        let batch = unit_batch(&mut r, &labels, 4);
        let out = triplet_batch_loss(&batch, 0.3, TripletMetric::Cosine);
        let f = batch_fn(&labels, |b| triplet_batch_loss(b, 0.3, TripletMetric::Cosine).value);
        let num = numeric_grad(f, batch.data(), H);
        // both anchors of class 0 share the one negative; skip points near a hinge
        let near_kink = (0..2).any(|a| {
            let p = 1 - a;
            (dot(batch.row(a), batch.row(2)) - dot(batch.row(a), batch.row(p)) + 0.3).abs() < 1e-4
        });
        if !near_kink {
            assert!(max_rel_err(&out.grad_embeddings, &num, 1e-8) < 1e-6, "seed {seed}");
        }
    }
}

#[test]
fn npair_examples_and_differences() {
    // anchors equal their positives, the other pair anti-aligned
    let batch = EmbeddingBatch::from_rows(&[[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]], &[0, 0, 1, 1]).unwrap();
    let v = npair_loss(&batch).unwrap().value;
    assert!((v - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
    assert!((v - 0.12692801104297263).abs() < 1e-9);

    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let labels = paired_labels(&mut r, 4);
        let batch = unit_batch(&mut r, &labels, 5);
        let out = npair_loss(&batch).unwrap();
        let num = numeric_grad5(batch_fn(&labels, |b| npair_loss(b).unwrap().value), batch.data(), 1e-3);
        assert!(max_rel_err(&out.grad_embeddings, &num, 1e-8) < 1e-6, "seed {seed}");
    }
}

#[test]
fn ms_mining_worked_examples() {
    let s = SimilarityMatrix::new(
        Matrix::from_rows(&[[1.0, 0.9, 0.2], [0.9, 1.0, 0.1], [0.2, 0.1, 1.0]]).unwrap(),
        Metric::Cosine,
    );
    let m = ms_mine(&s, &[0, 0, 1], 0.1).unwrap();
    assert!(!m.negative(0, 2));
    assert!(!m.positive(0, 1));

    // hardest negative (0.8) above easiest positive (0.3)
    let s = SimilarityMatrix::new(
        Matrix::from_rows(&[
            [1.0, 0.3, 0.8, 0.0],
            [0.3, 1.0, 0.0, 0.0],
            [0.8, 0.0, 1.0, 0.5],
            [0.0, 0.0, 0.5, 1.0],
        ])
        .unwrap(),
        Metric::Cosine,
    );
    let m = ms_mine(&s, &[0, 0, 1, 1], 0.1).unwrap();
    assert!(m.positive(0, 1) && m.negative(0, 2));
}

#[test]
fn ms_single_pair_value() {
    // one anchor, one mined positive at S = lambda, nothing else mined
    let lambda: f64 = 0.5;
    let (c, s) = (lambda, (1.0 - lambda * lambda).sqrt());
    let batch = EmbeddingBatch::from_rows(&[[1.0, 0.0], [c, s]], &[0, 0]).unwrap();
    let masks = metric_forge::mining::MsMiningMasks::from_pairs(2, 0.1, &[(0, 1)], &[]);
    let out = ms_loss(
        &batch,
        &masks,
        MsParams {
            alpha: 2.0,
            beta: 50.0,
            lambda,
        },
    )
    .unwrap();
    // (1/B) * (1/alpha) * log(1 + e^0) with B = 2
    assert!((out.value - 0.5 * 0.5 * 2f64.ln()).abs() < 1e-12);
    assert!((2.0 * out.value - 0.34657359027997264).abs() < 1e-9);
}

/// Independent scalar Multi-Similarity evaluation.
fn ms_reference(f: &Matrix, masks: &metric_forge::mining::MsMiningMasks, p: MsParams) -> f64 {
    let b = f.rows();
    let s = |i: usize, j: usize| dot(f.row(i), f.row(j));
    let mut total = 0.0;
    for i in 0..b {
        let pos: f64 = masks
            .positives_of(i)
            .iter()
            .map(|&k| (-p.alpha * (s(i, k) - p.lambda)).exp())
            .sum();
        let neg: f64 = masks
            .negatives_of(i)
            .iter()
            .map(|&k| (p.beta * (s(i, k) - p.lambda)).exp())
            .sum();
        total += (1.0 + pos).ln() / p.alpha + (1.0 + neg).ln() / p.beta;
    }
    total / b as f64
}

#[test]
fn ms_random_batches_match_reference_and_differences() {
    let params = MsParams::default();
    for seed in 0..20 {
        let mut r = rng(300 + seed);
        let labels = paired_labels(&mut r, 4);
        let batch = unit_batch(&mut r, &labels, 5);
        let s = cosine_similarity_matrix(batch.data(), batch.data()).unwrap();
        let masks = ms_mine(&s, &labels, 0.1).unwrap();
        let out = ms_loss(&batch, &masks, params).unwrap();
        assert!((out.value - ms_reference(batch.data(), &masks, params)).abs() < 1e-12);
        // beta = 50 leaves entries near 1e-9 that h = 1e-6 cannot resolve
        let num = numeric_grad5(|x| ms_reference(x, &masks, params), batch.data(), 1e-3);
        assert!(max_rel_err(&out.grad_embeddings, &num, 1e-8) < 1e-5, "seed {seed}");
    }
}

#[test]
fn nca_examples_and_differences() {
    // equidistant triangle: one positive, one negative at the same distance
    let t = 3f64.sqrt() / 2.0;
    let batch = EmbeddingBatch::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.5, t]], &[0, 0, 1]).unwrap();
    let out = nca_loss(&batch).unwrap();
    assert!((out.value - 2f64.ln()).abs() < 1e-12);

    for seed in 0..10 {
        let mut r = rng(400 + seed);
        let labels = paired_labels(&mut r, 3);
        let x = Matrix::from_vec(6, 4, gaussian_vec(&mut r, 24)).unwrap();
        let batch = EmbeddingBatch::new(x.clone(), labels.clone()).unwrap();
        let out = nca_loss(&batch).unwrap();
        let num = numeric_grad(batch_fn(&labels, |b| nca_loss(b).unwrap().value), &x, H);
        assert!(max_rel_err(&out.grad_embeddings, &num, 1e-8) < 1e-5, "seed {seed}");
    }
}

fn proxy_grad_check(
    seed: u64,
    classes: usize,
    per_class: usize,
    loss: impl Fn(&EmbeddingBatch, &ProxySet) -> metric_forge::LossOutput,
    tol: f64,
) {
    let mut r = rng(seed);
    let labels = paired_labels(&mut r, classes);
    let batch = unit_batch(&mut r, &labels, 5);
    let proxies = unit_proxies(&mut r, classes, per_class, 5);
    let out = loss(&batch, &proxies);
    let p = proxies.vectors().clone();
    let num_f = numeric_grad(
        |x| loss(&EmbeddingBatch::new(x.clone(), labels.clone()).unwrap(), &proxies).value,
        batch.data(),
        H,
    );
    let num_p = numeric_grad(
        |x| loss(&batch, &ProxySet::class_major(x.clone(), per_class).unwrap()).value,
        &p,
        H,
    );
    assert!(
        max_rel_err(&out.grad_embeddings, &num_f, 1e-8) < tol,
        "embeddings, seed {seed}"
    );
    assert!(
        max_rel_err(out.grad_proxies.as_ref().unwrap(), &num_p, 1e-8) < tol,
        "proxies, seed {seed}"
    );
}

#[test]
fn proxynca_examples_and_differences() {
    // sample on its proxy, the other proxy orthogonal: -log(e^0 / e^-2)
    let batch = EmbeddingBatch::from_rows(&[[1.0, 0.0]], &[0]).unwrap();
    let p = ProxySet::class_major(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(), 1).unwrap();
    assert!((proxynca_loss(&batch, &p).unwrap().value + 2.0).abs() < 1e-12);
    // equidistant from both proxies
    let batch = EmbeddingBatch::from_rows(&[[0.6, 0.6]], &[1]).unwrap();
    assert!(proxynca_loss(&batch, &p).unwrap().value.abs() < 1e-12);

    for seed in 0..5 {
        proxy_grad_check(500 + seed, 5, 1, |b, p| proxynca_loss(b, p).unwrap(), 1e-5);
    }
}

#[test]
fn proxynca_pp_temperature_and_differences() {
    // the correct proxy is strictly nearest
    let batch = EmbeddingBatch::from_rows(&[[1.0, 0.0], [0.0, 1.0]], &[0, 1]).unwrap();
    let p = ProxySet::class_major(Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8]]).unwrap(), 1).unwrap();
    let values: Vec<f64> = [1.0, 0.5, 0.25]
        .iter()
        .map(|&t| proxynca_pp_loss(&batch, &p, t).unwrap().value)
        .collect();
    assert!(values[0] > values[1] && values[1] > values[2] && values[2] > 0.0);
    assert!(proxynca_pp_loss(&batch, &p, 0.01).unwrap().value < 1e-6);

    for seed in 0..5 {
        proxy_grad_check(600 + seed, 4, 1, |b, p| proxynca_pp_loss(b, p, 0.5).unwrap(), 1e-5);
    }
}

/// Proxy Anchor value written directly from `S`.
fn proxy_anchor_reference(s: &Matrix, labels: &[usize], alpha: f64, delta: f64) -> f64 {
    let np = s.cols();
    let with_pos: Vec<usize> = (0..np).filter(|p| labels.contains(p)).collect();
    let mut pos_term = 0.0;
    let mut neg_term = 0.0;
    for p in 0..np {
        let mut hp = 0.0;
        let mut hn = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y == p {
                hp += (-alpha * (s.get(i, p) - delta)).exp();
            } else {
                hn += (alpha * (s.get(i, p) + delta)).exp();
            }
        }
        pos_term += (1.0 + hp).ln();
        neg_term += (1.0 + hn).ln();
    }
    pos_term / with_pos.len() as f64 + neg_term / np as f64
}

#[test]
fn proxy_anchor_single_positive_value() {
    let delta = 0.1;
    let c = delta;
    let s = (1.0f64 - c * c).sqrt();
    let batch = EmbeddingBatch::from_rows(&[[c, s]], &[0]).unwrap();
    let p = ProxySet::class_major(Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), 1).unwrap();
    let v = proxy_anchor_loss(&batch, &p, 32.0, delta).unwrap().value;
    assert!((v - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn proxy_anchor_similarity_gradient_at_sharp_alpha() {
    let (alpha, delta) = (32.0, 0.1);
    for seed in 0..20 {
        let mut r = rng(700 + seed);
        let labels = paired_labels(&mut r, 4);
        let batch = unit_batch(&mut r, &labels, 5);
        let proxies = unit_proxies(&mut r, 4, 1, 5);
        let s = batch.data().matmul_t(proxies.vectors()).unwrap();
        let (value, g) = proxy_anchor_similarity_grad(&batch, &proxies, alpha, delta).unwrap();
        assert!((value - proxy_anchor_reference(&s, &labels, alpha, delta)).abs() < 1e-9);
        assert!(g.max_abs_diff(&proxy_anchor_closed_form(&s, &labels, alpha, delta)) < 1e-9);
        let num = numeric_grad(|x| proxy_anchor_reference(x, &labels, alpha, delta), &s, H);
        assert!(g.max_abs_diff(&num) < 1e-6, "seed {seed}");
    }
}

#[test]
fn proxy_anchor_differences() {
    for seed in 0..5 {
        proxy_grad_check(
            800 + seed,
            4,
            1,
            |b, p| proxy_anchor_loss(b, p, 4.0, 0.1).unwrap(),
            1e-5,
        );
    }
}

/// Own-class proxies first, then by similarity descending, then by index.
fn select_by_full_sort(s_p: &Matrix, labels: &[usize], proxies: &ProxySet, k: usize) -> Vec<Vec<usize>> {
    (0..labels.len())
        .map(|i| {
            let mut all: Vec<usize> = (0..proxies.len()).collect();
            all.sort_by(|&a, &b| {
                let own = |j: usize| proxies.class_of(j) == labels[i];
                own(b)
                    .cmp(&own(a))
                    .then(s_p.get(b, i).total_cmp(&s_p.get(a, i)))
                    .then(a.cmp(&b))
            });
            let mut chosen = all[..k].to_vec();
            chosen.sort_unstable();
            chosen
        })
        .collect()
}

#[test]
fn proxygml_selection_matches_full_sort() {
    let cfg = ProxyGmlConfig {
        k: 4,
        lambda: 0.3,
        m: 2,
    };
    let p = ProxySet::class_major(Matrix::zeros(6, 1), 2).unwrap();
    // constructed: sample 0 (class 0) prefers class-2 proxies, sample 1 ties
    let s_p = Matrix::from_rows(&[[0.1, 0.5], [-0.2, 0.5], [0.3, 0.5], [0.0, 0.5], [0.9, 0.5], [0.8, 0.5]]).unwrap();
    let labels = [0, 1];
    let sel = proxygml_select(
        &SimilarityMatrix::new(s_p.clone(), Metric::Cosine).with_kinds(SetKind::Proxy, SetKind::Sample),
        &labels,
        &p,
        &cfg,
    )
    .unwrap();
    assert_eq!(sel[0], vec![0, 1, 4, 5]);
    assert_eq!(sel[1], vec![0, 1, 2, 3]);
    assert_eq!(sel, select_by_full_sort(&s_p, &labels, &p, cfg.k));

    for seed in 0..50 {
        let mut r = rng(900 + seed);
        let classes = 3 + (seed as usize % 3);
        let m = 1 + (seed as usize % 3);
        let k = m + (seed as usize * 7) % (m * (classes - 1) + 1);
        let cfg = ProxyGmlConfig { k, lambda: 0.3, m };
        let proxies = unit_proxies(&mut r, classes, m, 3);
        let labels: Vec<usize> = (0..7).map(|i| i % classes).collect();
        let batch = unit_batch(&mut r, &labels, 3);
        let s_p = proxies.vectors().matmul_t(batch.data()).unwrap();
        let sel = proxygml_select(
            &SimilarityMatrix::new(s_p.clone(), Metric::Cosine).with_kinds(SetKind::Proxy, SetKind::Sample),
            &labels,
            &proxies,
            &cfg,
        )
        .unwrap();
        assert_eq!(sel, select_by_full_sort(&s_p, &labels, &proxies, k), "seed {seed}");
    }
}

#[test]
fn proxygml_differences_with_frozen_selection() {
    let cfg = ProxyGmlConfig {
        k: 3,
        lambda: 0.3,
        m: 2,
    };
    for seed in 0..5 {
        let mut r = rng(1000 + seed);
        let labels = paired_labels(&mut r, 3);
        let batch = unit_batch(&mut r, &labels, 5);
        let proxies = unit_proxies(&mut r, 3, 2, 5);
        let (out, parts) = proxygml_loss_with_parts(&batch, &proxies, &cfg).unwrap();
        let eval = |f: &Matrix, p: &Matrix| {
            let b = EmbeddingBatch::new(f.clone(), labels.clone()).unwrap();
            let ps = ProxySet::class_major(p.clone(), 2).unwrap();
            let (o, parts2) = proxygml_loss_with_parts(&b, &ps, &cfg).unwrap();
            assert_eq!(parts2.selection, parts.selection, "selection moved under a probe");
            o.value
        };
        let num_f = numeric_grad(|x| eval(x, proxies.vectors()), batch.data(), H);
        let num_p = numeric_grad(|x| eval(batch.data(), x), proxies.vectors(), H);
        assert!(max_rel_err(&out.grad_embeddings, &num_f, 1e-8) < 1e-5);
        assert!(max_rel_err(out.grad_proxies.as_ref().unwrap(), &num_p, 1e-8) < 1e-5);
    }
}

/// Row-mean of `KL(softmax(s_i) || softmax(s_l))`, evaluated directly.
fn distill_reference(s_i: &Matrix, s_l: &Matrix) -> f64 {
    let softmax = |row: &[f64]| -> Vec<f64> {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        row.iter().map(|v| v.exp() / z).collect()
    };
    let mut total = 0.0;
    for i in 0..s_i.rows() {
        let p = softmax(s_i.row(i));
        let q = softmax(s_l.row(i));
        total += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
    }
    total / s_i.rows() as f64
}

#[test]
fn language_distillation_reference_and_differences() {
    let s_i = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let s_l = Matrix::from_rows(&[[1.0, 0.5], [0.5, 1.0]]).unwrap();
    let out = language_distill_loss(
        &SimilarityMatrix::new(s_i.clone(), Metric::Cosine),
        &SimilarityMatrix::new(s_l.clone(), Metric::Cosine),
        1.0,
    )
    .unwrap();
    assert!((out.value - distill_reference(&s_i, &s_l)).abs() < 1e-12);

    for seed in 0..10 {
        let mut r = rng(1100 + seed);
        let s_i = Matrix::from_vec(6, 6, gaussian_vec(&mut r, 36)).unwrap();
        let s_l = SimilarityMatrix::new(
            Matrix::from_vec(6, 6, gaussian_vec(&mut r, 36)).unwrap(),
            Metric::Cosine,
        );
        let f = |x: &Matrix| {
            language_distill_loss(&SimilarityMatrix::new(x.clone(), Metric::Cosine), &s_l, 1.0)
                .unwrap()
                .value
        };
        let out = language_distill_loss(&SimilarityMatrix::new(s_i.clone(), Metric::Cosine), &s_l, 1.0).unwrap();
        assert!(out.value >= 0.0);
        assert!((out.value - distill_reference(&s_i, &s_l.values)).abs() < 1e-12);
        let num = numeric_grad(f, &s_i, H);
        assert!(max_rel_err(&out.grad_embeddings, &num, 1e-8) < 1e-6, "seed {seed}");
    }
}

#[test]
fn language_combination_is_linear() {
    let mut r = rng(1200);
    let labels = paired_labels(&mut r, 3);
    let batch = unit_batch(&mut r, &labels, 5);
    let table = LabelEmbeddingTable::synthetic(3, 8, 1).unwrap();
    let dml = triplet_batch_loss(&batch, 0.2, TripletMetric::Euclidean);
    let lang = language_loss(&batch, &table, 1.0).unwrap();
    for omega in [0.0, 0.5, 2.0] {
        let c = combine_with_language(&dml, &lang, omega).unwrap();
        assert!((c.value - (dml.value + omega * lang.value)).abs() < 1e-12);
        let mut expect = dml.grad_embeddings.clone();
        expect.add_scaled(&lang.grad_embeddings, omega).unwrap();
        assert!(c.grad_embeddings.max_abs_diff(&expect) < 1e-12);
    }
    let num = numeric_grad(
        batch_fn(&labels, |b| {
            let d = triplet_batch_loss(b, 0.2, TripletMetric::Euclidean);
            combine_with_language(&d, &language_loss(b, &table, 1.0).unwrap(), 2.0)
                .unwrap()
                .value
        }),
        batch.data(),
        H,
    );
    let c = combine_with_language(&dml, &lang, 2.0).unwrap();
    assert!(max_rel_err(&c.grad_embeddings, &num, 1e-8) < 1e-5);
}

#[test]
fn directed_proxynca_symmetric_pair() {
    // sample at the origin, both proxies at distance 1, 60 degrees apart:
    // D_own + log(exp(-1 + s * gamma * cos 60))
    let batch = EmbeddingBatch::from_rows(&[[0.0, 0.0]], &[0]).unwrap();
    let t = 3f64.sqrt() / 2.0;
    let p = ProxySet::class_major(Matrix::from_rows(&[[1.0, 0.0], [0.5, t]]).unwrap(), 1).unwrap();
    let v = directed_proxynca_loss(&batch, &p, 1.0, DirectionSign::Penalize)
        .unwrap()
        .value;
    assert!((v - 0.5).abs() < 1e-12);
    let v = directed_proxynca_loss(&batch, &p, 1.0, DirectionSign::Printed)
        .unwrap()
        .value;
    assert!((v + 0.5).abs() < 1e-12);
    let plain = proxynca_loss(&batch, &p).unwrap().value;
    assert!(plain.abs() < 1e-12);
}

#[test]
fn synthetic_classes_are_tighter_than_their_spread() {
    let d = generate_synthetic(&SyntheticSpec {
        class_spread: 0.1,
        ..SyntheticSpec::default()
    })
    .unwrap();
    assert_eq!((d.len(), d.dim(), d.num_classes()), (400, 32, 8));
    let b = EmbeddingBatch::new(d.features, d.labels).unwrap();
    let (intra, inter) = separation_stats(&b).unwrap();
    assert!(intra > inter);
}

#[test]
fn shuffled_labels_give_chance_recall() {
    let mut r = rng(1300);
    let n = 1000;
    let x = unit_matrix(&mut r, n, 8);
    let mut total = 0.0;
    let trials = 5;
    for _ in 0..trials {
        let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        labels.shuffle(&mut r);
        let b = EmbeddingBatch::new(x.clone(), labels).unwrap();
        let r1 = recall_at_k(&b, &[1]).unwrap()[&1];
        assert!((r1 - 0.5).abs() < 0.05, "recall {r1}");
        total += r1;
    }
    assert!((total / trials as f64 - 0.5).abs() < 0.03);
}

#[test]
fn triplet_training_lowers_loss_on_separable_toy_set() {
    let d = generate_synthetic(&SyntheticSpec {
        num_classes: 2,
        samples_per_class: 20,
        ambient_dim: 8,
        class_spread: 0.05,
        seed: 3,
        ..SyntheticSpec::default()
    })
    .unwrap();
    for mode in [EncoderMode::FreeEmbeddings, EncoderMode::Linear] {
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 8,
            embedding_dim: 4,
            learning_rate: 0.5,
            encoder_mode: mode,
            ..TrainConfig::for_loss(LossName::Triplet)
        };
        let out = train(&d, &cfg).unwrap();
        let h = &out.history;
        assert!(h.last().unwrap().mean_loss < h[0].mean_loss, "{mode:?}");
        assert!(out.report.separation_gap > out.initial.separation_gap, "{mode:?}");
    }
}

#[test]
fn triplet_closed_form_against_differences() {
    let mut r = rng(1400);
    let mut found = 0;
    while found < 5 {
        let x = unit_matrix(&mut r, 3, 4);
        let (a, p, n) = (x.row(0), x.row(1), x.row(2));
        if squared_distance(a, p) - squared_distance(a, n) + 0.2 <= 1e-3 {
            continue;
        }
        found += 1;
        let out = triplet_loss_euclidean(a, p, n, 0.2).unwrap();
        let num = numeric_grad(
            |m| triplet_loss_euclidean(m.row(0), m.row(1), m.row(2), 0.2).unwrap().value,
            &x,
            H,
        );
        assert!(out.grad_embeddings.max_abs_diff(&num) < 1e-6);
    }
}

#[test]
fn loss_config_dispatch_matches_direct_calls() {
    let mut r = rng(1500);
    let labels = paired_labels(&mut r, 4);
    let batch = unit_batch(&mut r, &labels, 5);
    let proxies = unit_proxies(&mut r, 4, 1, 5);
    let cfg = LossConfig::named(LossName::ProxyncaPp);
    let a = cfg.evaluate(&batch, Some(&proxies)).unwrap();
    let b = proxynca_pp_loss(&batch, &proxies, cfg.temperature).unwrap();
    assert_eq!(a.value, b.value);
    assert!(LossConfig::named(LossName::Proxynca).evaluate(&batch, None).is_err());
}
