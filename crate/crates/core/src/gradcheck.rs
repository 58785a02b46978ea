//! Central finite-difference checking of analytic gradients.
//!
//! Each registered loss supplies a seeded generator producing a [`GradCase`]:
//! named input matrices plus an evaluation closure. Discrete choices (mining
//! masks, top-K proxy sets) are fixed when the case is generated, so the
//! checker only ever moves continuous inputs.
//!
//! Hinge-style losses also report an activity pattern. A coordinate whose
//! `+h` or `-h` probe changes that pattern straddles a kink; it is excluded
//! from the error statistics and listed in the report notes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};
use crate::loss::LossOutput;
use crate::mining::{ms_mine, DEFAULT_MS_EPSILON};
use crate::numerics::{normalize_rows, EmbeddingBatch, Metric, SetKind, SimilarityMatrix};
use crate::pair::{
    contrastive_batch_loss, ms_loss, npair_loss, triplet_batch_loss, MsParams, TripletMetric,
    DEFAULT_CONTRASTIVE_MARGIN, DEFAULT_TRIPLET_MARGIN,
};
use crate::proxy::{nca_loss, proxy_anchor_loss, proxynca_loss, proxynca_pp_loss, ProxySet};
use crate::proxygml::{proxygml_eval, proxygml_select, ProxyGmlConfig};
use crate::regularizers::{
    combine_with_language, directed_ms_loss, directed_proxynca_loss, directed_triplet_batch_loss, direction_cos,
    language_distill_loss, language_loss, DirectionOptions, DirectionSign, LabelEmbeddingTable,
};

pub const DEFAULT_H: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Coordinates where both gradients are below this are treated as agreeing.
pub const ABS_FLOOR: f64 = 1e-8;

/// `(L(x + h e) - L(x - h e)) / 2h` for every coordinate of every input.
pub fn finite_diff<F>(mut loss: F, inputs: &[Matrix], h: f64) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    check_h(h)?;
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    let mut probe = 0usize;
    for m in 0..inputs.len() {
        let mut g = Matrix::zeros(inputs[m].rows(), inputs[m].cols());
        for idx in 0..inputs[m].as_slice().len() {
            let x = inputs[m].as_slice()[idx];
            work[m].as_mut_slice()[idx] = x + h;
            let up = finite(loss(&work)?, probe)?;
            work[m].as_mut_slice()[idx] = x - h;
            let down = finite(loss(&work)?, probe + 1)?;
            work[m].as_mut_slice()[idx] = x;
            probe += 2;
            g.as_mut_slice()[idx] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

fn check_h(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("step h must be positive, got {h}")))
    }
}

fn finite(v: f64, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

/// Loss value, one gradient per input, and an activity pattern.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub grads: Vec<Matrix>,
    pub pattern: Vec<usize>,
}

type EvalFn = Box<dyn Fn(&[Matrix]) -> Result<Evaluation> + Send + Sync>;
type MakeFn = Box<dyn Fn(u64) -> Result<GradCase> + Send + Sync>;

pub struct GradCase {
    pub names: Vec<String>,
    pub inputs: Vec<Matrix>,
    pub eval: EvalFn,
}

pub struct GradEntry {
    pub name: String,
    pub make: MakeFn,
}

impl GradEntry {
    pub fn new(name: impl Into<String>, make: impl Fn(u64) -> Result<GradCase> + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            make: Box::new(make),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Coordinate {
    pub matrix: String,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub loss: String,
    pub seed: u64,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub worst_coordinate: Option<Coordinate>,
    pub passed: bool,
    pub h: f64,
    pub checked: usize,
    pub excluded: usize,
    pub notes: Vec<String>,
}

impl GradReport {
    fn failed(loss: &str, seed: u64, h: f64, note: String) -> Self {
        Self {
            loss: loss.to_string(),
            seed,
            max_abs_error: f64::NAN,
            max_rel_error: f64::NAN,
            worst_coordinate: None,
            passed: false,
            h,
            checked: 0,
            excluded: 0,
            notes: vec![note],
        }
    }
}

/// Checks one generated case.
pub fn check_case(loss: &str, seed: u64, case: &GradCase, tolerance: f64, h: f64) -> Result<GradReport> {
    check_h(h)?;
    let base = (case.eval)(&case.inputs)?;
    if base.grads.len() != case.inputs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients for {} inputs",
            base.grads.len(),
            case.inputs.len()
        )));
    }
    let mut report = GradReport {
        loss: loss.to_string(),
        seed,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst_coordinate: None,
        passed: true,
        h,
        checked: 0,
        excluded: 0,
        notes: Vec::new(),
    };
    let mut work = case.inputs.clone();
    let mut probe = 0usize;
    for (m, input) in case.inputs.iter().enumerate() {
        if base.grads[m].shape() != input.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {} has shape {:?}, input {:?}",
                case.names[m],
                base.grads[m].shape(),
                input.shape()
            )));
        }
        let cols = input.cols();
        for idx in 0..input.as_slice().len() {
            let x = input.as_slice()[idx];
            work[m].as_mut_slice()[idx] = x + h;
            let up = (case.eval)(&work)?;
            work[m].as_mut_slice()[idx] = x - h;
            let down = (case.eval)(&work)?;
            work[m].as_mut_slice()[idx] = x;
            finite(up.value, probe)?;
            finite(down.value, probe + 1)?;
            probe += 2;
            let coord = Coordinate {
                matrix: case.names[m].clone(),
                row: idx / cols,
                col: idx % cols,
            };
            if up.pattern != base.pattern || down.pattern != base.pattern {
                report.excluded += 1;
                report.notes.push(format!(
                    "kink at {}[{}][{}] excluded",
                    coord.matrix, coord.row, coord.col
                ));
                continue;
            }
            report.checked += 1;
            let numeric = (up.value - down.value) / (2.0 * h);
            let analytic = base.grads[m].as_slice()[idx];
            let abs = (analytic - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            if analytic.abs() < ABS_FLOOR && numeric.abs() < ABS_FLOOR {
                continue;
            }
            let rel = abs / analytic.abs().max(numeric.abs()).max(1e-8);
            if report.worst_coordinate.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_coordinate = Some(coord);
            }
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}

/// One report per `(entry, seed)`. Errors become failed reports.
pub fn check_all(registry: &[GradEntry], seeds: &[u64], tolerance: f64) -> Vec<GradReport> {
    check_all_with_h(registry, seeds, tolerance, DEFAULT_H)
}

pub fn check_all_with_h(registry: &[GradEntry], seeds: &[u64], tolerance: f64, h: f64) -> Vec<GradReport> {
    let mut out = Vec::with_capacity(registry.len() * seeds.len());
    for entry in registry {
        for &seed in seeds {
            let report = (entry.make)(seed)
                .and_then(|case| check_case(&entry.name, seed, &case, tolerance, h))
                .unwrap_or_else(|e| GradReport::failed(&entry.name, seed, h, e.to_string()));
            out.push(report);
        }
    }
    out
}

/// Wraps an entry so that its analytic gradient is off by `delta` at one
/// coordinate.
pub fn corrupt(entry: GradEntry, input: usize, row: usize, col: usize, delta: f64) -> GradEntry {
    let GradEntry { name, make } = entry;
    GradEntry {
        name: format!("{name}+corrupted"),
        make: Box::new(move |seed| {
            let case = make(seed)?;
            let inner = case.eval;
            Ok(GradCase {
                names: case.names,
                inputs: case.inputs,
                eval: Box::new(move |x| {
                    let mut e = inner(x)?;
                    let g = e.grads.get_mut(input).ok_or(Error::EmptyInput)?;
                    g.add_at(row, col, delta);
                    Ok(e)
                }),
            })
        }),
    }
}

// Sharper exponents (alpha = 32, beta = 50) put many true gradient entries
// near 1e-7, below the ~5e-9 roundoff floor of a central difference at
// h = 1e-6, so relative error stops measuring correctness there.
const ANCHOR_ALPHA: f64 = 4.0;
const MS_PARAMS: MsParams = MsParams {
    alpha: 2.0,
    beta: 8.0,
    lambda: 0.5,
};

const BATCH: usize = 8;
const DIM: usize = 5;
const CLASSES: usize = 4;

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn unit(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    normalize_rows(&gaussian(rows, cols, rng)).expect("gaussian rows are nonzero")
}

/// Two samples per class, shuffled.
fn paired_labels(classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..2 * classes).map(|i| i / 2).collect();
    labels.shuffle(rng);
    labels
}

fn batch_of(f: &Matrix, labels: &[usize]) -> Result<EmbeddingBatch> {
    EmbeddingBatch::new(f.clone(), labels.to_vec())
}

fn single(out: LossOutput, pattern: Vec<usize>) -> Evaluation {
    Evaluation {
        value: out.value,
        grads: vec![out.grad_embeddings],
        pattern,
    }
}

fn with_proxies(out: LossOutput) -> Result<Evaluation> {
    let gp = out
        .grad_proxies
        .ok_or_else(|| Error::InvalidConfig("loss returned no proxy gradient".into()))?;
    Ok(Evaluation {
        value: out.value,
        grads: vec![out.grad_embeddings, gp],
        pattern: Vec::new(),
    })
}

fn triplet_pattern(batch: &EmbeddingBatch, score: impl Fn(usize, usize, usize) -> f64) -> Vec<usize> {
    let labels = batch.labels();
    let mut pattern = Vec::new();
    for a in 0..batch.len() {
        for p in (0..batch.len()).filter(|&p| p != a && labels[p] == labels[a]) {
            for n in (0..batch.len()).filter(|&n| labels[n] != labels[a]) {
                pattern.push(usize::from(score(a, p, n) > 0.0));
            }
        }
    }
    pattern
}

fn euclid_triplet_pattern(batch: &EmbeddingBatch, alpha: f64) -> Vec<usize> {
    triplet_pattern(batch, |a, p, n| {
        squared_distance(batch.row(a), batch.row(p)) - squared_distance(batch.row(a), batch.row(n)) + alpha
    })
}

fn embeddings_case(f: Matrix, eval: impl Fn(&[Matrix]) -> Result<Evaluation> + Send + Sync + 'static) -> GradCase {
    GradCase {
        names: vec!["embeddings".into()],
        inputs: vec![f],
        eval: Box::new(eval),
    }
}

fn proxy_case(
    f: Matrix,
    p: Matrix,
    eval: impl Fn(&[Matrix]) -> Result<Evaluation> + Send + Sync + 'static,
) -> GradCase {
    GradCase {
        names: vec!["embeddings".into(), "proxies".into()],
        inputs: vec![f, p],
        eval: Box::new(eval),
    }
}

fn contrastive_case(seed: u64) -> Result<GradCase> {
    let mut rng = rng_for(seed, 1);
    let labels = paired_labels(CLASSES, &mut rng);
    let f = unit(BATCH, DIM, &mut rng);
    let alpha = DEFAULT_CONTRASTIVE_MARGIN;
    Ok(embeddings_case(f, move |x| {
        let b = batch_of(&x[0], &labels)?;
        let mut pattern = Vec::new();
        for i in 0..b.len() {
            for j in i + 1..b.len() {
                if labels[i] != labels[j] {
                    pattern.push(usize::from(alpha - squared_distance(b.row(i), b.row(j)) > 0.0));
                }
            }
        }
        Ok(single(contrastive_batch_loss(&b, alpha), pattern))
    }))
}

fn triplet_euclidean_case(seed: u64) -> Result<GradCase> {
    let mut rng = rng_for(seed, 2);
    let labels = paired_labels(CLASSES, &mut rng);
    let f = unit(BATCH, DIM, &mut rng);
    let alpha = DEFAULT_TRIPLET_MARGIN;
    Ok(embeddings_case(f, move |x| {
        let b = batch_of(&x[0], &labels)?;
        let pattern = euclid_triplet_pattern(&b, alpha);
        Ok(single(triplet_batch_loss(&b, alpha, TripletMetric::Euclidean), pattern))
    }))
}

fn triplet_cosine_case(seed: u64) -> Result<GradCase> {
    let mut rng = rng_for(seed, 3);
    let labels = paired_labels(CLASSES, &mut rng);
    let f = unit(BATCH, DIM, &mut rng);
    let alpha = DEFAULT_TRIPLET_MARGIN;
    Ok(embeddings_case(f, move |x| {
        let b = batch_of(&x[0], &labels)?;
        let dot = |i: usize, j: usize| crate::linalg::dot(b.row(i), b.row(j));
        let pattern = triplet_pattern(&b, |a, p, n| dot(a, n) - dot(a, p) + alpha);
        Ok(single(triplet_batch_loss(&b, alpha, TripletMetric::Cosine), pattern))
    }))
}

fn npair_case(seed: u64) -> Result<GradCase> {
    let mut rng = rng_for(seed, 4);
    let labels = paired_labels(CLASSES, &mut rng);
    let f = unit(BATCH, DIM, &mut rng);
    Ok(embeddings_case(f, move |x| {
        Ok(single(npair_loss(&batch_of(&x[0], &labels)?)?, Vec::new()))
    }))
}

fn ms_setup(seed: u64, salt: u64) -> Result<(Vec<usize>, Matrix, crate::mining::MsMiningMasks)> {
    let mut rng = rng_for(seed, salt);
    let labels = paired_labels(CLASSES, &mut rng);
    let f = unit(BATCH, DIM, &mut rng);
    let s = SimilarityMatrix::new(f.matmul_t(&f)?, Metric::Cosine);
    let masks = ms_mine(&s, &labels, DEFAULT_MS_EPSILON)?;
    Ok((labels, f, masks))
}

fn ms_case(seed: u64) -> Result<GradCase> {
    let (labels, f, masks) = ms_setup(seed, 5)?;
    Ok(embeddings_case(f, move |x| {
        let b = batch_of(&x[0], &labels)?;
        Ok(single(ms_loss(&b, &masks, MS_PARAMS)?, Vec::new()))
    }))
}

fn proxy_setup(seed: u64, salt: u64, classes: usize, per_class: usize) -> (Vec<usize>, Matrix, Matrix) {
    let mut rng = rng_for(seed, salt);
    let labels = paired_labels(classes, &mut rng);
    let f = unit(labels.len(), DIM, &mut rng);
    let p = unit(classes * per_class, DIM, &mut rng);
    (labels, f, p)
}

fn proxynca_case(seed: u64) -> Result<GradCase> {
    let (labels, f, p) = proxy_setup(seed, 6, CLASSES, 1);
    Ok(proxy_case(f, p, move |x| {
        with_proxies(proxynca_loss(
            &batch_of(&x[0], &labels)?,
            &ProxySet::class_major(x[1].clone(), 1)?,
        )?)
    }))
}

fn proxynca_pp_case(seed: u64) -> Result<GradCase> {
    let (labels, f, p) = proxy_setup(seed, 7, CLASSES, 1);
    Ok(proxy_case(f, p, move |x| {
        with_proxies(proxynca_pp_loss(
            &batch_of(&x[0], &labels)?,
            &ProxySet::class_major(x[1].clone(), 1)?,
            0.5,
        )?)
    }))
}

fn proxy_anchor_case(seed: u64) -> Result<GradCase> {
    let (labels, f, p) = proxy_setup(seed, 8, CLASSES, 1);
    Ok(proxy_case(f, p, move |x| {
        with_proxies(proxy_anchor_loss(
            &batch_of(&x[0], &labels)?,
            &ProxySet::class_major(x[1].clone(), 1)?,
            ANCHOR_ALPHA,
            0.1,
        )?)
    }))
}

fn proxygml_case(seed: u64) -> Result<GradCase> {
    let cfg = ProxyGmlConfig {
        k: 3,
        lambda: 0.3,
        m: 2,
    };
    let (labels, f, p) = proxy_setup(seed, 9, 3, cfg.m);
    let sp = |f: &Matrix, p: &Matrix| -> Result<SimilarityMatrix> {
        Ok(SimilarityMatrix::new(p.matmul_t(f)?, Metric::Cosine).with_kinds(SetKind::Proxy, SetKind::Sample))
    };
    let proxies = ProxySet::class_major(p.clone(), cfg.m)?;
    let selection = proxygml_select(&sp(&f, &p)?, &labels, &proxies, &cfg)?;
    Ok(proxy_case(f, p, move |x| {
        let batch = batch_of(&x[0], &labels)?;
        let proxies = ProxySet::class_major(x[1].clone(), cfg.m)?;
        let (out, _) = proxygml_eval(&batch, &proxies, &cfg, &sp(&x[0], &x[1])?, selection.clone())?;
        with_proxies(out)
    }))
}

fn nca_case(seed: u64) -> Result<GradCase> {
    let mut rng = rng_for(seed, 10);
    let labels = paired_labels(CLASSES, &mut rng);
    let f = gaussian(BATCH, DIM, &mut rng);
    Ok(embeddings_case(f, move |x| {
        Ok(single(nca_loss(&batch_of(&x[0], &labels)?)?, Vec::new()))
    }))
}

fn directed_triplet_case(seed: u64) -> Result<GradCase> {
    let mut rng = rng_for(seed, 11);
    let labels = paired_labels(CLASSES, &mut rng);
    let f = unit(BATCH, DIM, &mut rng);
    let (alpha, gamma) = (DEFAULT_TRIPLET_MARGIN, 1.0);
    let opts = DirectionOptions::default();
    Ok(embeddings_case(f, move |x| {
        let b = batch_of(&x[0], &labels)?;
        let rows = |i: usize| b.row(i);
        let pattern = triplet_pattern(&b, |a, p, n| {
            let cos = direction_cos(rows(a), rows(p), rows(n)).unwrap_or(0.0);
            squared_distance(rows(a), rows(p)) - squared_distance(rows(a), rows(n))
                + alpha
                + opts.sign.factor() * gamma * cos
        });
        Ok(single(directed_triplet_batch_loss(&b, alpha, gamma, opts)?, pattern))
    }))
}

fn directed_ms_case(seed: u64) -> Result<GradCase> {
    let (labels, f, masks) = ms_setup(seed, 12)?;
    Ok(embeddings_case(f, move |x| {
        let b = batch_of(&x[0], &labels)?;
        // the least similar mined positive is a discrete choice
        let pattern = (0..b.len())
            .map(|i| {
                masks
                    .positives_of(i)
                    .into_iter()
                    .min_by(|&p, &q| {
                        let s = |j: usize| crate::linalg::dot(b.row(i), b.row(j));
                        s(p).total_cmp(&s(q))
                    })
                    .map_or(usize::MAX, |p| p)
            })
            .collect();
        let out = directed_ms_loss(&b, &masks, MS_PARAMS, 1.0, DirectionSign::Penalize)?;
        Ok(single(out, pattern))
    }))
}

fn directed_proxynca_case(seed: u64) -> Result<GradCase> {
    let (labels, f, p) = proxy_setup(seed, 13, CLASSES, 1);
    Ok(proxy_case(f, p, move |x| {
        with_proxies(directed_proxynca_loss(
            &batch_of(&x[0], &labels)?,
            &ProxySet::class_major(x[1].clone(), 1)?,
            1.0,
            DirectionSign::Penalize,
        )?)
    }))
}

fn language_distill_case(seed: u64) -> Result<GradCase> {
    let mut rng = rng_for(seed, 14);
    let s_i = gaussian(6, 6, &mut rng);
    let s_l = SimilarityMatrix::new(gaussian(6, 6, &mut rng), Metric::Cosine);
    Ok(GradCase {
        names: vec!["image_similarity".into()],
        inputs: vec![s_i],
        eval: Box::new(move |x| {
            let s = SimilarityMatrix::new(x[0].clone(), Metric::Cosine);
            Ok(single(language_distill_loss(&s, &s_l, 1.0)?, Vec::new()))
        }),
    })
}

fn language_combined_case(seed: u64) -> Result<GradCase> {
    let mut rng = rng_for(seed, 15);
    let labels = paired_labels(CLASSES, &mut rng);
    let f = unit(BATCH, DIM, &mut rng);
    let table = LabelEmbeddingTable::synthetic(CLASSES, 7, seed)?;
    let alpha = DEFAULT_TRIPLET_MARGIN;
    Ok(embeddings_case(f, move |x| {
        let b = batch_of(&x[0], &labels)?;
        let dml = triplet_batch_loss(&b, alpha, TripletMetric::Euclidean);
        let lang = language_loss(&b, &table, 1.0)?;
        let pattern = euclid_triplet_pattern(&b, alpha);
        Ok(single(combine_with_language(&dml, &lang, 1.0)?, pattern))
    }))
}

/// Every loss variant in the library, each with its seeded generator.
pub fn default_registry() -> Vec<GradEntry> {
    vec![
        GradEntry::new("contrastive", contrastive_case),
        GradEntry::new("triplet_euclidean", triplet_euclidean_case),
        GradEntry::new("triplet_cosine", triplet_cosine_case),
        GradEntry::new("npair", npair_case),
        GradEntry::new("multi_similarity", ms_case),
        GradEntry::new("proxynca", proxynca_case),
        GradEntry::new("proxynca_pp", proxynca_pp_case),
        GradEntry::new("proxy_anchor", proxy_anchor_case),
        GradEntry::new("proxygml", proxygml_case),
        GradEntry::new("directed_triplet", directed_triplet_case),
        GradEntry::new("directed_ms", directed_ms_case),
        GradEntry::new("directed_proxynca", directed_proxynca_case),
        GradEntry::new("language_combined", language_combined_case),
        GradEntry::new("language_distill", language_distill_case),
        GradEntry::new("nca", nca_case),
    ]
}
