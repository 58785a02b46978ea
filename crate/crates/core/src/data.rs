//! Synthetic datasets and mini-batch samplers.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::numerics::l2_normalize;

/// Feature rows with class labels. Row index doubles as the sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::EmptyInput);
        }
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                found: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// `max(label) + 1`.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub ambient_dim: usize,
    pub embedding_dim: usize,
    /// Standard deviation of the per-sample Gaussian noise.
    pub class_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            samples_per_class: 50,
            ambient_dim: 32,
            embedding_dim: 16,
            class_spread: 0.15,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.samples_per_class == 0 || self.ambient_dim == 0 || self.embedding_dim == 0 {
            return Err(Error::InvalidConfig(
                "samples per class and dimensions must be positive".into(),
            ));
        }
        if !(self.class_spread >= 0.0 && self.class_spread.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "class spread must be >= 0, got {}",
                self.class_spread
            )));
        }
        Ok(())
    }
}

/// Class-major dataset: `samples_per_class` rows of class 0, then class 1, ...
/// Each row is `normalize(center + spread * noise)` around a random unit center.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.ambient_dim;
    let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| rng.sample(StandardNormal)).collect() };
    let centers = (0..spec.num_classes)
        .map(|_| l2_normalize(&gauss(&mut rng)))
        .collect::<Result<Vec<_>>>()?;
    let n = spec.num_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let noise = gauss(&mut rng);
            let row: Vec<f64> = center
                .iter()
                .zip(&noise)
                .map(|(m, z)| m + spec.class_spread * z)
                .collect();
            data.extend(l2_normalize(&row)?);
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(n, d, data)?, labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    #[default]
    Uniform,
    TwoPerClass,
}

/// Indices of one mini-batch.
///
/// `Uniform` draws `batch_size` distinct samples. `TwoPerClass` draws
/// `batch_size / 2` distinct classes and two distinct samples of each,
/// laid out as consecutive pairs.
pub fn sample_batch<R: Rng + ?Sized>(
    labels: &[usize],
    sampler: Sampler,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    match sampler {
        Sampler::Uniform => {
            if batch_size == 0 || batch_size > labels.len() {
                return Err(Error::InvalidConfig(format!(
                    "batch size {batch_size} invalid for {} samples",
                    labels.len()
                )));
            }
            Ok(index::sample(rng, labels.len(), batch_size).into_vec())
        }
        Sampler::TwoPerClass => {
            if batch_size < 2 || !batch_size.is_multiple_of(2) {
                return Err(Error::InvalidConfig(format!(
                    "two_per_class needs an even batch size >= 2, got {batch_size}"
                )));
            }
            let groups = class_groups(labels);
            let eligible: Vec<&Vec<usize>> = groups.iter().filter(|g| g.len() >= 2).collect();
            let needed = batch_size / 2;
            if eligible.len() < needed {
                return Err(Error::InsufficientClasses {
                    needed,
                    available: eligible.len(),
                });
            }
            let mut out = Vec::with_capacity(batch_size);
            for c in index::sample(rng, eligible.len(), needed).into_iter() {
                let members = eligible[c];
                for k in index::sample(rng, members.len(), 2).into_iter() {
                    out.push(members[k]);
                }
            }
            Ok(out)
        }
    }
}

/// Batches for one epoch.
///
/// `Uniform` shuffles the dataset and cuts it into `ceil(N / batch_size)`
/// chunks; a trailing chunk with a single sample is dropped. `TwoPerClass`
/// draws `floor(N / batch_size)` independent batches.
pub fn epoch_batches<R: Rng + ?Sized>(
    labels: &[usize],
    sampler: Sampler,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::InvalidConfig(format!(
            "batch size must be >= 2, got {batch_size}"
        )));
    }
    match sampler {
        Sampler::Uniform => {
            let mut order: Vec<usize> = (0..labels.len()).collect();
            order.shuffle(rng);
            Ok(order
                .chunks(batch_size)
                .filter(|c| c.len() >= 2)
                .map(<[usize]>::to_vec)
                .collect())
        }
        Sampler::TwoPerClass => (0..labels.len() / batch_size)
            .map(|_| sample_batch(labels, sampler, batch_size, rng))
            .collect(),
    }
}

/// Sample indices per class id, indexed by class.
pub(crate) fn class_groups(labels: &[usize]) -> Vec<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        groups[y].push(i);
    }
    groups
}
