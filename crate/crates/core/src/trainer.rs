//! Mini-batch gradient descent over an embedding table or a linear encoder,
//! plus proxies when the loss has them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Dataset, Sampler};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMetric, RetrievalReport};
use crate::linalg::{axpy, dot, Matrix};
use crate::loss::LossOutput;
use crate::mining::{ms_mine, DEFAULT_MS_EPSILON};
use crate::numerics::{normalize_rows, EmbeddingBatch, Metric, SimilarityMatrix};
use crate::pair::{
    contrastive_batch_loss, ms_loss, npair_loss_with, triplet_batch_loss, MsParams, NpairForm, TripletMetric,
    DEFAULT_CONTRASTIVE_MARGIN, DEFAULT_TRIPLET_MARGIN,
};
use crate::proxy::{nca_loss, proxy_anchor_loss, proxynca_loss, proxynca_pp_loss, ProxySet};
use crate::proxygml::{proxygml_loss, ProxyGmlConfig};
use crate::regularizers::{
    combine_with_language, directed_ms_loss, directed_proxynca_loss, directed_triplet_batch_loss, language_loss,
    DirectionOptions, DirectionSign, LabelEmbeddingTable,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Contrastive,
    #[default]
    Triplet,
    TripletCosine,
    Npair,
    MultiSimilarity,
    Nca,
    Proxynca,
    ProxyncaPp,
    ProxyAnchor,
    Proxygml,
}

impl LossName {
    pub const ALL: [LossName; 10] = [
        LossName::Contrastive,
        LossName::Triplet,
        LossName::TripletCosine,
        LossName::Npair,
        LossName::MultiSimilarity,
        LossName::Nca,
        LossName::Proxynca,
        LossName::ProxyncaPp,
        LossName::ProxyAnchor,
        LossName::Proxygml,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossName::Contrastive => "contrastive",
            LossName::Triplet => "triplet",
            LossName::TripletCosine => "triplet_cosine",
            LossName::Npair => "npair",
            LossName::MultiSimilarity => "multi_similarity",
            LossName::Nca => "nca",
            LossName::Proxynca => "proxynca",
            LossName::ProxyncaPp => "proxynca_pp",
            LossName::ProxyAnchor => "proxy_anchor",
            LossName::Proxygml => "proxygml",
        }
    }

    pub fn uses_proxies(self) -> bool {
        matches!(
            self,
            LossName::Proxynca | LossName::ProxyncaPp | LossName::ProxyAnchor | LossName::Proxygml
        )
    }
}

impl std::str::FromStr for LossName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossName::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss '{s}'")))
    }
}

/// Loss selection and every loss hyperparameter. Fields a loss does not use
/// are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub name: LossName,
    pub contrastive_margin: f64,
    pub triplet_margin: f64,
    pub npair_form: NpairForm,
    pub ms_alpha: f64,
    pub ms_beta: f64,
    pub ms_lambda: f64,
    pub ms_epsilon: f64,
    pub temperature: f64,
    pub anchor_alpha: f64,
    pub anchor_delta: f64,
    pub gml_k: usize,
    pub gml_m: usize,
    pub gml_lambda: f64,
    /// Direction regularization weight; 0 disables it. Applies to triplet,
    /// multi_similarity and proxynca.
    pub gamma: f64,
    pub direction_sign: DirectionSign,
    pub direction_hinge: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        let ms = MsParams::default();
        Self {
            name: LossName::default(),
            contrastive_margin: DEFAULT_CONTRASTIVE_MARGIN,
            triplet_margin: DEFAULT_TRIPLET_MARGIN,
            npair_form: NpairForm::default(),
            ms_alpha: ms.alpha,
            ms_beta: ms.beta,
            ms_lambda: ms.lambda,
            ms_epsilon: DEFAULT_MS_EPSILON,
            temperature: 0.1,
            anchor_alpha: 32.0,
            anchor_delta: 0.1,
            gml_k: 4,
            gml_m: 2,
            gml_lambda: 0.3,
            gamma: 0.0,
            direction_sign: DirectionSign::default(),
            direction_hinge: true,
        }
    }
}

impl LossConfig {
    pub fn named(name: LossName) -> Self {
        Self {
            name,
            ..Self::default()
        }
    }

    pub fn ms_params(&self) -> MsParams {
        MsParams {
            alpha: self.ms_alpha,
            beta: self.ms_beta,
            lambda: self.ms_lambda,
        }
    }

    pub fn gml_config(&self) -> ProxyGmlConfig {
        ProxyGmlConfig {
            k: self.gml_k,
            lambda: self.gml_lambda,
            m: self.gml_m,
        }
    }

    /// Proxies per class for this loss.
    pub fn proxies_per_class(&self) -> usize {
        if self.name == LossName::Proxygml {
            self.gml_m
        } else {
            1
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.gamma > 0.0
            && !matches!(
                self.name,
                LossName::Triplet | LossName::MultiSimilarity | LossName::Proxynca
            )
        {
            return Err(Error::InvalidConfig(format!(
                "direction regularization is not defined for {}",
                self.name.as_str()
            )));
        }
        match self.name {
            LossName::ProxyncaPp if !(self.temperature > 0.0) => Err(Error::NonPositiveTemperature(self.temperature)),
            LossName::ProxyAnchor if !(self.anchor_alpha > 0.0 && self.anchor_delta >= 0.0) => Err(
                Error::InvalidConfig("proxy anchor needs alpha > 0 and delta >= 0".into()),
            ),
            LossName::Proxygml => self.gml_config().validate(num_classes),
            LossName::MultiSimilarity if !(self.ms_epsilon >= 0.0) => {
                Err(Error::InvalidConfig("ms_epsilon must be >= 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Value and gradients on one batch. `proxies` is required for proxy
    /// losses and ignored otherwise.
    pub fn evaluate(&self, batch: &EmbeddingBatch, proxies: Option<&ProxySet>) -> Result<LossOutput> {
        let need = || proxies.ok_or_else(|| Error::InvalidConfig(format!("{} needs proxies", self.name.as_str())));
        let opts = DirectionOptions {
            sign: self.direction_sign,
            hinge: self.direction_hinge,
        };
        match self.name {
            LossName::Contrastive => Ok(contrastive_batch_loss(batch, self.contrastive_margin)),
            LossName::Triplet if self.gamma > 0.0 => {
                directed_triplet_batch_loss(batch, self.triplet_margin, self.gamma, opts)
            }
            LossName::Triplet => Ok(triplet_batch_loss(batch, self.triplet_margin, TripletMetric::Euclidean)),
            LossName::TripletCosine => Ok(triplet_batch_loss(batch, self.triplet_margin, TripletMetric::Cosine)),
            LossName::Npair => npair_loss_with(batch, self.npair_form),
            LossName::MultiSimilarity => {
                let f = batch.data();
                let s = SimilarityMatrix::new(f.matmul_t(f)?, Metric::Cosine);
                let masks = ms_mine(&s, batch.labels(), self.ms_epsilon)?;
                if self.gamma > 0.0 {
                    directed_ms_loss(batch, &masks, self.ms_params(), self.gamma, self.direction_sign)
                } else {
                    ms_loss(batch, &masks, self.ms_params())
                }
            }
            LossName::Nca => nca_loss(batch),
            LossName::Proxynca if self.gamma > 0.0 => {
                directed_proxynca_loss(batch, need()?, self.gamma, self.direction_sign)
            }
            LossName::Proxynca => proxynca_loss(batch, need()?),
            LossName::ProxyncaPp => proxynca_pp_loss(batch, need()?, self.temperature),
            LossName::ProxyAnchor => proxy_anchor_loss(batch, need()?, self.anchor_alpha, self.anchor_delta),
            LossName::Proxygml => proxygml_loss(batch, need()?, &self.gml_config()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Each sample's embedding is a free parameter.
    #[default]
    FreeEmbeddings,
    /// Embeddings are `W x` for a trained `d x D` matrix `W`.
    Linear,
}

/// Language guidance settings. Without a table file, a seeded synthetic
/// table is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanguageConfig {
    pub omega: f64,
    pub gamma_l: f64,
    pub table: Option<std::path::PathBuf>,
    pub synthetic_dim: usize,
    pub synthetic_seed: u64,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        Self {
            omega: 1.0,
            gamma_l: 1.0,
            table: None,
            synthetic_dim: 32,
            synthetic_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub learning_rate: f64,
    /// Defaults to ten times `learning_rate`.
    pub proxy_learning_rate: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub encoder_mode: EncoderMode,
    pub embedding_dim: usize,
    pub normalize_embeddings: bool,
    pub sampler: Sampler,
    pub language: Option<LanguageConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_loss(LossName::default())
    }
}

impl TrainConfig {
    /// Defaults for `name`, with a learning rate that reaches full recall on
    /// the 8-class synthetic benchmark within 100 epochs.
    pub fn for_loss(name: LossName) -> Self {
        let learning_rate = match name {
            LossName::ProxyAnchor => 0.05,
            LossName::Proxynca | LossName::ProxyncaPp => 0.5,
            LossName::Proxygml => 1.0,
            _ => 2.0,
        };
        let (sampler, batch_size) = match name {
            LossName::Npair => (Sampler::TwoPerClass, 16),
            _ => (Sampler::Uniform, 32),
        };
        Self {
            loss: LossConfig::named(name),
            learning_rate,
            proxy_learning_rate: None,
            epochs: 100,
            batch_size,
            seed: 0,
            encoder_mode: EncoderMode::default(),
            embedding_dim: 16,
            normalize_embeddings: true,
            sampler,
            language: None,
        }
    }

    pub fn proxy_lr(&self) -> f64 {
        self.proxy_learning_rate.unwrap_or(10.0 * self.learning_rate)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.proxy_lr() >= 0.0 && self.proxy_lr().is_finite()) {
            return Err(Error::InvalidConfig("proxy learning rate must be >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.sampler == Sampler::TwoPerClass && !self.batch_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig("two_per_class needs an even batch size".into()));
        }
        if self.loss.name == LossName::Npair && self.sampler != Sampler::TwoPerClass {
            return Err(Error::InvalidConfig("npair requires the two_per_class sampler".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("embedding_dim must be positive".into()));
        }
        if let Some(lang) = &self.language {
            if !(lang.omega >= 0.0) || lang.synthetic_dim == 0 {
                return Err(Error::InvalidConfig(
                    "language omega must be >= 0 and synthetic_dim positive".into(),
                ));
            }
        }
        self.loss.validate(num_classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub recall_at_1: f64,
    pub intra_inter_gap: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final embedding of every dataset sample.
    pub embeddings: Matrix,
    pub proxies: Option<ProxySet>,
    /// Encoder weights in linear mode.
    pub weights: Option<Matrix>,
    pub initial: RetrievalReport,
    pub report: RetrievalReport,
    pub history: Vec<EpochRecord>,
}

enum Params {
    Table(Matrix),
    Linear { w: Matrix },
}

/// Trains with the configured label table when language guidance is on:
/// the table file if one is given, otherwise a seeded synthetic table.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let table = match &cfg.language {
        Some(LanguageConfig { table: Some(path), .. }) => Some(crate::io::read_label_table(path)?),
        Some(lang) => Some(LabelEmbeddingTable::synthetic(
            dataset.num_classes(),
            lang.synthetic_dim,
            lang.synthetic_seed,
        )?),
        None => None,
    };
    train_with_table(dataset, cfg, table.as_ref())
}

pub fn train_with_table(
    dataset: &Dataset,
    cfg: &TrainConfig,
    table: Option<&LabelEmbeddingTable>,
) -> Result<TrainOutcome> {
    let num_classes = dataset.num_classes();
    cfg.validate(num_classes)?;
    let lang = match (&cfg.language, table) {
        (Some(l), Some(t)) => Some((l, t)),
        (Some(_), None) => {
            return Err(Error::InvalidConfig("language guidance enabled without a table".into()));
        }
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.embedding_dim;
    let ambient = dataset.dim();

    let mut gaussian = |rows: usize, cols: usize, scale: f64| -> Result<Matrix> {
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix::from_vec(rows, cols, data)
    };
    let mut params = match cfg.encoder_mode {
        // independent of the features, like the proxies
        EncoderMode::FreeEmbeddings => {
            let mut t = gaussian(dataset.len(), d, 1.0)?;
            if cfg.normalize_embeddings {
                t = normalize_rows(&t)?;
            }
            Params::Table(t)
        }
        // scaled to keep output norms near 1 for unit inputs
        EncoderMode::Linear => Params::Linear {
            w: gaussian(d, ambient, 1.0 / (ambient as f64).sqrt())?,
        },
    };
    let mut proxies = if cfg.loss.name.uses_proxies() {
        Some(ProxySet::random(
            num_classes,
            cfg.loss.proxies_per_class(),
            d,
            &mut rng,
        )?)
    } else {
        None
    };

    let eval_all = |params: &Params| -> Result<(Matrix, RetrievalReport)> {
        let e = embed_all(params, &dataset.features, cfg.normalize_embeddings)?;
        let batch = EmbeddingBatch::new(e.clone(), dataset.labels.clone())?;
        Ok((e, evaluate(&batch, &[1], EvalMetric::Cosine)?))
    };
    let (_, initial) = eval_all(&params)?;

    let lr = cfg.learning_rate;
    let plr = cfg.proxy_lr();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(&dataset.labels, cfg.sampler, cfg.batch_size, &mut rng)?;
        let mut total = 0.0;
        for idx in &batches {
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
            let x = dataset.features.select_rows(idx);
            let (z, f) = match &params {
                Params::Table(t) => (None, t.select_rows(idx)),
                Params::Linear { w } => {
                    let z = x.matmul_t(w)?;
                    let f = if cfg.normalize_embeddings {
                        normalize_rows(&z)?
                    } else {
                        z.clone()
                    };
                    (Some(z), f)
                }
            };
            let batch = EmbeddingBatch::new(f, labels)?;
            let mut out = cfg.loss.evaluate(&batch, proxies.as_ref())?;
            if let Some((l, t)) = lang {
                out = combine_with_language(&out, &language_loss(&batch, t, l.gamma_l)?, l.omega)?;
            }
            if !out.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            total += out.value;

            match &mut params {
                Params::Table(t) => {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(t.row_mut(i), -lr, out.grad_embeddings.row(r));
                        if cfg.normalize_embeddings {
                            renormalize(t.row_mut(i))?;
                        }
                    }
                }
                Params::Linear { w } => {
                    let z = z.expect("linear mode keeps pre-normalization outputs");
                    let mut gz = out.grad_embeddings.clone();
                    if cfg.normalize_embeddings {
                        for r in 0..gz.rows() {
                            normalization_backward(z.row(r), batch.row(r), gz.row_mut(r));
                        }
                    }
                    // dL/dW = gz^T X
                    w.add_scaled(&gz.t_matmul(&x)?, -lr)?;
                }
            }
            if let (Some(p), Some(gp)) = (proxies.as_mut(), out.grad_proxies.as_ref()) {
                let v = p.vectors_mut();
                v.add_scaled(gp, -plr)?;
                if cfg.normalize_embeddings {
                    for r in 0..v.rows() {
                        renormalize(v.row_mut(r))?;
                    }
                }
            }
            step += 1;
        }
        let (_, report) = eval_all(&params)?;
        history.push(EpochRecord {
            epoch,
            mean_loss: if batches.is_empty() {
                0.0
            } else {
                total / batches.len() as f64
            },
            recall_at_1: report.recall_at_k[&1],
            intra_inter_gap: report.separation_gap,
        });
    }
    let (embeddings, report) = eval_all(&params)?;
    let weights = match params {
        Params::Linear { w } => Some(w),
        Params::Table(_) => None,
    };
    Ok(TrainOutcome {
        embeddings,
        proxies,
        weights,
        initial,
        report,
        history,
    })
}

fn embed_all(params: &Params, features: &Matrix, normalize: bool) -> Result<Matrix> {
    match params {
        Params::Table(t) => Ok(t.clone()),
        Params::Linear { w } => {
            let z = features.matmul_t(w)?;
            if normalize {
                normalize_rows(&z)
            } else {
                Ok(z)
            }
        }
    }
}

fn renormalize(row: &mut [f64]) -> Result<()> {
    let unit = crate::numerics::l2_normalize(row)?;
    row.copy_from_slice(&unit);
    Ok(())
}

/// Pulls `g = dL/df` back through `f = z / |z|`: `(g - (f.g) f) / |z|`.
fn normalization_backward(z: &[f64], f: &[f64], g: &mut [f64]) {
    let nz = crate::linalg::norm(z);
    let fg = dot(f, g);
    for (gk, fk) in g.iter_mut().zip(f) {
        *gk = (*gk - fg * fk) / nz;
    }
}
