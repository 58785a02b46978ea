//! C ABI for metric-forge.
//!
//! Embedding batches and proxy sets are opaque handles created and freed
//! through this API. Every fallible call returns an [`MfStatus`]; on failure
//! a message is kept per thread and can be read with
//! [`mf_last_error_message`]. Matrices are row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use metric_forge::config::RunConfig;
use metric_forge::gradcheck::{check_all, default_registry};
use metric_forge::pair::NpairForm;
use metric_forge::regularizers::DirectionSign;
use metric_forge::{evaluate, recall_at_k, EmbeddingBatch, Error, LossConfig, LossName, Matrix, ProxySet};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Numerical = 4,
    Io = 5,
    Parse = 6,
    GradcheckFailed = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfLossKind {
    Contrastive = 0,
    Triplet = 1,
    TripletCosine = 2,
    Npair = 3,
    MultiSimilarity = 4,
    Nca = 5,
    Proxynca = 6,
    ProxyncaPp = 7,
    ProxyAnchor = 8,
    Proxygml = 9,
}

impl From<MfLossKind> for LossName {
    fn from(k: MfLossKind) -> Self {
        match k {
            MfLossKind::Contrastive => LossName::Contrastive,
            MfLossKind::Triplet => LossName::Triplet,
            MfLossKind::TripletCosine => LossName::TripletCosine,
            MfLossKind::Npair => LossName::Npair,
            MfLossKind::MultiSimilarity => LossName::MultiSimilarity,
            MfLossKind::Nca => LossName::Nca,
            MfLossKind::Proxynca => LossName::Proxynca,
            MfLossKind::ProxyncaPp => LossName::ProxyncaPp,
            MfLossKind::ProxyAnchor => LossName::ProxyAnchor,
            MfLossKind::Proxygml => LossName::Proxygml,
        }
    }
}

/// Loss hyperparameters. Fill with [`mf_loss_params_default`] and adjust.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MfLossParams {
    pub kind: MfLossKind,
    pub contrastive_margin: f64,
    pub triplet_margin: f64,
    /// Nonzero selects the exponential-free N-pair form.
    pub npair_literal: i32,
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
    /// Direction regularization weight (triplet, multi-similarity, proxynca).
    pub gamma: f64,
    /// Nonzero flips the direction term to reward alignment.
    pub direction_reward: i32,
    pub direction_hinge: i32,
}

impl MfLossParams {
    fn to_config(self) -> LossConfig {
        LossConfig {
            name: self.kind.into(),
            contrastive_margin: self.contrastive_margin,
            triplet_margin: self.triplet_margin,
            npair_form: if self.npair_literal != 0 {
                NpairForm::Literal
            } else {
                NpairForm::Exponential
            },
            ms_alpha: self.ms_alpha,
            ms_beta: self.ms_beta,
            ms_lambda: self.ms_lambda,
            ms_epsilon: self.ms_epsilon,
            temperature: self.temperature,
            anchor_alpha: self.anchor_alpha,
            anchor_delta: self.anchor_delta,
            gml_k: self.gml_k,
            gml_m: self.gml_m,
            gml_lambda: self.gml_lambda,
            gamma: self.gamma,
            direction_sign: if self.direction_reward != 0 {
                DirectionSign::Printed
            } else {
                DirectionSign::Penalize
            },
            direction_hinge: self.direction_hinge != 0,
        }
    }
}

/// Labelled embedding rows.
pub struct MfBatch(EmbeddingBatch);

/// Class-major proxy vectors.
pub struct MfProxySet(ProxySet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> MfStatus {
    match e {
        Error::Io { .. } => MfStatus::Io,
        Error::Parse { .. } | Error::Json(_) => MfStatus::Parse,
        Error::InvalidConfig(_) | Error::KOutOfRange { .. } | Error::NonPositiveTemperature(_) => {
            MfStatus::InvalidConfig
        }
        _ if e.exit_code() == 3 => MfStatus::Numerical,
        _ => MfStatus::InvalidArgument,
    }
}

/// Runs `f`, turning errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), (MfStatus, String)>) -> MfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside metric-forge");
            MfStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (MfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MfStatus, String) {
    (MfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (MfStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (MfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Copies `rows * cols` values and `rows` labels into a new batch.
///
/// # Safety
/// `data` and `labels` must point to buffers of the stated lengths and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_batch_new(
    data: *const f64,
    rows: usize,
    cols: usize,
    labels: *const usize,
    out: *mut *mut MfBatch,
) -> MfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let values = slice(data, rows * cols, "data")?.to_vec();
        let labels = slice(labels, rows, "labels")?.to_vec();
        let m = Matrix::from_vec(rows, cols, values).map_err(lib_err)?;
        let b = EmbeddingBatch::new(m, labels).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MfBatch(b)));
        Ok(())
    })
}

/// # Safety
/// `batch` must come from [`mf_batch_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_batch_free(batch: *mut MfBatch) {
    if !batch.is_null() {
        drop(Box::from_raw(batch));
    }
}

/// Proxies laid out class-major: rows `c * per_class .. (c + 1) * per_class`
/// belong to class `c`.
///
/// # Safety
/// `data` must hold `num_classes * per_class * dim` values and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mf_proxies_new(
    data: *const f64,
    num_classes: usize,
    per_class: usize,
    dim: usize,
    out: *mut *mut MfProxySet,
) -> MfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let rows = num_classes * per_class;
        let values = slice(data, rows * dim, "data")?.to_vec();
        let m = Matrix::from_vec(rows, dim, values).map_err(lib_err)?;
        let p = ProxySet::class_major(m, per_class).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MfProxySet(p)));
        Ok(())
    })
}

/// # Safety
/// `proxies` must come from [`mf_proxies_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_proxies_free(proxies: *mut MfProxySet) {
    if !proxies.is_null() {
        drop(Box::from_raw(proxies));
    }
}

#[no_mangle]
pub extern "C" fn mf_loss_params_default(kind: MfLossKind) -> MfLossParams {
    let c = LossConfig::named(kind.into());
    MfLossParams {
        kind,
        contrastive_margin: c.contrastive_margin,
        triplet_margin: c.triplet_margin,
        npair_literal: i32::from(c.npair_form == NpairForm::Literal),
        ms_alpha: c.ms_alpha,
        ms_beta: c.ms_beta,
        ms_lambda: c.ms_lambda,
        ms_epsilon: c.ms_epsilon,
        temperature: c.temperature,
        anchor_alpha: c.anchor_alpha,
        anchor_delta: c.anchor_delta,
        gml_k: c.gml_k,
        gml_m: c.gml_m,
        gml_lambda: c.gml_lambda,
        gamma: c.gamma,
        direction_reward: i32::from(c.direction_sign == DirectionSign::Printed),
        direction_hinge: i32::from(c.direction_hinge),
    }
}

/// Loss value and gradients for one batch.
///
/// `grad_embeddings` (rows x cols of the batch) and `grad_proxies` (rows x
/// dim of the proxy set) may be null when not needed. `proxies` may be null
/// for losses without proxies.
///
/// # Safety
/// Handles must be live; gradient buffers, when given, must have the sizes
/// above.
#[no_mangle]
pub unsafe extern "C" fn mf_loss_compute(
    params: *const MfLossParams,
    batch: *const MfBatch,
    proxies: *const MfProxySet,
    out_value: *mut f64,
    grad_embeddings: *mut f64,
    grad_proxies: *mut f64,
) -> MfStatus {
    guard(|| {
        let params = params.as_ref().ok_or_else(|| null("params"))?;
        let batch = &batch.as_ref().ok_or_else(|| null("batch"))?.0;
        let proxies = proxies.as_ref().map(|p| &p.0);
        if out_value.is_null() {
            return Err(null("out_value"));
        }
        let cfg = params.to_config();
        cfg.validate(batch.num_classes()).map_err(lib_err)?;
        let out = cfg.evaluate(batch, proxies).map_err(lib_err)?;
        *out_value = out.value;
        if !grad_embeddings.is_null() {
            let g = out.grad_embeddings.as_slice();
            ptr::copy_nonoverlapping(g.as_ptr(), grad_embeddings, g.len());
        }
        if !grad_proxies.is_null() {
            if let Some(gp) = &out.grad_proxies {
                ptr::copy_nonoverlapping(gp.as_slice().as_ptr(), grad_proxies, gp.as_slice().len());
            }
        }
        Ok(())
    })
}

/// Cosine recall@k over the batch.
///
/// # Safety
/// `batch` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_recall_at_k(batch: *const MfBatch, k: usize, out: *mut f64) -> MfStatus {
    guard(|| {
        let batch = &batch.as_ref().ok_or_else(|| null("batch"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = recall_at_k(batch, &[k]).map_err(lib_err)?;
        *out = r[&k];
        Ok(())
    })
}

/// Runs the built-in gradient check on seeds `0..seeds`. Writes the number
/// of failing checks to `out_failed` and returns `GradcheckFailed` if it is
/// nonzero.
///
/// # Safety
/// `out_failed` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn mf_gradcheck(seeds: u64, tolerance: f64, out_failed: *mut usize) -> MfStatus {
    guard(|| {
        if !(tolerance > 0.0) {
            return Err((
                MfStatus::InvalidArgument,
                format!("tolerance must be positive, got {tolerance}"),
            ));
        }
        let seeds: Vec<u64> = (0..seeds).collect();
        let reports = check_all(&default_registry(), &seeds, tolerance);
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
        if !out_failed.is_null() {
            *out_failed = failed.len();
        }
        match failed.first() {
            None => Ok(()),
            Some(r) => Err((
                MfStatus::GradcheckFailed,
                format!(
                    "{} checks failed; first: {} seed {} (rel {:e})",
                    failed.len(),
                    r.loss,
                    r.seed,
                    r.max_rel_error
                ),
            )),
        }
    })
}

/// Trains from a JSON run configuration and returns a JSON document with
/// the history and the initial and final retrieval reports. No files are
/// written. Free the result with [`mf_string_free`].
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_train_json(config_json: *const c_char, out_json: *mut *mut c_char) -> MfStatus {
    guard(|| {
        let text = c_str(config_json, "config_json")?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let cfg = RunConfig::from_json(text)
            .and_then(RunConfig::resolve)
            .map_err(lib_err)?;
        let dataset = cfg.data.load().map_err(lib_err)?;
        let tc = cfg.to_train_config();
        let outcome = metric_forge::train(&dataset, &tc).map_err(lib_err)?;
        let batch = EmbeddingBatch::new(outcome.embeddings.clone(), dataset.labels.clone()).map_err(lib_err)?;
        let report = evaluate(&batch, &cfg.eval.ks, cfg.eval.metric).map_err(lib_err)?;
        let doc = serde_json::json!({
            "loss": tc.loss.name.as_str(),
            "seed": tc.seed,
            "initial": outcome.initial,
            "final": report,
            "history": outcome.history,
        });
        let s = CString::new(doc.to_string()).map_err(|e| (MfStatus::InvalidArgument, e.to_string()))?;
        *out_json = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
