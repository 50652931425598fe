//! Per-sample test-time adaptation and the dataset driver around it.
//!
//! Each sample runs an isolated episode: fresh transform parameters and
//! optimizer state, `steps` updates on the marginal entropy of its views,
//! then a prediction for view 0 (the unaugmented image) against the
//! adapted prototypes. Nothing carries over between samples, so episodes
//! can run in any order on any number of threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TpsError};
use crate::grad::{support_ce_grad, support_ce_loss, tps_grad, tps_loss};
use crate::numkernel::{argmax, cosine_logits_into, dot, norm, normalize_in_place, with_row, Mat};
use crate::optim::{self, OptimConfig, OptimState};
use crate::prototypes::PrototypeSet;
use crate::transforms::{apply_transform, init_params, ParamInit, TransformKind, TransformParams};

/// Batches handed to the worker pool at a time by [`run_dataset`].
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Inverse softmax temperature applied to cosine similarities.
    pub logit_scale: f64,
    /// Fraction of views kept for the marginal.
    pub selection_ratio: f64,
    /// Views used per sample; extra rows in a batch are ignored.
    pub n_views: usize,
    pub steps: usize,
    pub transform: TransformKind,
    pub param_init: ParamInit,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            logit_scale: 100.0,
            selection_ratio: 0.1,
            n_views: 64,
            steps: 1,
            transform: TransformKind::PerClassShift,
            param_init: ParamInit::default(),
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(TpsError::Config(format!("logit scale must be > 0, got {}", self.logit_scale)));
        }
        if !(self.selection_ratio > 0.0 && self.selection_ratio <= 1.0) {
            return Err(TpsError::Config(format!(
                "selection ratio must lie in (0, 1], got {}",
                self.selection_ratio
            )));
        }
        if self.n_views == 0 {
            return Err(TpsError::Config("need at least one view".into()));
        }
        self.optim.validate()
    }

    /// `max(1, floor(ratio * n))`, capped at `n`.
    pub fn k_for(&self, n: usize) -> usize {
        // the small offset keeps e.g. 0.29 * 100 from flooring to 28
        let k = (self.selection_ratio * n as f64 + 1e-9).floor() as usize;
        k.clamp(1, n.max(1))
    }
}

/// Embeddings of one test sample; row 0 is the original image.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub sample_id: String,
    pub views: Mat,
    /// Ground truth for evaluation only; adaptation never reads it.
    pub label: Option<usize>,
}

impl ViewBatch {
    /// Normalizes every view row.
    pub fn new(sample_id: impl Into<String>, views: Mat, label: Option<usize>) -> Result<Self> {
        if views.rows() == 0 {
            return Err(TpsError::EmptyInput("sample without views"));
        }
        Ok(ViewBatch {
            sample_id: sample_id.into(),
            views: views.normalized_rows()?,
            label,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub predicted_class: usize,
    pub zero_shot_class: usize,
    pub pre_entropy: f64,
    pub post_entropy: f64,
    pub selected_views: Vec<usize>,
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub samples: usize,
    pub labelled: usize,
    pub correct: usize,
    pub zero_shot_correct: usize,
    pub accuracy: Option<f64>,
    pub zero_shot_accuracy: Option<f64>,
    pub mean_pre_entropy: Option<f64>,
    pub mean_post_entropy: Option<f64>,
    pub fallbacks: usize,
}

#[derive(Default)]
struct SummaryAcc {
    summary: Summary,
    pre: f64,
    post: f64,
}

impl SummaryAcc {
    fn add(&mut self, p: &Prediction, label: Option<usize>) {
        let s = &mut self.summary;
        s.samples += 1;
        self.pre += p.pre_entropy;
        self.post += p.post_entropy;
        if p.fallback {
            s.fallbacks += 1;
        }
        if let Some(y) = label {
            s.labelled += 1;
            s.correct += usize::from(p.predicted_class == y);
            s.zero_shot_correct += usize::from(p.zero_shot_class == y);
        }
    }

    fn finish(self) -> Summary {
        let mut s = self.summary;
        if s.samples > 0 {
            s.mean_pre_entropy = Some(self.pre / s.samples as f64);
            s.mean_post_entropy = Some(self.post / s.samples as f64);
        }
        if s.labelled > 0 {
            s.accuracy = Some(s.correct as f64 / s.labelled as f64);
            s.zero_shot_accuracy = Some(s.zero_shot_correct as f64 / s.labelled as f64);
        }
        s
    }
}

/// Per-sample RNG seed: stable across platforms, thread counts and orderings.
pub fn sample_seed(seed: u64, sample_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

fn predict(prototypes: &Mat, x: &[f64], logit_scale: f64) -> usize {
    let mut logits = vec![0.0; prototypes.rows()];
    cosine_logits_into(prototypes, x, logit_scale, &mut logits);
    argmax(&logits)
}

struct Episode {
    predicted: usize,
    pre: f64,
    post: f64,
    selected: Vec<usize>,
}

fn run_episode(prototypes: &Mat, views: &Mat, cfg: &EngineConfig, seed: u64) -> Result<Episode> {
    let (classes, d) = (prototypes.rows(), prototypes.cols());
    let k = cfg.k_for(views.rows());
    let mut params = init_params(cfg.transform, classes, d, cfg.param_init, seed)?;
    let mut state = OptimState::new(&params);
    let mut first: Option<(f64, Vec<usize>)> = None;
    for _ in 0..cfg.steps {
        let g = tps_grad(prototypes, &params, views, cfg.logit_scale, k)?;
        first.get_or_insert_with(|| (g.loss_report.loss, g.loss_report.selected_view_indices.clone()));
        optim::step(&mut params, &g.grads, &mut state, &cfg.optim)?;
        if params.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(TpsError::NonFinite("parameters after update"));
        }
    }
    let last = tps_loss(prototypes, &params, views, cfg.logit_scale, k)?;
    let (pre, selected) = first.unwrap_or_else(|| (last.loss, last.selected_view_indices.clone()));
    let adapted = apply_transform(prototypes, &params)?;
    Ok(Episode {
        predicted: predict(&adapted, views.row(0), cfg.logit_scale),
        pre,
        post: last.loss,
        selected,
    })
}

fn identity_params(classes: usize, d: usize) -> Result<TransformParams> {
    init_params(TransformKind::PerClassShift, classes, d, ParamInit::default(), 0)
}

/// Adapts to one sample and predicts its class.
///
/// Numeric failures inside the episode (a collapsed prototype, a non-finite
/// update) do not propagate: the zero-shot prediction is returned with
/// `fallback` set. Shape errors do propagate.
pub fn adapt_one(prototypes: &PrototypeSet, batch: &ViewBatch, cfg: &EngineConfig) -> Result<Prediction> {
    cfg.validate()?;
    let protos = prototypes.matrix();
    if batch.views.cols() != protos.cols() {
        return Err(TpsError::DimMismatch {
            expected: protos.cols(),
            got: batch.views.cols(),
        });
    }
    if batch.views.rows() == 0 {
        return Err(TpsError::EmptyInput("sample without views"));
    }
    let n = batch.views.rows().min(cfg.n_views);
    let truncated;
    let views = if n < batch.views.rows() {
        truncated = batch.views.select_rows(&(0..n).collect::<Vec<_>>());
        &truncated
    } else {
        &batch.views
    };

    // Zero-shot goes through the same transform path with a zero shift so
    // that a zero-step episode reproduces it bit for bit.
    let identity = identity_params(protos.rows(), protos.cols())?;
    let zero_shot_protos = apply_transform(protos, &identity)?;
    let zero_shot_class = predict(&zero_shot_protos, views.row(0), cfg.logit_scale);

    let seed = sample_seed(cfg.seed, &batch.sample_id);
    match run_episode(protos, views, cfg, seed) {
        Ok(ep) => Ok(Prediction {
            sample_id: batch.sample_id.clone(),
            predicted_class: ep.predicted,
            zero_shot_class,
            pre_entropy: ep.pre,
            post_entropy: ep.post,
            selected_views: ep.selected,
            fallback: false,
        }),
        Err(TpsError::ZeroNorm { .. } | TpsError::NonFinite(_)) => {
            let base = tps_loss(protos, &identity, views, cfg.logit_scale, cfg.k_for(n))?;
            Ok(Prediction {
                sample_id: batch.sample_id.clone(),
                predicted_class: zero_shot_class,
                zero_shot_class,
                pre_entropy: base.loss,
                post_entropy: base.loss,
                selected_views: base.selected_view_indices,
                fallback: true,
            })
        }
        Err(e) => Err(e),
    }
}

#[cfg(feature = "parallel")]
fn adapt_chunk(pool: Option<&rayon::ThreadPool>, prototypes: &PrototypeSet, chunk: &[ViewBatch], cfg: &EngineConfig) -> Vec<Result<Prediction>> {
    use rayon::prelude::*;
    match pool {
        Some(pool) => pool.install(|| chunk.par_iter().map(|b| adapt_one(prototypes, b, cfg)).collect()),
        None => chunk.iter().map(|b| adapt_one(prototypes, b, cfg)).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn adapt_chunk(_pool: Option<&()>, prototypes: &PrototypeSet, chunk: &[ViewBatch], cfg: &EngineConfig) -> Vec<Result<Prediction>> {
    chunk.iter().map(|b| adapt_one(prototypes, b, cfg)).collect()
}

#[cfg(feature = "parallel")]
fn worker_pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers == 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| TpsError::Config(format!("cannot start {workers} workers: {e}")))
}

#[cfg(not(feature = "parallel"))]
fn worker_pool(_workers: usize) -> Result<Option<()>> {
    Ok(None)
}

/// Runs every batch through [`adapt_one`] and feeds predictions to `sink` in
/// input order.
///
/// `workers` sets the thread count (0 picks one per core, 1 runs on the
/// calling thread). Without the `parallel` feature everything runs on the
/// calling thread. Errors from the batch iterator or the sink abort the run.
pub fn run_dataset<I, F>(prototypes: &PrototypeSet, batches: I, cfg: &EngineConfig, workers: usize, mut sink: F) -> Result<Summary>
where
    I: IntoIterator<Item = Result<ViewBatch>>,
    F: FnMut(&Prediction) -> Result<()>,
{
    cfg.validate()?;
    let pool = worker_pool(workers)?;
    let mut acc = SummaryAcc::default();
    let mut iter = batches.into_iter();
    let mut chunk = Vec::with_capacity(CHUNK);
    loop {
        chunk.clear();
        for b in iter.by_ref().take(CHUNK) {
            chunk.push(b?);
        }
        if chunk.is_empty() {
            break;
        }
        let results = adapt_chunk(pool.as_ref(), prototypes, &chunk, cfg);
        for (batch, result) in chunk.iter().zip(results) {
            let p = result?;
            acc.add(&p, batch.label);
            sink(&p)?;
        }
    }
    Ok(acc.finish())
}

/// In-memory convenience wrapper over [`run_dataset`].
pub fn adapt_all(prototypes: &PrototypeSet, batches: &[ViewBatch], cfg: &EngineConfig, workers: usize) -> Result<(Vec<Prediction>, Summary)> {
    let mut out = Vec::with_capacity(batches.len());
    let summary = run_dataset(prototypes, batches.iter().cloned().map(Ok), cfg, workers, |p| {
        out.push(p.clone());
        Ok(())
    })?;
    Ok((out, summary))
}

/// Labelled support examples for one binary query.
#[derive(Debug, Clone)]
pub struct SupportSet {
    pub positives: Mat,
    pub negatives: Mat,
    pub query: Vec<f64>,
    pub steps: usize,
    pub class_init_sigma: f64,
}

impl SupportSet {
    /// Normalizes all embeddings; 64 steps and σ = 0.02 by default.
    pub fn new(positives: Mat, negatives: Mat, query: Vec<f64>) -> Result<Self> {
        if positives.rows() == 0 || negatives.rows() == 0 {
            return Err(TpsError::EmptyInput("support set needs positives and negatives"));
        }
        let d = positives.cols();
        if negatives.cols() != d || query.len() != d {
            return Err(TpsError::DimMismatch {
                expected: d,
                got: if negatives.cols() != d { negatives.cols() } else { query.len() },
            });
        }
        let mut query = query;
        normalize_in_place(&mut query)?;
        Ok(SupportSet {
            positives: positives.normalized_rows()?,
            negatives: negatives.normalized_rows()?,
            query,
            steps: 64,
            class_init_sigma: 0.02,
        })
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BongardLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BongardOutcome {
    pub prediction: BongardLabel,
    /// Fraction of support embeddings the adapted class embeddings get right.
    pub support_accuracy: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub fallback: bool,
}

fn label_of(class: usize) -> BongardLabel {
    if class == 0 {
        BongardLabel::Positive
    } else {
        BongardLabel::Negative
    }
}

/// Random frozen class embeddings plus trainable per-class shifts, trained
/// by cross-entropy on the support set, then used to classify the query.
/// Class 0 is positive and wins ties.
pub fn bongard_adapt(support: &SupportSet, cfg: &EngineConfig, seed: u64) -> Result<BongardOutcome> {
    cfg.optim.validate()?;
    let d = support.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, support.class_init_sigma)
        .map_err(|e| TpsError::Config(format!("class init sigma: {e}")))?;
    let mut classes = Mat::zeros(2, d);
    for v in classes.as_mut_slice() {
        *v = normal.sample(&mut rng);
    }

    let mut rows: Vec<&[f64]> = support.positives.iter_rows().collect();
    rows.extend(support.negatives.iter_rows());
    let embeddings = Mat::from_rows(&rows)?;
    let mut labels = vec![0usize; support.positives.rows()];
    labels.resize(embeddings.rows(), 1);

    let trained = (|| -> Result<(f64, f64, Mat)> {
        for c in 0..2 {
            normalize_in_place(classes.row_mut(c)).map_err(|e| with_row(e, c))?;
        }
        let mut params = init_params(TransformKind::PerClassShift, 2, d, ParamInit::default(), seed)?;
        let mut state = OptimState::new(&params);
        let initial = support_ce_loss(&classes, &params, &embeddings, &labels, cfg.logit_scale)?;
        for _ in 0..support.steps {
            let (_, g) = support_ce_grad(&classes, &params, &embeddings, &labels, cfg.logit_scale)?;
            optim::step(&mut params, &g, &mut state, &cfg.optim)?;
        }
        let last = support_ce_loss(&classes, &params, &embeddings, &labels, cfg.logit_scale)?;
        Ok((initial, last, apply_transform(&classes, &params)?))
    })();

    match trained {
        Ok((initial, last, adapted)) => {
            let correct = embeddings
                .iter_rows()
                .zip(&labels)
                .filter(|(x, &y)| predict(&adapted, x, cfg.logit_scale) == y)
                .count();
            Ok(BongardOutcome {
                prediction: label_of(predict(&adapted, &support.query, cfg.logit_scale)),
                support_accuracy: correct as f64 / labels.len() as f64,
                initial_loss: initial,
                final_loss: last,
                fallback: false,
            })
        }
        Err(TpsError::ZeroNorm { .. } | TpsError::NonFinite(_)) => {
            let mean = |m: &Mat| -> Vec<f64> {
                let mut acc = vec![0.0; m.cols()];
                for r in m.iter_rows() {
                    for (a, b) in acc.iter_mut().zip(r) {
                        *a += b;
                    }
                }
                acc
            };
            let (pos, neg) = (mean(&support.positives), mean(&support.negatives));
            let cos = |v: &[f64]| dot(v, &support.query) / norm(v).max(f64::MIN_POSITIVE);
            let class = usize::from(cos(&neg) > cos(&pos));
            Ok(BongardOutcome {
                prediction: label_of(class),
                support_accuracy: f64::NAN,
                initial_loss: f64::NAN,
                final_loss: f64::NAN,
                fallback: true,
            })
        }
        Err(e) => Err(e),
    }
}
