//! Marginal-entropy loss over confident views and its exact gradient with
//! respect to the transform parameters.
//!
//! Forward pass, for views `x_i` and transformed prototypes `p'_c`:
//!
//! ```text
//! z_ic = scale * <p'_c, x_i>
//! q_i  = softmax(z_i)
//! S    = k views with the lowest H(q_i)      (ties: lower view index first)
//! m    = mean_{i in S} q_i
//! L    = H(m) = -sum_c m_c ln m_c
//! ```
//!
//! The selected set `S` is treated as a constant when differentiating, so
//! gradient only flows through the selected views. Backward pass:
//!
//! ```text
//! dL/dm_c      = -(ln m_c + 1)
//! dL/dz_ic     = (1/k) q_ic (a_c - sum_j a_j q_ij),   a = dL/dm
//! dL/dp'_c     = scale * sum_i dL/dz_ic x_i
//! dL/du_c      = (I - p'_c p'_c^T) dL/dp'_c / ||u_c||
//! ```
//!
//! followed by the per-kind chain in [`crate::transforms`].

use crate::error::{Result, TpsError};
use crate::numkernel::{cosine_logits_into, dot, entropy_of, softmax_into, Mat, ProbDist};
use crate::transforms::{self, Forward, TransformParams};

#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    pub selected_view_indices: Vec<usize>,
    pub marginal: ProbDist,
    pub per_view_entropies: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub grads: TransformParams,
    pub loss_report: LossReport,
}

/// How the views entering the marginal are chosen.
#[derive(Debug, Clone, Copy)]
pub enum Selection<'a> {
    /// The `k` lowest-entropy views at the current parameters.
    TopK(usize),
    /// A fixed index set, e.g. one recorded at a base point.
    Pinned(&'a [usize]),
}

/// Indices of the `k` smallest entropies, ascending, ties broken by index.
pub fn select_lowest_entropy(entropies: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > entropies.len() {
        return Err(TpsError::InvalidK {
            k,
            n: entropies.len(),
        });
    }
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    // stable sort keeps index order among equal entropies
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]));
    order.truncate(k);
    Ok(order)
}

fn check_inputs(prototypes: &Mat, views: &Mat, logit_scale: f64) -> Result<()> {
    if views.rows() == 0 {
        return Err(TpsError::EmptyInput("no views"));
    }
    if views.cols() != prototypes.cols() {
        return Err(TpsError::DimMismatch {
            expected: prototypes.cols(),
            got: views.cols(),
        });
    }
    if !logit_scale.is_finite() || logit_scale < 0.0 {
        return Err(TpsError::Config(format!(
            "logit scale must be finite and non-negative, got {logit_scale}"
        )));
    }
    Ok(())
}

struct Evaluation {
    report: LossReport,
    forward: Forward,
    /// Softmax rows of the selected views, in selection order.
    selected_probs: Mat,
}

fn evaluate(prototypes: &Mat, params: &TransformParams, views: &Mat, logit_scale: f64, selection: Selection<'_>) -> Result<Evaluation> {
    check_inputs(prototypes, views, logit_scale)?;
    let forward = transforms::forward(prototypes, params)?;
    let (n, classes) = (views.rows(), prototypes.rows());

    let mut probs = Mat::zeros(n, classes);
    let mut logits = vec![0.0; classes];
    let mut entropies = Vec::with_capacity(n);
    for i in 0..n {
        cosine_logits_into(&forward.output, views.row(i), logit_scale, &mut logits);
        let q = probs.row_mut(i);
        softmax_into(&logits, q);
        entropies.push(entropy_of(q));
    }

    let selected = match selection {
        Selection::TopK(k) => select_lowest_entropy(&entropies, k)?,
        Selection::Pinned(idx) => {
            if idx.is_empty() || idx.len() > n {
                return Err(TpsError::InvalidK { k: idx.len(), n });
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(TpsError::ShapeMismatch(format!(
                    "pinned view index {bad} out of range for {n} views"
                )));
            }
            idx.to_vec()
        }
    };

    let selected_probs = probs.select_rows(&selected);
    let mut marginal = vec![0.0; classes];
    for q in selected_probs.iter_rows() {
        for (m, v) in marginal.iter_mut().zip(q) {
            *m += v;
        }
    }
    let k = selected.len() as f64;
    for m in marginal.iter_mut() {
        *m /= k;
    }
    let loss = entropy_of(&marginal);
    if !loss.is_finite() {
        return Err(TpsError::NonFinite("loss"));
    }

    Ok(Evaluation {
        report: LossReport {
            loss,
            selected_view_indices: selected,
            marginal: ProbDist::from_raw(marginal),
            per_view_entropies: entropies,
        },
        forward,
        selected_probs,
    })
}

/// Marginal entropy over the `k` most confident views.
pub fn tps_loss(prototypes: &Mat, params: &TransformParams, views: &Mat, logit_scale: f64, k: usize) -> Result<LossReport> {
    evaluate(prototypes, params, views, logit_scale, Selection::TopK(k)).map(|e| e.report)
}

/// Loss under an explicit view selection.
pub fn tps_loss_with(prototypes: &Mat, params: &TransformParams, views: &Mat, logit_scale: f64, selection: Selection<'_>) -> Result<LossReport> {
    evaluate(prototypes, params, views, logit_scale, selection).map(|e| e.report)
}

/// Pulls `dL/dz` (one row per view in `views`) back to the parameters.
pub(crate) fn backprop_logits(
    prototypes: &Mat,
    params: &TransformParams,
    forward: &Forward,
    views: &Mat,
    grad_logits: &Mat,
    logit_scale: f64,
) -> TransformParams {
    let (classes, d) = (prototypes.rows(), prototypes.cols());
    let mut grad_u = Mat::zeros(classes, d);
    for (x, gz) in views.iter_rows().zip(grad_logits.iter_rows()) {
        for (c, &z) in gz.iter().enumerate() {
            let w = logit_scale * z;
            if w != 0.0 {
                for (g, xv) in grad_u.row_mut(c).iter_mut().zip(x) {
                    *g += w * xv;
                }
            }
        }
    }
    // grad_u currently holds dL/dp'; project onto the tangent space of the
    // unit sphere and undo the normalization scale.
    for c in 0..classes {
        let p = forward.output.row(c);
        let inv = 1.0 / forward.norms[c];
        let g = grad_u.row_mut(c);
        let along = dot(p, g);
        for (gj, pj) in g.iter_mut().zip(p) {
            *gj = (*gj - along * pj) * inv;
        }
    }
    let mut grads = params.zeros_like();
    transforms::backward(prototypes, params, &grad_u, &mut grads);
    grads
}

fn entropy_grad_logits(selected_probs: &Mat, marginal: &[f64]) -> Mat {
    let k = selected_probs.rows() as f64;
    // p·ln p -> 0 as p -> 0, and q_ic <= k m_c, so clamping keeps the
    // product finite without changing any nonzero term.
    let a: Vec<f64> = marginal
        .iter()
        .map(|&m| -(m.max(f64::MIN_POSITIVE).ln() + 1.0))
        .collect();
    let mut out = Mat::zeros(selected_probs.rows(), selected_probs.cols());
    for (i, q) in selected_probs.iter_rows().enumerate() {
        let mean_a = dot(&a, q);
        for ((o, qc), ac) in out.row_mut(i).iter_mut().zip(q).zip(&a) {
            *o = qc * (ac - mean_a) / k;
        }
    }
    out
}

/// Analytic gradient of the marginal entropy, selection held fixed.
pub fn tps_grad(prototypes: &Mat, params: &TransformParams, views: &Mat, logit_scale: f64, k: usize) -> Result<GradReport> {
    tps_grad_with(prototypes, params, views, logit_scale, Selection::TopK(k))
}

pub fn tps_grad_with(prototypes: &Mat, params: &TransformParams, views: &Mat, logit_scale: f64, selection: Selection<'_>) -> Result<GradReport> {
    let eval = evaluate(prototypes, params, views, logit_scale, selection)?;
    let grad_logits = entropy_grad_logits(&eval.selected_probs, eval.report.marginal.probs());
    let selected_views = views.select_rows(&eval.report.selected_view_indices);
    let grads = backprop_logits(prototypes, params, &eval.forward, &selected_views, &grad_logits, logit_scale);
    if grads.as_slice().iter().any(|g| !g.is_finite()) {
        return Err(TpsError::NonFinite("gradient"));
    }
    Ok(GradReport {
        grads,
        loss_report: eval.report,
    })
}

/// Central finite differences of the loss with the view selection pinned to
/// the one chosen at `params`.
pub fn finite_diff_grad(prototypes: &Mat, params: &TransformParams, views: &Mat, logit_scale: f64, k: usize, h: f64) -> Result<GradReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(TpsError::InvalidStep(h));
    }
    let base = tps_loss(prototypes, params, views, logit_scale, k)?;
    let pinned = base.selected_view_indices.clone();
    let selection = Selection::Pinned(&pinned);
    let mut grads = params.zeros_like();
    let mut probe = params.clone();
    for j in 0..params.as_slice().len() {
        let orig = params.as_slice()[j];
        probe.as_mut_slice()[j] = orig + h;
        let plus = tps_loss_with(prototypes, &probe, views, logit_scale, selection)?.loss;
        probe.as_mut_slice()[j] = orig - h;
        let minus = tps_loss_with(prototypes, &probe, views, logit_scale, selection)?.loss;
        probe.as_mut_slice()[j] = orig;
        grads.as_mut_slice()[j] = (plus - minus) / (2.0 * h);
    }
    Ok(GradReport {
        grads,
        loss_report: base,
    })
}

/// Mean cross-entropy of labelled embeddings against transformed prototypes.
pub fn support_ce_loss(prototypes: &Mat, params: &TransformParams, embeddings: &Mat, labels: &[usize], logit_scale: f64) -> Result<f64> {
    support_ce(prototypes, params, embeddings, labels, logit_scale, false).map(|(l, _)| l)
}

/// Mean cross-entropy and its gradient with respect to the parameters.
pub fn support_ce_grad(prototypes: &Mat, params: &TransformParams, embeddings: &Mat, labels: &[usize], logit_scale: f64) -> Result<(f64, TransformParams)> {
    let (loss, grads) = support_ce(prototypes, params, embeddings, labels, logit_scale, true)?;
    Ok((loss, grads.expect("gradient requested")))
}

fn support_ce(
    prototypes: &Mat,
    params: &TransformParams,
    embeddings: &Mat,
    labels: &[usize],
    logit_scale: f64,
    want_grad: bool,
) -> Result<(f64, Option<TransformParams>)> {
    check_inputs(prototypes, embeddings, logit_scale)?;
    if labels.len() != embeddings.rows() {
        return Err(TpsError::ShapeMismatch(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.rows()
        )));
    }
    let classes = prototypes.rows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(TpsError::ClassMismatch(format!("label {bad} out of range for {classes} classes")));
    }
    let forward = transforms::forward(prototypes, params)?;
    let n = embeddings.rows();
    let mut grad_logits = Mat::zeros(n, classes);
    let mut logits = vec![0.0; classes];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        cosine_logits_into(&forward.output, embeddings.row(i), logit_scale, &mut logits);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - logits[y];
        let g = grad_logits.row_mut(i);
        softmax_into(&logits, g);
        g[y] -= 1.0;
        for v in g.iter_mut() {
            *v /= n as f64;
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(TpsError::NonFinite("cross-entropy"));
    }
    let grads = want_grad.then(|| backprop_logits(prototypes, params, &forward, embeddings, &grad_logits, logit_scale));
    Ok((loss, grads))
}

/// `max |a - b| / max(max |a|, max |b|)`, falling back to the absolute
/// error when both gradients are below `floor` in magnitude.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / inf(analytic).max(inf(numeric)).max(floor)
}
