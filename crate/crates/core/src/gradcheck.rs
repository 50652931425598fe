//! Randomized comparison of [`tps_grad`] against pinned-selection central
//! differences, across every transform kind.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grad::{finite_diff_grad, max_relative_error, tps_grad};
use crate::numkernel::{normalize_in_place, Mat};
use crate::transforms::{init_params, ParamInit, TransformKind, TransformParams};

/// Finite-difference step used by the suite.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const DEFAULT_THRESHOLD: f64 = 1e-6;
/// Denominator floor for the relative error. A central difference at
/// h = 1e-5 in f64 carries roughly 1e-11..1e-10 of absolute noise, so
/// gradients below this max-norm are in effect held to an absolute
/// tolerance of `threshold * RELATIVE_FLOOR`.
pub const RELATIVE_FLOOR: f64 = 1e-4;
/// Prototypes and views are drawn in a cone around a shared direction,
/// the way real image/text embeddings cluster; independent uniform
/// directions at logit scale 100 saturate the softmax and leave nothing
/// but rounding noise to compare.
const CONE_SPREAD: f64 = 0.3;

/// One randomized gradient-check problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub prototypes: Mat,
    pub params: TransformParams,
    pub views: Mat,
    pub logit_scale: f64,
    pub k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub kind: TransformKind,
    pub classes: usize,
    pub dim: usize,
    pub views: usize,
    pub k: usize,
    pub logit_scale: f64,
    /// Max-norm of the analytic gradient.
    pub grad_scale: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub trials: Vec<TrialResult>,
    pub max_rel_error: f64,
}

impl SuiteReport {
    pub fn worst(&self) -> Option<&TrialResult> {
        self.trials.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for r in 0..rows {
        loop {
            let row = m.row_mut(r);
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            if normalize_in_place(row).is_ok() {
                break;
            }
        }
    }
    m
}

/// Random instance: C in 2..=10, d in 4..=32, n in 1..=8, k in 1..=n,
/// logit scale in {10, 30, 100}, and parameters perturbed away from their
/// initial values.
pub fn random_instance(kind: TransformKind, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..=10);
    let dim = rng.random_range(4..=32);
    let n = rng.random_range(1..=8);
    let k = rng.random_range(1..=n);
    let logit_scale = [10.0, 30.0, 100.0][rng.random_range(0..3)];
    let base = unit_rows(&mut rng, 1, dim);
    let cone = |rng: &mut ChaCha8Rng, rows: usize| -> Result<Mat> {
        let mut m = unit_rows(rng, rows, dim);
        for r in 0..rows {
            let row = m.row_mut(r);
            for (v, b) in row.iter_mut().zip(base.row(0)) {
                *v = b + CONE_SPREAD * *v;
            }
            normalize_in_place(row)?;
        }
        Ok(m)
    };
    let prototypes = cone(&mut rng, classes)?;
    let views = cone(&mut rng, n)?;
    let mut params = init_params(kind, classes, dim, ParamInit::default(), rng.random())?;
    let jitter = match kind {
        TransformKind::Film => 0.02,
        _ => 0.05,
    };
    for v in params.as_mut_slice() {
        *v += jitter * rng.sample::<f64, _>(StandardNormal);
    }
    if kind == TransformKind::Film {
        // keep γ near 1 so the modulated prototypes are well conditioned
        let d = dim;
        for j in 0..d {
            params.as_mut_slice()[2 * d * d + j] += 1.0;
        }
    }
    Ok(Instance {
        prototypes,
        params,
        views,
        logit_scale,
        k,
    })
}

/// Returns the analytic gradient's max-norm and the max relative error.
pub fn check_instance(inst: &Instance, h: f64) -> Result<(f64, f64)> {
    let analytic = tps_grad(&inst.prototypes, &inst.params, &inst.views, inst.logit_scale, inst.k)?;
    let numeric = finite_diff_grad(&inst.prototypes, &inst.params, &inst.views, inst.logit_scale, inst.k, h)?;
    let a = analytic.grads.as_slice();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((scale, max_relative_error(a, numeric.grads.as_slice(), RELATIVE_FLOOR)))
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (trial as u64).wrapping_add(1).wrapping_mul(0x2545_f491_4f6c_dd1d)
}

fn run_trial(trial: usize, seed: u64, h: f64) -> Result<TrialResult> {
    let kind = TransformKind::ALL[trial % TransformKind::ALL.len()];
    let inst = random_instance(kind, trial_seed(seed, trial))?;
    let (grad_scale, err) = check_instance(&inst, h)?;
    Ok(TrialResult {
        trial,
        kind,
        classes: inst.prototypes.rows(),
        dim: inst.prototypes.cols(),
        views: inst.views.rows(),
        k: inst.k,
        logit_scale: inst.logit_scale,
        grad_scale,
        max_rel_error: err,
    })
}

/// Runs `trials` random instances, cycling through every transform kind.
pub fn run_suite(trials: usize, seed: u64, h: f64) -> Result<SuiteReport> {
    #[cfg(feature = "parallel")]
    let results: Vec<Result<TrialResult>> = {
        use rayon::prelude::*;
        (0..trials).into_par_iter().map(|t| run_trial(t, seed, h)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<TrialResult>> = (0..trials).map(|t| run_trial(t, seed, h)).collect();

    let trials = results.into_iter().collect::<Result<Vec<_>>>()?;
    let max_rel_error = trials.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(SuiteReport { trials, max_rel_error })
}
