//! Episode-local parameter updates: AdamW with decoupled weight decay, and
//! plain gradient descent.
//!
//! ```text
//! AdamW, step t:
//!   θ ← θ − lr·λ·θ
//!   m ← β1·m + (1 − β1)·g
//!   v ← β2·v + (1 − β2)·g²
//!   θ ← θ − lr · (m / (1 − β1^t)) / (sqrt(v / (1 − β2^t)) + ε)
//!
//! SGD:
//!   θ ← θ − lr·g
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TpsError};
use crate::transforms::TransformParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(format!("unknown optimizer '{other}' (expected adamw or sgd)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::AdamW,
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimConfig {
            kind: OptimizerKind::Sgd,
            lr,
            ..OptimConfig::default()
        }
    }

    pub fn adamw(lr: f64) -> Self {
        OptimConfig {
            lr,
            ..OptimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TpsError::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimState {
    pub fn new(params: &TransformParams) -> Self {
        let n = params.as_slice().len();
        OptimState {
            step_count: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }
}

/// Applies one update to `params` in place.
pub fn step(params: &mut TransformParams, grads: &TransformParams, state: &mut OptimState, cfg: &OptimConfig) -> Result<()> {
    let n = params.as_slice().len();
    if !params.same_layout(grads) || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(TpsError::ShapeMismatch(format!(
            "parameters ({} values), gradients ({}) and optimizer state ({}) disagree",
            n,
            grads.as_slice().len(),
            state.first_moment.len()
        )));
    }
    state.step_count += 1;
    let g = grads.as_slice();
    let theta = params.as_mut_slice();
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (t, gi) in theta.iter_mut().zip(g) {
                *t -= cfg.lr * gi;
            }
        }
        OptimizerKind::AdamW => {
            let t = state.step_count as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let decay = 1.0 - cfg.lr * cfg.weight_decay;
            for i in 0..n {
                theta[i] *= decay;
                let m = &mut state.first_moment[i];
                let v = &mut state.second_moment[i];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g[i];
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
    Ok(())
}
