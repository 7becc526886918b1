//! Class-weighted, bootstrapped multi-label cross-entropy and its gradient.
//!
//! Per sample, the loss over K labels is
//! `L = -sum_c [ w_pos[c] * t_c * ln(s_c) + w_neg[c] * (1 - t_c) * ln(1 - s_c) ]`
//! where `t_c` is the training target: the given label as-is, or the
//! bootstrapped blend `beta * y_c + (1 - beta) * s_c` which softens noisy
//! supervision. The blend is treated as a constant when differentiating
//! (stop-gradient), so the gradient keeps the weighted cross-entropy form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabelStats;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("label vector has length {labels} but score vector has length {scores}")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("class weights cover {weights} labels but vectors have length {labels}")]
    WeightMismatch { weights: usize, labels: usize },
    #[error("label {label} has no training examples")]
    NoExamples { label: usize },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

/// Which training objective to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Unweighted cross-entropy on the given labels.
    Plain,
    /// Class-balanced weights, given labels.
    Weighted,
    /// Class-balanced weights with bootstrapped targets.
    WeightedBootstrap,
}

impl std::str::FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(LossMode::Plain),
            "weighted" => Ok(LossMode::Weighted),
            "weighted_bootstrap" => Ok(LossMode::WeightedBootstrap),
            other => Err(format!("unknown loss mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Bootstrap blend weight in `[0, 1]`; 1 keeps the given labels.
    pub beta: f64,
    /// Scores are clamped to `[eps, 1 - eps]` before the logs.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::WeightedBootstrap,
            beta: 0.9,
            eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(LossError::InvalidConfig(format!(
                "beta must be in [0, 1], got {}",
                self.beta
            )));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(LossError::InvalidConfig(format!(
                "eps must be in (0, 0.5), got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Per-label loss multipliers equalizing positive and negative contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w_pos: Vec<f64>,
    pub w_neg: Vec<f64>,
}

impl ClassWeights {
    /// All-ones weights for K labels.
    pub fn uniform(k: usize) -> Self {
        ClassWeights {
            w_pos: vec![1.0; k],
            w_neg: vec![1.0; k],
        }
    }

    pub fn len(&self) -> usize {
        self.w_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_pos.is_empty()
    }
}

/// Balancing weights from training counts:
/// `w_pos = (N_pos + N_neg) / (2 N_pos)` and `w_neg = (N_pos + N_neg) / (2 N_neg)`.
///
/// A zero count on one side falls back to a denominator of 1; labels like
/// that are normally removed from the trained set beforehand.
pub fn class_weights(stats: &LabelStats) -> Result<ClassWeights, LossError> {
    let k = stats.n_pos.len();
    let mut w_pos = Vec::with_capacity(k);
    let mut w_neg = Vec::with_capacity(k);
    for c in 0..k {
        let (np, nn) = (stats.n_pos[c], stats.n_neg[c]);
        let total = (np + nn) as f64;
        if np + nn == 0 {
            return Err(LossError::NoExamples { label: c });
        }
        w_pos.push(total / (2.0 * np.max(1) as f64));
        w_neg.push(total / (2.0 * nn.max(1) as f64));
    }
    Ok(ClassWeights { w_pos, w_neg })
}

/// Bootstrapped target: `beta * y + (1 - beta) * s`. Constant w.r.t. `s`
/// in gradients.
pub fn bootstrap_target(y: f64, s: f64, beta: f64) -> f64 {
    beta * y + (1.0 - beta) * s
}

fn clamp_score(s: f64, eps: f64) -> f64 {
    s.clamp(eps, 1.0 - eps)
}

/// Effective per-label target under the configured mode.
fn target(y: f64, s: f64, cfg: &LossConfig) -> f64 {
    match cfg.mode {
        LossMode::Plain | LossMode::Weighted => y,
        LossMode::WeightedBootstrap => bootstrap_target(y, s, cfg.beta),
    }
}

fn weights_for(c: usize, w: &ClassWeights, cfg: &LossConfig) -> (f64, f64) {
    match cfg.mode {
        LossMode::Plain => (1.0, 1.0),
        _ => (w.w_pos[c], w.w_neg[c]),
    }
}

fn check_lengths(y: &[bool], s: &[f64], w: &ClassWeights) -> Result<(), LossError> {
    if y.len() != s.len() {
        return Err(LossError::LengthMismatch {
            labels: y.len(),
            scores: s.len(),
        });
    }
    if w.len() != y.len() {
        return Err(LossError::WeightMismatch {
            weights: w.len(),
            labels: y.len(),
        });
    }
    Ok(())
}

/// Loss for one sample. Nonnegative and finite for any valid input.
pub fn multilabel_loss(
    y: &[bool],
    s: &[f64],
    w: &ClassWeights,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    check_lengths(y, s, w)?;
    let mut total = 0.0;
    for c in 0..y.len() {
        let sc = clamp_score(s[c], cfg.eps);
        let t = target(y[c] as u8 as f64, sc, cfg);
        let (wp, wn) = weights_for(c, w, cfg);
        total -= wp * t * sc.ln() + wn * (1.0 - t) * (1.0 - sc).ln();
    }
    Ok(total)
}

/// Exact gradient of [`multilabel_loss`] w.r.t. the scores, with the
/// bootstrapped target held constant:
/// `dL/ds_c = -(w_pos * t_c / s_c - w_neg * (1 - t_c) / (1 - s_c))`.
pub fn loss_gradient(
    y: &[bool],
    s: &[f64],
    w: &ClassWeights,
    cfg: &LossConfig,
) -> Result<Vec<f64>, LossError> {
    check_lengths(y, s, w)?;
    let mut grad = Vec::with_capacity(y.len());
    for c in 0..y.len() {
        let sc = clamp_score(s[c], cfg.eps);
        let t = target(y[c] as u8 as f64, sc, cfg);
        let (wp, wn) = weights_for(c, w, cfg);
        grad.push(-(wp * t / sc - wn * (1.0 - t) / (1.0 - sc)));
    }
    Ok(grad)
}
