//! Differentiable top-k token selection.
//!
//! The retained count `k = r * N_v` is relaxed into a Gaussian-weighted
//! interpolation over the descending score list, giving a soft threshold
//! `tau`. Tokens are then masked by comparison against `tau`: the forward pass
//! uses the hard indicator, the backward pass the temperature-`T` sigmoid
//! (straight-through estimator).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::sigm;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxationConfig {
    /// Gaussian kernel width `sigma` over sorted token positions.
    pub kernel_width: f64,
    /// Sigmoid temperature `T` of the soft mask.
    pub temperature: f64,
}

impl Default for RelaxationConfig {
    fn default() -> Self {
        Self {
            kernel_width: 10.0,
            temperature: 0.1,
        }
    }
}

impl RelaxationConfig {
    pub fn new(kernel_width: f64, temperature: f64) -> Result<Self> {
        let cfg = Self {
            kernel_width,
            temperature,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kernel_width > 0.0) || !self.kernel_width.is_finite() {
            return Err(invalid("sigma", format!("must be > 0, got {}", self.kernel_width)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(invalid("temperature", format!("must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Importance scores of one layer, sorted in descending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    scores: Vec<f64>,
}

impl TokenScores {
    /// Sorts `scores` descending (stable) and wraps them.
    pub fn new(mut scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("token scores"));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("token score {bad}")));
        }
        scores.sort_by(|a, b| b.total_cmp(a));
        Ok(Self { scores })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.scores[0]
    }

    pub fn min(&self) -> f64 {
        self.scores[self.scores.len() - 1]
    }
}

/// Hard, soft and straight-through masks over one layer's sorted tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTriple {
    pub hard: Vec<f64>,
    pub soft: Vec<f64>,
    /// Forward value of the straight-through mask; equals `hard` exactly.
    /// Its backward derivative is that of `soft`.
    pub ste: Vec<f64>,
}

impl MaskTriple {
    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    pub fn retained(&self) -> usize {
        self.hard.iter().filter(|&&m| m == 1.0).count()
    }
}

/// Normalized Gaussian weights over positions `j = 1..=N`, shifted by the
/// largest log-weight so that tiny widths do not underflow to 0/0.
fn gaussian_weights(n: usize, center: f64, sigma: f64) -> Vec<f64> {
    let two_var = 2.0 * sigma * sigma;
    let logw: Vec<f64> = (1..=n)
        .map(|j| {
            let d = j as f64 - center;
            -d * d / two_var
        })
        .collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Gaussian-interpolated soft threshold `tau` at fractional rank `target_count`.
pub fn soft_threshold(scores: &TokenScores, target_count: f64, config: &RelaxationConfig) -> Result<f64> {
    if !target_count.is_finite() {
        return Err(Error::NonFinite(format!("target count {target_count}")));
    }
    let s = scores.as_slice();
    let w = gaussian_weights(s.len(), target_count, config.kernel_width);
    let tau: f64 = w.iter().zip(s).map(|(w, s)| w * s).sum();
    Ok(tau.clamp(scores.min(), scores.max()))
}

/// `d tau / d r` for `target_count = r * n_visual`.
pub fn soft_threshold_grad(
    scores: &TokenScores,
    target_count: f64,
    config: &RelaxationConfig,
    n_visual: usize,
) -> Result<f64> {
    let s = scores.as_slice();
    let sigma2 = config.kernel_width * config.kernel_width;
    let w = gaussian_weights(s.len(), target_count, config.kernel_width);
    let tau: f64 = w.iter().zip(s).map(|(w, s)| w * s).sum();
    let sum: f64 = w
        .iter()
        .zip(s)
        .enumerate()
        .map(|(idx, (w, s))| w * ((idx + 1) as f64 - target_count) / sigma2 * (s - tau))
        .sum();
    Ok(n_visual as f64 * sum)
}

/// Hard (`s >= tau`), soft (`sigm((s - tau) / T)`) and STE masks.
pub fn build_masks(scores: &TokenScores, threshold: f64, config: &RelaxationConfig) -> MaskTriple {
    let s = scores.as_slice();
    let hard: Vec<f64> = s.iter().map(|&x| if x >= threshold { 1.0 } else { 0.0 }).collect();
    let soft: Vec<f64> = s
        .iter()
        .map(|&x| sigm((x - threshold) / config.temperature))
        .collect();
    let ste = hard.clone();
    MaskTriple { hard, soft, ste }
}

/// Straight-through backward pass: `dL/dtau` from upstream `dL/dm_hat`.
pub fn ste_backward(upstream: &[f64], masks: &MaskTriple, config: &RelaxationConfig) -> Result<f64> {
    if upstream.len() != masks.len() {
        return Err(Error::LengthMismatch {
            expected: masks.len(),
            actual: upstream.len(),
        });
    }
    Ok(-upstream
        .iter()
        .zip(&masks.soft)
        .map(|(g, m)| g * m * (1.0 - m))
        .sum::<f64>()
        / config.temperature)
}
