//! Forward-pass FLOPs of a transformer decoder whose visual-token count is
//! pruned layer by layer.
//!
//! Per layer with sequence length `N`, hidden size `D` and FFN width `D_ffn`:
//!
//! ```text
//! QKV projections   6 N D^2
//! attention scores  2 N^2 D
//! score weighting   2 N^2 D
//! output projection 2 N D^2
//! FFN               4 N D_ffn D
//! ```
//!
//! With `D_ffn = 4D` this collapses to `24 N D^2 + 4 N^2 D`. LayerNorm, softmax
//! and residual adds are ignored. `N = N_t + r_i N_v` is kept real-valued so the
//! cost is a smooth polynomial in the retention ratios.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Transformer dimensions driving the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModelParams {
    pub n_text: u64,
    pub n_visual: u64,
    pub hidden_dim: u64,
    pub ffn_dim: u64,
    pub num_layers: usize,
}

impl CostModelParams {
    /// Standard transformer with `ffn_dim = 4 * hidden_dim`.
    pub fn new(n_text: u64, n_visual: u64, hidden_dim: u64, num_layers: usize) -> Result<Self> {
        Self::with_ffn_dim(n_text, n_visual, hidden_dim, 4 * hidden_dim, num_layers)
    }

    pub fn with_ffn_dim(
        n_text: u64,
        n_visual: u64,
        hidden_dim: u64,
        ffn_dim: u64,
        num_layers: usize,
    ) -> Result<Self> {
        let params = Self {
            n_text,
            n_visual,
            hidden_dim,
            ffn_dim,
            num_layers,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(invalid("hidden_dim", "must be >= 1"));
        }
        if self.ffn_dim == 0 {
            return Err(invalid("ffn_dim", "must be >= 1"));
        }
        if self.num_layers == 0 {
            return Err(invalid("num_layers", "must be >= 1"));
        }
        Ok(())
    }

    /// Sequence length at a layer keeping fraction `ratio` of the visual tokens.
    pub fn tokens_at(&self, ratio: f64) -> f64 {
        self.n_text as f64 + ratio * self.n_visual as f64
    }

    /// FLOPs of one layer as a function of its (real-valued) sequence length.
    pub fn flops_for_tokens(&self, n: f64) -> f64 {
        let d = self.hidden_dim as f64;
        let d_ffn = self.ffn_dim as f64;
        8.0 * n * d * d + 4.0 * n * n * d + 4.0 * n * d_ffn * d
    }

    /// FLOPs of a single layer retaining fraction `ratio` of the visual tokens.
    pub fn flops_layer(&self, ratio: f64) -> Result<f64> {
        check_ratio(0, ratio)?;
        Ok(self.flops_for_tokens(self.tokens_at(ratio)))
    }

    /// d flops_layer / d ratio.
    pub fn flops_layer_slope(&self, ratio: f64) -> f64 {
        let d = self.hidden_dim as f64;
        let d_ffn = self.ffn_dim as f64;
        let n = self.tokens_at(ratio);
        let nv = self.n_visual as f64;
        nv * (8.0 * d * d + 8.0 * n * d + 4.0 * d_ffn * d)
    }

    /// Total cost of a retention profile, summed over layers.
    pub fn flops_total(&self, profile: &RetentionProfile) -> Result<f64> {
        self.check_len(profile)?;
        Ok(profile
            .ratios()
            .iter()
            .map(|&r| self.flops_for_tokens(self.tokens_at(r)))
            .sum())
    }

    /// Gradient of [`flops_total`](Self::flops_total) with respect to each ratio.
    pub fn flops_grad(&self, profile: &RetentionProfile) -> Result<Vec<f64>> {
        self.check_len(profile)?;
        Ok(profile
            .ratios()
            .iter()
            .map(|&r| self.flops_layer_slope(r))
            .collect())
    }

    /// Cost with every visual token kept.
    pub fn full_flops(&self) -> f64 {
        self.num_layers as f64 * self.flops_for_tokens(self.tokens_at(1.0))
    }

    /// Cost with every visual token dropped (text-only).
    pub fn min_flops(&self) -> f64 {
        self.num_layers as f64 * self.flops_for_tokens(self.tokens_at(0.0))
    }

    /// Converts a budget into an absolute FLOPs target.
    pub fn resolve_budget(&self, budget: Budget) -> Result<f64> {
        match budget {
            Budget::Absolute(b) => {
                if !(b > 0.0) || !b.is_finite() {
                    return Err(invalid("budget", format!("absolute budget must be > 0, got {b}")));
                }
                Ok(b)
            }
            Budget::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(invalid("budget", format!("fraction must lie in (0, 1], got {f}")));
                }
                Ok(f * self.full_flops())
            }
        }
    }

    fn check_len(&self, profile: &RetentionProfile) -> Result<()> {
        if profile.len() != self.num_layers {
            return Err(Error::LengthMismatch {
                expected: self.num_layers,
                actual: profile.len(),
            });
        }
        Ok(())
    }
}

/// A FLOPs budget, either absolute or relative to the unpruned cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Absolute(f64),
    Fraction(f64),
}

/// Per-layer visual-token retention ratios, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RetentionProfile(Vec<f64>);

impl RetentionProfile {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        for (i, &r) in ratios.iter().enumerate() {
            check_ratio(i + 1, r)?;
        }
        Ok(Self(ratios))
    }

    /// Clips every entry into `[0, 1]`. NaN entries become 0.
    pub fn clipped(ratios: Vec<f64>) -> Self {
        Self(
            ratios
                .into_iter()
                .map(|r| if r.is_nan() { 0.0 } else { r.clamp(0.0, 1.0) })
                .collect(),
        )
    }

    pub fn uniform(num_layers: usize, ratio: f64) -> Result<Self> {
        Self::new(vec![ratio; num_layers])
    }

    pub fn ones(num_layers: usize) -> Self {
        Self(vec![1.0; num_layers])
    }

    pub fn zeros(num_layers: usize) -> Self {
        Self(vec![0.0; num_layers])
    }

    pub fn ratios(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_ratio(layer: usize, r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::RatioOutOfRange { layer, value: r });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CostModelParams {
        CostModelParams::with_ffn_dim(10, 100, 64, 256, 2).unwrap()
    }

    #[test]
    fn empty_sequence_costs_nothing() {
        let p = CostModelParams::new(0, 0, 64, 1).unwrap();
        assert_eq!(p.flops_layer(1.0).unwrap(), 0.0);
    }

    #[test]
    fn worked_layer_values() {
        let p = small();
        assert_eq!(p.flops_layer(1.0).unwrap(), 13_911_040.0);
        assert_eq!(p.flops_layer(0.5).unwrap(), 6_819_840.0);
    }

    #[test]
    fn worked_totals() {
        let p = small();
        let prof = RetentionProfile::new(vec![1.0, 0.5]).unwrap();
        assert_eq!(p.flops_total(&prof).unwrap(), 20_730_880.0);
        let zeros = RetentionProfile::zeros(2);
        assert_eq!(p.flops_total(&zeros).unwrap(), 2_017_280.0);
        assert_eq!(p.min_flops(), 2_017_280.0);
    }

    #[test]
    fn budgets() {
        let p = small();
        let full = p.flops_total(&RetentionProfile::ones(2)).unwrap();
        assert_eq!(p.resolve_budget(Budget::Fraction(1.0)).unwrap(), full);
        assert_eq!(p.resolve_budget(Budget::Fraction(0.5)).unwrap(), 13_911_040.0);
        assert_eq!(p.resolve_budget(Budget::Absolute(1e9)).unwrap(), 1e9);
        assert!(p.resolve_budget(Budget::Absolute(0.0)).is_err());
        assert!(p.resolve_budget(Budget::Fraction(0.0)).is_err());
        assert!(p.resolve_budget(Budget::Fraction(1.5)).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = small();
        assert!(matches!(p.flops_layer(1.2), Err(Error::RatioOutOfRange { .. })));
        assert!(matches!(p.flops_layer(-0.1), Err(Error::RatioOutOfRange { .. })));
        let prof = RetentionProfile::ones(3);
        assert!(matches!(p.flops_total(&prof), Err(Error::LengthMismatch { .. })));
        assert!(CostModelParams::new(1, 1, 0, 1).is_err());
        assert!(CostModelParams::new(1, 1, 1, 0).is_err());
    }

    #[test]
    fn default_ffn_is_four_times_hidden() {
        let p = CostModelParams::new(1, 2, 48, 3).unwrap();
        assert_eq!(p.ffn_dim, 192);
    }

    #[test]
    fn slope_matches_central_difference() {
        let p = CostModelParams::new(7, 300, 128, 1).unwrap();
        for &r in &[0.1, 0.37, 0.5, 0.93] {
            let h = 1e-4;
            let fd = (p.flops_for_tokens(p.tokens_at(r + h)) - p.flops_for_tokens(p.tokens_at(r - h)))
                / (2.0 * h);
            let analytic = p.flops_layer_slope(r);
            // closed form for ffn = 4D
            let d = 128.0;
            let closed = 24.0 * 300.0 * d * d + 8.0 * (7.0 + r * 300.0) * 300.0 * d;
            assert!((analytic - closed).abs() / closed < 1e-12);
            assert!((fd - analytic).abs() / analytic < 1e-8, "r={r} fd={fd} an={analytic}");
        }
    }

    #[test]
    fn clipped_profile() {
        let p = RetentionProfile::clipped(vec![-0.5, 0.3, 1.7, f64::NAN]);
        assert_eq!(p.ratios(), &[0.0, 0.3, 1.0, 0.0]);
    }
}
