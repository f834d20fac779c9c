//! Parametric pruning kernels mapping a 1-based layer index to a retention ratio.
//!
//! | variant       | formula                                                        |
//! |---------------|----------------------------------------------------------------|
//! | `SingleStep`  | `1 + (r - 1) sigm(g (i - k))`                                  |
//! | `Exponential` | `r exp(-k i)`                                                  |
//! | `Linear`      | `-k i + r`                                                     |
//! | `MultiStep`   | `1 - sum_j (1 - r)/M sigm(k (i - (2j - 1) L / (2M)))`          |
//!
//! Outputs are clipped into `[0, 1]`; where clipping changes the value the
//! gradient is zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost_model::RetentionProfile;
use crate::error::{invalid, Error, Result};

/// Smallest ratio/sharpness the optimizer may project onto.
pub const MIN_POSITIVE_PARAM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelVariant {
    SingleStep,
    Exponential,
    Linear,
    MultiStep,
}

impl KernelVariant {
    pub fn name(self) -> &'static str {
        match self {
            KernelVariant::SingleStep => "single",
            KernelVariant::Exponential => "exp",
            KernelVariant::Linear => "linear",
            KernelVariant::MultiStep => "multistep",
        }
    }
}

impl fmt::Display for KernelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single_step" | "p-sigmoid" => Ok(KernelVariant::SingleStep),
            "exp" | "exponential" => Ok(KernelVariant::Exponential),
            "linear" => Ok(KernelVariant::Linear),
            "multistep" | "multi_step" | "multi-step" => Ok(KernelVariant::MultiStep),
            other => Err(invalid("kernel", format!("unknown kernel `{other}`"))),
        }
    }
}

/// Partial derivatives of a kernel output with respect to its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KernelGrad {
    pub position: f64,
    pub ratio: f64,
    pub sharpness: f64,
}

/// A kernel family plus its parameters.
///
/// `position` is the transition layer for `SingleStep` and the decay rate or
/// step sharpness for the other variants. `sharpness` is used by `SingleStep`
/// only and `steps` by `MultiStep` only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub variant: KernelVariant,
    pub position: f64,
    pub ratio: f64,
    pub sharpness: f64,
    pub steps: usize,
    pub num_layers: usize,
}

impl KernelSpec {
    pub fn single_step(num_layers: usize, position: f64, ratio: f64, sharpness: f64) -> Result<Self> {
        Self {
            variant: KernelVariant::SingleStep,
            position,
            ratio,
            sharpness,
            steps: 1,
            num_layers,
        }
        .validated()
    }

    pub fn exponential(num_layers: usize, rate: f64, ratio: f64) -> Result<Self> {
        Self {
            variant: KernelVariant::Exponential,
            position: rate,
            ratio,
            sharpness: 1.0,
            steps: 1,
            num_layers,
        }
        .validated()
    }

    pub fn linear(num_layers: usize, slope: f64, ratio: f64) -> Result<Self> {
        Self {
            variant: KernelVariant::Linear,
            position: slope,
            ratio,
            sharpness: 1.0,
            steps: 1,
            num_layers,
        }
        .validated()
    }

    pub fn multi_step(num_layers: usize, sharpness: f64, ratio: f64, steps: usize) -> Result<Self> {
        Self {
            variant: KernelVariant::MultiStep,
            position: sharpness,
            ratio,
            sharpness: 1.0,
            steps,
            num_layers,
        }
        .validated()
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(invalid("num_layers", "must be >= 1"));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(invalid("ratio", format!("must lie in (0, 1], got {}", self.ratio)));
        }
        if !self.position.is_finite() {
            return Err(invalid("position", "must be finite"));
        }
        if self.variant == KernelVariant::SingleStep && !(self.sharpness > 0.0) {
            return Err(invalid("sharpness", format!("must be > 0, got {}", self.sharpness)));
        }
        if self.variant == KernelVariant::MultiStep && self.steps == 0 {
            return Err(invalid("steps", "must be >= 1"));
        }
        Ok(())
    }

    /// Centre of the `j`-th step (1-based) of the multi-step kernel.
    pub fn step_center(&self, j: usize) -> f64 {
        ((2 * j - 1) as f64 * self.num_layers as f64) / (2 * self.steps) as f64
    }

    /// Kernel value before clipping.
    pub fn raw(&self, layer: usize) -> f64 {
        let i = layer as f64;
        let (k, r) = (self.position, self.ratio);
        match self.variant {
            KernelVariant::SingleStep => 1.0 + (r - 1.0) * sigm(self.sharpness * (i - k)),
            KernelVariant::Exponential => r * (-k * i).exp(),
            KernelVariant::Linear => -k * i + r,
            KernelVariant::MultiStep => {
                let m = self.steps as f64;
                let drop = (1.0 - r) / m;
                1.0 - (1..=self.steps)
                    .map(|j| drop * sigm(k * (i - self.step_center(j))))
                    .sum::<f64>()
            }
        }
    }

    /// Retention ratio at `layer` (1-based), clipped into `[0, 1]`.
    pub fn eval(&self, layer: usize) -> Result<f64> {
        self.check_layer(layer)?;
        Ok(clip_unit(self.raw(layer)))
    }

    /// Gradient of [`eval`](Self::eval) with respect to the kernel parameters.
    pub fn grad(&self, layer: usize) -> Result<KernelGrad> {
        self.check_layer(layer)?;
        let raw = self.raw(layer);
        if !(0.0..=1.0).contains(&raw) {
            return Ok(KernelGrad::default());
        }
        let i = layer as f64;
        let (k, r) = (self.position, self.ratio);
        let g = match self.variant {
            KernelVariant::SingleStep => {
                let x = self.sharpness * (i - k);
                let s = sigm(x);
                let ds = s * (1.0 - s);
                KernelGrad {
                    position: (r - 1.0) * ds * -self.sharpness,
                    ratio: s,
                    sharpness: (r - 1.0) * ds * (i - k),
                }
            }
            KernelVariant::Exponential => {
                let e = (-k * i).exp();
                KernelGrad {
                    position: -i * r * e,
                    ratio: e,
                    sharpness: 0.0,
                }
            }
            KernelVariant::Linear => KernelGrad {
                position: -i,
                ratio: 1.0,
                sharpness: 0.0,
            },
            KernelVariant::MultiStep => {
                let m = self.steps as f64;
                let mut g = KernelGrad::default();
                for j in 1..=self.steps {
                    let d = i - self.step_center(j);
                    let s = sigm(k * d);
                    g.ratio += s / m;
                    g.position -= (1.0 - r) / m * s * (1.0 - s) * d;
                }
                g
            }
        };
        Ok(g)
    }

    pub fn profile(&self) -> RetentionProfile {
        RetentionProfile::clipped((1..=self.num_layers).map(|i| self.raw(i)).collect())
    }

    /// Free parameters in optimizer order: `[position, ratio]`, plus
    /// `sharpness` for `SingleStep`.
    pub fn params(&self) -> Vec<f64> {
        match self.variant {
            KernelVariant::SingleStep => vec![self.position, self.ratio, self.sharpness],
            _ => vec![self.position, self.ratio],
        }
    }

    pub fn num_params(&self) -> usize {
        match self.variant {
            KernelVariant::SingleStep => 3,
            _ => 2,
        }
    }

    /// Copy of `self` with parameters replaced (no validation).
    pub fn with_params(&self, theta: &[f64]) -> Self {
        let mut out = *self;
        out.position = theta[0];
        out.ratio = theta[1];
        if self.variant == KernelVariant::SingleStep {
            out.sharpness = theta[2];
        }
        out
    }

    /// Projects raw optimizer parameters back into the valid region.
    pub fn project_params(&self, theta: &mut [f64]) {
        theta[1] = theta[1].clamp(MIN_POSITIVE_PARAM, 1.0);
        match self.variant {
            KernelVariant::SingleStep => theta[2] = theta[2].max(MIN_POSITIVE_PARAM),
            // non-negative rates keep the profile non-increasing
            _ => theta[0] = theta[0].max(0.0),
        }
    }

    /// Pulls a gradient with respect to the profile back onto the parameters.
    pub fn pullback(&self, profile_grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_params()];
        for (idx, &g) in profile_grad.iter().enumerate() {
            // layer is always in range here
            let kg = self.grad(idx + 1).unwrap_or_default();
            out[0] += g * kg.position;
            out[1] += g * kg.ratio;
            if self.variant == KernelVariant::SingleStep {
                out[2] += g * kg.sharpness;
            }
        }
        out
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.num_layers {
            return Err(Error::LayerOutOfRange {
                index: layer,
                num_layers: self.num_layers,
            });
        }
        Ok(())
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigm(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clip_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn single_step_plateau_and_midpoint() {
        let s = KernelSpec::single_step(200, 150.0, 0.4, 1.0).unwrap();
        assert_eq!(s.eval(50).unwrap(), 1.0);
        assert!((s.eval(150).unwrap() - 0.7).abs() < 1e-15);
        let g = s.grad(150).unwrap();
        assert!((g.ratio - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_intercept_and_grad() {
        let s = KernelSpec::linear(10, 0.05, 0.8).unwrap();
        assert_eq!(s.raw(0), 0.8);
        let g = s.grad(3).unwrap();
        assert_eq!(g.ratio, 1.0);
        assert_eq!(g.position, -3.0);
        let flat = KernelSpec::linear(6, 0.0, 0.35).unwrap();
        assert!(flat.profile().ratios().iter().all(|&r| r == 0.35));
    }

    #[test]
    fn exponential_zero_rate_is_constant() {
        let s = KernelSpec::exponential(7, 0.0, 0.6).unwrap();
        for i in 1..=7 {
            assert_eq!(s.eval(i).unwrap(), 0.6);
        }
    }

    #[test]
    fn multi_step_with_one_step_equals_single_step_at_midpoint() {
        for &l in &[4usize, 7, 12, 36] {
            for &(k, r) in &[(0.3, 0.2), (2.0, 0.75), (9.0, 0.01)] {
                let ms = KernelSpec::multi_step(l, k, r, 1).unwrap();
                let ss = KernelSpec::single_step(l, l as f64 / 2.0, r, k).unwrap();
                for i in 1..=l {
                    assert_eq!(ms.raw(i), ss.raw(i));
                }
            }
        }
    }

    #[test]
    fn sharp_single_step_approaches_step_function() {
        let l = 40;
        let k = 20.5;
        let r = 0.3;
        let s = KernelSpec::single_step(l, k, r, 1000.0).unwrap();
        let prof = s.profile();
        for (idx, &v) in prof.ratios().iter().enumerate() {
            let i = (idx + 1) as f64;
            if (i - k).abs() >= 0.05 * l as f64 {
                let want = if i < k { 1.0 } else { r };
                assert!((v - want).abs() < 1e-6, "layer {i}: {v}");
            }
        }
    }

    #[test]
    fn multi_step_staircase() {
        let l = 12;
        let s = KernelSpec::multi_step(l, 60.0, 0.1, l).unwrap();
        let p = s.profile();
        for w in p.ratios().windows(2) {
            assert!(w[1] <= w[0]);
        }
        // each layer sits just past its own step centre, so M distinct levels
        let mut levels: Vec<f64> = p.ratios().to_vec();
        levels.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        assert_eq!(levels.len(), l);
        assert!((p.ratios()[l - 1] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn step_centres_are_evenly_spaced() {
        let s = KernelSpec::multi_step(36, 1.0, 0.5, 4).unwrap();
        let c: Vec<f64> = (1..=4).map(|j| s.step_center(j)).collect();
        assert_eq!(c, vec![4.5, 13.5, 22.5, 31.5]);
    }

    #[test]
    fn clipped_region_has_zero_gradient() {
        let s = KernelSpec::linear(10, 0.2, 0.5).unwrap();
        assert_eq!(s.eval(5).unwrap(), 0.0);
        assert_eq!(s.grad(5).unwrap(), KernelGrad::default());
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(KernelSpec::single_step(4, 2.0, 0.0, 1.0).is_err());
        assert!(KernelSpec::single_step(4, 2.0, 1.1, 1.0).is_err());
        assert!(KernelSpec::single_step(4, 2.0, 0.5, 0.0).is_err());
        assert!(KernelSpec::multi_step(4, 1.0, 0.5, 0).is_err());
        let s = KernelSpec::linear(4, 0.1, 0.5).unwrap();
        assert!(matches!(s.eval(0), Err(Error::LayerOutOfRange { .. })));
        assert!(matches!(s.eval(5), Err(Error::LayerOutOfRange { .. })));
    }

    #[test]
    fn grads_match_finite_differences_spot_checks() {
        let specs = [
            KernelSpec::single_step(16, 7.3, 0.35, 0.8).unwrap(),
            KernelSpec::exponential(16, 0.07, 0.9).unwrap(),
            KernelSpec::linear(16, 0.03, 0.95).unwrap(),
            KernelSpec::multi_step(16, 0.9, 0.25, 3).unwrap(),
        ];
        let h = 1e-5;
        for spec in specs {
            for i in 1..=16 {
                let g = spec.grad(i).unwrap();
                let theta = spec.params();
                for (p, analytic) in [(0usize, g.position), (1, g.ratio), (2, g.sharpness)] {
                    if p >= theta.len() {
                        continue;
                    }
                    let fd = central(
                        |x| {
                            let mut t = theta.clone();
                            t[p] = x;
                            spec.with_params(&t).raw(i)
                        },
                        theta[p],
                        h,
                    );
                    let scale = analytic.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        (fd - analytic).abs() / scale < 1e-6,
                        "{:?} layer {i} param {p}: fd={fd} an={analytic}",
                        spec.variant
                    );
                }
            }
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [
            KernelVariant::SingleStep,
            KernelVariant::Exponential,
            KernelVariant::Linear,
            KernelVariant::MultiStep,
        ] {
            assert_eq!(v.name().parse::<KernelVariant>().unwrap(), v);
        }
        assert!("spline".parse::<KernelVariant>().is_err());
    }
}
