//! [`Evaluator`] implementations: the toy VLM with the transformer cost model,
//! and separable quadratic test problems with linear cost.

use crate::alm::Evaluator;
use crate::cost_model::{CostModelParams, RetentionProfile};
use crate::error::{invalid, Error, Result};
use crate::relaxation::RelaxationConfig;
use crate::toy_vlm::{MaskMode, ToyInstance};

/// Distillation loss of a toy instance priced by the transformer cost model.
#[derive(Debug, Clone)]
pub struct ToyEvaluator<'a> {
    pub instance: &'a ToyInstance,
    pub cost: CostModelParams,
    pub relax: RelaxationConfig,
    pub mode: MaskMode,
}

impl<'a> ToyEvaluator<'a> {
    pub fn new(
        instance: &'a ToyInstance,
        cost: CostModelParams,
        relax: RelaxationConfig,
        mode: MaskMode,
    ) -> Result<Self> {
        relax.validate()?;
        if cost.num_layers != instance.num_layers() {
            return Err(Error::Mismatch(format!(
                "cost model has {} layers, instance has {}",
                cost.num_layers,
                instance.num_layers()
            )));
        }
        if cost.n_visual != instance.n_visual() as u64 {
            return Err(Error::Mismatch(format!(
                "cost model has {} visual tokens, instance has {}",
                cost.n_visual,
                instance.n_visual()
            )));
        }
        Ok(Self {
            instance,
            cost,
            relax,
            mode,
        })
    }
}

impl Evaluator for ToyEvaluator<'_> {
    fn num_layers(&self) -> usize {
        self.instance.num_layers()
    }

    fn loss_and_grad(&self, profile: &RetentionProfile) -> Result<(f64, Vec<f64>)> {
        self.instance
            .loss_grad_wrt_profile(profile, &self.relax, self.mode)
    }

    fn flops(&self, profile: &RetentionProfile) -> Result<f64> {
        self.cost.flops_total(profile)
    }

    fn flops_grad(&self, profile: &RetentionProfile) -> Result<Vec<f64>> {
        self.cost.flops_grad(profile)
    }
}

/// `L(r) = sum_i a_i (r_i - t_i)^2` with cost `F(r) = sum_i c_i r_i`.
///
/// Curvatures `a_i` may be negative, which makes the loss indefinite while the
/// constrained problem can still have a strict local minimum.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    pub curvature: Vec<f64>,
    pub target: Vec<f64>,
    pub cost: Vec<f64>,
}

impl QuadraticProblem {
    pub fn new(curvature: Vec<f64>, target: Vec<f64>, cost: Vec<f64>) -> Result<Self> {
        let n = curvature.len();
        if n == 0 {
            return Err(Error::Empty("quadratic problem"));
        }
        if target.len() != n || cost.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: if target.len() != n { target.len() } else { cost.len() },
            });
        }
        if cost.iter().any(|&c| !(c > 0.0)) {
            return Err(invalid("cost", "coefficients must be > 0"));
        }
        Ok(Self {
            curvature,
            target,
            cost,
        })
    }

    /// `sum_i (r_i - 1)^2` with the given positive costs.
    pub fn unit_targets(cost: Vec<f64>) -> Result<Self> {
        let n = cost.len();
        Self::new(vec![1.0; n], vec![1.0; n], cost)
    }

    pub fn loss(&self, r: &[f64]) -> f64 {
        self.curvature
            .iter()
            .zip(&self.target)
            .zip(r)
            .map(|((a, t), x)| a * (x - t) * (x - t))
            .sum()
    }

    fn check(&self, profile: &RetentionProfile) -> Result<()> {
        if profile.len() != self.cost.len() {
            return Err(Error::LengthMismatch {
                expected: self.cost.len(),
                actual: profile.len(),
            });
        }
        Ok(())
    }
}

impl Evaluator for QuadraticProblem {
    fn num_layers(&self) -> usize {
        self.cost.len()
    }

    fn loss_and_grad(&self, profile: &RetentionProfile) -> Result<(f64, Vec<f64>)> {
        self.check(profile)?;
        let r = profile.ratios();
        let grad = self
            .curvature
            .iter()
            .zip(&self.target)
            .zip(r)
            .map(|((a, t), x)| 2.0 * a * (x - t))
            .collect();
        Ok((self.loss(r), grad))
    }

    fn flops(&self, profile: &RetentionProfile) -> Result<f64> {
        self.check(profile)?;
        Ok(self.cost.iter().zip(profile.ratios()).map(|(c, r)| c * r).sum())
    }

    fn flops_grad(&self, profile: &RetentionProfile) -> Result<Vec<f64>> {
        self.check(profile)?;
        Ok(self.cost.clone())
    }
}
