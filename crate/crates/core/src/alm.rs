//! Augmented Lagrangian search for `min L(r) s.t. F(r) <= B`.
//!
//! The inequality is turned into an equality with a squared slack and the
//! slack is minimized out in closed form, leaving
//!
//! ```text
//! phi(r, w, lambda) = L(r) + (z^2 - w^2) / (2 lambda),  z = max(0, w - lambda (B - F(r)))
//! ```
//!
//! The outer loop alternates an inner gradient-descent solve of `phi` with the
//! penalty/multiplier updates. Inside the solver FLOPs are divided by the
//! unpruned cost so that `lambda`, `w` and the tolerance are scale-free.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cost_model::RetentionProfile;
use crate::error::{invalid, Error, Result};
use crate::kernels::KernelSpec;

/// A differentiable loss plus a differentiable cost over retention profiles.
///
/// Implementations must be pure: the same profile always yields the same values.
pub trait Evaluator {
    fn num_layers(&self) -> usize;

    /// Loss and its gradient with respect to the profile.
    fn loss_and_grad(&self, profile: &RetentionProfile) -> Result<(f64, Vec<f64>)>;

    fn flops(&self, profile: &RetentionProfile) -> Result<f64>;

    fn flops_grad(&self, profile: &RetentionProfile) -> Result<Vec<f64>>;

    fn full_flops(&self) -> Result<f64> {
        self.flops(&RetentionProfile::ones(self.num_layers()))
    }

    fn min_flops(&self) -> Result<f64> {
        self.flops(&RetentionProfile::zeros(self.num_layers()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlmConfig {
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub violation_decrease: f64,
    pub tolerance: f64,
    pub max_outer: usize,
    pub inner_steps: usize,
    pub inner_step_size: f64,
    pub initial_multiplier: f64,
    /// Penalty ceiling (normalized scale).
    pub penalty_cap: f64,
    /// Inner loop stops once the largest gradient entry falls below this.
    pub grad_tolerance: f64,
    pub max_halvings: usize,
    /// Outer iterations without inner progress before giving up.
    pub stall_limit: usize,
}

impl Default for AlmConfig {
    fn default() -> Self {
        Self {
            penalty_init: 100.0,
            penalty_growth: 5.0,
            violation_decrease: 0.5,
            tolerance: 0.005,
            max_outer: 20,
            inner_steps: 25,
            inner_step_size: 0.05,
            initial_multiplier: 0.0,
            penalty_cap: 1e8,
            grad_tolerance: 1e-9,
            max_halvings: 12,
            stall_limit: 3,
        }
    }
}

impl AlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty_init > 0.0) {
            return Err(invalid("lambda", "must be > 0"));
        }
        if !(self.penalty_growth > 1.0) {
            return Err(invalid("alpha", "must be > 1"));
        }
        if !(self.violation_decrease > 0.0 && self.violation_decrease < 1.0) {
            return Err(invalid("beta", "must lie in (0, 1)"));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid("eps", "must be > 0"));
        }
        if !(self.inner_step_size > 0.0) {
            return Err(invalid("inner_step_size", "must be > 0"));
        }
        if self.max_outer == 0 {
            return Err(invalid("max_outer", "must be >= 1"));
        }
        if !(self.initial_multiplier >= 0.0) {
            return Err(invalid("initial_multiplier", "must be >= 0"));
        }
        Ok(())
    }
}

/// Multiplier, penalty and violation history of the outer loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlmState {
    pub multiplier: f64,
    pub penalty: f64,
    pub iteration: usize,
    /// Scaled violations `|B - F(r^(k))| / (1 + B)` of each solved iterate.
    pub violation_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterDecision {
    /// `|B - F| < eps`.
    Converged,
    /// Feasible iterate whose penalty term is switched off (`z = 0`).
    ConvergedInactive,
    Continue,
}

impl AlmState {
    pub fn new(config: &AlmConfig) -> Self {
        Self {
            multiplier: config.initial_multiplier,
            penalty: config.penalty_init,
            iteration: 1,
            violation_history: Vec::new(),
        }
    }

    /// `z = max(0, w - lambda (B - F))`.
    pub fn z(&self, flops: f64, budget: f64) -> f64 {
        (self.multiplier - self.penalty * (budget - flops)).max(0.0)
    }

    /// Convergence test, penalty growth and multiplier update for iterate `k`.
    ///
    /// `flops` is `F(r^(k))` and `prev_flops` is `F(r^(k-1))`, both on the
    /// same scale as `budget`.
    pub fn advance(
        &mut self,
        budget: f64,
        flops: f64,
        prev_flops: f64,
        config: &AlmConfig,
    ) -> OuterDecision {
        let scale = 1.0 + budget;
        let violation = (budget - flops).abs() / scale;
        self.violation_history.push(violation);
        if violation < config.tolerance {
            return OuterDecision::Converged;
        }
        if flops < budget && self.z(flops, budget) == 0.0 {
            self.multiplier = 0.0;
            return OuterDecision::ConvergedInactive;
        }
        let prev = (budget - prev_flops).abs() / scale;
        if violation / prev >= config.violation_decrease {
            let grown = self.penalty * config.penalty_growth;
            if grown > config.penalty_cap {
                log::warn!(
                    "penalty capped at {} (would have grown to {grown})",
                    config.penalty_cap
                );
            }
            self.penalty = grown.min(config.penalty_cap);
        }
        // slack-form multiplier update; stays >= 0 for the inequality
        self.multiplier = (self.multiplier - self.penalty * (budget - flops)).max(0.0);
        self.iteration += 1;
        OuterDecision::Continue
    }
}

/// `phi(r, w, lambda)` from the loss and cost of `r`.
pub fn phi_eval(loss: f64, flops: f64, budget: f64, state: &AlmState) -> f64 {
    let z = state.z(flops, budget);
    let w = state.multiplier;
    loss + (z * z - w * w) / (2.0 * state.penalty)
}

/// `d phi / d r = dL/dr + z dF/dr`.
pub fn phi_grad(
    loss_grad: &[f64],
    flops_grad: &[f64],
    flops: f64,
    budget: f64,
    state: &AlmState,
) -> Result<Vec<f64>> {
    if loss_grad.len() != flops_grad.len() {
        return Err(Error::LengthMismatch {
            expected: loss_grad.len(),
            actual: flops_grad.len(),
        });
    }
    let z = state.z(flops, budget);
    Ok(loss_grad
        .iter()
        .zip(flops_grad)
        .map(|(l, f)| if z > 0.0 { l + z * f } else { *l })
        .collect())
}

/// How retention profiles are generated from optimizer parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// One free ratio per layer.
    Free,
    /// Parameters of a pruning kernel, starting from the given kernel.
    Kernel(KernelSpec),
}

impl Parameterization {
    pub fn initial(&self, num_layers: usize) -> Vec<f64> {
        match self {
            Parameterization::Free => vec![1.0; num_layers],
            Parameterization::Kernel(spec) => spec.params(),
        }
    }

    pub fn profile(&self, theta: &[f64]) -> RetentionProfile {
        match self {
            Parameterization::Free => RetentionProfile::clipped(theta.to_vec()),
            Parameterization::Kernel(spec) => spec.with_params(theta).profile(),
        }
    }

    pub fn pullback(&self, theta: &[f64], profile_grad: &[f64]) -> Vec<f64> {
        match self {
            Parameterization::Free => theta
                .iter()
                .zip(profile_grad)
                .map(|(t, g)| if (0.0..=1.0).contains(t) { *g } else { 0.0 })
                .collect(),
            Parameterization::Kernel(spec) => spec.with_params(theta).pullback(profile_grad),
        }
    }

    pub fn project(&self, theta: &mut [f64]) {
        match self {
            Parameterization::Free => theta.iter_mut().for_each(|t| *t = t.clamp(0.0, 1.0)),
            Parameterization::Kernel(spec) => spec.project_params(theta),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Parameterization::Free => "free",
            Parameterization::Kernel(spec) => spec.variant.name(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerStop {
    StepLimit,
    Stationary,
    NoDecrease,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerOutcome {
    pub theta: Vec<f64>,
    pub value: f64,
    pub accepted_steps: usize,
    pub evaluations: usize,
    /// Step size in effect when the loop ended.
    pub step_size: f64,
    pub stop: InnerStop,
}

/// Projected gradient descent with step halving.
///
/// A trial step is accepted when it strictly lowers the objective; otherwise
/// the step is halved up to `max_halvings` times. Accepted steps grow the step
/// by 25%. The objective returns `(value, gradient)`.
pub fn inner_solve<F, P>(
    mut objective: F,
    project: P,
    warm_start: Vec<f64>,
    step_size: f64,
    config: &AlmConfig,
) -> Result<InnerOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    P: Fn(&mut [f64]),
{
    let mut theta = warm_start;
    let (mut value, mut grad) = objective(&theta)?;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("inner objective {value} at start")));
    }
    let mut evaluations = 1;
    let mut accepted_steps = 0;
    let mut eta = step_size;
    let mut stop = InnerStop::StepLimit;

    'outer: for _ in 0..config.inner_steps {
        if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) <= config.grad_tolerance {
            stop = InnerStop::Stationary;
            break;
        }
        for _ in 0..=config.max_halvings {
            let mut trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - eta * g).collect();
            project(&mut trial);
            if trial == theta {
                stop = InnerStop::Stationary;
                break 'outer;
            }
            let (v, g) = objective(&trial)?;
            evaluations += 1;
            if v.is_finite() && v < value && g.iter().all(|x| x.is_finite()) {
                theta = trial;
                value = v;
                grad = g;
                accepted_steps += 1;
                eta *= 1.25;
                continue 'outer;
            }
            eta *= 0.5;
        }
        stop = InnerStop::NoDecrease;
        break;
    }

    Ok(InnerOutcome {
        theta,
        value,
        accepted_steps,
        evaluations,
        step_size: eta,
        stop,
    })
}

/// One record per outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub lambda: f64,
    pub w: f64,
    pub loss: f64,
    pub flops: f64,
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub profile: RetentionProfile,
    /// Multiplier `w` on the normalized constraint `F / F_full <= B / F_full`.
    pub multiplier: f64,
    pub penalty: f64,
    pub loss: f64,
    pub flops: f64,
    pub budget: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    /// Optimizer parameters of the returned profile.
    pub parameters: Vec<f64>,
    /// Loss/gradient evaluations spent, including the starting point.
    pub evaluations: usize,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub result: SearchResult,
    pub trace: Vec<TraceRecord>,
}

/// Loss, normalized cost and their gradients at `profile`.
struct Point {
    loss: f64,
    loss_grad: Vec<f64>,
    flops: f64,
    flops_grad: Vec<f64>,
}

fn evaluate<E: Evaluator + ?Sized>(eval: &E, profile: &RetentionProfile, full: f64) -> Result<Point> {
    let (loss, loss_grad) = eval.loss_and_grad(profile)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    let flops = eval.flops(profile)? / full;
    let flops_grad = eval.flops_grad(profile)?.into_iter().map(|g| g / full).collect();
    Ok(Point {
        loss,
        loss_grad,
        flops,
        flops_grad,
    })
}

/// Runs the augmented Lagrangian outer loop against an absolute budget.
pub fn outer_loop<E: Evaluator + ?Sized>(
    eval: &E,
    param: &Parameterization,
    budget: f64,
    config: &AlmConfig,
) -> Result<SearchOutcome> {
    config.validate()?;
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(invalid("budget", format!("must be > 0, got {budget}")));
    }
    let layers = eval.num_layers();
    let full = eval.full_flops()?;
    let minimum = eval.min_flops()?;
    if budget < minimum {
        return Err(Error::Infeasible { budget, minimum });
    }
    let b = budget / full;

    let mut theta = param.initial(layers);
    param.project(&mut theta);
    let mut prev_flops = eval.flops(&param.profile(&theta))? / full;
    let mut state = AlmState::new(config);
    let mut trace = Vec::new();
    let mut diagnostics = Vec::new();
    let mut evaluations = 0;
    let mut step = config.inner_step_size;
    let mut stalled = 0;
    let mut converged = false;
    let mut last: Option<Point> = None;

    for _ in 0..config.max_outer {
        let snapshot = state.clone();
        let inner = inner_solve(
            |t: &[f64]| {
                let profile = param.profile(t);
                let p = evaluate(eval, &profile, full)?;
                let value = phi_eval(p.loss, p.flops, b, &snapshot);
                let g = phi_grad(&p.loss_grad, &p.flops_grad, p.flops, b, &snapshot)?;
                Ok((value, param.pullback(t, &g)))
            },
            |t: &mut [f64]| param.project(t),
            theta.clone(),
            step,
            config,
        )?;
        evaluations += inner.evaluations;
        // keep the step from collapsing permanently after a penalty jump
        step = inner.step_size.max(config.inner_step_size * 1e-3);
        theta = inner.theta;

        let profile = param.profile(&theta);
        let point = evaluate(eval, &profile, full)?;
        trace.push(TraceRecord {
            k: state.iteration,
            lambda: state.penalty,
            w: state.multiplier,
            loss: point.loss,
            flops: point.flops * full,
            violation: (b - point.flops).abs() / (1.0 + b),
        });

        let decision = state.advance(b, point.flops, prev_flops, config);
        let flops_k = point.flops;
        last = Some(point);
        match decision {
            OuterDecision::Converged | OuterDecision::ConvergedInactive => {
                converged = true;
                break;
            }
            OuterDecision::Continue => {}
        }
        if state.penalty >= config.penalty_cap {
            diagnostics.push(format!("penalty reached cap {}", config.penalty_cap));
        }
        stalled = if inner.accepted_steps == 0 { stalled + 1 } else { 0 };
        if stalled >= config.stall_limit {
            diagnostics.push(format!("no inner progress for {stalled} outer iterations"));
            break;
        }
        prev_flops = flops_k;
    }
    if !converged && diagnostics.is_empty() {
        diagnostics.push(format!("outer iteration limit {} reached", config.max_outer));
    }

    let profile = param.profile(&theta);
    let point = match last {
        Some(p) => p,
        None => evaluate(eval, &profile, full)?,
    };
    // the last record's w is the multiplier that produced the returned iterate
    let multiplier = if converged && state.multiplier == 0.0 {
        0.0
    } else {
        trace.last().map(|t| t.w).unwrap_or(state.multiplier)
    };
    Ok(SearchOutcome {
        result: SearchResult {
            profile,
            multiplier,
            penalty: trace.last().map(|t| t.lambda).unwrap_or(state.penalty),
            loss: point.loss,
            flops: point.flops * full,
            budget,
            converged,
            outer_iterations: trace.len(),
            parameters: theta,
            evaluations,
            diagnostics,
        },
        trace,
    })
}

/// First- and second-order optimality diagnostics at a search result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `max_i |dL/dr_i + z dF/dr_i|` on the normalized scale.
    pub stationarity: f64,
    /// `max(0, F - B)` on the normalized scale.
    pub violation: f64,
    /// `|w (B - F)|` on the normalized scale.
    pub complementarity: f64,
    /// Smallest eigenvalue of a finite-difference Hessian of `phi(., w, lambda)`.
    pub hessian_min_eig: f64,
}

pub fn kkt_check<E: Evaluator + ?Sized>(result: &SearchResult, eval: &E) -> Result<KktReport> {
    kkt_check_at(
        &result.profile,
        result.multiplier,
        result.penalty,
        eval,
        result.budget,
    )
}

/// Same as [`kkt_check`] at an explicit point, multiplier and penalty.
pub fn kkt_check_at<E: Evaluator + ?Sized>(
    profile: &RetentionProfile,
    multiplier: f64,
    penalty: f64,
    eval: &E,
    budget: f64,
) -> Result<KktReport> {
    let full = eval.full_flops()?;
    let b = budget / full;
    let state = AlmState {
        multiplier,
        penalty,
        iteration: 0,
        violation_history: Vec::new(),
    };
    let p = evaluate(eval, profile, full)?;
    let grad = phi_grad(&p.loss_grad, &p.flops_grad, p.flops, b, &state)?;
    let stationarity = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let violation = (p.flops - b).max(0.0);
    let complementarity = (multiplier * (b - p.flops)).abs();

    let n = profile.len();
    let h = 1e-5;
    let grad_at = |r: &[f64]| -> Result<Vec<f64>> {
        let prof = RetentionProfile::new(r.to_vec())?;
        let q = evaluate(eval, &prof, full)?;
        phi_grad(&q.loss_grad, &q.flops_grad, q.flops, b, &state)
    };
    let mut hess = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let centre = profile.ratios()[j].clamp(h, 1.0 - h);
        let mut up = profile.ratios().to_vec();
        let mut dn = up.clone();
        up[j] = centre + h;
        dn[j] = centre - h;
        let gu = grad_at(&up)?;
        let gd = grad_at(&dn)?;
        for i in 0..n {
            hess[(i, j)] = (gu[i] - gd[i]) / (2.0 * h);
        }
    }
    let sym = (&hess + hess.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let hessian_min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);

    Ok(KktReport {
        stationarity,
        violation,
        complementarity,
        hessian_min_eig,
    })
}

/// Writes one JSON object per line.
pub fn write_trace_jsonl<W: Write>(mut out: W, trace: &[TraceRecord]) -> Result<()> {
    for rec in trace {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace_jsonl(text: &str) -> Result<Vec<TraceRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
