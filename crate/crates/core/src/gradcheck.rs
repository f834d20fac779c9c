//! Central-difference checks of every analytic gradient in the crate.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alm::{phi_eval, phi_grad, AlmState, Evaluator};
use crate::cost_model::RetentionProfile;
use crate::error::{invalid, Error, Result};
use crate::kernels::{KernelSpec, KernelVariant};
use crate::problems::QuadraticProblem;
use crate::relaxation::{
    build_masks, soft_threshold, soft_threshold_grad, ste_backward, RelaxationConfig, TokenScores,
};
use crate::toy_vlm::{distill_loss, MaskMode, ToyInstance, ToyModelSpec};

pub fn central_diff<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Kernels,
    SoftThreshold,
    SteBackward,
    ToyChain,
    PhiGrad,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Kernels,
        Suite::SoftThreshold,
        Suite::SteBackward,
        Suite::ToyChain,
        Suite::PhiGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Kernels => "kernels",
            Suite::SoftThreshold => "soft-threshold",
            Suite::SteBackward => "ste-backward",
            Suite::ToyChain => "toy-chain",
            Suite::PhiGrad => "phi-grad",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| invalid("suite", format!("unknown gradient suite `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub instances: usize,
    pub checks: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checks > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Random instances per suite.
    pub instances: usize,
    pub relax: RelaxationConfig,
    /// Scales the analytic gradient of one suite by 1.01 so the check must fail.
    pub corrupt: Option<Suite>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            relax: RelaxationConfig::default(),
            corrupt: None,
        }
    }
}

struct Tally {
    suite: Suite,
    tolerance: f64,
    floor: f64,
    corrupt: bool,
    checks: usize,
    failures: usize,
    max: f64,
}

impl Tally {
    fn new(suite: Suite, tolerance: f64, floor: f64, cfg: &GradCheckConfig) -> Self {
        Self {
            suite,
            tolerance,
            floor,
            corrupt: cfg.corrupt == Some(suite),
            checks: 0,
            failures: 0,
            max: 0.0,
        }
    }

    fn check(&mut self, analytic: f64, numeric: f64) {
        let a = if self.corrupt { analytic * 1.01 } else { analytic };
        let e = rel_error(a, numeric, self.floor);
        self.checks += 1;
        self.max = self.max.max(e);
        if !(e <= self.tolerance) {
            self.failures += 1;
        }
    }

    fn report(self, instances: usize) -> SuiteReport {
        SuiteReport {
            suite: self.suite,
            instances,
            checks: self.checks,
            failures: self.failures,
            max_rel_error: self.max,
            tolerance: self.tolerance,
        }
    }
}

fn rng_for(cfg: &GradCheckConfig, suite: Suite) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed ^ ((suite as u64 + 1) << 32))
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Result<TokenScores> {
    TokenScores::new((0..n).map(|_| rng.gen::<f64>()).collect())
}

/// Random kernel with parameters chosen so most layers stay unclipped.
pub fn random_kernel(rng: &mut ChaCha8Rng) -> Result<KernelSpec> {
    let l = rng.gen_range(4..=48);
    let lf = l as f64;
    match rng.gen_range(0..4) {
        0 => KernelSpec::single_step(
            l,
            rng.gen_range(1.0..lf),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.2..3.0),
        ),
        1 => KernelSpec::exponential(l, rng.gen_range(0.0..2.0 / lf), rng.gen_range(0.2..1.0)),
        2 => KernelSpec::linear(l, rng.gen_range(0.0..0.8 / lf), rng.gen_range(0.85..1.0)),
        _ => KernelSpec::multi_step(
            l,
            rng.gen_range(0.2..3.0),
            rng.gen_range(0.05..0.95),
            rng.gen_range(1..=6),
        ),
    }
}

fn kernels_suite(cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = rng_for(cfg, Suite::Kernels);
    let mut t = Tally::new(Suite::Kernels, 1e-5, 1e-3, cfg);
    let h = 1e-5;
    for _ in 0..cfg.instances {
        let spec = random_kernel(&mut rng)?;
        let theta = spec.params();
        for i in 1..=spec.num_layers {
            let raw = spec.raw(i);
            if !(0.01..=0.99).contains(&raw) {
                continue;
            }
            let g = spec.grad(i)?;
            let analytic = [g.position, g.ratio, g.sharpness];
            for p in 0..theta.len() {
                let fd = central_diff(
                    |x| {
                        let mut th = theta.clone();
                        th[p] = x;
                        spec.with_params(&th).raw(i)
                    },
                    theta[p],
                    h,
                );
                t.check(analytic[p], fd);
            }
            if spec.variant == KernelVariant::MultiStep || spec.variant == KernelVariant::Linear {
                // sharpness is not a parameter of these variants
                debug_assert_eq!(g.sharpness, 0.0);
            }
        }
    }
    Ok(t.report(cfg.instances))
}

fn soft_threshold_suite(cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = rng_for(cfg, Suite::SoftThreshold);
    let mut t = Tally::new(Suite::SoftThreshold, 1e-5, 1e-6, cfg);
    let h = 1e-6;
    for _ in 0..cfg.instances {
        let n = rng.gen_range(4..=200);
        let scores = random_scores(&mut rng, n)?;
        let relax = RelaxationConfig::new(rng.gen_range(0.5..20.0), cfg.relax.temperature)?;
        let r = rng.gen_range(0.05..0.95);
        let nf = n as f64;
        let fd = central_diff(
            |x| soft_threshold(&scores, x * nf, &relax).unwrap_or(f64::NAN),
            r,
            h,
        );
        t.check(soft_threshold_grad(&scores, r * nf, &relax, n)?, fd);
    }
    Ok(t.report(cfg.instances))
}

fn ste_suite(cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = rng_for(cfg, Suite::SteBackward);
    let mut t = Tally::new(Suite::SteBackward, 1e-5, 1e-6, cfg);
    let h = 1e-6;
    for _ in 0..cfg.instances {
        let n = rng.gen_range(2..=64);
        let scores = random_scores(&mut rng, n)?;
        let tau = rng.gen_range(scores.min()..=scores.max());
        let upstream: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let relax = cfg.relax;
        let masks = build_masks(&scores, tau, &relax);
        let surrogate = |x: f64| -> f64 {
            build_masks(&scores, x, &relax)
                .soft
                .iter()
                .zip(&upstream)
                .map(|(m, g)| m * g)
                .sum()
        };
        let fd = central_diff(surrogate, tau, h);
        t.check(ste_backward(&upstream, &masks, &relax)?, fd);
    }
    Ok(t.report(cfg.instances))
}

fn toy_chain_suite(cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = rng_for(cfg, Suite::ToyChain);
    let mut t = Tally::new(Suite::ToyChain, 1e-4, 1e-6, cfg);
    let h = 1e-5;
    for _ in 0..cfg.instances {
        let spec = ToyModelSpec::new(
            rng.gen(),
            rng.gen_range(1..=6),
            rng.gen_range(8..=64),
            rng.gen_range(2..=5),
        );
        let inst = ToyInstance::generate(spec)?;
        let ratios: Vec<f64> = (0..spec.num_layers).map(|_| rng.gen_range(0.05..0.95)).collect();
        let profile = RetentionProfile::new(ratios.clone())?;
        let (_, grad) = inst.loss_grad_wrt_profile(&profile, &cfg.relax, MaskMode::Soft)?;
        for i in 0..spec.num_layers {
            let fd = central_diff(
                |x| {
                    let mut r = ratios.clone();
                    r[i] = x;
                    RetentionProfile::new(r)
                        .and_then(|p| inst.forward(&p, &cfg.relax, MaskMode::Soft))
                        .map(|pair| distill_loss(&pair))
                        .unwrap_or(f64::NAN)
                },
                ratios[i],
                h,
            );
            t.check(grad[i], fd);
        }
    }
    Ok(t.report(cfg.instances))
}

fn phi_grad_suite(cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = rng_for(cfg, Suite::PhiGrad);
    let mut t = Tally::new(Suite::PhiGrad, 1e-6, 1e-6, cfg);
    let h = 1e-6;
    let mut done = 0;
    while done < cfg.instances {
        let n = rng.gen_range(1..=8);
        let problem = QuadraticProblem::new(
            (0..n).map(|_| rng.gen_range(-1.0..2.0)).collect(),
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            (0..n).map(|_| rng.gen_range(0.1..2.0)).collect(),
        )?;
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..0.9)).collect();
        let profile = RetentionProfile::new(r.clone())?;
        let budget = rng.gen_range(0.0..n as f64);
        let state = AlmState {
            multiplier: rng.gen_range(0.0..3.0),
            penalty: rng.gen_range(0.5..20.0),
            iteration: 1,
            violation_history: vec![],
        };
        let flops = problem.flops(&profile)?;
        // stay away from the z = 0 kink
        let pre = state.multiplier - state.penalty * (budget - flops);
        if pre.abs() < 1e-2 {
            continue;
        }
        let (_, lg) = problem.loss_and_grad(&profile)?;
        let fg = problem.flops_grad(&profile)?;
        let g = phi_grad(&lg, &fg, flops, budget, &state)?;
        for i in 0..n {
            let fd = central_diff(
                |x| {
                    let mut rr = r.clone();
                    rr[i] = x;
                    let p = RetentionProfile::clipped(rr);
                    let loss = problem.loss(p.ratios());
                    let f = problem.flops(&p).unwrap_or(f64::NAN);
                    phi_eval(loss, f, budget, &state)
                },
                r[i],
                h,
            );
            t.check(g[i], fd);
        }
        done += 1;
    }
    Ok(t.report(cfg.instances))
}

pub fn run_suite(suite: Suite, cfg: &GradCheckConfig) -> Result<SuiteReport> {
    cfg.relax.validate()?;
    match suite {
        Suite::Kernels => kernels_suite(cfg),
        Suite::SoftThreshold => soft_threshold_suite(cfg),
        Suite::SteBackward => ste_suite(cfg),
        Suite::ToyChain => toy_chain_suite(cfg),
        Suite::PhiGrad => phi_grad_suite(cfg),
    }
}

pub fn run_all(cfg: &GradCheckConfig) -> Result<Vec<SuiteReport>> {
    Suite::ALL.into_iter().map(|s| run_suite(s, cfg)).collect()
}
