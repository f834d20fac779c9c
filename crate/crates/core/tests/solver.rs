use prune_pareto::alm::{kkt_check, kkt_check_at, outer_loop, AlmConfig, Evaluator, Parameterization};
use prune_pareto::cost_model::{Budget, CostModelParams, RetentionProfile};
use prune_pareto::error::Result;
use prune_pareto::experiment::{parameterization_for, KernelChoice};
use prune_pareto::kernels::KernelVariant;
use prune_pareto::pareto::{dominates, evaluate_discrete, sample_grid};
use prune_pareto::problems::{QuadraticProblem, ToyEvaluator};
use prune_pareto::relaxation::RelaxationConfig;
use prune_pareto::toy_vlm::{InstanceFixture, MaskMode, ToyInstance, ToyModelSpec};

fn tight() -> AlmConfig {
    AlmConfig {
        tolerance: 1e-5,
        inner_steps: 500,
        ..AlmConfig::default()
    }
}

/// Indefinite loss whose constrained minimum is still strict.
fn saddle_problem() -> QuadraticProblem {
    QuadraticProblem::new(vec![1.0, -0.25], vec![1.0, 0.2], vec![1.0, 1.0]).unwrap()
}

#[test]
fn binding_quadratic_reaches_kkt_point() {
    let p = QuadraticProblem::unit_targets(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = outer_loop(&p, &Parameterization::Free, 7.0, &tight()).unwrap();
    let r = &out.result;
    assert!(r.converged);
    for (x, e) in r.profile.ratios().iter().zip([0.9, 0.8, 0.7, 0.6]) {
        assert!((x - e).abs() < 1e-3, "{:?}", r.profile);
    }
    // normalized multiplier = absolute multiplier * full cost
    assert!((r.multiplier / 10.0 - 0.2).abs() < 1e-3, "{}", r.multiplier);
    let kkt = kkt_check(r, &p).unwrap();
    assert!(kkt.hessian_min_eig > 0.0);
}

#[test]
fn slack_budget_returns_unconstrained_optimum() {
    let p = QuadraticProblem::new(vec![1.0; 4], vec![0.5; 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = outer_loop(&p, &Parameterization::Free, 7.0, &tight()).unwrap();
    let r = &out.result;
    assert!(r.converged);
    assert!(r.multiplier <= 1e-3);
    for x in r.profile.ratios() {
        assert!((x - 0.5).abs() < 1e-3, "{:?}", r.profile);
    }
}

#[test]
fn penalty_stabilizes_and_saddle_is_resolved() {
    let p = saddle_problem();
    let out = outer_loop(&p, &Parameterization::Free, 1.5, &tight()).unwrap();
    let r = &out.result;
    assert!(r.converged);
    assert!((r.profile.ratios()[0] - 0.9).abs() < 1e-3);
    assert!((r.profile.ratios()[1] - 0.6).abs() < 1e-3);
    let lambdas: Vec<f64> = out.trace.iter().map(|t| t.lambda).collect();
    assert!(lambdas.windows(2).all(|w| w[1] >= w[0]));
    assert!(r.penalty < 1e8, "penalty ran away: {lambdas:?}");
}

#[test]
fn hessian_sign_follows_penalty_threshold() {
    let p = saddle_problem();
    let profile = RetentionProfile::new(vec![0.9, 0.6]).unwrap();
    // multiplier 0.2 on the absolute cost, 0.4 on the normalized one
    let at = |lambda: f64| kkt_check_at(&profile, 0.4, lambda, &p, 1.5).unwrap();
    // positive definite iff lambda > 8/3 on the normalized scale
    assert!(at(2.0).hessian_min_eig < 0.0);
    assert!(at(3.0).hessian_min_eig > 0.0);
    let r = at(1e-3);
    assert!(r.hessian_min_eig < -0.4);
    assert!(r.stationarity < 1e-9);
}

/// Constant cost with zero gradients: inner solves never move, so the
/// trace exposes the raw multiplier and penalty updates.
struct ConstantCost {
    cost: f64,
}

impl Evaluator for ConstantCost {
    fn num_layers(&self) -> usize {
        1
    }
    fn loss_and_grad(&self, _: &RetentionProfile) -> Result<(f64, Vec<f64>)> {
        Ok((0.0, vec![0.0]))
    }
    fn flops(&self, _: &RetentionProfile) -> Result<f64> {
        Ok(self.cost)
    }
    fn flops_grad(&self, _: &RetentionProfile) -> Result<Vec<f64>> {
        Ok(vec![0.0])
    }
    fn full_flops(&self) -> Result<f64> {
        Ok(1.0)
    }
    fn min_flops(&self) -> Result<f64> {
        Ok(0.0)
    }
}

#[test]
fn scripted_trace_matches_update_rules() {
    let cfg = AlmConfig {
        penalty_init: 2.0,
        penalty_growth: 3.0,
        max_outer: 6,
        stall_limit: 100,
        ..AlmConfig::default()
    };
    let eval = ConstantCost { cost: 0.8 };
    let out = outer_loop(&eval, &Parameterization::Free, 0.5, &cfg).unwrap();
    assert!(!out.result.converged);
    assert_eq!(out.trace.len(), 6);
    // the violation never shrinks, so the penalty grows every iteration
    // (the first comparison is against the starting iterate, also at 0.8)
    let (mut w, mut lam) = (0.0, 2.0);
    for (k, t) in out.trace.iter().enumerate() {
        assert_eq!(t.k, k + 1);
        assert_eq!(t.lambda, lam);
        assert_eq!(t.w, w);
        lam *= 3.0;
        w = (w - lam * (0.5 - 0.8f64)).max(0.0);
    }
}

#[test]
fn stall_limit_stops_early() {
    let eval = ConstantCost { cost: 0.8 };
    let out = outer_loop(&eval, &Parameterization::Free, 0.5, &AlmConfig::default()).unwrap();
    assert_eq!(out.trace.len(), 3);
    assert!(out.result.diagnostics.iter().any(|d| d.contains("no inner progress")));
}

#[test]
fn inactive_budget_on_constant_cost_converges_with_zero_multiplier() {
    let eval = ConstantCost { cost: 0.2 };
    let out = outer_loop(&eval, &Parameterization::Free, 0.5, &AlmConfig::default()).unwrap();
    assert!(out.result.converged);
    assert_eq!(out.result.multiplier, 0.0);
    assert_eq!(out.trace.len(), 1);
}

fn standard() -> (ToyInstance, CostModelParams) {
    (
        ToyInstance::generate(ToyModelSpec::new(1, 8, 64, 4)).unwrap(),
        CostModelParams::new(4, 64, 64, 8).unwrap(),
    )
}

#[test]
fn converged_toy_results_are_feasible() {
    let (inst, cost) = standard();
    let cfg = AlmConfig::default();
    for mode in [MaskMode::HardSte, MaskMode::Soft] {
        let eval = ToyEvaluator::new(&inst, cost, RelaxationConfig::default(), mode).unwrap();
        for frac in [0.9, 0.5, 0.2] {
            let budget = cost.resolve_budget(Budget::Fraction(frac)).unwrap();
            let r = outer_loop(&eval, &Parameterization::Free, budget, &cfg).unwrap().result;
            if r.converged {
                let full = cost.full_flops();
                let (f, b) = (r.flops / full, budget / full);
                assert!(f <= b + cfg.tolerance * (1.0 + b), "{mode:?} {frac}: {f} > {b}");
            }
        }
    }
}

#[test]
fn toy_searches_are_near_the_grid_frontier() {
    let (inst, cost) = standard();
    let grid: Vec<_> = sample_grid(8, 700, 1)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, p)| evaluate_discrete(&inst, p, &cost, format!("g{i}")).unwrap())
        .collect();
    let eval = ToyEvaluator::new(&inst, cost, RelaxationConfig::default(), MaskMode::HardSte).unwrap();
    for frac in [0.8, 0.6, 0.4] {
        let budget = cost.resolve_budget(Budget::Fraction(frac)).unwrap();
        let r = outer_loop(&eval, &Parameterization::Free, budget, &AlmConfig::default())
            .unwrap()
            .result;
        assert!(r.converged);
        let d = evaluate_discrete(&inst, &r.profile, &cost, "search").unwrap();
        // relaxing performance by 0.02, no grid point may dominate the result
        let lifted = prune_pareto::pareto::EvalPoint {
            performance: (d.performance + 0.02).min(1.0),
            ..d.clone()
        };
        assert!(!grid.iter().any(|g| dominates(g, &lifted)), "{frac}");
    }
}

#[test]
fn kernel_searches_stay_feasible() {
    let (inst, cost) = standard();
    let eval = ToyEvaluator::new(&inst, cost, RelaxationConfig::default(), MaskMode::HardSte).unwrap();
    let budget = cost.resolve_budget(Budget::Fraction(0.6)).unwrap();
    for v in [
        KernelVariant::SingleStep,
        KernelVariant::Exponential,
        KernelVariant::Linear,
        KernelVariant::MultiStep,
    ] {
        let param = parameterization_for(KernelChoice::Kernel(v), 8, 4).unwrap();
        let r = outer_loop(&eval, &param, budget, &AlmConfig::default()).unwrap().result;
        assert!(r.converged, "{v:?}");
        let b = budget / cost.full_flops();
        let f = r.flops / cost.full_flops();
        assert!(f <= b + 0.005 * (1.0 + b), "{v:?}: {f} vs {b}");
        for w in r.profile.ratios().windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{v:?} profile {:?}", r.profile);
        }
    }
}

#[test]
fn golden_instance_fixture() {
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/instance_seed1_L2_N4_C2.json"
    ))
    .unwrap();
    let stored: InstanceFixture = serde_json::from_str(&text).unwrap();
    let fresh = ToyInstance::generate(ToyModelSpec::new(1, 2, 4, 2)).unwrap();
    assert_eq!(fresh.to_fixture(), stored);
    assert_eq!(ToyInstance::from_fixture(&stored).unwrap(), fresh);
}

#[test]
fn selection_count_monotone_on_many_vectors() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let cfg = RelaxationConfig::default();
    for _ in 0..1000 {
        let n = rng.gen_range(1..200);
        let scores = prune_pareto::TokenScores::new((0..n).map(|_| rng.gen()).collect()).unwrap();
        let mut last = 0;
        for step in 0..=50 {
            let r = step as f64 / 50.0;
            let tau = prune_pareto::relaxation::soft_threshold(&scores, r * n as f64, &cfg).unwrap();
            let count = prune_pareto::relaxation::build_masks(&scores, tau, &cfg).retained();
            assert!(count >= last);
            last = count;
        }
    }
}

#[test]
fn multistep_cannot_reach_tight_budgets() {
    // with step centres at layers 1, 3, 5 and 7 the first layers always keep
    // most of their tokens, so the family cannot reach 30% of the full cost
    let (inst, cost) = standard();
    let eval = ToyEvaluator::new(&inst, cost, RelaxationConfig::default(), MaskMode::HardSte).unwrap();
    let budget = cost.resolve_budget(Budget::Fraction(0.3)).unwrap();
    let param = parameterization_for(KernelChoice::Kernel(KernelVariant::MultiStep), 8, 4).unwrap();
    let r = outer_loop(&eval, &param, budget, &AlmConfig::default()).unwrap().result;
    assert!(!r.converged);
    assert!(r.flops > budget);
}

#[test]
fn warm_start_needs_fewer_inner_evaluations() {
    use prune_pareto::alm::{inner_solve, phi_eval, phi_grad, AlmState};
    let p = QuadraticProblem::unit_targets(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let cfg = AlmConfig {
        penalty_init: 1.0,
        inner_steps: 5000,
        grad_tolerance: 1e-7,
        ..AlmConfig::default()
    };
    let budget = 7.0;
    let solve = |state: &AlmState, start: Vec<f64>| {
        inner_solve(
            |r: &[f64]| {
                let prof = RetentionProfile::clipped(r.to_vec());
                let (l, g) = p.loss_and_grad(&prof)?;
                let f = p.flops(&prof)?;
                let fg = p.flops_grad(&prof)?;
                Ok((phi_eval(l, f, budget, state), phi_grad(&g, &fg, f, budget, state)?))
            },
            |r: &mut [f64]| r.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0)),
            start,
            cfg.inner_step_size,
            &cfg,
        )
        .unwrap()
    };
    let mut state = AlmState::new(&cfg);
    let first = solve(&state, vec![1.0; 4]);
    let f1 = p.flops(&RetentionProfile::clipped(first.theta.clone())).unwrap();
    state.advance(budget, f1, 10.0, &cfg);
    let warm = solve(&state, first.theta.clone());
    let cold = solve(&state, vec![1.0; 4]);
    assert!(
        warm.evaluations < cold.evaluations,
        "warm {} vs cold {}",
        warm.evaluations,
        cold.evaluations
    );
}
