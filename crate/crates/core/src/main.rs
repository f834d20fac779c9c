use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use log::error;

use prune_pareto::experiment::{
    run_check_grads, run_compare, run_frontier, run_grid, run_search, Command, KernelChoice,
    RunManifest, SearchStatus,
};
use prune_pareto::{Error, MaskMode, Result};

/// Budgeted visual-token pruning search and grid-search frontier tools.
///
/// Settings are resolved as: flags, then PRUNE_PARETO_* environment
/// variables, then the manifest file, then built-in defaults.
#[derive(Debug, Parser)]
#[command(name = "prune-pareto", version)]
struct Cli {
    /// search, grid, frontier, compare or check-grads (overrides the manifest)
    command: Option<String>,

    /// Manifest file, JSON or `key = value` lines.
    #[arg(long, env = "PRUNE_PARETO_MANIFEST")]
    manifest: Option<PathBuf>,
    /// Comma-separated budget fractions; an empty string means none.
    #[arg(long, env = "PRUNE_PARETO_BUDGETS", allow_hyphen_values = true)]
    budgets: Option<String>,
    /// single, exp, linear, multistep or free.
    #[arg(long, env = "PRUNE_PARETO_KERNEL")]
    kernel: Option<String>,
    /// Step count of the multi-step kernel.
    #[arg(long, env = "PRUNE_PARETO_STEPS")]
    steps: Option<usize>,
    #[arg(long, env = "PRUNE_PARETO_LAYERS")]
    layers: Option<usize>,
    #[arg(long, env = "PRUNE_PARETO_NVISUAL")]
    nvisual: Option<usize>,
    #[arg(long, env = "PRUNE_PARETO_CLASSES")]
    classes: Option<usize>,
    #[arg(long, env = "PRUNE_PARETO_NTEXT")]
    ntext: Option<u64>,
    #[arg(long, env = "PRUNE_PARETO_HIDDEN")]
    hidden: Option<u64>,
    #[arg(long, env = "PRUNE_PARETO_FFN")]
    ffn: Option<u64>,
    #[arg(long, env = "PRUNE_PARETO_SEED")]
    seed: Option<u64>,
    /// Initial penalty.
    #[arg(long, env = "PRUNE_PARETO_LAMBDA")]
    lambda: Option<f64>,
    /// Penalty growth factor.
    #[arg(long, env = "PRUNE_PARETO_ALPHA")]
    alpha: Option<f64>,
    /// Required violation decrease ratio.
    #[arg(long, env = "PRUNE_PARETO_BETA")]
    beta: Option<f64>,
    /// Constraint tolerance.
    #[arg(long, env = "PRUNE_PARETO_EPS")]
    eps: Option<f64>,
    #[arg(long, env = "PRUNE_PARETO_MAX_OUTER")]
    max_outer: Option<usize>,
    #[arg(long, env = "PRUNE_PARETO_INNER_STEPS")]
    inner_steps: Option<usize>,
    #[arg(long, env = "PRUNE_PARETO_STEP_SIZE")]
    step_size: Option<f64>,
    /// Gaussian kernel width of the soft threshold.
    #[arg(long, env = "PRUNE_PARETO_SIGMA")]
    sigma: Option<f64>,
    /// Sigmoid temperature of the soft mask.
    #[arg(long, env = "PRUNE_PARETO_TEMPERATURE")]
    temperature: Option<f64>,
    /// hard-ste or soft.
    #[arg(long, env = "PRUNE_PARETO_MASK_MODE")]
    mask_mode: Option<String>,
    #[arg(long, env = "PRUNE_PARETO_GRID_COUNT")]
    grid_count: Option<usize>,
    /// Worker threads, 0 for automatic.
    #[arg(long, env = "PRUNE_PARETO_WORKERS")]
    workers: Option<usize>,
    #[arg(long, env = "PRUNE_PARETO_OUT")]
    out: Option<PathBuf>,
    /// Points file read by `frontier`.
    #[arg(long, env = "PRUNE_PARETO_INPUT")]
    input: Option<PathBuf>,
    /// Skip the brute-force frontier re-check.
    #[arg(long)]
    no_oracle_check: bool,
    /// Random instances per gradient suite.
    #[arg(long, env = "PRUNE_PARETO_GRAD_INSTANCES")]
    grad_instances: Option<usize>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn parse_budgets(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<f64>().map_err(|_| usage(format!("bad budget `{x}`"))))
        .collect()
}

fn parse_mask_mode(s: &str) -> Result<MaskMode> {
    match s {
        "hard-ste" | "hard_ste" | "ste" => Ok(MaskMode::HardSte),
        "soft" => Ok(MaskMode::Soft),
        _ => Err(usage(format!("unknown mask mode `{s}`"))),
    }
}

fn resolve(cli: &Cli) -> Result<RunManifest> {
    let mut m = match &cli.manifest {
        Some(p) => RunManifest::load(p)?,
        None => RunManifest::default(),
    };
    macro_rules! set {
        ($($field:ident => $target:ident),* $(,)?) => {
            $(if let Some(v) = cli.$field.clone() { m.$target = v; })*
        };
    }
    set!(
        steps => steps, layers => layers, nvisual => nvisual, classes => classes,
        ntext => ntext, hidden => hidden, seed => seed, lambda => lambda,
        alpha => alpha, beta => beta, eps => eps, max_outer => max_outer,
        inner_steps => inner_steps, step_size => inner_step_size, sigma => sigma,
        temperature => temperature, grid_count => grid_count, workers => workers,
        out => out, grad_instances => grad_instances,
    );
    if let Some(c) = &cli.command {
        m.command = c.parse::<Command>()?;
    }
    if let Some(b) = &cli.budgets {
        m.budgets = parse_budgets(b)?;
    }
    if let Some(k) = &cli.kernel {
        m.kernel = k.parse::<KernelChoice>()?;
    }
    if let Some(mm) = &cli.mask_mode {
        m.mask_mode = parse_mask_mode(mm)?;
    }
    if cli.ffn.is_some() {
        m.ffn = cli.ffn;
    }
    if cli.input.is_some() {
        m.input = cli.input.clone();
    }
    if cli.no_oracle_check {
        m.oracle_check = false;
    }
    Ok(m)
}

fn run(m: &RunManifest) -> Result<u8> {
    match m.command {
        Command::Search => {
            let summary = run_search(m)?;
            for r in &summary.reports {
                match (&r.status, &r.result, &r.discrete) {
                    (SearchStatus::Ok, Some(res), Some(d)) => println!(
                        "budget {:<5} loss {:.6e}  flops {:.6e}  performance {:.6}  converged {}  evaluations {}",
                        r.budget_fraction, res.loss, d.flops, d.performance, res.converged, res.evaluations
                    ),
                    _ => println!(
                        "budget {:<5} infeasible: {}",
                        r.budget_fraction,
                        r.message.as_deref().unwrap_or("")
                    ),
                }
            }
            Ok(if summary.infeasible > 0 { 3 } else { 0 })
        }
        Command::Grid => {
            let g = run_grid(m)?;
            println!(
                "evaluated {} configurations, frontier size {}, oracle check {}",
                g.meta.count,
                g.meta.frontier_size,
                match g.meta.oracle_check {
                    Some(true) => "passed",
                    Some(false) => "failed",
                    None => "skipped",
                }
            );
            Ok(0)
        }
        Command::Frontier => {
            let f = run_frontier(m)?;
            println!("frontier size {}", f.len());
            Ok(0)
        }
        Command::Compare => {
            let r = run_compare(m)?;
            for b in &r.budgets {
                match b.delta_p {
                    Some(d) => println!(
                        "budget {:<5} search p {:.6}  grid p {:.6}  delta {:+.6}  evaluations {} ({:.3} of grid)",
                        b.budget_fraction,
                        b.search_performance,
                        b.grid_performance.unwrap_or(f64::NAN),
                        d,
                        b.search_evaluations,
                        b.evaluation_ratio
                    ),
                    None => println!(
                        "budget {:<5} search p {:.6}  no grid point at or below {:.6e} flops",
                        b.budget_fraction, b.search_performance, b.search_flops
                    ),
                }
            }
            println!(
                "total search evaluations {} ({:.3} of {} grid evaluations)",
                r.total_search_evaluations, r.total_evaluation_ratio, r.grid_count
            );
            if let Some(k) = &r.kernel_ordering {
                println!("kernel ordering at budget {}: {}", k.budget_fraction, k.note);
            }
            Ok(if r.skipped_infeasible.is_empty() { 0 } else { 3 })
        }
        Command::CheckGrads => {
            let reports = run_check_grads(m)?;
            let mut failed = 0;
            for r in &reports {
                println!(
                    "{} {:<15} checks {:>5}  failures {:>3}  max rel error {:.3e}  tolerance {:.0e}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.suite.name(),
                    r.checks,
                    r.failures,
                    r.max_rel_error,
                    r.tolerance
                );
                if !r.passed() {
                    failed += 1;
                }
            }
            Ok(if failed > 0 { 2 } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = resolve(&cli).and_then(|m| {
        m.validate()?;
        run(&m)
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
