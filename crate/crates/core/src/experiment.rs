//! Reproducible experiment runs driven by a [`RunManifest`].
//!
//! Output layout under the manifest's `out` directory:
//!
//! ```text
//! manifest.json                  resolved manifest of the last run
//! search/result_b<budget>.json   one SearchReport per budget fraction
//! search/trace_b<budget>.jsonl   outer-loop trace, one record per line
//! grid/meta.json                 seed, cost model and sample count
//! grid/points.{csv,json}         every evaluated grid configuration
//! grid/frontier.{csv,json}       non-dominated subset
//! compare/report.json            search vs grid comparison
//! check_grads.json               gradient suite reports
//! ```
//!
//! Nothing written depends on wall-clock time or thread scheduling, so an
//! identical manifest reproduces identical bytes.

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alm::{outer_loop, write_trace_jsonl, AlmConfig, Parameterization, SearchResult, TraceRecord};
use crate::cost_model::{Budget, CostModelParams};
use crate::error::{invalid, Error, Result};
use crate::gradcheck::{run_all, GradCheckConfig, SuiteReport};
use crate::kernels::{KernelSpec, KernelVariant};
use crate::pareto::{
    evaluate_discrete, extract_frontier, read_points_csv, read_points_json, sample_grid,
    verify_frontier, write_points_csv, write_points_json, EvalPoint, DEFAULT_GRID_COUNT,
};
use crate::problems::ToyEvaluator;
use crate::relaxation::RelaxationConfig;
use crate::toy_vlm::{MaskMode, ToyInstance, ToyModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Search,
    Grid,
    Frontier,
    Compare,
    CheckGrads,
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| invalid("command", format!("unknown command `{s}`")))
    }
}

/// Search parameterization: a pruning kernel or one free ratio per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KernelChoice {
    Free,
    Kernel(KernelVariant),
}

impl fmt::Display for KernelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelChoice::Free => f.write_str("free"),
            KernelChoice::Kernel(v) => f.write_str(v.name()),
        }
    }
}

impl FromStr for KernelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "free" {
            Ok(KernelChoice::Free)
        } else {
            s.parse().map(KernelChoice::Kernel)
        }
    }
}

impl TryFrom<String> for KernelChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<KernelChoice> for String {
    fn from(k: KernelChoice) -> Self {
        k.to_string()
    }
}

/// Every knob of a run. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub command: Command,
    /// Budgets as fractions of the unpruned cost.
    pub budgets: Vec<f64>,
    pub kernel: KernelChoice,
    /// Step count of the multi-step kernel.
    pub steps: usize,
    pub layers: usize,
    pub nvisual: usize,
    pub classes: usize,
    pub ntext: u64,
    pub hidden: u64,
    /// FFN width; `None` means `4 * hidden`.
    pub ffn: Option<u64>,
    pub seed: u64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    pub max_outer: usize,
    pub inner_steps: usize,
    pub inner_step_size: f64,
    pub sigma: f64,
    pub temperature: f64,
    pub mask_mode: MaskMode,
    pub grid_count: usize,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
    pub out: PathBuf,
    /// Points file for `frontier`; defaults to `<out>/grid/points.csv`.
    pub input: Option<PathBuf>,
    /// Re-check extracted frontiers against the brute-force filter.
    pub oracle_check: bool,
    /// Random instances per gradient suite.
    pub grad_instances: usize,
}

impl Default for RunManifest {
    fn default() -> Self {
        let alm = AlmConfig::default();
        let relax = RelaxationConfig::default();
        Self {
            command: Command::Search,
            budgets: vec![0.9, 0.5, 0.1],
            kernel: KernelChoice::Free,
            steps: 4,
            layers: 8,
            nvisual: 64,
            classes: 4,
            ntext: 4,
            hidden: 64,
            ffn: None,
            seed: 1,
            lambda: alm.penalty_init,
            alpha: alm.penalty_growth,
            beta: alm.violation_decrease,
            eps: alm.tolerance,
            max_outer: alm.max_outer,
            inner_steps: alm.inner_steps,
            inner_step_size: alm.inner_step_size,
            sigma: relax.kernel_width,
            temperature: relax.temperature,
            mask_mode: MaskMode::HardSte,
            grid_count: DEFAULT_GRID_COUNT,
            workers: 0,
            out: PathBuf::from("out"),
            input: None,
            oracle_check: true,
            grad_instances: 100,
        }
    }
}

impl RunManifest {
    /// Parses a JSON object or `key = value` lines (`#` starts a comment).
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            return Ok(serde_json::from_str(text)?);
        }
        let mut map = serde_json::Map::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim().replace('-', "_");
            map.insert(key, parse_scalar_or_list(value.trim()));
        }
        Ok(serde_json::from_value(serde_json::Value::Object(map))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn cost_params(&self) -> Result<CostModelParams> {
        let ffn = self.ffn.unwrap_or(4 * self.hidden);
        CostModelParams::with_ffn_dim(self.ntext, self.nvisual as u64, self.hidden, ffn, self.layers)
    }

    pub fn toy_spec(&self) -> ToyModelSpec {
        ToyModelSpec::new(self.seed, self.layers, self.nvisual, self.classes)
    }

    pub fn relax(&self) -> Result<RelaxationConfig> {
        RelaxationConfig::new(self.sigma, self.temperature)
    }

    pub fn alm(&self) -> Result<AlmConfig> {
        let cfg = AlmConfig {
            penalty_init: self.lambda,
            penalty_growth: self.alpha,
            violation_decrease: self.beta,
            tolerance: self.eps,
            max_outer: self.max_outer,
            inner_steps: self.inner_steps,
            inner_step_size: self.inner_step_size,
            ..AlmConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parameterization(&self) -> Result<Parameterization> {
        parameterization_for(self.kernel, self.layers, self.steps)
    }

    /// Validates every derived configuration without running anything.
    pub fn validate(&self) -> Result<()> {
        self.cost_params()?;
        self.toy_spec().validate()?;
        self.relax()?;
        self.alm()?;
        self.parameterization()?;
        if self.grid_count == 0 {
            return Err(invalid("grid_count", "must be >= 1"));
        }
        if let Some(b) = self.budgets.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            return Err(invalid("budgets", format!("fraction {b} is outside (0, 1]")));
        }
        Ok(())
    }
}

fn parse_scalar_or_list(value: &str) -> serde_json::Value {
    if let Ok(v) = serde_json::from_str(value) {
        return v;
    }
    if value.contains(',') {
        return serde_json::Value::Array(
            value
                .split(',')
                .map(|x| x.trim())
                .filter(|x| !x.is_empty())
                .map(parse_scalar_or_list)
                .collect(),
        );
    }
    serde_json::Value::String(value.to_string())
}

/// Starting kernel for a search: mid-depth transition at half retention.
pub fn parameterization_for(kernel: KernelChoice, layers: usize, steps: usize) -> Result<Parameterization> {
    let l = layers as f64;
    Ok(match kernel {
        KernelChoice::Free => Parameterization::Free,
        KernelChoice::Kernel(v) => Parameterization::Kernel(match v {
            KernelVariant::SingleStep => KernelSpec::single_step(layers, l / 2.0, 0.5, 1.0)?,
            KernelVariant::Exponential => KernelSpec::exponential(layers, 0.0, 1.0)?,
            KernelVariant::Linear => KernelSpec::linear(layers, 0.0, 1.0)?,
            KernelVariant::MultiStep => KernelSpec::multi_step(layers, 1.0, 0.5, steps)?,
        }),
    })
}

/// File-name tag for a budget fraction, e.g. `b0.5`.
pub fn budget_tag(fraction: f64) -> String {
    format!("b{fraction:?}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStatus {
    Ok,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub seed: u64,
    pub cost: CostModelParams,
    pub kernel: KernelChoice,
    pub mask_mode: MaskMode,
    pub budget_fraction: f64,
    pub status: SearchStatus,
    pub message: Option<String>,
    pub result: Option<SearchResult>,
    /// The result evaluated with exact top-k selection.
    pub discrete: Option<EvalPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSummary {
    pub reports: Vec<SearchReport>,
    pub infeasible: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| invalid("workers", e.to_string()))?;
    Ok(pool.install(f))
}

/// Runs the search for one kernel choice at one budget fraction. The trace is
/// empty for infeasible budgets.
pub fn search_one(
    manifest: &RunManifest,
    instance: &ToyInstance,
    kernel: KernelChoice,
    fraction: f64,
) -> Result<(SearchReport, Vec<TraceRecord>)> {
    let cost = manifest.cost_params()?;
    let relax = manifest.relax()?;
    let alm = manifest.alm()?;
    let param = parameterization_for(kernel, manifest.layers, manifest.steps)?;
    let eval = ToyEvaluator::new(instance, cost, relax, manifest.mask_mode)?;
    let mut report = SearchReport {
        seed: manifest.seed,
        cost,
        kernel,
        mask_mode: manifest.mask_mode,
        budget_fraction: fraction,
        status: SearchStatus::Ok,
        message: None,
        result: None,
        discrete: None,
    };
    let budget = cost.resolve_budget(Budget::Fraction(fraction))?;
    let mut trace = Vec::new();
    match outer_loop(&eval, &param, budget, &alm) {
        Ok(outcome) => {
            let discrete = evaluate_discrete(instance, &outcome.result.profile, &cost, budget_tag(fraction))?;
            report.result = Some(outcome.result);
            report.discrete = Some(discrete);
            trace = outcome.trace;
        }
        Err(e @ Error::Infeasible { .. }) => {
            report.status = SearchStatus::Infeasible;
            report.message = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }
    Ok((report, trace))
}

pub fn run_search(manifest: &RunManifest) -> Result<SearchSummary> {
    manifest.validate()?;
    if manifest.budgets.is_empty() {
        warn!("no budgets given, nothing to search");
        return Ok(SearchSummary {
            reports: vec![],
            infeasible: 0,
        });
    }
    let instance = ToyInstance::generate(manifest.toy_spec())?;
    let dir = manifest.out.join("search");
    fs::create_dir_all(&dir)?;

    let runs: Vec<Result<(SearchReport, Vec<TraceRecord>)>> = with_pool(manifest.workers, || {
        manifest
            .budgets
            .par_iter()
            .map(|&b| search_one(manifest, &instance, manifest.kernel, b))
            .collect()
    })?;

    let mut reports = Vec::with_capacity(runs.len());
    let mut infeasible = 0;
    for run in runs {
        let (report, trace) = run?;
        let tag = budget_tag(report.budget_fraction);
        write_json(&dir.join(format!("result_{tag}.json")), &report)?;
        if report.status == SearchStatus::Infeasible {
            infeasible += 1;
            warn!(
                "budget {}: {}",
                report.budget_fraction,
                report.message.as_deref().unwrap_or("infeasible")
            );
        } else {
            let file = fs::File::create(dir.join(format!("trace_{tag}.jsonl")))?;
            write_trace_jsonl(BufWriter::new(file), &trace)?;
        }
        reports.push(report);
    }
    write_json(&manifest.out.join("manifest.json"), manifest)?;
    info!("searched {} budgets, {} infeasible", reports.len(), infeasible);
    Ok(SearchSummary { reports, infeasible })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub seed: u64,
    pub cost: CostModelParams,
    pub count: usize,
    pub frontier_size: usize,
    /// Outcome of the brute-force re-check, when requested.
    pub oracle_check: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSummary {
    pub points: Vec<EvalPoint>,
    pub frontier: Vec<EvalPoint>,
    pub meta: GridMeta,
}

fn write_point_files(dir: &Path, stem: &str, points: &[EvalPoint]) -> Result<()> {
    let csv = fs::File::create(dir.join(format!("{stem}.csv")))?;
    write_points_csv(BufWriter::new(csv), points)?;
    let json = fs::File::create(dir.join(format!("{stem}.json")))?;
    write_points_json(BufWriter::new(json), points)?;
    Ok(())
}

/// Evaluates `grid_count` distinct grid profiles and extracts their frontier.
pub fn run_grid(manifest: &RunManifest) -> Result<GridSummary> {
    manifest.validate()?;
    let cost = manifest.cost_params()?;
    let instance = ToyInstance::generate(manifest.toy_spec())?;
    let profiles = sample_grid(manifest.layers, manifest.grid_count, manifest.seed)?;
    let points = with_pool(manifest.workers, || {
        profiles
            .par_iter()
            .enumerate()
            .map(|(i, p)| evaluate_discrete(&instance, p, &cost, format!("g{i:04}")))
            .collect::<Result<Vec<_>>>()
    })??;
    let frontier = extract_frontier(&points)?;
    let oracle_check = manifest.oracle_check.then(|| verify_frontier(&frontier, &points));
    if oracle_check == Some(false) {
        return Err(Error::Mismatch("frontier disagrees with the brute-force filter".into()));
    }
    let meta = GridMeta {
        seed: manifest.seed,
        cost,
        count: points.len(),
        frontier_size: frontier.len(),
        oracle_check,
    };
    let dir = manifest.out.join("grid");
    fs::create_dir_all(&dir)?;
    write_point_files(&dir, "points", &points)?;
    write_point_files(&dir, "frontier", &frontier.points)?;
    write_json(&dir.join("meta.json"), &meta)?;
    write_json(&manifest.out.join("manifest.json"), manifest)?;
    info!("evaluated {} grid points, frontier has {}", points.len(), frontier.len());
    Ok(GridSummary {
        points,
        frontier: frontier.points,
        meta,
    })
}

/// Extracts the frontier of an existing points file (CSV or JSON).
pub fn run_frontier(manifest: &RunManifest) -> Result<Vec<EvalPoint>> {
    let input = manifest
        .input
        .clone()
        .unwrap_or_else(|| manifest.out.join("grid").join("points.csv"));
    let file = fs::File::open(&input)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", input.display())))?;
    let points = if input.extension().is_some_and(|e| e == "json") {
        read_points_json(file)?
    } else {
        read_points_csv(file)?
    };
    let frontier = extract_frontier(&points)?;
    if manifest.oracle_check && !verify_frontier(&frontier, &points) {
        return Err(Error::Mismatch("frontier disagrees with the brute-force filter".into()));
    }
    let dir = manifest.out.join("frontier");
    fs::create_dir_all(&dir)?;
    write_point_files(&dir, "frontier", &frontier.points)?;
    Ok(frontier.points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetComparison {
    pub budget_fraction: f64,
    pub search_flops: f64,
    pub search_performance: f64,
    /// Best grid frontier performance at equal or lower flops.
    pub grid_performance: Option<f64>,
    pub grid_config: Option<String>,
    /// `search - grid`; `None` when no grid point is that cheap.
    pub delta_p: Option<f64>,
    pub search_evaluations: usize,
    /// Search evaluations divided by the grid size.
    pub evaluation_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelOrdering {
    pub budget_fraction: f64,
    pub multistep_loss: f64,
    pub single_loss: f64,
    pub multistep_converged: bool,
    pub single_converged: bool,
    /// Achieved cost as a fraction of the unpruned cost.
    pub multistep_flops_fraction: f64,
    pub single_flops_fraction: f64,
    /// Both converged and the multi-step loss is at most the single-step
    /// loss plus 1e-6.
    pub multistep_not_worse: bool,
    /// Set whenever the ordering above does not hold.
    pub flagged: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seed: u64,
    pub grid_count: usize,
    pub budgets: Vec<BudgetComparison>,
    pub total_search_evaluations: usize,
    pub total_evaluation_ratio: f64,
    pub skipped_infeasible: Vec<f64>,
    pub kernel_ordering: Option<KernelOrdering>,
}

/// Runs the multi-step and single-step kernels at one budget and reports
/// which reaches the lower relaxed loss.
pub fn kernel_ordering(manifest: &RunManifest, fraction: f64) -> Result<KernelOrdering> {
    let instance = ToyInstance::generate(manifest.toy_spec())?;
    let full = manifest.cost_params()?.full_flops();
    let (multi, _) = search_one(manifest, &instance, KernelChoice::Kernel(KernelVariant::MultiStep), fraction)?;
    let (single, _) = search_one(manifest, &instance, KernelChoice::Kernel(KernelVariant::SingleStep), fraction)?;
    let (Some(m), Some(s)) = (multi.result, single.result) else {
        return Err(Error::Infeasible {
            budget: fraction,
            minimum: manifest.cost_params()?.min_flops() / full,
        });
    };
    let holds = m.converged && s.converged && m.loss <= s.loss + 1e-6;
    let note = if holds {
        "multi-step loss <= single-step loss".to_string()
    } else if !m.converged || !s.converged {
        format!(
            "not comparable: multi-step {} (cost {:.4}), single-step {} (cost {:.4}) at budget {fraction}",
            if m.converged { "converged" } else { "did not converge" },
            m.flops / full,
            if s.converged { "converged" } else { "did not converge" },
            s.flops / full,
        )
    } else {
        format!(
            "reversal: multi-step loss {:.6e} exceeds single-step loss {:.6e}",
            m.loss, s.loss
        )
    };
    Ok(KernelOrdering {
        budget_fraction: fraction,
        multistep_loss: m.loss,
        single_loss: s.loss,
        multistep_converged: m.converged,
        single_converged: s.converged,
        multistep_flops_fraction: m.flops / full,
        single_flops_fraction: s.flops / full,
        multistep_not_worse: holds,
        flagged: !holds,
        note,
    })
}

/// Compares stored search results with the stored grid frontier.
pub fn run_compare(manifest: &RunManifest) -> Result<CompareReport> {
    manifest.validate()?;
    let grid_dir = manifest.out.join("grid");
    let meta: GridMeta = read_json(&grid_dir.join("meta.json"))?;
    let frontier = crate::pareto::ParetoFrontier {
        points: read_points_json(fs::File::open(grid_dir.join("frontier.json"))?)?,
    };
    let mut budgets = Vec::new();
    let mut skipped = Vec::new();
    for &b in &manifest.budgets {
        let path = manifest.out.join("search").join(format!("result_{}.json", budget_tag(b)));
        let report: SearchReport = read_json(&path)?;
        if report.seed != meta.seed {
            return Err(Error::Mismatch(format!(
                "search result seed {} differs from grid seed {}",
                report.seed, meta.seed
            )));
        }
        if report.cost != meta.cost {
            return Err(Error::Mismatch("search and grid use different cost models".into()));
        }
        let (Some(result), Some(discrete)) = (report.result, report.discrete) else {
            skipped.push(b);
            continue;
        };
        let best = frontier.best_at_or_below(discrete.flops);
        budgets.push(BudgetComparison {
            budget_fraction: b,
            search_flops: discrete.flops,
            search_performance: discrete.performance,
            grid_performance: best.map(|p| p.performance),
            grid_config: best.map(|p| p.config_id.clone()),
            delta_p: best.map(|p| discrete.performance - p.performance),
            search_evaluations: result.evaluations,
            evaluation_ratio: result.evaluations as f64 / meta.count as f64,
        });
    }
    let total: usize = budgets.iter().map(|b| b.search_evaluations).sum();
    let smallest = manifest
        .budgets
        .iter()
        .copied()
        .filter(|b| !skipped.contains(b))
        .fold(None, |acc: Option<f64>, b| Some(acc.map_or(b, |a| a.min(b))));
    let ordering = match smallest {
        Some(b) => Some(kernel_ordering(manifest, b)?),
        None => None,
    };
    let report = CompareReport {
        seed: meta.seed,
        grid_count: meta.count,
        budgets,
        total_search_evaluations: total,
        total_evaluation_ratio: total as f64 / meta.count as f64,
        skipped_infeasible: skipped,
        kernel_ordering: ordering,
    };
    let dir = manifest.out.join("compare");
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

/// Runs every gradient suite; the caller turns failures into an exit code.
pub fn run_check_grads(manifest: &RunManifest) -> Result<Vec<SuiteReport>> {
    let cfg = GradCheckConfig {
        seed: manifest.seed,
        instances: manifest.grad_instances,
        relax: manifest.relax()?,
        corrupt: None,
    };
    let reports = run_all(&cfg)?;
    fs::create_dir_all(&manifest.out)?;
    write_json(&manifest.out.join("check_grads.json"), &reports)?;
    Ok(reports)
}
