//! Grid sampling, discrete evaluation and Pareto-frontier extraction.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost_model::{CostModelParams, RetentionProfile};
use crate::error::{invalid, Error, Result};
use crate::toy_vlm::{distill_loss, ToyInstance};

/// Number of configurations sampled by default.
pub const DEFAULT_GRID_COUNT: usize = 700;

/// The 21 per-layer ratios `{0.01, 0.06, ..., 0.96, 0.99}`.
pub fn grid_values() -> Vec<f64> {
    let mut v: Vec<f64> = (0..20).map(|j| (1 + 5 * j) as f64 / 100.0).collect();
    v.push(0.99);
    v
}

/// A configuration with its measured performance and cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub config_id: String,
    /// Higher is better, in `[0, 1]`.
    pub performance: f64,
    /// Lower is better.
    pub flops: f64,
    pub profile: RetentionProfile,
}

impl EvalPoint {
    pub fn new(config_id: impl Into<String>, performance: f64, flops: f64, profile: RetentionProfile) -> Result<Self> {
        if !(0.0..=1.0).contains(&performance) {
            return Err(invalid("performance", format!("must lie in [0, 1], got {performance}")));
        }
        if !(flops >= 0.0) || !flops.is_finite() {
            return Err(invalid("flops", format!("must be finite and >= 0, got {flops}")));
        }
        Ok(Self {
            config_id: config_id.into(),
            performance,
            flops,
            profile,
        })
    }
}

/// Non-dominated points sorted by ascending flops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFrontier {
    pub points: Vec<EvalPoint>,
}

impl ParetoFrontier {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Best performance among frontier points with `flops <= limit`.
    pub fn best_at_or_below(&self, limit: f64) -> Option<&EvalPoint> {
        // performance increases along the frontier
        self.points.iter().take_while(|p| p.flops <= limit).last()
    }
}

/// Draws `count` distinct profiles with every ratio taken from [`grid_values`].
pub fn sample_grid(layers: usize, count: usize, seed: u64) -> Result<Vec<RetentionProfile>> {
    if layers == 0 {
        return Err(invalid("layers", "must be >= 1"));
    }
    if count == 0 {
        return Err(invalid("count", "must be >= 1"));
    }
    let values = grid_values();
    let capacity = (values.len() as u128).checked_pow(layers as u32).unwrap_or(u128::MAX);
    if (count as u128) > capacity {
        return Err(invalid(
            "count",
            format!("only {capacity} distinct configurations exist for {layers} layers"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<u8>> = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let idx: Vec<u8> = (0..layers).map(|_| rng.gen_range(0..values.len()) as u8).collect();
        if seen.insert(idx.clone()) {
            out.push(RetentionProfile::new(idx.iter().map(|&i| values[i as usize]).collect())?);
        }
    }
    Ok(out)
}

/// `floor(r * n_visual)`, tolerant of representation error just below an integer.
pub fn retained_count(ratio: f64, n_visual: usize) -> usize {
    let x = ratio * n_visual as f64;
    ((x + 1e-9).floor().max(0.0) as usize).min(n_visual)
}

/// Maps a distillation loss onto `[0, 1]`, higher is better.
pub fn performance_from_loss(loss: f64) -> f64 {
    1.0 / (1.0 + loss)
}

/// Evaluates `profile` keeping exactly `floor(r_i N_v)` top tokens per layer.
pub fn evaluate_discrete(
    instance: &ToyInstance,
    profile: &RetentionProfile,
    params: &CostModelParams,
    config_id: impl Into<String>,
) -> Result<EvalPoint> {
    let nv = instance.n_visual();
    if params.n_visual != nv as u64 || params.num_layers != instance.num_layers() {
        return Err(Error::Mismatch(
            "cost model dimensions differ from the instance".into(),
        ));
    }
    let counts: Vec<usize> = profile.ratios().iter().map(|&r| retained_count(r, nv)).collect();
    let pair = instance.forward_counts(&counts)?;
    let loss = distill_loss(&pair);
    let discrete = RetentionProfile::new(counts.iter().map(|&k| k as f64 / nv as f64).collect())?;
    let flops = params.flops_total(&discrete)?;
    EvalPoint::new(config_id, performance_from_loss(loss), flops, profile.clone())
}

/// Pareto dominance with strict improvement in at least one coordinate.
pub fn dominates(a: &EvalPoint, b: &EvalPoint) -> bool {
    a.performance >= b.performance
        && a.flops <= b.flops
        && (a.performance > b.performance || a.flops < b.flops)
}

/// Drops repeated `config_id`s (first wins), then collapses points with
/// identical `(performance, flops)` onto the smallest `config_id`.
pub fn dedup_points(points: &[EvalPoint]) -> Vec<EvalPoint> {
    let mut ids = HashSet::new();
    let mut by_value: HashMap<(u64, u64), usize> = HashMap::new();
    let mut out: Vec<EvalPoint> = Vec::new();
    for p in points {
        if !ids.insert(p.config_id.as_str()) {
            continue;
        }
        let key = (p.performance.to_bits(), p.flops.to_bits());
        match by_value.get(&key) {
            Some(&slot) => {
                if p.config_id < out[slot].config_id {
                    out[slot] = p.clone();
                }
            }
            None => {
                by_value.insert(key, out.len());
                out.push(p.clone());
            }
        }
    }
    out
}

/// Sort-and-sweep frontier extraction, `O(n log n)`.
pub fn extract_frontier(points: &[EvalPoint]) -> Result<ParetoFrontier> {
    if points.is_empty() {
        return Err(Error::Empty("evaluation points"));
    }
    let mut pts = dedup_points(points);
    pts.sort_by(|a, b| {
        a.flops
            .total_cmp(&b.flops)
            .then(b.performance.total_cmp(&a.performance))
    });
    let mut best = f64::NEG_INFINITY;
    let mut frontier = Vec::new();
    for p in pts {
        if p.performance > best {
            best = p.performance;
            frontier.push(p);
        }
    }
    Ok(ParetoFrontier { points: frontier })
}

/// All-pairs non-dominated filter, `O(n^2)`, over the deduplicated points.
/// Returned in input order.
pub fn brute_force_frontier(points: &[EvalPoint]) -> Vec<EvalPoint> {
    let pts = dedup_points(points);
    pts.iter()
        .filter(|b| !pts.iter().any(|a| dominates(a, b)))
        .cloned()
        .collect()
}

/// Whether `points` (a claimed frontier of `all`) matches the brute-force filter.
pub fn verify_frontier(frontier: &ParetoFrontier, all: &[EvalPoint]) -> bool {
    let mut want: Vec<&str> = Vec::new();
    let oracle = brute_force_frontier(all);
    want.extend(oracle.iter().map(|p| p.config_id.as_str()));
    let mut got: Vec<&str> = frontier.points.iter().map(|p| p.config_id.as_str()).collect();
    want.sort_unstable();
    got.sort_unstable();
    want == got
        && frontier
            .points
            .windows(2)
            .all(|w| w[0].flops < w[1].flops && w[0].performance < w[1].performance)
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// CSV with columns `config_id, flops, performance, r_1..r_L`.
pub fn write_points_csv<W: Write>(out: W, points: &[EvalPoint]) -> Result<()> {
    let layers = points.first().map(|p| p.profile.len()).unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["config_id".to_string(), "flops".into(), "performance".into()];
    header.extend((1..=layers).map(|i| format!("r_{i}")));
    w.write_record(&header)?;
    for p in points {
        if p.profile.len() != layers {
            return Err(Error::LengthMismatch {
                expected: layers,
                actual: p.profile.len(),
            });
        }
        let mut rec = vec![p.config_id.clone(), fmt_f64(p.flops), fmt_f64(p.performance)];
        rec.extend(p.profile.ratios().iter().map(|&r| fmt_f64(r)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points_csv<R: Read>(input: R) -> Result<Vec<EvalPoint>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3
        || &headers[0] != "config_id"
        || &headers[1] != "flops"
        || &headers[2] != "performance"
    {
        return Err(Error::Format(
            "expected header config_id,flops,performance,r_1..r_L".into(),
        ));
    }
    for (i, h) in headers.iter().skip(3).enumerate() {
        if h != format!("r_{}", i + 1) {
            return Err(Error::Format(format!("unexpected column `{h}`")));
        }
    }
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Format(format!("bad number `{s}`: {e}")))
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let ratios = rec.iter().skip(3).map(parse).collect::<Result<Vec<_>>>()?;
        out.push(EvalPoint::new(
            &rec[0],
            parse(&rec[2])?,
            parse(&rec[1])?,
            RetentionProfile::new(ratios)?,
        )?);
    }
    Ok(out)
}

pub fn write_points_json<W: Write>(out: W, points: &[EvalPoint]) -> Result<()> {
    serde_json::to_writer_pretty(out, points)?;
    Ok(())
}

pub fn read_points_json<R: Read>(input: R) -> Result<Vec<EvalPoint>> {
    Ok(serde_json::from_reader(input)?)
}
