use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use prune_pareto::experiment::{CompareReport, RunManifest, SearchReport, SearchStatus};
use prune_pareto::pareto::read_points_csv;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_prune-pareto"));
    // keep the caller's environment from leaking into the runs
    for (k, _) in std::env::vars() {
        if k.starts_with("PRUNE_PARETO_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    files
}

const SMALL: &[&str] = &["--layers", "4", "--nvisual", "16", "--classes", "3"];

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let grid = [&["grid", "--grid-count", "50", "--workers", "3"][..], SMALL].concat();
    let search = [&["search", "--budgets", "0.9,0.5,0.2"][..], SMALL].concat();
    assert!(run(&grid, &out).status.success());
    assert!(run(&search, &out).status.success());
    let first = snapshot(&out);
    assert!(first.contains_key("grid/points.csv"));
    assert!(first.contains_key("search/result_b0.5.json"));
    assert!(first.contains_key("search/trace_b0.2.jsonl"));
    let grid1 = [&["grid", "--grid-count", "50", "--workers", "1"][..], SMALL].concat();
    assert!(run(&grid1, &out).status.success());
    assert!(run(&search, &out).status.success());
    assert_eq!(first, snapshot(&out));
}

#[test]
fn empty_budget_list_is_a_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["search", "--budgets", ""], tmp.path());
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no budgets"));
    assert!(!tmp.path().join("search").exists());
}

#[test]
fn single_grid_point_is_its_own_frontier() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[&["grid", "--grid-count", "1"][..], SMALL].concat(), tmp.path());
    assert!(o.status.success());
    let pts = read_points_csv(fs::File::open(tmp.path().join("grid/points.csv")).unwrap()).unwrap();
    let front = read_points_csv(fs::File::open(tmp.path().join("grid/frontier.csv")).unwrap()).unwrap();
    assert_eq!(pts.len(), 1);
    assert_eq!(pts, front);
}

#[test]
fn frontier_command_reads_points() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run(&[&["grid", "--grid-count", "80"][..], SMALL].concat(), tmp.path()).status.success());
    let o = run(&["frontier"], tmp.path());
    assert!(o.status.success());
    assert_eq!(
        fs::read(tmp.path().join("frontier/frontier.csv")).unwrap(),
        fs::read(tmp.path().join("grid/frontier.csv")).unwrap()
    );
}

#[test]
fn infeasible_budget_is_reported_without_aborting() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[&["search", "--budgets", "0.5,0.001"][..], SMALL].concat(), tmp.path());
    assert_eq!(o.status.code(), Some(3));
    let bad: SearchReport =
        serde_json::from_slice(&fs::read(tmp.path().join("search/result_b0.001.json")).unwrap()).unwrap();
    assert_eq!(bad.status, SearchStatus::Infeasible);
    let good: SearchReport =
        serde_json::from_slice(&fs::read(tmp.path().join("search/result_b0.5.json")).unwrap()).unwrap();
    assert_eq!(good.status, SearchStatus::Ok);
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["search", "--sigma", "0"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["search", "--kernel", "zigzag"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["launch"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["search", "--bogus"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["search", "--budgets", "1.5"], tmp.path()).status.code(), Some(1));
}

#[test]
fn compare_rejects_mismatched_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = [&["grid", "--grid-count", "30", "--seed", "1"][..], SMALL].concat();
    let search = [&["search", "--budgets", "0.5", "--seed", "2"][..], SMALL].concat();
    assert!(run(&grid, tmp.path()).status.success());
    assert!(run(&search, tmp.path()).status.success());
    let cmp = [&["compare", "--budgets", "0.5", "--seed", "2"][..], SMALL].concat();
    let o = run(&cmp, tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn compare_reports_delta_and_evaluation_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run(&["grid"], tmp.path()).status.success());
    assert!(run(&["search", "--budgets", "0.5"], tmp.path()).status.success());
    let o = run(&["compare", "--budgets", "0.5"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: CompareReport =
        serde_json::from_slice(&fs::read(tmp.path().join("compare/report.json")).unwrap()).unwrap();
    assert_eq!(r.budgets.len(), 1);
    assert!(r.budgets[0].delta_p.unwrap() >= -0.02);
    assert!(r.total_evaluation_ratio < 1.0);
    assert!(r.kernel_ordering.is_some());
}

#[test]
fn settings_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("m.txt");
    fs::write(&manifest, "command = grid\nseed = 5\nclasses = 3\ngrid_count = 10\nlayers = 3\nnvisual = 8\n").unwrap();
    let out = tmp.path().join("o");
    let o = bin()
        .args(["--manifest", manifest.to_str().unwrap(), "--classes", "2"])
        .env("PRUNE_PARETO_CLASSES", "4")
        .env("PRUNE_PARETO_SEED", "9")
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = RunManifest::load(&out.join("manifest.json")).unwrap();
    // flag beats env, env beats manifest, manifest beats defaults
    assert_eq!(m.classes, 2);
    assert_eq!(m.seed, 9);
    assert_eq!(m.grid_count, 10);
    assert_eq!(m.layers, 3);
}

#[test]
fn check_grads_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["check-grads", "--grad-instances", "20"], tmp.path());
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 5);
    assert!(tmp.path().join("check_grads.json").exists());
}
