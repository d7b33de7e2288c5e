use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use postlink::eval::ROW_NAMES;
use postlink::model::parse_model;
use postlink::profile::{
    attribute_samples, build_call_graph_no_lbr, infer_edges_from_counts, reconcile_flow, serialize_profile,
};
use postlink::trace::parse_trace;
use tempfile::TempDir;

fn postlink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_postlink"))
        .args(args)
        .output()
        .expect("spawn postlink")
}

fn ok(args: &[&str]) -> String {
    let out = postlink(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Generates a workload into `dir` and returns (model, trace) paths.
fn gen(dir: &Path, extra: &[&str]) -> (String, String) {
    let mut args = vec!["gen", "-o", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
    (
        dir.join("model.txt").to_string_lossy().into_owned(),
        dir.join("trace.txt").to_string_lossy().into_owned(),
    )
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path).expect("read output")
}

const FULL: &[&str] = &[
    "-reorder-blocks=cache+",
    "-reorder-functions=hfsort",
    "-split-functions=cold",
    "-icf",
    "-icp-threshold=0.9",
    "-dyno-stats",
];

#[test]
fn gen_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let spec = ["--functions", "100", "--hot-fraction", "0.1", "--seed", "1"];
    gen(&tmp.path().join("a"), &spec);
    gen(&tmp.path().join("b"), &spec);
    for f in ["model.txt", "trace.txt"] {
        assert_eq!(read(tmp.path().join("a").join(f)), read(tmp.path().join("b").join(f)), "{f}");
    }
    gen(&tmp.path().join("c"), &["--functions", "100", "--hot-fraction", "0.1", "--seed", "2"]);
    assert_ne!(read(tmp.path().join("a/trace.txt")), read(tmp.path().join("c/trace.txt")));
}

#[test]
fn cold_workload_has_an_empty_trace() {
    let tmp = TempDir::new().unwrap();
    let (_, trace) = gen(tmp.path(), &["--functions", "10", "--hot-fraction", "0"]);
    let t = parse_trace(&read(trace));
    assert!(t.stacks.is_empty() && t.samples.is_empty());
}

#[test]
fn optimize_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (model, trace) = gen(&tmp.path().join("in"), &["--functions", "40", "--hot-fraction", "0.25"]);
    for run in ["x", "y"] {
        let out = tmp.path().join(run);
        let mut args = vec!["optimize", &model, &trace, "-o", p(&out)];
        args.extend_from_slice(FULL);
        ok(&args);
    }
    for f in ["optimized.txt", "plan.txt", "passes.log", "dyno.txt"] {
        assert_eq!(read(tmp.path().join("x").join(f)), read(tmp.path().join("y").join(f)), "{f}");
    }
}

#[test]
fn all_passes_off_keeps_the_model() {
    let tmp = TempDir::new().unwrap();
    let (model, trace) = gen(&tmp.path().join("in"), &["--functions", "30", "--hot-fraction", "0.3"]);
    let out = tmp.path().join("out");
    let log = ok(&["optimize", &model, &trace, "-o", p(&out)]);
    assert_eq!(read(out.join("optimized.txt")), read(&model));
    assert!(log.lines().all(|l| l.ends_with(": disabled")), "{log}");
}

#[test]
fn dyno_report_lists_every_counter() {
    let tmp = TempDir::new().unwrap();
    let (model, trace) = gen(&tmp.path().join("in"), &["--functions", "30", "--hot-fraction", "0.3"]);
    let out = tmp.path().join("out");
    ok(&["optimize", &model, &trace, "-o", p(&out), "-reorder-blocks=ph", "-dyno-stats"]);
    let report = read(out.join("dyno.txt"));
    let names: Vec<&str> = report.lines().map(|l| l.split(':').next().unwrap()).collect();
    assert_eq!(names, ROW_NAMES);
    assert!(report.lines().all(|l| l.ends_with("%)")), "{report}");
}

#[test]
fn single_and_double_dash_flags_agree() {
    let tmp = TempDir::new().unwrap();
    let (model, trace) = gen(&tmp.path().join("in"), &["--functions", "30", "--hot-fraction", "0.3"]);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["optimize", &model, &trace, "-o", p(&a), "-reorder-blocks=ph", "-split-functions"]);
    ok(&["optimize", &model, &trace, "-o", p(&b), "--reorder-blocks", "ph", "--split-functions=cold"]);
    assert_eq!(read(a.join("plan.txt")), read(b.join("plan.txt")));
}

#[test]
fn samples_mode_infers_then_reconciles() {
    let tmp = TempDir::new().unwrap();
    let (model, trace) = gen(
        &tmp.path().join("in"),
        &["--functions", "30", "--hot-fraction", "0.3", "--sample-rate", "0.05"],
    );
    let prof = tmp.path().join("profile.txt");
    ok(&[
        "optimize",
        &model,
        &trace,
        "-o",
        p(&tmp.path().join("out")),
        "--mode=samples",
        "-reorder-blocks=ph",
        "--emit-profile",
        p(&prof),
    ]);
    let m = parse_model(&read(&model)).unwrap();
    let t = parse_trace(&read(&trace));
    let counts = attribute_samples(&m, &t.samples).counts;
    let (flow, _) = reconcile_flow(&m, &infer_edges_from_counts(&m, &counts));
    let calls = build_call_graph_no_lbr(&m, &counts);
    assert_eq!(read(&prof), serialize_profile(&flow, &calls));
}

#[test]
fn identical_configs_compare_to_zero() {
    let tmp = TempDir::new().unwrap();
    let (model, trace) = gen(&tmp.path().join("in"), &["--functions", "30", "--hot-fraction", "0.3"]);
    let flags = "-reorder-blocks=cache+ -split-functions";
    let report = ok(&["compare", &model, &trace, &format!("--a={flags}"), &format!("--b={flags}")]);
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 14);
    assert!(rows.iter().all(|l| l.ends_with(" +0.0%")), "{report}");
}

#[test]
fn breakdown_has_three_scenarios() {
    let tmp = TempDir::new().unwrap();
    let (model, trace) = gen(&tmp.path().join("in"), &["--functions", "30", "--hot-fraction", "0.3"]);
    let report = ok(&["compare", &model, &trace, "--b=-reorder-blocks=cache+", "--breakdown"]);
    let headers: Vec<&str> = report.lines().filter(|l| l.contains("Functions")).collect();
    assert_eq!(headers.len(), 2, "{report}");
    for h in headers {
        let cols: Vec<&str> = h.split_whitespace().skip(1).collect();
        assert_eq!(cols, ["Functions", "BBs", "Both"]);
    }
}

#[test]
fn branch_stacks_beat_samples_on_fallthrough() {
    let tmp = TempDir::new().unwrap();
    let (model, trace) = gen(
        &tmp.path().join("in"),
        &[
            "--functions",
            "20",
            "--hot-fraction",
            "0.5",
            "--shape",
            "correlated",
            "--seed",
            "600",
            "--stacks",
            "2000",
            "--sample-rate",
            "0.05",
        ],
    );
    let report = ok(&[
        "compare",
        &model,
        &trace,
        "--a=-reorder-blocks=ph --mode=lbr",
        "--b=-reorder-blocks=ph --mode=samples",
    ]);
    let row = report.lines().find(|l| l.starts_with("fall-through weight")).unwrap();
    let v: Vec<u64> = row.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    assert!(v[0] >= v[1], "{row}");
}

#[test]
fn heatmap_is_a_64_by_64_grid() {
    let tmp = TempDir::new().unwrap();
    let (model, trace) = gen(&tmp.path().join("in"), &["--functions", "30", "--hot-fraction", "0.3"]);
    let csv = tmp.path().join("h.csv");
    let pgm = tmp.path().join("h.pgm");
    ok(&["heatmap", &model, &trace, "-o", p(&csv), "--pgm", p(&pgm)]);
    let text = read(&csv);
    assert_eq!(text.lines().count(), 64);
    assert!(text.lines().all(|l| l.split(',').count() == 64));
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5"));
}

#[test]
fn stats_prints_counters() {
    let tmp = TempDir::new().unwrap();
    let (model, trace) = gen(&tmp.path().join("in"), &["--functions", "30", "--hot-fraction", "0.3"]);
    let out = ok(&["stats", &model, &trace]);
    assert!(out.starts_with("functions: 30\n"), "{out}");
    for name in ROW_NAMES {
        assert!(out.contains(&format!("\n{name}: ")), "{name}");
    }
}

fn assert_diagnostic(out: &Output, stage: &str) {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error: {stage}: ")), "{err}");
}

#[test]
fn failures_print_one_diagnostic_line() {
    let tmp = TempDir::new().unwrap();
    let (model, trace) = gen(&tmp.path().join("in"), &["--functions", "10", "--hot-fraction", "0.5"]);
    let missing = tmp.path().join("missing.txt");
    assert_diagnostic(&postlink(&["optimize", p(&missing), &trace]), "read");

    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "MODEL v1\nF f 0x1000\nB a\nI 1 jcc nowhere\nI 1 ret\n").unwrap();
    assert_diagnostic(&postlink(&["optimize", p(&bad), &trace]), "model");

    let samples_only = tmp.path().join("s.txt");
    fs::write(&samples_only, "S 0x400000\n").unwrap();
    assert_diagnostic(&postlink(&["optimize", &model, p(&samples_only)]), "profile");

    assert_diagnostic(&postlink(&["optimize", &model, &trace, "-reorder-blocks=zz"]), "args");
    assert_diagnostic(&postlink(&["compare", &model, &trace, "--a=-icf=7"]), "args");
    assert_diagnostic(&postlink(&["gen", "--functions", "0"]), "gen");
}
