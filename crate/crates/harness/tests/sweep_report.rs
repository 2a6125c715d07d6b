use std::fs;

use ulab::config::ExperimentConfig;
use ulab::embed::export_embeddings_2d;
use ulab::experiment::{evaluate_method, prepare, run_experiment, MetricsReport};
use ulab::report::{load_reports, read_jsonl, summarize, to_csv, to_markdown, write_jsonl, write_report, COLUMNS};
use ulab::sweep::{aggregate, run_sweep, write_outputs, SweepAxis, SweepGrid};
use ulab_core::unlearn::MethodRegistry;

fn base(out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn singleton_grid_matches_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base(dir.path());
    let single = run_experiment(&cfg).unwrap();
    let grid = SweepGrid::new().with(SweepAxis::Method, &["spotter"]).unwrap();
    let sweep = run_sweep(&cfg, &grid, &[cfg.seed], None).unwrap();
    assert!(sweep.failures.is_empty());
    assert_eq!(sweep.reports.len(), 1);
    assert_eq!(sweep.reports[0].metrics, single.metrics);
    assert_eq!(
        sweep.reports[0].meta.grid.get("method").map(String::as_str),
        Some("spotter")
    );
}

#[test]
fn failing_points_are_recorded_and_the_rest_continue() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base(dir.path());
    let grid = SweepGrid::new()
        .with(SweepAxis::Method, &["neggrad", "no-such-method"])
        .unwrap()
        .with(SweepAxis::Lambda1, &["1", "1.5"])
        .unwrap();
    let out = run_sweep(&cfg, &grid, &[0], None).unwrap();
    assert_eq!(out.reports.len(), 1);
    assert_eq!(out.failures.len(), 3);
    assert!(out.failures.iter().any(|f| f.error.contains("no-such-method")));

    let rows = write_outputs(dir.path(), &grid, &out).unwrap();
    assert_eq!(rows.len(), 1);
    let failures: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("failures.json")).unwrap()).unwrap();
    assert_eq!(failures.as_array().unwrap().len(), 3);
}

#[test]
fn alpha_zero_endpoint_is_the_unlearned_forget_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base(dir.path());
    let grid = SweepGrid::new()
        .with(SweepAxis::Alpha, &["0", "0.5", "1"])
        .unwrap()
        .with(SweepAxis::Method, &["random-label"])
        .unwrap();
    let out = run_sweep(&cfg, &grid, &[0], Some(&dir.path().join("points"))).unwrap();
    assert!(out.failures.is_empty());
    let at_zero = out.reports.iter().find(|r| r.meta.grid["alpha"] == "0").unwrap();
    assert_eq!(
        Some(at_zero.metrics.attack.proto_acc_f),
        at_zero.metrics.unlearned.acc_f
    );
    assert!(out.reports.iter().all(|r| r
        .meta
        .artifacts
        .as_ref()
        .is_some_and(|p| p.join("metrics.json").is_file())));

    let rows = write_outputs(dir.path(), &grid, &out).unwrap();
    assert_eq!(rows.len(), 3);
    for file in [
        "sweep.csv",
        "sweep.jsonl",
        "report.md",
        "alpha_proto_acc_f.svg",
        "alpha_ou.svg",
    ] {
        assert!(dir.path().join(file).is_file(), "missing {file}");
    }
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn aggregation_depends_only_on_the_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base(dir.path());
    let grid = SweepGrid::new().with(SweepAxis::EpsEval, &["0.01", "0.1"]).unwrap();
    let out = run_sweep(&cfg, &grid, &[0, 1], None).unwrap();
    assert_eq!(out.reports.len(), 4);
    let rows = aggregate(&out.reports);
    assert_eq!(rows, aggregate(&out.reports));
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.seeds == 2));
    let expected = (out.reports[0].metrics.ou.value + out.reports[2].metrics.ou.value) / 2.0;
    assert_eq!(rows[0].ou, expected);

    let path = dir.path().join("pts.jsonl");
    write_jsonl(&path, &out.reports).unwrap();
    assert_eq!(aggregate(&read_jsonl(&path).unwrap()), rows);
}

fn two_reports() -> Vec<MetricsReport> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base(dir.path());
    let prep = prepare(&cfg).unwrap();
    let registry = MethodRegistry::with_builtins();
    ["spotter", "retrain"]
        .into_iter()
        .map(|m| {
            let mut c = cfg.clone();
            c.method = m.into();
            evaluate_method(&c, &prep, &registry).unwrap().report
        })
        .collect()
}

#[test]
fn report_tables_round_trip_and_mark_missing_values() {
    let reports = two_reports();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("reports.jsonl");
    write_jsonl(&path, &reports).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), reports);
    assert_eq!(load_reports(dir.path()).unwrap(), reports);

    let rows = summarize(&reports);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].label, "original");
    assert!(rows[0].values[4..].iter().all(Option::is_none));
    assert_eq!(rows[1].values[4], Some(reports[0].metrics.ou.value));

    let md = to_markdown(&rows);
    let header = md.lines().next().unwrap();
    for c in COLUMNS {
        assert!(header.contains(c), "{c}");
    }
    let original = md.lines().nth(2).unwrap();
    assert!(original.starts_with("| original |"));
    assert!(original.trim_end().ends_with("| - | - | - |"), "{original}");

    let csv = to_csv(&rows).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[2..], &COLUMNS.map(String::from));
    let first: Vec<String> = reader
        .records()
        .next()
        .unwrap()
        .unwrap()
        .iter()
        .map(String::from)
        .collect();
    assert_eq!(&first[6..], &["-", "-", "-"]);

    let out = tempfile::tempdir().unwrap();
    write_report(out.path(), &reports).unwrap();
    assert!(out.path().join("report.md").is_file() && out.path().join("report.csv").is_file());
}

#[test]
fn spotter_disperses_forget_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base(dir.path());
    let prep = prepare(&cfg).unwrap();
    let outcome = evaluate_method(&cfg, &prep, &MethodRegistry::with_builtins()).unwrap();
    let train = &prep.dataset.train;
    let before = export_embeddings_2d(&prep.teacher, train, &prep.forget).unwrap();
    let after = export_embeddings_2d(&outcome.run.student, train, &prep.forget).unwrap();
    assert_eq!(before.points.len(), train.len());
    assert_eq!(after.points.len(), train.len());
    assert_eq!(
        after.points.iter().filter(|p| p.is_forget).count(),
        prep.forget.indices.len()
    );
    assert!(
        after.forget_mean_cosine < before.forget_mean_cosine,
        "{} vs {}",
        after.forget_mean_cosine,
        before.forget_mean_cosine
    );

    after.write(dir.path(), "unlearned", "after").unwrap();
    let csv = fs::read_to_string(dir.path().join("unlearned.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,y,class,is_forget"));
    assert_eq!(csv.lines().count(), train.len() + 1);
    assert!(dir.path().join("unlearned.svg").is_file());
}
