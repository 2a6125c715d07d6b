use std::collections::BTreeSet;
use std::fs;

use ulab::config::ExperimentConfig;
use ulab::experiment::{
    evaluate_method, load_unlearn_record, persist, prepare, prepare_with_teacher, run_dir, run_experiment,
};
use ulab_core::model::checkpoint;
use ulab_core::perturb::PerturbedSet;
use ulab_core::seeds::Stream;
use ulab_core::unlearn::MethodRegistry;

fn config(method: &str, out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        method: method.into(),
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn identical_configs_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("spotter", dir.path());
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.meta.config_hash, b.meta.config_hash);
    assert_eq!(a.meta.streams, b.meta.streams);

    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(run_experiment(&other).unwrap().metrics, a.metrics);
}

#[test]
fn run_directory_holds_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("neggrad", dir.path());
    let report = run_experiment(&cfg).unwrap();
    let run = run_dir(&cfg);
    assert_eq!(report.meta.artifacts.as_deref(), Some(run.as_path()));
    for f in [
        "config.resolved",
        "metrics.json",
        "unlearn.json",
        "teacher_train.json",
        "tube.json",
        "ou_points.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let resolved = fs::read_to_string(run.join("config.resolved")).unwrap();
    assert_eq!(ExperimentConfig::parse_str(&resolved).unwrap(), cfg);

    // The persisted tube and per-point values reproduce the reported OU@ε.
    let tube = PerturbedSet::from_json(&fs::read_to_string(run.join("tube.json")).unwrap()).unwrap();
    let points: Vec<f64> = serde_json::from_str(&fs::read_to_string(run.join("ou_points.json")).unwrap()).unwrap();
    assert_eq!(tube.len(), points.len());
    assert_eq!(report.metrics.ou.n_points, points.len());
    let mean = points.iter().sum::<f64>() / points.len() as f64;
    assert_eq!(mean, report.metrics.ou.value);

    let (student, meta) = checkpoint::load(&run.join("student")).unwrap();
    assert_eq!(meta.param_checksum, report.metrics.student_checksum);
    assert_eq!(student.params().checksum(), report.metrics.student_checksum);
    let record = load_unlearn_record(&run).unwrap();
    assert_eq!(record.access, report.metrics.access);
    assert_eq!(record.epochs.len(), cfg.unlearn.train.epochs);
}

#[test]
fn data_access_accounting_matches_each_method() {
    let dir = tempfile::tempdir().unwrap();
    let base = config("spotter", dir.path());
    let prep = prepare(&base).unwrap();
    let registry = MethodRegistry::with_builtins();
    for method in ["spotter", "random-label", "neggrad", "retrain"] {
        let mut cfg = base.clone();
        cfg.method = method.into();
        let report = evaluate_method(&cfg, &prep, &registry).unwrap().report;
        let access = report.metrics.access;
        if method == "retrain" {
            assert_eq!(access.forget_reads, 0, "{method}");
            assert!(access.retain_reads > 0);
        } else {
            assert_eq!(access.retain_reads, 0, "{method}");
            assert!(access.forget_reads > 0);
        }
        assert_eq!(report.metrics.teacher_checksum, prep.teacher.params().checksum());
    }
}

#[test]
fn evaluation_and_training_streams_are_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&config("spotter", dir.path())).unwrap();
    let streams = &report.meta.streams;
    let ids: BTreeSet<u64> = streams.iter().map(|s| s.stream_id).collect();
    let seeds: BTreeSet<u64> = streams.iter().map(|s| s.seed).collect();
    assert_eq!(ids.len(), streams.len());
    assert_eq!(seeds.len(), streams.len());
    let id = |s: Stream| streams.iter().find(|r| r.stream == s).unwrap().stream_id;
    assert_ne!(id(Stream::TrainPerturb), id(Stream::EvalPerturb));
    assert_ne!(id(Stream::TrainPerturb), id(Stream::EvalGaussian));
    assert_eq!(report.metrics.ou.n_points, report.metrics.gaussian_ou.n_points);
}

#[test]
fn spotter_over_unlearns_less_than_neggrad() {
    let dir = tempfile::tempdir().unwrap();
    let base = config("spotter", dir.path());
    let prep = prepare(&base).unwrap();
    let registry = MethodRegistry::with_builtins();
    let ou = |method: &str| {
        let mut cfg = base.clone();
        cfg.method = method.into();
        evaluate_method(&cfg, &prep, &registry).unwrap().report.metrics.ou.value
    };
    let (spotter, neggrad) = (ou("spotter"), ou("neggrad"));
    assert!(spotter < neggrad, "spotter {spotter} vs neggrad {neggrad}");
}

#[test]
fn saved_original_model_reproduces_the_trained_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("random-label", dir.path());
    let prep = prepare(&cfg).unwrap();
    let registry = MethodRegistry::with_builtins();
    let mut outcome = evaluate_method(&cfg, &prep, &registry).unwrap();
    let run = run_dir(&cfg);
    persist(&run, &cfg, &prep, &mut outcome).unwrap();

    let loaded = prepare_with_teacher(&cfg, &run.join("teacher")).unwrap();
    assert!(loaded.teacher.params().bit_eq(prep.teacher.params()));
    assert_eq!(loaded.teacher_log, prep.teacher_log);
    let again = evaluate_method(&cfg, &loaded, &registry).unwrap();
    assert_eq!(again.report.metrics, outcome.report.metrics);
}

#[test]
fn unknown_method_is_reported_with_the_known_names() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&config("boundary-shrink", dir.path())).unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains("boundary-shrink") && msg.contains("spotter"), "{msg}");
}
