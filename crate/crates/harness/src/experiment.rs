//! The experiment pipeline: original model → unlearning → accuracies → OU@ε
//! and Gaussian-OU → prototype attack, with every result persisted.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ulab_core::attack::{
    accuracy, default_alpha_grid, draw_support, finetune_relearn, support_inputs, tune_alpha, AlphaRecord,
};
use ulab_core::data::{AccessLog, Dataset, ForgetSpec, Split};
use ulab_core::model::{checkpoint, ArchDescriptor, Classifier};
use ulab_core::ou::{ou_at_eps_batched, OuReport};
use ulab_core::perturb::{epsilon_tube, PerturbConfig, PerturbMethod, PerturbedSet};
use ulab_core::seeds::{self, Stream};
use ulab_core::train::{train_supervised, TrainConfig, TrainLog};
use ulab_core::unlearn::{MethodRegistry, UnlearnConfig, UnlearnContext, UnlearnRecord, UnlearnRun};

use crate::config::{AlphaChoice, ExperimentConfig};

/// Top-1 accuracies in percent; `None` when the restricted split is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub acc_f: Option<f64>,
    pub acc_r: Option<f64>,
    pub acc_ft: Option<f64>,
    pub acc_rt: Option<f64>,
}

fn restricted(split: &Split, keep: impl Fn(usize) -> bool) -> Split {
    split.select(&split.indices_where(keep))
}

pub fn evaluate_accuracies(model: &Classifier, dataset: &Dataset, forget: &ForgetSpec) -> Result<Accuracies> {
    let is_f = |c: usize| forget.is_forget_class(c);
    let is_r = |c: usize| !forget.is_forget_class(c);
    Ok(Accuracies {
        acc_f: accuracy(model, &restricted(&dataset.train, is_f))?,
        acc_r: accuracy(model, &restricted(&dataset.train, is_r))?,
        acc_ft: accuracy(model, &restricted(&dataset.test, is_f))?,
        acc_rt: accuracy(model, &restricted(&dataset.test, is_r))?,
    })
}

/// Per-class training accuracy in percent.
pub fn per_class_accuracy(model: &Classifier, split: &Split, num_classes: usize) -> Result<Vec<Option<f64>>> {
    (0..num_classes)
        .map(|c| Ok(accuracy(model, &restricted(split, |y| y == c))?))
        .collect()
}

/// Trains the original model from a seeded initialization on the full training split.
pub fn train_original(
    dataset: &Dataset,
    arch: &ArchDescriptor,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Classifier, TrainLog)> {
    let init = Classifier::init(arch, dataset.num_classes, seeds::derive(seed, Stream::Init, 0, 0))?;
    let everything = ForgetSpec {
        classes: BTreeSet::new(),
        indices: Vec::new(),
    };
    let all: Vec<usize> = (0..dataset.train.len()).collect();
    let (model, log) = train_supervised(&init, &dataset.train, &everything, &all, cfg, seed)?;
    let per_class = per_class_accuracy(&model, &dataset.train, dataset.num_classes)?;
    log::info!("original model per-class train accuracy: {per_class:?}");
    Ok((model, log))
}

/// Dataset and original model shared by every method evaluated on one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub dataset: Dataset,
    pub forget: ForgetSpec,
    pub teacher: Classifier,
    pub teacher_log: TrainLog,
    pub original: Accuracies,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate().context("config")?;
    let dataset = cfg.dataset_spec().build(cfg.seed).context("dataset")?;
    let forget = ForgetSpec::for_classes(&dataset.train, dataset.num_classes, cfg.forget_classes.iter().copied())
        .context("forget spec")?;
    let arch = cfg.arch_descriptor(&dataset)?;
    let (teacher, teacher_log) = train_original(&dataset, &arch, &cfg.train, cfg.seed).context("train original")?;
    let original = evaluate_accuracies(&teacher, &dataset, &forget)?;
    Ok(Prepared {
        seed: cfg.seed,
        dataset,
        forget,
        teacher,
        teacher_log,
        original,
    })
}

/// Like [`prepare`], with the original model loaded from a checkpoint directory
/// instead of trained.
pub fn prepare_with_teacher(cfg: &ExperimentConfig, teacher_dir: &Path) -> Result<Prepared> {
    cfg.validate().context("config")?;
    let dataset = cfg.dataset_spec().build(cfg.seed).context("dataset")?;
    let forget = ForgetSpec::for_classes(&dataset.train, dataset.num_classes, cfg.forget_classes.iter().copied())
        .context("forget spec")?;
    let (teacher, meta) =
        checkpoint::load(teacher_dir).with_context(|| format!("loading {}", teacher_dir.display()))?;
    ensure!(
        teacher.num_classes() == dataset.num_classes && teacher.input_dim() == dataset.input_dim(),
        "checkpoint {} does not fit the dataset ({} classes, input {})",
        teacher_dir.display(),
        dataset.num_classes,
        dataset.input_dim()
    );
    if meta.seed != cfg.seed {
        log::warn!(
            "checkpoint was trained with seed {}, config seed is {}",
            meta.seed,
            cfg.seed
        );
    }
    let teacher_log = fs::read_to_string(teacher_dir.join("..").join("teacher_train.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or_default();
    let original = evaluate_accuracies(&teacher, &dataset, &forget)?;
    Ok(Prepared {
        seed: cfg.seed,
        dataset,
        forget,
        teacher,
        teacher_log,
        original,
    })
}

/// A seed stream as recorded in a report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSeed {
    pub stream: Stream,
    pub stream_id: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub chosen_alpha: f64,
    /// False when no α in the grid met the retain-drop rule (α = 0 is reported).
    pub constraint_satisfied: bool,
    pub proto_acc_f: f64,
    pub acc_r_star: f64,
    pub records: Vec<AlphaRecord>,
}

/// Deterministic results of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub method: String,
    pub seed: u64,
    pub original: Accuracies,
    pub unlearned: Accuracies,
    pub ou: OuReport,
    pub gaussian_ou: OuReport,
    pub attack: AttackOutcome,
    /// Forget-train accuracy after fine-tuning on a few forget samples.
    pub relearn_acc_f: Option<f64>,
    pub access: AccessLog,
    pub teacher_checksum: String,
    pub student_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub streams: Vec<StreamSeed>,
    pub wall_time_s: f64,
    /// Sweep coordinates, empty for a single run.
    #[serde(default)]
    pub grid: BTreeMap<String, String>,
    #[serde(default)]
    pub artifacts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Metrics,
    pub meta: RunMeta,
}

/// Everything produced by [`evaluate_method`]; only the report is serialized by default.
pub struct MethodOutcome {
    pub report: MetricsReport,
    pub run: UnlearnRun,
    pub tube: PerturbedSet,
    pub ou_points: Vec<f64>,
}

fn unlearn_config(cfg: &ExperimentConfig, data: &Dataset) -> UnlearnConfig {
    let mut u = cfg.unlearn.clone();
    u.seed = cfg.seed;
    u.perturb.input_bounds = data.input_bounds;
    u
}

fn eval_perturb(cfg: &ExperimentConfig, data: &Dataset, method: PerturbMethod) -> PerturbConfig {
    let mut p = cfg.eval.perturb.clone();
    p.method = method;
    p.input_bounds = data.input_bounds;
    p
}

pub fn stream_seeds(seed: u64) -> Vec<StreamSeed> {
    [
        Stream::Data,
        Stream::Init,
        Stream::Shuffle,
        Stream::TrainPerturb,
        Stream::EvalPerturb,
        Stream::EvalGaussian,
        Stream::RandomLabel,
        Stream::Attack,
        Stream::Relearn,
    ]
    .into_iter()
    .map(|s| StreamSeed {
        stream: s,
        stream_id: s.id(),
        seed: seeds::derive(seed, s, 0, 0),
    })
    .collect()
}

/// OU@ε over a tube drawn from the evaluation stream for `method`.
pub fn measure_ou(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    student: &Classifier,
    method: PerturbMethod,
) -> Result<(OuReport, PerturbedSet)> {
    let stream = match method {
        PerturbMethod::Pgd => Stream::EvalPerturb,
        PerturbMethod::Gaussian => Stream::EvalGaussian,
    };
    let pc = eval_perturb(cfg, &prep.dataset, method);
    let tube = epsilon_tube(
        &prep.teacher,
        &prep.dataset.train,
        &prep.forget,
        &pc,
        seeds::derive(cfg.seed, stream, 0, 0),
        stream,
    )?;
    let report = ou_at_eps_batched(
        &prep.teacher,
        student,
        &tube,
        &prep.forget.classes,
        cfg.eval.divergence,
        256,
        true,
    )?;
    Ok((report, tube))
}

/// Prototype attack on the unlearned model, with α tuned or fixed per the config.
pub fn run_attack(cfg: &ExperimentConfig, prep: &Prepared, student: &Classifier) -> Result<AttackOutcome> {
    let train = &prep.dataset.train;
    let support_idx = draw_support(train, &prep.forget, cfg.attack.k, cfg.seed);
    let support = support_inputs(train, &support_idx);
    let forget_eval = train.select(&prep.forget.indices);
    let retain_eval = train.select(&prep.forget.retain_indices(train));
    let grid = match cfg.attack.alpha {
        AlphaChoice::Tune => default_alpha_grid(),
        AlphaChoice::Fixed(a) => vec![a],
    };
    let tuning = tune_alpha(
        student,
        &support,
        &prep.forget.classes,
        &forget_eval,
        &retain_eval,
        &grid,
        cfg.attack.metric,
    )?;
    let (constraint_satisfied, chosen_alpha) = match cfg.attack.alpha {
        AlphaChoice::Tune => (tuning.constraint_satisfied, tuning.chosen_alpha),
        AlphaChoice::Fixed(a) => (tuning.constraint_satisfied, a),
    };
    let chosen = tuning
        .records
        .iter()
        .find(|r| r.alpha == chosen_alpha)
        .cloned()
        .expect("chosen alpha is recorded");
    Ok(AttackOutcome {
        chosen_alpha,
        constraint_satisfied,
        proto_acc_f: chosen.proto_acc_f,
        acc_r_star: chosen.acc_r_star,
        records: tuning.records,
    })
}

fn relearn(cfg: &ExperimentConfig, prep: &Prepared, student: &Classifier) -> Result<Option<f64>> {
    let n = cfg.attack.relearn_samples;
    if n == 0 {
        return Ok(None);
    }
    let mut pool = prep.forget.indices.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, Stream::Relearn, 1, 0));
    pool.shuffle(&mut rng);
    pool.truncate(n);
    pool.sort_unstable();
    let (model, _) = finetune_relearn(
        student,
        &prep.dataset.train,
        &prep.forget,
        &pool,
        &cfg.attack.relearn,
        cfg.seed,
    )?;
    Ok(evaluate_accuracies(&model, &prep.dataset, &prep.forget)?.acc_f)
}

/// Runs the configured unlearning method against a prepared original model.
pub fn run_method(cfg: &ExperimentConfig, prep: &Prepared, registry: &MethodRegistry) -> Result<UnlearnRun> {
    ensure!(
        cfg.seed == prep.seed,
        "prepared data belongs to seed {}, config has {}",
        prep.seed,
        cfg.seed
    );
    let method = registry.get(&cfg.method)?;
    let ucfg = unlearn_config(cfg, &prep.dataset);
    method
        .run(&UnlearnContext {
            teacher: &prep.teacher,
            dataset: &prep.dataset,
            forget: &prep.forget,
            config: &ucfg,
            original_training: &cfg.train,
        })
        .with_context(|| format!("unlearning with `{}`", cfg.method))
}

/// Runs the configured method and evaluates the result.
pub fn evaluate_method(cfg: &ExperimentConfig, prep: &Prepared, registry: &MethodRegistry) -> Result<MethodOutcome> {
    let start = Instant::now();
    let run = run_method(cfg, prep, registry)?;
    let student = &run.student;
    let unlearned = evaluate_accuracies(student, &prep.dataset, &prep.forget).context("accuracies")?;
    let (mut ou, tube) = measure_ou(cfg, prep, student, cfg.eval.perturb.method).context("OU@eps")?;
    let ou_points = ou.per_point_values.take().unwrap_or_default();
    let (mut gaussian_ou, _) = measure_ou(cfg, prep, student, PerturbMethod::Gaussian).context("Gaussian OU")?;
    gaussian_ou.per_point_values = None;
    let attack = run_attack(cfg, prep, student).context("prototype attack")?;
    let relearn_acc_f = relearn(cfg, prep, student).context("relearn attack")?;

    let metrics = Metrics {
        method: cfg.method.clone(),
        seed: cfg.seed,
        original: prep.original,
        unlearned,
        ou,
        gaussian_ou,
        attack,
        relearn_acc_f,
        access: run.record.access,
        teacher_checksum: run.record.teacher_checksum.clone(),
        student_checksum: run.record.student_checksum.clone(),
    };
    let report = MetricsReport {
        metrics,
        meta: RunMeta {
            config_hash: cfg.hash(),
            streams: stream_seeds(cfg.seed),
            wall_time_s: start.elapsed().as_secs_f64(),
            grid: BTreeMap::new(),
            artifacts: None,
        },
    };
    Ok(MethodOutcome {
        report,
        run,
        tube,
        ou_points,
    })
}

/// Writes the run directory: resolved config, report, unlearning trace,
/// evaluation tube with per-point OU values, and both checkpoints.
pub fn persist(dir: &Path, cfg: &ExperimentConfig, prep: &Prepared, outcome: &mut MethodOutcome) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    outcome.report.meta.artifacts = Some(dir.to_path_buf());
    fs::write(dir.join("config.resolved"), cfg.resolved())?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&outcome.report)?)?;
    fs::write(
        dir.join("unlearn.json"),
        serde_json::to_string_pretty(&outcome.run.record)?,
    )?;
    fs::write(
        dir.join("teacher_train.json"),
        serde_json::to_string_pretty(&prep.teacher_log)?,
    )?;
    fs::write(dir.join("tube.json"), outcome.tube.to_json()?)?;
    fs::write(dir.join("ou_points.json"), serde_json::to_string(&outcome.ou_points)?)?;
    let hash = cfg.hash();
    checkpoint::save(&dir.join("teacher"), &prep.teacher, cfg.seed, &hash)?;
    checkpoint::save(&dir.join("student"), &outcome.run.student, cfg.seed, &hash)?;
    Ok(())
}

/// Output directory of a run, keyed by method, seed and config hash.
pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join(format!("{}-s{}-{}", cfg.method, cfg.seed, cfg.hash()))
}

/// Full pipeline with artifacts under [`run_dir`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let prep = prepare(cfg)?;
    let registry = MethodRegistry::with_builtins();
    let mut outcome = evaluate_method(cfg, &prep, &registry)?;
    persist(&run_dir(cfg), cfg, &prep, &mut outcome).context("persisting artifacts")?;
    Ok(outcome.report)
}

/// Loads the record written next to a report.
pub fn load_unlearn_record(dir: &Path) -> Result<UnlearnRecord> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("unlearn.json"))?)?)
}
