use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ulab::config::ExperimentConfig;
use ulab::embed::export_embeddings_2d;
use ulab::experiment::{
    evaluate_method, measure_ou, persist, prepare, prepare_with_teacher, run_attack, run_dir, run_method, Prepared,
};
use ulab::report::{self, load_reports, summarize, to_markdown};
use ulab::sweep::{run_sweep, write_outputs, SweepGrid};
use ulab_core::model::{checkpoint, Classifier};
use ulab_core::perturb::PerturbMethod;
use ulab_core::unlearn::MethodRegistry;

/// Class-level unlearning workbench: train, unlearn, measure over-unlearning,
/// attack with prototypes, sweep and report.
#[derive(Parser, Debug)]
#[command(name = "ulab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Unlearning method: spotter, random-label, neggrad, retrain, or a `+spotter` variant.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Evaluation radius for OU@eps.
    #[arg(long, global = true)]
    eps: Option<f64>,
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    #[arg(long, global = true)]
    lambda2: Option<f64>,
    /// Fixed interpolation weight for the prototype attack, or `tune`.
    #[arg(long, global = true)]
    alpha: Option<String>,
    /// Support samples per forget class for the prototype attack.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Divergence used by OU@eps: kl or js.
    #[arg(long, global = true)]
    divergence: Option<String>,
    /// Evaluation perturbation: pgd or gaussian.
    #[arg(long, global = true)]
    perturb: Option<String>,
    /// Extra config overrides, `key=value`; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the original model and save its checkpoint.
    Train,
    /// Unlearn, evaluate every metric and persist the run directory.
    Unlearn(ModelArgs),
    /// OU@eps (and its Gaussian companion) of an unlearned model.
    EvalOu(ModelArgs),
    /// Prototypical relearning attack with alpha tuning.
    Attack(ModelArgs),
    /// Grid sweep across seeds.
    Sweep {
        /// Grid axis, `axis=v1,v2`; axes: eps_eval, eps_train, lambda1, lambda2, alpha, method.
        #[arg(long = "grid", value_name = "AXIS=VALUES")]
        grid: Vec<String>,
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Persist a full run directory for every point.
        #[arg(long)]
        artifacts: bool,
    },
    /// Summarize metrics.json / .jsonl files or run directories into tables.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Project original and unlearned embeddings to 2-D for plotting.
    ExportEmbeddings(ModelArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Original-model checkpoint directory; trained from the config when absent.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Unlearned-model checkpoint directory; produced by running the method when absent.
    #[arg(long)]
    student: Option<PathBuf>,
}

fn build_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects key=value, got `{kv}`"))?;
        cfg.set(k.trim(), v)?;
    }
    let flags: [(&str, Option<String>); 10] = [
        ("seed", c.seed.map(|v| v.to_string())),
        ("out", c.out.as_ref().map(|p| p.display().to_string())),
        ("method", c.method.clone()),
        ("eval.eps", c.eps.map(|v| v.to_string())),
        ("unlearn.lambda1", c.lambda1.map(|v| v.to_string())),
        ("unlearn.lambda2", c.lambda2.map(|v| v.to_string())),
        ("attack.alpha", c.alpha.clone()),
        ("attack.k", c.k.map(|v| v.to_string())),
        ("eval.divergence", c.divergence.clone()),
        ("eval.perturb", c.perturb.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v).with_context(|| format!("flag for `{key}`"))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_dir(cfg: &ExperimentConfig, stage: &str) -> Result<PathBuf> {
    let dir = cfg
        .out
        .join(format!("{stage}-{}-s{}-{}", cfg.method, cfg.seed, cfg.hash()));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.resolved"), cfg.resolved())?;
    Ok(dir)
}

fn load_prepared(cfg: &ExperimentConfig, args: &ModelArgs) -> Result<Prepared> {
    match &args.teacher {
        Some(dir) => prepare_with_teacher(cfg, dir),
        None => prepare(cfg),
    }
}

fn load_student(cfg: &ExperimentConfig, prep: &Prepared, args: &ModelArgs) -> Result<Classifier> {
    match &args.student {
        Some(dir) => Ok(checkpoint::load(dir)
            .with_context(|| format!("loading {}", dir.display()))?
            .0),
        None => Ok(run_method(cfg, prep, &MethodRegistry::with_builtins())?.student),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Train => {
            let mut dir_cfg = cfg.clone();
            dir_cfg.method = "original".into();
            let dir = stage_dir(&dir_cfg, "train")?;
            let prep = prepare(&cfg)?;
            checkpoint::save(&dir.join("teacher"), &prep.teacher, cfg.seed, &cfg.hash())?;
            write_json(&dir.join("teacher_train.json"), &prep.teacher_log)?;
            write_json(&dir.join("accuracies.json"), &prep.original)?;
            println!("{}", serde_json::to_string_pretty(&prep.original)?);
            println!("checkpoint: {}", dir.join("teacher").display());
        }
        Command::Unlearn(args) => {
            let prep = load_prepared(&cfg, &args)?;
            let mut outcome = evaluate_method(&cfg, &prep, &MethodRegistry::with_builtins())?;
            let dir = run_dir(&cfg);
            persist(&dir, &cfg, &prep, &mut outcome)?;
            print!("{}", to_markdown(&summarize(std::slice::from_ref(&outcome.report))));
            println!("run directory: {}", dir.display());
        }
        Command::EvalOu(args) => {
            let prep = load_prepared(&cfg, &args)?;
            let student = load_student(&cfg, &prep, &args)?;
            let dir = stage_dir(&cfg, "eval-ou")?;
            let (ou, tube) = measure_ou(&cfg, &prep, &student, cfg.eval.perturb.method)?;
            let (gaussian, _) = measure_ou(&cfg, &prep, &student, PerturbMethod::Gaussian)?;
            write_json(
                &dir.join("ou.json"),
                &serde_json::json!({ "ou": ou, "gaussian_ou": gaussian }),
            )?;
            fs::write(dir.join("tube.json"), tube.to_json()?)?;
            println!(
                "OU@{} ({} points, {}) = {:.6}",
                ou.epsilon, ou.n_points, ou.perturb_method, ou.value
            );
            println!("Gaussian-OU (sigma {}) = {:.6}", cfg.eval.perturb.sigma, gaussian.value);
        }
        Command::Attack(args) => {
            let prep = load_prepared(&cfg, &args)?;
            let student = load_student(&cfg, &prep, &args)?;
            let dir = stage_dir(&cfg, "attack")?;
            let outcome = run_attack(&cfg, &prep, &student)?;
            write_json(&dir.join("attack.json"), &outcome)?;
            println!("{:>6} {:>12} {:>10}", "alpha", "Proto-Acc_f", "Acc*_r");
            for r in &outcome.records {
                println!("{:>6.2} {:>12.2} {:>10.2}", r.alpha, r.proto_acc_f, r.acc_r_star);
            }
            println!(
                "chosen alpha {} (constraint {}): Proto-Acc_f {:.2}, Acc*_r {:.2}",
                outcome.chosen_alpha,
                if outcome.constraint_satisfied { "met" } else { "not met" },
                outcome.proto_acc_f,
                outcome.acc_r_star
            );
        }
        Command::Sweep { grid, seeds, artifacts } => {
            let mut g = SweepGrid::new();
            for spec in &grid {
                g.add_spec(spec)?;
            }
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let dir = cfg.out.join(format!("sweep-{}", cfg.hash()));
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("config.resolved"), cfg.resolved())?;
            let points_dir = dir.join("points");
            let outcome = run_sweep(&cfg, &g, &seeds, artifacts.then_some(points_dir.as_path()))?;
            let rows = write_outputs(&dir, &g, &outcome)?;
            print!("{}", to_markdown(&summarize(&outcome.reports)));
            println!(
                "{} grid points, {} reports, {} failures -> {}",
                rows.len(),
                outcome.reports.len(),
                outcome.failures.len(),
                dir.display()
            );
        }
        Command::Report { inputs } => {
            let mut reports = Vec::new();
            for p in &inputs {
                reports.extend(load_reports(p)?);
            }
            fs::create_dir_all(&cfg.out)?;
            let rows = report::write_report(&cfg.out, &reports)?;
            print!("{}", to_markdown(&rows));
        }
        Command::ExportEmbeddings(args) => {
            let prep = load_prepared(&cfg, &args)?;
            let student = load_student(&cfg, &prep, &args)?;
            let dir = stage_dir(&cfg, "embeddings")?;
            let train = &prep.dataset.train;
            let before = export_embeddings_2d(&prep.teacher, train, &prep.forget)?;
            let after = export_embeddings_2d(&student, train, &prep.forget)?;
            before.write(&dir, "original", "original model")?;
            after.write(&dir, "unlearned", &format!("after {}", cfg.method))?;
            println!(
                "forget-class mean pairwise cosine: original {:.4}, unlearned {:.4}",
                before.forget_mean_cosine, after.forget_mean_cosine
            );
            println!("written to {}", dir.display());
        }
    }
    Ok(())
}
