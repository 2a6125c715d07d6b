//! Grid sweeps over evaluation radius, training radius, λ₁, λ₂, α and method.
//!
//! The original model is trained once per seed and shared by every grid point.
//! Points run concurrently; a failing point is recorded and the rest continue.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, ensure, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ulab_core::unlearn::MethodRegistry;

use crate::config::ExperimentConfig;
use crate::experiment::{evaluate_method, persist, prepare, run_dir, MetricsReport, Prepared};
use crate::plot::{LinePlot, Series};
use crate::report;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    EpsEval,
    EpsTrain,
    Lambda1,
    Lambda2,
    Alpha,
    Method,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::EpsEval,
        SweepAxis::EpsTrain,
        SweepAxis::Lambda1,
        SweepAxis::Lambda2,
        SweepAxis::Alpha,
        SweepAxis::Method,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::EpsEval => "eps_eval",
            SweepAxis::EpsTrain => "eps_train",
            SweepAxis::Lambda1 => "lambda1",
            SweepAxis::Lambda2 => "lambda2",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Method => "method",
        }
    }

    /// The flat config key the axis writes.
    pub fn config_key(self) -> &'static str {
        match self {
            SweepAxis::EpsEval => "eval.eps",
            SweepAxis::EpsTrain => "unlearn.eps",
            SweepAxis::Lambda1 => "unlearn.lambda1",
            SweepAxis::Lambda2 => "unlearn.lambda2",
            SweepAxis::Alpha => "attack.alpha",
            SweepAxis::Method => "method",
        }
    }

    pub fn is_numeric(self) -> bool {
        self != SweepAxis::Method
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let known: Vec<&str> = SweepAxis::ALL.iter().map(|a| a.name()).collect();
            anyhow!("unknown sweep axis `{s}` (known: {})", known.join(", "))
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    axes: BTreeMap<SweepAxis, Vec<String>>,
}

impl SweepGrid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, axis: SweepAxis, values: &[&str]) -> Result<Self> {
        self.add(axis, values.iter().map(|v| v.to_string()).collect())?;
        Ok(self)
    }

    pub fn add(&mut self, axis: SweepAxis, values: Vec<String>) -> Result<()> {
        ensure!(!values.is_empty(), "sweep axis `{axis}` has no values");
        ensure!(!self.axes.contains_key(&axis), "sweep axis `{axis}` given twice");
        if axis.is_numeric() {
            for v in &values {
                v.parse::<f64>()
                    .map_err(|_| anyhow!("sweep axis `{axis}`: `{v}` is not a number"))?;
            }
        }
        self.axes.insert(axis, values);
        Ok(())
    }

    /// Parses `axis=v1,v2,...`.
    pub fn add_spec(&mut self, spec: &str) -> Result<()> {
        let (axis, values) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("sweep spec `{spec}` should look like axis=v1,v2"))?;
        let values = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        self.add(axis.trim().parse()?, values)
    }

    pub fn axes(&self) -> impl Iterator<Item = (SweepAxis, &[String])> {
        self.axes.iter().map(|(a, v)| (*a, v.as_slice()))
    }

    /// Cartesian product in axis order; an empty grid has one empty point.
    pub fn points(&self) -> Vec<BTreeMap<SweepAxis, String>> {
        let mut points = vec![BTreeMap::new()];
        for (&axis, values) in &self.axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.insert(axis, v.clone());
                        q
                    })
                })
                .collect();
        }
        points
    }
}

fn coords(point: &BTreeMap<SweepAxis, String>) -> BTreeMap<String, String> {
    point.iter().map(|(a, v)| (a.name().to_string(), v.clone())).collect()
}

/// Applies a grid point to a copy of the base config.
pub fn point_config(base: &ExperimentConfig, point: &BTreeMap<SweepAxis, String>) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    for (axis, value) in point {
        cfg.set(axis.config_key(), value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub seed: u64,
    pub grid: BTreeMap<String, String>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub reports: Vec<MetricsReport>,
    pub failures: Vec<SweepFailure>,
}

fn run_point(
    base: &ExperimentConfig,
    prep: &Prepared,
    point: &BTreeMap<SweepAxis, String>,
    registry: &MethodRegistry,
    artifacts: Option<&Path>,
) -> Result<MetricsReport> {
    let mut cfg = point_config(base, point)?;
    let mut outcome = evaluate_method(&cfg, prep, registry)?;
    outcome.report.meta.grid = coords(point);
    if let Some(dir) = artifacts {
        cfg.out = dir.to_path_buf();
        persist(&run_dir(&cfg), &cfg, prep, &mut outcome)?;
    }
    Ok(outcome.report)
}

/// Runs every grid point for every seed. When `artifacts` is set, each point
/// persists a full run directory below it.
pub fn run_sweep(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    seeds: &[u64],
    artifacts: Option<&Path>,
) -> Result<SweepOutcome> {
    ensure!(!seeds.is_empty(), "sweep needs at least one seed");
    let points = grid.points();
    let registry = MethodRegistry::with_builtins();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for &seed in seeds {
        let mut seeded = base.clone();
        seeded.seed = seed;
        let prep = match prepare(&seeded) {
            Ok(p) => p,
            Err(e) => {
                log::error!("seed {seed}: original model failed: {e:#}");
                failures.extend(points.iter().map(|p| SweepFailure {
                    seed,
                    grid: coords(p),
                    error: format!("original model: {e:#}"),
                }));
                continue;
            }
        };
        let results: Vec<Result<MetricsReport>> = points
            .par_iter()
            .map(|p| run_point(&seeded, &prep, p, &registry, artifacts))
            .collect();
        for (p, r) in points.iter().zip(results) {
            match r {
                Ok(report) => reports.push(report),
                Err(e) => {
                    log::warn!("seed {seed} {:?}: {e:#}", coords(p));
                    failures.push(SweepFailure {
                        seed,
                        grid: coords(p),
                        error: format!("{e:#}"),
                    });
                }
            }
        }
    }
    Ok(SweepOutcome { reports, failures })
}

/// Seed-averaged metrics at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub grid: BTreeMap<String, String>,
    pub seeds: usize,
    pub acc_f: Option<f64>,
    pub acc_r: Option<f64>,
    pub acc_ft: Option<f64>,
    pub acc_rt: Option<f64>,
    pub ou: f64,
    pub gaussian_ou: f64,
    pub proto_acc_f: f64,
    pub acc_r_star: f64,
    pub chosen_alpha: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| mean(present.into_iter()))
}

/// Groups reports by grid coordinates (first-seen order) and averages over seeds.
pub fn aggregate(reports: &[MetricsReport]) -> Vec<SweepRow> {
    let mut keys: Vec<&BTreeMap<String, String>> = Vec::new();
    for r in reports {
        if !keys.contains(&&r.meta.grid) {
            keys.push(&r.meta.grid);
        }
    }
    keys.into_iter()
        .map(|key| {
            let group: Vec<&MetricsReport> = reports.iter().filter(|r| &r.meta.grid == key).collect();
            let m = || group.iter().map(|r| &r.metrics);
            SweepRow {
                grid: key.clone(),
                seeds: group.len(),
                acc_f: mean_opt(m().map(|x| x.unlearned.acc_f)),
                acc_r: mean_opt(m().map(|x| x.unlearned.acc_r)),
                acc_ft: mean_opt(m().map(|x| x.unlearned.acc_ft)),
                acc_rt: mean_opt(m().map(|x| x.unlearned.acc_rt)),
                ou: mean(m().map(|x| x.ou.value)),
                gaussian_ou: mean(m().map(|x| x.gaussian_ou.value)),
                proto_acc_f: mean(m().map(|x| x.attack.proto_acc_f)),
                acc_r_star: mean(m().map(|x| x.attack.acc_r_star)),
                chosen_alpha: mean(m().map(|x| x.attack.chosen_alpha)),
            }
        })
        .collect()
}

const PLOTTED: [(&str, &str); 4] = [
    ("ou", "OU@eps"),
    ("acc_f", "Acc_f"),
    ("acc_rt", "Acc_rt"),
    ("proto_acc_f", "Proto-Acc_f"),
];

fn metric(row: &SweepRow, name: &str) -> Option<f64> {
    match name {
        "ou" => Some(row.ou),
        "acc_f" => row.acc_f,
        "acc_rt" => row.acc_rt,
        "proto_acc_f" => Some(row.proto_acc_f),
        _ => None,
    }
}

/// One line plot per numeric axis with at least two values and per plotted
/// metric; series are the combinations of the remaining coordinates.
pub fn line_plots(grid: &SweepGrid, rows: &[SweepRow]) -> Vec<(String, LinePlot)> {
    let mut plots = Vec::new();
    for (axis, values) in grid.axes() {
        if !axis.is_numeric() || values.len() < 2 {
            continue;
        }
        for (name, label) in PLOTTED {
            let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for row in rows {
                let (Some(x), Some(y)) = (
                    row.grid.get(axis.name()).and_then(|v| v.parse().ok()),
                    metric(row, name),
                ) else {
                    continue;
                };
                let rest: Vec<String> = row
                    .grid
                    .iter()
                    .filter(|(k, _)| k.as_str() != axis.name())
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect();
                let key = if rest.is_empty() {
                    "all".to_string()
                } else {
                    rest.join(", ")
                };
                series.entry(key).or_default().push((x, y));
            }
            let series = series
                .into_iter()
                .map(|(name, mut points)| {
                    points.sort_by(|a, b| a.0.total_cmp(&b.0));
                    Series { name, points }
                })
                .collect();
            plots.push((
                format!("{}_{name}.svg", axis.name()),
                LinePlot {
                    title: format!("{label} vs {}", axis.name()),
                    x_label: axis.name().into(),
                    y_label: label.into(),
                    series,
                },
            ));
        }
    }
    plots
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

pub fn rows_csv(grid: &SweepGrid, rows: &[SweepRow]) -> Result<String> {
    let axes: Vec<SweepAxis> = grid.axes().map(|(a, _)| a).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = axes.iter().map(|a| a.name().to_string()).collect();
    header.extend(
        [
            "seeds",
            "Acc_f",
            "Acc_r",
            "Acc_ft",
            "Acc_rt",
            "OU@eps",
            "Gaussian-OU",
            "Proto-Acc_f",
            "Acc*_r",
            "alpha",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for row in rows {
        let mut rec: Vec<String> = axes
            .iter()
            .map(|a| row.grid.get(a.name()).cloned().unwrap_or_default())
            .collect();
        rec.push(row.seeds.to_string());
        rec.extend([row.acc_f, row.acc_r, row.acc_ft, row.acc_rt].map(fmt_opt));
        rec.extend(
            [
                row.ou,
                row.gaussian_ou,
                row.proto_acc_f,
                row.acc_r_star,
                row.chosen_alpha,
            ]
            .map(|v| v.to_string()),
        );
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Writes `sweep.jsonl`, `sweep.csv`, `failures.json`, the summary tables and the plots.
pub fn write_outputs(dir: &Path, grid: &SweepGrid, outcome: &SweepOutcome) -> Result<Vec<SweepRow>> {
    fs::create_dir_all(dir)?;
    report::write_jsonl(&dir.join("sweep.jsonl"), &outcome.reports)?;
    fs::write(
        dir.join("failures.json"),
        serde_json::to_string_pretty(&outcome.failures)?,
    )?;
    fs::write(dir.join("grid.json"), serde_json::to_string_pretty(grid)?)?;
    if outcome.reports.is_empty() {
        bail!("every sweep point failed; see {}", dir.join("failures.json").display());
    }
    let rows = aggregate(&outcome.reports);
    fs::write(dir.join("sweep.csv"), rows_csv(grid, &rows)?)?;
    report::write_report(dir, &outcome.reports)?;
    for (file, plot) in line_plots(grid, &rows) {
        fs::write(dir.join(file), plot.to_svg())?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points_are_the_cartesian_product() {
        let mut g = SweepGrid::new();
        g.add_spec("lambda1=0.5,1").unwrap();
        g.add_spec("method=spotter,neggrad,retrain").unwrap();
        let pts = g.points();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0][&SweepAxis::Lambda1], "0.5");
        assert_eq!(pts[0][&SweepAxis::Method], "spotter");
        assert_eq!(pts[5][&SweepAxis::Lambda1], "1");
        assert_eq!(pts[5][&SweepAxis::Method], "retrain");
    }

    #[test]
    fn empty_grid_is_one_point() {
        assert_eq!(SweepGrid::new().points(), vec![BTreeMap::new()]);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut g = SweepGrid::new();
        assert!(g.add_spec("beta=1").is_err());
        assert!(g.add_spec("eps_eval=abc").is_err());
        assert!(g.add_spec("alpha").is_err());
        g.add_spec("alpha=0,1").unwrap();
        assert!(g.add_spec("alpha=0.5").is_err());
    }

    #[test]
    fn point_config_writes_the_axis_keys() {
        let base = ExperimentConfig::default();
        let point: BTreeMap<SweepAxis, String> = [
            (SweepAxis::EpsEval, "0.1".to_string()),
            (SweepAxis::EpsTrain, "0.05".to_string()),
            (SweepAxis::Lambda2, "2".to_string()),
            (SweepAxis::Alpha, "0.3".to_string()),
        ]
        .into_iter()
        .collect();
        let cfg = point_config(&base, &point).unwrap();
        assert_eq!(cfg.eval.perturb.epsilon, 0.1);
        assert_eq!(cfg.unlearn.perturb.epsilon, 0.05);
        assert_eq!(cfg.unlearn.lambdas.lambda2, 2.0);
        assert_eq!(cfg.attack.alpha, crate::config::AlphaChoice::Fixed(0.3));
        let bad: BTreeMap<SweepAxis, String> = [(SweepAxis::Lambda1, "2".to_string())].into_iter().collect();
        assert!(point_config(&base, &bad).is_err());
    }
}
