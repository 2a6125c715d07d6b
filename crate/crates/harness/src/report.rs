//! Result tables: line-delimited report records plus Markdown and CSV summaries
//! with the columns Acc_f, Acc_r, Acc_ft, Acc_rt, OU@ε, Proto-Acc_f and Acc*_r.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use crate::experiment::{Accuracies, MetricsReport};

pub const COLUMNS: [&str; 7] = ["Acc_f", "Acc_r", "Acc_ft", "Acc_rt", "OU@eps", "Proto-Acc_f", "Acc*_r"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    /// Number of reports averaged into the row.
    pub runs: usize,
    pub values: [Option<f64>; 7],
}

fn accuracy_values(a: &Accuracies) -> [Option<f64>; 7] {
    [a.acc_f, a.acc_r, a.acc_ft, a.acc_rt, None, None, None]
}

/// The seven table values of one report, for the unlearned model.
pub fn report_values(r: &MetricsReport) -> [Option<f64>; 7] {
    let m = &r.metrics;
    let mut v = accuracy_values(&m.unlearned);
    v[4] = Some(m.ou.value);
    v[5] = Some(m.attack.proto_acc_f);
    v[6] = Some(m.attack.acc_r_star);
    v
}

fn mean_columns<'a>(rows: impl Iterator<Item = &'a [Option<f64>; 7]>) -> [Option<f64>; 7] {
    let mut sums = [0.0; 7];
    let mut counts = [0usize; 7];
    for row in rows {
        for (k, v) in row.iter().enumerate() {
            if let Some(v) = v {
                sums[k] += v;
                counts[k] += 1;
            }
        }
    }
    std::array::from_fn(|k| (counts[k] > 0).then(|| sums[k] / counts[k] as f64))
}

fn row_label(r: &MetricsReport) -> String {
    let coords: Vec<String> = r
        .meta
        .grid
        .iter()
        .filter(|(k, _)| k.as_str() != "method")
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    if coords.is_empty() {
        r.metrics.method.clone()
    } else {
        format!("{} ({})", r.metrics.method, coords.join(", "))
    }
}

/// One row for the original model (averaged over distinct seeds) followed by one
/// row per method and grid point, averaged over seeds, in first-seen order.
pub fn summarize(reports: &[MetricsReport]) -> Vec<TableRow> {
    let mut seen_seeds = BTreeSet::new();
    let originals: Vec<[Option<f64>; 7]> = reports
        .iter()
        .filter(|r| seen_seeds.insert(r.metrics.seed))
        .map(|r| accuracy_values(&r.metrics.original))
        .collect();
    let mut rows = Vec::new();
    if !originals.is_empty() {
        rows.push(TableRow {
            label: "original".into(),
            runs: originals.len(),
            values: mean_columns(originals.iter()),
        });
    }
    let mut labels: Vec<String> = Vec::new();
    for r in reports {
        let l = row_label(r);
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    for label in labels {
        let values: Vec<[Option<f64>; 7]> = reports
            .iter()
            .filter(|r| row_label(r) == label)
            .map(report_values)
            .collect();
        rows.push(TableRow {
            label,
            runs: values.len(),
            values: mean_columns(values.iter()),
        });
    }
    rows
}

fn cell(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.decimals$}"))
}

fn decimals(column: usize) -> usize {
    if COLUMNS[column] == "OU@eps" {
        4
    } else {
        2
    }
}

pub fn to_markdown(rows: &[TableRow]) -> String {
    let mut out = format!("| Method | Runs | {} |\n", COLUMNS.join(" | "));
    out.push_str(&format!("|---|---:|{}\n", "---:|".repeat(COLUMNS.len())));
    for row in rows {
        let cells: Vec<String> = row
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| cell(v, decimals(k)))
            .collect();
        out.push_str(&format!("| {} | {} | {} |\n", row.label, row.runs, cells.join(" | ")));
    }
    out
}

/// CSV with full-precision values; missing values are written as `-`.
pub fn to_csv(rows: &[TableRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method", "runs"];
    header.extend(COLUMNS);
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.label.clone(), row.runs.to_string()];
        rec.extend(
            row.values
                .iter()
                .map(|v| v.map_or_else(|| "-".to_string(), |v| v.to_string())),
        );
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn write_jsonl(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for r in reports {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsReport>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?);
    }
    Ok(out)
}

/// Reads reports from a `.jsonl` file, a single `metrics.json`, or a directory
/// holding either (run directories one level down are included).
pub fn load_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    if path.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(path)?.collect::<std::io::Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.path());
        let mut out = Vec::new();
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                let m = p.join("metrics.json");
                if m.is_file() {
                    out.extend(load_reports(&m)?);
                }
            } else if p.extension().is_some_and(|x| x == "jsonl") || p.file_name().is_some_and(|n| n == "metrics.json")
            {
                out.extend(load_reports(&p)?);
            }
        }
        return Ok(out);
    }
    match path.extension().and_then(|x| x.to_str()) {
        Some("jsonl") => read_jsonl(path),
        Some("json") => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(vec![
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            ])
        }
        _ => bail!("{}: expected a .jsonl or .json file or a directory", path.display()),
    }
}

/// Writes `report.md`, `report.csv` and `reports.jsonl` into `dir`.
pub fn write_report(dir: &Path, reports: &[MetricsReport]) -> Result<Vec<TableRow>> {
    ensure!(!reports.is_empty(), "no reports to summarize");
    fs::create_dir_all(dir)?;
    let rows = summarize(reports);
    fs::write(dir.join("report.md"), to_markdown(&rows))?;
    fs::write(dir.join("report.csv"), to_csv(&rows)?)?;
    write_jsonl(&dir.join("reports.jsonl"), reports)?;
    Ok(rows)
}
