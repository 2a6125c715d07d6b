//! 2-D projection of penultimate-layer embeddings for cluster-versus-scatter plots.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use ulab_core::data::{ForgetSpec, Split};
use ulab_core::model::Classifier;
use ulab_core::objective::dispersion_loss;

use crate::plot::scatter_svg;

/// Projects rows onto their top two principal components.
///
/// Inputs that are already at most 2-D pass through (a single column is padded
/// with zeros). Each component's sign is fixed so that its largest-magnitude
/// loading is positive, which makes the output deterministic.
pub fn project_2d(embeddings: ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = embeddings.dim();
    if d == 2 {
        return embeddings.to_owned();
    }
    if d < 2 {
        let mut out = Array2::zeros((n, 2));
        for (mut row, src) in out.rows_mut().into_iter().zip(embeddings.rows()) {
            if let Some(&v) = src.first() {
                row[0] = v;
            }
        }
        return out;
    }
    if n == 0 {
        return Array2::zeros((0, 2));
    }
    let mean = embeddings.mean_axis(Axis(0)).expect("non-empty");
    let centered = &embeddings - &mean;
    let cov = centered.t().dot(&centered) / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = Array2::zeros((d, 2));
    for (k, &col) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(col);
        let lead = (0..d).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            basis[[i, k]] = sign * v[i];
        }
    }
    centered.dot(&basis)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub x: f64,
    pub y: f64,
    pub class: usize,
    pub is_forget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingExport {
    pub points: Vec<EmbeddingPoint>,
    /// Mean pairwise cosine similarity within the forget classes, measured on
    /// the full-dimensional embeddings. Lower means more dispersed.
    pub forget_mean_cosine: f64,
}

/// Embeds `split` with `model`, projects to 2-D and computes the dispersion statistic.
pub fn export_embeddings_2d(model: &Classifier, split: &Split, forget: &ForgetSpec) -> Result<EmbeddingExport> {
    let emb = model.features(split.x.view())?;
    let projected = project_2d(emb.view());
    let points = projected
        .rows()
        .into_iter()
        .zip(&split.y)
        .map(|(r, &c)| EmbeddingPoint {
            x: r[0],
            y: r[1],
            class: c,
            is_forget: forget.is_forget_class(c),
        })
        .collect();
    Ok(EmbeddingExport {
        points,
        forget_mean_cosine: dispersion_loss(emb.view(), &split.y, &forget.classes).value,
    })
}

impl EmbeddingExport {
    /// Writes `{stem}.csv` (x, y, class, is_forget), `{stem}.svg` and `{stem}.json`.
    pub fn write(&self, dir: &Path, stem: &str, title: &str) -> Result<()> {
        ensure!(!stem.is_empty(), "empty file stem");
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        w.write_record(["x", "y", "class", "is_forget"])?;
        for p in &self.points {
            w.serialize((p.x, p.y, p.class, p.is_forget))?;
        }
        w.flush()?;
        let scatter: Vec<(f64, f64, bool)> = self.points.iter().map(|p| (p.x, p.y, p.is_forget)).collect();
        fs::write(dir.join(format!("{stem}.svg")), scatter_svg(title, &scatter))?;
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&serde_json::json!({
                "points": self.points.len(),
                "forget_mean_cosine": self.forget_mean_cosine,
            }))?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn two_columns_pass_through() {
        let e = arr2(&[[1.0, 2.0], [3.0, -4.0], [0.5, 0.0]]);
        assert_eq!(project_2d(e.view()), e);
    }

    #[test]
    fn one_column_is_padded() {
        let e = arr2(&[[1.0], [2.0]]);
        assert_eq!(project_2d(e.view()), arr2(&[[1.0, 0.0], [2.0, 0.0]]));
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        // Points spread along (1, 1, 0) with a small (0, 0, 1) wobble uncorrelated with the spread.
        let e = Array2::from_shape_fn((20, 3), |(i, j)| {
            let t = i as f64 - 9.5;
            match j {
                0 | 1 => t,
                _ => 0.1 * if matches!(i % 4, 0 | 3) { 1.0 } else { -1.0 },
            }
        });
        let p = project_2d(e.view());
        assert_eq!(p.dim(), (20, 2));
        for i in 0..20 {
            let t = i as f64 - 9.5;
            assert_abs_diff_eq!(p[[i, 0]].abs(), t.abs() * 2f64.sqrt(), epsilon = 1e-9);
            assert_abs_diff_eq!(p[[i, 1]].abs(), 0.1, epsilon = 1e-9);
        }
        // Deterministic sign: the largest loading of the first axis is positive.
        assert!(p[[19, 0]] > 0.0);
    }

    #[test]
    fn projection_is_reproducible() {
        let e = Array2::from_shape_fn((15, 6), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        assert_eq!(project_2d(e.view()), project_2d(e.view()));
    }
}
