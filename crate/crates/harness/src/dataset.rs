//! Dataset construction: Gaussian blobs and a CSV image-corpus loader.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use ulab_core::data::{Dataset, Split};
use ulab_core::seeds::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    /// Scale of the class centers, drawn as `separation · N(0, I)`; samples have unit noise.
    pub separation: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            train_per_class: 500,
            test_per_class: 200,
            dim: 20,
            separation: 1.0,
        }
    }
}

/// A labeled image corpus stored as CSV rows of pixels followed by the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub path: PathBuf,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Pixel values are divided by this to land in [0, 1].
    pub max_value: f64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    Image(ImageSpec),
}

impl DatasetSpec {
    pub fn build(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Blobs(spec) => make_synthetic_dataset(spec, seed),
            DatasetSpec::Image(spec) => load_image_csv(spec, seed),
        }
    }
}

/// Deterministic Gaussian blobs with per-class train/test splits.
pub fn make_synthetic_dataset(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    ensure!(spec.classes >= 2, "blobs need at least 2 classes, got {}", spec.classes);
    ensure!(
        spec.train_per_class >= 2 && spec.test_per_class >= 2,
        "blobs need at least 2 samples per class per split"
    );
    ensure!(spec.dim >= 1, "blob dimension must be positive");
    ensure!(
        spec.separation.is_finite() && spec.separation >= 0.0,
        "blob separation must be finite and non-negative"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, Stream::Data, 0, 0));
    let centers = Array2::from_shape_fn((spec.classes, spec.dim), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        spec.separation * z
    });
    let draw = |per_class: usize, split: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, Stream::Data, split, 0));
        let n = per_class * spec.classes;
        let mut x = Array2::zeros((n, spec.dim));
        let mut y = Vec::with_capacity(n);
        for (row, mut out) in x.rows_mut().into_iter().enumerate() {
            let c = row % spec.classes;
            for (v, &m) in out.iter_mut().zip(centers.row(c)) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *v = m + noise;
            }
            y.push(c);
        }
        Split::new(x, y)
    };
    Ok(Dataset {
        train: draw(spec.train_per_class, 1)?,
        test: draw(spec.test_per_class, 2)?,
        num_classes: spec.classes,
        input_bounds: None,
    })
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(flate2::read::GzDecoder::new(BufReader::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Loads an image CSV (optionally gzipped), scales pixels to [0, 1] and makes a
/// stratified train/test split.
pub fn load_image_csv(spec: &ImageSpec, seed: u64) -> Result<Dataset> {
    let pixels = spec.channels * spec.height * spec.width;
    ensure!(pixels > 0, "image shape must be non-empty");
    ensure!(spec.max_value > 0.0, "image max_value must be positive");
    ensure!(
        spec.test_fraction > 0.0 && spec.test_fraction < 1.0,
        "test_fraction must lie in (0, 1)"
    );
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(open_maybe_gz(&spec.path)?);
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("reading row {line}"))?;
        if record.len() != pixels + 1 {
            bail!("row {line} has {} fields, expected {}", record.len(), pixels + 1);
        }
        let mut values = Vec::with_capacity(pixels);
        for field in record.iter().take(pixels) {
            let v: f64 = field
                .trim()
                .parse()
                .with_context(|| format!("row {line}: bad pixel `{field}`"))?;
            values.push((v / spec.max_value).clamp(0.0, 1.0));
        }
        let label: f64 = record[pixels]
            .trim()
            .parse()
            .with_context(|| format!("row {line}: bad label"))?;
        ensure!(
            label >= 0.0 && label.fract() == 0.0,
            "row {line}: label must be a non-negative integer"
        );
        rows.push((values, label as usize));
    }
    ensure!(!rows.is_empty(), "image corpus {} is empty", spec.path.display());
    let num_classes = rows.iter().map(|r| r.1).max().expect("non-empty") + 1;

    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, Stream::Data, 3, 0));
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].1 == c).collect();
        ensure!(members.len() >= 4, "class {c} has fewer than 4 images");
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64 * spec.test_fraction).round() as usize).clamp(2, members.len() - 2);
        test_idx.extend_from_slice(&members[..n_test]);
        train_idx.extend_from_slice(&members[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let gather = |idx: &[usize]| {
        let mut x = Array2::zeros((idx.len(), pixels));
        for (mut out, &i) in x.rows_mut().into_iter().zip(idx) {
            out.assign(&ndarray::ArrayView1::from(&rows[i].0));
        }
        Split::new(x, idx.iter().map(|&i| rows[i].1).collect())
    };
    Ok(Dataset {
        train: gather(&train_idx)?,
        test: gather(&test_idx)?,
        num_classes,
        input_bounds: Some((0.0, 1.0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let spec = BlobSpec {
            classes: 3,
            train_per_class: 10,
            test_per_class: 4,
            dim: 2,
            separation: 2.0,
        };
        let a = make_synthetic_dataset(&spec, 7).unwrap();
        let b = make_synthetic_dataset(&spec, 7).unwrap();
        assert_eq!(a.train.x, b.train.x);
        assert_eq!(a.test.y, b.test.y);
        assert_eq!(a.train.len(), 30);
        for c in 0..3 {
            assert_eq!(a.test.y.iter().filter(|&&y| y == c).count(), 4);
        }
        assert_ne!(a.train.x, make_synthetic_dataset(&spec, 8).unwrap().train.x);
    }

    #[test]
    fn zero_separation_shares_one_blob() {
        let spec = BlobSpec {
            separation: 0.0,
            train_per_class: 2000,
            ..BlobSpec::default()
        };
        let d = make_synthetic_dataset(&spec, 1).unwrap();
        for c in 0..spec.classes {
            let rows = d.train.indices_where(|y| y == c);
            let mean = d.train.select(&rows).x.mean_axis(ndarray::Axis(0)).unwrap();
            assert!(mean.iter().all(|m| m.abs() < 0.1), "{mean}");
        }
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let one_class = BlobSpec {
            classes: 1,
            ..BlobSpec::default()
        };
        assert!(make_synthetic_dataset(&one_class, 0).is_err());
        let tiny = BlobSpec {
            test_per_class: 1,
            ..BlobSpec::default()
        };
        assert!(make_synthetic_dataset(&tiny, 0).is_err());
    }

    #[test]
    fn image_csv_loads_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.csv");
        let mut f = File::create(&path).unwrap();
        for i in 0..24 {
            writeln!(f, "{},{},{},{},{}", i % 17, 16, 0, 8, i % 3).unwrap();
        }
        let spec = ImageSpec {
            path,
            channels: 1,
            height: 2,
            width: 2,
            max_value: 16.0,
            test_fraction: 0.25,
        };
        let d = load_image_csv(&spec, 0).unwrap();
        assert_eq!(d.num_classes, 3);
        assert_eq!(d.train.len() + d.test.len(), 24);
        assert_eq!(d.test.len(), 6);
        assert!(d.train.x.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d.input_bounds, Some((0.0, 1.0)));
    }
}
