//! Prototypical relearning attack: rebuild the forget-class head rows from a
//! few support embeddings of the unlearned feature extractor, interpolated
//! with the unlearned rows. Also the fine-tuning relearning baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AccessLog, ForgetSpec, Split};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::seeds::{self, Stream};
use crate::train::{train_supervised, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeMetric {
    Cosine,
    Euclidean,
}

impl fmt::Display for PrototypeMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrototypeMetric::Cosine => "cosine",
            PrototypeMetric::Euclidean => "euclidean",
        })
    }
}

impl FromStr for PrototypeMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" | "cos" => Ok(PrototypeMetric::Cosine),
            "euclidean" | "l2" => Ok(PrototypeMetric::Euclidean),
            other => Err(Error::UnknownName {
                kind: "prototype metric",
                name: other.into(),
                known: "cosine, euclidean".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Support samples per forget class.
    pub k: usize,
    pub alpha: f64,
    pub metric: PrototypeMetric,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            k: 5,
            alpha: 1.0,
            metric: PrototypeMetric::Cosine,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.k == 0 {
            return Err(Error::config("attack needs k >= 1 support samples"));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Componentwise mean of the support embeddings (one per row).
pub fn class_prototype(class: usize, embeddings: ArrayView2<f64>) -> Result<Array1<f64>> {
    embeddings.mean_axis(Axis(0)).ok_or(Error::EmptySupport(class))
}

/// Head row equivalent to nearest-prototype classification.
///
/// Cosine: `ŵ = p/‖p‖, b̂ = 0`. Euclidean: `ŵ = 2p, b̂ = −‖p‖²`.
pub fn prototype_head(class: usize, prototype: ArrayView1<f64>, metric: PrototypeMetric) -> Result<(Array1<f64>, f64)> {
    let sq = prototype.dot(&prototype);
    match metric {
        PrototypeMetric::Cosine => {
            let norm = sq.sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::DegeneratePrototype(class));
            }
            Ok((prototype.mapv(|v| v / norm), 0.0))
        }
        PrototypeMetric::Euclidean => Ok((prototype.mapv(|v| 2.0 * v), -sq)),
    }
}

/// `(α·ŵ + (1−α)·w_u, α·b̂ + (1−α)·b_u)`.
pub fn interpolate_head(
    w_hat: ArrayView1<f64>,
    b_hat: f64,
    w_u: ArrayView1<f64>,
    b_u: f64,
    alpha: f64,
) -> Result<(Array1<f64>, f64)> {
    check_alpha(alpha)?;
    if w_hat.len() != w_u.len() {
        return Err(Error::Shape {
            what: "interpolated head row",
            expected: w_u.len(),
            got: w_hat.len(),
        });
    }
    let w = &w_hat * alpha + &w_u * (1.0 - alpha);
    Ok((w, alpha * b_hat + (1.0 - alpha) * b_u))
}

/// Randomly picks `k` forget training indices per forget class (fewer if the class is smaller).
pub fn draw_support(train: &Split, forget: &ForgetSpec, k: usize, seed: u64) -> BTreeMap<usize, Vec<usize>> {
    let mut out = BTreeMap::new();
    for &c in &forget.classes {
        let mut pool: Vec<usize> = forget.indices.iter().copied().filter(|&i| train.y[i] == c).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, Stream::Attack, c as u64, 0));
        pool.shuffle(&mut rng);
        pool.truncate(k);
        out.insert(c, pool);
    }
    out
}

/// Gathers support inputs per class.
pub fn support_inputs(train: &Split, support: &BTreeMap<usize, Vec<usize>>) -> BTreeMap<usize, Array2<f64>> {
    support
        .iter()
        .map(|(&c, idx)| (c, train.x.select(Axis(0), idx)))
        .collect()
}

/// Patches the forget-class head rows of `model_u`; φ and retain rows are untouched.
pub fn prototypical_attack(
    model_u: &Classifier,
    support: &BTreeMap<usize, Array2<f64>>,
    forget_classes: &BTreeSet<usize>,
    alpha: f64,
    metric: PrototypeMetric,
) -> Result<Classifier> {
    check_alpha(alpha)?;
    if let Some(&c) = support.keys().find(|c| !forget_classes.contains(c)) {
        return Err(Error::protocol(format!("support class {c} is not a forget class")));
    }
    if let Some(&c) = forget_classes.iter().find(|c| !support.contains_key(c)) {
        return Err(Error::EmptySupport(c));
    }
    let mut rows = BTreeMap::new();
    for (&c, inputs) in support {
        if inputs.nrows() == 0 {
            return Err(Error::EmptySupport(c));
        }
        let emb = model_u.features(inputs.view())?;
        let proto = class_prototype(c, emb.view())?;
        let (w_hat, b_hat) = prototype_head(c, proto.view(), metric)?;
        let row = interpolate_head(
            w_hat.view(),
            b_hat,
            model_u.head_weight().row(c),
            model_u.head_bias()[c],
            alpha,
        )?;
        rows.insert(c, row);
    }
    model_u.replace_head_rows(&rows)
}

/// Top-1 accuracy in percent; `None` for an empty split.
pub fn accuracy(model: &Classifier, split: &Split) -> Result<Option<f64>> {
    if split.is_empty() {
        return Ok(None);
    }
    let pred = model.predict(split.x.view())?;
    let hits = pred.iter().zip(&split.y).filter(|(p, y)| p == y).count();
    Ok(Some(100.0 * hits as f64 / split.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub alpha: f64,
    /// Accuracy of the patched model on D_f.
    pub proto_acc_f: f64,
    /// Accuracy of the patched model on the retain evaluation split.
    pub acc_r_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaTuning {
    pub chosen_alpha: f64,
    pub constraint_satisfied: bool,
    /// Retain accuracy of the unpatched model.
    pub base_acc_r: f64,
    pub records: Vec<AlphaRecord>,
}

impl AlphaTuning {
    pub fn chosen(&self) -> &AlphaRecord {
        self.records
            .iter()
            .find(|r| r.alpha == self.chosen_alpha)
            .expect("chosen alpha comes from the grid")
    }
}

/// Default grid {1.0, 0.9, …, 0.0}.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).rev().map(|i| i as f64 / 10.0).collect()
}

/// Allowed retain-accuracy drop in percentage points.
pub const RETAIN_DROP_BUDGET: f64 = 1.0;

/// Evaluates every α in a descending grid and picks the largest one whose
/// patched retain accuracy stays within [`RETAIN_DROP_BUDGET`] of the unpatched one.
pub fn tune_alpha(
    model_u: &Classifier,
    support: &BTreeMap<usize, Array2<f64>>,
    forget_classes: &BTreeSet<usize>,
    forget_eval: &Split,
    retain_eval: &Split,
    grid: &[f64],
    metric: PrototypeMetric,
) -> Result<AlphaTuning> {
    if grid.is_empty() {
        return Err(Error::config("alpha grid is empty"));
    }
    if grid.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::config("alpha grid must be sorted in descending order"));
    }
    for &a in grid {
        check_alpha(a)?;
    }
    let base_acc_r = accuracy(model_u, retain_eval)?.ok_or(Error::EmptyData("retain evaluation split"))?;
    let mut records = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let patched = prototypical_attack(model_u, support, forget_classes, alpha, metric)?;
        records.push(AlphaRecord {
            alpha,
            proto_acc_f: accuracy(&patched, forget_eval)?.ok_or(Error::EmptyData("forget evaluation split"))?,
            acc_r_star: accuracy(&patched, retain_eval)?.expect("checked non-empty"),
        });
    }
    let feasible = records.iter().find(|r| r.acc_r_star >= base_acc_r - RETAIN_DROP_BUDGET);
    let (chosen_alpha, constraint_satisfied) = match feasible {
        Some(r) => (r.alpha, true),
        None => (0.0, false),
    };
    if !records.iter().any(|r| r.alpha == chosen_alpha) {
        // α = 0 was not in the grid; record the unpatched model explicitly.
        records.push(AlphaRecord {
            alpha: 0.0,
            proto_acc_f: accuracy(model_u, forget_eval)?.expect("checked non-empty"),
            acc_r_star: base_acc_r,
        });
    }
    Ok(AlphaTuning {
        chosen_alpha,
        constraint_satisfied,
        base_acc_r,
        records,
    })
}

/// Relearning by plain cross-entropy fine-tuning on a handful of forget samples.
pub fn finetune_relearn(
    model_u: &Classifier,
    train: &Split,
    forget: &ForgetSpec,
    sample_indices: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Classifier, AccessLog)> {
    if sample_indices.is_empty() {
        return Err(Error::EmptyData("relearning samples"));
    }
    if let Some(&i) = sample_indices.iter().find(|&&i| !forget.is_forget_class(train.y[i])) {
        return Err(Error::protocol(format!("relearning sample {i} is not from D_f")));
    }
    let (model, log) = train_supervised(
        model_u,
        train,
        forget,
        sample_indices,
        cfg,
        seeds::derive(seed, Stream::Relearn, 0, 0),
    )?;
    Ok((model, log.access))
}
