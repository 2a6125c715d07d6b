//! The ε-tube around the forget set: worst-case (PGD, L∞) or Gaussian
//! perturbations of forget samples, with an optional boundary-buffer filter.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ForgetSpec, Split};
use crate::divergence::softmax;
use crate::error::{Error, Result};
use crate::model::{logit_margin, Classifier};
use crate::seeds::{self, Stream};

/// Rows per PGD batch.
const PGD_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMethod {
    Pgd,
    Gaussian,
}

impl fmt::Display for PerturbMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbMethod::Pgd => "pgd",
            PerturbMethod::Gaussian => "gaussian",
        })
    }
}

impl FromStr for PerturbMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pgd" => Ok(PerturbMethod::Pgd),
            "gaussian" => Ok(PerturbMethod::Gaussian),
            other => Err(Error::UnknownName {
                kind: "perturbation method",
                name: other.into(),
                known: "pgd, gaussian".into(),
            }),
        }
    }
}

/// Perturbation settings. The PGD norm is always L∞.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub method: PerturbMethod,
    pub epsilon: f64,
    pub steps: usize,
    /// `None` means `epsilon / steps`.
    pub step_size: Option<f64>,
    /// Start PGD from a uniform point in the ε-ball instead of `x`.
    pub random_start: bool,
    pub sigma: f64,
    /// Keep only points with `|margin| <= boundary_buffer`; `+∞` disables the filter.
    #[serde(with = "unbounded")]
    pub boundary_buffer: f64,
    pub input_bounds: Option<(f64, f64)>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            method: PerturbMethod::Pgd,
            epsilon: 0.03,
            steps: 3,
            step_size: None,
            random_start: false,
            sigma: 0.1,
            boundary_buffer: f64::INFINITY,
            input_bounds: None,
        }
    }
}

impl PerturbConfig {
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        Self {
            epsilon,
            steps,
            ..Self::default()
        }
    }

    pub fn gaussian(sigma: f64) -> Self {
        Self {
            method: PerturbMethod::Gaussian,
            sigma,
            ..Self::default()
        }
    }

    pub fn effective_step(&self) -> f64 {
        self.step_size.unwrap_or(if self.steps == 0 {
            0.0
        } else {
            self.epsilon / self.steps as f64
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if self.boundary_buffer.is_nan() || self.boundary_buffer < 0.0 {
            return Err(Error::config("boundary buffer must be >= 0"));
        }
        if self.method == PerturbMethod::Pgd {
            if self.steps == 0 {
                return Err(Error::config("PGD needs at least one step"));
            }
            if let Some(s) = self.step_size {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::config("PGD step size must be positive"));
                }
            }
        }
        if let Some((lo, hi)) = self.input_bounds {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::config("input bounds must satisfy lower <= upper"));
            }
        }
        Ok(())
    }

    fn clamp(&self, v: f64) -> f64 {
        match self.input_bounds {
            Some((lo, hi)) => v.clamp(lo, hi),
            None => v,
        }
    }
}

/// Per-sample gradient of the cross-entropy with respect to the inputs.
fn ce_input_gradient(model: &Classifier, x: ArrayView2<f64>, labels: &[usize]) -> Result<Array2<f64>> {
    let pass = model.forward_train(x)?;
    let mut d_logits = pass.logits.clone();
    for (mut row, &y) in d_logits.rows_mut().into_iter().zip(labels) {
        let p = softmax(row.as_slice().expect("standard layout"));
        row.assign(&Array1::from(p));
        row[y] -= 1.0;
    }
    let (_, d_x) = model.backward(&pass, d_logits.view(), None);
    if d_x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Perturbation("non-finite input gradient".into()));
    }
    Ok(d_x)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// L∞ PGD on the cross-entropy of `model` at the given labels, batched.
/// Each row's result depends only on that row (and its `start_seeds` entry).
pub fn pgd_perturb_batch(
    model: &Classifier,
    x: ArrayView2<f64>,
    labels: &[usize],
    cfg: &PerturbConfig,
    start_seeds: Option<&[u64]>,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    if x.nrows() != labels.len() {
        return Err(Error::Shape {
            what: "PGD labels",
            expected: x.nrows(),
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::ClassOutOfRange {
            class: bad,
            num_classes: model.num_classes(),
        });
    }
    let eps = cfg.epsilon;
    if eps == 0.0 {
        return Ok(x.mapv(|v| cfg.clamp(v)));
    }
    let step = cfg.effective_step();
    let mut delta = Array2::<f64>::zeros(x.raw_dim());
    if cfg.random_start {
        let seeds = start_seeds.ok_or_else(|| Error::config("random-start PGD needs per-sample seeds"))?;
        for (mut row, &s) in delta.rows_mut().into_iter().zip(seeds) {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let uni = rand_distr::Uniform::new_inclusive(-eps, eps);
            row.iter_mut().for_each(|d| *d = uni.sample(&mut rng));
        }
    }
    let mut adv = &x + &delta;
    adv.mapv_inplace(|v| cfg.clamp(v));
    for _ in 0..cfg.steps {
        let grad = ce_input_gradient(model, adv.view(), labels)?;
        ndarray::Zip::from(&mut delta)
            .and(&grad)
            .and(&x)
            .and(&mut adv)
            .for_each(|d, &g, &x0, a| {
                let stepped = (*a - x0 + step * sign(g)).clamp(-eps, eps);
                *a = cfg.clamp(x0 + stepped);
                // Keep the delta consistent with the clamped point.
                *d = *a - x0;
            });
    }
    Ok(adv)
}

/// Single-sample PGD.
pub fn pgd_perturb(model: &Classifier, x: ArrayView1<f64>, label: usize, cfg: &PerturbConfig) -> Result<Array1<f64>> {
    if cfg.method != PerturbMethod::Pgd {
        return Err(Error::config("pgd_perturb called with a non-PGD config"));
    }
    let batch = x.insert_axis(Axis(0));
    let out = pgd_perturb_batch(model, batch, &[label], cfg, None)?;
    Ok(out.row(0).to_owned())
}

/// Adds i.i.d. `N(0, σ²)` noise per component, then clamps.
pub fn gaussian_perturb(x: ArrayView1<f64>, cfg: &PerturbConfig, rng: &mut impl rand::Rng) -> Result<Array1<f64>> {
    cfg.validate()?;
    if cfg.sigma == 0.0 {
        return Ok(x.mapv(|v| cfg.clamp(v)));
    }
    let normal = Normal::new(0.0, cfg.sigma).map_err(|e| Error::config(e.to_string()))?;
    Ok(x.mapv(|v| cfg.clamp(v + normal.sample(rng))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedPoint {
    pub x: Vec<f64>,
    /// Index into the training split.
    pub origin_index: usize,
    pub label: usize,
    pub method: PerturbMethod,
    pub delta_inf_norm: f64,
    /// `g_c(x_p)` under the model that generated the tube.
    pub margin: f64,
}

/// A materialized ε-tube with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedSet {
    pub items: Vec<PerturbedPoint>,
    pub config: PerturbConfig,
    pub seed: u64,
    pub stream: Stream,
    /// Points removed by the boundary-buffer filter.
    pub dropped: usize,
}

impl PerturbedSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn inputs(&self) -> Array2<f64> {
        let d = self.items.first().map_or(0, |p| p.x.len());
        let flat: Vec<f64> = self.items.iter().flat_map(|p| p.x.iter().copied()).collect();
        Array2::from_shape_vec((self.items.len(), d), flat).expect("uniform point length")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|p| p.label).collect()
    }

    /// Contiguous sub-range, keeping each point's origin fields.
    pub fn slice(&self, range: std::ops::Range<usize>) -> PerturbedSet {
        PerturbedSet {
            items: self.items[range].to_vec(),
            config: self.config.clone(),
            seed: self.seed,
            stream: self.stream,
            dropped: 0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Perturbs a chosen subset of training rows. `seed` should already be derived
/// for the stream it belongs to; per-sample substreams come from the origin index.
pub fn perturb_indices(
    model_orig: &Classifier,
    train: &Split,
    indices: &[usize],
    cfg: &PerturbConfig,
    seed: u64,
    stream: Stream,
) -> Result<PerturbedSet> {
    perturb_split(model_orig, &train.select(indices), indices, cfg, seed, stream)
}

/// Like [`perturb_indices`] for rows that were already gathered; `origins`
/// holds their training-split indices.
pub fn perturb_split(
    model_orig: &Classifier,
    rows: &Split,
    origins: &[usize],
    cfg: &PerturbConfig,
    seed: u64,
    stream: Stream,
) -> Result<PerturbedSet> {
    cfg.validate()?;
    if origins.len() != rows.len() {
        return Err(Error::Shape {
            what: "perturbation origins",
            expected: rows.len(),
            got: origins.len(),
        });
    }
    let sample_seed = |i: usize| seeds::derive(seed, stream, i as u64, 0);
    let mut points = Vec::with_capacity(origins.len());
    for (c, chunk) in origins.chunks(PGD_CHUNK).enumerate() {
        let start = c * PGD_CHUNK;
        let sub = rows.select(&(start..start + chunk.len()).collect::<Vec<_>>());
        let perturbed = match cfg.method {
            PerturbMethod::Pgd => {
                let seeds: Vec<u64> = chunk.iter().map(|&i| sample_seed(i)).collect();
                pgd_perturb_batch(model_orig, sub.x.view(), &sub.y, cfg, Some(&seeds))?
            }
            PerturbMethod::Gaussian => {
                let mut out = Array2::zeros(sub.x.raw_dim());
                for (k, &i) in chunk.iter().enumerate() {
                    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(i));
                    out.row_mut(k).assign(&gaussian_perturb(sub.x.row(k), cfg, &mut rng)?);
                }
                out
            }
        };
        let logits = model_orig.forward_logits(perturbed.view())?;
        for (k, &i) in chunk.iter().enumerate() {
            let xp = perturbed.row(k);
            let delta = xp
                .iter()
                .zip(sub.x.row(k).iter())
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            points.push(PerturbedPoint {
                x: xp.to_vec(),
                origin_index: i,
                label: sub.y[k],
                method: cfg.method,
                delta_inf_norm: delta,
                margin: logit_margin(logits.row(k).as_slice().expect("standard layout"), sub.y[k])?,
            });
        }
    }
    let before = points.len();
    if cfg.boundary_buffer.is_finite() {
        points.retain(|p| p.margin.abs() <= cfg.boundary_buffer);
    }
    let dropped = before - points.len();
    if points.is_empty() && before > 0 {
        log::warn!("boundary buffer {} removed every tube point", cfg.boundary_buffer);
    }
    Ok(PerturbedSet {
        items: points,
        config: cfg.clone(),
        seed,
        stream,
        dropped,
    })
}

/// One perturbed sample per forget sample, filtered by the boundary buffer.
/// An empty result is returned (with a warning) rather than raised.
pub fn epsilon_tube(
    model_orig: &Classifier,
    train: &Split,
    forget: &ForgetSpec,
    cfg: &PerturbConfig,
    seed: u64,
    stream: Stream,
) -> Result<PerturbedSet> {
    if forget.indices.is_empty() {
        return Err(Error::EmptyData("forget set"));
    }
    perturb_indices(model_orig, train, &forget.indices, cfg, seed, stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchDescriptor;
    use ndarray::{arr1, arr2, Array};
    use rand::Rng;

    /// z = (x1, -x1) on R².
    fn linear_two_class() -> Classifier {
        let ext = ArchDescriptor::Identity { dim: 2 }.build().unwrap();
        Classifier::new(ext, vec![], arr2(&[[1.0, 0.0], [-1.0, 0.0]]), arr1(&[0.0, 0.0])).unwrap()
    }

    #[test]
    fn zero_radius_is_identity() {
        let m = linear_two_class();
        let x = arr1(&[0.4, -0.2]);
        let out = pgd_perturb(&m, x.view(), 0, &PerturbConfig::pgd(0.0, 3)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn linear_model_moves_against_label() {
        let m = linear_two_class();
        let cfg = PerturbConfig {
            step_size: Some(0.1),
            ..PerturbConfig::pgd(0.3, 3)
        };
        let out = pgd_perturb(&m, arr1(&[0.0, 0.0]).view(), 0, &cfg).unwrap();
        assert!((out[0] + 0.3).abs() < 1e-12, "{out}");
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(PerturbConfig::pgd(-0.1, 3).validate().is_err());
        assert!(PerturbConfig::pgd(0.1, 0).validate().is_err());
        assert!(PerturbConfig::gaussian(-1.0).validate().is_err());
        let m = linear_two_class();
        assert!(pgd_perturb(&m, arr1(&[0.0, 0.0]).view(), 0, &PerturbConfig::pgd(-0.1, 3)).is_err());
    }

    #[test]
    fn gaussian_zero_sigma_and_determinism() {
        let x = arr1(&[0.1, 0.2, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            gaussian_perturb(x.view(), &PerturbConfig::gaussian(0.0), &mut rng).unwrap(),
            x
        );
        let cfg = PerturbConfig::gaussian(0.1);
        let a = gaussian_perturb(x.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = gaussian_perturb(x.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_variance_matches_sigma() {
        let cfg = PerturbConfig::gaussian(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = arr1(&[0.0, 0.0]);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| gaussian_perturb(x.view(), &cfg, &mut rng).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 0.01).abs() <= 0.05 * 0.01, "variance {var}");
    }

    fn tiny_split() -> (Split, ForgetSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array::from_shape_fn((30, 2), |_| rng.gen_range(-1.0..1.0));
        let y: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let split = Split::new(x, y).unwrap();
        let forget = ForgetSpec::for_classes(&split, 2, [1]).unwrap();
        (split, forget)
    }

    #[test]
    fn tube_size_and_filters() {
        let m = linear_two_class();
        let (split, forget) = tiny_split();
        let cfg = PerturbConfig::pgd(0.05, 3);
        let tube = epsilon_tube(&m, &split, &forget, &cfg, 1, Stream::EvalPerturb).unwrap();
        assert_eq!(tube.len(), forget.indices.len());
        assert_eq!(tube.dropped, 0);

        let zero = PerturbConfig {
            boundary_buffer: 0.0,
            ..cfg.clone()
        };
        let tube0 = epsilon_tube(&m, &split, &forget, &zero, 1, Stream::EvalPerturb).unwrap();
        assert!(tube0.is_empty());
        assert_eq!(tube0.dropped, forget.indices.len());

        let one = PerturbConfig {
            boundary_buffer: 1.0,
            ..cfg.clone()
        };
        let filtered = epsilon_tube(&m, &split, &forget, &one, 1, Stream::EvalPerturb).unwrap();
        // brute force: recompute every margin from scratch
        let mut expected = 0;
        for &i in &forget.indices {
            let xp = pgd_perturb(&m, split.x.row(i), split.y[i], &cfg).unwrap();
            let logits = m.forward_logits(xp.view().insert_axis(Axis(0))).unwrap();
            let g = logit_margin(logits.row(0).as_slice().unwrap(), split.y[i]).unwrap();
            if g.abs() <= 1.0 {
                expected += 1;
            }
        }
        assert_eq!(filtered.len(), expected);
        assert!(expected > 0 && expected < forget.indices.len());
    }

    #[test]
    fn tube_is_reproducible_and_serializable() {
        let m = linear_two_class();
        let (split, forget) = tiny_split();
        let cfg = PerturbConfig {
            input_bounds: Some((-1.0, 1.0)),
            ..PerturbConfig::gaussian(0.1)
        };
        let a = epsilon_tube(&m, &split, &forget, &cfg, 11, Stream::EvalGaussian).unwrap();
        let b = epsilon_tube(&m, &split, &forget, &cfg, 11, Stream::EvalGaussian).unwrap();
        assert_eq!(a, b);
        let back = PerturbedSet::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(a.items.iter().all(|p| p.x.iter().all(|v| (-1.0..=1.0).contains(v))));
    }

    #[test]
    fn empty_forget_set_is_an_error() {
        let m = linear_two_class();
        let (split, _) = tiny_split();
        let forget = ForgetSpec {
            classes: [1].into_iter().collect(),
            indices: vec![],
        };
        assert!(epsilon_tube(&m, &split, &forget, &PerturbConfig::default(), 0, Stream::EvalPerturb).is_err());
    }
}

/// JSON has no infinity; an unbounded buffer round-trips as `null`.
mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}
