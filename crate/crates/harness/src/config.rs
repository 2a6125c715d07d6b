//! Experiment configuration and its flat `key = value` text form.
//!
//! Every field has a key; [`ExperimentConfig::resolved`] writes all of them, so
//! parsing a resolved file reproduces the configuration exactly.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ulab_core::attack::PrototypeMetric;
use ulab_core::data::Dataset;
use ulab_core::divergence::DivergenceKind;
use ulab_core::model::{Activation, ArchDescriptor};
use ulab_core::optim::OptimizerKind;
use ulab_core::perturb::{PerturbConfig, PerturbMethod};
use ulab_core::train::TrainConfig;
use ulab_core::unlearn::UnlearnConfig;

use crate::dataset::{BlobSpec, DatasetSpec, ImageSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Blobs,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Mlp,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpPreset {
    pub hidden: usize,
    pub embed_dim: usize,
    pub hidden_activation: Activation,
    pub embed_activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvPreset {
    pub conv1: usize,
    pub conv2: usize,
    pub embed_dim: usize,
    pub embed_activation: Activation,
}

/// Fixed α or tuning over the default grid under the retain-drop rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AlphaChoice {
    Tune,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    pub k: usize,
    pub alpha: AlphaChoice,
    pub metric: PrototypeMetric,
    /// Forget samples used by the fine-tuning relearn attack; 0 skips it.
    pub relearn_samples: usize,
    pub relearn: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Perturbations for OU@ε; `sigma` also drives the Gaussian-OU companion metric.
    pub perturb: PerturbConfig,
    pub divergence: DivergenceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub method: String,
    pub dataset: DatasetKind,
    pub blobs: BlobSpec,
    pub image: ImageSpec,
    pub arch: ArchKind,
    pub mlp: MlpPreset,
    pub conv: ConvPreset,
    /// Recipe for the original model (and for retraining from scratch).
    pub train: TrainConfig,
    pub forget_classes: Vec<usize>,
    /// The seed inside is replaced by the experiment seed at run time.
    pub unlearn: UnlearnConfig,
    pub attack: AttackSettings,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            method: "spotter".into(),
            dataset: DatasetKind::Blobs,
            blobs: BlobSpec::default(),
            image: ImageSpec {
                path: PathBuf::new(),
                channels: 1,
                height: 8,
                width: 8,
                max_value: 16.0,
                test_fraction: 0.2,
            },
            arch: ArchKind::Mlp,
            mlp: MlpPreset {
                hidden: 128,
                embed_dim: 64,
                hidden_activation: Activation::Tanh,
                embed_activation: Activation::Tanh,
            },
            conv: ConvPreset {
                conv1: 8,
                conv2: 16,
                embed_dim: 32,
                embed_activation: Activation::Tanh,
            },
            train: TrainConfig {
                epochs: 50,
                ..TrainConfig::default()
            },
            forget_classes: vec![0],
            unlearn: UnlearnConfig::default(),
            attack: AttackSettings {
                k: 5,
                alpha: AlphaChoice::Tune,
                metric: PrototypeMetric::Cosine,
                relearn_samples: 0,
                relearn: TrainConfig {
                    epochs: 5,
                    ..TrainConfig::default()
                },
            },
            eval: EvalSettings {
                perturb: PerturbConfig::pgd(0.03, 3),
                divergence: DivergenceKind::Js,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("config key `{key}`: cannot parse `{value}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => bail!("config key `{key}`: expected a boolean, got `{value}`"),
    }
}

fn parse_activation(key: &str, value: &str) -> Result<Activation> {
    Activation::parse(value).with_context(|| format!("config key `{key}`"))
}

fn parse_step(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "auto" {
        Ok(None)
    } else {
        Ok(Some(parse(key, value)?))
    }
}

fn fmt_step(step: Option<f64>) -> String {
    step.map_or_else(|| "auto".to_string(), |s| s.to_string())
}

fn parse_unbounded(key: &str, value: &str) -> Result<f64> {
    match value {
        "inf" | "none" => Ok(f64::INFINITY),
        _ => parse(key, value),
    }
}

fn fmt_unbounded(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "inf".into()
    }
}

fn parse_class_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn set_train(t: &mut TrainConfig, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "optimizer" => t.optimizer = parse::<OptimizerKind>(key, value)?,
        "lr" => t.learning_rate = parse(key, value)?,
        "epochs" => t.epochs = parse(key, value)?,
        "batch_size" => t.batch_size = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_entries(prefix: &str, t: &TrainConfig, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}optimizer"), t.optimizer.to_string()));
    out.push((format!("{prefix}lr"), t.learning_rate.to_string()));
    out.push((format!("{prefix}epochs"), t.epochs.to_string()));
    out.push((format!("{prefix}batch_size"), t.batch_size.to_string()));
}

fn set_perturb(p: &mut PerturbConfig, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "perturb" => p.method = parse::<PerturbMethod>(key, value)?,
        "eps" => p.epsilon = parse(key, value)?,
        "pgd_steps" => p.steps = parse(key, value)?,
        "step_size" => p.step_size = parse_step(key, value)?,
        "random_start" => p.random_start = parse_bool(key, value)?,
        "sigma" => p.sigma = parse(key, value)?,
        "boundary_buffer" => p.boundary_buffer = parse_unbounded(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn perturb_entries(prefix: &str, p: &PerturbConfig, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}perturb"), p.method.to_string()));
    out.push((format!("{prefix}eps"), p.epsilon.to_string()));
    out.push((format!("{prefix}pgd_steps"), p.steps.to_string()));
    out.push((format!("{prefix}step_size"), fmt_step(p.step_size)));
    out.push((format!("{prefix}random_start"), p.random_start.to_string()));
    out.push((format!("{prefix}sigma"), p.sigma.to_string()));
    out.push((format!("{prefix}boundary_buffer"), fmt_unbounded(p.boundary_buffer)));
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        let handled = match (section, field) {
            ("", "seed") => {
                self.seed = parse(key, value)?;
                true
            }
            ("", "out") => {
                self.out = PathBuf::from(value);
                true
            }
            ("", "method") => {
                self.method = value.to_string();
                true
            }
            ("", "dataset") => {
                self.dataset = match value {
                    "blobs" => DatasetKind::Blobs,
                    "image" => DatasetKind::Image,
                    _ => bail!("config key `dataset`: expected blobs or image, got `{value}`"),
                };
                true
            }
            ("", "arch") => {
                self.arch = match value {
                    "mlp" => ArchKind::Mlp,
                    "conv" => ArchKind::Conv,
                    _ => bail!("config key `arch`: expected mlp or conv, got `{value}`"),
                };
                true
            }
            ("blobs", f) => {
                let b = &mut self.blobs;
                match f {
                    "classes" => b.classes = parse(key, value)?,
                    "train_per_class" => b.train_per_class = parse(key, value)?,
                    "test_per_class" => b.test_per_class = parse(key, value)?,
                    "dim" => b.dim = parse(key, value)?,
                    "separation" => b.separation = parse(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            ("image", f) => {
                let i = &mut self.image;
                match f {
                    "path" => i.path = PathBuf::from(value),
                    "channels" => i.channels = parse(key, value)?,
                    "height" => i.height = parse(key, value)?,
                    "width" => i.width = parse(key, value)?,
                    "max_value" => i.max_value = parse(key, value)?,
                    "test_fraction" => i.test_fraction = parse(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            ("mlp", f) => {
                let m = &mut self.mlp;
                match f {
                    "hidden" => m.hidden = parse(key, value)?,
                    "embed_dim" => m.embed_dim = parse(key, value)?,
                    "hidden_activation" => m.hidden_activation = parse_activation(key, value)?,
                    "embed_activation" => m.embed_activation = parse_activation(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            ("conv", f) => {
                let c = &mut self.conv;
                match f {
                    "conv1" => c.conv1 = parse(key, value)?,
                    "conv2" => c.conv2 = parse(key, value)?,
                    "embed_dim" => c.embed_dim = parse(key, value)?,
                    "embed_activation" => c.embed_activation = parse_activation(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            ("train", f) => set_train(&mut self.train, f, key, value)?,
            ("forget", "classes") => {
                self.forget_classes = parse_class_list(key, value)?;
                true
            }
            ("unlearn", f) => {
                let u = &mut self.unlearn;
                match f {
                    "lambda1" => u.lambdas.lambda1 = parse(key, value)?,
                    "lambda2" => u.lambdas.lambda2 = parse(key, value)?,
                    "divergence" => u.divergence = parse(key, value)?,
                    _ => {
                        return if set_perturb(&mut u.perturb, f, key, value)? || set_train(&mut u.train, f, key, value)?
                        {
                            Ok(())
                        } else {
                            Err(unknown(key))
                        };
                    }
                }
                true
            }
            ("eval", f) => match f {
                "divergence" => {
                    self.eval.divergence = parse(key, value)?;
                    true
                }
                _ => set_perturb(&mut self.eval.perturb, f, key, value)?,
            },
            ("attack", f) => {
                let a = &mut self.attack;
                match f {
                    "k" => {
                        a.k = parse(key, value)?;
                        true
                    }
                    "alpha" => {
                        a.alpha = if value == "tune" {
                            AlphaChoice::Tune
                        } else {
                            AlphaChoice::Fixed(parse(key, value)?)
                        };
                        true
                    }
                    "metric" => {
                        a.metric = parse(key, value)?;
                        true
                    }
                    "relearn_samples" => {
                        a.relearn_samples = parse(key, value)?;
                        true
                    }
                    _ => match f.strip_prefix("relearn_") {
                        Some(rest) => set_train(&mut a.relearn, rest, key, value)?,
                        None => false,
                    },
                }
            }
            _ => false,
        };
        if !handled {
            return Err(unknown(key));
        }
        Ok(())
    }

    /// Every setting as `(key, value)`, in a stable order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("seed", self.seed.to_string());
        push("out", self.out.display().to_string());
        push("method", self.method.clone());
        push(
            "dataset",
            match self.dataset {
                DatasetKind::Blobs => "blobs",
                DatasetKind::Image => "image",
            }
            .into(),
        );
        push("blobs.classes", self.blobs.classes.to_string());
        push("blobs.train_per_class", self.blobs.train_per_class.to_string());
        push("blobs.test_per_class", self.blobs.test_per_class.to_string());
        push("blobs.dim", self.blobs.dim.to_string());
        push("blobs.separation", self.blobs.separation.to_string());
        push("image.path", self.image.path.display().to_string());
        push("image.channels", self.image.channels.to_string());
        push("image.height", self.image.height.to_string());
        push("image.width", self.image.width.to_string());
        push("image.max_value", self.image.max_value.to_string());
        push("image.test_fraction", self.image.test_fraction.to_string());
        push(
            "arch",
            match self.arch {
                ArchKind::Mlp => "mlp",
                ArchKind::Conv => "conv",
            }
            .into(),
        );
        push("mlp.hidden", self.mlp.hidden.to_string());
        push("mlp.embed_dim", self.mlp.embed_dim.to_string());
        push("mlp.hidden_activation", self.mlp.hidden_activation.as_str().into());
        push("mlp.embed_activation", self.mlp.embed_activation.as_str().into());
        push("conv.conv1", self.conv.conv1.to_string());
        push("conv.conv2", self.conv.conv2.to_string());
        push("conv.embed_dim", self.conv.embed_dim.to_string());
        push("conv.embed_activation", self.conv.embed_activation.as_str().into());
        push(
            "forget.classes",
            self.forget_classes
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        train_entries("train.", &self.train, &mut out);
        let u = &self.unlearn;
        out.push(("unlearn.lambda1".into(), u.lambdas.lambda1.to_string()));
        out.push(("unlearn.lambda2".into(), u.lambdas.lambda2.to_string()));
        out.push(("unlearn.divergence".into(), u.divergence.to_string()));
        perturb_entries("unlearn.", &u.perturb, &mut out);
        train_entries("unlearn.", &u.train, &mut out);
        perturb_entries("eval.", &self.eval.perturb, &mut out);
        out.push(("eval.divergence".into(), self.eval.divergence.to_string()));
        let a = &self.attack;
        out.push(("attack.k".into(), a.k.to_string()));
        out.push((
            "attack.alpha".into(),
            match a.alpha {
                AlphaChoice::Tune => "tune".into(),
                AlphaChoice::Fixed(v) => v.to_string(),
            },
        ));
        out.push(("attack.metric".into(), a.metric.to_string()));
        out.push(("attack.relearn_samples".into(), a.relearn_samples.to_string()));
        train_entries("attack.relearn_", &a.relearn, &mut out);
        out
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{raw}`", n + 1))?;
            self.set(k.trim(), v).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Hash of every setting except the output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "out" {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        match self.dataset {
            DatasetKind::Blobs => DatasetSpec::Blobs(self.blobs.clone()),
            DatasetKind::Image => DatasetSpec::Image(self.image.clone()),
        }
    }

    pub fn arch_descriptor(&self, data: &Dataset) -> Result<ArchDescriptor> {
        Ok(match self.arch {
            ArchKind::Mlp => ArchDescriptor::Mlp {
                input_dim: data.input_dim(),
                hidden: self.mlp.hidden,
                embed_dim: self.mlp.embed_dim,
                hidden_activation: self.mlp.hidden_activation,
                embed_activation: self.mlp.embed_activation,
            },
            ArchKind::Conv => {
                if self.dataset != DatasetKind::Image {
                    bail!("the conv architecture needs the image dataset");
                }
                ArchDescriptor::Conv {
                    channels: self.image.channels,
                    height: self.image.height,
                    width: self.image.width,
                    conv1: self.conv.conv1,
                    conv2: self.conv.conv2,
                    embed_dim: self.conv.embed_dim,
                    embed_activation: self.conv.embed_activation,
                }
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.forget_classes.is_empty() {
            bail!("forget.classes must name at least one class");
        }
        self.train.validate()?;
        self.unlearn.validate()?;
        self.eval.perturb.validate()?;
        self.attack.relearn.validate()?;
        if self.attack.k == 0 {
            bail!("attack.k must be at least 1");
        }
        if let AlphaChoice::Fixed(a) = self.attack.alpha {
            if !(0.0..=1.0).contains(&a) {
                bail!("attack.alpha must lie in [0, 1], got {a}");
            }
        }
        Ok(())
    }
}

fn unknown(key: &str) -> anyhow::Error {
    anyhow!("unknown config key `{key}`")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_str(
            "seed = 4\nmethod = neggrad\nforget.classes = 1, 3\nunlearn.lambda1 = 0.25 # comment\n\
             eval.boundary_buffer = 0.5\nattack.alpha = 0.4\nunlearn.step_size = 0.01\nattack.relearn_epochs = 3",
        )
        .unwrap();
        let again = ExperimentConfig::parse_str(&cfg.resolved()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.forget_classes, vec![1, 3]);
        assert_eq!(again.attack.alpha, AlphaChoice::Fixed(0.4));
        assert_eq!(again.attack.relearn.epochs, 3);
        let defaults = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse_str(&defaults.resolved()).unwrap(), defaults);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(ExperimentConfig::parse_str("nope = 1").is_err());
        assert!(ExperimentConfig::parse_str("blobs.colour = 1").is_err());
        assert!(ExperimentConfig::parse_str("seed = abc").is_err());
        assert!(ExperimentConfig::parse_str("seed 3").is_err());
        assert!(ExperimentConfig::parse_str("unlearn.divergence = tv").is_err());
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn train_and_eval_defaults() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.eval.perturb.epsilon, 0.03);
        assert_eq!(cfg.eval.perturb.steps, 3);
        assert_eq!(cfg.eval.divergence, DivergenceKind::Js);
        assert_eq!(cfg.unlearn.divergence, DivergenceKind::Kl);
        assert!(cfg.validate().is_ok());
    }
}
