//! Unlearning methods behind a common trait, looked up by name at runtime.
//!
//! Every forget-only method runs the same loop: the student starts as a copy
//! of the frozen teacher and is optimized on forget data alone. Methods differ
//! in their base loss and in whether the over-unlearning and dispersion terms
//! are active. Retraining from scratch on retain data is the reference point.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AccessLog, Dataset, ForgetSpec, Split};
use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::objective::{
    spotter_objective, BaseLoss, Lambdas, MaskedDistill, NegGrad, ObjectiveDiagnostics, ObjectiveInput, ObjectiveTerms,
    RandomLabel,
};
use crate::optim;
use crate::perturb::{perturb_split, PerturbConfig};
use crate::seeds::{self, Stream};
use crate::train::{train_supervised, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub lambdas: Lambdas,
    /// Divergence inside the masked-distillation terms.
    pub divergence: DivergenceKind,
    /// Perturbations generating the over-unlearning batch, regenerated every epoch.
    pub perturb: PerturbConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        let mut perturb = PerturbConfig::pgd(0.03, 3);
        perturb.random_start = true;
        Self {
            lambdas: Lambdas {
                lambda1: 0.7,
                lambda2: 1.0,
            },
            divergence: DivergenceKind::Kl,
            perturb,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        self.lambdas.validate()?;
        self.perturb.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-size weighted means of the objective terms.
    pub terms: ObjectiveTerms,
    /// Student accuracy (percent) on the forget training rows after the epoch.
    pub forget_train_acc: f64,
}

/// Serializable trace of one unlearning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRecord {
    pub method: String,
    pub base_loss: Option<String>,
    pub lambdas: Option<Lambdas>,
    pub epochs: Vec<EpochRecord>,
    pub diagnostics: ObjectiveDiagnostics,
    pub access: AccessLog,
    pub teacher_checksum: String,
    pub student_checksum: String,
}

#[derive(Debug, Clone)]
pub struct UnlearnRun {
    pub student: Classifier,
    pub record: UnlearnRecord,
}

/// Everything a method may look at. Forget-only methods never touch retain rows.
pub struct UnlearnContext<'a> {
    pub teacher: &'a Classifier,
    pub dataset: &'a Dataset,
    pub forget: &'a ForgetSpec,
    pub config: &'a UnlearnConfig,
    /// Recipe used to train the teacher, for methods that start from scratch.
    pub original_training: &'a TrainConfig,
}

pub trait UnlearningMethod: Send + Sync {
    fn name(&self) -> &str;

    fn reads_retain_data(&self) -> bool {
        false
    }

    fn run(&self, ctx: &UnlearnContext<'_>) -> Result<UnlearnRun>;
}

impl fmt::Debug for dyn UnlearningMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "UnlearningMethod({})", self.name())
    }
}

type BaseFactory = fn(&UnlearnConfig) -> Arc<dyn BaseLoss>;

#[derive(Clone)]
enum BaseSource {
    FromConfig(BaseFactory),
    Fixed(Arc<dyn BaseLoss>),
}

/// Fine-tunes a copy of the teacher on forget data with a base loss, optionally
/// adding the over-unlearning and dispersion terms with the configured weights.
#[derive(Clone)]
pub struct ForgetOnly {
    name: String,
    base: BaseSource,
    with_regularizers: bool,
}

impl ForgetOnly {
    /// Masked distillation with the configured λ weights.
    pub fn spotter() -> Self {
        Self {
            name: "spotter".into(),
            base: BaseSource::FromConfig(|cfg| {
                Arc::new(MaskedDistill {
                    divergence: cfg.divergence,
                })
            }),
            with_regularizers: true,
        }
    }

    pub fn random_label() -> Self {
        Self {
            name: "random-label".into(),
            base: BaseSource::Fixed(Arc::new(RandomLabel)),
            with_regularizers: false,
        }
    }

    pub fn neggrad() -> Self {
        Self {
            name: "neggrad".into(),
            base: BaseSource::Fixed(Arc::new(NegGrad)),
            with_regularizers: false,
        }
    }

    /// A user-supplied base loss; with `with_regularizers` the configured
    /// over-unlearning and dispersion terms are added on top.
    pub fn custom(name: impl Into<String>, base: Arc<dyn BaseLoss>, with_regularizers: bool) -> Self {
        Self {
            name: name.into(),
            base: BaseSource::Fixed(base),
            with_regularizers,
        }
    }

    /// This method's base loss with the Spotter terms added.
    pub fn plus_spotter(&self) -> Self {
        Self {
            name: format!("{}+spotter", self.name),
            base: self.base.clone(),
            with_regularizers: true,
        }
    }

    fn base_loss(&self, cfg: &UnlearnConfig) -> Arc<dyn BaseLoss> {
        match &self.base {
            BaseSource::FromConfig(f) => f(cfg),
            BaseSource::Fixed(b) => b.clone(),
        }
    }

    fn lambdas(&self, cfg: &UnlearnConfig) -> Lambdas {
        if self.with_regularizers {
            cfg.lambdas
        } else {
            Lambdas {
                lambda1: 1.0,
                lambda2: 0.0,
            }
        }
    }
}

impl UnlearningMethod for ForgetOnly {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(&self, ctx: &UnlearnContext<'_>) -> Result<UnlearnRun> {
        let base = self.base_loss(ctx.config);
        let mut run = run_unlearning(
            ctx.teacher,
            ctx.dataset,
            ctx.forget,
            ctx.config,
            self.lambdas(ctx.config),
            base.as_ref(),
        )?;
        run.record.method = self.name.clone();
        Ok(run)
    }
}

/// Trains a fresh model on retain data only, using the teacher's recipe.
#[derive(Debug, Clone, Copy, Default)]
pub struct Retrain;

impl UnlearningMethod for Retrain {
    fn name(&self) -> &str {
        "retrain"
    }

    fn reads_retain_data(&self) -> bool {
        true
    }

    fn run(&self, ctx: &UnlearnContext<'_>) -> Result<UnlearnRun> {
        let (student, log) = retrain_gold(
            ctx.teacher,
            ctx.dataset,
            ctx.forget,
            ctx.original_training,
            ctx.config.seed,
        )?;
        let record = UnlearnRecord {
            method: "retrain".into(),
            base_loss: None,
            lambdas: None,
            epochs: Vec::new(),
            diagnostics: ObjectiveDiagnostics::default(),
            access: log,
            teacher_checksum: ctx.teacher.params().checksum(),
            student_checksum: student.params().checksum(),
        };
        Ok(UnlearnRun { student, record })
    }
}

/// Retrains from a fresh initialization on the retain rows only.
pub fn retrain_gold(
    teacher: &Classifier,
    dataset: &Dataset,
    forget: &ForgetSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Classifier, AccessLog)> {
    forget.validate(&dataset.train, dataset.num_classes)?;
    let retain = forget.retain_indices(&dataset.train);
    if retain.is_empty() {
        return Err(Error::EmptyData("retain set"));
    }
    let init = Classifier::init(
        &teacher.descriptor(),
        dataset.num_classes,
        seeds::derive(seed, Stream::Init, 1, 0),
    )?;
    let (model, log) = train_supervised(&init, &dataset.train, forget, &retain, cfg, seed)?;
    Ok((model, log.access))
}

/// Name → method lookup.
#[derive(Default, Clone)]
pub struct MethodRegistry {
    methods: BTreeMap<String, Arc<dyn UnlearningMethod>>,
}

impl MethodRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `spotter`, `random-label`, `neggrad`, `retrain`, and the two baselines
    /// with the Spotter terms added (`random-label+spotter`, `neggrad+spotter`).
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(ForgetOnly::spotter()));
        r.register(Arc::new(ForgetOnly::random_label()));
        r.register(Arc::new(ForgetOnly::neggrad()));
        r.register(Arc::new(ForgetOnly::random_label().plus_spotter()));
        r.register(Arc::new(ForgetOnly::neggrad().plus_spotter()));
        r.register(Arc::new(Retrain));
        r
    }

    /// Adds a method, replacing any previous one with the same name.
    pub fn register(&mut self, method: Arc<dyn UnlearningMethod>) {
        self.methods.insert(method.name().to_string(), method);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn UnlearningMethod>> {
        self.methods.get(name).cloned().ok_or_else(|| Error::UnknownName {
            kind: "unlearning method",
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.methods.keys().cloned().collect()
    }
}

/// Shuffled forget batches that interleave the forget classes, so each batch
/// carries every class in proportion. A trailing batch with a single row is
/// folded into the previous one.
pub fn stratified_batches(
    train: &Split,
    forget: &ForgetSpec,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut per_class: Vec<Vec<usize>> = forget
        .classes
        .iter()
        .map(|&c| {
            let mut rows: Vec<usize> = forget.indices.iter().copied().filter(|&i| train.y[i] == c).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, Stream::Shuffle, epoch as u64, c as u64 + 1));
            rows.shuffle(&mut rng);
            rows
        })
        .collect();
    let total: usize = per_class.iter().map(Vec::len).sum();
    let mut order = Vec::with_capacity(total);
    // Proportional interleave: repeatedly take from the class furthest behind its share.
    let sizes: Vec<usize> = per_class.iter().map(Vec::len).collect();
    let mut taken = vec![0usize; per_class.len()];
    for _ in 0..total {
        let k = (0..per_class.len())
            .filter(|&k| taken[k] < sizes[k])
            .min_by(|&a, &b| {
                let fa = (taken[a] as f64 + 0.5) / sizes[a] as f64;
                let fb = (taken[b] as f64 + 0.5) / sizes[b] as f64;
                fa.total_cmp(&fb)
            })
            .expect("rows remain");
        order.push(per_class[k][taken[k]]);
        taken[k] += 1;
    }
    per_class.clear();
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

/// Optimizes a copy of `teacher` on forget rows with
/// `λ₁·base + (1−λ₁)·L_over + λ₂·L_sim`. Retain rows are never read.
pub fn run_unlearning(
    teacher: &Classifier,
    dataset: &Dataset,
    forget: &ForgetSpec,
    cfg: &UnlearnConfig,
    lambdas: Lambdas,
    base: &dyn BaseLoss,
) -> Result<UnlearnRun> {
    cfg.validate()?;
    lambdas.validate()?;
    let train = &dataset.train;
    forget.validate(train, dataset.num_classes)?;
    if forget.indices.is_empty() {
        return Err(Error::EmptyData("forget set"));
    }
    let teacher_checksum = teacher.params().checksum();
    let mut student = teacher.clone();
    let mut params = student.params().clone();
    let mut opt = optim::build(cfg.train.optimizer, cfg.train.learning_rate, &params);
    let mut access = AccessLog::default();
    let mut diagnostics = ObjectiveDiagnostics::default();
    let mut epochs = Vec::with_capacity(cfg.train.epochs);

    for epoch in 0..cfg.train.epochs {
        let perturb_seed = seeds::derive(cfg.seed, Stream::TrainPerturb, epoch as u64, 0);
        let mut sums = ObjectiveTerms::default();
        let mut seen = 0usize;
        for (step, batch) in stratified_batches(train, forget, cfg.train.batch_size, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let rows = access.gather(train, forget, &batch);
            let perturbed = if lambdas.lambda1 < 1.0 {
                perturb_split(teacher, &rows, &batch, &cfg.perturb, perturb_seed, Stream::TrainPerturb)?.inputs()
            } else {
                ndarray::Array2::zeros((0, rows.x.ncols()))
            };
            let eval = spotter_objective(
                &ObjectiveInput {
                    teacher,
                    student: &student,
                    forget_batch: &rows,
                    origins: &batch,
                    perturbed: perturbed.view(),
                    forget_classes: &forget.classes,
                    lambdas,
                    divergence: cfg.divergence,
                    epoch,
                    seed: cfg.seed,
                },
                base,
            )?;
            let t = eval.terms;
            if !t.total.is_finite() || !eval.grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    value: t.total,
                    epoch,
                    step,
                });
            }
            opt.step(&mut params, &eval.grads);
            student = student.with_params(params.clone())?;

            let w = rows.len() as f64;
            sums.total += t.total * w;
            sums.base += t.base * w;
            sums.over += t.over * w;
            sums.sim += t.sim * w;
            seen += rows.len();
            diagnostics.empty_over_batches += eval.diagnostics.empty_over_batches;
            diagnostics.skipped_sim_classes += eval.diagnostics.skipped_sim_classes;
            diagnostics.zero_norm_embeddings += eval.diagnostics.zero_norm_embeddings;
        }
        let n = seen.max(1) as f64;
        let forget_rows = access.gather(train, forget, &forget.indices);
        let preds = student.predict(forget_rows.x.view())?;
        let correct = preds.iter().zip(&forget_rows.y).filter(|(p, y)| p == y).count();
        epochs.push(EpochRecord {
            epoch,
            terms: ObjectiveTerms {
                total: sums.total / n,
                base: sums.base / n,
                over: sums.over / n,
                sim: sums.sim / n,
            },
            forget_train_acc: 100.0 * correct as f64 / forget_rows.len() as f64,
        });
    }

    if teacher.params().checksum() != teacher_checksum {
        return Err(Error::protocol("teacher parameters changed during unlearning"));
    }
    let record = UnlearnRecord {
        method: base.name().to_string(),
        base_loss: Some(base.name().to_string()),
        lambdas: Some(lambdas),
        epochs,
        diagnostics,
        access,
        teacher_checksum,
        student_checksum: student.params().checksum(),
    };
    Ok(UnlearnRun { student, record })
}
