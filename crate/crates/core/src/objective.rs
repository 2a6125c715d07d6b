//! Loss terms for unlearning: masked distillation on forget data and on its
//! ε-tube, intra-class dispersion of forget embeddings, the pluggable base
//! losses, and their λ-weighted combination. Every term returns its value and
//! the gradient with respect to the student's logits and/or embeddings.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::divergence::{divergence_to_logits, masked_softmax, DivergenceKind};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::params::ParamSet;
use crate::seeds::{self, Stream};
use crate::train::cross_entropy;

/// Mean over rows of `D(σ̃(teacher) ‖ σ(student))` and its gradient on the student logits.
pub fn masked_distill_from_logits(
    teacher_logits: ArrayView2<f64>,
    student_logits: ArrayView2<f64>,
    forget_classes: &BTreeSet<usize>,
    div: DivergenceKind,
) -> Result<(f64, Array2<f64>)> {
    let n = student_logits.nrows();
    let mut grad = Array2::zeros(student_logits.raw_dim());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for ((t, s), mut g) in teacher_logits
        .rows()
        .into_iter()
        .zip(student_logits.rows())
        .zip(grad.rows_mut())
    {
        let target = masked_softmax(t.to_vec().as_slice(), forget_classes)?.probs;
        let (v, d) = divergence_to_logits(div, &target, s.to_vec().as_slice());
        total += v;
        g.assign(&Array1::from(d));
    }
    grad /= n as f64;
    Ok((total / n as f64, grad))
}

fn check_forget_labels(batch: &Split, forget_classes: &BTreeSet<usize>) -> Result<()> {
    if let Some(&y) = batch.y.iter().find(|y| !forget_classes.contains(y)) {
        return Err(Error::protocol(format!("forget batch contains retain label {y}")));
    }
    Ok(())
}

/// L_unlearn on a forget batch (value only).
pub fn unlearn_loss(
    teacher: &Classifier,
    student: &Classifier,
    batch: &Split,
    forget_classes: &BTreeSet<usize>,
    div: DivergenceKind,
) -> Result<f64> {
    check_forget_labels(batch, forget_classes)?;
    let t = teacher.forward_logits(batch.x.view())?;
    let s = student.forward_logits(batch.x.view())?;
    Ok(masked_distill_from_logits(t.view(), s.view(), forget_classes, div)?.0)
}

/// L_over on perturbed inputs (value only). An empty batch contributes zero.
pub fn over_loss(
    teacher: &Classifier,
    student: &Classifier,
    perturbed: ArrayView2<f64>,
    forget_classes: &BTreeSet<usize>,
    div: DivergenceKind,
) -> Result<f64> {
    if perturbed.nrows() == 0 {
        return Ok(0.0);
    }
    let t = teacher.forward_logits(perturbed)?;
    let s = student.forward_logits(perturbed)?;
    Ok(masked_distill_from_logits(t.view(), s.view(), forget_classes, div)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dispersion {
    /// Mean over included classes of the mean ordered-pair cosine similarity.
    pub value: f64,
    pub grad: Array2<f64>,
    pub included_classes: Vec<usize>,
    /// Classes with fewer than two usable embeddings in the batch.
    pub skipped_classes: Vec<usize>,
    /// Zero-norm embeddings left out of the pairs.
    pub zero_norm: usize,
}

/// Intra-class dispersion L_sim over the rows of `embeddings` whose label is a
/// forget class, with its gradient on the embeddings.
pub fn dispersion_loss(embeddings: ArrayView2<f64>, labels: &[usize], forget_classes: &BTreeSet<usize>) -> Dispersion {
    let mut grad = Array2::zeros(embeddings.raw_dim());
    let mut included = Vec::new();
    let mut skipped = Vec::new();
    let mut zero_norm = 0;
    let mut class_values = Vec::new();
    let mut class_grads: Vec<(Vec<usize>, Array2<f64>)> = Vec::new();

    for &c in forget_classes {
        let rows: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|&(_, &y)| y == c)
            .map(|(i, _)| i)
            .collect();
        let mut usable = Vec::with_capacity(rows.len());
        let mut norms = Vec::with_capacity(rows.len());
        for &i in &rows {
            let norm = embeddings.row(i).dot(&embeddings.row(i)).sqrt();
            if norm > 0.0 {
                usable.push(i);
                norms.push(norm);
            } else {
                zero_norm += 1;
            }
        }
        let m = usable.len();
        if m < 2 {
            if !rows.is_empty() || m == 0 {
                skipped.push(c);
            }
            continue;
        }
        let units: Vec<Array1<f64>> = usable
            .iter()
            .zip(&norms)
            .map(|(&i, &n)| embeddings.row(i).mapv(|v| v / n))
            .collect();
        // Σ_{i≠j} cos(e_i, e_j) = ‖Σ u‖² − m.
        let sum_u: Array1<f64> = units.iter().fold(Array1::zeros(embeddings.ncols()), |acc, u| acc + u);
        let pairs = (m * (m - 1)) as f64;
        let value = (sum_u.dot(&sum_u) - m as f64) / pairs;
        // d/d e_i of the pair sum: 2 (s_i − (u_i·s_i) u_i) / ‖e_i‖ with s_i = Σ_{j≠i} u_j.
        let mut g = Array2::zeros((m, embeddings.ncols()));
        for (k, u) in units.iter().enumerate() {
            let s_i = &sum_u - u;
            let proj = u.dot(&s_i);
            let row = (&s_i - &(u * proj)) * (2.0 / (norms[k] * pairs));
            g.row_mut(k).assign(&row);
        }
        included.push(c);
        class_values.push(value);
        class_grads.push((usable, g));
    }

    if included.is_empty() {
        return Dispersion {
            value: 0.0,
            grad,
            included_classes: included,
            skipped_classes: skipped,
            zero_norm,
        };
    }
    let outer = 1.0 / included.len() as f64;
    for (rows, g) in class_grads {
        for (k, &i) in rows.iter().enumerate() {
            let mut dst = grad.row_mut(i);
            dst.scaled_add(outer, &g.row(k));
        }
    }
    Dispersion {
        value: class_values.iter().sum::<f64>() * outer,
        grad,
        included_classes: included,
        skipped_classes: skipped,
        zero_norm,
    }
}

/// What a base loss sees for one forget batch.
pub struct BaseLossInput<'a> {
    pub teacher: &'a Classifier,
    pub student_logits: ArrayView2<'a, f64>,
    pub batch: &'a Split,
    /// Training-split indices of the batch rows.
    pub origins: &'a [usize],
    pub forget_classes: &'a BTreeSet<usize>,
    pub num_classes: usize,
    pub epoch: usize,
    pub seed: u64,
}

/// A pluggable unlearning loss on forget data: returns its value and the
/// gradient with respect to the student's logits for that batch.
pub trait BaseLoss: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;

    fn eval(&self, input: &BaseLossInput<'_>) -> Result<(f64, Array2<f64>)>;
}

/// Masked distillation from the frozen teacher (L_unlearn).
#[derive(Debug, Clone, Copy)]
pub struct MaskedDistill {
    pub divergence: DivergenceKind,
}

impl BaseLoss for MaskedDistill {
    fn name(&self) -> &'static str {
        "masked-distill"
    }

    fn eval(&self, input: &BaseLossInput<'_>) -> Result<(f64, Array2<f64>)> {
        let t = input.teacher.forward_logits(input.batch.x.view())?;
        masked_distill_from_logits(t.view(), input.student_logits, input.forget_classes, self.divergence)
    }
}

/// Cross-entropy towards labels drawn uniformly from the retain classes.
/// Labels are fixed within an epoch and resampled across epochs.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomLabel;

impl RandomLabel {
    pub fn labels(origins: &[usize], retain: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
        origins
            .iter()
            .map(|&i| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seeds::derive(seed, Stream::RandomLabel, epoch as u64, i as u64));
                retain[rng.gen_range(0..retain.len())]
            })
            .collect()
    }
}

impl BaseLoss for RandomLabel {
    fn name(&self) -> &'static str {
        "random-label"
    }

    fn eval(&self, input: &BaseLossInput<'_>) -> Result<(f64, Array2<f64>)> {
        let retain: Vec<usize> = (0..input.num_classes)
            .filter(|c| !input.forget_classes.contains(c))
            .collect();
        if retain.is_empty() {
            return Err(Error::InvalidMask(input.num_classes));
        }
        let targets = Self::labels(input.origins, &retain, input.seed, input.epoch);
        Ok(cross_entropy(input.student_logits, &targets))
    }
}

/// Negated cross-entropy on the true labels (gradient ascent).
#[derive(Debug, Clone, Copy, Default)]
pub struct NegGrad;

impl BaseLoss for NegGrad {
    fn name(&self) -> &'static str {
        "neggrad"
    }

    fn eval(&self, input: &BaseLossInput<'_>) -> Result<(f64, Array2<f64>)> {
        let (ce, grad) = cross_entropy(input.student_logits, &input.batch.y);
        Ok((-ce, -grad))
    }
}

/// Weights of the combined objective `λ₁·L_base + (1−λ₁)·L_over + λ₂·L_sim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Lambdas {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda1) {
            return Err(Error::config(format!(
                "lambda1 must lie in [0, 1], got {}",
                self.lambda1
            )));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::config(format!("lambda2 must be >= 0, got {}", self.lambda2)));
        }
        Ok(())
    }

    pub fn combine(&self, base: f64, over: f64, sim: f64) -> f64 {
        self.lambda1 * base + (1.0 - self.lambda1) * over + self.lambda2 * sim
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub total: f64,
    pub base: f64,
    pub over: f64,
    pub sim: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveDiagnostics {
    pub empty_over_batches: usize,
    pub skipped_sim_classes: usize,
    pub zero_norm_embeddings: usize,
}

/// One evaluation of the combined objective with its parameter gradient.
#[derive(Debug)]
pub struct ObjectiveEval {
    pub terms: ObjectiveTerms,
    pub grads: ParamSet,
    pub diagnostics: ObjectiveDiagnostics,
}

pub struct ObjectiveInput<'a> {
    pub teacher: &'a Classifier,
    pub student: &'a Classifier,
    pub forget_batch: &'a Split,
    pub origins: &'a [usize],
    /// Perturbed copies of forget samples for L_over.
    pub perturbed: ArrayView2<'a, f64>,
    pub forget_classes: &'a BTreeSet<usize>,
    pub lambdas: Lambdas,
    pub divergence: DivergenceKind,
    pub epoch: usize,
    pub seed: u64,
}

/// `λ₁·L_base + (1−λ₁)·L_over + λ₂·L_sim` and its gradient with respect to the student.
/// Terms with a zero weight are not evaluated and report 0.
pub fn spotter_objective(input: &ObjectiveInput<'_>, base: &dyn BaseLoss) -> Result<ObjectiveEval> {
    input.lambdas.validate()?;
    check_forget_labels(input.forget_batch, input.forget_classes)?;
    let Lambdas { lambda1, lambda2 } = input.lambdas;
    let student = input.student;
    let mut terms = ObjectiveTerms::default();
    let mut diagnostics = ObjectiveDiagnostics::default();
    let mut grads = student.params().zeros_like();

    if lambda1 > 0.0 || lambda2 > 0.0 {
        let pass = student.forward_train(input.forget_batch.x.view())?;
        let mut d_logits = Array2::zeros(pass.logits.raw_dim());
        if lambda1 > 0.0 {
            let (v, g) = base.eval(&BaseLossInput {
                teacher: input.teacher,
                student_logits: pass.logits.view(),
                batch: input.forget_batch,
                origins: input.origins,
                forget_classes: input.forget_classes,
                num_classes: student.num_classes(),
                epoch: input.epoch,
                seed: input.seed,
            })?;
            terms.base = v;
            d_logits.scaled_add(lambda1, &g);
        }
        let mut d_emb = None;
        if lambda2 > 0.0 {
            let disp = dispersion_loss(pass.embeddings.view(), &input.forget_batch.y, input.forget_classes);
            terms.sim = disp.value;
            diagnostics.skipped_sim_classes += disp.skipped_classes.len();
            diagnostics.zero_norm_embeddings += disp.zero_norm;
            d_emb = Some(disp.grad * lambda2);
        }
        let (g, _) = student.backward(&pass, d_logits.view(), d_emb.as_ref().map(|a| a.view()));
        grads.add_scaled(&g, 1.0);
    }

    if lambda1 < 1.0 {
        if input.perturbed.nrows() == 0 {
            diagnostics.empty_over_batches += 1;
        } else {
            let pass = student.forward_train(input.perturbed)?;
            let t = input.teacher.forward_logits(input.perturbed)?;
            let (v, g) =
                masked_distill_from_logits(t.view(), pass.logits.view(), input.forget_classes, input.divergence)?;
            terms.over = v;
            let (g, _) = student.backward(&pass, (g * (1.0 - lambda1)).view(), None);
            grads.add_scaled(&g, 1.0);
        }
    }

    terms.total = input.lambdas.combine(terms.base, terms.over, terms.sim);
    Ok(ObjectiveEval {
        terms,
        grads,
        diagnostics,
    })
}
