//! Over-unlearning metric: mean divergence between the original model's masked
//! softmax and the unlearned model's softmax over an ε-tube.

use std::collections::BTreeSet;

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::divergence::{masked_softmax, softmax, DivergenceKind};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::perturb::{PerturbMethod, PerturbedSet};

/// Tube points evaluated per forward batch. The value does not depend on it.
pub const DEFAULT_EVAL_BATCH: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuReport {
    pub value: f64,
    pub n_points: usize,
    pub divergence: DivergenceKind,
    pub perturb_method: PerturbMethod,
    pub epsilon: f64,
    /// Points whose teacher retain mass fell below the floor.
    pub floored_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_point_values: Option<Vec<f64>>,
}

/// Per-point divergences `D(σ̃(z_orig(x_p)) ‖ σ(z_unlearned(x_p)))`.
fn per_point(
    model_orig: &Classifier,
    model_unlearned: &Classifier,
    tube: &PerturbedSet,
    forget_classes: &BTreeSet<usize>,
    div: DivergenceKind,
    batch: usize,
) -> Result<(Vec<f64>, usize)> {
    if model_orig.num_classes() != model_unlearned.num_classes() {
        return Err(Error::Shape {
            what: "unlearned model classes",
            expected: model_orig.num_classes(),
            got: model_unlearned.num_classes(),
        });
    }
    let inputs = tube.inputs();
    let mut values = Vec::with_capacity(tube.len());
    let mut floored = 0;
    let batch = batch.max(1);
    let mut start = 0;
    while start < inputs.nrows() {
        let end = (start + batch).min(inputs.nrows());
        let x = inputs.slice(s![start..end, ..]);
        let teacher = model_orig.forward_logits(x)?;
        let student = model_unlearned.forward_logits(x)?;
        for (t, u) in teacher.rows().into_iter().zip(student.rows()) {
            let masked = masked_softmax(t.as_slice().expect("standard layout"), forget_classes)?;
            floored += masked.floored as usize;
            let q = softmax(u.as_slice().expect("standard layout"));
            values.push(div.eval(&masked.probs, &q));
        }
        start = end;
    }
    Ok((values, floored))
}

pub fn ou_at_eps_batched(
    model_orig: &Classifier,
    model_unlearned: &Classifier,
    tube: &PerturbedSet,
    forget_classes: &BTreeSet<usize>,
    div: DivergenceKind,
    batch: usize,
    keep_points: bool,
) -> Result<OuReport> {
    if tube.is_empty() {
        return Err(Error::EmptyTube);
    }
    let (values, floored_points) = per_point(model_orig, model_unlearned, tube, forget_classes, div, batch)?;
    let value = values.iter().sum::<f64>() / values.len() as f64;
    Ok(OuReport {
        value,
        n_points: values.len(),
        divergence: div,
        perturb_method: tube.config.method,
        epsilon: tube.config.epsilon,
        floored_points,
        per_point_values: keep_points.then_some(values),
    })
}

/// OU@ε over the whole tube. Feed a Gaussian tube for the Gaussian variant.
pub fn ou_at_eps(
    model_orig: &Classifier,
    model_unlearned: &Classifier,
    tube: &PerturbedSet,
    forget_classes: &BTreeSet<usize>,
    div: DivergenceKind,
) -> Result<OuReport> {
    ou_at_eps_batched(
        model_orig,
        model_unlearned,
        tube,
        forget_classes,
        div,
        DEFAULT_EVAL_BATCH,
        false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::js_divergence;
    use crate::model::ArchDescriptor;
    use crate::perturb::{PerturbConfig, PerturbedPoint};
    use crate::seeds::Stream;
    use ndarray::{arr1, Array1, Array2};
    use std::f64::consts::LN_2;

    fn point(x: Vec<f64>) -> PerturbedPoint {
        PerturbedPoint {
            x,
            origin_index: 0,
            label: 2,
            method: PerturbMethod::Pgd,
            delta_inf_norm: 0.0,
            margin: 0.0,
        }
    }

    fn tube(points: Vec<Vec<f64>>) -> PerturbedSet {
        PerturbedSet {
            items: points.into_iter().map(point).collect(),
            config: PerturbConfig::default(),
            seed: 0,
            stream: Stream::EvalPerturb,
            dropped: 0,
        }
    }

    /// Logits equal the input (identity φ, W = I, b = 0).
    fn passthrough(c: usize) -> Classifier {
        let ext = ArchDescriptor::Identity { dim: c }.build().unwrap();
        Classifier::new(ext, vec![], Array2::eye(c), Array1::zeros(c)).unwrap()
    }

    #[test]
    fn single_point_reference_value() {
        let m = passthrough(3);
        let t = tube(vec![vec![0.0, 0.0, LN_2]]);
        let cf: BTreeSet<usize> = [2].into_iter().collect();
        let r = ou_at_eps(&m, &m, &t, &cf, DivergenceKind::Js).unwrap();
        // independent evaluation: JS((0.5, 0.5, 0) ‖ (0.25, 0.25, 0.5))
        let expected = js_divergence(&[0.5, 0.5, 0.0], &[0.25, 0.25, 0.5]);
        assert!((r.value - expected).abs() < 1e-12);
        assert!((r.value - 0.2158).abs() < 5e-5, "{}", r.value);
    }

    #[test]
    fn zero_when_forget_mass_vanishes() {
        // forget class logit is hugely negative everywhere -> σ̃ = σ
        let ext = ArchDescriptor::Identity { dim: 2 }.build().unwrap();
        let m = Classifier::new(
            ext,
            vec![],
            Array2::eye(3).slice(s![.., ..2]).to_owned(),
            arr1(&[0.0, 0.0, -1e4]),
        )
        .unwrap();
        let t = tube(vec![vec![0.3, -0.2], vec![1.0, 2.0]]);
        let cf: BTreeSet<usize> = [2].into_iter().collect();
        let r = ou_at_eps(&m, &m, &t, &cf, DivergenceKind::Js).unwrap();
        assert!(r.value.abs() < 1e-12);
    }

    #[test]
    fn empty_tube_is_an_error() {
        let m = passthrough(2);
        let cf: BTreeSet<usize> = [1].into_iter().collect();
        assert!(matches!(
            ou_at_eps(&m, &m, &tube(vec![]), &cf, DivergenceKind::Js),
            Err(Error::EmptyTube)
        ));
    }

    #[test]
    fn batch_size_and_order_do_not_matter() {
        let m = passthrough(3);
        let u = {
            let ext = ArchDescriptor::Identity { dim: 3 }.build().unwrap();
            Classifier::new(ext, vec![], Array2::eye(3) * 0.5, arr1(&[0.1, -0.2, 0.0])).unwrap()
        };
        let pts: Vec<Vec<f64>> = (0..37)
            .map(|i| vec![i as f64 * 0.1, (i % 5) as f64, -(i as f64) * 0.05])
            .collect();
        let cf: BTreeSet<usize> = [0].into_iter().collect();
        let a = ou_at_eps_batched(&m, &u, &tube(pts.clone()), &cf, DivergenceKind::Js, 4, true).unwrap();
        let b = ou_at_eps_batched(&m, &u, &tube(pts.clone()), &cf, DivergenceKind::Js, 1000, true).unwrap();
        assert_eq!(a.per_point_values, b.per_point_values);
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        let mut rev = pts;
        rev.reverse();
        let c = ou_at_eps(&m, &u, &tube(rev), &cf, DivergenceKind::Js).unwrap();
        assert!((a.value - c.value).abs() < 1e-12);
        assert!(a.value > 0.0 && a.value <= LN_2);
    }
}
