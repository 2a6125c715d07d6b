use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ulab_core::data::Split;
use ulab_core::divergence::DivergenceKind;
use ulab_core::model::{Activation, ArchDescriptor, Classifier};
use ulab_core::objective::{
    dispersion_loss, spotter_objective, BaseLoss, Lambdas, MaskedDistill, NegGrad, ObjectiveInput, RandomLabel,
};
use ulab_core::train::cross_entropy_grad;

fn small_mlp(seed: u64) -> Classifier {
    let arch = ArchDescriptor::Mlp {
        input_dim: 4,
        hidden: 6,
        embed_dim: 5,
        hidden_activation: Activation::Tanh,
        embed_activation: Activation::Tanh,
    };
    let m = Classifier::init(&arch, 3, seed).unwrap();
    assert!(m.params().num_scalars() <= 200);
    m
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Central differences on every scalar of `model`'s parameters.
fn numeric_grad(model: &Classifier, f: impl Fn(&Classifier) -> f64) -> Vec<f64> {
    let base = model.params().to_flat();
    let h = 1e-5;
    (0..base.len())
        .map(|k| {
            let mut p = model.params().clone();
            let mut plus = base.clone();
            plus[k] += h;
            p.set_flat(&plus).unwrap();
            let fp = f(&model.with_params(p.clone()).unwrap());
            let mut minus = base.clone();
            minus[k] -= h;
            p.set_flat(&minus).unwrap();
            let fm = f(&model.with_params(p).unwrap());
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64]) {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    assert!(diff / scale <= 1e-4, "relative error {}", diff / scale);
    for (a, b) in analytic.iter().zip(numeric) {
        let rel = (a - b).abs() / (a.abs() + b.abs()).max(1e-6);
        assert!(rel <= 1e-4, "component {a} vs {b}");
    }
}

fn objective_value(
    teacher: &Classifier,
    student: &Classifier,
    batch: &Split,
    perturbed: &Array2<f64>,
    lambdas: Lambdas,
    base: &dyn BaseLoss,
    forget: &BTreeSet<usize>,
) -> ulab_core::objective::ObjectiveEval {
    let origins: Vec<usize> = (0..batch.len()).collect();
    spotter_objective(
        &ObjectiveInput {
            teacher,
            student,
            forget_batch: batch,
            origins: &origins,
            perturbed: perturbed.view(),
            forget_classes: forget,
            lambdas,
            divergence: DivergenceKind::Kl,
            epoch: 2,
            seed: 11,
        },
        base,
    )
    .unwrap()
}

#[test]
fn objective_gradients_match_finite_differences() {
    let teacher = small_mlp(1);
    let student = small_mlp(2);
    let forget: BTreeSet<usize> = [1].into_iter().collect();
    let batch = Split::new(random_matrix(6, 4, 3), vec![1; 6]).unwrap();
    let perturbed = random_matrix(6, 4, 4);
    let cases: Vec<(Lambdas, Box<dyn BaseLoss>)> = vec![
        (
            Lambdas {
                lambda1: 0.7,
                lambda2: 1.0,
            },
            Box::new(MaskedDistill {
                divergence: DivergenceKind::Kl,
            }),
        ),
        (
            Lambdas {
                lambda1: 0.3,
                lambda2: 0.5,
            },
            Box::new(MaskedDistill {
                divergence: DivergenceKind::Js,
            }),
        ),
        (
            Lambdas {
                lambda1: 1.0,
                lambda2: 0.0,
            },
            Box::new(MaskedDistill {
                divergence: DivergenceKind::Kl,
            }),
        ),
        (
            Lambdas {
                lambda1: 0.0,
                lambda2: 2.0,
            },
            Box::new(NegGrad),
        ),
        (
            Lambdas {
                lambda1: 0.6,
                lambda2: 1.0,
            },
            Box::new(RandomLabel),
        ),
        (
            Lambdas {
                lambda1: 1.0,
                lambda2: 0.0,
            },
            Box::new(NegGrad),
        ),
    ];
    for (lambdas, base) in cases {
        let eval = objective_value(&teacher, &student, &batch, &perturbed, lambdas, base.as_ref(), &forget);
        let numeric = numeric_grad(&student, |s| {
            objective_value(&teacher, s, &batch, &perturbed, lambdas, base.as_ref(), &forget)
                .terms
                .total
        });
        assert_close(&eval.grads.to_flat(), &numeric);
    }
}

#[test]
fn dispersion_embedding_gradient_matches_finite_differences() {
    let e = random_matrix(7, 5, 9);
    let labels = [0, 0, 0, 2, 2, 1, 2];
    let forget: BTreeSet<usize> = [0, 2].into_iter().collect();
    let d = dispersion_loss(e.view(), &labels, &forget);
    let h = 1e-6;
    for i in 0..e.nrows() {
        for j in 0..e.ncols() {
            let mut p = e.clone();
            p[[i, j]] += h;
            let mut m = e.clone();
            m[[i, j]] -= h;
            let fd = (dispersion_loss(p.view(), &labels, &forget).value
                - dispersion_loss(m.view(), &labels, &forget).value)
                / (2.0 * h);
            assert!(
                (fd - d.grad[[i, j]]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "({i},{j}) {fd} vs {}",
                d.grad[[i, j]]
            );
        }
    }
}

#[test]
fn conv_cross_entropy_gradient_matches_finite_differences() {
    let arch = ArchDescriptor::Conv {
        channels: 1,
        height: 4,
        width: 4,
        conv1: 2,
        conv2: 2,
        embed_dim: 3,
        embed_activation: Activation::Tanh,
    };
    let model = Classifier::init(&arch, 3, 5).unwrap();
    assert!(model.params().num_scalars() <= 200);
    let x = random_matrix(4, 16, 6);
    let y = vec![0, 1, 2, 1];
    let (_, grads) = cross_entropy_grad(&model, x.view(), &y).unwrap();
    let numeric = numeric_grad(&model, |m| cross_entropy_grad(m, x.view(), &y).unwrap().0);
    assert_close(&grads.to_flat(), &numeric);
}
