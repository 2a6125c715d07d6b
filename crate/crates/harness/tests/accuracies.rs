use ndarray::{Array1, Array2};
use ulab::config::ExperimentConfig;
use ulab::dataset::{make_synthetic_dataset, BlobSpec};
use ulab::experiment::{evaluate_accuracies, per_class_accuracy, train_original};
use ulab_core::attack::accuracy;
use ulab_core::data::{Dataset, ForgetSpec, Split};
use ulab_core::model::{ArchDescriptor, Classifier};
use ulab_core::train::TrainConfig;

/// Inputs are one-hot labels, so an identity head memorizes every sample.
fn one_hot_dataset(labels_train: &[usize], labels_test: &[usize], classes: usize) -> Dataset {
    let split = |labels: &[usize]| {
        let x = Array2::from_shape_fn((labels.len(), classes), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 });
        Split::new(x, labels.to_vec()).unwrap()
    };
    Dataset {
        train: split(labels_train),
        test: split(labels_test),
        num_classes: classes,
        input_bounds: None,
    }
}

fn linear(weight: Array2<f64>, bias: Array1<f64>) -> Classifier {
    let ext = ArchDescriptor::Identity { dim: weight.ncols() }.build().unwrap();
    Classifier::new(ext, vec![], weight, bias).unwrap()
}

#[test]
fn memorizing_model_scores_100_everywhere() {
    let data = one_hot_dataset(&[0, 1, 2, 0, 1, 2, 2], &[2, 1, 0], 3);
    let forget = ForgetSpec::for_classes(&data.train, 3, [1]).unwrap();
    let model = linear(Array2::eye(3), Array1::zeros(3));
    let acc = evaluate_accuracies(&model, &data, &forget).unwrap();
    for v in [acc.acc_f, acc.acc_r, acc.acc_ft, acc.acc_rt] {
        assert_eq!(v, Some(100.0));
    }
}

#[test]
fn constant_predictor_scores_its_class_share() {
    // Train: class 0 ×2, class 1 ×3, class 2 ×5; forget class 0.
    let train = [0, 0, 1, 1, 1, 2, 2, 2, 2, 2];
    let data = one_hot_dataset(&train, &[0, 1, 2, 2], 3);
    let forget = ForgetSpec::for_classes(&data.train, 3, [0]).unwrap();
    let model = linear(Array2::zeros((3, 3)), Array1::from(vec![0.0, 0.0, 1.0]));
    let acc = evaluate_accuracies(&model, &data, &forget).unwrap();
    assert_eq!(acc.acc_f, Some(0.0));
    assert_eq!(acc.acc_r, Some(100.0 * 5.0 / 8.0));
    assert_eq!(acc.acc_ft, Some(0.0));
    assert_eq!(acc.acc_rt, Some(100.0 * 2.0 / 3.0));
}

#[test]
fn ties_break_to_the_lowest_class() {
    let data = one_hot_dataset(&[0, 1, 2], &[0, 1], 3);
    let forget = ForgetSpec::for_classes(&data.train, 3, [2]).unwrap();
    let model = linear(Array2::zeros((3, 3)), Array1::zeros(3));
    let acc = evaluate_accuracies(&model, &data, &forget).unwrap();
    assert_eq!(acc.acc_r, Some(50.0));
    assert_eq!(acc.acc_f, Some(0.0));
}

#[test]
fn empty_restricted_split_is_undefined_not_zero() {
    // The test split has no sample of the forget class.
    let data = one_hot_dataset(&[0, 1, 2], &[1, 2], 3);
    let forget = ForgetSpec::for_classes(&data.train, 3, [0]).unwrap();
    let model = linear(Array2::eye(3), Array1::zeros(3));
    let acc = evaluate_accuracies(&model, &data, &forget).unwrap();
    assert_eq!(acc.acc_ft, None);
    assert_eq!(acc.acc_f, Some(100.0));
}

#[test]
fn linear_probe_on_default_blobs_reaches_95_percent() {
    let data = make_synthetic_dataset(&BlobSpec::default(), 0).unwrap();
    let arch = ArchDescriptor::Identity { dim: data.input_dim() };
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let (model, _) = train_original(&data, &arch, &cfg, 0).unwrap();
    let test_acc = accuracy(&model, &data.test).unwrap().unwrap();
    assert!(test_acc >= 95.0, "linear probe test accuracy {test_acc}");
}

#[test]
fn default_original_model_fits_the_training_split() {
    let cfg = ExperimentConfig::default();
    let data = cfg.dataset_spec().build(0).unwrap();
    let arch = cfg.arch_descriptor(&data).unwrap();
    let (model, log) = train_original(&data, &arch, &cfg.train, 0).unwrap();
    let train_acc = accuracy(&model, &data.train).unwrap().unwrap();
    assert!(train_acc >= 99.0, "train accuracy {train_acc}");
    assert_eq!(log.epoch_loss.len(), cfg.train.epochs);
    assert_eq!(log.access.retain_reads as usize, cfg.train.epochs * data.train.len());
}

#[test]
fn zero_epochs_leaves_a_chance_level_model() {
    let cfg = ExperimentConfig::default();
    let data = cfg.dataset_spec().build(3).unwrap();
    let arch = cfg.arch_descriptor(&data).unwrap();
    let untrained = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (model, _) = train_original(&data, &arch, &untrained, 3).unwrap();
    let acc = accuracy(&model, &data.train).unwrap().unwrap();
    let chance = 100.0 / data.num_classes as f64;
    assert!((acc - chance).abs() <= 15.0, "untrained accuracy {acc}");
    let per_class = per_class_accuracy(&model, &data.train, data.num_classes).unwrap();
    assert_eq!(per_class.len(), data.num_classes);
}
