use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::{init_head, ArchDescriptor, FeatureExtractor, Tape};
use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Feature extractor φ plus an affine head: `logits(x) = W·φ(x) + b`.
///
/// The parameter set stores φ's tensors first, followed by `head.weight`
/// (C×n) and `head.bias` (C). Values are treated as immutable snapshots:
/// training produces new parameter sets rather than mutating a shared model.
#[derive(Debug, Clone)]
pub struct Classifier {
    extractor: Arc<dyn FeatureExtractor>,
    params: ParamSet,
    num_classes: usize,
}

/// Output of a differentiable forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub embeddings: Array2<f64>,
    pub logits: Array2<f64>,
    tape: Tape,
}

impl Classifier {
    pub fn new(
        extractor: Arc<dyn FeatureExtractor>,
        feature_params: Vec<ArrayD<f64>>,
        head_weight: Array2<f64>,
        head_bias: Array1<f64>,
    ) -> Result<Self> {
        let shapes = extractor.param_shapes();
        if shapes.len() != feature_params.len() {
            return Err(Error::Shape {
                what: "feature parameter count",
                expected: shapes.len(),
                got: feature_params.len(),
            });
        }
        let mut params = ParamSet::new();
        for ((name, shape), t) in shapes.into_iter().zip(feature_params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::InputShape {
                    expected: format!("{name} {shape:?}"),
                    got: format!("{:?}", t.shape()),
                });
            }
            params.push(name, t);
        }
        let num_classes = head_weight.nrows();
        if num_classes == 0 {
            return Err(Error::config("classifier needs at least one class"));
        }
        if head_weight.ncols() != extractor.embed_dim() {
            return Err(Error::Shape {
                what: "head weight columns",
                expected: extractor.embed_dim(),
                got: head_weight.ncols(),
            });
        }
        if head_bias.len() != num_classes {
            return Err(Error::Shape {
                what: "head bias length",
                expected: num_classes,
                got: head_bias.len(),
            });
        }
        params.push("head.weight", head_weight.into_dyn());
        params.push("head.bias", head_bias.into_dyn());
        Ok(Self {
            extractor,
            params,
            num_classes,
        })
    }

    /// Fresh random initialization, deterministic in `seed`.
    pub fn init(arch: &ArchDescriptor, num_classes: usize, seed: u64) -> Result<Self> {
        let extractor = arch.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature_params = extractor.init(&mut rng);
        let (w, b) = init_head(&mut rng, num_classes, extractor.embed_dim());
        Self::new(extractor, feature_params, w, b)
    }

    pub fn descriptor(&self) -> ArchDescriptor {
        self.extractor.descriptor()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn embed_dim(&self) -> usize {
        self.extractor.embed_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Replaces all parameters; layout must match the current one.
    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        if params.names() != self.params.names() {
            return Err(Error::protocol("parameter names differ from model layout"));
        }
        for (a, b) in params.tensors().iter().zip(self.params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::InputShape {
                    expected: format!("{:?}", b.shape()),
                    got: format!("{:?}", a.shape()),
                });
            }
        }
        Ok(Self {
            extractor: Arc::clone(&self.extractor),
            params,
            num_classes: self.num_classes,
        })
    }

    fn n_feature_tensors(&self) -> usize {
        self.params.len() - 2
    }

    fn feature_tensors(&self) -> &[ArrayD<f64>] {
        &self.params.tensors()[..self.n_feature_tensors()]
    }

    /// Parameters of φ only (everything but the head).
    pub fn feature_params(&self) -> &[ArrayD<f64>] {
        self.feature_tensors()
    }

    pub fn head_weight(&self) -> ArrayView2<'_, f64> {
        self.params.tensors()[self.n_feature_tensors()]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("head weight is rank 2")
    }

    pub fn head_bias(&self) -> ArrayView1<'_, f64> {
        self.params.tensors()[self.n_feature_tensors() + 1]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("head bias is rank 1")
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::InputShape {
                expected: format!("[_, {}]", self.input_dim()),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// Embeddings φ(x), one row per input.
    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(self.extractor.forward(self.feature_tensors(), x).0)
    }

    /// Applies the affine head to precomputed embeddings.
    /// Always returns a row-major array, whatever the layout of `embeddings`.
    pub fn head_logits(&self, embeddings: ArrayView2<f64>) -> Array2<f64> {
        let logits = embeddings.dot(&self.head_weight().t()) + self.head_bias();
        if logits.is_standard_layout() {
            logits
        } else {
            logits.as_standard_layout().into_owned()
        }
    }

    /// Logit vectors `W·φ(x) + b`, one row per input.
    pub fn forward_logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let emb = self.features(x)?;
        Ok(self.head_logits(emb.view()))
    }

    /// Forward pass that keeps what `backward` needs.
    pub fn forward_train(&self, x: ArrayView2<f64>) -> Result<ForwardPass> {
        self.check_input(&x)?;
        let (embeddings, tape) = self.extractor.forward(self.feature_tensors(), x);
        let logits = self.head_logits(embeddings.view());
        Ok(ForwardPass {
            embeddings,
            logits,
            tape,
        })
    }

    /// Back-propagates upstream gradients on the logits and (optionally) directly
    /// on the embeddings. Returns the parameter gradient and the input gradient.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_logits: ArrayView2<f64>,
        d_embeddings: Option<ArrayView2<f64>>,
    ) -> (ParamSet, Array2<f64>) {
        let d_head_w = d_logits.t().dot(&pass.embeddings);
        let d_head_b = d_logits.sum_axis(Axis(0));
        let mut d_emb = d_logits.dot(&self.head_weight());
        if let Some(extra) = d_embeddings {
            d_emb += &extra;
        }
        let (feature_grads, d_input) = self
            .extractor
            .backward(self.feature_tensors(), &pass.tape, d_emb.view());
        let mut grads = ParamSet::new();
        for (name, g) in self.params.names().iter().zip(feature_grads) {
            grads.push(name.clone(), g);
        }
        grads.push("head.weight", d_head_w.into_dyn());
        grads.push("head.bias", d_head_b.into_dyn());
        (grads, d_input)
    }

    /// Top-1 predictions with lowest-index tie-breaking.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        let logits = self.forward_logits(x)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("standard layout")))
            .collect())
    }

    /// Returns a new model whose head rows for the listed classes are replaced.
    /// φ parameters and all unlisted rows are copied bit-for-bit.
    pub fn replace_head_rows(&self, rows: &BTreeMap<usize, (Array1<f64>, f64)>) -> Result<Self> {
        let mut params = self.params.clone();
        let head_idx = self.n_feature_tensors();
        let n = self.embed_dim();
        for (&class, (w, b)) in rows {
            if class >= self.num_classes {
                return Err(Error::ClassOutOfRange {
                    class,
                    num_classes: self.num_classes,
                });
            }
            if w.len() != n {
                return Err(Error::Shape {
                    what: "replacement head row",
                    expected: n,
                    got: w.len(),
                });
            }
            {
                let mut head_w = params
                    .get_mut(head_idx)
                    .view_mut()
                    .into_dimensionality::<Ix2>()
                    .expect("rank 2");
                head_w.row_mut(class).assign(w);
            }
            params.get_mut(head_idx + 1)[[class]] = *b;
        }
        Ok(Self {
            extractor: Arc::clone(&self.extractor),
            params,
            num_classes: self.num_classes,
        })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `z_c − max_{k≠c} z_k`. Positive iff `c` is the unique argmax.
pub fn logit_margin(logits: &[f64], class: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::DegenerateClassifier(logits.len()));
    }
    if class >= logits.len() {
        return Err(Error::ClassOutOfRange {
            class,
            num_classes: logits.len(),
        });
    }
    let runner_up = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != class)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[class] - runner_up)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch::Activation;
    use ndarray::{arr1, arr2, Array, ShapeBuilder};
    use rand::Rng;

    fn identity_model(w: Array2<f64>, b: Array1<f64>) -> Classifier {
        let ext = ArchDescriptor::Identity { dim: w.ncols() }.build().unwrap();
        Classifier::new(ext, vec![], w, b).unwrap()
    }

    fn small_mlp(seed: u64) -> Classifier {
        let arch = ArchDescriptor::Mlp {
            input_dim: 4,
            hidden: 6,
            embed_dim: 3,
            hidden_activation: Activation::Relu,
            embed_activation: Activation::Tanh,
        };
        Classifier::init(&arch, 3, seed).unwrap()
    }

    #[test]
    fn zero_features_give_bias() {
        let arch = ArchDescriptor::Mlp {
            input_dim: 3,
            hidden: 4,
            embed_dim: 2,
            hidden_activation: Activation::Relu,
            embed_activation: Activation::Relu,
        };
        let m = Classifier::init(&arch, 2, 0).unwrap();
        let mut params = m.params().zeros_like();
        let last = params.len() - 1;
        params.get_mut(last).assign(&arr1(&[1.0, 2.0]).into_dyn());
        let m = m.with_params(params).unwrap();
        let x = arr2(&[[0.3, -1.0, 2.0], [5.0, 5.0, 5.0]]);
        let logits = m.forward_logits(x.view()).unwrap();
        for row in logits.rows() {
            assert_eq!(row.to_vec(), vec![1.0, 2.0]);
        }
        let emb = m.features(x.view()).unwrap();
        assert!(emb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_composition() {
        let m = identity_model(Array2::eye(2), Array1::zeros(2));
        let x = arr2(&[[3.0, -1.0]]);
        assert_eq!(m.forward_logits(x.view()).unwrap(), arr2(&[[3.0, -1.0]]));
        assert_eq!(m.features(arr2(&[[1.0, 2.0]]).view()).unwrap(), arr2(&[[1.0, 2.0]]));
    }

    #[test]
    fn repeated_evaluation_is_deterministic() {
        let m = small_mlp(7);
        let x = arr2(&[[0.1, 0.2, -0.3, 0.9]]);
        let a = m.forward_logits(x.view()).unwrap();
        let b = m.forward_logits(x.view()).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn affine_head_consistency() {
        let m = small_mlp(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array::from_shape_fn((100, 4), |_| rng.gen_range(-2.0..2.0));
        let logits = m.forward_logits(x.view()).unwrap();
        let emb = m.features(x.view()).unwrap();
        let manual = emb.dot(&m.head_weight().t()) + m.head_bias();
        for (l, r) in logits.rows().into_iter().zip(manual.rows()) {
            let scale = 1.0 + l.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            let diff = l.iter().zip(r.iter()).fold(0.0_f64, |a, (p, q)| a.max((p - q).abs()));
            assert!(diff <= 1e-6 * scale);
        }
    }

    #[test]
    fn input_shape_error() {
        let m = small_mlp(0);
        let x = arr2(&[[1.0, 2.0]]);
        assert!(matches!(m.forward_logits(x.view()), Err(Error::InputShape { .. })));
        assert!(matches!(m.features(x.view()), Err(Error::InputShape { .. })));
    }

    #[test]
    fn margins() {
        assert_eq!(logit_margin(&[3.0, 1.0, 2.0], 0).unwrap(), 1.0);
        assert_eq!(logit_margin(&[2.0, 2.0], 0).unwrap(), 0.0);
        assert_eq!(logit_margin(&[1.0, 5.0, 2.0], 0).unwrap(), -4.0);
        assert!(matches!(logit_margin(&[1.0], 0), Err(Error::DegenerateClassifier(1))));
    }

    #[test]
    fn predict_accepts_column_major_inputs() {
        let ext = ArchDescriptor::Identity { dim: 3 }.build().unwrap();
        let m = Classifier::new(ext, vec![], Array2::eye(3), Array1::zeros(3)).unwrap();
        let x = Array2::from_shape_vec((2, 3).f(), vec![0.0, 5.0, 9.0, 0.0, 1.0, 2.0]).unwrap();
        assert!(!x.is_standard_layout());
        assert_eq!(m.predict(x.view()).unwrap(), vec![1, 0]);
        assert!(m.forward_logits(x.view()).unwrap().is_standard_layout());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn replace_with_own_rows_is_identity() {
        let m = small_mlp(5);
        let mut rows = BTreeMap::new();
        rows.insert(1, (m.head_weight().row(1).to_owned(), m.head_bias()[1]));
        let patched = m.replace_head_rows(&rows).unwrap();
        assert!(patched.params().bit_eq(m.params()));
    }

    #[test]
    fn dominant_row_wins_everywhere() {
        let m = small_mlp(9);
        let mut rows = BTreeMap::new();
        rows.insert(0, (Array1::zeros(3), 1e6));
        let patched = m.replace_head_rows(&rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array::from_shape_fn((50, 4), |_| rng.gen_range(-3.0..3.0));
        assert!(patched.predict(x.view()).unwrap().iter().all(|&c| c == 0));
        // untouched rows and the source model
        for c in 1..3 {
            assert_eq!(patched.head_weight().row(c), m.head_weight().row(c));
            assert_eq!(patched.head_bias()[c].to_bits(), m.head_bias()[c].to_bits());
        }
        assert_ne!(m.head_bias()[0], 1e6);
    }

    #[test]
    fn replace_rejects_bad_rows() {
        let m = small_mlp(1);
        let mut rows = BTreeMap::new();
        rows.insert(0, (Array1::zeros(2), 0.0));
        assert!(matches!(m.replace_head_rows(&rows), Err(Error::Shape { .. })));
        let mut rows = BTreeMap::new();
        rows.insert(7, (Array1::zeros(3), 0.0));
        assert!(matches!(m.replace_head_rows(&rows), Err(Error::ClassOutOfRange { .. })));
    }
}
