//! Feature extractors φ. Each architecture is a stateless description; the
//! parameters live in the owning [`Classifier`](super::Classifier).

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix4, IxDyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intermediate activations recorded by a forward pass, consumed by `backward`.
#[derive(Debug, Default)]
pub struct Tape(pub(crate) Vec<ArrayD<f64>>);

pub trait FeatureExtractor: fmt::Debug + Send + Sync {
    fn descriptor(&self) -> ArchDescriptor;

    /// Flattened input length.
    fn input_dim(&self) -> usize;

    fn embed_dim(&self) -> usize;

    /// Names and shapes of the parameter tensors, in the order `forward` expects.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)>;

    fn init(&self, rng: &mut dyn rand::RngCore) -> Vec<ArrayD<f64>>;

    /// Embeds a batch of flattened inputs (one row per sample).
    fn forward(&self, params: &[ArrayD<f64>], x: ArrayView2<f64>) -> (Array2<f64>, Tape);

    /// Returns parameter gradients (same layout as `params`) and the input gradient.
    fn backward(
        &self,
        params: &[ArrayD<f64>],
        tape: &Tape,
        d_embed: ArrayView2<f64>,
    ) -> (Vec<ArrayD<f64>>, Array2<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn grad(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "none" => Ok(Activation::Identity),
            other => Err(Error::UnknownName {
                kind: "activation",
                name: other.to_string(),
                known: "relu, tanh, identity".into(),
            }),
        }
    }
}

/// Serializable architecture description, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchDescriptor {
    /// φ(x) = x.
    Identity { dim: usize },
    /// Two dense layers, each followed by an activation.
    Mlp {
        input_dim: usize,
        hidden: usize,
        embed_dim: usize,
        hidden_activation: Activation,
        embed_activation: Activation,
    },
    /// Two 3×3 conv blocks (ReLU + 2×2 average pooling) and a dense embedding layer.
    Conv {
        channels: usize,
        height: usize,
        width: usize,
        conv1: usize,
        conv2: usize,
        embed_dim: usize,
        embed_activation: Activation,
    },
}

impl ArchDescriptor {
    pub fn name(&self) -> &'static str {
        match self {
            ArchDescriptor::Identity { .. } => "identity",
            ArchDescriptor::Mlp { .. } => "mlp",
            ArchDescriptor::Conv { .. } => "conv",
        }
    }

    pub fn build(&self) -> Result<Arc<dyn FeatureExtractor>> {
        Ok(match *self {
            ArchDescriptor::Identity { dim } => {
                if dim == 0 {
                    return Err(Error::config("identity extractor needs dim > 0"));
                }
                Arc::new(IdentityExtractor { dim })
            }
            ArchDescriptor::Mlp {
                input_dim,
                hidden,
                embed_dim,
                hidden_activation,
                embed_activation,
            } => {
                if input_dim == 0 || hidden == 0 || embed_dim == 0 {
                    return Err(Error::config("mlp dimensions must be positive"));
                }
                Arc::new(Mlp {
                    input_dim,
                    hidden,
                    embed_dim,
                    hidden_activation,
                    embed_activation,
                })
            }
            ArchDescriptor::Conv {
                channels,
                height,
                width,
                conv1,
                conv2,
                embed_dim,
                embed_activation,
            } => {
                if height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0 {
                    return Err(Error::config(format!(
                        "conv extractor needs spatial dims divisible by 4, got {height}x{width}"
                    )));
                }
                if channels == 0 || conv1 == 0 || conv2 == 0 || embed_dim == 0 {
                    return Err(Error::config("conv channel counts must be positive"));
                }
                Arc::new(ConvNet {
                    channels,
                    height,
                    width,
                    conv1,
                    conv2,
                    embed_dim,
                    embed_activation,
                })
            }
        })
    }
}

fn he_normal(rng: &mut dyn rand::RngCore, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
}

fn view2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn view1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("rank-1 tensor")
}

#[derive(Debug)]
pub struct IdentityExtractor {
    dim: usize,
}

impl FeatureExtractor for IdentityExtractor {
    fn descriptor(&self) -> ArchDescriptor {
        ArchDescriptor::Identity { dim: self.dim }
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        Vec::new()
    }

    fn init(&self, _rng: &mut dyn rand::RngCore) -> Vec<ArrayD<f64>> {
        Vec::new()
    }

    fn forward(&self, _params: &[ArrayD<f64>], x: ArrayView2<f64>) -> (Array2<f64>, Tape) {
        (x.to_owned(), Tape::default())
    }

    fn backward(
        &self,
        _params: &[ArrayD<f64>],
        _tape: &Tape,
        d_embed: ArrayView2<f64>,
    ) -> (Vec<ArrayD<f64>>, Array2<f64>) {
        (Vec::new(), d_embed.to_owned())
    }
}

#[derive(Debug)]
pub struct Mlp {
    input_dim: usize,
    hidden: usize,
    embed_dim: usize,
    hidden_activation: Activation,
    embed_activation: Activation,
}

impl FeatureExtractor for Mlp {
    fn descriptor(&self) -> ArchDescriptor {
        ArchDescriptor::Mlp {
            input_dim: self.input_dim,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            hidden_activation: self.hidden_activation,
            embed_activation: self.embed_activation,
        }
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("fc1.weight".into(), vec![self.hidden, self.input_dim]),
            ("fc1.bias".into(), vec![self.hidden]),
            ("fc2.weight".into(), vec![self.embed_dim, self.hidden]),
            ("fc2.bias".into(), vec![self.embed_dim]),
        ]
    }

    fn init(&self, rng: &mut dyn rand::RngCore) -> Vec<ArrayD<f64>> {
        vec![
            he_normal(rng, &[self.hidden, self.input_dim], self.input_dim),
            ArrayD::zeros(IxDyn(&[self.hidden])),
            he_normal(rng, &[self.embed_dim, self.hidden], self.hidden),
            ArrayD::zeros(IxDyn(&[self.embed_dim])),
        ]
    }

    fn forward(&self, params: &[ArrayD<f64>], x: ArrayView2<f64>) -> (Array2<f64>, Tape) {
        let (w1, b1, w2, b2) = (
            view2(&params[0]),
            view1(&params[1]),
            view2(&params[2]),
            view1(&params[3]),
        );
        let pre1 = x.dot(&w1.t()) + b1;
        let act1 = pre1.mapv(|v| self.hidden_activation.apply(v));
        let pre2 = act1.dot(&w2.t()) + b2;
        let act2 = pre2.mapv(|v| self.embed_activation.apply(v));
        let tape = Tape(vec![
            x.to_owned().into_dyn(),
            pre1.into_dyn(),
            act1.into_dyn(),
            pre2.into_dyn(),
            act2.clone().into_dyn(),
        ]);
        (act2, tape)
    }

    fn backward(
        &self,
        params: &[ArrayD<f64>],
        tape: &Tape,
        d_embed: ArrayView2<f64>,
    ) -> (Vec<ArrayD<f64>>, Array2<f64>) {
        let (w1, w2) = (view2(&params[0]), view2(&params[2]));
        let x = view2(&tape.0[0]);
        let (pre1, act1) = (view2(&tape.0[1]), view2(&tape.0[2]));
        let (pre2, act2) = (view2(&tape.0[3]), view2(&tape.0[4]));

        let mut d_pre2 = d_embed.to_owned();
        ndarray::Zip::from(&mut d_pre2)
            .and(&pre2)
            .and(&act2)
            .for_each(|d, &p, &a| *d *= self.embed_activation.grad(p, a));
        let d_w2 = d_pre2.t().dot(&act1);
        let d_b2 = d_pre2.sum_axis(Axis(0));
        let mut d_pre1 = d_pre2.dot(&w2);
        ndarray::Zip::from(&mut d_pre1)
            .and(&pre1)
            .and(&act1)
            .for_each(|d, &p, &a| *d *= self.hidden_activation.grad(p, a));
        let d_w1 = d_pre1.t().dot(&x);
        let d_b1 = d_pre1.sum_axis(Axis(0));
        let d_x = d_pre1.dot(&w1);
        (
            vec![d_w1.into_dyn(), d_b1.into_dyn(), d_w2.into_dyn(), d_b2.into_dyn()],
            d_x,
        )
    }
}

#[derive(Debug)]
pub struct ConvNet {
    channels: usize,
    height: usize,
    width: usize,
    conv1: usize,
    conv2: usize,
    embed_dim: usize,
    embed_activation: Activation,
}

/// im2col for a 3×3 kernel, stride 1, zero padding 1.
/// Rows are indexed by (sample, y, x); columns by (channel, ky, kx).
fn im2col(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut cols = Array2::zeros((n * h * w, c * 9));
    for b in 0..n {
        for yy in 0..h {
            for xx in 0..w {
                let row = (b * h + yy) * w + xx;
                for ch in 0..c {
                    for ky in 0..3 {
                        let sy = yy as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            cols[[row, ch * 9 + ky * 3 + kx]] = x[[b, ch, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let (n, c, h, w) = shape;
    let mut x = Array4::zeros(shape);
    for b in 0..n {
        for yy in 0..h {
            for xx in 0..w {
                let row = (b * h + yy) * w + xx;
                for ch in 0..c {
                    for ky in 0..3 {
                        let sy = yy as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            x[[b, ch, sy as usize, sx as usize]] += cols[[row, ch * 9 + ky * 3 + kx]];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Conv forward: returns the (N, Cout, H, W) pre-activation and the im2col matrix.
fn conv_forward(x: &Array4<f64>, weight: &ArrayD<f64>, bias: &ArrayD<f64>) -> (Array4<f64>, Array2<f64>) {
    let (n, _, h, w) = x.dim();
    let cout = weight.shape()[0];
    let w_flat = weight
        .view()
        .into_shape_with_order((cout, weight.len() / cout))
        .expect("contiguous weight");
    let cols = im2col(x);
    let out = cols.dot(&w_flat.t()) + view1(bias);
    let out = out
        .into_shape_with_order((n, h, w, cout))
        .expect("row count matches")
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned();
    (out, cols)
}

/// Returns (d_weight, d_bias, d_input).
fn conv_backward(
    d_out: &Array4<f64>,
    cols: &Array2<f64>,
    weight: &ArrayD<f64>,
    in_shape: (usize, usize, usize, usize),
) -> (ArrayD<f64>, ArrayD<f64>, Array4<f64>) {
    let (n, cout, h, w) = d_out.dim();
    let d_rows = d_out
        .view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, cout))
        .expect("contiguous");
    let w_flat = weight
        .view()
        .into_shape_with_order((cout, weight.len() / cout))
        .expect("contiguous weight");
    let d_w = d_rows
        .t()
        .dot(cols)
        .into_shape_with_order(IxDyn(weight.shape()))
        .expect("weight shape");
    let d_b = d_rows.sum_axis(Axis(0)).into_dyn();
    let d_cols = d_rows.dot(&w_flat);
    (d_w, d_b, col2im(&d_cols, in_shape))
}

fn avg_pool2(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h / 2, w / 2));
    for ((b, ch, yy, xx), v) in out.indexed_iter_mut() {
        let (y0, x0) = (2 * yy, 2 * xx);
        *v = 0.25 * (x[[b, ch, y0, x0]] + x[[b, ch, y0 + 1, x0]] + x[[b, ch, y0, x0 + 1]] + x[[b, ch, y0 + 1, x0 + 1]]);
    }
    out
}

fn avg_pool2_backward(d_out: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = d_out.dim();
    let mut d_in = Array4::zeros((n, c, h * 2, w * 2));
    for ((b, ch, yy, xx), &g) in d_out.indexed_iter() {
        let q = 0.25 * g;
        d_in[[b, ch, 2 * yy, 2 * xx]] = q;
        d_in[[b, ch, 2 * yy + 1, 2 * xx]] = q;
        d_in[[b, ch, 2 * yy, 2 * xx + 1]] = q;
        d_in[[b, ch, 2 * yy + 1, 2 * xx + 1]] = q;
    }
    d_in
}

impl ConvNet {
    fn flat_dim(&self) -> usize {
        self.conv2 * (self.height / 4) * (self.width / 4)
    }
}

impl FeatureExtractor for ConvNet {
    fn descriptor(&self) -> ArchDescriptor {
        ArchDescriptor::Conv {
            channels: self.channels,
            height: self.height,
            width: self.width,
            conv1: self.conv1,
            conv2: self.conv2,
            embed_dim: self.embed_dim,
            embed_activation: self.embed_activation,
        }
    }

    fn input_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("conv1.weight".into(), vec![self.conv1, self.channels, 3, 3]),
            ("conv1.bias".into(), vec![self.conv1]),
            ("conv2.weight".into(), vec![self.conv2, self.conv1, 3, 3]),
            ("conv2.bias".into(), vec![self.conv2]),
            ("fc.weight".into(), vec![self.embed_dim, self.flat_dim()]),
            ("fc.bias".into(), vec![self.embed_dim]),
        ]
    }

    fn init(&self, rng: &mut dyn rand::RngCore) -> Vec<ArrayD<f64>> {
        vec![
            he_normal(rng, &[self.conv1, self.channels, 3, 3], self.channels * 9),
            ArrayD::zeros(IxDyn(&[self.conv1])),
            he_normal(rng, &[self.conv2, self.conv1, 3, 3], self.conv1 * 9),
            ArrayD::zeros(IxDyn(&[self.conv2])),
            he_normal(rng, &[self.embed_dim, self.flat_dim()], self.flat_dim()),
            ArrayD::zeros(IxDyn(&[self.embed_dim])),
        ]
    }

    fn forward(&self, params: &[ArrayD<f64>], x: ArrayView2<f64>) -> (Array2<f64>, Tape) {
        let n = x.nrows();
        let input = x
            .to_owned()
            .into_shape_with_order((n, self.channels, self.height, self.width))
            .expect("input length checked by classifier");
        let (pre1, cols1) = conv_forward(&input, &params[0], &params[1]);
        let act1 = pre1.mapv(|v| v.max(0.0));
        let pool1 = avg_pool2(&act1);
        let (pre2, cols2) = conv_forward(&pool1, &params[2], &params[3]);
        let act2 = pre2.mapv(|v| v.max(0.0));
        let pool2 = avg_pool2(&act2);
        let flat = pool2
            .clone()
            .into_shape_with_order((n, self.flat_dim()))
            .expect("contiguous pool output");
        let pre3 = flat.dot(&view2(&params[4]).t()) + view1(&params[5]);
        let out = pre3.mapv(|v| self.embed_activation.apply(v));
        let tape = Tape(vec![
            cols1.into_dyn(),
            pre1.into_dyn(),
            pool1.into_dyn(),
            cols2.into_dyn(),
            pre2.into_dyn(),
            flat.into_dyn(),
            pre3.into_dyn(),
            out.clone().into_dyn(),
        ]);
        (out, tape)
    }

    fn backward(
        &self,
        params: &[ArrayD<f64>],
        tape: &Tape,
        d_embed: ArrayView2<f64>,
    ) -> (Vec<ArrayD<f64>>, Array2<f64>) {
        let n = d_embed.nrows();
        let t = &tape.0;
        let cols1 = view2(&t[0]).to_owned();
        let pre1 = t[1].view().into_dimensionality::<Ix4>().expect("rank 4");
        let pool1 = t[2].view().into_dimensionality::<Ix4>().expect("rank 4").to_owned();
        let cols2 = view2(&t[3]).to_owned();
        let pre2 = t[4].view().into_dimensionality::<Ix4>().expect("rank 4");
        let flat = view2(&t[5]);
        let (pre3, out) = (view2(&t[6]), view2(&t[7]));

        let mut d_pre3 = d_embed.to_owned();
        ndarray::Zip::from(&mut d_pre3)
            .and(&pre3)
            .and(&out)
            .for_each(|d, &p, &a| *d *= self.embed_activation.grad(p, a));
        let d_fc_w = d_pre3.t().dot(&flat);
        let d_fc_b = d_pre3.sum_axis(Axis(0));
        let d_flat = d_pre3.dot(&view2(&params[4]));
        let (h2, w2) = (self.height / 4, self.width / 4);
        let d_pool2 = d_flat
            .into_shape_with_order((n, self.conv2, h2, w2))
            .expect("contiguous");
        let mut d_pre2 = avg_pool2_backward(&d_pool2);
        ndarray::Zip::from(&mut d_pre2).and(&pre2).for_each(|d, &p| {
            if p <= 0.0 {
                *d = 0.0
            }
        });
        let (d_c2w, d_c2b, d_pool1) = conv_backward(&d_pre2, &cols2, &params[2], pool1.dim());
        let mut d_pre1 = avg_pool2_backward(&d_pool1);
        ndarray::Zip::from(&mut d_pre1).and(&pre1).for_each(|d, &p| {
            if p <= 0.0 {
                *d = 0.0
            }
        });
        let in_shape = (n, self.channels, self.height, self.width);
        let (d_c1w, d_c1b, d_input) = conv_backward(&d_pre1, &cols1, &params[0], in_shape);
        let d_x = d_input
            .into_shape_with_order((n, self.input_dim()))
            .expect("contiguous");
        (
            vec![d_c1w, d_c1b, d_c2w, d_c2b, d_fc_w.into_dyn(), d_fc_b.into_dyn()],
            d_x,
        )
    }
}

/// He-normal head weights scaled by 0.5 so initial logits stay small; zero bias.
pub(crate) fn init_head(rng: &mut dyn rand::RngCore, classes: usize, embed: usize) -> (Array2<f64>, Array1<f64>) {
    let w = he_normal(rng, &[classes, embed], embed)
        .into_dimensionality::<Ix2>()
        .expect("rank 2");
    (w * 0.5, Array1::zeros(classes))
}
