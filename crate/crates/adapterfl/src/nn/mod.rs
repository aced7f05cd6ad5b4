//! The training engine: layer graph, forward/backward, parameters.
//!
//! A model is a flat [`ModelGraph`] of [`Layer`]s. Composite layers
//! (residual and inverted-residual blocks) nest their own sub-layers.
//! Structure is described by [`LayerSpec`], which serializes; weights live
//! in the layers themselves and move through [`params::ParameterSet`]
//! snapshots at module boundaries (uploads, aggregation, checkpoints).

pub mod checkpoint;
pub mod conv;
pub mod init;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use conv::{conv2d_backward, conv2d_forward, ConvGeom};
use layers::{
    adaptive_avg_pool_backward, adaptive_avg_pool_forward, global_avg_pool_backward,
    global_avg_pool_forward, relu_backward, relu_forward, relu_forward_eval, BatchNormLayer,
    BnCache, DenseLayer, Mask, MaxPoolLayer,
};

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Spatial { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl ShapeKind {
    pub fn numel(&self) -> usize {
        match self {
            ShapeKind::Spatial { c, h, w } => c * h * w,
            ShapeKind::Flat { d } => *d,
        }
    }
    pub fn spatial(&self) -> Option<(usize, usize, usize)> {
        match self {
            ShapeKind::Spatial { c, h, w } => Some((*c, *h, *w)),
            ShapeKind::Flat { .. } => None,
        }
    }
}

/// Structural description of a layer; serializable, weight-free.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm2d {
        ch: usize,
    },
    ReLU,
    ReLU6,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    AdaptiveAvgPool {
        out_h: usize,
        out_w: usize,
    },
    Flatten,
    Residual {
        main: Vec<LayerSpec>,
        projection: bool,
    },
    InvertedResidual {
        in_ch: usize,
        out_ch: usize,
        expand: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer<F: Element> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    /// `[out_ch, in_ch/groups, k, k]`
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
    pub grad_weight: Tensor<F>,
    pub grad_bias: Option<Tensor<F>>,
}

impl<F: Element> Conv2dLayer<F> {
    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            groups: self.groups,
            in_h: h,
            in_w: w,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResidualLayer<F: Element> {
    pub main: Vec<Layer<F>>,
    /// Projection path (1x1 conv + BN) or identity when `None`.
    pub shortcut: Option<Vec<Layer<F>>>,
}

#[derive(Clone, Debug)]
pub struct InvertedResidualLayer<F: Element> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub expand: usize,
    pub stride: usize,
    pub layers: Vec<Layer<F>>,
    pub use_res: bool,
}

#[derive(Clone, Debug)]
pub enum Layer<F: Element> {
    Conv2d(Conv2dLayer<F>),
    Dense(DenseLayer<F>),
    BatchNorm2d(BatchNormLayer<F>),
    ReLU,
    ReLU6,
    MaxPool(MaxPoolLayer),
    GlobalAvgPool,
    AdaptiveAvgPool { out_h: usize, out_w: usize },
    Flatten,
    Residual(ResidualLayer<F>),
    InvertedResidual(InvertedResidualLayer<F>),
}

/// Per-layer state stashed by the training forward pass.
pub enum Cache<F: Element> {
    None,
    Input(Tensor<F>),
    Bn(BnCache<F>),
    Mask(Mask),
    MaxPool { idx: Vec<u32>, in_shape: Vec<usize> },
    Shape(Vec<usize>),
    Seq(Vec<Cache<F>>),
    Residual { main: Vec<Cache<F>>, shortcut: Vec<Cache<F>>, mask: Mask },
}

impl<F: Element> std::fmt::Debug for Cache<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self {
            Cache::None => "None",
            Cache::Input(_) => "Input",
            Cache::Bn(_) => "Bn",
            Cache::Mask(_) => "Mask",
            Cache::MaxPool { .. } => "MaxPool",
            Cache::Shape(_) => "Shape",
            Cache::Seq(_) => "Seq",
            Cache::Residual { .. } => "Residual",
        };
        write!(f, "Cache::{tag}")
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    /// Batch statistics, caches recorded.
    Train,
    /// Running statistics, no caches.
    Eval,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamKind {
    Trainable,
    /// Batch-norm running statistics: aggregated and checkpointed, but not
    /// updated by the optimizer and not counted by `param_count`.
    Buffer,
}

pub struct ParamView<'a, F: Element> {
    pub name: String,
    pub value: &'a Tensor<F>,
    pub grad: Option<&'a Tensor<F>>,
    pub kind: ParamKind,
}

pub struct ParamViewMut<'a, F: Element> {
    pub name: String,
    pub value: &'a mut Tensor<F>,
    pub grad: Option<&'a mut Tensor<F>>,
    pub kind: ParamKind,
}

impl<F: Element> Layer<F> {
    /// Build a layer with freshly initialized weights.
    pub fn from_spec(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Layer<F> {
        match spec {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, pad, groups, bias } => {
                let fan_in = (in_ch / groups) * kernel * kernel;
                let weight = init::kaiming_uniform(rng, &[*out_ch, in_ch / groups, *kernel, *kernel], fan_in);
                let bias_t = bias.then(|| init::bias_uniform(rng, &[*out_ch], fan_in));
                Layer::Conv2d(Conv2dLayer {
                    in_ch: *in_ch,
                    out_ch: *out_ch,
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                    groups: *groups,
                    grad_weight: Tensor::zeros(weight.shape()),
                    grad_bias: bias.then(|| Tensor::zeros(&[*out_ch])),
                    weight,
                    bias: bias_t,
                })
            }
            LayerSpec::Dense { in_features, out_features } => {
                let weight = init::kaiming_uniform(rng, &[*out_features, *in_features], *in_features);
                let bias = init::bias_uniform(rng, &[*out_features], *in_features);
                Layer::Dense(DenseLayer {
                    in_features: *in_features,
                    out_features: *out_features,
                    grad_weight: Tensor::zeros(weight.shape()),
                    grad_bias: Tensor::zeros(bias.shape()),
                    weight,
                    bias,
                })
            }
            LayerSpec::BatchNorm2d { ch } => Layer::BatchNorm2d(BatchNormLayer::new(*ch)),
            LayerSpec::ReLU => Layer::ReLU,
            LayerSpec::ReLU6 => Layer::ReLU6,
            LayerSpec::MaxPool { kernel, stride } => {
                Layer::MaxPool(MaxPoolLayer { kernel: *kernel, stride: *stride })
            }
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::AdaptiveAvgPool { out_h, out_w } => {
                Layer::AdaptiveAvgPool { out_h: *out_h, out_w: *out_w }
            }
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Residual { main, projection } => {
                let main_layers: Vec<Layer<F>> =
                    main.iter().map(|s| Layer::from_spec(s, rng)).collect();
                let shortcut = projection.then(|| {
                    let (in_ch, out_ch, stride) = residual_conv_dims(main);
                    vec![
                        Layer::from_spec(
                            &LayerSpec::Conv2d {
                                in_ch,
                                out_ch,
                                kernel: 1,
                                stride,
                                pad: 0,
                                groups: 1,
                                bias: false,
                            },
                            rng,
                        ),
                        Layer::from_spec(&LayerSpec::BatchNorm2d { ch: out_ch }, rng),
                    ]
                });
                Layer::Residual(ResidualLayer { main: main_layers, shortcut })
            }
            LayerSpec::InvertedResidual { in_ch, out_ch, expand, stride } => {
                let hidden = in_ch * expand;
                let mut subs = Vec::new();
                if *expand != 1 {
                    subs.push(LayerSpec::Conv2d {
                        in_ch: *in_ch,
                        out_ch: hidden,
                        kernel: 1,
                        stride: 1,
                        pad: 0,
                        groups: 1,
                        bias: false,
                    });
                    subs.push(LayerSpec::BatchNorm2d { ch: hidden });
                    subs.push(LayerSpec::ReLU6);
                }
                subs.push(LayerSpec::Conv2d {
                    in_ch: hidden,
                    out_ch: hidden,
                    kernel: 3,
                    stride: *stride,
                    pad: 1,
                    groups: hidden,
                    bias: false,
                });
                subs.push(LayerSpec::BatchNorm2d { ch: hidden });
                subs.push(LayerSpec::ReLU6);
                subs.push(LayerSpec::Conv2d {
                    in_ch: hidden,
                    out_ch: *out_ch,
                    kernel: 1,
                    stride: 1,
                    pad: 0,
                    groups: 1,
                    bias: false,
                });
                subs.push(LayerSpec::BatchNorm2d { ch: *out_ch });
                let layers = subs.iter().map(|s| Layer::from_spec(s, rng)).collect();
                Layer::InvertedResidual(InvertedResidualLayer {
                    in_ch: *in_ch,
                    out_ch: *out_ch,
                    expand: *expand,
                    stride: *stride,
                    layers,
                    use_res: *stride == 1 && in_ch == out_ch,
                })
            }
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                in_ch: c.in_ch,
                out_ch: c.out_ch,
                kernel: c.kernel,
                stride: c.stride,
                pad: c.pad,
                groups: c.groups,
                bias: c.bias.is_some(),
            },
            Layer::Dense(d) => LayerSpec::Dense {
                in_features: d.in_features,
                out_features: d.out_features,
            },
            Layer::BatchNorm2d(b) => LayerSpec::BatchNorm2d { ch: b.ch },
            Layer::ReLU => LayerSpec::ReLU,
            Layer::ReLU6 => LayerSpec::ReLU6,
            Layer::MaxPool(p) => LayerSpec::MaxPool { kernel: p.kernel, stride: p.stride },
            Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
            Layer::AdaptiveAvgPool { out_h, out_w } => {
                LayerSpec::AdaptiveAvgPool { out_h: *out_h, out_w: *out_w }
            }
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Residual(r) => LayerSpec::Residual {
                main: r.main.iter().map(|l| l.spec()).collect(),
                projection: r.shortcut.is_some(),
            },
            Layer::InvertedResidual(ir) => LayerSpec::InvertedResidual {
                in_ch: ir.in_ch,
                out_ch: ir.out_ch,
                expand: ir.expand,
                stride: ir.stride,
            },
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "Conv2d",
            Layer::Dense(_) => "Dense",
            Layer::BatchNorm2d(_) => "BatchNorm2d",
            Layer::ReLU => "ReLU",
            Layer::ReLU6 => "ReLU6",
            Layer::MaxPool(_) => "MaxPool",
            Layer::GlobalAvgPool => "GlobalAvgPool",
            Layer::AdaptiveAvgPool { .. } => "AdaptiveAvgPool",
            Layer::Flatten => "Flatten",
            Layer::Residual(_) => "Residual",
            Layer::InvertedResidual(_) => "InvertedResidual",
        }
    }

    /// Shape inference; errors when the layer cannot accept `input`.
    pub fn out_shape(&self, input: ShapeKind) -> Result<ShapeKind> {
        self.spec().out_shape(input)
    }

    pub fn forward(&mut self, x: Tensor<F>, mode: Mode) -> Result<(Tensor<F>, Cache<F>)> {
        match self {
            Layer::Conv2d(cv) => {
                let (n, c, h, w) = match x.shape() {
                    [n, c, h, w] => (*n, *c, *h, *w),
                    other => {
                        return Err(Error::shape("Conv2d", format!("expected [N,C,H,W], got {other:?}")))
                    }
                };
                if c != cv.in_ch {
                    return Err(Error::shape(
                        "Conv2d",
                        format!("expected {} input channels, got {c}", cv.in_ch),
                    ));
                }
                let g = cv.geom(h, w);
                let mut y = Tensor::zeros(&[n, cv.out_ch, g.out_h(), g.out_w()]);
                conv2d_forward(
                    x.data(),
                    cv.weight.data(),
                    cv.bias.as_ref().map(|b| b.data()),
                    &g,
                    n,
                    y.data_mut(),
                );
                let cache = if mode == Mode::Train { Cache::Input(x) } else { Cache::None };
                Ok((y, cache))
            }
            Layer::Dense(d) => {
                let y = d.forward(&x)?;
                let cache = if mode == Mode::Train { Cache::Input(x) } else { Cache::None };
                Ok((y, cache))
            }
            Layer::BatchNorm2d(b) => match mode {
                Mode::Train => {
                    let (y, c) = b.forward_train(&x)?;
                    Ok((y, Cache::Bn(c)))
                }
                Mode::Eval => Ok((b.forward_eval(x)?, Cache::None)),
            },
            Layer::ReLU => {
                let mut y = x;
                if mode == Mode::Train {
                    let mask = relu_forward(&mut y, None);
                    Ok((y, Cache::Mask(mask)))
                } else {
                    relu_forward_eval(&mut y, None);
                    Ok((y, Cache::None))
                }
            }
            Layer::ReLU6 => {
                let mut y = x;
                if mode == Mode::Train {
                    let mask = relu_forward(&mut y, Some(F::from_f64(6.0)));
                    Ok((y, Cache::Mask(mask)))
                } else {
                    relu_forward_eval(&mut y, Some(F::from_f64(6.0)));
                    Ok((y, Cache::None))
                }
            }
            Layer::MaxPool(p) => {
                let in_shape = x.shape().to_vec();
                let (y, idx) = p.forward(&x)?;
                let cache = if mode == Mode::Train {
                    Cache::MaxPool { idx, in_shape }
                } else {
                    Cache::None
                };
                Ok((y, cache))
            }
            Layer::GlobalAvgPool => {
                let in_shape = x.shape().to_vec();
                let y = global_avg_pool_forward(&x)?;
                Ok((y, if mode == Mode::Train { Cache::Shape(in_shape) } else { Cache::None }))
            }
            Layer::AdaptiveAvgPool { out_h, out_w } => {
                let in_shape = x.shape().to_vec();
                let y = adaptive_avg_pool_forward(&x, *out_h, *out_w)?;
                Ok((y, if mode == Mode::Train { Cache::Shape(in_shape) } else { Cache::None }))
            }
            Layer::Flatten => {
                let shape = x.shape().to_vec();
                let (n, rest) = match x.shape() {
                    [n, c, h, w] => (*n, c * h * w),
                    other => {
                        return Err(Error::shape("Flatten", format!("expected [N,C,H,W], got {other:?}")))
                    }
                };
                let y = x.reshaped(&[n, rest])?;
                Ok((y, if mode == Mode::Train { Cache::Shape(shape) } else { Cache::None }))
            }
            Layer::Residual(r) => {
                let short_in = x.clone();
                let mut h = x;
                let mut main_caches = Vec::with_capacity(r.main.len());
                for l in r.main.iter_mut() {
                    let (y, c) = l.forward(h, mode)?;
                    h = y;
                    main_caches.push(c);
                }
                let mut s = short_in;
                let mut short_caches = Vec::new();
                if let Some(sc) = r.shortcut.as_mut() {
                    for l in sc.iter_mut() {
                        let (y, c) = l.forward(s, mode)?;
                        s = y;
                        short_caches.push(c);
                    }
                }
                if h.shape() != s.shape() {
                    return Err(Error::shape(
                        "Residual",
                        format!("main {:?} vs shortcut {:?}", h.shape(), s.shape()),
                    ));
                }
                for (a, b) in h.data_mut().iter_mut().zip(s.data()) {
                    *a += *b;
                }
                let cache = if mode == Mode::Train {
                    let mask = relu_forward(&mut h, None);
                    Cache::Residual { main: main_caches, shortcut: short_caches, mask }
                } else {
                    relu_forward_eval(&mut h, None);
                    Cache::None
                };
                Ok((h, cache))
            }
            Layer::InvertedResidual(ir) => {
                let res_in = ir.use_res.then(|| x.clone());
                let mut h = x;
                let mut caches = Vec::with_capacity(ir.layers.len());
                for l in ir.layers.iter_mut() {
                    let (y, c) = l.forward(h, mode)?;
                    h = y;
                    caches.push(c);
                }
                if let Some(r) = res_in {
                    for (a, b) in h.data_mut().iter_mut().zip(r.data()) {
                        *a += *b;
                    }
                }
                Ok((h, if mode == Mode::Train { Cache::Seq(caches) } else { Cache::None }))
            }
        }
    }

    /// Backward pass; consumes the cache recorded by a `Mode::Train`
    /// forward and accumulates parameter gradients in place.
    pub fn backward(&mut self, cache: Cache<F>, dy: Tensor<F>) -> Tensor<F> {
        match (self, cache) {
            (Layer::Conv2d(cv), Cache::Input(x)) => {
                let (n, _, h, w) = match x.shape() {
                    [n, c, h, w] => (*n, *c, *h, *w),
                    _ => unreachable!(),
                };
                let g = cv.geom(h, w);
                let mut dx = Tensor::zeros(x.shape());
                conv2d_backward(
                    x.data(),
                    cv.weight.data(),
                    dy.data(),
                    &g,
                    n,
                    dx.data_mut(),
                    cv.grad_weight.data_mut(),
                    cv.grad_bias.as_mut().map(|b| b.data_mut()),
                );
                dx
            }
            (Layer::Dense(d), Cache::Input(x)) => d.backward(&x, &dy),
            (Layer::BatchNorm2d(b), Cache::Bn(c)) => b.backward(&c, &dy),
            (Layer::ReLU, Cache::Mask(m)) | (Layer::ReLU6, Cache::Mask(m)) => {
                let mut dx = dy;
                relu_backward(&m, &mut dx);
                dx
            }
            (Layer::MaxPool(p), Cache::MaxPool { idx, in_shape }) => {
                p.backward(&idx, &in_shape, &dy)
            }
            (Layer::GlobalAvgPool, Cache::Shape(s)) => global_avg_pool_backward(&s, &dy),
            (Layer::AdaptiveAvgPool { .. }, Cache::Shape(s)) => {
                adaptive_avg_pool_backward(&s, &dy)
            }
            (Layer::Flatten, Cache::Shape(s)) => dy.reshaped(&s).expect("flatten cache shape"),
            (Layer::Residual(r), Cache::Residual { main, shortcut, mask }) => {
                let mut d = dy;
                relu_backward(&mask, &mut d);
                let d_short_in = d.clone();
                let mut dm = d;
                for (l, c) in r.main.iter_mut().rev().zip(main.into_iter().rev()) {
                    dm = l.backward(c, dm);
                }
                let mut ds = d_short_in;
                if let Some(sc) = r.shortcut.as_mut() {
                    for (l, c) in sc.iter_mut().rev().zip(shortcut.into_iter().rev()) {
                        ds = l.backward(c, ds);
                    }
                }
                for (a, b) in dm.data_mut().iter_mut().zip(ds.data()) {
                    *a += *b;
                }
                dm
            }
            (Layer::InvertedResidual(ir), Cache::Seq(caches)) => {
                let res_grad = ir.use_res.then(|| dy.clone());
                let mut d = dy;
                for (l, c) in ir.layers.iter_mut().rev().zip(caches.into_iter().rev()) {
                    d = l.backward(c, d);
                }
                if let Some(r) = res_grad {
                    for (a, b) in d.data_mut().iter_mut().zip(r.data()) {
                        *a += *b;
                    }
                }
                d
            }
            (l, _) => panic!("backward cache mismatch for {}", l.kind_name()),
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, F>)) {
        let name = |field: &str| format!("{prefix}.{field}");
        match self {
            Layer::Conv2d(c) => {
                f(ParamView {
                    name: name("weight"),
                    value: &c.weight,
                    grad: Some(&c.grad_weight),
                    kind: ParamKind::Trainable,
                });
                if let Some(b) = &c.bias {
                    f(ParamView {
                        name: name("bias"),
                        value: b,
                        grad: c.grad_bias.as_ref(),
                        kind: ParamKind::Trainable,
                    });
                }
            }
            Layer::Dense(d) => {
                f(ParamView {
                    name: name("weight"),
                    value: &d.weight,
                    grad: Some(&d.grad_weight),
                    kind: ParamKind::Trainable,
                });
                f(ParamView {
                    name: name("bias"),
                    value: &d.bias,
                    grad: Some(&d.grad_bias),
                    kind: ParamKind::Trainable,
                });
            }
            Layer::BatchNorm2d(b) => {
                f(ParamView {
                    name: name("gamma"),
                    value: &b.gamma,
                    grad: Some(&b.grad_gamma),
                    kind: ParamKind::Trainable,
                });
                f(ParamView {
                    name: name("beta"),
                    value: &b.beta,
                    grad: Some(&b.grad_beta),
                    kind: ParamKind::Trainable,
                });
                f(ParamView {
                    name: name("running_mean"),
                    value: &b.running_mean,
                    grad: None,
                    kind: ParamKind::Buffer,
                });
                f(ParamView {
                    name: name("running_var"),
                    value: &b.running_var,
                    grad: None,
                    kind: ParamKind::Buffer,
                });
            }
            Layer::Residual(r) => {
                for (i, l) in r.main.iter().enumerate() {
                    l.visit_params(&format!("{prefix}.main.{i}"), f);
                }
                if let Some(sc) = &r.shortcut {
                    for (i, l) in sc.iter().enumerate() {
                        l.visit_params(&format!("{prefix}.proj.{i}"), f);
                    }
                }
            }
            Layer::InvertedResidual(ir) => {
                for (i, l) in ir.layers.iter().enumerate() {
                    l.visit_params(&format!("{prefix}.{i}"), f);
                }
            }
            _ => {}
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamViewMut<'_, F>)) {
        let name = |field: &str| format!("{prefix}.{field}");
        match self {
            Layer::Conv2d(c) => {
                f(ParamViewMut {
                    name: name("weight"),
                    value: &mut c.weight,
                    grad: Some(&mut c.grad_weight),
                    kind: ParamKind::Trainable,
                });
                if let Some(b) = c.bias.as_mut() {
                    f(ParamViewMut {
                        name: name("bias"),
                        value: b,
                        grad: c.grad_bias.as_mut(),
                        kind: ParamKind::Trainable,
                    });
                }
            }
            Layer::Dense(d) => {
                f(ParamViewMut {
                    name: name("weight"),
                    value: &mut d.weight,
                    grad: Some(&mut d.grad_weight),
                    kind: ParamKind::Trainable,
                });
                f(ParamViewMut {
                    name: name("bias"),
                    value: &mut d.bias,
                    grad: Some(&mut d.grad_bias),
                    kind: ParamKind::Trainable,
                });
            }
            Layer::BatchNorm2d(b) => {
                f(ParamViewMut {
                    name: name("gamma"),
                    value: &mut b.gamma,
                    grad: Some(&mut b.grad_gamma),
                    kind: ParamKind::Trainable,
                });
                f(ParamViewMut {
                    name: name("beta"),
                    value: &mut b.beta,
                    grad: Some(&mut b.grad_beta),
                    kind: ParamKind::Trainable,
                });
                f(ParamViewMut {
                    name: name("running_mean"),
                    value: &mut b.running_mean,
                    grad: None,
                    kind: ParamKind::Buffer,
                });
                f(ParamViewMut {
                    name: name("running_var"),
                    value: &mut b.running_var,
                    grad: None,
                    kind: ParamKind::Buffer,
                });
            }
            Layer::Residual(r) => {
                for (i, l) in r.main.iter_mut().enumerate() {
                    l.visit_params_mut(&format!("{prefix}.main.{i}"), f);
                }
                if let Some(sc) = r.shortcut.as_mut() {
                    for (i, l) in sc.iter_mut().enumerate() {
                        l.visit_params_mut(&format!("{prefix}.proj.{i}"), f);
                    }
                }
            }
            Layer::InvertedResidual(ir) => {
                for (i, l) in ir.layers.iter_mut().enumerate() {
                    l.visit_params_mut(&format!("{prefix}.{i}"), f);
                }
            }
            _ => {}
        }
    }
}

impl LayerSpec {
    /// Shape inference; errors when the layer cannot accept `input`.
    pub fn out_shape(&self, input: ShapeKind) -> Result<ShapeKind> {
        let need_spatial = |ctx: &str| {
            input.spatial().ok_or_else(|| {
                Error::shape(ctx, format!("expected spatial input, got {input:?}"))
            })
        };
        match self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, pad, .. } => {
                let (c, h, w) = need_spatial("Conv2d")?;
                if c != *in_ch {
                    return Err(Error::shape(
                        "Conv2d",
                        format!("expected {in_ch} input channels, got {c}"),
                    ));
                }
                if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                    return Err(Error::shape("Conv2d", format!("kernel too large for {h}x{w}")));
                }
                Ok(ShapeKind::Spatial {
                    c: *out_ch,
                    h: (h + 2 * pad - kernel) / stride + 1,
                    w: (w + 2 * pad - kernel) / stride + 1,
                })
            }
            LayerSpec::Dense { in_features, out_features } => match input {
                ShapeKind::Flat { d } if d == *in_features => {
                    Ok(ShapeKind::Flat { d: *out_features })
                }
                other => Err(Error::shape(
                    "Dense",
                    format!("expected flat {in_features} features, got {other:?}"),
                )),
            },
            LayerSpec::BatchNorm2d { ch } => {
                let (c, h, w) = need_spatial("BatchNorm2d")?;
                if c != *ch {
                    return Err(Error::shape(
                        "BatchNorm2d",
                        format!("expected {ch} channels, got {c}"),
                    ));
                }
                Ok(ShapeKind::Spatial { c, h, w })
            }
            LayerSpec::ReLU | LayerSpec::ReLU6 => Ok(input),
            LayerSpec::MaxPool { kernel, stride } => {
                let (c, h, w) = need_spatial("MaxPool")?;
                if h < *kernel || w < *kernel {
                    return Err(Error::shape(
                        "MaxPool",
                        format!("kernel {kernel} too large for {h}x{w}"),
                    ));
                }
                Ok(ShapeKind::Spatial {
                    c,
                    h: (h - kernel) / stride + 1,
                    w: (w - kernel) / stride + 1,
                })
            }
            LayerSpec::GlobalAvgPool => {
                let (c, _, _) = need_spatial("GlobalAvgPool")?;
                Ok(ShapeKind::Flat { d: c })
            }
            LayerSpec::AdaptiveAvgPool { out_h, out_w } => {
                let (c, _, _) = need_spatial("AdaptiveAvgPool")?;
                Ok(ShapeKind::Spatial { c, h: *out_h, w: *out_w })
            }
            LayerSpec::Flatten => {
                let (c, h, w) = need_spatial("Flatten")?;
                Ok(ShapeKind::Flat { d: c * h * w })
            }
            LayerSpec::Residual { main, projection } => {
                let mut s = input;
                for l in main {
                    s = l.out_shape(s)?;
                }
                let short = if *projection {
                    let (in_ch, out_ch, stride) = residual_conv_dims(main);
                    LayerSpec::Conv2d {
                        in_ch,
                        out_ch,
                        kernel: 1,
                        stride,
                        pad: 0,
                        groups: 1,
                        bias: false,
                    }
                    .out_shape(input)?
                } else {
                    input
                };
                if s != short {
                    return Err(Error::shape(
                        "Residual",
                        format!("main {s:?} vs shortcut {short:?}"),
                    ));
                }
                Ok(s)
            }
            LayerSpec::InvertedResidual { in_ch, out_ch, stride, .. } => {
                let (c, h, w) = need_spatial("InvertedResidual")?;
                if c != *in_ch {
                    return Err(Error::shape(
                        "InvertedResidual",
                        format!("expected {in_ch} input channels, got {c}"),
                    ));
                }
                // 3x3 depthwise, pad 1
                Ok(ShapeKind::Spatial {
                    c: *out_ch,
                    h: (h - 1) / stride + 1,
                    w: (w - 1) / stride + 1,
                })
            }
        }
    }
}

/// First conv of a residual main path fixes the projection dims.
fn residual_conv_dims(main: &[LayerSpec]) -> (usize, usize, usize) {
    let first = main
        .iter()
        .find_map(|s| match s {
            LayerSpec::Conv2d { in_ch, stride, .. } => Some((*in_ch, *stride)),
            _ => None,
        })
        .expect("residual main path must contain a conv");
    let last = main
        .iter()
        .rev()
        .find_map(|s| match s {
            LayerSpec::Conv2d { out_ch, .. } => Some(*out_ch),
            _ => None,
        })
        .expect("residual main path must contain a conv");
    (first.0, last, first.1)
}

/// Named segment boundaries of a reassembled model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segments {
    pub ex_len: usize,
    pub adapter_len: usize,
}

/// Serializable whole-model structure.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub segments: Option<Segments>,
}

/// An executable layer sequence mapping `[N,C,H,W]` images to logits.
#[derive(Clone, Debug)]
pub struct ModelGraph<F: Element = f32> {
    pub layers: Vec<Layer<F>>,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub segments: Option<Segments>,
}

impl<F: Element> ModelGraph<F> {
    pub fn from_spec(spec: &GraphSpec, rng: &mut ChaCha8Rng) -> Result<ModelGraph<F>> {
        let layers = spec.layers.iter().map(|s| Layer::from_spec(s, rng)).collect();
        let g = ModelGraph {
            layers,
            input_shape: spec.input_shape,
            num_classes: spec.num_classes,
            segments: spec.segments,
        };
        g.boundary_shapes()?; // validates adjacency
        Ok(g)
    }

    pub fn spec(&self) -> GraphSpec {
        GraphSpec {
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            layers: self.layers.iter().map(|l| l.spec()).collect(),
            segments: self.segments,
        }
    }

    /// Activation shapes at every layer boundary; index 0 is the input,
    /// index `i` the shape after `layers[..i]`.
    pub fn boundary_shapes(&self) -> Result<Vec<ShapeKind>> {
        let (c, h, w) = self.input_shape;
        let mut shapes = vec![ShapeKind::Spatial { c, h, w }];
        for (i, l) in self.layers.iter().enumerate() {
            let next = l.out_shape(shapes[i]).map_err(|e| match e {
                Error::Shape { context, detail } => Error::Shape {
                    context: format!("layer {i} ({context})"),
                    detail,
                },
                other => other,
            })?;
            shapes.push(next);
        }
        match shapes.last() {
            Some(ShapeKind::Flat { d }) if *d == self.num_classes => Ok(shapes),
            other => Err(Error::shape(
                "ModelGraph",
                format!("final shape {other:?} does not match {} classes", self.num_classes),
            )),
        }
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<usize> {
        let (c, h, w) = self.input_shape;
        match x.shape() {
            [n, xc, xh, xw] if (*xc, *xh, *xw) == (c, h, w) => Ok(*n),
            other => Err(Error::shape(
                "ModelGraph",
                format!("expected [N,{c},{h},{w}] input, got {other:?}"),
            )),
        }
    }

    /// Forward pass; `Mode::Train` records caches for [`Self::backward`].
    pub fn forward(&mut self, x: Tensor<F>, mode: Mode) -> Result<(Tensor<F>, Vec<Cache<F>>)> {
        self.check_input(&x)?;
        let mut h = x;
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter_mut().enumerate() {
            let (y, c) = l.forward(h, mode).map_err(|e| match e {
                Error::Shape { context, detail } => Error::Shape {
                    context: format!("layer {i} ({context})"),
                    detail,
                },
                other => other,
            })?;
            h = y;
            caches.push(c);
        }
        Ok((h, caches))
    }

    /// Inference on a borrowed batch.
    pub fn forward_eval(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.forward(x.clone(), Mode::Eval)?.0)
    }

    /// Eval-mode forward capturing activations after `layers[..f]` for every
    /// boundary `f` in `boundaries` (used by the partition probe).
    pub fn forward_captured(
        &mut self,
        x: &Tensor<F>,
        boundaries: &[usize],
    ) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut captured = Vec::with_capacity(boundaries.len());
        for (i, l) in self.layers.iter_mut().enumerate() {
            let (y, _) = l.forward(h, Mode::Eval)?;
            h = y;
            if boundaries.contains(&(i + 1)) {
                captured.push(h.clone());
            }
        }
        // boundaries are sorted; captures arrive in the same order
        Ok((h, captured))
    }

    /// Like [`Self::forward_captured`] but hands each boundary activation to
    /// a callback instead of cloning it, so probe memory stays bounded.
    /// Returns the logits.
    pub fn forward_scan(
        &mut self,
        x: &Tensor<F>,
        boundaries: &[usize],
        visit: &mut dyn FnMut(usize, &Tensor<F>),
    ) -> Result<Tensor<F>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let (y, _) = l.forward(h, Mode::Eval)?;
            h = y;
            if boundaries.contains(&(i + 1)) {
                visit(i + 1, &h);
            }
        }
        Ok(h)
    }

    /// Backprop from `dlogits`; accumulates gradients into the layers and
    /// returns the input gradient.
    pub fn backward(&mut self, caches: Vec<Cache<F>>, dlogits: Tensor<F>) -> Tensor<F> {
        let mut d = dlogits;
        for (l, c) in self.layers.iter_mut().rev().zip(caches.into_iter().rev()) {
            d = l.backward(c, d);
        }
        d
    }

    /// Prefix for `layers[i]` parameter names: plain index, or segment-
    /// relative (`ex.*`, `adapter.*`, `ad.*`) for reassembled models.
    pub fn layer_prefix(&self, i: usize) -> String {
        match self.segments {
            None => format!("{i}"),
            Some(s) => {
                if i < s.ex_len {
                    format!("ex.{i}")
                } else if i < s.ex_len + s.adapter_len {
                    format!("adapter.{}", i - s.ex_len)
                } else {
                    format!("ad.{}", i - s.ex_len - s.adapter_len)
                }
            }
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_, F>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&self.layer_prefix(i), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, F>)) {
        let prefixes: Vec<String> = (0..self.layers.len()).map(|i| self.layer_prefix(i)).collect();
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&prefixes[i], f);
        }
    }

    /// Total element count of trainable tensors.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.kind == ParamKind::Trainable {
                n += p.value.numel();
            }
        });
        n
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| {
            if let Some(g) = p.grad {
                g.fill(F::zero());
            }
        });
    }
}
