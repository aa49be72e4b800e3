//! Layer-level numerics: forward passes, caches and exact backward passes
//! for every layer type. Convolution is evaluated as im2col followed by a
//! matrix product so the matrix kernel does the heavy lifting.
//!
//! Internal activation layout is NCHW; the public batch interface is NHWC.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Scalar;

/// One layer of a network stack.
///
/// `Dense.in_features`, when declared, must match the inferred input width;
/// mis-specified configs fail at construction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    Dense {
        out_features: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        in_features: Option<usize>,
    },
    Dropout {
        p: f64,
    },
}

impl LayerSpec {
    pub fn dense(out_features: usize) -> Self {
        LayerSpec::Dense {
            out_features,
            in_features: None,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
        }
    }
}

/// Activation shape between layers (batch dimension excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Map {
        channels: usize,
        height: usize,
        width: usize,
    },
    Vector {
        len: usize,
    },
}

impl Shape {
    pub fn describe(&self) -> String {
        match self {
            Shape::Map {
                channels,
                height,
                width,
            } => format!("{channels}x{height}x{width} map"),
            Shape::Vector { len } => format!("vector of {len}"),
        }
    }
}

/// Infers the shape after `spec` given `input`, or explains why it cannot
/// apply.
pub fn infer_shape(input: Shape, spec: &LayerSpec, layer_idx: usize) -> Result<Shape> {
    let fail = |message: String| {
        Err(Error::Config(format!(
            "layer {layer_idx} ({}): {message}",
            spec.kind()
        )))
    };
    match (spec, input) {
        (
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            },
            Shape::Map { height, width, .. },
        ) => {
            if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                return fail("kernel, stride and out_channels must be positive".into());
            }
            let h_eff = height + 2 * padding;
            let w_eff = width + 2 * padding;
            if h_eff < *kernel || w_eff < *kernel {
                return fail(format!(
                    "kernel {kernel} exceeds padded input {h_eff}x{w_eff}"
                ));
            }
            Ok(Shape::Map {
                channels: *out_channels,
                height: (h_eff - kernel) / stride + 1,
                width: (w_eff - kernel) / stride + 1,
            })
        }
        (LayerSpec::MaxPool { kernel, stride }, Shape::Map { channels, height, width }) => {
            if *kernel == 0 || *stride == 0 {
                return fail("kernel and stride must be positive".into());
            }
            if height < *kernel || width < *kernel {
                return fail(format!("kernel {kernel} exceeds input {height}x{width}"));
            }
            Ok(Shape::Map {
                channels,
                height: (height - kernel) / stride + 1,
                width: (width - kernel) / stride + 1,
            })
        }
        (LayerSpec::Relu, shape) => Ok(shape),
        (LayerSpec::Dropout { p }, shape) => {
            if !(0.0..1.0).contains(p) {
                return fail(format!("dropout probability {p} outside [0, 1)"));
            }
            Ok(shape)
        }
        (LayerSpec::Flatten, Shape::Map { channels, height, width }) => Ok(Shape::Vector {
            len: channels * height * width,
        }),
        (LayerSpec::Flatten, Shape::Vector { len }) => Ok(Shape::Vector { len }),
        (
            LayerSpec::Dense {
                out_features,
                in_features,
            },
            Shape::Vector { len },
        ) => {
            if let Some(declared) = in_features {
                if *declared != len {
                    return fail(format!(
                        "expects {declared} inputs but the previous layer produces {len}"
                    ));
                }
            }
            if *out_features == 0 {
                return fail("out_features must be positive".into());
            }
            Ok(Shape::Vector { len: *out_features })
        }
        (LayerSpec::Conv { .. } | LayerSpec::MaxPool { .. }, Shape::Vector { .. }) => {
            fail("requires a feature map input, got a vector".into())
        }
        (LayerSpec::Dense { .. }, Shape::Map { .. }) => {
            fail("requires a vector input; add a flatten layer first".into())
        }
    }
}

/// Activation tensor flowing through a stack.
#[derive(Debug, Clone)]
pub enum Value<T> {
    /// NCHW feature maps.
    Map(Array4<T>),
    /// Batch of vectors.
    Vector(Array2<T>),
}

impl<T: Scalar> Value<T> {
    pub fn batch_len(&self) -> usize {
        match self {
            Value::Map(m) => m.dim().0,
            Value::Vector(v) => v.dim().0,
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            Value::Map(m) => {
                let (_, c, h, w) = m.dim();
                Shape::Map {
                    channels: c,
                    height: h,
                    width: w,
                }
            }
            Value::Vector(v) => Shape::Vector { len: v.dim().1 },
        }
    }

    pub fn into_vector(self) -> Array2<T> {
        match self {
            Value::Vector(v) => v,
            Value::Map(_) => panic!("expected vector activation"),
        }
    }

    pub fn into_map(self) -> Array4<T> {
        match self {
            Value::Map(m) => m,
            Value::Vector(_) => panic!("expected map activation"),
        }
    }
}

/// A layer with its parameters.
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv {
        /// [out_channels, in_channels, kernel, kernel]
        weight: Array4<T>,
        bias: Array1<T>,
        stride: usize,
        padding: usize,
    },
    Dense {
        /// [out_features, in_features]
        weight: Array2<T>,
        bias: Array1<T>,
    },
    Relu,
    Flatten,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Dropout {
        p: f64,
    },
}

/// Per-layer forward cache consumed by the backward pass.
pub enum Cache<T> {
    Conv {
        /// im2col matrix of the layer input, [C*k*k, B*OH*OW].
        cols: Array2<T>,
        input_dim: (usize, usize, usize, usize),
    },
    Dense {
        input: Array2<T>,
    },
    ReluMap {
        mask: Array4<bool>,
    },
    ReluVector {
        mask: Array2<bool>,
    },
    Flatten {
        input_dim: (usize, usize, usize, usize),
    },
    MaxPool {
        input_dim: (usize, usize, usize, usize),
        /// Flat (iy * W + ix) source index per output element.
        argmax: Array4<u32>,
    },
    DropoutMap {
        mask: Array4<T>,
    },
    DropoutVector {
        mask: Array2<T>,
    },
    None,
}

/// Forward options: training mode enables dropout (which then requires an
/// RNG), and `want_cache` controls whether backward information is kept.
pub struct ForwardOpts<'r> {
    pub train: bool,
    pub want_cache: bool,
    pub dropout_rng: Option<&'r mut ChaCha12Rng>,
}

impl ForwardOpts<'_> {
    pub fn eval() -> Self {
        ForwardOpts {
            train: false,
            want_cache: false,
            dropout_rng: None,
        }
    }
}

impl<T: Scalar> Layer<T> {
    /// Builds a layer from its spec with fan-in-scaled uniform initialization.
    /// Parameters are drawn in f64 and narrowed, so a given seed produces the
    /// same pattern at every precision.
    pub fn from_spec(spec: &LayerSpec, input: Shape, rng: &mut ChaCha12Rng) -> Self {
        match (spec, input) {
            (
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                Shape::Map { channels, .. },
            ) => {
                let fan_in = channels * kernel * kernel;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Array4::from_shape_simple_fn(
                    (*out_channels, channels, *kernel, *kernel),
                    || T::from_f64(rng.random_range(-bound..bound)),
                );
                let bias =
                    Array1::from_shape_simple_fn(*out_channels, || {
                        T::from_f64(rng.random_range(-bound..bound))
                    });
                Layer::Conv {
                    weight,
                    bias,
                    stride: *stride,
                    padding: *padding,
                }
            }
            (LayerSpec::Dense { out_features, .. }, Shape::Vector { len }) => {
                let bound = 1.0 / (len as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((*out_features, len), || {
                    T::from_f64(rng.random_range(-bound..bound))
                });
                let bias = Array1::from_shape_simple_fn(*out_features, || {
                    T::from_f64(rng.random_range(-bound..bound))
                });
                Layer::Dense { weight, bias }
            }
            (LayerSpec::Relu, _) => Layer::Relu,
            (LayerSpec::Flatten, _) => Layer::Flatten,
            (LayerSpec::MaxPool { kernel, stride }, _) => Layer::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
            (LayerSpec::Dropout { p }, _) => Layer::Dropout { p: *p },
            (spec, shape) => unreachable!(
                "layer {:?} on {:?} must be rejected during shape inference",
                spec.kind(),
                shape
            ),
        }
    }

    pub fn forward(&self, input: Value<T>, opts: &mut ForwardOpts<'_>) -> (Value<T>, Cache<T>) {
        match self {
            Layer::Conv {
                weight,
                bias,
                stride,
                padding,
            } => {
                let input = input.into_map();
                let (out, cols) = conv_forward(&input, weight, bias, *stride, *padding);
                let cache = if opts.want_cache {
                    Cache::Conv {
                        cols,
                        input_dim: input.dim(),
                    }
                } else {
                    Cache::None
                };
                (Value::Map(out), cache)
            }
            Layer::Dense { weight, bias } => {
                let input = input.into_vector();
                let out = input.dot(&weight.t()) + bias;
                let cache = if opts.want_cache {
                    Cache::Dense { input }
                } else {
                    Cache::None
                };
                (Value::Vector(out), cache)
            }
            Layer::Relu => match input {
                Value::Map(m) => {
                    let cache = if opts.want_cache {
                        Cache::ReluMap {
                            mask: m.mapv(|v| v > T::zero()),
                        }
                    } else {
                        Cache::None
                    };
                    let out = m.mapv_into(|v| if v > T::zero() { v } else { T::zero() });
                    (Value::Map(out), cache)
                }
                Value::Vector(v) => {
                    let cache = if opts.want_cache {
                        Cache::ReluVector {
                            mask: v.mapv(|v| v > T::zero()),
                        }
                    } else {
                        Cache::None
                    };
                    let out = v.mapv_into(|v| if v > T::zero() { v } else { T::zero() });
                    (Value::Vector(out), cache)
                }
            },
            Layer::Flatten => {
                let input = input.into_map();
                let dim = input.dim();
                let (b, c, h, w) = dim;
                let flat = input
                    .into_shape_with_order((b, c * h * w))
                    .expect("standard layout");
                let cache = if opts.want_cache {
                    Cache::Flatten { input_dim: dim }
                } else {
                    Cache::None
                };
                (Value::Vector(flat), cache)
            }
            Layer::MaxPool { kernel, stride } => {
                let input = input.into_map();
                let (out, argmax) = maxpool_forward(&input, *kernel, *stride);
                let cache = if opts.want_cache {
                    Cache::MaxPool {
                        input_dim: input.dim(),
                        argmax,
                    }
                } else {
                    Cache::None
                };
                (Value::Map(out), cache)
            }
            Layer::Dropout { p } => {
                if !opts.train || *p == 0.0 {
                    return (input, Cache::None);
                }
                let rng = opts
                    .dropout_rng
                    .as_deref_mut()
                    .expect("dropout in training mode requires an RNG");
                let keep = 1.0 - *p;
                let scale = 1.0 / keep;
                match input {
                    Value::Map(m) => {
                        let mask = Array4::from_shape_simple_fn(m.dim(), || {
                            if rng.random_range(0.0..1.0) < keep {
                                T::from_f64(scale)
                            } else {
                                T::zero()
                            }
                        });
                        let out = &m * &mask;
                        let cache = if opts.want_cache {
                            Cache::DropoutMap { mask }
                        } else {
                            Cache::None
                        };
                        (Value::Map(out), cache)
                    }
                    Value::Vector(v) => {
                        let mask = Array2::from_shape_simple_fn(v.dim(), || {
                            if rng.random_range(0.0..1.0) < keep {
                                T::from_f64(scale)
                            } else {
                                T::zero()
                            }
                        });
                        let out = &v * &mask;
                        let cache = if opts.want_cache {
                            Cache::DropoutVector { mask }
                        } else {
                            Cache::None
                        };
                        (Value::Vector(out), cache)
                    }
                }
            }
        }
    }

    /// Backward pass: returns the input gradient and appends this layer's
    /// parameter gradients (weight, then bias) to `param_grads`.
    pub fn backward(
        &self,
        grad_out: Value<T>,
        cache: &Cache<T>,
        param_grads: &mut Vec<ArrayD<T>>,
    ) -> Value<T> {
        match (self, cache) {
            (
                Layer::Conv {
                    weight,
                    stride,
                    padding,
                    ..
                },
                Cache::Conv { cols, input_dim },
            ) => {
                let grad_out = grad_out.into_map();
                let (grad_in, grad_w, grad_b) =
                    conv_backward(&grad_out, cols, weight, *input_dim, *stride, *padding);
                param_grads.push(grad_w.into_dyn());
                param_grads.push(grad_b.into_dyn());
                Value::Map(grad_in)
            }
            (Layer::Dense { weight, .. }, Cache::Dense { input }) => {
                let grad_out = grad_out.into_vector();
                let grad_w = grad_out.t().dot(input);
                let grad_b = grad_out.sum_axis(Axis(0));
                let grad_in = grad_out.dot(weight);
                param_grads.push(grad_w.into_dyn());
                param_grads.push(grad_b.into_dyn());
                Value::Vector(grad_in)
            }
            (Layer::Relu, Cache::ReluMap { mask }) => {
                let mut grad = grad_out.into_map();
                grad.zip_mut_with(mask, |g, &m| {
                    if !m {
                        *g = T::zero()
                    }
                });
                Value::Map(grad)
            }
            (Layer::Relu, Cache::ReluVector { mask }) => {
                let mut grad = grad_out.into_vector();
                grad.zip_mut_with(mask, |g, &m| {
                    if !m {
                        *g = T::zero()
                    }
                });
                Value::Vector(grad)
            }
            (Layer::Flatten, Cache::Flatten { input_dim }) => {
                let grad = grad_out.into_vector();
                Value::Map(
                    grad.into_shape_with_order(*input_dim)
                        .expect("standard layout"),
                )
            }
            (Layer::MaxPool { .. }, Cache::MaxPool { input_dim, argmax }) => {
                let grad_out = grad_out.into_map();
                Value::Map(maxpool_backward(&grad_out, argmax, *input_dim))
            }
            (Layer::Dropout { .. }, Cache::DropoutMap { mask }) => {
                Value::Map(grad_out.into_map() * mask)
            }
            (Layer::Dropout { .. }, Cache::DropoutVector { mask }) => {
                Value::Vector(grad_out.into_vector() * mask)
            }
            (Layer::Dropout { .. }, Cache::None) => grad_out,
            _ => panic!("mismatched layer/cache pair in backward"),
        }
    }

    /// Parameter views in a stable (weight, bias) order.
    pub fn params(&self) -> Vec<ndarray::ArrayViewD<'_, T>> {
        match self {
            Layer::Conv { weight, bias, .. } => {
                vec![weight.view().into_dyn(), bias.view().into_dyn()]
            }
            Layer::Dense { weight, bias } => {
                vec![weight.view().into_dyn(), bias.view().into_dyn()]
            }
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, T>> {
        match self {
            Layer::Conv { weight, bias, .. } => {
                vec![weight.view_mut().into_dyn(), bias.view_mut().into_dyn()]
            }
            Layer::Dense { weight, bias } => {
                vec![weight.view_mut().into_dyn(), bias.view_mut().into_dyn()]
            }
            _ => Vec::new(),
        }
    }

    pub fn set_params(&mut self, tensors: &mut impl Iterator<Item = ArrayD<T>>) -> Result<()> {
        let assign = |target: &mut dyn FnMut(ArrayD<T>) -> Result<()>,
                      tensors: &mut dyn Iterator<Item = ArrayD<T>>|
         -> Result<()> {
            let tensor = tensors
                .next()
                .ok_or_else(|| Error::Config("checkpoint has too few tensors".into()))?;
            target(tensor)
        };
        match self {
            Layer::Conv { weight, bias, .. } => {
                assign(
                    &mut |t| {
                        *weight = t
                            .into_dimensionality()
                            .map_err(|e| Error::Config(format!("conv weight: {e}")))?;
                        Ok(())
                    },
                    tensors,
                )?;
                assign(
                    &mut |t| {
                        *bias = t
                            .into_dimensionality()
                            .map_err(|e| Error::Config(format!("conv bias: {e}")))?;
                        Ok(())
                    },
                    tensors,
                )
            }
            Layer::Dense { weight, bias } => {
                assign(
                    &mut |t| {
                        *weight = t
                            .into_dimensionality()
                            .map_err(|e| Error::Config(format!("dense weight: {e}")))?;
                        Ok(())
                    },
                    tensors,
                )?;
                assign(
                    &mut |t| {
                        *bias = t
                            .into_dimensionality()
                            .map_err(|e| Error::Config(format!("dense bias: {e}")))?;
                        Ok(())
                    },
                    tensors,
                )
            }
            _ => Ok(()),
        }
    }
}

fn conv_forward<T: Scalar>(
    input: &Array4<T>,
    weight: &Array4<T>,
    bias: &Array1<T>,
    stride: usize,
    padding: usize,
) -> (Array4<T>, Array2<T>) {
    let (batch, in_c, height, width) = input.dim();
    let (out_c, w_in_c, kernel, _) = weight.dim();
    debug_assert_eq!(in_c, w_in_c);
    let out_h = (height + 2 * padding - kernel) / stride + 1;
    let out_w = (width + 2 * padding - kernel) / stride + 1;

    let cols = im2col(input, kernel, stride, padding, out_h, out_w);
    let weight2 = weight
        .view()
        .into_shape_with_order((out_c, in_c * kernel * kernel))
        .expect("standard layout");
    // [OC, Ckk] x [Ckk, B*OH*OW]
    let mut out2 = weight2.dot(&cols);
    for (mut row, &b) in out2.outer_iter_mut().zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    // [OC, B, OH, OW] -> [B, OC, OH, OW]
    let out = out2
        .into_shape_with_order((out_c, batch, out_h, out_w))
        .expect("standard layout")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned();
    (out, cols)
}

fn conv_backward<T: Scalar>(
    grad_out: &Array4<T>,
    cols: &Array2<T>,
    weight: &Array4<T>,
    input_dim: (usize, usize, usize, usize),
    stride: usize,
    padding: usize,
) -> (Array4<T>, Array4<T>, Array1<T>) {
    let (batch, out_c, out_h, out_w) = grad_out.dim();
    let (_, in_c, kernel, _) = weight.dim();

    // [B, OC, OH, OW] -> [OC, B*OH*OW]
    let grad2 = grad_out
        .view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_shape_with_order((out_c, batch * out_h * out_w))
        .expect("standard layout")
        .to_owned();

    let grad_w2 = grad2.dot(&cols.t());
    let grad_w = grad_w2
        .into_shape_with_order((out_c, in_c, kernel, kernel))
        .expect("standard layout");
    let grad_b = grad2.sum_axis(Axis(1));

    let weight2 = weight
        .view()
        .into_shape_with_order((out_c, in_c * kernel * kernel))
        .expect("standard layout");
    let grad_cols = weight2.t().dot(&grad2);
    let grad_in = col2im(&grad_cols, input_dim, kernel, stride, padding, out_h, out_w);
    (grad_in, grad_w, grad_b)
}

fn im2col<T: Scalar>(
    input: &Array4<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<T> {
    let (batch, in_c, height, width) = input.dim();
    let rows = in_c * kernel * kernel;
    let n = batch * out_h * out_w;
    let mut cols = Array2::<T>::zeros((rows, n));
    let input_slice = input.as_slice().expect("standard layout");
    let cols_slice = cols.as_slice_mut().expect("standard layout");

    for b in 0..batch {
        for c in 0..in_c {
            let plane = &input_slice[(b * in_c + c) * height * width..][..height * width];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let row = (c * kernel + ky) * kernel + kx;
                    for oy in 0..out_h {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let col_base = row * n + (b * out_h + oy) * out_w;
                        let in_base = iy * width;
                        for ox in 0..out_w {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            cols_slice[col_base + ox] = plane[in_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    grad_cols: &Array2<T>,
    input_dim: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Array4<T> {
    let (batch, in_c, height, width) = input_dim;
    let n = batch * out_h * out_w;
    let mut grad_in = Array4::<T>::zeros(input_dim);
    let grad_slice = grad_in.as_slice_mut().expect("standard layout");
    let cols_slice = grad_cols.as_slice().expect("standard layout");

    for b in 0..batch {
        for c in 0..in_c {
            let plane_base = (b * in_c + c) * height * width;
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let row = (c * kernel + ky) * kernel + kx;
                    for oy in 0..out_h {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let col_base = row * n + (b * out_h + oy) * out_w;
                        let in_base = plane_base + iy * width;
                        for ox in 0..out_w {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            grad_slice[in_base + ix as usize] =
                                grad_slice[in_base + ix as usize] + cols_slice[col_base + ox];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

fn maxpool_forward<T: Scalar>(
    input: &Array4<T>,
    kernel: usize,
    stride: usize,
) -> (Array4<T>, Array4<u32>) {
    let (batch, channels, height, width) = input.dim();
    let out_h = (height - kernel) / stride + 1;
    let out_w = (width - kernel) / stride + 1;
    let mut out = Array4::<T>::zeros((batch, channels, out_h, out_w));
    let mut argmax = Array4::<u32>::zeros((batch, channels, out_h, out_w));
    for b in 0..batch {
        for c in 0..channels {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0u32;
                    // Ties resolve to the first maximum in row-major scan order.
                    for ky in 0..kernel {
                        let iy = oy * stride + ky;
                        for kx in 0..kernel {
                            let ix = ox * stride + kx;
                            let v = input[[b, c, iy, ix]];
                            if v > best {
                                best = v;
                                best_idx = (iy * width + ix) as u32;
                            }
                        }
                    }
                    out[[b, c, oy, ox]] = best;
                    argmax[[b, c, oy, ox]] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

fn maxpool_backward<T: Scalar>(
    grad_out: &Array4<T>,
    argmax: &Array4<u32>,
    input_dim: (usize, usize, usize, usize),
) -> Array4<T> {
    let (batch, channels, _, width) = input_dim;
    let _ = width;
    let (_, _, out_h, out_w) = grad_out.dim();
    let mut grad_in = Array4::<T>::zeros(input_dim);
    for b in 0..batch {
        for c in 0..channels {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let flat = argmax[[b, c, oy, ox]] as usize;
                    let (iy, ix) = (flat / input_dim.3, flat % input_dim.3);
                    grad_in[[b, c, iy, ix]] =
                        grad_in[[b, c, iy, ix]] + grad_out[[b, c, oy, ox]];
                }
            }
        }
    }
    grad_in
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// A sequence of layers built from specs with shape checking.
#[derive(Debug, Clone)]
pub struct Stack<T> {
    pub layers: Vec<Layer<T>>,
    pub specs: Vec<LayerSpec>,
    pub input_shape: Shape,
    pub output_shape: Shape,
}

impl<T: Scalar> Stack<T> {
    pub fn from_specs(input: Shape, specs: &[LayerSpec], rng: &mut ChaCha12Rng) -> Result<Self> {
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        for (idx, spec) in specs.iter().enumerate() {
            let next = infer_shape(shape, spec, idx)?;
            layers.push(Layer::from_spec(spec, shape, rng));
            shape = next;
        }
        Ok(Stack {
            layers,
            specs: specs.to_vec(),
            input_shape: input,
            output_shape: shape,
        })
    }

    pub fn forward(&self, input: Value<T>, opts: &mut ForwardOpts<'_>) -> (Value<T>, Vec<Cache<T>>) {
        let mut caches = Vec::with_capacity(if opts.want_cache { self.layers.len() } else { 0 });
        let mut value = input;
        for layer in &self.layers {
            let (next, cache) = layer.forward(value, opts);
            if opts.want_cache {
                caches.push(cache);
            }
            value = next;
        }
        (value, caches)
    }

    pub fn forward_eval(&self, input: Value<T>) -> Value<T> {
        self.forward(input, &mut ForwardOpts::eval()).0
    }

    /// Backpropagates `grad_out`, returning the input gradient and parameter
    /// gradients aligned with [`Stack::params`] order.
    pub fn backward(&self, caches: &[Cache<T>], grad_out: Value<T>) -> (Value<T>, Vec<ArrayD<T>>) {
        assert_eq!(caches.len(), self.layers.len(), "forward ran without caches");
        let mut grads_rev: Vec<Vec<ArrayD<T>>> = Vec::with_capacity(self.layers.len());
        let mut grad = grad_out;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let mut layer_grads = Vec::new();
            grad = layer.backward(grad, cache, &mut layer_grads);
            grads_rev.push(layer_grads);
        }
        let mut param_grads = Vec::new();
        for layer_grads in grads_rev.into_iter().rev() {
            param_grads.extend(layer_grads);
        }
        (grad, param_grads)
    }

    pub fn params(&self) -> Vec<ndarray::ArrayViewD<'_, T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Parameter names in [`Stack::params`] order: `layer{i}.weight` / `.bias`.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { .. } | Layer::Dense { .. } => {
                    names.push(format!("layer{idx}.weight"));
                    names.push(format!("layer{idx}.bias"));
                }
                _ => {}
            }
        }
        names
    }

    pub fn set_params(&mut self, tensors: Vec<ArrayD<T>>) -> Result<()> {
        let mut iter = tensors.into_iter();
        for layer in &mut self.layers {
            layer.set_params(&mut iter)?;
        }
        if iter.next().is_some() {
            return Err(Error::Config("checkpoint has too many tensors".into()));
        }
        Ok(())
    }

    /// Copies all parameters as owned tensors, in params order.
    pub fn export_params(&self) -> Vec<ArrayD<T>> {
        self.params().into_iter().map(|v| v.to_owned()).collect()
    }
}

/// Flat little-endian bytes of a tensor, for digests and checkpoints.
pub fn tensor_bytes<T: Scalar>(view: &ndarray::ArrayViewD<'_, T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(view.len() * T::BYTE_WIDTH);
    for v in view.iter() {
        v.write_le(&mut out);
    }
    out
}

/// CRC32 of a tensor's little-endian bytes.
pub fn tensor_digest<T: Scalar>(view: &ndarray::ArrayViewD<'_, T>) -> u32 {
    crc32fast::hash(&tensor_bytes(view))
}

/// Combined digest over a parameter list; order-sensitive.
pub fn params_digest<T: Scalar>(views: &[ndarray::ArrayViewD<'_, T>]) -> u64 {
    let mut hasher = crc32fast::Hasher::new();
    for view in views {
        hasher.update(&tensor_bytes(view));
    }
    // Widen with the tensor count to distinguish empty-vs-missing.
    (u64::from(hasher.finalize()) << 16) | views.len() as u64
}

/// Builds an `ArrayD` from shape + flat data.
pub fn tensor_from_flat<T: Scalar>(shape: &[usize], data: Vec<T>) -> Result<ArrayD<T>> {
    ArrayD::from_shape_vec(IxDyn(shape), data)
        .map_err(|e| Error::Config(format!("tensor shape mismatch: {e}")))
}
