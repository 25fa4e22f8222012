//! Forward and backward kernels for each layer kind in the classifier.
//!
//! Every backward function is the exact adjoint of its forward function at
//! the cached operating point. Parameter gradients are *accumulated* into the
//! caller's buffers so a batch can be reduced without extra copies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{axpy, col2im_into, dot, gemm, im2col_into, ConvGeometry, Op, Real, Tensor};

pub const CONV_KERNEL: (usize, usize) = (3, 3);
/// Zero padding that keeps a stride-1 3x3 convolution size-preserving.
pub const CONV_PADDING: (usize, usize) = (1, 1);
pub const POOL_WINDOW: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Conv2D {
        in_channels: usize,
        out_channels: usize,
    },
    ReLU,
    MaxPool2D,
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2D {
                in_channels,
                out_channels,
            } if in_channels == 0 || out_channels == 0 => {
                Err(Error::Config(format!("empty conv layer {self:?}")))
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } if in_features == 0 || out_features == 0 => {
                Err(Error::Config(format!("empty dense layer {self:?}")))
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => Err(Error::Config(
                format!("dropout rate {rate} outside [0, 1)"),
            )),
            _ => Ok(()),
        }
    }

    /// Shapes of `(weights, bias)` for layers that carry parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2D {
                in_channels,
                out_channels,
            } => Some((
                vec![out_channels, in_channels, CONV_KERNEL.0, CONV_KERNEL.1],
                vec![out_channels],
            )),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2D { .. } => "conv2d",
            LayerSpec::ReLU => "relu",
            LayerSpec::MaxPool2D => "maxpool2d",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// Weights and bias of a conv or dense layer. Also used as a gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f64> {
    /// Conv: `out_c x in_c x 3 x 3`. Dense: `out x in`.
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            weights: Tensor::zeros(self.weights.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.weights.all_finite() && self.bias.all_finite()
    }

    fn out_in(&self) -> (usize, usize) {
        let s = self.weights.shape();
        (s[0], s[1..].iter().product())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Softmax,
}

/// State saved by one layer's forward pass for its backward pass.
#[derive(Clone, Debug)]
pub enum CacheEntry<T> {
    Conv { geometry: ConvGeometry, cols: Vec<T> },
    ReLU { input: Tensor<T> },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Dropout { mask: Vec<T> },
    Flatten { input_shape: Vec<usize> },
    Dense { input: Tensor<T> },
    Softmax { output: Tensor<T> },
}

impl<T> CacheEntry<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            CacheEntry::Conv { .. } => "conv2d",
            CacheEntry::ReLU { .. } => "relu",
            CacheEntry::MaxPool { .. } => "maxpool2d",
            CacheEntry::Dropout { .. } => "dropout",
            CacheEntry::Flatten { .. } => "flatten",
            CacheEntry::Dense { .. } => "dense",
            CacheEntry::Softmax { .. } => "softmax",
        }
    }
}

/// Per-layer saved state of one forward pass, in layer order.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub mode: Mode,
    pub entries: Vec<CacheEntry<T>>,
}

fn chw(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(format!("{what} expects C x H x W input, got {shape:?}"))),
    }
}

fn conv_geometry<T: Real>(params: &LayerParams<T>, input: &Tensor<T>) -> Result<ConvGeometry> {
    let (c, h, w) = chw(input.shape(), "conv2d")?;
    let ws = params.weights.shape();
    if ws.len() != 4 || ws[1] != c {
        return Err(Error::dim(format!(
            "conv2d weights {ws:?} do not accept {c} input channels"
        )));
    }
    ConvGeometry::new((c, h, w), (ws[2], ws[3]), (1, 1), CONV_PADDING)
}

/// Same-padded stride-1 cross-correlation plus per-channel bias, returning
/// the unfolded input for reuse by the backward pass.
pub fn conv2d_forward_cached<T: Real>(
    params: &LayerParams<T>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, ConvGeometry, Vec<T>)> {
    let g = conv_geometry(params, input)?;
    let (out_c, k) = params.out_in();
    let n = g.col_cols();
    let mut cols = vec![T::zero(); k * n];
    im2col_into(input.data(), &g, &mut cols);
    let mut out = vec![T::zero(); out_c * n];
    for (row, &b) in out.chunks_exact_mut(n).zip(params.bias.data()) {
        row.fill(b);
    }
    gemm(out_c, k, n, params.weights.data(), Op::N, &cols, Op::N, T::one(), &mut out);
    let out = Tensor::new(vec![out_c, g.out_height, g.out_width], out)?;
    Ok((out, g, cols))
}

pub fn conv2d_forward<T: Real>(params: &LayerParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    conv2d_forward_cached(params, input).map(|(out, _, _)| out)
}

/// Accumulates weight/bias gradients into `grads` and, when `need_input`
/// is set, returns the gradient with respect to the layer input.
pub fn conv2d_backward<T: Real>(
    params: &LayerParams<T>,
    geometry: &ConvGeometry,
    cols: &[T],
    upstream: &Tensor<T>,
    grads: &mut LayerParams<T>,
    need_input: bool,
) -> Result<Option<Tensor<T>>> {
    let (out_c, k) = params.out_in();
    let n = geometry.col_cols();
    if upstream.shape() != [out_c, geometry.out_height, geometry.out_width] {
        return Err(Error::dim(format!(
            "conv2d upstream {:?} does not match output {:?}",
            upstream.shape(),
            [out_c, geometry.out_height, geometry.out_width]
        )));
    }
    let dy = upstream.data();
    gemm(out_c, n, k, dy, Op::N, cols, Op::T, T::one(), grads.weights.data_mut());
    for (gb, row) in grads.bias.data_mut().iter_mut().zip(dy.chunks_exact(n)) {
        *gb += row.iter().copied().sum::<T>();
    }
    if !need_input {
        return Ok(None);
    }
    let mut dcols = vec![T::zero(); k * n];
    gemm(k, out_c, n, params.weights.data(), Op::T, dy, Op::N, T::zero(), &mut dcols);
    let mut dx = vec![T::zero(); geometry.input_len()];
    col2im_into(&dcols, geometry, &mut dx);
    Tensor::new(
        vec![geometry.channels, geometry.height, geometry.width],
        dx,
    )
    .map(Some)
}

/// 2x2 stride-2 max pooling. Odd trailing rows/columns are dropped; ties go
/// to the first element in row-major window order. Returned indices are flat
/// offsets into the input.
pub fn maxpool2d_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = chw(input.shape(), "maxpool2d")?;
    if h < POOL_WINDOW || w < POOL_WINDOW {
        return Err(Error::dim(format!(
            "maxpool2d window {POOL_WINDOW}x{POOL_WINDOW} larger than input {h}x{w}"
        )));
    }
    let (ho, wo) = (h / POOL_WINDOW, w / POOL_WINDOW);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            let top = (ch * h + oy * POOL_WINDOW) * w;
            let (r0, r1) = (&x[top..top + w], &x[top + w..top + 2 * w]);
            for ox in 0..wo {
                let cx = ox * POOL_WINDOW;
                // row-major window order, strict comparison keeps the first maximum
                let mut best = (r0[cx], top + cx);
                for (v, idx) in [(r0[cx + 1], top + cx + 1), (r1[cx], top + w + cx), (r1[cx + 1], top + w + cx + 1)] {
                    if v > best.0 {
                        best = (v, idx);
                    }
                }
                out.push(best.0);
                argmax.push(best.1);
            }
        }
    }
    Ok((Tensor::new(vec![c, ho, wo], out)?, argmax))
}

pub fn maxpool2d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    if upstream.len() != argmax.len() {
        return Err(Error::dim(format!(
            "maxpool2d upstream has {} elements, cache has {}",
            upstream.len(),
            argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(input_shape);
    let buf = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(upstream.data()) {
        let slot = buf
            .get_mut(idx)
            .ok_or_else(|| Error::State(format!("argmax index {idx} out of range")))?;
        *slot += g;
    }
    Ok(dx)
}

/// `out = W . input + b` on a flat input vector.
pub fn dense_forward<T: Real>(params: &LayerParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let (out_f, in_f) = params.out_in();
    if input.len() != in_f {
        return Err(Error::dim(format!(
            "dense layer expects {in_f} inputs, got {}",
            input.len()
        )));
    }
    let x = input.data();
    let out = params
        .weights
        .data()
        .chunks_exact(in_f)
        .zip(params.bias.data())
        .map(|(row, &b)| b + dot(row, x))
        .collect();
    Tensor::new(vec![out_f], out)
}

/// Accumulates `dW += g . x^T`, `db += g` and returns `W^T . g`.
pub fn dense_backward<T: Real>(
    params: &LayerParams<T>,
    input: &Tensor<T>,
    upstream: &Tensor<T>,
    grads: &mut LayerParams<T>,
) -> Result<Tensor<T>> {
    let (out_f, in_f) = params.out_in();
    if upstream.len() != out_f || input.len() != in_f {
        return Err(Error::dim(format!(
            "dense backward: upstream {} / input {} vs layer {out_f}x{in_f}",
            upstream.len(),
            input.len()
        )));
    }
    let g = upstream.data();
    let x = input.data();
    let mut dx = vec![T::zero(); in_f];
    // one sweep over the weight rows serves both dW and dx
    let rows = params.weights.data().chunks_exact(in_f);
    for ((w, dw), &gi) in rows.zip(grads.weights.data_mut().chunks_exact_mut(in_f)).zip(g) {
        if gi != T::zero() {
            axpy(gi, x, dw);
            axpy(gi, w, &mut dx);
        }
    }
    for (b, &gi) in grads.bias.data_mut().iter_mut().zip(g) {
        *b += gi;
    }
    Tensor::new(input.shape().to_vec(), dx)
}

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient only where the forward input was strictly positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != upstream.shape() {
        return Err(Error::dim(format!(
            "relu backward: input {:?} vs upstream {:?}",
            input.shape(),
            upstream.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Row-wise softmax over the last axis.
pub fn softmax_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("softmax input contains NaN".into()));
    }
    let k = *input.shape().last().expect("non-empty shape");
    let mut out = input.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Softmax vector-Jacobian product: `dx = p * (g - <g, p>)` per row.
pub fn softmax_backward<T: Real>(output: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != upstream.shape() {
        return Err(Error::dim(format!(
            "softmax backward: output {:?} vs upstream {:?}",
            output.shape(),
            upstream.shape()
        )));
    }
    let k = *output.shape().last().expect("non-empty shape");
    let mut dx = Vec::with_capacity(output.len());
    for (p, g) in output.data().chunks_exact(k).zip(upstream.data().chunks_exact(k)) {
        let inner: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        dx.extend(p.iter().zip(g).map(|(&pi, &gi)| pi * (gi - inner)));
    }
    Tensor::new(output.shape().to_vec(), dx)
}

pub fn activation_forward<T: Real>(kind: Activation, input: &Tensor<T>) -> Result<Tensor<T>> {
    match kind {
        Activation::ReLU => {
            if input.data().iter().any(|v| v.is_nan()) {
                return Err(Error::Numerical("relu input contains NaN".into()));
            }
            Ok(relu_forward(input))
        }
        Activation::Softmax => softmax_forward(input),
    }
}

/// Inverted dropout. In `Train` mode each element survives with probability
/// `1 - rate` and is scaled by `1 / (1 - rate)`; the returned mask holds the
/// per-element multiplier. `Eval` is the identity with an all-ones mask.
pub fn dropout_forward<T: Real, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> (Tensor<T>, Vec<T>) {
    if mode == Mode::Eval || rate == 0.0 {
        return (input.clone(), vec![T::one(); input.len()]);
    }
    let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| {
            if rng.random::<f64>() >= rate {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    (
        Tensor::new(input.shape().to_vec(), data).expect("shape unchanged"),
        mask,
    )
}

pub fn dropout_backward<T: Real>(mask: &[T], upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if mask.len() != upstream.len() {
        return Err(Error::State(format!(
            "dropout mask has {} elements, upstream {}",
            mask.len(),
            upstream.len()
        )));
    }
    let data = upstream.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
    Tensor::new(upstream.shape().to_vec(), data)
}
