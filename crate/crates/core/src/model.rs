//! The six-class CAC classifier: five conv/ReLU/pool blocks, a dropout'd
//! flatten and two dense layers ending in softmax.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward_cached, dense_backward, dense_forward, dropout_backward,
    dropout_forward, maxpool2d_backward, maxpool2d_forward, relu_backward, relu_forward,
    softmax_backward, softmax_forward, CacheEntry, ForwardCache, LayerParams, LayerSpec, Mode,
    POOL_WINDOW,
};
use crate::tensor::{Real, Tensor};

pub const NUM_CLASSES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `(H, W)` of the network input.
    pub input_size: (usize, usize),
    pub input_channels: usize,
    pub conv_filters: Vec<usize>,
    pub dense_units: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (128, 128),
            input_channels: 1,
            conv_filters: vec![32, 64, 128, 256, 512],
            dense_units: 512,
            num_classes: NUM_CLASSES,
            dropout_rate: 0.30,
        }
    }
}

impl ModelConfig {
    /// Default architecture on a smaller input, e.g. `32 x 32` for gradient checks.
    pub fn with_input_size(size: (usize, usize)) -> Self {
        Self {
            input_size: size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.conv_filters;
        if f.len() != 5 || f[0] != 32 || f[4] != 512 || f.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!(
                "conv_filters must be [32, 64, 128, 256, 512], got {f:?}"
            )));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.input_channels == 0 || self.dense_units == 0 {
            return Err(Error::Config("input_channels and dense_units must be positive".into()));
        }
        let min = POOL_WINDOW.pow(f.len() as u32);
        if self.input_size.0 < min || self.input_size.1 < min {
            return Err(Error::Config(format!(
                "input {:?} too small for {} pooling stages (need >= {min})",
                self.input_size,
                f.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Spatial extent after every conv block.
    pub fn spatial_trace(&self) -> Vec<(usize, usize)> {
        let mut hw = self.input_size;
        let mut trace = vec![hw];
        for _ in &self.conv_filters {
            hw = (hw.0 / POOL_WINDOW, hw.1 / POOL_WINDOW);
            trace.push(hw);
        }
        trace
    }

    pub fn flatten_len(&self) -> usize {
        let (h, w) = *self.spatial_trace().last().expect("non-empty trace");
        h * w * self.conv_filters.last().copied().unwrap_or(0)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut channels = self.input_channels;
        for &filters in &self.conv_filters {
            specs.push(LayerSpec::Conv2D {
                in_channels: channels,
                out_channels: filters,
            });
            specs.push(LayerSpec::ReLU);
            specs.push(LayerSpec::MaxPool2D);
            channels = filters;
        }
        specs.push(LayerSpec::Flatten);
        specs.push(LayerSpec::Dropout {
            rate: self.dropout_rate,
        });
        specs.push(LayerSpec::Dense {
            in_features: self.flatten_len(),
            out_features: self.dense_units,
        });
        specs.push(LayerSpec::ReLU);
        specs.push(LayerSpec::Dense {
            in_features: self.dense_units,
            out_features: self.num_classes,
        });
        specs.push(LayerSpec::Softmax);
        specs
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_size.0, self.input_size.1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub params: Option<LayerParams<T>>,
}

/// Gradients for every parameterised layer, indexed like [`Model::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.weights.add_assign(&b.weights)?;
                a.bias.add_assign(&b.bias)?;
            }
        }
        Ok(())
    }

    /// Flat views `[w0, b0, w1, b1, ...]` in layer order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| [&p.weights, &p.bias])
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().flatten().all(LayerParams::all_finite)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    layers: Vec<Layer<T>>,
}

/// He-normal for layers followed by ReLU, `sqrt(1/fan_in)` for the output layer.
fn init_params<T: Real>(spec: &LayerSpec, is_output: bool, rng: &mut ChaCha8Rng) -> Option<LayerParams<T>> {
    let (w_shape, b_shape) = spec.param_shapes()?;
    let fan_in: usize = w_shape[1..].iter().product();
    let gain = if is_output { 1.0 } else { 2.0 };
    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
    let weights = Tensor::from_fn(&w_shape, |_| T::from_f64_lossy(normal.sample(rng)));
    Some(LayerParams {
        weights,
        bias: Tensor::zeros(&b_shape),
    })
}

/// Builds the classifier with freshly initialised weights drawn from `seed`.
pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let specs = config.layer_specs();
    let last_param = specs
        .iter()
        .rposition(|s| s.param_shapes().is_some())
        .expect("model has parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| Layer {
            spec: *spec,
            params: init_params(spec, i == last_param, &mut rng),
        })
        .collect();
    Ok(Model {
        config: config.clone(),
        layers,
    })
}

impl<T: Real> Model<T> {
    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(config: ModelConfig, params: Vec<Option<LayerParams<T>>>) -> Result<Self> {
        config.validate()?;
        let specs = config.layer_specs();
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} layers, got {}",
                specs.len(),
                params.len()
            )));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (i, (spec, p)) in specs.into_iter().zip(params).enumerate() {
            match (spec.param_shapes(), &p) {
                (None, None) => {}
                (Some((ws, bs)), Some(lp))
                    if lp.weights.shape() == ws.as_slice() && lp.bias.shape() == bs.as_slice() => {}
                (expected, _) => {
                    return Err(Error::Checkpoint(format!(
                        "layer {i} ({}) expected parameter shapes {expected:?}, got {:?}",
                        spec.name(),
                        p.as_ref().map(|lp| (lp.weights.shape().to_vec(), lp.bias.shape().to_vec()))
                    )))
                }
            }
            layers.push(Layer { spec, params: p });
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(LayerParams::len).sum()
    }

    /// Mutable views `[w0, b0, w1, b1, ...]` in layer order.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| &mut l.params)
            .flat_map(|p| [&mut p.weights, &mut p.bias])
            .collect()
    }

    pub fn param_tensors(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| &l.params)
            .flat_map(|p| [&p.weights, &p.bias])
            .collect()
    }

    pub fn zero_grads(&self) -> ParamGrads<T> {
        ParamGrads {
            layers: self
                .layers
                .iter()
                .map(|l| l.params.as_ref().map(LayerParams::zeros_like))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    params: l.params.as_ref().map(|p| LayerParams {
                        weights: p.weights.cast(),
                        bias: p.bias.cast(),
                    }),
                })
                .collect(),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let expected = self.config.input_shape();
        if input.shape() != expected {
            return Err(Error::dim(format!(
                "model expects input {expected:?}, got {:?}",
                input.shape()
            )));
        }
        Ok(())
    }

    fn apply_layer<R: RngCore + ?Sized>(
        &self,
        layer: &Layer<T>,
        x: Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, CacheEntry<T>)> {
        Ok(match (&layer.spec, &layer.params) {
            (LayerSpec::Conv2D { .. }, Some(p)) => {
                let (y, geometry, cols) = conv2d_forward_cached(p, &x)?;
                (y, CacheEntry::Conv { geometry, cols })
            }
            (LayerSpec::ReLU, _) => (relu_forward(&x), CacheEntry::ReLU { input: x }),
            (LayerSpec::MaxPool2D, _) => {
                let (y, argmax) = maxpool2d_forward(&x)?;
                let input_shape = x.shape().to_vec();
                (y, CacheEntry::MaxPool { input_shape, argmax })
            }
            (LayerSpec::Flatten, _) => {
                let input_shape = x.shape().to_vec();
                let n = x.len();
                (x.reshape(&[n])?, CacheEntry::Flatten { input_shape })
            }
            (LayerSpec::Dropout { rate }, _) => {
                let (y, mask) = dropout_forward(&x, *rate, mode, rng);
                (y, CacheEntry::Dropout { mask })
            }
            (LayerSpec::Dense { .. }, Some(p)) => (dense_forward(p, &x)?, CacheEntry::Dense { input: x }),
            (LayerSpec::Softmax, _) => {
                let y = softmax_forward(&x)?;
                (y.clone(), CacheEntry::Softmax { output: y })
            }
            (spec, None) => return Err(Error::State(format!("{} layer has no parameters", spec.name()))),
        })
    }

    /// Runs the network and records what the backward pass needs.
    ///
    /// Returns the softmax probabilities. The `rng` is only consumed by
    /// dropout in `Train` mode.
    pub fn forward<R: RngCore + ?Sized>(
        &self,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut entries = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, entry) = self.apply_layer(layer, x, mode, rng)?;
            entries.push(entry);
            x = y;
        }
        Ok((x, ForwardCache { mode, entries }))
    }

    /// Runs only `layers[range]` on an intermediate activation, without
    /// recording a cache.
    pub fn forward_span<R: RngCore + ?Sized>(
        &self,
        range: std::ops::Range<usize>,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let layers = self.layers.get(range.clone()).ok_or_else(|| {
            Error::dim(format!("layer range {range:?} outside 0..{}", self.layers.len()))
        })?;
        let mut x = input.clone();
        for layer in layers {
            x = self.apply_layer(layer, x, mode, rng)?.0;
        }
        Ok(x)
    }

    /// Eval-mode forward pass returning the pre-softmax logits.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, cache) = self.forward(input, Mode::Eval, &mut EvalRng)?;
        let last_dense = self.layers.len() - 2;
        match (&cache.entries[last_dense], &self.layers[last_dense].params) {
            (CacheEntry::Dense { input }, Some(p)) => dense_forward(p, input),
            _ => Err(Error::State("penultimate layer is not dense".into())),
        }
    }

    /// Softmax class probabilities for one normalised slice, dropout off.
    pub fn predict_slice(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(input, Mode::Eval, &mut EvalRng).map(|(p, _)| p)
    }

    /// Reverse-mode pass from a gradient on the softmax output.
    ///
    /// Parameter gradients are accumulated into `grads`; the input gradient
    /// is returned.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        upstream: &Tensor<T>,
        grads: &mut ParamGrads<T>,
    ) -> Result<Tensor<T>> {
        self.backward_from(self.layers.len(), cache, upstream, grads, true)
            .map(|g| g.expect("input gradient requested"))
    }

    /// Reverse-mode pass from a gradient on the logits, i.e. skipping the
    /// softmax layer. This is the path used with the fused softmax +
    /// cross-entropy gradient. The input gradient is skipped.
    pub fn backward_from_logits(
        &self,
        cache: &ForwardCache<T>,
        logit_grad: &Tensor<T>,
        grads: &mut ParamGrads<T>,
    ) -> Result<()> {
        self.backward_from(self.layers.len() - 1, cache, logit_grad, grads, false)
            .map(drop)
    }

    fn backward_from(
        &self,
        end: usize,
        cache: &ForwardCache<T>,
        upstream: &Tensor<T>,
        grads: &mut ParamGrads<T>,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        if cache.entries.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(Error::State(format!(
                "cache has {} entries and grads {} layers, model has {} layers",
                cache.entries.len(),
                grads.layers.len(),
                self.layers.len()
            )));
        }
        let mut g = upstream.clone();
        for i in (0..end).rev() {
            let layer = &self.layers[i];
            let entry = &cache.entries[i];
            let mismatch = || {
                Error::State(format!(
                    "layer {i} is {} but cache holds {}",
                    layer.spec.name(),
                    entry.kind()
                ))
            };
            g = match (&layer.spec, entry) {
                (LayerSpec::Conv2D { .. }, CacheEntry::Conv { geometry, cols }) => {
                    let params = layer.params.as_ref().ok_or_else(mismatch)?;
                    let lg = grads.layers[i].as_mut().ok_or_else(mismatch)?;
                    let want_input = i > 0 || need_input;
                    match conv2d_backward(params, geometry, cols, &g, lg, want_input)? {
                        Some(dx) => dx,
                        None => return Ok(None),
                    }
                }
                (LayerSpec::ReLU, CacheEntry::ReLU { input }) => relu_backward(input, &g)?,
                (LayerSpec::MaxPool2D, CacheEntry::MaxPool { input_shape, argmax }) => {
                    maxpool2d_backward(input_shape, argmax, &g)?
                }
                (LayerSpec::Flatten, CacheEntry::Flatten { input_shape }) => g.reshape(input_shape)?,
                (LayerSpec::Dropout { .. }, CacheEntry::Dropout { mask }) => {
                    dropout_backward(mask, &g)?
                }
                (LayerSpec::Dense { .. }, CacheEntry::Dense { input }) => {
                    let params = layer.params.as_ref().ok_or_else(mismatch)?;
                    let lg = grads.layers[i].as_mut().ok_or_else(mismatch)?;
                    dense_backward(params, input, &g, lg)?
                }
                (LayerSpec::Softmax, CacheEntry::Softmax { output }) => softmax_backward(output, &g)?,
                _ => return Err(mismatch()),
            };
        }
        Ok(Some(g))
    }
}

/// Class index with the highest probability; ties go to the lower index.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Independent ChaCha stream `stream` under `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Eval mode never draws from its RNG; this stands in for one.
struct EvalRng;

impl RngCore for EvalRng {
    fn next_u32(&mut self) -> u32 {
        0
    }

    fn next_u64(&mut self) -> u64 {
        0
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.fill(0);
    }
}
