//! Layer definitions and the per-layer forward/backward contracts.
//!
//! A [`Network`] is a straight chain of layers ending in exactly one loss
//! layer. Backward passes are hand-written per layer kind; the weighted
//! layers (`Conv2d`, `Linear`) take the matrix used to carry the error
//! downward as an explicit argument so the feedback schemes can substitute
//! it, while their weight gradients are always taken against the true
//! weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::{self, conv2d_output_size, gemm, Scalar, Tensor};

fn default_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_bn_momentum() -> f64 {
    0.1
}

fn default_bn_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    /// Fully connected; flattens every non-batch axis of its input.
    Linear {
        out_features: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Relu {},
    /// Per-feature (2-D input) or per-channel (4-D input) batch normalization.
    BatchNorm {
        #[serde(default = "default_bn_momentum")]
        momentum: f64,
        #[serde(default = "default_bn_eps")]
        eps: f64,
    },
    MaxPool2d {
        kernel: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    SoftmaxCrossEntropy {},
    /// Squared error against one-hot targets, `sum((a - y)^2) / 2N`.
    MseOutput {},
}

impl LayerSpec {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. })
    }

    pub fn is_trainable(&self) -> bool {
        self.is_weighted() || matches!(self, LayerSpec::BatchNorm { .. })
    }

    pub fn is_loss(&self) -> bool {
        matches!(self, LayerSpec::SoftmaxCrossEntropy {} | LayerSpec::MseOutput {})
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Relu {} => "relu",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::MaxPool2d { .. } => "max_pool2d",
            LayerSpec::SoftmaxCrossEntropy {} => "softmax_cross_entropy",
            LayerSpec::MseOutput {} => "mse_output",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkConfig {
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Linear { out_features: h, bias: true });
            layers.push(LayerSpec::Relu {});
        }
        layers.push(LayerSpec::Linear { out_features: classes, bias: true });
        layers.push(LayerSpec::SoftmaxCrossEntropy {});
        Self { input: vec![input], layers }
    }

    /// conv-BN-ReLU-pool blocks followed by one linear classifier.
    pub fn small_cnn(input: [usize; 3], channels: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        for &c in channels {
            layers.push(LayerSpec::Conv2d { out_channels: c, kernel: 3, stride: 1, pad: 1, bias: true });
            layers.push(LayerSpec::BatchNorm { momentum: default_bn_momentum(), eps: default_bn_eps() });
            layers.push(LayerSpec::Relu {});
            layers.push(LayerSpec::MaxPool2d { kernel: 2, stride: None });
        }
        layers.push(LayerSpec::Linear { out_features: classes, bias: true });
        layers.push(LayerSpec::SoftmaxCrossEntropy {});
        Self { input: input.to_vec(), layers }
    }
}

/// A trainable tensor and its momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub velocity: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    fn new(value: Tensor<T>) -> Self {
        let velocity = Tensor::zeros_like(&value);
        Self { value, velocity }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    /// Per-sample shapes (no batch axis).
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    /// `[weight, bias?]` for weighted layers, `[gamma, beta]` for batch norm.
    pub params: Vec<Param<T>>,
    /// `[running_mean, running_var]` for batch norm.
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Scalar> Layer<T> {
    pub fn weight(&self) -> Option<&Tensor<T>> {
        if self.spec.is_weighted() {
            self.params.first().map(|p| &p.value)
        } else {
            None
        }
    }

    pub fn fan_in(&self) -> usize {
        match &self.spec {
            LayerSpec::Conv2d { kernel, .. } => self.in_shape[0] * kernel * kernel,
            LayerSpec::Linear { .. } => self.in_shape.iter().product(),
            _ => 0,
        }
    }
}

/// Bound of the Kaiming-uniform (fan-in, ReLU gain) initializer.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Cache<T> {
    None,
    BatchNorm { x_hat: Tensor<T>, inv_std: Vec<f64> },
    MaxPool { argmax: Vec<usize> },
    Loss { probs: Tensor<T> },
}

/// Activations cached by the forward pass for phases 2 and 3.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// `inputs[i]` is the (batched) input to layer `i`; the final entry is
    /// the input to the loss layer, i.e. the network output `a_L`.
    inputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
    labels: Vec<usize>,
    mode: Mode,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn input(&self, layer: usize) -> Option<&Tensor<T>> {
        self.inputs.get(layer)
    }

    pub fn output(&self) -> &Tensor<T> {
        self.inputs.last().expect("trace is never empty")
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub loss: f64,
    pub trace: ForwardTrace<T>,
    pub predictions: Vec<usize>,
}

/// Result of pushing an error signal down through one layer.
#[derive(Clone, Debug)]
pub struct LayerBackward<T> {
    pub delta: Tensor<T>,
    /// Gradients of parameters that are produced as a by-product of the
    /// error pass (batch-norm gamma/beta); empty for other kinds.
    pub param_grads: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    pub config: NetworkConfig,
    pub layers: Vec<Layer<T>>,
    pub seed: u64,
}

struct BnUpdate {
    layer: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl<T: Scalar> Network<T> {
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let layers = infer_shapes(config)?;
        let mut rng = rng::stream(seed, Domain::Init);
        let layers = layers
            .into_iter()
            .map(|(spec, in_shape, out_shape)| {
                let mut layer = Layer { spec, in_shape, out_shape, params: Vec::new(), buffers: Vec::new() };
                init_layer(&mut layer, &mut rng);
                layer
            })
            .collect();
        Ok(Self { config: config.clone(), layers, seed })
    }

    pub fn num_classes(&self) -> usize {
        *self.layers.last().expect("validated").in_shape.first().unwrap_or(&0)
    }

    pub fn weighted_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.spec.is_weighted()).map(|(i, _)| i).collect()
    }

    pub fn loss_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(|p| p.value.len()).sum()
    }

    /// Hash over every parameter, velocity and buffer bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = rng::mix64(self.seed);
        let mut feed = |t: &Tensor<T>| {
            for v in t.data() {
                h = rng::mix64(h ^ v.as_f64().to_bits());
            }
        };
        for layer in &self.layers {
            for p in &layer.params {
                feed(&p.value);
                feed(&p.velocity);
            }
            for b in &layer.buffers {
                feed(b);
            }
        }
        h
    }

    pub fn forward_train(&mut self, batch: &Tensor<T>, labels: &[usize]) -> Result<ForwardOutput<T>> {
        let (out, updates) = self.run_forward(batch, labels, Mode::Train)?;
        for u in updates {
            let LayerSpec::BatchNorm { momentum, .. } = self.layers[u.layer].spec else {
                unreachable!("updates only come from batch-norm layers");
            };
            let bufs = &mut self.layers[u.layer].buffers;
            let (rm, rv) = bufs.split_at_mut(1);
            for (c, (m, v)) in u.mean.iter().zip(&u.var).enumerate() {
                let old_m = rm[0].data()[c].as_f64();
                let old_v = rv[0].data()[c].as_f64();
                rm[0].data_mut()[c] = T::lit((1.0 - momentum) * old_m + momentum * m);
                rv[0].data_mut()[c] = T::lit((1.0 - momentum) * old_v + momentum * v);
            }
        }
        Ok(out)
    }

    /// Inference-mode forward (batch norm uses running statistics). Pure.
    pub fn forward_eval(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<ForwardOutput<T>> {
        self.run_forward(batch, labels, Mode::Eval).map(|(out, _)| out)
    }

    fn run_forward(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(ForwardOutput<T>, Vec<BnUpdate>)> {
        let n = *batch.shape().first().unwrap_or(&0);
        if batch.shape()[1..] != self.config.input[..] {
            return Err(Error::dim(
                "input",
                format!("batch shape {:?} does not match network input {:?}", batch.shape(), self.config.input),
            ));
        }
        if labels.len() != n {
            return Err(Error::dim("labels", format!("{} labels for batch of {n}", labels.len())));
        }
        let classes = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Contract(format!("label {bad} out of range for {classes} classes")));
        }

        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut updates = Vec::new();
        let mut x = batch.clone();
        let mut loss = f64::NAN;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = match &layer.spec {
                LayerSpec::Conv2d { stride, pad, .. } => {
                    let mut y = tensor::conv2d_forward(&x, &layer.params[0].value, *stride, *pad)?;
                    if let Some(b) = layer.params.get(1) {
                        add_channel_bias(&mut y, &b.value);
                    }
                    (y, Cache::None)
                }
                LayerSpec::Linear { out_features, .. } => {
                    let fan_in = layer.fan_in();
                    let mut y = Tensor::zeros(&[n, *out_features]);
                    gemm(
                        false,
                        true,
                        n,
                        *out_features,
                        fan_in,
                        x.data(),
                        layer.params[0].value.data(),
                        y.data_mut(),
                        false,
                    );
                    if let Some(b) = layer.params.get(1) {
                        add_channel_bias(&mut y, &b.value);
                    }
                    (y, Cache::None)
                }
                LayerSpec::Relu {} => (x.map(|v| if v > T::zero() { v } else { T::zero() }), Cache::None),
                LayerSpec::BatchNorm { eps, .. } => {
                    let (y, cache, update) = batch_norm_forward(layer, &x, *eps, mode);
                    if let Some((mean, var)) = update {
                        updates.push(BnUpdate { layer: i, mean, var });
                    }
                    (y, cache)
                }
                LayerSpec::MaxPool2d { kernel, stride } => {
                    let (y, argmax) = max_pool_forward(&x, *kernel, stride.unwrap_or(*kernel));
                    (y, Cache::MaxPool { argmax })
                }
                LayerSpec::SoftmaxCrossEntropy {} => {
                    let (l, probs) = softmax_cross_entropy(&x, labels);
                    loss = l;
                    (x.clone(), Cache::Loss { probs })
                }
                LayerSpec::MseOutput {} => {
                    let target = one_hot::<T>(labels, classes);
                    let sq: f64 =
                        x.data().iter().zip(target.data()).map(|(a, y)| (a.as_f64() - y.as_f64()).powi(2)).sum();
                    loss = sq / (2.0 * n as f64);
                    (x.clone(), Cache::None)
                }
            };
            inputs.push(x);
            caches.push(cache);
            x = y;
        }
        if !loss.is_finite() {
            let layer = (1..inputs.len()).find(|&i| !inputs[i].is_finite()).map(|i| i - 1).unwrap_or(self.loss_index());
            return Err(Error::NonFinite { layer });
        }
        let logits = inputs.last().expect("at least one layer");
        let predictions = argmax_rows(logits);
        let trace = ForwardTrace { inputs, caches, labels: labels.to_vec(), mode };
        Ok((ForwardOutput { loss, trace, predictions }, updates))
    }

    /// Error signal emitted by the loss layer: gradient of the batch-mean
    /// loss with respect to the network output.
    pub fn loss_error(&self, trace: &ForwardTrace<T>) -> Result<Tensor<T>> {
        let li = self.loss_index();
        let n = trace.batch() as f64;
        let out = trace.input(li).ok_or_else(|| Error::State("trace is missing the loss input".into()))?;
        match (&self.layers[li].spec, &trace.caches[li]) {
            (LayerSpec::SoftmaxCrossEntropy {}, Cache::Loss { probs }) => {
                let classes = out.shape()[1];
                let mut e = probs.clone();
                for (row, &y) in e.data_mut().chunks_mut(classes).zip(trace.labels()) {
                    row[y] = row[y] - T::one();
                    for v in row.iter_mut() {
                        *v = T::lit(v.as_f64() / n);
                    }
                }
                Ok(e)
            }
            (LayerSpec::MseOutput {}, _) => {
                let target = one_hot::<T>(trace.labels(), out.shape()[1]);
                let mut e = out.sub(&target)?;
                for v in e.data_mut() {
                    *v = T::lit(v.as_f64() / n);
                }
                Ok(e)
            }
            _ => Err(Error::State("trace does not match the loss layer".into())),
        }
    }

    /// Push `delta` (gradient w.r.t. the output of `layer`) down to the
    /// layer's input. Weighted layers use `modulatory` in place of the
    /// transposed forward weights and require it.
    pub fn backward_error(
        &self,
        layer: usize,
        delta: &Tensor<T>,
        trace: &ForwardTrace<T>,
        modulatory: Option<&Tensor<T>>,
    ) -> Result<LayerBackward<T>> {
        let l = self.layers.get(layer).ok_or_else(|| Error::Contract(format!("no layer {layer}")))?;
        let x = trace.input(layer).ok_or_else(|| Error::State(format!("trace has no input for layer {layer}")))?;
        let n = trace.batch();
        let mut expected = vec![n];
        expected.extend_from_slice(&l.out_shape);
        if delta.shape() != expected.as_slice() && !l.spec.is_loss() {
            return Err(Error::dim("delta", format!("layer {layer} expects {expected:?}, got {:?}", delta.shape())));
        }
        let plain = |delta| LayerBackward { delta, param_grads: Vec::new() };
        match &l.spec {
            LayerSpec::Conv2d { stride, pad, .. } => {
                let m =
                    modulatory.ok_or_else(|| Error::Contract(format!("layer {layer} needs a modulatory matrix")))?;
                if m.shape() != l.params[0].value.shape() {
                    return Err(Error::dim(
                        "modulatory",
                        format!("{:?} vs weight {:?}", m.shape(), l.params[0].value.shape()),
                    ));
                }
                Ok(plain(tensor::conv2d_input_grad(delta, m, x.shape(), *stride, *pad)?))
            }
            LayerSpec::Linear { out_features, .. } => {
                let m =
                    modulatory.ok_or_else(|| Error::Contract(format!("layer {layer} needs a modulatory matrix")))?;
                if m.shape() != l.params[0].value.shape() {
                    return Err(Error::dim(
                        "modulatory",
                        format!("{:?} vs weight {:?}", m.shape(), l.params[0].value.shape()),
                    ));
                }
                let fan_in = l.fan_in();
                let mut g = Tensor::zeros(x.shape());
                gemm(false, false, n, fan_in, *out_features, delta.data(), m.data(), g.data_mut(), false);
                Ok(plain(g))
            }
            LayerSpec::Relu {} => {
                let mut g = delta.clone();
                for (v, a) in g.data_mut().iter_mut().zip(x.data()) {
                    if *a <= T::zero() {
                        *v = T::zero();
                    }
                }
                Ok(plain(g))
            }
            LayerSpec::BatchNorm { .. } => {
                let Cache::BatchNorm { x_hat, inv_std } = &trace.caches[layer] else {
                    return Err(Error::State(format!("no batch-norm cache for layer {layer}")));
                };
                if trace.mode() != Mode::Train {
                    return Err(Error::State("batch-norm backward needs a training-mode trace".into()));
                }
                Ok(batch_norm_backward(l, delta, x_hat, inv_std))
            }
            LayerSpec::MaxPool2d { .. } => {
                let Cache::MaxPool { argmax } = &trace.caches[layer] else {
                    return Err(Error::State(format!("no pooling cache for layer {layer}")));
                };
                let mut g = Tensor::zeros(x.shape());
                let gd = g.data_mut();
                for (&src, &d) in argmax.iter().zip(delta.data()) {
                    gd[src] = gd[src] + d;
                }
                Ok(plain(g))
            }
            LayerSpec::SoftmaxCrossEntropy {} | LayerSpec::MseOutput {} => Ok(plain(self.loss_error(trace)?)),
        }
    }

    /// Weight (and bias) gradient of a weighted layer given the error at its
    /// output. Always taken against the true forward weights.
    pub fn weight_grad(&self, layer: usize, delta: &Tensor<T>, trace: &ForwardTrace<T>) -> Result<Vec<Tensor<T>>> {
        let l = self.layers.get(layer).ok_or_else(|| Error::Contract(format!("no layer {layer}")))?;
        let x = trace.input(layer).ok_or_else(|| Error::State(format!("trace has no input for layer {layer}")))?;
        let n = trace.batch();
        let mut grads = Vec::with_capacity(2);
        match &l.spec {
            LayerSpec::Conv2d { kernel, stride, pad, .. } => {
                grads.push(tensor::conv2d_weight_grad(x, delta, *kernel, *stride, *pad)?);
            }
            LayerSpec::Linear { out_features, .. } => {
                let fan_in = l.fan_in();
                if delta.shape() != [n, *out_features] {
                    return Err(Error::dim(
                        "delta",
                        format!("expected [{n}, {out_features}], got {:?}", delta.shape()),
                    ));
                }
                let mut dw = Tensor::zeros(&[*out_features, fan_in]);
                gemm(true, false, *out_features, fan_in, n, delta.data(), x.data(), dw.data_mut(), false);
                grads.push(dw);
            }
            _ => return Err(Error::Contract(format!("layer {layer} ({}) has no weights", l.spec.name()))),
        }
        if l.params.len() > 1 {
            grads.push(channel_sum(delta));
        }
        Ok(grads)
    }

    /// Classic momentum: `v <- mu*v + g`, `w <- w - lr*v`.
    pub fn sgd_step(&mut self, grads: &[Vec<Tensor<T>>], lr: f64, momentum: f64) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(Error::dim("grads", format!("{} layer entries for {} layers", grads.len(), self.layers.len())));
        }
        for (i, (layer, g)) in self.layers.iter().zip(grads).enumerate() {
            if g.len() != layer.params.len() {
                return Err(Error::dim(
                    format!("layer {i}"),
                    format!("{} gradients for {} parameters", g.len(), layer.params.len()),
                ));
            }
            for (p, gp) in layer.params.iter().zip(g) {
                if p.value.shape() != gp.shape() {
                    return Err(Error::dim(format!("layer {i}"), format!("{:?} vs {:?}", p.value.shape(), gp.shape())));
                }
            }
        }
        let lr = T::lit(lr);
        let mu = T::lit(momentum);
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            for (p, gp) in layer.params.iter_mut().zip(g) {
                for ((w, v), d) in p.value.data_mut().iter_mut().zip(p.velocity.data_mut()).zip(gp.data()) {
                    *v = mu * *v + *d;
                    *w = *w - lr * *v;
                }
            }
        }
        Ok(())
    }
}

/// `(spec, input shape, output shape)` without a batch axis.
pub type LayerShape = (LayerSpec, Vec<usize>, Vec<usize>);

/// Per-layer shapes.
pub fn layer_shapes(config: &NetworkConfig) -> Result<Vec<LayerShape>> {
    infer_shapes(config)
}

fn infer_shapes(config: &NetworkConfig) -> Result<Vec<LayerShape>> {
    if config.input.is_empty() || config.input.contains(&0) {
        return Err(Error::Build { layer: 0, detail: format!("invalid input shape {:?}", config.input) });
    }
    let Some(last) = config.layers.last() else {
        return Err(Error::Build { layer: 0, detail: "network has no layers".into() });
    };
    if !last.is_loss() {
        return Err(Error::Build { layer: config.layers.len() - 1, detail: "last layer must be a loss layer".into() });
    }
    let mut shape = config.input.clone();
    let mut out = Vec::with_capacity(config.layers.len());
    for (i, spec) in config.layers.iter().enumerate() {
        let err = |detail: String| Error::Build { layer: i, detail };
        if spec.is_loss() && i + 1 != config.layers.len() {
            return Err(err("loss layer must be last and unique".into()));
        }
        let next = match spec {
            LayerSpec::Conv2d { out_channels, kernel, stride, pad, .. } => {
                let [_, h, w] = shape[..] else {
                    return Err(err(format!("conv2d needs [C,H,W] input, got {shape:?}")));
                };
                if *out_channels == 0 {
                    return Err(err("conv2d needs at least one output channel".into()));
                }
                let oh = conv2d_output_size(h, *kernel, *stride, *pad)
                    .ok_or_else(|| err(format!("kernel {kernel} does not fit height {h}")))?;
                let ow = conv2d_output_size(w, *kernel, *stride, *pad)
                    .ok_or_else(|| err(format!("kernel {kernel} does not fit width {w}")))?;
                vec![*out_channels, oh, ow]
            }
            LayerSpec::Linear { out_features, .. } => {
                if *out_features == 0 {
                    return Err(err("linear needs at least one output feature".into()));
                }
                vec![*out_features]
            }
            LayerSpec::Relu {} => shape.clone(),
            LayerSpec::BatchNorm { momentum, eps } => {
                if !(shape.len() == 1 || shape.len() == 3) {
                    return Err(err(format!("batch norm needs [F] or [C,H,W] input, got {shape:?}")));
                }
                if !(0.0..=1.0).contains(momentum) || *eps <= 0.0 {
                    return Err(err(format!("batch norm momentum {momentum} / eps {eps} out of range")));
                }
                shape.clone()
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let [c, h, w] = shape[..] else {
                    return Err(err(format!("max pool needs [C,H,W] input, got {shape:?}")));
                };
                let s = stride.unwrap_or(*kernel);
                let oh = conv2d_output_size(h, *kernel, s, 0)
                    .ok_or_else(|| err(format!("pool {kernel} does not fit height {h}")))?;
                let ow = conv2d_output_size(w, *kernel, s, 0)
                    .ok_or_else(|| err(format!("pool {kernel} does not fit width {w}")))?;
                vec![c, oh, ow]
            }
            LayerSpec::SoftmaxCrossEntropy {} | LayerSpec::MseOutput {} => {
                if shape.len() != 1 || shape[0] < 2 {
                    return Err(err(format!("loss needs [classes >= 2] input, got {shape:?}")));
                }
                shape.clone()
            }
        };
        out.push((spec.clone(), shape, next.clone()));
        shape = next;
    }
    Ok(out)
}

fn init_layer<T: Scalar>(layer: &mut Layer<T>, rng: &mut impl Rng) {
    let uniform = |shape: &[usize], bound: f64, rng: &mut dyn rand::RngCore| {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit((2.0 * rng.random::<f64>() - 1.0) * bound)).collect();
        Tensor::from_vec(shape, data).expect("shape is valid")
    };
    match layer.spec.clone() {
        LayerSpec::Conv2d { out_channels, kernel, bias, .. } => {
            let shape = [out_channels, layer.in_shape[0], kernel, kernel];
            let w = uniform(&shape, kaiming_bound(layer.fan_in()), rng);
            layer.params.push(Param::new(w));
            if bias {
                layer.params.push(Param::new(Tensor::zeros(&[out_channels])));
            }
        }
        LayerSpec::Linear { out_features, bias } => {
            let shape = [out_features, layer.fan_in()];
            let w = uniform(&shape, kaiming_bound(layer.fan_in()), rng);
            layer.params.push(Param::new(w));
            if bias {
                layer.params.push(Param::new(Tensor::zeros(&[out_features])));
            }
        }
        LayerSpec::BatchNorm { .. } => {
            let c = layer.in_shape[0];
            layer.params.push(Param::new(Tensor::ones(&[c])));
            layer.params.push(Param::new(Tensor::zeros(&[c])));
            layer.buffers.push(Tensor::zeros(&[c]));
            layer.buffers.push(Tensor::ones(&[c]));
        }
        _ => {}
    }
}

/// Adds `bias[c]` along axis 1 of a `[N, C, ...]` tensor.
fn add_channel_bias<T: Scalar>(y: &mut Tensor<T>, bias: &Tensor<T>) {
    let c = y.shape()[1];
    let inner: usize = y.shape()[2..].iter().product();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v = *v + bias.data()[(i / inner) % c];
    }
}

/// Sum of a `[N, C, ...]` tensor over every axis except 1.
fn channel_sum<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.shape()[1];
    let inner: usize = t.shape()[2..].iter().product();
    let mut acc = vec![0.0f64; c];
    for (i, v) in t.data().iter().enumerate() {
        acc[(i / inner) % c] += v.as_f64();
    }
    Tensor::from_vec(&[c], acc.into_iter().map(T::lit).collect()).expect("c >= 1")
}

type BnForward<T> = (Tensor<T>, Cache<T>, Option<(Vec<f64>, Vec<f64>)>);

fn batch_norm_forward<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>, eps: f64, mode: Mode) -> BnForward<T> {
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let n = x.shape()[0];
    let count = (n * inner) as f64;
    let gamma = layer.params[0].value.data();
    let beta = layer.params[1].value.data();
    let chan = |i: usize| (i / inner) % c;
    match mode {
        Mode::Train => {
            let mut mean = vec![0.0f64; c];
            for (i, v) in x.data().iter().enumerate() {
                mean[chan(i)] += v.as_f64();
            }
            mean.iter_mut().for_each(|m| *m /= count);
            let mut var = vec![0.0f64; c];
            for (i, v) in x.data().iter().enumerate() {
                let d = v.as_f64() - mean[chan(i)];
                var[chan(i)] += d * d;
            }
            var.iter_mut().for_each(|v| *v /= count);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut x_hat = Tensor::zeros(x.shape());
            let mut y = Tensor::zeros(x.shape());
            for (i, v) in x.data().iter().enumerate() {
                let ch = chan(i);
                let h = (v.as_f64() - mean[ch]) * inv_std[ch];
                x_hat.data_mut()[i] = T::lit(h);
                y.data_mut()[i] = T::lit(gamma[ch].as_f64() * h + beta[ch].as_f64());
            }
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let running_var = var.iter().map(|v| v * unbiased).collect();
            (y, Cache::BatchNorm { x_hat, inv_std }, Some((mean, running_var)))
        }
        Mode::Eval => {
            let rm = layer.buffers[0].data();
            let rv = layer.buffers[1].data();
            let y = Tensor::from_vec(
                x.shape(),
                x.data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let ch = chan(i);
                        let h = (v.as_f64() - rm[ch].as_f64()) / (rv[ch].as_f64() + eps).sqrt();
                        T::lit(gamma[ch].as_f64() * h + beta[ch].as_f64())
                    })
                    .collect(),
            )
            .expect("same shape");
            (y, Cache::None, None)
        }
    }
}

fn batch_norm_backward<T: Scalar>(
    layer: &Layer<T>,
    delta: &Tensor<T>,
    x_hat: &Tensor<T>,
    inv_std: &[f64],
) -> LayerBackward<T> {
    let c = delta.shape()[1];
    let inner: usize = delta.shape()[2..].iter().product();
    let count = (delta.shape()[0] * inner) as f64;
    let chan = |i: usize| (i / inner) % c;
    let gamma = layer.params[0].value.data();
    let mut dbeta = vec![0.0f64; c];
    let mut dgamma = vec![0.0f64; c];
    for (i, (g, h)) in delta.data().iter().zip(x_hat.data()).enumerate() {
        dbeta[chan(i)] += g.as_f64();
        dgamma[chan(i)] += g.as_f64() * h.as_f64();
    }
    let dx = delta
        .data()
        .iter()
        .zip(x_hat.data())
        .enumerate()
        .map(|(i, (g, h))| {
            let ch = chan(i);
            let scale = gamma[ch].as_f64() * inv_std[ch] / count;
            T::lit(scale * (count * g.as_f64() - dbeta[ch] - h.as_f64() * dgamma[ch]))
        })
        .collect();
    let to_t = |v: Vec<f64>| Tensor::from_vec(&[c], v.into_iter().map(T::lit).collect()).expect("c >= 1");
    LayerBackward {
        delta: Tensor::from_vec(delta.shape(), dx).expect("same shape"),
        param_grads: vec![to_t(dgamma), to_t(dbeta)],
    }
}

fn max_pool_forward<T: Scalar>(x: &Tensor<T>, k: usize, s: usize) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape()[..] else { unreachable!("validated at build") };
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + (i * s) * w + j * s;
                for di in 0..k {
                    for dj in 0..k {
                        let at = base + (i * s + di) * w + j * s + dj;
                        if xd[at] > xd[best] {
                            best = at;
                        }
                    }
                }
                y.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    (Tensor::from_vec(&[n, c, oh, ow], y).expect("valid"), argmax)
}

fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>) {
    let classes = logits.shape()[1];
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(classes).zip(labels) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - row[y].as_f64();
        probs.extend(exps.iter().map(|e| T::lit(e / z)));
    }
    let probs = Tensor::from_vec(logits.shape(), probs).expect("same shape");
    (total / labels.len() as f64, probs)
}

fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * classes + y] = T::one();
    }
    t
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let cols = t.shape()[1..].iter().product::<usize>();
    t.data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
