//! Dense feed-forward networks in `f64` with exact reverse-mode gradients,
//! finite-difference gradient checking and a seeded minibatch trainer.
//!
//! Both the descriptor-fusion perceptron and the GCCM subset classifier are
//! instances of [`DenseNet`].

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::MODEL_FORMAT_VERSION;
use crate::rng::{self, tags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::None => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::None => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One affine layer followed by an activation. Weights are `out × in`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(rename = "in")]
    pub in_dim: usize,
    #[serde(rename = "out")]
    pub out_dim: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.in_dim + col]
    }

    fn preactivate(&self, x: &[f64], z: &mut Vec<f64>) {
        z.clear();
        z.extend(
            self.weights
                .chunks_exact(self.in_dim)
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b),
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Parameter gradients with the same shapes as the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .for_each(|v| v.fill(0.0));
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.bias)
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Activations recorded during a forward pass, needed by [`DenseNet::backward_cached`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&self.input)
    }
}

impl DenseNet {
    /// Glorot-uniform initialised network with zero biases.
    ///
    /// `dims` lists every width from input to output; `activations` has one
    /// entry per layer.
    pub fn new(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::Argument(format!(
                "network needs {} activations for dims {:?}, got {}",
                dims.len().saturating_sub(1),
                dims,
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Argument(format!("zero-width layer in {dims:?}")));
        }
        let mut rng = rng::stream(seed, tags::INIT);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut layer = Layer::zeros(fan_in, fan_out, act);
                layer.weights.iter_mut().for_each(|v| *v = rng.random_range(-a..a));
                layer
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Argument("network has no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::Argument(format!("layer {k} has zero width")));
            }
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::Argument(format!("layer {k} parameter shape mismatch")));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Argument(format!("layer {k} has non-finite parameters")));
            }
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Argument(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    k,
                    pair[0].out_dim,
                    k + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Argument(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut z = Vec::new();
        for layer in &self.layers {
            layer.preactivate(&cur, &mut z);
            cur.clear();
            cur.extend(z.iter().map(|&v| layer.activation.apply(v)));
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut cache = ForwardCache {
            input: x.to_vec(),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
        };
        for layer in &self.layers {
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.preactivate(cache.output(), &mut z);
            let a: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            cache.pre.push(z);
            cache.post.push(a);
        }
        Ok(cache)
    }

    /// Gradients of a loss w.r.t. every parameter, given `d loss / d output`.
    pub fn backward(&self, x: &[f64], loss_grad: &[f64]) -> Result<Gradients> {
        let cache = self.forward_cached(x)?;
        let mut grads = Gradients::zeros_like(self);
        self.backward_cached(&cache, loss_grad, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates parameter gradients into `grads` and returns `d loss / d input`.
    pub fn backward_cached(&self, cache: &ForwardCache, loss_grad: &[f64], grads: &mut Gradients) -> Result<Vec<f64>> {
        if loss_grad.len() != self.output_dim() {
            return Err(Error::Argument(format!(
                "loss gradient has {} entries, network outputs {}",
                loss_grad.len(),
                self.output_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let l = &self.layers[last];
        let delta: Vec<f64> = loss_grad
            .iter()
            .zip(&cache.pre[last])
            .zip(&cache.post[last])
            .map(|((g, &z), &a)| g * l.activation.derivative(z, a))
            .collect();
        Ok(self.backprop_from_preactivation(cache, delta, grads))
    }

    /// Backpropagates a gradient given w.r.t. the last layer's pre-activation.
    fn backprop_from_preactivation(
        &self,
        cache: &ForwardCache,
        mut delta: Vec<f64>,
        grads: &mut Gradients,
    ) -> Vec<f64> {
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = if k == 0 { &cache.input } else { &cache.post[k - 1] };
            let gw = &mut grads.weights[k];
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut gw[r * layer.in_dim..(r + 1) * layer.in_dim];
                row.iter_mut().zip(input).for_each(|(g, v)| *g += d * v);
            }
            grads.bias[k].iter_mut().zip(&delta).for_each(|(g, d)| *g += d);

            let mut d_in = vec![0.0; layer.in_dim];
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                d_in.iter_mut().zip(row).for_each(|(g, w)| *g += d * w);
            }
            if k == 0 {
                return d_in;
            }
            let prev = &self.layers[k - 1];
            delta = d_in
                .iter()
                .zip(&cache.pre[k - 1])
                .zip(&cache.post[k - 1])
                .map(|((g, &z), &a)| g * prev.activation.derivative(z, a))
                .collect();
        }
        unreachable!("network has at least one layer")
    }

    /// Plain gradient step `θ -= lr · g`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            layer
                .weights
                .iter_mut()
                .zip(&grads.weights[k])
                .for_each(|(w, g)| *w -= lr * g);
            layer
                .bias
                .iter_mut()
                .zip(&grads.bias[k])
                .for_each(|(b, g)| *b -= lr * g);
        }
    }

    /// Flat view of every parameter, weights before biases per layer.
    fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut i = index;
        for layer in &mut self.layers {
            if i < layer.weights.len() {
                return &mut layer.weights[i];
            }
            i -= layer.weights.len();
            if i < layer.bias.len() {
                return &mut layer.bias[i];
            }
            i -= layer.bias.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_net()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// On-disk network: dims, activations and row-major parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<Layer>,
}

impl From<&DenseNet> for ModelFile {
    fn from(net: &DenseNet) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            input_dim: net.input_dim(),
            output_dim: net.output_dim(),
            layers: net.layers.clone(),
        }
    }
}

impl ModelFile {
    pub fn into_net(self) -> Result<DenseNet> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::format(
                0,
                format!(
                    "model format version {} (expected {MODEL_FORMAT_VERSION})",
                    self.format_version
                ),
            ));
        }
        let net = DenseNet::from_layers(self.layers)?;
        if net.input_dim() != self.input_dim || net.output_dim() != self.output_dim {
            return Err(Error::format(0, "model header dims disagree with layers"));
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `Σ (out − target)²`
    SquaredError,
    /// Mean binary cross-entropy over outputs, which must lie in (0, 1).
    BinaryCrossEntropy,
}

const BCE_EPS: f64 = 1e-12;

impl Loss {
    pub fn value(self, out: &[f64], target: &[f64]) -> f64 {
        match self {
            Loss::SquaredError => out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum(),
            Loss::BinaryCrossEntropy => {
                let n = out.len() as f64;
                out.iter()
                    .zip(target)
                    .map(|(&o, &t)| {
                        let o = o.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        -(t * o.ln() + (1.0 - t) * (1.0 - o).ln())
                    })
                    .sum::<f64>()
                    / n
            }
        }
    }

    pub fn gradient(self, out: &[f64], target: &[f64]) -> Vec<f64> {
        match self {
            Loss::SquaredError => out.iter().zip(target).map(|(o, t)| 2.0 * (o - t)).collect(),
            Loss::BinaryCrossEntropy => {
                let n = out.len() as f64;
                out.iter()
                    .zip(target)
                    .map(|(&o, &t)| {
                        let o = o.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        (o - t) / (o * (1.0 - o)) / n
                    })
                    .collect()
            }
        }
    }
}

/// Gradients of `loss(net(x), target)`, fusing sigmoid + cross-entropy into
/// `out − target` at the last pre-activation for numerical stability.
pub fn loss_gradients(net: &DenseNet, x: &[f64], target: &[f64], loss: Loss, grads: &mut Gradients) -> Result<f64> {
    if target.len() != net.output_dim() {
        return Err(Error::Argument(format!(
            "target has {} entries, network outputs {}",
            target.len(),
            net.output_dim()
        )));
    }
    let cache = net.forward_cached(x)?;
    let out = cache.output();
    let value = loss.value(out, target);
    let last = net.layers.last().expect("validated network");
    if loss == Loss::BinaryCrossEntropy && last.activation == Activation::Sigmoid {
        let n = out.len() as f64;
        let delta = out.iter().zip(target).map(|(o, t)| (o - t) / n).collect();
        net.backprop_from_preactivation(&cache, delta, grads);
    } else {
        let g = loss.gradient(out, target);
        net.backward_cached(&cache, &g, grads)?;
    }
    Ok(value)
}

/// Relative disagreement between analytic and central-difference gradients.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference step used by [`gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Max relative error between backprop and central differences over all parameters.
pub fn gradcheck(net: &DenseNet, x: &[f64], target: &[f64], loss: Loss) -> Result<f64> {
    let mut grads = Gradients::zeros_like(net);
    loss_gradients(net, x, target, loss, &mut grads)?;
    compare_gradients(net, x, target, loss, &grads)
}

/// Like [`gradcheck`] but against caller-supplied analytic gradients.
pub fn compare_gradients(net: &DenseNet, x: &[f64], target: &[f64], loss: Loss, analytic: &Gradients) -> Result<f64> {
    compare_at(net, x, target, loss, analytic, 0..net.num_params())
}

/// [`gradcheck`] over `count` parameters drawn without replacement by
/// `seed`, for networks too large to probe exhaustively.
pub fn gradcheck_sampled(
    net: &DenseNet,
    x: &[f64],
    target: &[f64],
    loss: Loss,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let mut grads = Gradients::zeros_like(net);
    loss_gradients(net, x, target, loss, &mut grads)?;
    let n = net.num_params();
    let picked = rand::seq::index::sample(&mut rng::stream(seed, tags::GRADCHECK), n, count.min(n));
    compare_at(net, x, target, loss, &grads, picked.into_iter())
}

fn compare_at(
    net: &DenseNet,
    x: &[f64],
    target: &[f64],
    loss: Loss,
    analytic: &Gradients,
    indices: impl Iterator<Item = usize>,
) -> Result<f64> {
    let flat: Vec<f64> = analytic
        .weights
        .iter()
        .zip(&analytic.bias)
        .flat_map(|(w, b)| w.iter().chain(b).copied())
        .collect();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for i in indices {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + GRADCHECK_STEP;
        let plus = loss.value(&probe.forward(x)?, target);
        *probe.param_mut(i) = orig - GRADCHECK_STEP;
        let minus = loss.value(&probe.forward(x)?, target);
        *probe.param_mut(i) = orig;
        let fd = (plus - minus) / (2.0 * GRADCHECK_STEP);
        worst = worst.max(relative_error(flat[i], fd));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            optimizer: Optimizer::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Argument("batch_size and epochs must be positive".into()));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            let ok = (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0;
            if !ok {
                return Err(Error::Argument(format!(
                    "adam needs beta1, beta2 in [0,1) and eps > 0; got {beta1}, {beta2}, {eps}"
                )));
            }
        }
        Ok(())
    }
}

/// Optimizer state for one network.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    optimizer: Optimizer,
    lr: f64,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl OptimizerState {
    pub fn new(net: &DenseNet, optimizer: Optimizer, lr: f64) -> Self {
        Self {
            optimizer,
            lr,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn apply(&mut self, net: &mut DenseNet, grads: &Gradients) {
        match self.optimizer {
            Optimizer::Sgd => net.sgd_step(grads, self.lr),
            Optimizer::Adam { beta1, beta2, eps } => {
                self.step += 1;
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                let lr = self.lr;
                let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        p[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                };
                for (k, layer) in net.layers.iter_mut().enumerate() {
                    update(
                        &mut layer.weights,
                        &grads.weights[k],
                        &mut self.m.weights[k],
                        &mut self.v.weights[k],
                    );
                    update(
                        &mut layer.bias,
                        &grads.bias[k],
                        &mut self.m.bias[k],
                        &mut self.v.bias[k],
                    );
                }
            }
        }
    }
}

/// A supervised example: input vector and target vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: DenseNet,
    /// Mean per-sample loss for each epoch, measured during the epoch.
    pub loss_curve: Vec<f64>,
}

/// Minibatch training. Batches are drawn from a seeded shuffle each epoch;
/// results are bit-identical for equal inputs.
pub fn train(mut net: DenseNet, data: &[Sample], cfg: &TrainConfig, loss: Loss) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    for (k, s) in data.iter().enumerate() {
        if s.input.len() != net.input_dim() || s.target.len() != net.output_dim() {
            return Err(Error::Argument(format!(
                "sample {k}: shape ({}, {}) does not fit network ({}, {})",
                s.input.len(),
                s.target.len(),
                net.input_dim(),
                net.output_dim()
            )));
        }
    }

    let mut rng = rng::stream(cfg.seed, tags::MINIBATCH);
    let mut opt = OptimizerState::new(&net, cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = Gradients::zeros_like(&net);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    // Per-sample losses, summed in data order so the epoch mean does not
    // depend on the shuffle.
    let mut sample_loss = vec![0.0; data.len()];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            for &i in batch {
                let l = loss_gradients(&net, &data[i].input, &data[i].target, loss, &mut grads)?;
                if !l.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                sample_loss[i] = l;
            }
            let inv = 1.0 / batch.len() as f64;
            grads
                .weights
                .iter_mut()
                .chain(grads.bias.iter_mut())
                .for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
            if cfg.learning_rate > 0.0 {
                opt.apply(&mut net, &grads);
            }
        }
        let mean = sample_loss.iter().sum::<f64>() / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        loss_curve.push(mean);
    }
    Ok(TrainOutcome { net, loss_curve })
}
