//! Dense feed-forward networks with hand-written reverse-mode gradients and
//! an Adam optimiser.
//!
//! Weights are stored row-major as `outputs x inputs`. Forward passes over a
//! batch can be recorded on a [`GradientTape`]; calling
//! [`GradientTape::backward`] with the gradient of a scalar loss with respect
//! to the network outputs accumulates exact parameter gradients.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x` for `x >= 0`, `exp(x) - 1` otherwise.
    Elu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Elu if z < 0.0 => z.exp_m1(),
            _ => z,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Elu if y < 0.0 => y + 1.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            activation,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in self.weights.chunks_exact(self.inputs).zip(&self.bias).enumerate() {
            let z = row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v);
            out[o] = self.activation.apply(z);
        }
    }
}

/// Fully connected network: ELU on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenseNetRepr")]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
}

#[derive(Deserialize)]
struct DenseNetRepr {
    layers: Vec<DenseLayer>,
}

impl TryFrom<DenseNetRepr> for DenseNet {
    type Error = Error;

    fn try_from(repr: DenseNetRepr) -> Result<Self> {
        Self::from_layers(repr.layers)
    }
}

impl DenseNet {
    /// All-zero network with the given layer widths (input first).
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Contract(format!("invalid layer widths {widths:?}")));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let act = if l == last { Activation::Identity } else { Activation::Elu };
                DenseLayer::zeros(w[0], w[1], act)
            })
            .collect();
        Ok(Self { layers })
    }

    /// Fan-in scaled uniform initialisation: weights of layer `l` are drawn
    /// from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the output layer is further
    /// multiplied by `output_gain`, biases start at zero.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], output_gain: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let last = net.layers.len() - 1;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            let gain = if l == last { output_gain } else { 1.0 };
            for w in &mut layer.weights {
                *w = gain * rng.random_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::format("network", "no layers"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.weights.len() != layer.inputs * layer.outputs || layer.bias.len() != layer.outputs {
                return Err(Error::format("network", format!("layer {l} has inconsistent shapes")));
            }
            if l > 0 && layers[l - 1].outputs != layer.inputs {
                return Err(Error::format("network", format!("layer {l} input width mismatch")));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::format("network", format!("layer {l} has non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    fn max_width(&self) -> usize {
        self.layers.iter().map(|l| l.outputs.max(l.inputs)).max().unwrap_or(0)
    }

    pub fn zeros_like(&self) -> Self {
        let mut net = self.clone();
        net.fill(0.0);
        net
    }

    pub fn fill(&mut self, value: f64) {
        for layer in &mut self.layers {
            layer.weights.fill(value);
            layer.bias.fill(value);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Contract(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut ws = Workspace::default();
        Ok(self.forward_with(x, &mut ws).to_vec())
    }

    /// Allocation-free forward pass reusing `ws`. The input length must match.
    pub fn forward_with<'w>(&self, x: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        debug_assert_eq!(x.len(), self.input_dim());
        ws.ensure(self.max_width());
        ws.a[..x.len()].copy_from_slice(x);
        for layer in &self.layers {
            layer.forward_into(&ws.a[..layer.inputs], &mut ws.b[..layer.outputs]);
            std::mem::swap(&mut ws.a, &mut ws.b);
        }
        &ws.a[..self.output_dim()]
    }

    /// Forward pass of a network with one input and one output.
    pub fn forward_scalar(&self, x: f64, ws: &mut Workspace) -> f64 {
        self.forward_with(&[x], ws)[0]
    }

    /// Forward pass over `batch` rows of `inputs` (row-major), recording the
    /// intermediates needed for [`GradientTape::backward`].
    pub fn record(&self, inputs: &[f64], batch: usize) -> Result<(Vec<f64>, GradientTape<'_>)> {
        if inputs.len() != batch * self.input_dim() {
            return Err(Error::Contract(format!(
                "batch of {batch} needs {} inputs, got {}",
                batch * self.input_dim(),
                inputs.len()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.to_vec());
        for layer in &self.layers {
            let prev = activations.last().expect("input recorded");
            let mut out = vec![0.0; batch * layer.outputs];
            for (x, y) in prev.chunks_exact(layer.inputs).zip(out.chunks_exact_mut(layer.outputs)) {
                layer.forward_into(x, y);
            }
            activations.push(out);
        }
        let outputs = activations.last().expect("output recorded").clone();
        Ok((
            outputs,
            GradientTape {
                net: self,
                batch,
                activations,
                consumed: false,
            },
        ))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

/// Scratch buffers for [`DenseNet::forward_with`].
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Workspace {
    fn ensure(&mut self, width: usize) {
        if self.a.len() < width {
            self.a.resize(width, 0.0);
            self.b.resize(width, 0.0);
        }
    }
}

/// Recorded forward pass of one [`DenseNet`] over a batch.
#[derive(Debug)]
pub struct GradientTape<'a> {
    net: &'a DenseNet,
    batch: usize,
    /// Post-activation values per layer, input first.
    activations: Vec<Vec<f64>>,
    consumed: bool,
}

impl GradientTape<'_> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Accumulates parameter gradients into `grads` (shaped like the network)
    /// and returns the gradient with respect to the recorded inputs.
    ///
    /// A tape can be consumed once.
    pub fn backward(&mut self, output_grads: &[f64], grads: &mut DenseNet) -> Result<Vec<f64>> {
        if self.consumed {
            return Err(Error::Protocol("gradient tape already consumed".into()));
        }
        let net = self.net;
        if output_grads.len() != self.batch * net.output_dim() {
            return Err(Error::Contract(format!(
                "expected {} output gradients, got {}",
                self.batch * net.output_dim(),
                output_grads.len()
            )));
        }
        if grads.widths() != net.widths() {
            return Err(Error::Contract("gradient container shape differs from network".into()));
        }
        self.consumed = true;

        let mut delta = output_grads.to_vec();
        for l in (0..net.layers.len()).rev() {
            let layer = &net.layers[l];
            let out = &self.activations[l + 1];
            for (d, &y) in delta.iter_mut().zip(out) {
                *d *= layer.activation.grad_from_output(y);
            }
            let input = &self.activations[l];
            let g = &mut grads.layers[l];
            for (x, d) in input.chunks_exact(layer.inputs).zip(delta.chunks_exact(layer.outputs)) {
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    g.bias[o] += dv;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, &xv) in row.iter_mut().zip(x) {
                        *gw += dv * xv;
                    }
                }
            }
            let mut prev = vec![0.0; self.batch * layer.inputs];
            for (p, d) in prev.chunks_exact_mut(layer.inputs).zip(delta.chunks_exact(layer.outputs)) {
                for (&dv, row) in d.iter().zip(layer.weights.chunks_exact(layer.inputs)) {
                    if dv == 0.0 {
                        continue;
                    }
                    for (pv, &w) in p.iter_mut().zip(row) {
                        *pv += w * dv;
                    }
                }
            }
            delta = prev;
        }
        self.activations.clear();
        Ok(delta)
    }
}

/// Identifies one parameter tensor for error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamKey {
    pub group: &'static str,
    pub index: [usize; 3],
    pub leaf: &'static str,
}

impl ParamKey {
    pub const fn new(group: &'static str, index: [usize; 3], leaf: &'static str) -> Self {
        Self { group, index, leaf }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.index;
        write!(f, "{}[{a}][{b}][{c}].{}", self.group, self.leaf)
    }
}

/// A model whose parameters can be enumerated in a fixed order.
///
/// Gradient containers have the same type as the model, so the same
/// enumeration order lines up parameters and gradients.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(ParamKey, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamKey, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |_, v| v.fill(0.0));
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, v| out.extend_from_slice(v));
        out
    }

    fn l2_norm(&self) -> f64 {
        let mut sq = 0.0;
        self.visit(&mut |_, v| sq += v.iter().map(|x| x * x).sum::<f64>());
        sq.sqrt()
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x *= factor));
    }
}

impl DenseNet {
    pub(crate) fn visit_as(&self, group: &'static str, outer: [usize; 2], f: &mut dyn FnMut(ParamKey, &[f64])) {
        for (l, layer) in self.layers.iter().enumerate() {
            let idx = [outer[0], outer[1], l];
            f(ParamKey::new(group, idx, "weight"), &layer.weights);
            f(ParamKey::new(group, idx, "bias"), &layer.bias);
        }
    }

    pub(crate) fn visit_mut_as(
        &mut self,
        group: &'static str,
        outer: [usize; 2],
        f: &mut dyn FnMut(ParamKey, &mut [f64]),
    ) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let idx = [outer[0], outer[1], l];
            f(ParamKey::new(group, idx, "weight"), &mut layer.weights);
            f(ParamKey::new(group, idx, "bias"), &mut layer.bias);
        }
    }
}

/// Feature-major batch layout: row `u` of a `units x batch` matrix holds unit
/// `u` for every sample. Inner loops run along the batch, which suits the
/// narrow networks of additive models.
impl DenseNet {
    /// Like [`record`](Self::record) but with `inputs` laid out
    /// `input_dim x batch`; the outputs come back `output_dim x batch`.
    pub fn record_columns(&self, inputs: &[f64], batch: usize) -> Result<(Vec<f64>, ColumnTape<'_>)> {
        if inputs.len() != batch * self.input_dim() {
            return Err(Error::Contract(format!(
                "batch of {batch} needs {} inputs, got {}",
                batch * self.input_dim(),
                inputs.len()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.to_vec());
        for layer in &self.layers {
            let prev: &Vec<f64> = activations.last().expect("input recorded");
            let mut out = vec![0.0; batch * layer.outputs];
            for (o, z) in out.chunks_exact_mut(batch).enumerate() {
                z.fill(layer.bias[o]);
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (&w, x) in row.iter().zip(prev.chunks_exact(batch)) {
                    for (zv, &xv) in z.iter_mut().zip(x) {
                        *zv += w * xv;
                    }
                }
                if layer.activation == Activation::Elu {
                    for zv in z.iter_mut() {
                        if *zv < 0.0 {
                            *zv = zv.exp_m1();
                        }
                    }
                }
            }
            activations.push(out);
        }
        let outputs = activations.last().expect("output recorded").clone();
        Ok((
            outputs,
            ColumnTape {
                net: self,
                batch,
                activations,
                consumed: false,
            },
        ))
    }
}

/// Recorded feature-major forward pass; see [`DenseNet::record_columns`].
#[derive(Debug)]
pub struct ColumnTape<'a> {
    net: &'a DenseNet,
    batch: usize,
    activations: Vec<Vec<f64>>,
    consumed: bool,
}

impl ColumnTape<'_> {
    /// `output_grads` is `output_dim x batch`; returns `input_dim x batch`.
    pub fn backward(&mut self, output_grads: &[f64], grads: &mut DenseNet) -> Result<Vec<f64>> {
        if self.consumed {
            return Err(Error::Protocol("gradient tape already consumed".into()));
        }
        let net = self.net;
        let batch = self.batch;
        if output_grads.len() != batch * net.output_dim() {
            return Err(Error::Contract(format!(
                "expected {} output gradients, got {}",
                batch * net.output_dim(),
                output_grads.len()
            )));
        }
        if grads.layers.len() != net.layers.len()
            || grads.layers.iter().zip(&net.layers).any(|(g, l)| g.inputs != l.inputs || g.outputs != l.outputs)
        {
            return Err(Error::Contract("gradient container shape differs from network".into()));
        }
        self.consumed = true;

        let mut delta = output_grads.to_vec();
        for l in (0..net.layers.len()).rev() {
            let layer = &net.layers[l];
            if layer.activation == Activation::Elu {
                for (d, &y) in delta.iter_mut().zip(&self.activations[l + 1]) {
                    if y < 0.0 {
                        *d *= y + 1.0;
                    }
                }
            }
            let input = &self.activations[l];
            let g = &mut grads.layers[l];
            let mut prev = vec![0.0; batch * layer.inputs];
            for (o, d) in delta.chunks_exact(batch).enumerate() {
                g.bias[o] += d.iter().sum::<f64>();
                let w_row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let g_row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (i, (x, p)) in input.chunks_exact(batch).zip(prev.chunks_exact_mut(batch)).enumerate() {
                    let w = w_row[i];
                    let mut acc = 0.0;
                    for ((&dv, &xv), pv) in d.iter().zip(x).zip(p.iter_mut()) {
                        acc += dv * xv;
                        *pv += w * dv;
                    }
                    g_row[i] += acc;
                }
            }
            delta = prev;
        }
        self.activations.clear();
        Ok(delta)
    }
}

impl Parameters for DenseNet {
    fn visit(&self, f: &mut dyn FnMut(ParamKey, &[f64])) {
        self.visit_as("layer", [0, 0], f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamKey, &mut [f64])) {
        self.visit_mut_as("layer", [0, 0], f);
    }
}

/// Rescales `grads` so that its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<P: Parameters + ?Sized>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm.is_finite() && norm > max_norm {
        grads.scale(max_norm / (norm + 1e-6));
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimiser state over a fixed parameter layout.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
    flat: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            steps: 0,
            flat: Vec::with_capacity(num_params),
        }
    }

    pub fn for_params<P: Parameters + ?Sized>(config: AdamConfig, params: &P) -> Self {
        Self::new(config, params.num_params())
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update. A non-finite gradient aborts before any parameter
    /// or moment is touched.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        self.flat.clear();
        let mut bad = None;
        let flat = &mut self.flat;
        grads.visit(&mut |key, g| {
            if bad.is_none() && g.iter().any(|x| !x.is_finite()) {
                bad = Some(key);
            }
            flat.extend_from_slice(g);
        });
        if let Some(key) = bad {
            return Err(Error::Training(format!("non-finite gradient in {key}")));
        }
        if self.flat.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimiser sized for {} parameters, got {}",
                self.m.len(),
                self.flat.len()
            )));
        }

        self.steps += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for ((m, v), &g) in self.m.iter_mut().zip(&mut self.v).zip(&self.flat) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
        }
        let (m, v) = (&self.m, &self.v);
        let mut offset = 0;
        params.visit_mut(&mut |_, p| {
            for (k, x) in p.iter_mut().enumerate() {
                let m_hat = m[offset + k] / bc1;
                let v_hat = v[offset + k] / bc2;
                *x -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
            offset += p.len();
        });
        Ok(())
    }
}
