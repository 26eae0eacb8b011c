//! Reverse-mode differentiable dense feed-forward networks.
//!
//! A network is a stack of affine layers with element-wise activations.
//! `forward` records every post-activation vector on a [`Tape`];
//! [`backward_seeded`] replays the tape in reverse and produces exact
//! gradients for every weight, bias, and the input. Gradient seeds may be
//! attached to any layer's output, not just the last, which is how
//! adaptation losses on intermediate activations reach the trunk.
//!
//! [`reverse_gradient`] implements the gradient-reversal pseudo-layer:
//! identity in the forward pass, multiplication by `-lambda` on the way
//! back.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// Derivative dy/dz expressed through the recorded output y.
    #[inline]
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub name: String,
    pub width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, width: usize, activation: Activation) -> Self {
        Self {
            name: name.into(),
            width,
            activation,
        }
    }
}

/// Architecture of one dense network: input dimension plus an ordered list
/// of named layers.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    input_dim: usize,
    layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be positive".into()));
        }
        if layers.is_empty() {
            return Err(Error::InvalidSpec("network needs at least one layer".into()));
        }
        for layer in &layers {
            if layer.width == 0 {
                return Err(Error::InvalidSpec(format!(
                    "layer {} has zero width",
                    layer.name
                )));
            }
        }
        for (i, a) in layers.iter().enumerate() {
            for b in &layers[i + 1..] {
                if a.name == b.name {
                    return Err(Error::InvalidSpec(format!("duplicate layer name {}", a.name)));
                }
            }
        }
        Ok(Self { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("spec has layers").width
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Input dimension of layer `idx`.
    pub fn in_dim_of(&self, idx: usize) -> usize {
        if idx == 0 {
            self.input_dim
        } else {
            self.layers[idx - 1].width
        }
    }
}

/// Weights and biases for one layer. Weights are row-major `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Trainable parameters of a network; shapes mirror its [`NetworkSpec`].
/// Gradient accumulators reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub layers: Vec<LayerParams>,
}

impl Parameters {
    /// Xavier/Glorot uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(spec.num_layers());
        for (idx, layer) in spec.layers().iter().enumerate() {
            let fan_in = spec.in_dim_of(idx);
            let fan_out = layer.width;
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            let weights = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            layers.push(LayerParams {
                weights,
                biases: vec![0.0; fan_out],
            });
        }
        Self { layers }
    }

    pub fn zeros_like(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layers()
            .iter()
            .enumerate()
            .map(|(idx, layer)| LayerParams {
                weights: vec![0.0; spec.in_dim_of(idx) * layer.width],
                biases: vec![0.0; layer.width],
            })
            .collect();
        Self { layers }
    }

    pub fn matches_spec(&self, spec: &NetworkSpec) -> bool {
        self.layers.len() == spec.num_layers()
            && self.layers.iter().enumerate().all(|(idx, lp)| {
                lp.weights.len() == spec.in_dim_of(idx) * spec.layers()[idx].width
                    && lp.biases.len() == spec.layers()[idx].width
            })
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    /// `self += scale * other`, used to accumulate per-example gradients.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                "parameter accumulation",
                self.layers.len(),
                other.layers.len(),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weights.len() != b.weights.len() || a.biases.len() != b.biases.len() {
                return Err(Error::shape("parameter accumulation", a.weights.len(), b.weights.len()));
            }
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += scale * y;
            }
        }
        Ok(())
    }
}

/// Recorded forward values: `values[0]` is the input, `values[i + 1]` the
/// post-activation output of layer `i`. Enough to replay an exact backward
/// pass for every activation in [`Activation`].
#[derive(Debug, Clone)]
pub struct Tape {
    values: Vec<Vec<f64>>,
}

impl Tape {
    pub fn input(&self) -> &[f64] {
        &self.values[0]
    }

    /// Post-activation output of layer `idx`.
    pub fn layer_output(&self, idx: usize) -> &[f64] {
        &self.values[idx + 1]
    }

    pub fn output(&self) -> &[f64] {
        self.values.last().expect("tape has values")
    }
}

fn check_params(spec: &NetworkSpec, params: &Parameters) -> Result<()> {
    if !params.matches_spec(spec) {
        return Err(Error::InvalidSpec(
            "parameters do not match network spec".into(),
        ));
    }
    Ok(())
}

/// Runs the network on `input`, returning the output and the tape needed
/// for [`backward`].
pub fn forward(spec: &NetworkSpec, params: &Parameters, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
    check_params(spec, params)?;
    if input.len() != spec.input_dim() {
        return Err(Error::shape("forward input", spec.input_dim(), input.len()));
    }
    let mut values = Vec::with_capacity(spec.num_layers() + 1);
    values.push(input.to_vec());
    for (idx, layer) in spec.layers().iter().enumerate() {
        let x = &values[idx];
        let lp = &params.layers[idx];
        let in_dim = spec.in_dim_of(idx);
        let mut y = Vec::with_capacity(layer.width);
        for o in 0..layer.width {
            let mut z = lp.biases[o];
            let row = &lp.weights[o * in_dim..(o + 1) * in_dim];
            for (w, xi) in row.iter().zip(x.iter()) {
                z += w * xi;
            }
            y.push(layer.activation.apply(z));
        }
        values.push(y);
    }
    let output = values.last().expect("output").clone();
    Ok((output, Tape { values }))
}

/// A gradient seed attached to the post-activation output of layer `layer`.
#[derive(Debug, Clone)]
pub struct GradSeed {
    pub layer: usize,
    pub grad: Vec<f64>,
}

/// Reverse sweep with gradient seeds on arbitrary layer outputs. Seeds for
/// the same layer accumulate. Returns parameter gradients (shaped like
/// [`Parameters`]) and the gradient with respect to the input.
pub fn backward_seeded(
    spec: &NetworkSpec,
    params: &Parameters,
    tape: &Tape,
    seeds: &[GradSeed],
) -> Result<(Parameters, Vec<f64>)> {
    check_params(spec, params)?;
    if tape.values.len() != spec.num_layers() + 1 {
        return Err(Error::shape(
            "tape length",
            spec.num_layers() + 1,
            tape.values.len(),
        ));
    }
    for seed in seeds {
        if seed.layer >= spec.num_layers() {
            return Err(Error::UnknownLayer(format!("layer index {}", seed.layer)));
        }
        let width = spec.layers()[seed.layer].width;
        if seed.grad.len() != width {
            return Err(Error::shape("gradient seed", width, seed.grad.len()));
        }
    }

    let mut grads = Parameters::zeros_like(spec);
    let mut running = vec![0.0; spec.output_dim()];
    for idx in (0..spec.num_layers()).rev() {
        for seed in seeds.iter().filter(|s| s.layer == idx) {
            for (r, g) in running.iter_mut().zip(&seed.grad) {
                *r += g;
            }
        }
        let layer = &spec.layers()[idx];
        let in_dim = spec.in_dim_of(idx);
        let x = if idx == 0 {
            tape.input()
        } else {
            tape.layer_output(idx - 1)
        };
        let y = tape.layer_output(idx);
        let lp = &params.layers[idx];
        let gl = &mut grads.layers[idx];
        let mut next = vec![0.0; in_dim];
        for o in 0..layer.width {
            let dz = running[o] * layer.activation.grad_from_output(y[o]);
            gl.biases[o] = dz;
            let row = &lp.weights[o * in_dim..(o + 1) * in_dim];
            let grow = &mut gl.weights[o * in_dim..(o + 1) * in_dim];
            for k in 0..in_dim {
                grow[k] = dz * x[k];
                next[k] += row[k] * dz;
            }
        }
        running = next;
    }
    Ok((grads, running))
}

/// Backward pass seeded at the network output.
pub fn backward(
    spec: &NetworkSpec,
    params: &Parameters,
    tape: &Tape,
    output_grad: &[f64],
) -> Result<(Parameters, Vec<f64>)> {
    if output_grad.len() != spec.output_dim() {
        return Err(Error::shape(
            "output gradient",
            spec.output_dim(),
            output_grad.len(),
        ));
    }
    backward_seeded(
        spec,
        params,
        tape,
        &[GradSeed {
            layer: spec.num_layers() - 1,
            grad: output_grad.to_vec(),
        }],
    )
}

/// Gradient-reversal pseudo-layer: forward is the identity, backward
/// multiplies the incoming gradient by `-lambda`.
pub fn reverse_gradient(input_grad: &[f64], lambda: f64) -> Vec<f64> {
    input_grad.iter().map(|g| -lambda * g).collect()
}

/// Backward pass composed with the gradient-reversal pseudo-layer.
/// Runs the plain backward for `seeds`, then multiplies every parameter
/// gradient and the input gradient by `-lambda`. Scaling after the sweep
/// keeps the result exactly `-lambda` times the unreversed backward,
/// element for element, for any lambda.
pub fn backward_reversed_seeded(
    spec: &NetworkSpec,
    params: &Parameters,
    tape: &Tape,
    seeds: &[GradSeed],
    lambda: f64,
) -> Result<(Parameters, Vec<f64>)> {
    let (mut grads, mut input_grad) = backward_seeded(spec, params, tape, seeds)?;
    for v in grads.values_mut() {
        *v *= -lambda;
    }
    for v in &mut input_grad {
        *v *= -lambda;
    }
    Ok((grads, input_grad))
}

/// A spec and its parameters, bundled for convenience.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Parameters,
}

impl Network {
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Self {
        let params = Parameters::init(&spec, rng);
        Self { spec, params }
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        forward(&self.spec, &self.params, input)
    }

    pub fn backward(&self, tape: &Tape, output_grad: &[f64]) -> Result<(Parameters, Vec<f64>)> {
        backward(&self.spec, &self.params, tape, output_grad)
    }

    pub fn backward_seeded(&self, tape: &Tape, seeds: &[GradSeed]) -> Result<(Parameters, Vec<f64>)> {
        backward_seeded(&self.spec, &self.params, tape, seeds)
    }
}
