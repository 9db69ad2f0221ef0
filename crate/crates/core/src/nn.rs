//! Small dense feed-forward networks with hand-written backprop and Adam.
//!
//! Everything is `f64`. Weights are stored row-major as `outputs x inputs`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Softmax,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], biases: vec![0.0; outputs] }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.biases).map(|(row, &b)| b + dot(row, x)));
    }
}

/// Dot product with four independent partial sums so the loop vectorises.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gradients (or any other per-parameter quantity) shaped like a net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub layers: Vec<Layer>,
}

impl GradientSet {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self { layers: net.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect() }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= factor);
            l.biases.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Flat view in parameter order (per layer: weights then biases).
    pub fn to_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases).copied()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Adam moment estimates; they travel with the net in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: GradientSet,
    pub second_moment: GradientSet,
}

/// Activation cache from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    /// `activations[i]` is the input to layer `i`; the last entry is the net output.
    activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layer_sizes: Vec<usize>,
    layers: Vec<Layer>,
    hidden: Activation,
    head: OutputHead,
    adam: AdamState,
    /// Bumped on every parameter change; tapes from older versions are rejected.
    version: u64,
}

impl DenseNet {
    /// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], hidden: Activation, head: OutputHead, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, hidden, head)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            layer.weights.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
            layer.biases.iter_mut().for_each(|b| *b = rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn zeros(layer_sizes: &[usize], hidden: Activation, head: OutputHead) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Config(format!("bad layer sizes {layer_sizes:?}")));
        }
        let layers: Vec<Layer> = layer_sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        let shape = GradientSet { layers: layers.clone() };
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            hidden,
            head,
            adam: AdamState {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
                step: 0,
                first_moment: shape.clone(),
                second_moment: shape,
            },
            version: 0,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_len(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Parameters flattened in the same order as [`GradientSet::to_flat`].
    pub fn parameters_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases).copied()).collect()
    }

    pub fn set_parameters_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Dimension { what: "flat parameters", expected: self.parameter_count(), found: flat.len() });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.biases.iter_mut()).for_each(|p| *p = it.next().unwrap());
        }
        self.version += 1;
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if input.len() != self.input_len() {
            return Err(Error::Dimension { what: "network input", expected: self.input_len(), found: input.len() });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(activations.last().unwrap(), &mut z);
            if i < last {
                match self.hidden {
                    Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
                    Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            } else if self.head == OutputHead::Softmax {
                softmax_in_place(&mut z);
            }
            activations.push(z);
        }
        let output = activations.last().unwrap().clone();
        Ok((output, Tape { version: self.version, activations }))
    }

    /// Output only, skipping the tape.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_len() {
            return Err(Error::Dimension { what: "network input", expected: self.input_len(), found: input.len() });
        }
        let mut x = input.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&x, &mut z);
            if i < last {
                match self.hidden {
                    Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
                    Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            } else if self.head == OutputHead::Softmax {
                softmax_in_place(&mut z);
            }
            std::mem::swap(&mut x, &mut z);
        }
        Ok(x)
    }

    pub fn backward(&self, tape: &Tape, output_gradient: &[f64]) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros_like(self);
        self.backward_into(tape, output_gradient, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates `d loss / d params` into `grads`, given `d loss / d output`.
    pub fn backward_into(&self, tape: &Tape, output_gradient: &[f64], grads: &mut GradientSet) -> Result<()> {
        if tape.version != self.version || tape.activations.len() != self.layers.len() + 1 {
            return Err(Error::StaleTape);
        }
        if output_gradient.len() != self.output_len() {
            return Err(Error::Dimension {
                what: "output gradient",
                expected: self.output_len(),
                found: output_gradient.len(),
            });
        }
        let out = tape.output();
        // Gradient w.r.t. the pre-head logits.
        let mut delta: Vec<f64> = match self.head {
            OutputHead::Linear => output_gradient.to_vec(),
            OutputHead::Softmax => {
                let inner = dot(output_gradient, out);
                out.iter().zip(output_gradient).map(|(p, g)| p * (g - inner)).collect()
            }
        };
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &tape.activations[i];
            let g = &mut grads.layers[i];
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.biases[j] += d;
                let row = &mut g.weights[j * layer.inputs..(j + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(w, x)| *w += d * x);
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[j * layer.inputs..(j + 1) * layer.inputs];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
            }
            // `input` is the post-activation output of the previous hidden layer.
            match self.hidden {
                Activation::Tanh => prev.iter_mut().zip(input).for_each(|(p, a)| *p *= 1.0 - a * a),
                Activation::Relu => prev.iter_mut().zip(input).for_each(|(p, a)| {
                    if *a <= 0.0 {
                        *p = 0.0
                    }
                }),
            }
            delta = prev;
        }
        Ok(())
    }

    /// One Adam step with bias correction.
    pub fn optimizer_step(&mut self, grads: &GradientSet, learning_rate: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len()
            || grads.layers.iter().zip(&self.layers).any(|(g, l)| g.weights.len() != l.weights.len() || g.biases.len() != l.biases.len())
        {
            return Err(Error::Dimension { what: "gradient set", expected: self.parameter_count(), found: grads.to_flat().len() });
        }
        let adam = &mut self.adam;
        adam.step += 1;
        let (b1, b2, eps) = (adam.beta1, adam.beta2, adam.epsilon);
        let c1 = 1.0 - b1.powi(adam.step as i32);
        let c2 = 1.0 - b2.powi(adam.step as i32);
        for (((layer, g), m), v) in self
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut adam.first_moment.layers)
            .zip(&mut adam.second_moment.layers)
        {
            let params = layer.weights.iter_mut().chain(layer.biases.iter_mut());
            let gs = g.weights.iter().chain(&g.biases);
            let ms = m.weights.iter_mut().chain(m.biases.iter_mut());
            let vs = v.weights.iter_mut().chain(v.biases.iter_mut());
            for (((p, &gi), mi), vi) in params.zip(gs).zip(ms).zip(vs) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.version += 1;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            layer_sizes: self.layer_sizes.clone(),
            hidden_activation: self.hidden,
            output_head: self.head,
            layers: self.layers.clone(),
            optimizer: self.adam.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found: ckpt.schema_version, expected: CHECKPOINT_SCHEMA_VERSION });
        }
        let template = Self::zeros(&ckpt.layer_sizes, ckpt.hidden_activation, ckpt.output_head)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let congruent = |ls: &[Layer]| {
            ls.len() == template.layers.len()
                && ls.iter().zip(&template.layers).all(|(a, b)| {
                    a.inputs == b.inputs
                        && a.outputs == b.outputs
                        && a.weights.len() == b.weights.len()
                        && a.biases.len() == b.biases.len()
                })
        };
        if !congruent(&ckpt.layers)
            || !congruent(&ckpt.optimizer.first_moment.layers)
            || !congruent(&ckpt.optimizer.second_moment.layers)
        {
            return Err(Error::Checkpoint("parameter shapes do not match layer_sizes".into()));
        }
        Ok(Self {
            layer_sizes: ckpt.layer_sizes,
            layers: ckpt.layers,
            hidden: ckpt.hidden_activation,
            head: ckpt.output_head,
            adam: ckpt.optimizer,
            version: 0,
        })
    }

    pub fn save_weights(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn load_weights(document: &str) -> Result<Self> {
        // Check the version tag before the full schema so that a future
        // layout is reported as a version problem.
        let value: serde_json::Value =
            serde_json::from_str(document).map_err(|e| Error::Checkpoint(e.to_string()))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v as u32 == CHECKPOINT_SCHEMA_VERSION => {}
            Some(v) => return Err(Error::SchemaVersion { found: v as u32, expected: CHECKPOINT_SCHEMA_VERSION }),
            None => return Err(Error::Checkpoint("missing schema_version".into())),
        }
        let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(ckpt)
    }
}

/// Serialized form of a [`DenseNet`] including optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_head: OutputHead,
    pub layers: Vec<Layer>,
    pub optimizer: AdamState,
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
    // Keep every probability strictly positive even for extreme logits.
    let floor = f64::MIN_POSITIVE;
    if z.iter().any(|&p| p < floor) {
        z.iter_mut().for_each(|p| *p = p.max(floor));
        let s: f64 = z.iter().sum();
        z.iter_mut().for_each(|p| *p /= s);
    }
}
