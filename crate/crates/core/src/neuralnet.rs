//! Small multilayer perceptrons with LipSwish activations, their reverse-mode
//! derivative, Adam, and neural SDE vector fields built from them.
//!
//! Parameters live in one flat vector (per layer: weights row-major
//! `out x in`, then biases) so optimisers and gradient reductions act on
//! plain slices. Backpropagation recomputes activations from the input.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::revgrad::ParametricField;
use crate::solvers::VectorField;
use crate::{Error, Result};

const LIPSWISH_SCALE: f64 = 1.1;

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `u sigmoid(u) / 1.1`, Lipschitz constant below one.
pub fn lipswish(u: f64) -> f64 {
    u * sigmoid(u) / LIPSWISH_SCALE
}

pub fn lipswish_derivative(u: f64) -> f64 {
    let s = sigmoid(u);
    (s + u * s * (1.0 - s)) / LIPSWISH_SCALE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    LipSwish,
    Identity,
}

impl Activation {
    fn apply(self, u: f64) -> f64 {
        match self {
            Activation::LipSwish => lipswish(u),
            Activation::Identity => u,
        }
    }

    fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::LipSwish => lipswish_derivative(u),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn num_params(&self) -> usize {
        self.output * (self.input + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

/// JSON sidecar describing a flat parameter checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub layers: Vec<LayerShape>,
    pub num_params: usize,
}

impl Mlp {
    /// Zero-initialised network with the given layers.
    pub fn zeros(layers: Vec<LayerShape>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].output != w[1].input {
                return Err(Error::Dimension {
                    expected: w[0].output,
                    got: w[1].input,
                });
            }
        }
        let n = layers.iter().map(LayerShape::num_params).sum();
        Ok(Self {
            layers,
            params: vec![0.0; n],
        })
    }

    /// `depth` LipSwish hidden layers of `width`, then a linear output layer.
    /// Entries are uniform on `±1/sqrt(fan_in)`.
    pub fn new(input: usize, width: usize, depth: usize, output: usize, seed: u64) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut fan_in = input;
        for _ in 0..depth {
            layers.push(LayerShape {
                input: fan_in,
                output: width,
                activation: Activation::LipSwish,
            });
            fan_in = width;
        }
        layers.push(LayerShape {
            input: fan_in,
            output,
            activation: Activation::Identity,
        });
        let mut mlp = Self::zeros(layers)?;
        mlp.randomise(seed);
        Ok(mlp)
    }

    pub fn randomise(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for layer in &self.layers {
            let bound = 1.0 / (layer.input as f64).sqrt();
            for p in &mut self.params[offset..offset + layer.num_params()] {
                *p = rng.random_range(-bound..bound);
            }
            offset += layer.num_params();
        }
    }

    /// Multiplies the output layer's weights and biases by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let n = self.layers.last().map_or(0, LayerShape::num_params);
        let len = self.params.len();
        self.params[len - n..].iter_mut().for_each(|p| *p *= factor);
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Runs the network, returning the pre-activations of every layer.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        let mut offset = 0;
        for layer in &self.layers {
            let (w, rest) = self.params[offset..].split_at(layer.input * layer.output);
            let b = &rest[..layer.output];
            let z: Vec<f64> = (0..layer.output)
                .map(|o| {
                    let row = &w[o * layer.input..(o + 1) * layer.input];
                    b[o] + row.iter().zip(&act).map(|(a, v)| a * v).sum::<f64>()
                })
                .collect();
            act = z.iter().map(|&u| layer.activation.apply(u)).collect();
            pre.push(z);
            offset += layer.num_params();
        }
        pre
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let pre = self.forward_trace(x);
        let last = self.layers[self.layers.len() - 1].activation;
        Ok(pre[pre.len() - 1].iter().map(|&u| last.apply(u)).collect())
    }

    /// Reverse-mode derivative at `x` applied to `cot_out`: adds the
    /// parameter gradient into `grad_params` and writes the input cotangent
    /// into `grad_input`.
    pub fn backprop_into(&self, x: &[f64], cot_out: &[f64], grad_params: &mut [f64], grad_input: &mut [f64]) -> Result<()> {
        self.check_input(x)?;
        if cot_out.len() != self.output_dim() {
            return Err(Error::Dimension {
                expected: self.output_dim(),
                got: cot_out.len(),
            });
        }
        if grad_params.len() != self.params.len() || grad_input.len() != x.len() {
            return Err(Error::Dimension {
                expected: self.params.len(),
                got: grad_params.len(),
            });
        }
        let pre = self.forward_trace(x);
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.num_params();
        }
        let mut cot = cot_out.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let dz: Vec<f64> = cot
                .iter()
                .zip(&pre[l])
                .map(|(c, &u)| c * layer.activation.derivative(u))
                .collect();
            let input: Vec<f64> = if l == 0 {
                x.to_vec()
            } else {
                let prev = self.layers[l - 1].activation;
                pre[l - 1].iter().map(|&u| prev.apply(u)).collect()
            };
            let off = offsets[l];
            let (n_in, n_out) = (layer.input, layer.output);
            let w = &self.params[off..off + n_in * n_out];
            let gw = &mut grad_params[off..off + n_in * n_out + n_out];
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let d = dz[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    gw[o * n_in + i] += d * input[i];
                    next[i] += d * row[i];
                }
                gw[n_in * n_out + o] += d;
            }
            cot = next;
        }
        grad_input.copy_from_slice(&cot);
        Ok(())
    }

    /// Returns `(d_θ, input cotangent)` for the output cotangent `cot_out`.
    pub fn backprop_f(&self, x: &[f64], cot_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut gp = vec![0.0; self.params.len()];
        let mut gi = vec![0.0; x.len()];
        self.backprop_into(x, cot_out, &mut gp, &mut gi)?;
        Ok((gp, gi))
    }

    /// Writes `<stem>.bin` (little-endian f64) and `<stem>.json`.
    pub fn save_checkpoint(&self, stem: &Path) -> Result<()> {
        save_params(stem, &self.params, &CheckpointMeta {
            layers: self.layers.clone(),
            num_params: self.params.len(),
        })
    }

    pub fn load_checkpoint(stem: &Path) -> Result<Self> {
        let (meta, params): (CheckpointMeta, Vec<f64>) = load_params(stem)?;
        let mut mlp = Self::zeros(meta.layers)?;
        if params.len() != mlp.params.len() {
            return Err(Error::Dimension {
                expected: mlp.params.len(),
                got: params.len(),
            });
        }
        mlp.params = params;
        Ok(mlp)
    }
}

pub fn save_params<M: Serialize>(stem: &Path, params: &[f64], meta: &M) -> Result<()> {
    let bytes: Vec<u8> = params.iter().flat_map(|p| p.to_le_bytes()).collect();
    fs::write(stem.with_extension("bin"), bytes)?;
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_params<M: for<'de> Deserialize<'de>>(stem: &Path) -> Result<(M, Vec<f64>)> {
    let meta: M = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    let bytes = fs::read(stem.with_extension("bin"))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse("checkpoint length is not a multiple of 8".into()));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((meta, params))
}

/// Adam with bias correction and optional exponential learning-rate decay
/// `lr_k = lr_0 γ^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: None,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn with_decay(mut self, gamma: f64) -> Self {
        self.decay = Some(gamma);
        self
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.lr * self.decay.map_or(1.0, |g| g.powi(self.t as i32))
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        let lr = self.current_lr();
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// How the diffusion network's output maps onto the noise channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Output `σ ∈ R^q`, one Brownian channel per state component.
    Diagonal,
    /// Output `Σ ∈ R^{q x d}` row-major.
    General,
}

/// `dy = g(t, y) dt + σ(t, y) dW` with MLP drift and diffusion taking
/// `(t * time_scale, y)` as input.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralSde {
    pub drift: Mlp,
    pub diffusion: Mlp,
    pub noise: NoiseKind,
    pub noise_dims: usize,
    pub time_scale: f64,
}

impl NeuralSde {
    pub fn new(dim: usize, noise_dims: usize, noise: NoiseKind, width: usize, depth: usize, seed: u64) -> Result<Self> {
        if noise == NoiseKind::Diagonal && noise_dims != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: noise_dims,
            });
        }
        let out = match noise {
            NoiseKind::Diagonal => dim,
            NoiseKind::General => dim * noise_dims,
        };
        let mut drift = Mlp::new(dim + 1, width, depth, dim, crate::drivers::stream_seed(seed, 0))?;
        let mut diffusion = Mlp::new(dim + 1, width, depth, out, crate::drivers::stream_seed(seed, 1))?;
        drift.scale_output_layer(0.1);
        diffusion.scale_output_layer(0.1);
        Ok(Self {
            drift,
            diffusion,
            noise,
            noise_dims,
            time_scale: 1.0,
        })
    }

    fn input(&self, t: f64, y: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(y.len() + 1);
        x.push(t * self.time_scale);
        x.extend_from_slice(y);
        x
    }
}

impl VectorField for NeuralSde {
    fn dim(&self) -> usize {
        self.drift.output_dim()
    }

    fn channels(&self) -> usize {
        self.noise_dims + 1
    }

    fn apply(&self, t: f64, y: &[f64], dx: &[f64], out: &mut [f64]) {
        let x = self.input(t, y);
        let g = self.drift.forward(&x).expect("state dimension checked by the solver");
        let s = self.diffusion.forward(&x).expect("state dimension checked by the solver");
        let q = y.len();
        for i in 0..q {
            out[i] = g[i] * dx[0];
            match self.noise {
                NoiseKind::Diagonal => out[i] += s[i] * dx[i + 1],
                NoiseKind::General => {
                    for m in 0..self.noise_dims {
                        out[i] += s[i * self.noise_dims + m] * dx[m + 1];
                    }
                }
            }
        }
    }
}

impl ParametricField for NeuralSde {
    fn num_params(&self) -> usize {
        self.drift.num_params() + self.diffusion.num_params()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.drift.params().to_vec();
        p.extend_from_slice(self.diffusion.params());
        p
    }

    fn set_params(&mut self, params: &[f64]) {
        let n = self.drift.num_params();
        self.drift.params_mut().copy_from_slice(&params[..n]);
        self.diffusion.params_mut().copy_from_slice(&params[n..]);
    }

    fn vjp(&self, t: f64, y: &[f64], dx: &[f64], cot: &[f64], grad_y: &mut [f64], grad_theta: &mut [f64]) {
        let x = self.input(t, y);
        let q = y.len();
        let n = self.drift.num_params();
        let (gd, gs) = grad_theta.split_at_mut(n);
        let mut gin = vec![0.0; q + 1];

        let cot_g: Vec<f64> = cot.iter().map(|c| c * dx[0]).collect();
        self.drift
            .backprop_into(&x, &cot_g, gd, &mut gin)
            .expect("dimensions fixed at construction");
        grad_y.copy_from_slice(&gin[1..]);

        let cot_s: Vec<f64> = match self.noise {
            NoiseKind::Diagonal => (0..q).map(|i| cot[i] * dx[i + 1]).collect(),
            NoiseKind::General => (0..q * self.noise_dims)
                .map(|k| cot[k / self.noise_dims] * dx[k % self.noise_dims + 1])
                .collect(),
        };
        self.diffusion
            .backprop_into(&x, &cot_s, gs, &mut gin)
            .expect("dimensions fixed at construction");
        for (g, v) in grad_y.iter_mut().zip(&gin[1..]) {
            *g += v;
        }
    }
}
