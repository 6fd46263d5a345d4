//! Small fully connected networks with hand-written reverse mode, plus the
//! optimisers and learning-rate schedules used by the agents.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{sigmoid, softplus, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus => softplus(z),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and the output `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(z),
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Feed-forward network. Each layer stores its weights row-major
/// (`out × in`) followed by its biases in one flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: Vec<f64>,
}

/// Gradients of `upstreamᵀ·forward(x)` with respect to parameters and input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub d_params: Vec<f64>,
    pub d_input: Vec<f64>,
}

/// Activations of a batched forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    batch: usize,
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Row-major `batch × out` network output.
    /// Pre-activations of layer `l`, row-major `batch × width`.
    pub fn pre_activations(&self, l: usize) -> &[f64] {
        &self.pre[l]
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape has an input layer")
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.acts.pop().expect("tape has an input layer")
    }
}

impl Mlp {
    /// Network with all parameters zero.
    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self, NeuralError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NeuralError::Argument(format!(
                "need at least two non-zero layer sizes, got {sizes:?}"
            )));
        }
        let n: usize = sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params: vec![0.0; n],
        })
    }

    /// Uniform fan-in initialisation: He bounds for ReLU layers, Xavier
    /// bounds otherwise. Biases start at zero.
    pub fn init(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut RngStream) -> Result<Self, NeuralError> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        let layers = net.layers();
        for l in 0..layers {
            let (fan_in, fan_out) = (net.sizes[l], net.sizes[l + 1]);
            let act = if l + 1 == layers { output } else { hidden };
            let bound = match act {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let off = net.layer_offset(l);
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = rng.uniform(-bound, bound);
            }
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated sizes")
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

    pub fn set_params(&mut self, p: &[f64]) -> Result<(), NeuralError> {
        if p.len() != self.params.len() {
            return Err(NeuralError::Shape(format!(
                "parameter vector has {} entries, network has {}",
                p.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(p);
        Ok(())
    }

    /// Start of layer `l`'s weights in the flat vector.
    pub fn layer_offset(&self, l: usize) -> usize {
        self.sizes.windows(2).take(l).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Multiplies the final layer's weights and biases by `s`.
    pub fn scale_output_layer(&mut self, s: f64) {
        let off = self.layer_offset(self.layers() - 1);
        for p in &mut self.params[off..] {
            *p *= s;
        }
    }

    /// Mutable view of the final layer's biases.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let k = self.output_dim();
        let n = self.params.len();
        &mut self.params[n - k..]
    }

    fn activation_of(&self, l: usize) -> Activation {
        if l + 1 == self.layers() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        if x.len() != self.input_dim() {
            return Err(NeuralError::Shape(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut cur = x.to_vec();
        let mut off = 0;
        for l in 0..self.layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + (n_in + 1) * n_out];
            let act = self.activation_of(l);
            let mut next = vec![0.0; n_out];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + dot(row, &cur);
                next[o] = act.apply(z);
            }
            cur = next;
            off += (n_in + 1) * n_out;
        }
        Ok(cur)
    }

    /// Forward pass over a row-major `batch × in` input.
    pub fn forward_batch(&self, xs: &[f64], batch: usize) -> Result<Tape, NeuralError> {
        if xs.len() != batch * self.input_dim() {
            return Err(NeuralError::Shape(format!(
                "batch input has {} entries, expected {} x {}",
                xs.len(),
                batch,
                self.input_dim()
            )));
        }
        let layers = self.layers();
        let mut acts = Vec::with_capacity(layers + 1);
        let mut pre = Vec::with_capacity(layers);
        acts.push(xs.to_vec());
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + (n_in + 1) * n_out];
            let act = self.activation_of(l);
            let input = &acts[l];
            let mut z = vec![0.0; batch * n_out];
            for s in 0..batch {
                let x = &input[s * n_in..(s + 1) * n_in];
                let zr = &mut z[s * n_out..(s + 1) * n_out];
                for o in 0..n_out {
                    zr[o] = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
                }
            }
            let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            pre.push(z);
            acts.push(a);
            off += (n_in + 1) * n_out;
        }
        Ok(Tape { batch, acts, pre })
    }

    /// Accumulates `Σ_b upstream_bᵀ ∂out_b/∂params` into `d_params` and, when
    /// requested, writes the per-row input gradients into `d_input`.
    pub fn backward_batch(
        &self,
        tape: &Tape,
        upstream: &[f64],
        d_params: &mut [f64],
        mut d_input: Option<&mut [f64]>,
    ) -> Result<(), NeuralError> {
        let batch = tape.batch;
        if upstream.len() != batch * self.output_dim() || d_params.len() != self.params.len() {
            return Err(NeuralError::Shape(format!(
                "upstream has {} entries (expected {}), d_params has {} (expected {})",
                upstream.len(),
                batch * self.output_dim(),
                d_params.len(),
                self.params.len()
            )));
        }
        if let Some(di) = d_input.as_deref() {
            if di.len() != batch * self.input_dim() {
                return Err(NeuralError::Shape(format!(
                    "d_input has {} entries, expected {}",
                    di.len(),
                    batch * self.input_dim()
                )));
            }
        }
        let layers = self.layers();
        let mut delta = upstream.to_vec();
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += (self.sizes[l] + 1) * self.sizes[l + 1];
        }
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let act = self.activation_of(l);
            let z = &tape.pre[l];
            let a = &tape.acts[l + 1];
            if act != Activation::Identity {
                for ((d, &zv), &av) in delta.iter_mut().zip(z).zip(a) {
                    *d *= act.derivative(zv, av);
                }
            }
            let off = offsets[l];
            let input = &tape.acts[l];
            {
                let (dw, db) = d_params[off..off + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
                for s in 0..batch {
                    let x = &input[s * n_in..(s + 1) * n_in];
                    let dr = &delta[s * n_out..(s + 1) * n_out];
                    for o in 0..n_out {
                        let g = dr[o];
                        if g == 0.0 {
                            continue;
                        }
                        db[o] += g;
                        axpy(g, x, &mut dw[o * n_in..(o + 1) * n_in]);
                    }
                }
            }
            let need_input = l > 0 || d_input.is_some();
            if !need_input {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut next = vec![0.0; batch * n_in];
            for s in 0..batch {
                let dr = &delta[s * n_out..(s + 1) * n_out];
                let nr = &mut next[s * n_in..(s + 1) * n_in];
                for o in 0..n_out {
                    let g = dr[o];
                    if g != 0.0 {
                        axpy(g, &w[o * n_in..(o + 1) * n_in], nr);
                    }
                }
            }
            delta = next;
        }
        if let Some(di) = d_input.as_deref_mut() {
            di.copy_from_slice(&delta);
        }
        Ok(())
    }

    /// Input gradients only, `Σ_b` accumulation into parameters skipped.
    pub fn input_gradients(&self, tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let mut scratch = vec![0.0; self.params.len()];
        let mut d_input = vec![0.0; tape.batch * self.input_dim()];
        self.backward_batch(tape, upstream, &mut scratch, Some(&mut d_input))?;
        Ok(d_input)
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<GradientBundle, NeuralError> {
        if x.len() != self.input_dim() || upstream.len() != self.output_dim() {
            return Err(NeuralError::Shape(format!(
                "backward needs input {} and upstream {}, got {} and {}",
                self.input_dim(),
                self.output_dim(),
                x.len(),
                upstream.len()
            )));
        }
        let tape = self.forward_batch(x, 1)?;
        let mut d_params = vec![0.0; self.params.len()];
        let mut d_input = vec![0.0; x.len()];
        self.backward_batch(&tape, upstream, &mut d_params, Some(&mut d_input))?;
        Ok(GradientBundle { d_params, d_input })
    }
}

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
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `g` in place to norm at most `bound`; returns the norm before clipping.
pub fn clip_global_norm(g: &mut [f64], bound: f64) -> f64 {
    let norm = l2_norm(g);
    if norm > bound && norm > 0.0 {
        let s = bound / norm;
        for v in g.iter_mut() {
            *v *= s;
        }
    }
    norm
}

/// Clips the concatenation of both parts of a bundle to `bound`.
pub fn clip_bundle(g: &mut GradientBundle, bound: f64) -> f64 {
    let norm = (g.d_params.iter().chain(&g.d_input).map(|v| v * v).sum::<f64>()).sqrt();
    if norm > bound && norm > 0.0 {
        let s = bound / norm;
        g.d_params.iter_mut().chain(g.d_input.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `params + lr·g`, for objectives.
    Ascent,
    /// `params − lr·g`, for losses.
    Descent,
}

pub fn sgd_step(params: &mut [f64], g: &[f64], lr: f64, direction: Direction) -> Result<(), NeuralError> {
    if params.len() != g.len() {
        return Err(NeuralError::Shape(format!(
            "params have {} entries, gradient has {}",
            params.len(),
            g.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(NeuralError::Argument(format!("learning rate must be non-negative, got {lr}")));
    }
    let s = match direction {
        Direction::Ascent => lr,
        Direction::Descent => -lr,
    };
    axpy(s, g, params);
    Ok(())
}

/// `base / (1 + k)^power`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base: f64,
    pub power: f64,
}

impl Schedule {
    pub const fn new(base: f64, power: f64) -> Self {
        Self { base, power }
    }

    /// Low-level actor: `α_k = 0.001/(1+k)^0.8`.
    pub const fn alpha() -> Self {
        Self::new(0.001, 0.8)
    }

    /// Low-level critic and Lyapunov function: `β_k = 0.0005/(1+k)^0.9`.
    pub const fn beta() -> Self {
        Self::new(0.0005, 0.9)
    }

    /// High-level actor and critic: `γ_k = 0.0001/(1+k)`.
    pub const fn gamma() -> Self {
        Self::new(0.0001, 1.0)
    }

    /// Multiplier: `α_k^λ = 0.1/(1+k)^0.6`.
    pub const fn lambda() -> Self {
        Self::new(0.1, 0.6)
    }

    pub fn at(&self, k: u64) -> f64 {
        self.base / (1.0 + k as f64).powf(self.power)
    }
}

/// Adam, used only for the supervised warm-start regressions.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Descent step on a loss gradient.
    pub fn step(&mut self, params: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
