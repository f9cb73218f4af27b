//! Minimal dense-network substrate: forward/backward with optional low-rank
//! adapters on every weight matrix, AdamW with decoupled decay, gradient-norm
//! clipping, and a finite-difference gradient checker.
//!
//! Parameters are flat `Vec<f64>`s laid out per layer as the row-major
//! `out x in` weight block followed by the bias. Adapters add factors
//! `A (out x r)` and `B (in x r)` per weight matrix with effective weight
//! `W + scale * A * B^T`; `B` starts at zero so an adapted net is exactly the
//! base net until training moves it.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input length {got} does not match first layer width {want}")]
    InputShape { got: usize, want: usize },
    #[error("upstream gradient length {got} does not match output width {want}")]
    UpstreamShape { got: usize, want: usize },
    #[error("parameter/gradient length mismatch ({params} vs {grads})")]
    LengthMismatch { params: usize, grads: usize },
    #[error("non-finite gradient at index {index}")]
    DivergedGradient { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Silu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// Fully connected network; hidden layers use `activation`, the final layer
/// is linear.
#[derive(Debug, Clone)]
pub struct DenseNet {
    widths: Vec<usize>,
    activation: Activation,
    pub params: Vec<f64>,
}

impl DenseNet {
    pub fn zeros(widths: Vec<usize>, activation: Activation) -> Self {
        assert!(widths.len() >= 2, "need at least input and output layer");
        assert!(widths.iter().all(|&w| w > 0), "layer widths must be positive");
        let n: usize = Self::param_count(&widths);
        Self {
            widths,
            activation,
            params: vec![0.0; n],
        }
    }

    /// Weights drawn from a zero-mean Gaussian scaled by `1/sqrt(fan_in)`,
    /// biases zero.
    pub fn random(widths: Vec<usize>, activation: Activation, rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(widths, activation);
        let mut offset = 0;
        for l in 0..net.n_layers() {
            let (w_in, w_out) = (net.widths[l], net.widths[l + 1]);
            let std = 1.0 / (w_in as f64).sqrt();
            for i in 0..w_out * w_in {
                net.params[offset + i] = gaussian(rng) * std;
            }
            offset += w_out * w_in + w_out;
        }
        net
    }

    fn param_count(widths: &[usize]) -> usize {
        widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Offset of layer `l`'s weight block in the flat parameter vector.
    fn layer_offset(&self, layer: usize) -> usize {
        self.widths
            .windows(2)
            .take(layer)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn forward(
        &self,
        adapter: Option<&LowRankAdapter>,
        input: &[f64],
    ) -> Result<Vec<f64>, NnError> {
        if input.len() != self.input_width() {
            return Err(NnError::InputShape {
                got: input.len(),
                want: self.input_width(),
            });
        }
        let mut h = input.to_vec();
        for l in 0..self.n_layers() {
            h = self.layer_forward(adapter, l, &h);
            if l + 1 < self.n_layers() {
                for z in &mut h {
                    *z = self.activation.apply(*z);
                }
            }
        }
        Ok(h)
    }

    fn layer_forward(&self, adapter: Option<&LowRankAdapter>, layer: usize, h: &[f64]) -> Vec<f64> {
        let (w_in, w_out) = (self.widths[layer], self.widths[layer + 1]);
        let base = self.layer_offset(layer);
        let weights = &self.params[base..base + w_out * w_in];
        let biases = &self.params[base + w_out * w_in..base + w_out * w_in + w_out];
        let mut z = vec![0.0; w_out];
        for o in 0..w_out {
            let row = &weights[o * w_in..(o + 1) * w_in];
            let mut acc = biases[o];
            for i in 0..w_in {
                acc += row[i] * h[i];
            }
            z[o] = acc;
        }
        if let Some(ad) = adapter {
            // y += scale * A (B^T h)
            let t = ad.project_input(layer, h);
            ad.expand_output(layer, &t, &mut z);
        }
        z
    }

    /// Reverse-mode gradient of `upstream . output` with respect to the
    /// trainable parameters: the adapter's when one is present (base frozen),
    /// otherwise the net's own.
    pub fn backward(
        &self,
        adapter: Option<&LowRankAdapter>,
        input: &[f64],
        upstream: &[f64],
    ) -> Result<Vec<f64>, NnError> {
        let n_train = adapter.map_or(self.n_params(), |a| a.n_params());
        let mut grad = vec![0.0; n_train];
        self.backward_accumulate(adapter, input, upstream, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Accumulates `scale * d(upstream . output)/d(trainable)` into `grad`,
    /// and returns the forward output for reuse.
    pub fn backward_accumulate(
        &self,
        adapter: Option<&LowRankAdapter>,
        input: &[f64],
        upstream: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<Vec<f64>, NnError> {
        if input.len() != self.input_width() {
            return Err(NnError::InputShape {
                got: input.len(),
                want: self.input_width(),
            });
        }
        if upstream.len() != self.output_width() {
            return Err(NnError::UpstreamShape {
                got: upstream.len(),
                want: self.output_width(),
            });
        }

        // Forward pass caching pre-activations and layer inputs.
        let n_layers = self.n_layers();
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut preacts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut h = input.to_vec();
        for l in 0..n_layers {
            inputs.push(h.clone());
            let z = self.layer_forward(adapter, l, &h);
            preacts.push(z.clone());
            h = z;
            if l + 1 < n_layers {
                for v in &mut h {
                    *v = self.activation.apply(*v);
                }
            }
        }
        let output = h;

        // Backward pass.
        let mut delta: Vec<f64> = upstream.iter().map(|u| u * scale).collect();
        for l in (0..n_layers).rev() {
            let (w_in, w_out) = (self.widths[l], self.widths[l + 1]);
            let base = self.layer_offset(l);
            let h_in = &inputs[l];

            match adapter {
                Some(ad) => {
                    // dA = delta (x) (B^T h), dB = h (x) (A^T delta), both times scale.
                    let t = ad.project_input(l, h_in);
                    let s = ad.project_output(l, &delta);
                    ad.accumulate_grads(l, &delta, h_in, &t, &s, grad);
                }
                None => {
                    for o in 0..w_out {
                        let row = base + o * w_in;
                        for i in 0..w_in {
                            grad[row + i] += delta[o] * h_in[i];
                        }
                        grad[base + w_out * w_in + o] += delta[o];
                    }
                }
            }

            if l > 0 {
                // delta_{l-1} = (W_eff^T delta) * act'(z_{l-1})
                let weights = &self.params[base..base + w_out * w_in];
                let mut prev = vec![0.0; w_in];
                for o in 0..w_out {
                    let row = &weights[o * w_in..(o + 1) * w_in];
                    let d = delta[o];
                    for i in 0..w_in {
                        prev[i] += row[i] * d;
                    }
                }
                if let Some(ad) = adapter {
                    let s = ad.project_output(l, &delta);
                    ad.backpropagate_input(l, &s, &mut prev);
                }
                let z_prev = &preacts[l - 1];
                for i in 0..w_in {
                    prev[i] *= self.activation.derivative(z_prev[i]);
                }
                delta = prev;
            }
        }
        Ok(output)
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Low-rank factors added to every weight matrix of a [`DenseNet`]; biases
/// stay unadapted. Layout per layer: `A` row-major (`out x r`), then `B`
/// row-major (`in x r`).
#[derive(Debug, Clone)]
pub struct LowRankAdapter {
    rank: usize,
    scale: f64,
    dims: Vec<(usize, usize)>,
    pub params: Vec<f64>,
}

impl LowRankAdapter {
    /// `A ~ N(0, 0.02^2)`, `B = 0`: the adapted net equals the base exactly
    /// at initialization.
    pub fn init(net: &DenseNet, rank: usize, scale: f64, rng: &mut impl Rng) -> Self {
        assert!(rank > 0, "rank must be positive");
        let dims: Vec<(usize, usize)> = net
            .widths()
            .windows(2)
            .map(|w| (w[1], w[0]))
            .collect();
        let n: usize = dims.iter().map(|&(o, i)| (o + i) * rank).sum();
        let mut params = vec![0.0; n];
        let mut offset = 0;
        for &(o, _i) in &dims {
            for p in params[offset..offset + o * rank].iter_mut() {
                *p = gaussian(rng) * 0.02;
            }
            offset += o * rank;
            offset += _i * rank; // B block stays zero
        }
        Self {
            rank,
            scale,
            dims,
            params,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.dims[..layer]
            .iter()
            .map(|&(o, i)| (o + i) * self.rank)
            .sum()
    }

    fn blocks(&self, layer: usize) -> (&[f64], &[f64]) {
        let (o, i) = self.dims[layer];
        let base = self.layer_offset(layer);
        let a = &self.params[base..base + o * self.rank];
        let b = &self.params[base + o * self.rank..base + (o + i) * self.rank];
        (a, b)
    }

    /// `t = B^T h`, length `rank`.
    fn project_input(&self, layer: usize, h: &[f64]) -> Vec<f64> {
        let (_, b) = self.blocks(layer);
        let (_, w_in) = self.dims[layer];
        let mut t = vec![0.0; self.rank];
        for i in 0..w_in {
            let row = &b[i * self.rank..(i + 1) * self.rank];
            let hi = h[i];
            if hi != 0.0 {
                for r in 0..self.rank {
                    t[r] += row[r] * hi;
                }
            }
        }
        t
    }

    /// `s = A^T delta`, length `rank`.
    fn project_output(&self, layer: usize, delta: &[f64]) -> Vec<f64> {
        let (a, _) = self.blocks(layer);
        let (w_out, _) = self.dims[layer];
        let mut s = vec![0.0; self.rank];
        for o in 0..w_out {
            let row = &a[o * self.rank..(o + 1) * self.rank];
            let d = delta[o];
            for r in 0..self.rank {
                s[r] += row[r] * d;
            }
        }
        s
    }

    /// `z += scale * A t`.
    fn expand_output(&self, layer: usize, t: &[f64], z: &mut [f64]) {
        let (a, _) = self.blocks(layer);
        let (w_out, _) = self.dims[layer];
        for o in 0..w_out {
            let row = &a[o * self.rank..(o + 1) * self.rank];
            let mut acc = 0.0;
            for r in 0..self.rank {
                acc += row[r] * t[r];
            }
            z[o] += self.scale * acc;
        }
    }

    /// `prev += scale * B s` (transpose path of `expand_output`).
    fn backpropagate_input(&self, layer: usize, s: &[f64], prev: &mut [f64]) {
        let (_, b) = self.blocks(layer);
        let (_, w_in) = self.dims[layer];
        for i in 0..w_in {
            let row = &b[i * self.rank..(i + 1) * self.rank];
            let mut acc = 0.0;
            for r in 0..self.rank {
                acc += row[r] * s[r];
            }
            prev[i] += self.scale * acc;
        }
    }

    fn accumulate_grads(
        &self,
        layer: usize,
        delta: &[f64],
        h: &[f64],
        t: &[f64],
        s: &[f64],
        grad: &mut [f64],
    ) {
        let (w_out, w_in) = self.dims[layer];
        let base = self.layer_offset(layer);
        for o in 0..w_out {
            let row = base + o * self.rank;
            let d = self.scale * delta[o];
            for r in 0..self.rank {
                grad[row + r] += d * t[r];
            }
        }
        let b_base = base + w_out * self.rank;
        for i in 0..w_in {
            let row = b_base + i * self.rank;
            let hi = self.scale * h[i];
            for r in 0..self.rank {
                grad[row + r] += hi * s[r];
            }
        }
    }
}

/// AdamW moment estimates plus step counter.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update: decoupled weight decay applied directly to the
/// parameters, then bias-corrected moment update.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), NnError> {
    if params.len() != grads.len() {
        return Err(NnError::LengthMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NnError::DivergedGradient { index });
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        if weight_decay != 0.0 {
            params[i] *= 1.0 - lr * weight_decay;
        }
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Scales the gradient to `max_norm` when its L2 norm exceeds it; returns the
/// pre-clip norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= factor;
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central-difference check of `analytic` against `loss` around `params`.
///
/// When `max_coords` truncates the sweep, coordinates are chosen by a seeded
/// shuffle so reports stay reproducible. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-4)`; the floor keeps near-zero coordinates
/// from dominating with rounding noise.
pub fn grad_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    let n = params.len();
    let coords: Vec<usize> = match max_coords {
        Some(k) if k < n => {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            order.truncate(k);
            order
        }
        _ => (0..n).collect(),
    };

    let mut buf = params.to_vec();
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for &i in &coords {
        let orig = buf[i];
        buf[i] = orig + step;
        let up = loss(&buf);
        buf[i] = orig - step;
        let down = loss(&buf);
        buf[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        checked: coords.len(),
        tolerance,
        passed: max_rel_err <= tolerance,
    }
}
