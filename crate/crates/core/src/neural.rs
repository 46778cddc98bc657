//! Dense neural-network core: MLP forward/backward with exact gradients, the
//! Adam optimizer, and a Gaussian-mixture output head. Everything is f64 and
//! deterministic for a fixed seed.

use base64::Engine;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::logsumexp;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("input width {got} does not match network input {expected}")]
    InputWidth { got: usize, expected: usize },
    #[error("parameter vector length {got}, spec needs {expected}")]
    ParamLength { got: usize, expected: usize },
    #[error("upstream gradient shape {got:?} does not match output shape {expected:?}")]
    UpstreamShape {
        got: (usize, usize),
        expected: (usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

/// Layer widths and activations of a dense network.
///
/// `widths = [d0, .., dL]` gives L affine layers; `activations[l]` is applied
/// after layer l. The seed fixes initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl MlpSpec {
    /// Hidden layers share `hidden` activation; the output layer is linear.
    pub fn new(widths: Vec<usize>, hidden: Activation, seed: u64) -> Self {
        assert!(widths.len() >= 2, "need at least one layer");
        assert!(widths.iter().all(|&w| w >= 1), "zero-width layer");
        let layers = widths.len() - 1;
        let mut activations = vec![hidden; layers];
        activations[layers - 1] = Activation::Linear;
        MlpSpec {
            widths,
            activations,
            seed,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_layers())
            .map(|l| self.widths[l] * self.widths[l + 1] + self.widths[l + 1])
            .sum()
    }

    /// (weight offset, bias offset) of layer `l` in the flat parameter vector.
    fn layer_offsets(&self, layer: usize) -> (usize, usize) {
        let mut offset = 0;
        for l in 0..layer {
            offset += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        (offset, offset + self.widths[layer] * self.widths[layer + 1])
    }

    /// Kaiming-style uniform fan-in initialization.
    pub fn init_params(&self) -> ParamVector {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        let mut data = vec![0.0; self.param_count()];
        for l in 0..self.num_layers() {
            let fan_in = self.widths[l] as f64;
            let w_bound = (6.0 / fan_in).sqrt();
            let b_bound = 1.0 / fan_in.sqrt();
            let (w_off, b_off) = self.layer_offsets(l);
            for slot in data[w_off..b_off].iter_mut() {
                *slot = rng.random_range(-w_bound..w_bound);
            }
            let b_end = b_off + self.widths[l + 1];
            for slot in data[b_off..b_end].iter_mut() {
                *slot = rng.random_range(-b_bound..b_bound);
            }
        }
        ParamVector { data }
    }
}

/// Flat f64 parameter vector; layout is derived from the owning `MlpSpec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros_like(spec: &MlpSpec) -> Self {
        ParamVector {
            data: vec![0.0; spec.param_count()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian f64 bytes, base64 encoded. Bit-exact round trip.
    pub fn to_base64(&self) -> String {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        base64::engine::general_purpose::STANDARD.encode(bytes)
    }

    pub fn from_base64(s: &str) -> Result<Self, String> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(|e| format!("bad base64 parameter block: {e}"))?;
        if bytes.len() % 8 != 0 {
            return Err("parameter block length not a multiple of 8".to_string());
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ParamVector { data })
    }

    fn weight_view<'a>(&'a self, spec: &MlpSpec, layer: usize) -> ArrayView2<'a, f64> {
        let (w_off, b_off) = spec.layer_offsets(layer);
        ArrayView2::from_shape(
            (spec.widths[layer], spec.widths[layer + 1]),
            &self.data[w_off..b_off],
        )
        .expect("layout invariant")
    }

    fn bias_slice<'a>(&'a self, spec: &MlpSpec, layer: usize) -> &'a [f64] {
        let (_, b_off) = spec.layer_offsets(layer);
        &self.data[b_off..b_off + spec.widths[layer + 1]]
    }
}

/// All layer activations from a forward pass; `activations[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub activations: Vec<Array2<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().unwrap()
    }
}

fn apply_activation(z: &mut Array2<f64>, act: Activation) {
    match act {
        Activation::Relu => z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Tanh => z.mapv_inplace(f64::tanh),
        Activation::Linear => {}
    }
}

/// Forward pass over a batch, keeping intermediate activations for backprop.
pub fn mlp_forward(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &Array2<f64>,
) -> Result<ForwardPass, NeuralError> {
    if input.ncols() != spec.input_width() {
        return Err(NeuralError::InputWidth {
            got: input.ncols(),
            expected: spec.input_width(),
        });
    }
    if params.len() != spec.param_count() {
        return Err(NeuralError::ParamLength {
            got: params.len(),
            expected: spec.param_count(),
        });
    }
    let mut activations = Vec::with_capacity(spec.num_layers() + 1);
    activations.push(input.clone());
    for l in 0..spec.num_layers() {
        let w = params.weight_view(spec, l);
        let b = params.bias_slice(spec, l);
        let mut z = activations[l].dot(&w);
        for mut row in z.rows_mut() {
            for (v, &bias) in row.iter_mut().zip(b) {
                *v += bias;
            }
        }
        apply_activation(&mut z, spec.activations[l]);
        activations.push(z);
    }
    Ok(ForwardPass { activations })
}

/// Reverse-mode gradients for a scalar loss, given dLoss/dOutput.
///
/// Returns the parameter gradient and the gradient with respect to the input
/// batch (needed by actor-critic updates).
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &ParamVector,
    forward: &ForwardPass,
    upstream: &Array2<f64>,
) -> Result<(ParamVector, Array2<f64>), NeuralError> {
    let out = forward.output();
    if upstream.dim() != out.dim() {
        return Err(NeuralError::UpstreamShape {
            got: upstream.dim(),
            expected: out.dim(),
        });
    }
    let mut grads = ParamVector::zeros_like(spec);
    let mut delta = upstream.clone();
    for l in (0..spec.num_layers()).rev() {
        let post = &forward.activations[l + 1];
        match spec.activations[l] {
            Activation::Relu => {
                // a = max(z, 0): a > 0 exactly where z > 0
                delta.zip_mut_with(post, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            Activation::Tanh => {
                delta.zip_mut_with(post, |d, &a| *d *= 1.0 - a * a);
            }
            Activation::Linear => {}
        }
        let prev = &forward.activations[l];
        let dw = prev.t().dot(&delta);
        let db = delta.sum_axis(Axis(0));
        let (w_off, b_off) = spec.layer_offsets(l);
        grads.data[w_off..b_off].copy_from_slice(dw.as_standard_layout().as_slice().unwrap());
        grads.data[b_off..b_off + db.len()].copy_from_slice(db.as_slice().unwrap());
        let w = params.weight_view(spec, l);
        delta = delta.dot(&w.t());
    }
    Ok((grads, delta))
}

/// Adam hyperparameters and moment state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(lr: f64, param_count: usize) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }
}

/// One Adam update with bias correction; mutates params and state in place.
pub fn adam_step(params: &mut ParamVector, grads: &ParamVector, state: &mut AdamState) {
    assert_eq!(params.len(), grads.len(), "gradient length mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state length mismatch");
    state.t += 1;
    let b1t = 1.0 - state.beta1.powi(state.t as i32);
    let b2t = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads.data[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        params.data[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
}

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 5.0;

/// Mixture parameters decoded from a raw network output row.
///
/// Layout of the raw row for k components over a d-dimensional target:
/// `[logits (k) | means (k*d) | log_stddevs (k*d)]`. Log-stddevs are clamped
/// to [-5, 5] before exponentiation.
#[derive(Debug, Clone)]
pub struct GmmHeadOutput {
    pub mixture_logits: Vec<f64>,
    pub means: Array2<f64>,
    pub log_stddevs: Array2<f64>,
}

impl GmmHeadOutput {
    pub fn raw_width(k: usize, dim: usize) -> usize {
        k + 2 * k * dim
    }

    pub fn from_raw(raw: &[f64], k: usize, dim: usize) -> Self {
        assert_eq!(raw.len(), Self::raw_width(k, dim), "raw GMM row width");
        let mixture_logits = raw[..k].to_vec();
        let means = Array2::from_shape_vec((k, dim), raw[k..k + k * dim].to_vec()).unwrap();
        let log_stddevs = Array2::from_shape_vec(
            (k, dim),
            raw[k + k * dim..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect(),
        )
        .unwrap();
        GmmHeadOutput {
            mixture_logits,
            means,
            log_stddevs,
        }
    }

    pub fn mixture_weights(&self) -> Vec<f64> {
        softmax(&self.mixture_logits)
    }

    /// Mixture mean: sum_k pi_k mu_k.
    pub fn mean(&self) -> Array1<f64> {
        let weights = self.mixture_weights();
        let mut out = Array1::zeros(self.means.ncols());
        for (ki, w) in weights.iter().enumerate() {
            out.scaled_add(*w, &self.means.row(ki));
        }
        out
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

const LN_2PI: f64 = 1.8378770664093453;

/// Negative log-likelihood of `target` under the diagonal Gaussian mixture.
pub fn gmm_nll(head: &GmmHeadOutput, target: &[f64]) -> f64 {
    let k = head.mixture_logits.len();
    let log_pi = {
        let lse = logsumexp(&head.mixture_logits);
        head.mixture_logits.iter().map(|l| l - lse).collect::<Vec<_>>()
    };
    let mut terms = Vec::with_capacity(k);
    for ki in 0..k {
        let mut log_n = 0.0;
        for (d, &x) in target.iter().enumerate() {
            let mu = head.means[[ki, d]];
            let log_sigma = head.log_stddevs[[ki, d]];
            let z = (x - mu) / log_sigma.exp();
            log_n += -0.5 * LN_2PI - log_sigma - 0.5 * z * z;
        }
        terms.push(log_pi[ki] + log_n);
    }
    -logsumexp(&terms)
}

/// NLL plus its gradient with respect to the raw head row
/// (logits, means, log-stddevs in raw layout order).
pub fn gmm_nll_grad(raw: &[f64], k: usize, dim: usize, target: &[f64]) -> (f64, Vec<f64>) {
    let head = GmmHeadOutput::from_raw(raw, k, dim);
    let alpha = head.mixture_weights();
    let log_pi: Vec<f64> = alpha.iter().map(|a| a.ln()).collect();

    let mut log_comp = Vec::with_capacity(k);
    for ki in 0..k {
        let mut log_n = 0.0;
        for (d, &x) in target.iter().enumerate() {
            let mu = head.means[[ki, d]];
            let log_sigma = head.log_stddevs[[ki, d]];
            let z = (x - mu) / log_sigma.exp();
            log_n += -0.5 * LN_2PI - log_sigma - 0.5 * z * z;
        }
        log_comp.push(log_pi[ki] + log_n);
    }
    let log_p = logsumexp(&log_comp);
    let nll = -log_p;

    // posterior responsibilities
    let beta: Vec<f64> = log_comp.iter().map(|lc| (lc - log_p).exp()).collect();

    let mut grad = vec![0.0; raw.len()];
    for ki in 0..k {
        grad[ki] = alpha[ki] - beta[ki];
    }
    for ki in 0..k {
        for d in 0..dim {
            let mu = head.means[[ki, d]];
            let log_sigma = head.log_stddevs[[ki, d]];
            let sigma2 = (2.0 * log_sigma).exp();
            let diff = target[d] - mu;
            grad[k + ki * dim + d] = -beta[ki] * diff / sigma2;
            let raw_log_sigma = raw[k + k * dim + ki * dim + d];
            // clamped log-stddev has zero gradient outside the clamp range
            let g = if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw_log_sigma) {
                beta[ki] * (1.0 - diff * diff / sigma2)
            } else {
                0.0
            };
            grad[k + k * dim + ki * dim + d] = g;
        }
    }
    (nll, grad)
}
