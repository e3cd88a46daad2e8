//! One-hidden-layer perceptron `y = box(σ(W2 · relu(W1 · x̃ + b1) + b2))`
//! with hand-written reverse mode and Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::opf_model::{apply_box, OpfModel, SplitGradient};
use crate::powerflow::{PfState, Sensitivity};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Weights and biases. Also used for gradients and Adam moments, which
/// share the shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub dim_in: usize,
    pub hidden: usize,
    pub dim_out: usize,
    /// `hidden × dim_in`, row-major
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `dim_out × hidden`, row-major
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(dim_in: usize, hidden: usize, dim_out: usize) -> Self {
        MlpParams {
            dim_in,
            hidden,
            dim_out,
            w1: vec![0.0; hidden * dim_in],
            b1: vec![0.0; hidden],
            w2: vec![0.0; dim_out * hidden],
            b2: vec![0.0; dim_out],
        }
    }

    /// Uniform He initialization `U(±√(6 / fan_in))`, zero biases.
    pub fn init(dim_in: usize, hidden: usize, dim_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dim_in, hidden, dim_out);
        let a1 = (6.0 / dim_in as f64).sqrt();
        for w in &mut p.w1 {
            *w = rng.random_range(-a1..a1);
        }
        let a2 = (6.0 / hidden as f64).sqrt();
        for w in &mut p.w2 {
            *w = rng.random_range(-a2..a2);
        }
        p
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        (self.dim_in, self.hidden, self.dim_out) == (other.dim_in, other.hidden, other.dim_out)
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w2)
            .chain(&mut self.b2)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }
}

/// Per-component standardization of the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputScaler {
    pub fn identity(dim: usize) -> Self {
        InputScaler {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean and standard deviation; a zero deviation becomes 1.
    pub fn fit(samples: &[Vec<f64>]) -> Self {
        let dim = samples.first().map_or(0, Vec::len);
        let n = samples.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        InputScaler { mean, std }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub x_scaled: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out_pre: Vec<f64>,
    pub beta: Vec<f64>,
    pub y: Vec<f64>,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Network, input scaling and per-output boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub params: MlpParams,
    pub scaler: InputScaler,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Mlp {
    pub fn new(params: MlpParams, scaler: InputScaler, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(scaler.mean.len(), params.dim_in);
        assert_eq!(lo.len(), params.dim_out);
        assert_eq!(hi.len(), params.dim_out);
        Mlp { params, scaler, lo, hi }
    }

    pub fn forward(&self, x: &[f64]) -> ForwardTrace {
        let p = &self.params;
        let x_scaled = self.scaler.transform(x);
        let hidden_pre: Vec<f64> = (0..p.hidden)
            .map(|j| {
                let row = &p.w1[j * p.dim_in..(j + 1) * p.dim_in];
                p.b1[j] + row.iter().zip(&x_scaled).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        let hidden: Vec<f64> = hidden_pre.iter().map(|&t| t.max(0.0)).collect();
        let out_pre: Vec<f64> = (0..p.dim_out)
            .map(|k| {
                let row = &p.w2[k * p.hidden..(k + 1) * p.hidden];
                p.b2[k] + row.iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        let beta: Vec<f64> = out_pre.iter().map(|&t| sigmoid(t)).collect();
        let y = (0..p.dim_out)
            .map(|k| apply_box(beta[k], self.lo[k], self.hi[k]))
            .collect();
        ForwardTrace {
            x_scaled,
            hidden_pre,
            hidden,
            out_pre,
            beta,
            y,
        }
    }

    /// Parameter gradients for `dL/dy`.
    pub fn backward(&self, trace: &ForwardTrace, dl_dy: &[f64]) -> MlpParams {
        let p = &self.params;
        let mut g = MlpParams::zeros(p.dim_in, p.hidden, p.dim_out);
        let d_out: Vec<f64> = (0..p.dim_out)
            .map(|k| {
                let b = trace.beta[k];
                dl_dy[k] * (self.lo[k] - self.hi[k]) * b * (1.0 - b)
            })
            .collect();
        let mut d_hidden = vec![0.0; p.hidden];
        for (k, &d) in d_out.iter().enumerate() {
            g.b2[k] = d;
            if d == 0.0 {
                continue;
            }
            let row = k * p.hidden;
            for j in 0..p.hidden {
                g.w2[row + j] = d * trace.hidden[j];
                d_hidden[j] += d * p.w2[row + j];
            }
        }
        for j in 0..p.hidden {
            if trace.hidden_pre[j] <= 0.0 {
                continue;
            }
            let d = d_hidden[j];
            g.b1[j] = d;
            let row = j * p.dim_in;
            for (i, &xi) in trace.x_scaled.iter().enumerate() {
                g.w1[row + i] = d * xi;
            }
        }
        g
    }
}

/// Total `dL/dy` when the loss also depends on `z1` and `z2`:
/// `dL/dy + (dz1/dy)ᵀ dL/dz1 + (dz2/dy)ᵀ dL/dz2`, with `z2` reached through
/// the full voltage state.
pub fn total_y_gradient(
    opf: &OpfModel,
    state: &PfState,
    sensitivity: &Sensitivity,
    grad: &SplitGradient,
) -> Vec<f64> {
    let layout = opf.layout();
    let (dv, dtheta) = opf.z2_vjp(&state.v, &state.theta, &grad.dz2);
    let (dy_state, dz1_state) = layout.split_state_gradient(&dv, &dtheta);
    let dz1: Vec<f64> = grad.dz1.iter().zip(&dz1_state).map(|(a, b)| a + b).collect();
    let through_pf = sensitivity.apply_transpose(&dz1);
    grad.dy
        .iter()
        .zip(&dy_state)
        .zip(&through_pf)
        .map(|((a, b), c)| a + b + c)
        .collect()
}

/// Parameter gradients of a loss over `(y, z1, z2)`.
pub fn chain_total_gradient(
    mlp: &Mlp,
    trace: &ForwardTrace,
    opf: &OpfModel,
    state: &PfState,
    sensitivity: &Sensitivity,
    grad: &SplitGradient,
) -> MlpParams {
    mlp.backward(trace, &total_y_gradient(opf, state, sensitivity, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: MlpParams,
    pub v: MlpParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: &MlpParams, config: AdamConfig) -> Self {
        let zeros = MlpParams::zeros(shape.dim_in, shape.hidden, shape.dim_out);
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params`.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams) {
        assert!(params.same_shape(grads) && params.same_shape(&self.m));
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let corr1 = 1.0 - c.beta1.powi(t);
        let corr2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params
            .values_mut()
            .zip(grads.values())
            .zip(self.m.values_mut())
            .zip(self.v.values_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

/// What the network's outputs mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    /// `y` of the variable split; the rest comes from a power flow
    Split,
    /// Magnitudes then angles at every bus
    Voltage,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint is inconsistent: {0}")]
    Shape(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub head: OutputHead,
    pub case_checksum: String,
    pub seed: u64,
    pub mlp: Mlp,
}

impl Checkpoint {
    pub fn new(head: OutputHead, case_checksum: String, seed: u64, mlp: Mlp) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            head,
            case_checksum,
            seed,
            mlp,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: ck.version });
        }
        let p = &ck.mlp.params;
        let shapes_ok = p.w1.len() == p.hidden * p.dim_in
            && p.b1.len() == p.hidden
            && p.w2.len() == p.dim_out * p.hidden
            && p.b2.len() == p.dim_out
            && ck.mlp.scaler.mean.len() == p.dim_in
            && ck.mlp.scaler.std.len() == p.dim_in
            && ck.mlp.lo.len() == p.dim_out
            && ck.mlp.hi.len() == p.dim_out;
        if !shapes_ok {
            return Err(CheckpointError::Shape("parameter lengths do not match dimensions".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
