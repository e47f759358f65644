//! Dense layers, activations, losses, weight init, and optimizers.

use rand::Rng;

use crate::error::{GeoError, Result};
use crate::tensor::Tensor;

/// y = W x + b with W stored as [out, in].
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if weights.rank() != 2 {
        return Err(GeoError::dim("dense weights", "rank 2 [out, in]", format!("{:?}", weights.shape())));
    }
    let (n_out, n_in) = (weights.shape()[0], weights.shape()[1]);
    if input.len() != n_in {
        return Err(GeoError::dim("dense input", format!("{n_in} elements"), format!("{}", input.len())));
    }
    if bias.shape() != [n_out] {
        return Err(GeoError::dim("dense bias", format!("[{n_out}]"), format!("{:?}", bias.shape())));
    }
    let mut out = Tensor::zeros(&[n_out]);
    for o in 0..n_out {
        let mut acc = bias.data()[o] as f64;
        let row = &weights.data()[o * n_in..(o + 1) * n_in];
        for (w, x) in row.iter().zip(input.data()) {
            acc += *w as f64 * *x as f64;
        }
        out.data_mut()[o] = acc as f32;
    }
    Ok(out)
}

/// Adjoint of [`dense_forward`]: returns (grad_input, grad_weights, grad_bias).
pub fn dense_backward(input: &Tensor, weights: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n_out, n_in) = (weights.shape()[0], weights.shape()[1]);
    if input.len() != n_in || upstream.len() != n_out {
        return Err(GeoError::dim(
            "dense backward",
            format!("input {n_in}, upstream {n_out}"),
            format!("input {}, upstream {}", input.len(), upstream.len()),
        ));
    }
    let mut gin = vec![0.0f64; n_in];
    let mut gw = vec![0.0f32; n_out * n_in];
    for o in 0..n_out {
        let u = upstream.data()[o] as f64;
        for i in 0..n_in {
            gw[o * n_in + i] = (u * input.data()[i] as f64) as f32;
            gin[i] += u * weights.data()[o * n_in + i] as f64;
        }
    }
    Ok((
        Tensor::new(&[n_in], gin.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(&[n_out, n_in], gw)?,
        Tensor::new(&[n_out], upstream.data().to_vec())?,
    ))
}

pub const LEAKY_RELU_SLOPE: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    None,
}

impl Activation {
    pub fn apply(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for v in out.data_mut() {
            *v = match self {
                Activation::Relu => v.max(0.0),
                Activation::LeakyRelu => {
                    if *v > 0.0 {
                        *v
                    } else {
                        LEAKY_RELU_SLOPE * *v
                    }
                }
                Activation::Sigmoid => 1.0 / (1.0 + (-*v).exp()),
                Activation::None => *v,
            };
        }
        out
    }

    /// Chain upstream through the activation given the cached pre-activation.
    pub fn backward(&self, pre: &Tensor, upstream: &Tensor) -> Tensor {
        let mut out = upstream.clone();
        for (g, &x) in out.data_mut().iter_mut().zip(pre.data()) {
            let d = match self {
                Activation::Relu => {
                    if x > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Activation::LeakyRelu => {
                    if x > 0.0 {
                        1.0
                    } else {
                        LEAKY_RELU_SLOPE
                    }
                }
                Activation::Sigmoid => {
                    let s = 1.0 / (1.0 + (-x).exp());
                    s * (1.0 - s)
                }
                Activation::None => 1.0,
            };
            *g *= d;
        }
        out
    }
}

/// sqrt(sum (pred - target)^2) and its gradient wrt pred. The gradient at
/// pred == target is the zero vector (subgradient choice).
pub fn euclidean_loss(pred: &Tensor, target: &Tensor) -> Result<(f32, Tensor)> {
    if pred.len() != target.len() {
        return Err(GeoError::dim("euclidean_loss", format!("{} elements", pred.len()), format!("{}", target.len())));
    }
    if target.data().iter().any(|v| !v.is_finite()) {
        return Err(GeoError::Config("euclidean_loss target must be finite".into()));
    }
    let mut acc = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p as f64 - t as f64;
        acc += d * d;
    }
    let loss = acc.sqrt();
    let mut grad = Tensor::zeros(&[pred.len()]);
    if loss > 0.0 {
        for (g, (&p, &t)) in grad.data_mut().iter_mut().zip(pred.data().iter().zip(target.data())) {
            *g = ((p as f64 - t as f64) / loss) as f32;
        }
    }
    Ok((loss as f32, grad))
}

/// -log softmax(logits)[label] and its gradient wrt the logits.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<(f32, Tensor)> {
    let n = logits.len();
    if label >= n {
        return Err(GeoError::Config(format!("label {label} out of range for {n} logits")));
    }
    let max = logits.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut denom = 0.0f64;
    for &v in logits.data() {
        denom += (v as f64 - max).exp();
    }
    let log_denom = denom.ln() + max;
    let loss = log_denom - logits.data()[label] as f64;
    let mut grad = Tensor::zeros(&[n]);
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        let p = ((logits.data()[i] as f64 - max).exp() / denom) as f32;
        *g = if i == label { p - 1.0 } else { p };
    }
    Ok((loss as f32, grad))
}

/// Kaiming-uniform fill (fan-in, ReLU gain): U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform(t: &mut Tensor, fan_in: usize, rng: &mut impl Rng) {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum OptimizerConfig {
    Sgd { lr: f32, momentum: f32 },
    Adam { lr: f32, beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerConfig {
    pub fn adam(lr: f32) -> OptimizerConfig {
        OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn learning_rate(&self) -> f32 {
        match self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }
}

/// Optimizer state for a fixed list of parameter tensors; `step` must always
/// be called with params and grads in the same order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub timestep: u64,
    slot_m: Vec<Vec<f32>>,
    slot_v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Optimizer {
        Optimizer { cfg, timestep: 0, slot_m: Vec::new(), slot_v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(GeoError::Internal(format!(
                "optimizer_step: {} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.slot_m.is_empty() {
            self.slot_m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.slot_v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (p, g) in params.iter().zip(grads.iter()) {
            if p.len() != g.len() {
                return Err(GeoError::dim("optimizer_step", format!("{} elements", p.len()), format!("{}", g.len())));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(GeoError::Internal("optimizer_step: non-finite gradient".into()));
            }
        }
        self.timestep += 1;
        match self.cfg {
            OptimizerConfig::Sgd { lr, momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(self.slot_m.iter_mut()) {
                    for ((pv, &gv), mv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mv = momentum * *mv + gv;
                        *pv -= lr * *mv;
                    }
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let t = self.timestep as f64;
                let bc1 = 1.0 - (beta1 as f64).powf(t);
                let bc2 = 1.0 - (beta2 as f64).powf(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.slot_m[i], &mut self.slot_v[i]);
                    for ((pv, &gv), (mv, vv)) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let mhat = *mv as f64 / bc1;
                        let vhat = *vv as f64 / bc2;
                        *pv -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}
