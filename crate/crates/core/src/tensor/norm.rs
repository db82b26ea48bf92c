use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch normalization state.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    /// Weight kept on the old running statistic at each train-mode update.
    pub momentum: f64,
    pub mode: BnMode,
}

impl BnParams {
    pub const DEFAULT_EPSILON: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: Self::DEFAULT_EPSILON,
            momentum: Self::DEFAULT_MOMENTUM,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// What the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub mode: BnMode,
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub batch_var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Per-channel mean and biased variance over (N, H, W).
pub(crate) fn channel_moments(input: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = input.shape();
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut sum = 0.0;
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            sum += input.data()[start..start + plane].iter().sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0;
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            sq += input.data()[start..start + plane]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}

/// Normalizes each channel. Train mode uses batch statistics and folds them into
/// the running averages; eval mode uses the running statistics unchanged.
pub fn batchnorm2d(input: &Tensor, p: &mut BnParams) -> Result<(Tensor, BnCache)> {
    let s = input.shape();
    if s.c != p.channels() {
        return Err(Error::dim(format!(
            "batchnorm2d: input channels (axis 1) {} != {} parameters",
            s.c,
            p.channels()
        )));
    }
    let (batch_mean, batch_var) = channel_moments(input);
    let (mean, var) = match p.mode {
        BnMode::Train => {
            for c in 0..s.c {
                p.running_mean[c] =
                    p.momentum * p.running_mean[c] + (1.0 - p.momentum) * batch_mean[c];
                p.running_var[c] =
                    p.momentum * p.running_var[c] + (1.0 - p.momentum) * batch_var[c];
            }
            (batch_mean.clone(), batch_var.clone())
        }
        BnMode::Eval => (p.running_mean.clone(), p.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.epsilon).sqrt()).collect();
    let plane = s.plane();
    let mut x_hat = vec![0.0; input.len()];
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            for i in start..start + plane {
                let xh = (input.data()[i] - mean[c]) * inv_std[c];
                x_hat[i] = xh;
                out.data_mut()[i] = p.gamma[c] * xh + p.beta[c];
            }
        }
    }
    Ok((
        out,
        BnCache {
            mode: p.mode,
            x_hat,
            inv_std,
            batch_mean,
            batch_var,
        },
    ))
}

pub fn batchnorm2d_backward(cache: &BnCache, p: &BnParams, grad_out: &Tensor) -> Result<BnGrads> {
    let s = grad_out.shape();
    if s.c != p.channels() || cache.x_hat.len() != grad_out.len() {
        return Err(Error::dim(format!(
            "batchnorm2d_backward: grad {s} does not match cached forward"
        )));
    }
    let plane = s.plane();
    let m = (s.n * plane) as f64;
    let g = grad_out.data();
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            for i in start..start + plane {
                dgamma[c] += g[i] * cache.x_hat[i];
                dbeta[c] += g[i];
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            let scale = p.gamma[c] * cache.inv_std[c];
            for i in start..start + plane {
                dx.data_mut()[i] = match cache.mode {
                    BnMode::Train => scale / m * (m * g[i] - dbeta[c] - cache.x_hat[i] * dgamma[c]),
                    BnMode::Eval => scale * g[i],
                };
            }
        }
    }
    Ok(BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}
