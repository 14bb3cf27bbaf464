use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Per-channel batch normalization state.
///
/// `momentum` follows the convention `running = (1 - m) * running + m * batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
}

/// Biased per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Keeps channels `keep` of every per-channel vector.
    pub fn select(&self, keep: &[usize]) -> Self {
        BatchNormParams {
            gamma: self.gamma.select(0, keep),
            beta: self.beta.select(0, keep),
            running_mean: self.running_mean.select(0, keep),
            running_var: self.running_var.select(0, keep),
            momentum: self.momentum,
            eps: self.eps,
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum as f64;
        for (r, &s) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = ((1.0 - m) * *r as f64 + m * s) as f32;
        }
        for (r, &s) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = ((1.0 - m) * *r as f64 + m * s) as f32;
        }
    }

    fn check(&self, c: usize) -> Result<()> {
        let n = self.gamma.len();
        if [&self.beta, &self.running_mean, &self.running_var]
            .iter()
            .any(|t| t.len() != n)
        {
            return Err(Error::structural(
                "batchnorm",
                "per-channel vectors differ in length",
            ));
        }
        if c != n {
            return Err(Error::structural(
                "batchnorm",
                format!("input has {c} channels, parameters have {n}"),
            ));
        }
        Ok(())
    }
}

fn batch_stats(input: &Tensor) -> Result<BatchStats> {
    let (n, c, h, w) = input.dims4("batchnorm input")?;
    let plane = h * w;
    let m = n * plane;
    if m < 2 {
        return Err(Error::structural(
            "batchnorm",
            "train mode needs at least two values per channel",
        ));
    }
    let x = input.data();
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for ch in 0..c {
        let mut s = 0f64;
        for b in 0..n {
            s += x[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let mu = s / m as f64;
        let mut q = 0f64;
        for b in 0..n {
            q += x[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|&v| (v as f64 - mu).powi(2))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = q / m as f64;
    }
    Ok(BatchStats { mean, var })
}

/// Mean and inverse standard deviation used to normalize each channel.
fn normalizer(
    input: &Tensor,
    params: &BatchNormParams,
    mode: Mode,
) -> Result<(Vec<f64>, Vec<f64>, Option<BatchStats>)> {
    match mode {
        Mode::Train => {
            let stats = batch_stats(input)?;
            let inv = stats
                .var
                .iter()
                .map(|v| 1.0 / (v + params.eps as f64).sqrt())
                .collect();
            Ok((stats.mean.clone(), inv, Some(stats)))
        }
        Mode::Eval => {
            let mean = params
                .running_mean
                .data()
                .iter()
                .map(|&v| v as f64)
                .collect();
            let inv = params
                .running_var
                .data()
                .iter()
                .map(|&v| 1.0 / (v as f64 + params.eps as f64).sqrt())
                .collect();
            Ok((mean, inv, None))
        }
    }
}

/// Normalizes without touching `params`; returns the batch statistics in train mode.
pub fn batchnorm_apply(
    input: &Tensor,
    params: &BatchNormParams,
    mode: Mode,
) -> Result<(Tensor, Option<BatchStats>)> {
    let (n, c, h, w) = input.dims4("batchnorm input")?;
    params.check(c)?;
    let (mean, inv, stats) = normalizer(input, params, mode)?;
    let plane = h * w;
    let gamma = params.gamma.data();
    let beta = params.beta.data();
    let mut out = input.clone();
    for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = idx % c;
        let (mu, s, g, b) = (mean[ch], inv[ch], gamma[ch] as f64, beta[ch] as f64);
        for v in chunk.iter_mut() {
            *v = (g * (*v as f64 - mu) * s + b) as f32;
        }
    }
    debug_assert_eq!(out.len(), n * c * plane);
    out.debug_assert_finite("batchnorm_forward");
    Ok((out, stats))
}

/// Normalizes `input`; in train mode also folds the batch statistics into
/// the running estimates.
pub fn batchnorm_forward(
    input: &Tensor,
    params: &mut BatchNormParams,
    mode: Mode,
) -> Result<Tensor> {
    let (out, stats) = batchnorm_apply(input, params, mode)?;
    if let Some(stats) = stats {
        params.update_running(&stats);
    }
    Ok(out)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(
    input: &Tensor,
    params: &BatchNormParams,
    grad_out: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = input.dims4("batchnorm input")?;
    params.check(c)?;
    if grad_out.shape() != input.shape() {
        return Err(Error::structural(
            "batchnorm",
            format!(
                "grad_out shape {:?} != input shape {:?}",
                grad_out.shape(),
                input.shape()
            ),
        ));
    }
    let (mean, inv, _) = normalizer(input, params, mode)?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let x = input.data();
    let gy = grad_out.data();

    let mut dgamma = vec![0f64; c];
    let mut dbeta = vec![0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xhat = (x[i] as f64 - mean[ch]) * inv[ch];
                dgamma[ch] += gy[i] as f64 * xhat;
                dbeta[ch] += gy[i] as f64;
            }
        }
    }

    let gamma = params.gamma.data();
    let mut dx = vec![0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let g = gamma[ch] as f64;
            for i in off..off + plane {
                dx[i] = match mode {
                    Mode::Eval => (gy[i] as f64 * g * inv[ch]) as f32,
                    Mode::Train => {
                        let xhat = (x[i] as f64 - mean[ch]) * inv[ch];
                        (g * inv[ch] / m * (m * gy[i] as f64 - dbeta[ch] - xhat * dgamma[ch]))
                            as f32
                    }
                };
            }
        }
    }

    let dx = Tensor::from_vec(input.shape(), dx)?;
    let dgamma = Tensor::from_vec(&[c], dgamma.into_iter().map(|v| v as f32).collect())?;
    let dbeta = Tensor::from_vec(&[c], dbeta.into_iter().map(|v| v as f32).collect())?;
    dx.debug_assert_finite("batchnorm_backward");
    Ok((dx, dgamma, dbeta))
}
