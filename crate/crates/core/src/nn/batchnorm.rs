//! Per-channel batch normalization over `(N, H, W)`.

use crate::error::{Error, Result};

use super::{Mode, Real, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Values saved by the forward pass for backward and running-stat updates.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub mode: Mode,
    /// Normalized input before the affine transform.
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance (used for the running estimate).
    pub batch_var: Vec<T>,
}

fn check_channels<T: Real>(name: &str, v: &[T], c: usize) -> Result<()> {
    if v.len() != c {
        return Err(Error::shape(
            "batchnorm2d",
            format!("{c} values for {name}"),
            v.len(),
        ));
    }
    Ok(())
}

pub fn batchnorm2d_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    mode: Mode,
    epsilon: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, h, w) = input.dims4("batchnorm2d")?;
    for (name, v) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        check_channels(name, v, c)?;
    }
    let plane = h * w;
    let pop = n * plane;
    if mode == Mode::Train && pop < 2 {
        return Err(Error::invalid(
            "batchnorm2d in train mode needs at least 2 values per channel",
        ));
    }
    let x = input.data();
    let eps = T::of(epsilon);
    let count = T::of(pop as f64);

    let mut batch_mean = vec![T::zero(); c];
    let mut batch_var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let values = (0..n).flat_map(|b| {
            let off = (b * c + ch) * plane;
            x[off..off + plane].iter().copied()
        });
        let var_biased = match mode {
            Mode::Train => {
                let mean = values.clone().sum::<T>() / count;
                let var = values.map(|v| (v - mean) * (v - mean)).sum::<T>() / count;
                batch_mean[ch] = mean;
                batch_var[ch] = var * count / T::of((pop - 1) as f64);
                var
            }
            Mode::Eval => running_var[ch],
        };
        inv_std[ch] = T::one() / (var_biased + eps).sqrt();
    }

    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let mean = match mode {
                Mode::Train => batch_mean[ch],
                Mode::Eval => running_mean[ch],
            };
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let z = (x[i] - mean) * inv_std[ch];
                xhat[i] = z;
                out[i] = gamma[ch] * z + beta[ch];
            }
        }
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        BnCache {
            mode,
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
            batch_mean,
            batch_var,
        },
    ))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm2d_backward<T: Real>(
    grad_output: &Tensor<T>,
    gamma: &[T],
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    grad_output.expect_shape("batchnorm2d_backward", cache.xhat.shape())?;
    let (n, c, h, w) = grad_output.dims4("batchnorm2d_backward")?;
    check_channels("gamma", gamma, c)?;
    let plane = h * w;
    let count = T::of((n * plane) as f64);
    let dy = grad_output.data();
    let xhat = cache.xhat.data();

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] = dbeta[ch] + dy[i];
                dgamma[ch] = dgamma[ch] + dy[i] * xhat[i];
            }
        }
    }

    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma[ch] * cache.inv_std[ch];
            for i in off..off + plane {
                dx[i] = match cache.mode {
                    Mode::Train => {
                        scale * (dy[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                    }
                    Mode::Eval => scale * dy[i],
                };
            }
        }
    }
    Ok((
        Tensor::new(grad_output.shape().to_vec(), dx)?,
        dgamma,
        dbeta,
    ))
}

/// Exponential moving average of the batch statistics. No-op for eval caches.
pub fn update_running_stats<T: Real>(
    running_mean: &mut [T],
    running_var: &mut [T],
    cache: &BnCache<T>,
    momentum: f64,
) {
    if cache.mode != Mode::Train {
        return;
    }
    let m = T::of(momentum);
    let keep = T::one() - m;
    for (r, &b) in running_mean.iter_mut().zip(&cache.batch_mean) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in running_var.iter_mut().zip(&cache.batch_var) {
        *r = keep * *r + m * b;
    }
}

/// Self-contained batch-norm layer state for callers that do not keep
/// parameters in a [`super::ModelParams`].
#[derive(Debug, Clone)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            mode: Mode::Train,
        }
    }

    /// Normalizes `input`; in train mode also folds the batch statistics
    /// into the running estimates.
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        let (y, cache) = batchnorm2d_forward(
            input,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.mode,
            self.epsilon,
        )?;
        update_running_stats(
            &mut self.running_mean,
            &mut self.running_var,
            &cache,
            self.momentum,
        );
        Ok((y, cache))
    }
}
