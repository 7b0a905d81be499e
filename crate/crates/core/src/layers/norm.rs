//! Per-channel batch normalization over `[N, C, H, W]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Biased batch mean/variance; empty in inference mode.
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub train: bool,
}

fn check_affine<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let (_, c, _, _) = x.dims4()?;
    for (name, t) in [("batchnorm gamma", gamma), ("batchnorm beta", beta)] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: name,
                left: t.shape().to_vec(),
                right: vec![c],
            });
        }
    }
    Ok(c)
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4().expect("checked by caller");
    let plane = h * w;
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let v = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = v;
                y[i] = g * v + bt;
            }
        }
    }
    (Tensor::from_parts(x.shape().to_vec(), y), xhat)
}

/// Normalizes with the statistics of the batch itself.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = check_affine(x, gamma, beta)?;
    let (n, _, h, w) = x.dims4()?;
    let plane = h * w;
    let count = T::from_usize(n * plane).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x.data()[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
        mean[ch] = s / count;
        let mut sq = T::zero();
        for b in 0..n {
            for &v in &x.data()[(b * c + ch) * plane..][..plane] {
                let d = v - mean[ch];
                sq += d * d;
            }
        }
        var[ch] = sq / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (y, xhat) = normalize(x, gamma, beta, &mean, &inv_std);
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            train: true,
        },
    ))
}

/// Normalizes with fixed (running) statistics; the batch does not matter.
pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = check_affine(x, gamma, beta)?;
    for (name, t) in [
        ("batchnorm running_mean", running_mean),
        ("batchnorm running_var", running_var),
    ] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: name,
                left: t.shape().to_vec(),
                right: vec![c],
            });
        }
    }
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let (y, xhat) = normalize(x, gamma, beta, running_mean.data(), &inv_std);
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean: Vec::new(),
            batch_var: Vec::new(),
            train: false,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let count = T::from_usize(n * plane).unwrap();
    let g = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] += g[i];
                dgamma[ch] += g[i] * cache.xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            for i in off..off + plane {
                dx[i] = if cache.train {
                    scale * (g[i] - (dbeta[ch] + cache.xhat[i] * dgamma[ch]) / count)
                } else {
                    scale * g[i]
                };
            }
        }
    }
    Ok((
        Tensor::from_parts(grad_out.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    ))
}

/// Moves running statistics toward a batch: `r = m * r + (1 - m) * batch`,
/// with the unbiased variance estimate for `running_var`.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    batch_mean: &[T],
    batch_var: &[T],
    count: usize,
    momentum: T,
) {
    let correction = if count > 1 {
        T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
    } else {
        T::one()
    };
    for (r, &m) in running_mean.data_mut().iter_mut().zip(batch_mean) {
        *r = momentum * *r + (T::one() - momentum) * m;
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(batch_var) {
        *r = momentum * *r + (T::one() - momentum) * v * correction;
    }
}

/// A self-contained batch normalization layer.
#[derive(Debug, Clone)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
            momentum: T::from_f64_lossy(BN_MOMENTUM),
            epsilon: T::from_f64_lossy(BN_EPSILON),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        if train {
            let (y, cache) = batchnorm_train(x, &self.gamma, &self.beta, self.epsilon)?;
            let (n, _, h, w) = x.dims4()?;
            update_running_stats(
                &mut self.running_mean,
                &mut self.running_var,
                &cache.batch_mean,
                &cache.batch_var,
                n * h * w,
                self.momentum,
            );
            Ok(y)
        } else {
            batchnorm_infer(
                x,
                &self.gamma,
                &self.beta,
                &self.running_mean,
                &self.running_var,
                self.epsilon,
            )
            .map(|(y, _)| y)
        }
    }
}
