use super::{Real, Tensor};
use crate::error::{Result, ZipError};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Real> RunningStats<T> {
    /// Stats that must see a training batch before eval mode is allowed.
    pub fn uninitialized(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }

    /// Zero mean, unit variance, usable in eval mode immediately.
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            initialized: true,
            ..Self::uninitialized(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Debug)]
pub struct BnCache<T: Real> {
    mode: BnMode,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BnGrads<T: Real> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Per-channel batch normalization over `(N, H, W)`. Train mode normalizes by
/// batch statistics and folds them into `state`; eval mode reads `state`.
pub fn batchnorm2d<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut RunningStats<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, h, w) = input.dims4()?;
    if state.channels() != c || gamma.len() != c || beta.len() != c {
        return Err(ZipError::shape("batchnorm2d", input.shape(), &[state.channels()]));
    }
    let plane = h * w;
    let count = n * plane;
    if count == 0 {
        return Err(ZipError::shape("batchnorm2d", input.shape(), &[c]));
    }
    let x = input.data();
    let eps = T::from_f64(BN_EPS);
    let (mean, var) = match mode {
        BnMode::Eval => {
            if !state.initialized {
                return Err(ZipError::UninitializedStats);
            }
            (state.mean.clone(), state.var.clone())
        }
        BnMode::Train => {
            let inv_count = T::one() / T::from_f64(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    s += x[off..off + plane].iter().copied().sum::<T>();
                }
                let mu = s * inv_count;
                let mut sq = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    sq += x[off..off + plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
                mean[ch] = mu;
                var[ch] = sq * inv_count;
            }
            let m = T::from_f64(BN_MOMENTUM);
            let unbias = if count > 1 {
                T::from_f64(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            for ch in 0..c {
                state.mean[ch] = m * state.mean[ch] + (T::one() - m) * mean[ch];
                state.var[ch] = m * state.var[ch] + (T::one() - m) * var[ch] * unbias;
            }
            state.initialized = true;
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (g, bt, mu, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in off..off + plane {
                let xh = (x[i] - mu) * is;
                xhat[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), out)?,
        BnCache {
            mode,
            xhat,
            inv_std,
            shape: input.shape().to_vec(),
        },
    ))
}

pub fn batchnorm2d_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(ZipError::shape("batchnorm2d_backward", grad_out.shape(), &cache.shape));
    }
    let (n, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let count = T::from_f64((n * plane) as f64);
    let dy = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += dy[i] * cache.xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let g = gamma.data()[ch];
            let is = cache.inv_std[ch];
            match cache.mode {
                BnMode::Eval => {
                    for i in off..off + plane {
                        dx[i] = dy[i] * g * is;
                    }
                }
                BnMode::Train => {
                    // dxhat = dy * g; sums of dxhat and dxhat*xhat are g*dbeta, g*dgamma
                    let scale = g * is / count;
                    for i in off..off + plane {
                        dx[i] = scale * (count * dy[i] - dbeta[ch] - cache.xhat[i] * dgamma[ch]);
                    }
                }
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::from_vec(grad_out.shape(), dx)?,
        gamma: Tensor::from_vec(&[c], dgamma)?,
        beta: Tensor::from_vec(&[c], dbeta)?,
    })
}
