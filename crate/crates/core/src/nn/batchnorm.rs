use super::NnError;
use crate::par;
use crate::tensor::{lane_sum, lane_sum2, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running average in each update.
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Values per channel (`N*H*W`).
    pub count: usize,
}

/// Running statistics used at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }

    /// Exponential moving average; the variance is folded in unbiased.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let unbias = batch.count as f64 / (batch.count as f64 - 1.0);
        for (r, &m) in self.mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = T::of(momentum * r.as_f64() + (1.0 - momentum) * m);
        }
        for (r, &v) in self.var.data_mut().iter_mut().zip(&batch.var) {
            *r = T::of(momentum * r.as_f64() + (1.0 - momentum) * v * unbias);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
}

fn check_affine<T: Real>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(), NnError> {
    gamma.expect_shape("batchnorm gamma", &[c])?;
    beta.expect_shape("batchnorm beta", &[c])?;
    Ok(())
}

/// Normalizes with the batch's own per-channel mean and variance over `N*H*W`.
pub fn batchnorm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>, BatchStats), NnError> {
    let (n, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta)?;
    let hw = h * w;
    let count = n * hw;
    if count <= 1 {
        return Err(NnError::BatchTooSmall(count));
    }
    let xd = x.data();
    let plane = |s: usize, ch: usize| &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw];
    let stats = par::map_range(c, |ch| {
        let mean = (0..n).map(|s| lane_sum(plane(s, ch), |v| v)).sum::<f64>() / count as f64;
        let var = (0..n)
            .map(|s| lane_sum(plane(s, ch), |v| (v - mean) * (v - mean)))
            .sum::<f64>()
            / count as f64;
        (mean, var)
    });
    let mean: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let var: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut xhat = Tensor::zeros(x.shape());
    par::for_each_chunk_mut(xhat.data_mut(), hw, |p, out| {
        let ch = p % c;
        let (m, is) = (mean[ch], inv_std[ch]);
        for (o, v) in out.iter_mut().zip(&xd[p * hw..(p + 1) * hw]) {
            *o = T::of((v.as_f64() - m) * is);
        }
    });
    let y = affine(&xhat, c, hw, gamma, beta);
    Ok((
        y,
        BatchNormCache { xhat, inv_std },
        BatchStats { mean, var, count },
    ))
}

fn affine<T: Real>(xhat: &Tensor<T>, c: usize, hw: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let mut y = xhat.clone();
    par::for_each_chunk_mut(y.data_mut(), hw, |p, out| {
        let ch = p % c;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        out.iter_mut().for_each(|v| *v = g * *v + b);
    });
    y
}

/// Normalizes with running statistics; a per-pixel affine map.
pub fn batchnorm_infer<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
) -> Result<Tensor<T>, NnError> {
    let (_, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta)?;
    running.mean.expect_shape("running mean", &[c])?;
    running.var.expect_shape("running var", &[c])?;
    let hw = h * w;
    let scale: Vec<f64> = (0..c)
        .map(|ch| gamma.data()[ch].as_f64() / (running.var.data()[ch].as_f64() + BN_EPS).sqrt())
        .collect();
    let shift: Vec<f64> = (0..c)
        .map(|ch| beta.data()[ch].as_f64() - scale[ch] * running.mean.data()[ch].as_f64())
        .collect();
    let mut y = x.clone();
    par::for_each_chunk_mut(y.data_mut(), hw, |p, out| {
        let ch = p % c;
        let (s, t) = (T::of(scale[ch]), T::of(shift[ch]));
        out.iter_mut().for_each(|v| *v = s * *v + t);
    });
    Ok(y)
}

/// Returns `(dx, dgamma, dbeta)` for a training-mode forward pass.
pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), NnError> {
    let (n, c, h, w) = cache.xhat.dims4()?;
    dy.expect_shape("batchnorm output grad", cache.xhat.shape())?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let (xh, g) = (cache.xhat.data(), dy.data());
    let sums = par::map_range(c, |ch| {
        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
        for s in 0..n {
            let off = (s * c + ch) * hw;
            sg += lane_sum(&g[off..off + hw], |v| v);
            sgx += lane_sum2(&g[off..off + hw], &xh[off..off + hw], |a, b| a * b);
        }
        (sg, sgx)
    });
    let mut dx = Tensor::zeros(cache.xhat.shape());
    par::for_each_chunk_mut(dx.data_mut(), hw, |p, out| {
        let ch = p % c;
        let (sg, sgx) = sums[ch];
        let k = gamma.data()[ch].as_f64() * cache.inv_std[ch] / m;
        for ((o, gv), xv) in out.iter_mut().zip(&g[p * hw..(p + 1) * hw]).zip(&xh[p * hw..(p + 1) * hw]) {
            *o = T::of(k * (m * gv.as_f64() - sg - xv.as_f64() * sgx));
        }
    });
    let dgamma = Tensor::from_vec(&[c], sums.iter().map(|s| T::of(s.1)).collect()).expect("c");
    let dbeta = Tensor::from_vec(&[c], sums.iter().map(|s| T::of(s.0)).collect()).expect("c");
    Ok((dx, dgamma, dbeta))
}
