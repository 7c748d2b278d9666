use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in the exponential moving average.
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-channel batch normalization over the last (channel) axis.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
    pub mode: Mode,
}

#[derive(Clone, Debug)]
pub struct BnGrads<T: Scalar = f32> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

struct Stats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: Tensor::new(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::new(&[channels], T::one())?,
            eps: T::from_f64_lossy(BN_EPS),
            momentum: T::from_f64_lossy(BN_MOMENTUM),
            mode: Mode::Train,
        })
    }

    /// Identity affine transform and running statistics `(0, 1)`.
    pub fn reset(&mut self) {
        self.gamma.fill(T::one());
        self.beta.fill(T::zero());
        self.running_mean.fill(T::zero());
        self.running_var.fill(T::one());
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    fn rows(&self, x: &Tensor<T>) -> Result<usize> {
        let c = self.channels();
        match x.shape().last() {
            Some(&last) if last == c && x.rank() >= 2 => Ok(x.len() / c),
            _ => {
                let mut expected = x.shape().to_vec();
                if let Some(last) = expected.last_mut() {
                    *last = c;
                }
                Err(Error::shape(&expected, x.shape()))
            }
        }
    }

    fn batch_stats(&self, x: &Tensor<T>, rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if rows < 2 {
            return Err(Error::DegenerateBatch(rows));
        }
        let c = self.channels();
        let mut mean = vec![0.0f64; c];
        for row in x.data().chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0f64; c];
        for row in x.data().chunks_exact(c) {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v.as_f64() - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        Ok((mean, var))
    }

    fn raw_stats(&self, x: &Tensor<T>, rows: usize, mode: Mode) -> Result<(Vec<f64>, Vec<f64>)> {
        match mode {
            Mode::Train => self.batch_stats(x, rows),
            Mode::Eval => Ok((
                self.running_mean.data().iter().map(|v| v.as_f64()).collect(),
                self.running_var.data().iter().map(|v| v.as_f64()).collect(),
            )),
        }
    }

    fn finish_stats(&self, mean: Vec<f64>, var: &[f64]) -> Stats {
        let eps = self.eps.as_f64();
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Stats { mean, inv_std }
    }

    fn stats(&self, x: &Tensor<T>, rows: usize, mode: Mode) -> Result<Stats> {
        let (mean, var) = self.raw_stats(x, rows, mode)?;
        Ok(self.finish_stats(mean, &var))
    }

    fn normalize(&self, x: &Tensor<T>, stats: &Stats) -> Result<Tensor<T>> {
        let c = self.channels();
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        // Fold into y = x * scale + shift per channel.
        let scale: Vec<T> = (0..c)
            .map(|k| T::from_f64_lossy(gamma[k].as_f64() * stats.inv_std[k]))
            .collect();
        let shift: Vec<T> = (0..c)
            .map(|k| {
                T::from_f64_lossy(beta[k].as_f64() - gamma[k].as_f64() * stats.inv_std[k] * stats.mean[k])
            })
            .collect();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(c) {
            out.extend(row.iter().zip(&scale).zip(&shift).map(|((&v, &a), &b)| v * a + b));
        }
        Tensor::from_vec(x.shape(), out)
    }

    /// Normalizes `x` according to `self.mode`. Train mode also folds the
    /// batch statistics into the running averages.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = self.rows(x)?;
        let (mean, var) = self.raw_stats(x, rows, self.mode)?;
        let stats = self.finish_stats(mean, &var);
        let y = self.normalize(x, &stats)?;
        if self.mode == Mode::Train {
            let m = self.momentum;
            let keep = T::one() - m;
            for (r, &v) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                *r = m * *r + keep * T::from_f64_lossy(v);
            }
            for (r, &v) in self.running_var.data_mut().iter_mut().zip(&var) {
                *r = m * *r + keep * T::from_f64_lossy(v);
            }
        }
        Ok(y)
    }

    /// Forward pass in an explicit mode that never touches the running statistics.
    pub fn apply(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let rows = self.rows(x)?;
        let stats = self.stats(x, rows, mode)?;
        self.normalize(x, &stats)
    }

    /// Exact gradients of the forward map in the current mode.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<BnGrads<T>> {
        let rows = self.rows(x)?;
        dy.ensure_shape(x.shape())?;
        let c = self.channels();
        let stats = self.stats(x, rows, self.mode)?;

        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (xr, gr) in x.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
            for k in 0..c {
                let g = gr[k].as_f64();
                let xhat = (xr[k].as_f64() - stats.mean[k]) * stats.inv_std[k];
                sum_dy[k] += g;
                sum_dy_xhat[k] += g * xhat;
            }
        }

        let gamma: Vec<f64> = self.gamma.data().iter().map(|v| v.as_f64()).collect();
        let mut dx = Vec::with_capacity(x.len());
        match self.mode {
            Mode::Train => {
                let m = rows as f64;
                for (xr, gr) in x.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
                    for k in 0..c {
                        let xhat = (xr[k].as_f64() - stats.mean[k]) * stats.inv_std[k];
                        let v = gamma[k] * stats.inv_std[k] / m
                            * (m * gr[k].as_f64() - sum_dy[k] - xhat * sum_dy_xhat[k]);
                        dx.push(T::from_f64_lossy(v));
                    }
                }
            }
            Mode::Eval => {
                for gr in dy.data().chunks_exact(c) {
                    for k in 0..c {
                        dx.push(T::from_f64_lossy(gr[k].as_f64() * gamma[k] * stats.inv_std[k]));
                    }
                }
            }
        }

        let to_tensor = |v: Vec<f64>| Tensor::from_vec(&[c], v.into_iter().map(T::from_f64_lossy).collect());
        Ok(BnGrads {
            input: Tensor::from_vec(x.shape(), dx)?,
            gamma: to_tensor(sum_dy_xhat)?,
            beta: to_tensor(sum_dy)?,
        })
    }
}
