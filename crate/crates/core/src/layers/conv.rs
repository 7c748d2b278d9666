use rand::Rng;

use super::glorot_fill;
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Spatial kernel size. Every convolution in the network is 3x3.
pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// 3x3 convolution, stride 1, one pixel of zero padding, NHWC layout.
///
/// Computes cross-correlation (no kernel flip). Weights are stored as
/// `[kh, kw, c_in, c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T: Scalar = f32> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// Zero weights and bias.
    pub fn new(in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(Conv2d {
            weight: Tensor::zeros(&[KERNEL, KERNEL, in_channels, out_channels])?,
            bias: Tensor::zeros(&[out_channels])?,
        })
    }

    /// Glorot-uniform weights with `fan_in = 9 * c_in`, `fan_out = 9 * c_out`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut conv = Self::new(in_channels, out_channels)?;
        conv.reinit_glorot(rng);
        Ok(conv)
    }

    pub fn reinit_glorot<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (cin, cout) = (self.in_channels(), self.out_channels());
        glorot_fill(&mut self.weight, TAPS * cin, TAPS * cout, rng);
        self.bias.fill(T::zero());
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<[usize; 4]> {
        match *x.shape() {
            [n, h, w, c] if c == self.in_channels() => Ok([n, h, w, c]),
            _ => {
                let mut expected = x.shape().to_vec();
                if expected.len() == 4 {
                    expected[3] = self.in_channels();
                }
                Err(Error::shape(&expected, x.shape()))
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, h, w, cin] = self.check_input(x)?;
        let cout = self.out_channels();
        let rows = n * h * w;
        let cols = im2col(x.data(), n, h, w, cin);
        let mut out = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            out.extend_from_slice(self.bias.data());
        }
        gemm(
            MatRef::new(&cols, rows, TAPS * cin),
            MatRef::new(self.weight.data(), TAPS * cin, cout),
            T::one(),
            &mut out,
        );
        Tensor::from_vec(&[n, h, w, cout], out)
    }

    /// Gradients of the forward map at `x` given the upstream gradient `dy`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<ConvGrads<T>> {
        self.backward_with(x, dy, true)
    }

    /// As [`Conv2d::backward`]; skips the input gradient when `input_grad` is false.
    pub fn backward_with(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        input_grad: bool,
    ) -> Result<ConvGrads<T>> {
        let [n, h, w, cin] = self.check_input(x)?;
        let cout = self.out_channels();
        dy.ensure_shape(&[n, h, w, cout])?;
        let rows = n * h * w;
        let cols = im2col(x.data(), n, h, w, cin);

        let mut dw = vec![T::zero(); TAPS * cin * cout];
        gemm(
            MatRef::new(&cols, rows, TAPS * cin).t(),
            MatRef::new(dy.data(), rows, cout),
            T::zero(),
            &mut dw,
        );
        let mut db = vec![T::zero(); cout];
        for row in dy.data().chunks_exact(cout) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }

        let input = if input_grad {
            let mut dcols = vec![T::zero(); rows * TAPS * cin];
            gemm(
                MatRef::new(dy.data(), rows, cout),
                MatRef::new(self.weight.data(), TAPS * cin, cout).t(),
                T::zero(),
                &mut dcols,
            );
            Some(Tensor::from_vec(
                &[n, h, w, cin],
                col2im(&dcols, n, h, w, cin),
            )?)
        } else {
            None
        };

        Ok(ConvGrads {
            input,
            weight: Tensor::from_vec(self.weight.shape(), dw)?,
            bias: Tensor::from_vec(&[cout], db)?,
        })
    }
}

/// Unfolds every 3x3 neighbourhood into a row of `9 * c` values ordered
/// `(kh, kw, c)`, matching the weight layout.
fn im2col<T: Scalar>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let width = TAPS * c;
    let mut cols = vec![T::zero(); n * h * w * width];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let row = ((b * h + i) * w + j) * width;
                for kh in 0..KERNEL {
                    let Some(si) = (i + kh).checked_sub(1).filter(|&si| si < h) else {
                        continue;
                    };
                    for kw in 0..KERNEL {
                        let Some(sj) = (j + kw).checked_sub(1).filter(|&sj| sj < w) else {
                            continue;
                        };
                        let src = ((b * h + si) * w + sj) * c;
                        let dst = row + (kh * KERNEL + kw) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let width = TAPS * c;
    let mut x = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let row = ((b * h + i) * w + j) * width;
                for kh in 0..KERNEL {
                    let Some(si) = (i + kh).checked_sub(1).filter(|&si| si < h) else {
                        continue;
                    };
                    for kw in 0..KERNEL {
                        let Some(sj) = (j + kw).checked_sub(1).filter(|&sj| sj < w) else {
                            continue;
                        };
                        let dst = ((b * h + si) * w + sj) * c;
                        let src = row + (kh * KERNEL + kw) * c;
                        for (d, &s) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}
