use rand::Rng;

use super::glorot_fill;
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T: Scalar = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Dense {
            weight: Tensor::zeros(&[inputs, outputs])?,
            bias: Tensor::zeros(&[outputs])?,
        })
    }

    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        let mut layer = Self::new(inputs, outputs)?;
        glorot_fill(&mut layer.weight, inputs, outputs, rng);
        Ok(layer)
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn batch(&self, x: &Tensor<T>) -> Result<usize> {
        match *x.shape() {
            [n, d] if d == self.inputs() => Ok(n),
            _ => Err(Error::shape(&[x.shape()[0], self.inputs()], x.shape())),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.batch(x)?;
        let (din, dout) = (self.inputs(), self.outputs());
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(self.bias.data());
        }
        gemm(
            MatRef::new(x.data(), n, din),
            MatRef::new(self.weight.data(), din, dout),
            T::one(),
            &mut out,
        );
        Tensor::from_vec(&[n, dout], out)
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<DenseGrads<T>> {
        let n = self.batch(x)?;
        let (din, dout) = (self.inputs(), self.outputs());
        dy.ensure_shape(&[n, dout])?;
        let mut dw = vec![T::zero(); din * dout];
        gemm(
            MatRef::new(x.data(), n, din).t(),
            MatRef::new(dy.data(), n, dout),
            T::zero(),
            &mut dw,
        );
        let mut dx = vec![T::zero(); n * din];
        gemm(
            MatRef::new(dy.data(), n, dout),
            MatRef::new(self.weight.data(), din, dout).t(),
            T::zero(),
            &mut dx,
        );
        let mut db = vec![T::zero(); dout];
        for row in dy.data().chunks_exact(dout) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
        Ok(DenseGrads {
            input: Tensor::from_vec(&[n, din], dx)?,
            weight: Tensor::from_vec(&[din, dout], dw)?,
            bias: Tensor::from_vec(&[dout], db)?,
        })
    }
}
