use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient is passed where the input was strictly positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.ensure_shape(x.shape())?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}
