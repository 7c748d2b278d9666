use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn dims(x: &Tensor<impl Scalar>) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, h, w, c] if h >= 2 && w >= 2 => Ok([n, h, w, c]),
        _ => Err(Error::shape(&[0, 2, 2, 0], x.shape())),
    }
}

/// Offset (within the input) of the winning element of each pooled output,
/// scanning every 2x2 window in row-major order and keeping the first maximum.
fn argmax_offsets<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<usize>, [usize; 4])> {
    let [n, h, w, c] = dims(x)?;
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut offsets = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = ((b * h + 2 * i) * w + 2 * j) * c + ch;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    offsets.push(best);
                }
            }
        }
    }
    Ok((offsets, [n, oh, ow, c]))
}

/// 2x2 max pooling with stride 2. Output spatial dims are `floor(input / 2)`.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (offsets, shape) = argmax_offsets(x)?;
    let data = offsets.iter().map(|&o| x.data()[o]).collect();
    Tensor::from_vec(&shape, data)
}

/// Routes each output gradient to the recorded argmax of its window.
pub fn maxpool_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (offsets, shape) = argmax_offsets(x)?;
    dy.ensure_shape(&shape)?;
    let mut dx = Tensor::zeros_like(x);
    let out = dx.data_mut();
    for (&o, &g) in offsets.iter().zip(dy.data()) {
        out[o] += g;
    }
    Ok(dx)
}
