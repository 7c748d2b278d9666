//! Forward and backward passes for every layer kind in the block network.
//!
//! Layers are stateless with respect to activations: `backward` takes the
//! forward input again rather than reading a hidden cache. The network
//! keeps the activation trace. The only mutable state besides parameters is
//! the batch-norm running statistics.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod loss;
mod pool;

pub use activation::{relu_backward, relu_forward};
pub use batchnorm::{BatchNorm2d, BnGrads, BN_EPS, BN_MOMENTUM};
pub use conv::{Conv2d, ConvGrads, KERNEL};
pub use dense::{Dense, DenseGrads};
pub use loss::softmax_xent;
pub use pool::{maxpool_backward, maxpool_forward};

use rand::Rng;

use crate::tensor::{Scalar, Tensor};

/// Whether batch normalization uses batch statistics (and updates its
/// running averages) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Half-width of the Glorot-uniform interval.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fills `t` with draws from `Uniform(-a, a)`, `a = glorot_bound(fan_in, fan_out)`.
pub fn glorot_fill<T: Scalar, R: Rng + ?Sized>(
    t: &mut Tensor<T>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let a = glorot_bound(fan_in, fan_out);
    for v in t.data_mut() {
        *v = T::from_f64_lossy(rng.gen_range(-a..a));
    }
}
