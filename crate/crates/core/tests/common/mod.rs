#![allow(dead_code)]

pub mod gradcheck;
pub mod idx;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triage_core::data::{Splits, MNIST_TRAIN_IMAGES};
use triage_core::model::{BlockSpec, ModelSpec, Network};
use triage_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: triage_core::tensor::Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// MNIST directory from `MNIST_DIR`, else `<workspace>/data/mnist`, if the
/// training images are present.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join(MNIST_TRAIN_IMAGES).exists().then_some(dir)
}

/// A 3-block network on 8x8x1 inputs, small enough for fast tests.
pub fn tiny_spec(classes: usize) -> ModelSpec {
    ModelSpec {
        blocks: vec![BlockSpec::new(2, 4), BlockSpec::new(3, 6), BlockSpec::new(2, 6)],
        input_shape: [8, 8, 1],
        num_classes: classes,
        head_hidden: 8,
    }
}

pub fn synth_splits(train: usize, eval: usize, seed: u64) -> Splits {
    Splits::synthetic(train, eval, seed, 0.5).unwrap()
}

/// Every named tensor of `net` as raw bit patterns.
pub fn snapshot(net: &Network) -> Vec<(String, Vec<u32>)> {
    net.state()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Entries whose bits differ between two snapshots.
pub fn changed(a: &[(String, Vec<u32>)], b: &[(String, Vec<u32>)]) -> Vec<String> {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.clone())
        .collect()
}

/// Mean of every 3x3 slice of every conv in `block` of `net`, computed one
/// element at a time straight from the definition.
pub fn brute_force_mean_slice(net: &Network, block: usize) -> ([f64; 9], f64) {
    let mut sum = [0.0f64; 9];
    let mut count = 0usize;
    let mut bias = 0.0f64;
    let mut biases = 0usize;
    for unit in &net.blocks[block].units {
        let w = &unit.conv.weight;
        let [kh, kw, ci, co] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        for i in 0..ci {
            for o in 0..co {
                for y in 0..kh {
                    for x in 0..kw {
                        sum[y * kw + x] += w.data()[((y * kw + x) * ci + i) * co + o] as f64;
                    }
                }
                count += 1;
            }
        }
        for &b in unit.conv.bias.data() {
            bias += b as f64;
            biases += 1;
        }
    }
    (sum.map(|s| s / count as f64), bias / biases as f64)
}

/// `(1/N) sum_i ||s_i - t_i||^2`, element by element.
pub fn direct_stn_loss(s: &Tensor, t: &Tensor) -> f64 {
    let n = s.shape()[0];
    let per = s.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        let mut sq = 0.0;
        for j in 0..per {
            let d = s.data()[i * per + j] as f64 - t.data()[i * per + j] as f64;
            sq += d * d;
        }
        total += sq;
    }
    total / n as f64
}

/// Direct nested-loop 3x3 same-padding cross-correlation, NHWC input and
/// `[3, 3, cin, cout]` kernel.
pub fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let [n, h, wd, cin] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let cout = w.shape()[3];
    let mut out = vec![0.0; n * h * wd * cout];
    for s in 0..n {
        for y in 0..h {
            for xx in 0..wd {
                for o in 0..cout {
                    let mut acc = b.data()[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            let ix = xx as isize + kx as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for c in 0..cin {
                                let xv = x.data()[((s * h + iy as usize) * wd + ix as usize) * cin + c];
                                acc += xv * w.data()[((ky * 3 + kx) * cin + c) * cout + o];
                            }
                        }
                    }
                    out[((s * h + y) * wd + xx) * cout + o] = acc;
                }
            }
        }
    }
    out
}

/// Largest absolute difference between `Conv2d::forward` and the nested-loop
/// oracle over batch 1..=3, height and width 3..=6, in/out channels 1..=3.
pub fn conv_oracle_worst() -> (f64, usize) {
    use triage_core::layers::Conv2d;
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut r = rng(7);
    for n in 1..=3 {
        for h in 3..=6 {
            for w in 3..=6 {
                for ci in 1..=3 {
                    for co in 1..=3 {
                        let mut conv = Conv2d::<f64>::new(ci, co).unwrap();
                        conv.weight = random_tensor(&[3, 3, ci, co], &mut r);
                        conv.bias = random_tensor(&[co], &mut r);
                        let x = random_tensor(&[n, h, w, ci], &mut r);
                        let fast = conv.forward(&x).unwrap();
                        let slow = direct_conv(&x, &conv.weight, &conv.bias);
                        for (a, b) in fast.data().iter().zip(&slow) {
                            worst = worst.max((a - b).abs());
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    (worst, cases)
}

/// f32 path against the same oracle on one shape.
pub fn conv_oracle_worst_f32() -> f64 {
    use triage_core::layers::Conv2d;
    let mut r = rng(8);
    let mut conv = Conv2d::<f32>::new(3, 4).unwrap();
    conv.weight = random_tensor(&[3, 3, 3, 4], &mut r);
    conv.bias = random_tensor(&[4], &mut r);
    let x = random_tensor::<f32>(&[2, 5, 6, 3], &mut r);
    let fast = conv.forward(&x).unwrap();
    let slow = direct_conv(&x.cast(), &conv.weight.cast(), &conv.bias.cast());
    fast.data().iter().zip(&slow).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max)
}
