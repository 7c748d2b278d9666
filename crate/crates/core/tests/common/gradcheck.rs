//! Central finite differences against every analytic backward pass, in f64.

use super::{random_tensor, rng, tiny_spec};
use rand::seq::SliceRandom;
use rand::Rng;
use triage_core::layers::{
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, softmax_xent, BatchNorm2d, Conv2d, Dense, Mode,
};
use triage_core::model::{Network, Scope};
use triage_core::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
pub const SEEDS: u64 = 20;

/// Below this norm a gradient is treated as exactly zero (for example a conv
/// bias feeding a train-mode batch norm), where a ratio would only compare
/// rounding noise.
pub const ZERO_NORM: f64 = 1e-8;

/// `||a - n|| / max(||a||, ||n||)`, zero when both norms are below `ZERO_NORM`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale < ZERO_NORM {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `loss` with respect to the tensor reached by `access`.
pub fn numeric_grad<S: Clone>(state: &S, access: impl Fn(&mut S) -> &mut Tensor<f64>, loss: impl Fn(&S) -> f64) -> Vec<f64> {
    let n = access(&mut state.clone()).len();
    (0..n)
        .map(|i| {
            let mut plus = state.clone();
            access(&mut plus).data_mut()[i] += STEP;
            let mut minus = state.clone();
            access(&mut minus).data_mut()[i] -= STEP;
            (loss(&plus) - loss(&minus)) / (2.0 * STEP)
        })
        .collect()
}

/// True when the one-sided differences of `loss` at any coordinate disagree
/// by more than smooth curvature allows, meaning a ReLU or max-pool kink
/// lies within one step.
pub fn crosses_kink<S: Clone>(state: &S, access: impl Fn(&mut S) -> &mut Tensor<f64>, loss: impl Fn(&S) -> f64) -> bool {
    let n = access(&mut state.clone()).len();
    let centre = loss(state);
    (0..n).any(|i| {
        let mut plus = state.clone();
        access(&mut plus).data_mut()[i] += STEP;
        let mut minus = state.clone();
        access(&mut minus).data_mut()[i] -= STEP;
        let forward = (loss(&plus) - centre) / STEP;
        let backward = (centre - loss(&minus)) / STEP;
        (forward - backward).abs() > KINK_GAP * forward.abs().max(backward.abs()).max(1.0)
    })
}

/// One-sided slopes of a smooth loss differ by about `STEP * |f''|`.
pub const KINK_GAP: f64 = 1e-3;

fn weighted(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn check(what: &str, seed: u64, analytic: &Tensor<f64>, numeric: &[f64]) -> f64 {
    let e = relative_error(analytic.data(), numeric);
    assert!(e < TOLERANCE, "{what} (seed {seed}): relative error {e:e}");
    e
}

#[derive(Clone)]
struct Case<L> {
    layer: L,
    x: Tensor<f64>,
}

pub fn conv_worst(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(seed);
        let (n, h, w) = (r.gen_range(1..=2), r.gen_range(2..=5), r.gen_range(2..=5));
        let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let mut conv = Conv2d::<f64>::new(ci, co).unwrap();
        conv.weight = random_tensor(&[3, 3, ci, co], &mut r);
        conv.bias = random_tensor(&[co], &mut r);
        let case = Case {
            layer: conv,
            x: random_tensor(&[n, h, w, ci], &mut r),
        };
        let dy = random_tensor(&[n, h, w, co], &mut r);
        let loss = |c: &Case<Conv2d<f64>>| weighted(&c.layer.forward(&c.x).unwrap(), &dy);
        let g = case.layer.backward(&case.x, &dy).unwrap();
        worst = worst.max(check("conv input", seed, g.input.as_ref().unwrap(), &numeric_grad(&case, |c| &mut c.x, loss)));
        worst = worst.max(check("conv weight", seed, &g.weight, &numeric_grad(&case, |c| &mut c.layer.weight, loss)));
        worst = worst.max(check("conv bias", seed, &g.bias, &numeric_grad(&case, |c| &mut c.layer.bias, loss)));
    }
    worst
}

pub fn batchnorm_worst(seeds: u64, mode: Mode) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(100 + seed);
        let (n, h, w, c) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(2..=3), r.gen_range(1..=3));
        let mut bn = BatchNorm2d::<f64>::new(c).unwrap();
        bn.gamma = random_tensor(&[c], &mut r);
        bn.beta = random_tensor(&[c], &mut r);
        bn.running_mean = random_tensor(&[c], &mut r);
        bn.running_var = random_tensor::<f64>(&[c], &mut r).map(|v| v.abs() + 0.5);
        bn.mode = mode;
        let case = Case {
            layer: bn,
            x: random_tensor(&[n, h, w, c], &mut r),
        };
        let dy = random_tensor(&[n, h, w, c], &mut r);
        let loss = |k: &Case<BatchNorm2d<f64>>| weighted(&k.layer.apply(&k.x, mode).unwrap(), &dy);
        let g = case.layer.backward(&case.x, &dy).unwrap();
        worst = worst.max(check("bn input", seed, &g.input, &numeric_grad(&case, |k| &mut k.x, loss)));
        worst = worst.max(check("bn gamma", seed, &g.gamma, &numeric_grad(&case, |k| &mut k.layer.gamma, loss)));
        worst = worst.max(check("bn beta", seed, &g.beta, &numeric_grad(&case, |k| &mut k.layer.beta, loss)));
    }
    worst
}

pub fn dense_worst(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(200 + seed);
        let (n, i, o) = (r.gen_range(1..=4), r.gen_range(1..=6), r.gen_range(1..=5));
        let mut dense = Dense::<f64>::new(i, o).unwrap();
        dense.weight = random_tensor(&[i, o], &mut r);
        dense.bias = random_tensor(&[o], &mut r);
        let case = Case {
            layer: dense,
            x: random_tensor(&[n, i], &mut r),
        };
        let dy = random_tensor(&[n, o], &mut r);
        let loss = |k: &Case<Dense<f64>>| weighted(&k.layer.forward(&k.x).unwrap(), &dy);
        let g = case.layer.backward(&case.x, &dy).unwrap();
        worst = worst.max(check("dense input", seed, &g.input, &numeric_grad(&case, |k| &mut k.x, loss)));
        worst = worst.max(check("dense weight", seed, &g.weight, &numeric_grad(&case, |k| &mut k.layer.weight, loss)));
        worst = worst.max(check("dense bias", seed, &g.bias, &numeric_grad(&case, |k| &mut k.layer.bias, loss)));
    }
    worst
}

pub fn relu_worst(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(300 + seed);
        let shape = [r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=3)];
        // keep every input well away from the kink at 0
        let x = random_tensor::<f64>(&shape, &mut r).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 });
        let dy = random_tensor(&shape, &mut r);
        let numeric = numeric_grad(&x, |t| t, |t| weighted(&relu_forward(t), &dy));
        worst = worst.max(check("relu", seed, &relu_backward(&x, &dy).unwrap(), &numeric));
    }
    worst
}

pub fn maxpool_worst(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(400 + seed);
        let shape = [r.gen_range(1..=2), 2 * r.gen_range(1..=3), 2 * r.gen_range(1..=3), r.gen_range(1..=3)];
        let len: usize = shape.iter().product();
        // distinct values 0.01 apart so no perturbation changes a window's argmax
        let mut values: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
        values.shuffle(&mut r);
        let x = Tensor::from_vec(&shape, values).unwrap();
        let dy = random_tensor(&[shape[0], shape[1] / 2, shape[2] / 2, shape[3]], &mut r);
        let numeric = numeric_grad(&x, |t| t, |t| weighted(&maxpool_forward(t).unwrap(), &dy));
        worst = worst.max(check("maxpool", seed, &maxpool_backward(&x, &dy).unwrap(), &numeric));
    }
    worst
}

pub fn softmax_worst(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(500 + seed);
        let (n, k) = (r.gen_range(1..=5), r.gen_range(2..=6));
        let logits = random_tensor::<f64>(&[n, k], &mut r).map(|v| 3.0 * v);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let (_, grad) = softmax_xent(&logits, &labels).unwrap();
        let numeric = numeric_grad(&logits, |t| t, |t| softmax_xent(t, &labels).unwrap().0);
        worst = worst.max(check("softmax cross-entropy", seed, &grad, &numeric));
    }
    worst
}

fn param<'a>(net: &'a mut Network<f64>, name: &str) -> &'a mut Tensor<f64> {
    net.state_mut().into_iter().find(|(k, _)| k == name).unwrap().1
}

/// Whole-network backward under both full and single-block scopes.
/// Configurations with a kink inside one step are resampled; returns the
/// worst error and the number of configurations skipped.
pub fn network_worst(seeds: u64) -> (f64, usize) {
    let spec = tiny_spec(3);
    let mut worst = 0.0f64;
    let mut accepted = 0;
    let mut skipped = 0;
    let mut seed = 0u64;
    while accepted < seeds {
        assert!(skipped < 3 * seeds as usize, "too many configurations with kinks");
        let mut r = rng(600 + seed);
        let mut net = Network::<f64>::build(&spec, seed).unwrap();
        for (name, t) in net.state_mut() {
            if name.contains(".bn") && !name.ends_with("running_var") {
                *t = random_tensor(t.shape(), &mut r).map(|v| 0.5 * v + if name.ends_with("gamma") { 1.0 } else { 0.0 });
            } else if name.ends_with("running_var") {
                *t = random_tensor::<f64>(t.shape(), &mut r).map(|v| v.abs() + 0.5);
            }
        }
        let x = random_tensor::<f64>(&[4, 8, 8, 1], &mut r);
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
        let scope = if seed.is_multiple_of(2) { Scope::All } else { Scope::Block((seed as usize / 2) % 3) };
        seed += 1;
        let loss = |n: &Network<f64>| {
            let mut n = n.clone();
            softmax_xent(&n.forward_train(&x, scope).unwrap(), &labels).unwrap().0
        };
        let logits = net.forward_train(&x, scope).unwrap();
        let (_, dlogits) = softmax_xent(&logits, &labels).unwrap();
        let grads = net.backward(&dlogits).unwrap();
        let trainable: Vec<String> = net.parameters_mut(scope).into_iter().map(|(n, _)| n).collect();
        assert_eq!(grads.entries.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(), trainable);
        if grads.entries.iter().any(|(name, _)| crosses_kink(&net, |n| param(n, name), loss)) {
            skipped += 1;
            continue;
        }
        for (name, analytic) in &grads.entries {
            worst = worst.max(check(name, seed - 1, analytic, &numeric_grad(&net, |n| param(n, name), loss)));
        }
        accepted += 1;
    }
    (worst, skipped)
}

