//! SGD with momentum and L2 weight decay, and a reduce-on-plateau
//! learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Gradients;
use crate::tensor::{Scalar, Tensor};

/// Per-dataset and shared optimization constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    pub lr_min: f64,
    /// Multiplicative learning-rate decay applied on a plateau.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub patience: usize,
    pub cooldown: usize,
    pub batch_size: usize,
    pub monitor: Monitor,
}

impl Default for Hyperparams {
    /// MNIST learning rates and decay with the constants shared by every dataset.
    fn default() -> Self {
        Hyperparams {
            lr: 0.001,
            lr_min: 0.00001,
            lr_decay: 0.5,
            weight_decay: 0.001,
            momentum: 0.9,
            patience: 1,
            cooldown: 3,
            batch_size: 32,
            monitor: Monitor::Accuracy,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let fail = |field, message: &str| {
            Err(Error::Config {
                field,
                message: message.to_string(),
            })
        };
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr", "must be a finite value > 0");
        }
        if !(self.lr_min.is_finite() && self.lr_min > 0.0 && self.lr_min <= self.lr) {
            return fail("lr_min", "must satisfy 0 < lr_min <= lr");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return fail("lr_decay", "must lie in (0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay", "must be a finite value >= 0");
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return fail("momentum", "must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1");
        }
        Ok(())
    }

    pub fn optimizer<T: Scalar>(&self) -> SgdMomentum<T> {
        SgdMomentum::new(self.lr, self.momentum, self.weight_decay)
    }

    pub fn scheduler(&self) -> PlateauScheduler {
        PlateauScheduler::new(
            self.lr,
            self.lr_decay,
            self.patience,
            self.cooldown,
            self.lr_min,
            self.monitor,
        )
    }
}

/// `g' = g + wd * p; v = rho * v + g'; p = p - lr * v`
#[derive(Clone, Debug)]
pub struct SgdMomentum<T: Scalar = f32> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    /// Applies one update. `params` and `grads` must list the same names in
    /// the same order with matching shapes.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor<T>)>, grads: &Gradients<T>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::RegistryMismatch(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config {
                field: "lr",
                message: format!("learning rate {} is not positive", self.lr),
            });
        }
        if let Some(((name, _), (gname, _))) = params
            .iter()
            .zip(&grads.entries)
            .find(|((name, _), (gname, _))| name != gname)
        {
            return Err(Error::RegistryMismatch(format!(
                "parameter {name} paired with gradient {gname}"
            )));
        }
        let (lr, rho, wd) = (
            T::from_f64_lossy(self.lr),
            T::from_f64_lossy(self.momentum),
            T::from_f64_lossy(self.weight_decay),
        );
        for ((name, param), (_, grad)) in params.into_iter().zip(&grads.entries) {
            if grad.shape() != param.shape() {
                return Err(Error::RegistryMismatch(format!(
                    "{name}: parameter shape {:?}, gradient shape {:?}",
                    param.shape(),
                    grad.shape()
                )));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros_like(param));
            if v.shape() != param.shape() {
                return Err(Error::RegistryMismatch(format!(
                    "{name}: velocity shape {:?}, parameter shape {:?}",
                    v.shape(),
                    param.shape()
                )));
            }
            for ((p, &g), vel) in param.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
                let g = g + wd * *p;
                *vel = rho * *vel + g;
                *p -= lr * *vel;
            }
        }
        Ok(())
    }
}

/// Metric watched by the plateau scheduler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    /// Validation accuracy; improvement is a strict increase.
    Accuracy,
    /// Validation loss; improvement is a strict decrease.
    Loss,
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub cooldown: usize,
    pub min_lr: f64,
    pub monitor: Monitor,
    lr: f64,
    best: Option<f64>,
    wait: usize,
    cooldown_left: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, cooldown: usize, min_lr: f64, monitor: Monitor) -> Self {
        PlateauScheduler {
            factor,
            patience,
            cooldown,
            min_lr,
            monitor,
            lr: lr.max(min_lr),
            best: None,
            wait: 0,
            cooldown_left: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    fn improves(&self, metric: f64) -> bool {
        match (self.best, self.monitor) {
            (None, _) => true,
            (Some(best), Monitor::Accuracy) => metric > best,
            (Some(best), Monitor::Loss) => metric < best,
        }
    }

    /// Feeds one epoch's metric and returns the learning rate to use next.
    pub fn update(&mut self, metric: f64) -> Result<f64> {
        if !metric.is_finite() {
            return Err(Error::InvalidMetric(metric));
        }
        if self.improves(metric) {
            self.best = Some(metric);
            self.wait = 0;
        } else if self.cooldown_left > 0 {
            self.cooldown_left -= 1;
        } else {
            self.wait += 1;
            if self.wait > self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.wait = 0;
                self.cooldown_left = self.cooldown;
            }
        }
        Ok(self.lr)
    }
}
