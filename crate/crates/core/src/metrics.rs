//! Criticality measures: accuracy, maximum accuracy and epochs to convergence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Fraction of rows whose argmax equals the label. Ties go to the lowest class.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let correct = count_correct(logits, labels)?;
    Ok(correct as f64 / labels.len() as f64)
}

pub(crate) fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let [n, k] = *logits.shape() else {
        return Err(Error::shape(&[labels.len(), 0], logits.shape()));
    };
    if n != labels.len() {
        return Err(Error::shape(&[labels.len(), k], logits.shape()));
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count())
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// How "within a fraction of the maximum" is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threshold {
    /// `value >= frac * max`
    #[default]
    Multiplicative,
    /// `value >= max - (1 - frac)`
    Additive,
}

/// Per-epoch validation accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccuracySeries(Vec<f64>);

impl AccuracySeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidMetric(bad));
        }
        Ok(AccuracySeries(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// First epoch attaining the maximum.
    pub fn argmax(&self) -> usize {
        let max = self.max();
        self.0.iter().position(|&v| v == max).unwrap_or(0)
    }

    /// First 0-based epoch whose accuracy reaches `frac` of the maximum.
    pub fn convergence_epoch(&self, frac: f64) -> usize {
        self.convergence_epoch_with(frac, Threshold::Multiplicative)
    }

    pub fn convergence_epoch_with(&self, frac: f64, mode: Threshold) -> usize {
        let max = self.max();
        let threshold = match mode {
            Threshold::Multiplicative => frac * max,
            Threshold::Additive => max - (1.0 - frac),
        };
        self.0
            .iter()
            .position(|&v| v >= threshold)
            .unwrap_or_else(|| self.argmax())
    }
}

/// Default convergence fraction: within 99% of the maximum.
pub const CONVERGENCE_FRACTION: f64 = 0.99;

pub fn convergence_epoch(series: &AccuracySeries, frac: f64) -> usize {
    series.convergence_epoch(frac)
}
