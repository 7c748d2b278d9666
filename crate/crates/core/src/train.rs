//! Mini-batch training and evaluation loops shared by baseline training
//! and post-compression retraining.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset, Splits};
use crate::error::Result;
use crate::layers::softmax_xent;
use crate::metrics::{count_correct, AccuracySeries};
use crate::model::{Network, Scope};
use crate::optim::{Hyperparams, SgdMomentum};

const EVAL_BATCH: usize = 256;

/// SplitMix64 finalizer, used to derive independent seeds from a master seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Eval-mode accuracy and mean cross-entropy over a dataset.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    for batch in batches(ds, EVAL_BATCH, None)? {
        let batch = batch?;
        let logits = net.predict(&batch.images)?;
        correct += count_correct(&logits, &batch.labels)?;
        loss += softmax_xent(&logits, &batch.labels)?.0 * batch.labels.len() as f64;
    }
    Ok((correct as f64 / ds.len() as f64, loss / ds.len() as f64))
}

/// One pass over `splits.train`, updating the parameters inside `scope`.
/// Returns mean training loss and accuracy.
pub fn train_epoch(
    net: &mut Network,
    scope: Scope,
    splits: &Splits,
    opt: &mut SgdMomentum,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (i, batch) in batches(&splits.train, batch_size, Some(epoch_seed))?.enumerate() {
        let mut batch = batch?;
        splits
            .preprocessor
            .augment_batch(&mut batch.images, mix_seed(epoch_seed, i as u64 + 1))?;
        let logits = net.forward_train(&batch.images, scope)?;
        let (loss, dlogits) = softmax_xent(&logits, &batch.labels)?;
        loss_sum += loss * batch.labels.len() as f64;
        correct += count_correct(&logits, &batch.labels)?;
        let grads = net.backward(&dlogits)?;
        opt.step(net.parameters_mut(scope), &grads)?;
    }
    let n = splits.train.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    pub val_accuracy: AccuracySeries,
    pub test_accuracy: AccuracySeries,
    pub wall_time: f64,
}

/// Trains for `epochs` epochs with SGD momentum and the plateau schedule,
/// evaluating on the validation and test splits after every epoch.
pub fn fit(
    net: &mut Network,
    scope: Scope,
    splits: &Splits,
    hyper: &Hyperparams,
    epochs: usize,
    seed: u64,
) -> Result<FitReport> {
    hyper.validate()?;
    let start = Instant::now();
    let mut opt = hyper.optimizer();
    let mut sched = hyper.scheduler();
    let mut records = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let t0 = Instant::now();
        let lr = sched.lr();
        opt.lr = lr;
        let (train_loss, train_accuracy) = train_epoch(
            net,
            scope,
            splits,
            &mut opt,
            hyper.batch_size,
            mix_seed(seed, epoch as u64),
        )?;
        let (val_accuracy, val_loss) = evaluate(net, &splits.val)?;
        let (test_accuracy, _) = evaluate(net, &splits.test)?;
        sched.update(match hyper.monitor {
            crate::optim::Monitor::Accuracy => val_accuracy,
            crate::optim::Monitor::Loss => val_loss,
        })?;
        let seconds = t0.elapsed().as_secs_f64();
        info!(
            "epoch {epoch}: lr {lr:.2e} loss {train_loss:.4} train {train_accuracy:.4} val {val_accuracy:.4} test {test_accuracy:.4} ({seconds:.1}s)"
        );
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
            test_accuracy,
            seconds,
        });
    }
    Ok(FitReport {
        val_accuracy: AccuracySeries::new(records.iter().map(|r| r.val_accuracy).collect())?,
        test_accuracy: AccuracySeries::new(records.iter().map(|r| r.test_accuracy).collect())?,
        epochs: records,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
