//! The training loop: seeded shuffling, augmented batches, forward in train
//! mode, label-smoothed loss, backward, AdamW with the warmup+cosine
//! schedule. Single-threaded and bit-deterministic for a fixed seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::model::Model;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::scalar::cast;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::cifar::{make_batch, Dataset, Normalize};
use crate::train::optim::{adamw_step, AdamState};
use crate::train::schedule::lr_at;
use crate::train::TrainConfig;

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Learning rate of every optimizer step, in order.
    pub step_lrs: Vec<f64>,
    /// Loss of every step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,train_acc,eval_acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.lr, e.train_loss, e.train_acc, e.eval_acc
            ));
        }
        out
    }
}

/// Called after each epoch with the model, optimizer state, RNG and the
/// epoch's metrics, e.g. to write checkpoints.
pub type EpochHook<'a> =
    dyn FnMut(&Model<f32>, &AdamState<f32>, &ChaCha8Rng, &EpochLog) -> Result<()> + 'a;

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == label
        })
        .count()
}

/// Trains in place. When `eval_set` is `None`, per-epoch accuracy is
/// measured on the (possibly subset) training data itself in eval mode.
pub fn train(
    model: &mut Model<f32>,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &TrainConfig,
    norm: &Normalize,
    mut epoch_hook: Option<&mut EpochHook<'_>>,
) -> Result<(TrainLog, AdamState<f32>, ChaCha8Rng)> {
    config.validate()?;
    let ds = match config.subset {
        Some(n) => train_set.subset(n),
        None => train_set.clone(),
    };
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps_per_epoch = ds.len().div_ceil(config.batch_size);
    let mut opt = AdamState::new(&model.params);
    let mut log = TrainLog::default();
    let mut step = 0usize;

    for epoch in 1..=config.total_epochs {
        let mut indices: Vec<usize> = (0..ds.len()).collect();
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut last_lr = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            let augment_rng = if config.augment { Some(&mut rng) } else { None };
            let (batch, labels) = make_batch::<f32>(&ds, chunk, norm, augment_rng);
            let mut tape = Tape::new();
            let x = tape.leaf(batch);
            let logits = model.forward(&mut tape, x, Mode::Train, Some(&mut rng))?;
            let loss = tape.softmax_cross_entropy(logits, &labels, cast(config.label_smoothing))?;
            let loss_val = tape.value(loss).item() as f64;
            correct += count_correct(tape.value(logits), &labels);
            seen += labels.len();
            loss_sum += loss_val * labels.len() as f64;
            let grads = tape.backward(loss)?;
            let lr = lr_at(config, step, steps_per_epoch);
            adamw_step(&mut model.params, &grads, &mut opt, lr, config.weight_decay)?;
            log.step_lrs.push(lr);
            log.step_losses.push(loss_val);
            last_lr = lr;
            step += 1;
        }
        let (eval_acc, _) = evaluate(model, eval_set.unwrap_or(&ds), norm, config.batch_size)?;
        let entry = EpochLog {
            epoch,
            lr: last_lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            eval_acc,
        };
        if let Some(hook) = epoch_hook.as_mut() {
            hook(model, &opt, &rng, &entry)?;
        }
        log.epochs.push(entry);
    }
    Ok((log, opt, rng))
}

/// Top-1 accuracy and mean (unsmoothed) cross-entropy in eval mode.
pub fn evaluate(
    model: &mut Model<f32>,
    ds: &Dataset,
    norm: &Normalize,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = make_batch::<f32>(ds, chunk, norm, None);
        let mut tape = Tape::new();
        let x = tape.leaf(batch);
        let logits = model.forward(&mut tape, x, Mode::Eval, None)?;
        correct += count_correct(tape.value(logits), &labels);
        let loss = tape.softmax_cross_entropy(logits, &labels, 0.0)?;
        loss_sum += tape.value(loss).item() as f64 * labels.len() as f64;
    }
    Ok((correct as f64 / ds.len() as f64, loss_sum / ds.len() as f64))
}
