//! Classifier training and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use super::checkpoint::save_checkpoint;
use super::config::TrainConfig;
use super::data::{augment_flip, Dataset, Item, Split};
use crate::ci2p::ENCODER_PREFIX;
use crate::error::{Error, Result};
use crate::tensor::{Exec, ParamStore, Real, Rng, Tape, Tensor};
use crate::vit::Classifier;

pub const METRICS_HEADER: &str = "epoch,step,split,loss,accuracy";

/// Index of the largest logit; ties go to the lowest index.
pub fn predict<T: Real>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of precomputed logits.
pub fn top1<T: Real>(logits: &[Tensor<T>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(z, &l)| predict(z.data()) == l)
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
}

fn mean_ce<T: Real>(logits: &Tensor<T>, label: usize) -> f64 {
    let z: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[label]
}

/// Accuracy and mean cross-entropy of `model` on `items`.
pub fn evaluate<T: Real>(
    model: &Classifier,
    store: &ParamStore<T>,
    items: &[&Item<T>],
) -> Result<EvalResult> {
    let images: Vec<Tensor<T>> = items.iter().map(|it| it.image.clone()).collect();
    let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
    let logits = model.forward_batch(Exec::default(), store, &images)?;
    let loss = if items.is_empty() {
        0.0
    } else {
        logits.iter().zip(&labels).map(|(z, &l)| mean_ce(z, l)).sum::<f64>() / items.len() as f64
    };
    Ok(EvalResult {
        accuracy: top1(&logits, &labels),
        loss,
        count: items.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean minibatch loss over the epoch (augmented inputs).
    pub train_loss: f64,
    /// Clean (unaugmented) accuracy on the train split after the epoch.
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    /// Whether the codec encoder is bit-identical to its state before
    /// training. `None` for models without an encoder.
    pub encoder_intact: Option<bool>,
}

/// Where training writes its artifacts. Both are overwritten.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOutputs<'a> {
    /// Metrics CSV, rewritten after every epoch.
    pub metrics: Option<&'a Path>,
    /// Checkpoint, rewritten after every epoch.
    pub checkpoint: Option<&'a Path>,
}

/// Renders the metrics CSV for a history.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in history {
        let _ = writeln!(out, "{},{},train,{:.9},{:.6}", m.epoch, m.step, m.train_loss, m.train_acc);
        let _ = writeln!(out, "{},{},val,{:.9},{:.6}", m.epoch, m.step, m.val_loss, m.val_acc);
    }
    out
}

/// Adam on cross-entropy with seeded shuffling and flip augmentation.
///
/// Each epoch visits the train split in a seeded permutation, in batches of
/// `batch_size` (the last batch may be smaller). Per-sample gradients are
/// computed independently and summed in batch order, so results do not
/// depend on the thread count. Frozen parameters (the codec encoder) are
/// never updated; the report says whether they stayed bit-identical.
pub fn train_classifier<T: Real>(
    model: &Classifier,
    store: &mut ParamStore<T>,
    dataset: &Dataset<T>,
    cfg: &TrainConfig,
    out: TrainOutputs<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let nc = model.desc().num_classes;
    if dataset.class_count > nc {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {nc}",
            dataset.class_count
        )));
    }
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    if cfg.epochs > 0 && train.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let snapshot = store.snapshot(ENCODER_PREFIX);
    let root = Rng::new(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let epoch_rng = root.derive(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        epoch_rng.derive(0).shuffle(&mut order);
        let adam = cfg.adam_for_epoch(epoch);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let params = &*store;
            let results = Exec::default().map(batch.len(), |j| {
                let pos = b * cfg.batch_size + j;
                let item = train[batch[j]];
                let mut rng = epoch_rng.derive(pos as u64 + 1);
                let x = augment_flip(&item.image, &mut rng, cfg.flip_prob)?;
                let mut tape = Tape::with_exec(Exec::Sequential);
                let loss = model.loss(&mut tape, params, &x, item.label)?;
                let value = tape.value(loss).item().as_f64();
                let grads = tape.backward(loss)?;
                Ok::<_, Error>((value, grads.into_params()))
            });
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r.map_err(|e| match e {
                    Error::Numeric(msg) => {
                        Error::Numeric(format!("epoch {}, step {}: {msg}", epoch + 1, step + 1))
                    }
                    other => other,
                })?;
                batch_loss += l;
                store.accumulate(&g)?;
            }
            store.scale_grads(T::of(1.0 / batch.len() as f64));
            step += 1;
            store.adam_step(&adam, step as u64)?;
            loss_sum += batch_loss;
        }
        let tr = evaluate(model, store, &train)?;
        let va = evaluate(model, store, &val)?;
        history.push(EpochMetrics {
            epoch: epoch + 1,
            step,
            train_loss: loss_sum / train.len() as f64,
            train_acc: tr.accuracy,
            val_loss: va.loss,
            val_acc: va.accuracy,
        });
        if let Some(p) = out.metrics {
            std::fs::write(p, metrics_csv(&history)).map_err(|e| Error::io(p, e))?;
        }
        if let Some(p) = out.checkpoint {
            save_checkpoint(store, p)?;
        }
    }
    if cfg.epochs == 0 {
        if let Some(p) = out.metrics {
            std::fs::write(p, metrics_csv(&history)).map_err(|e| Error::io(p, e))?;
        }
    }
    let encoder_intact = (!snapshot.is_empty()).then(|| store.matches_snapshot(&snapshot));
    Ok(TrainReport {
        history,
        encoder_intact,
    })
}
