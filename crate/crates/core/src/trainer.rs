//! Supervised training and evaluation loops: batch sharding across worker
//! threads, gradient averaging, metrics, and a divergence guard.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::{ChannelNorm, Dataset};
use crate::error::{Error, Result};
use crate::layers::ParamId;
use crate::model::Model;
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Forces a single worker and a fixed reduction order; two runs with
    /// the same seed then produce bitwise-identical results.
    pub deterministic: bool,
    /// Stop after any epoch whose test top-1 reaches this value (requires
    /// a test set; later epochs are skipped).
    pub early_stop_top1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_frac: 0.1,
            label_smoothing: 0.1,
            seed: 0,
            deterministic: true,
            early_stop_top1: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
}

/// Render metric rows as CSV with the stable schema.
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,loss,top1\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.epoch, r.split, r.loss, r.top1));
    }
    out
}

/// Worker count: `VHEAT_THREADS` if set and valid, else 1.
pub fn worker_count() -> usize {
    std::env::var("VHEAT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Argmax with ties broken toward the lower index.
pub fn argmax_lowest<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct ShardResult<T: Element> {
    grads: Vec<(ParamId, Tensor<T>)>,
    loss: f64,
    correct: usize,
    count: usize,
}

/// Forward + backward over one shard of a batch. Returns per-shard mean
/// loss and mean gradients.
fn run_shard<T: Element>(
    model: &Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    smoothing: f64,
    drop_seed: u64,
) -> Result<ShardResult<T>> {
    let mut tape = Tape::new();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(drop_seed);
    let pass = model.forward_on_tape(&mut tape, images, Some(&mut drop_rng))?;
    let logits = tape.value(pass.logits).clone();
    let loss_node = tape.cross_entropy(pass.logits, Arc::new(labels.to_vec()), smoothing)?;
    let loss = tape.value(loss_node).scalar_value()?.to_f64_lossy();
    let mut grads_map = tape.backward(loss_node)?;
    let mut grads = Vec::with_capacity(pass.bound.len());
    for (pid, node) in pass.bound {
        if let Some(g) = grads_map.take(node) {
            grads.push((pid, g));
        }
    }
    let classes = logits.dims()[1];
    let mut correct = 0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.as_slice()[b * classes..(b + 1) * classes];
        if argmax_lowest(row) == label {
            correct += 1;
        }
    }
    Ok(ShardResult { grads, loss, correct, count: labels.len() })
}

/// Split `idxs` into at most `workers` contiguous, non-empty shards.
fn shards(idxs: &[usize], workers: usize) -> Vec<&[usize]> {
    let w = workers.min(idxs.len()).max(1);
    let base = idxs.len() / w;
    let extra = idxs.len() % w;
    let mut out = Vec::with_capacity(w);
    let mut start = 0;
    for i in 0..w {
        let len = base + usize::from(i < extra);
        out.push(&idxs[start..start + len]);
        start += len;
    }
    out
}

/// One optimizer step over a batch: shard, run forward/backward per shard
/// (in parallel if workers > 1), average gradients in shard order.
#[allow(clippy::too_many_arguments)]
fn train_step<T: Element>(
    model: &mut Model<T>,
    ds: &Dataset,
    idxs: &[usize],
    cfg: &TrainConfig,
    opt: &mut AdamW<T>,
    lr: f64,
    step: usize,
    workers: usize,
) -> Result<(f64, usize)> {
    let norm = model.norm;
    let parts = shards(idxs, workers);
    let drop_base = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;
    let results: Vec<Result<ShardResult<T>>> = if parts.len() == 1 {
        let images = ds.batch::<T>(parts[0], &norm)?;
        let labels = ds.batch_labels(parts[0]);
        vec![run_shard(model, &images, &labels, cfg.label_smoothing, drop_base.wrapping_add(step as u64) )]
    } else {
        std::thread::scope(|scope| {
            let model_ref: &Model<T> = model;
            let handles: Vec<_> = parts
                .iter()
                .enumerate()
                .map(|(si, part)| {
                    let part: Vec<usize> = part.to_vec();
                    scope.spawn(move || -> Result<ShardResult<T>> {
                        let images = ds.batch::<T>(&part, &norm)?;
                        let labels = ds.batch_labels(&part);
                        run_shard(
                            model_ref,
                            &images,
                            &labels,
                            cfg.label_smoothing,
                            drop_base
                                .wrapping_add(step as u64)
                                .wrapping_add((si as u64) << 32),
                        )
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };

    // Fixed reduction order: shard 0, 1, 2, ... regardless of finish order.
    let total = idxs.len() as f64;
    let mut merged: Vec<(ParamId, Tensor<T>)> = Vec::new();
    let mut loss = 0.0;
    let mut correct = 0;
    for res in results {
        let r = res?;
        let w = T::from_f64(r.count as f64 / total);
        loss += r.loss * r.count as f64 / total;
        correct += r.correct;
        for (pid, g) in r.grads {
            let scaled = g.map(|v| v * w);
            match merged.iter_mut().find(|(p, _)| *p == pid) {
                Some((_, acc)) => *acc = acc.zip_map(&scaled, |a, b| a + b)?,
                None => merged.push((pid, scaled)),
            }
        }
    }
    merged.sort_by_key(|(p, _)| p.index());
    if !loss.is_finite() {
        return Err(Error::Diverged(format!(
            "loss became non-finite ({loss}) at step {step}; lr {lr:.3e}"
        )));
    }
    opt.step(&mut model.store, &merged, lr)?;
    Ok((loss, correct))
}

/// Train in place. Returns per-epoch metrics (train split always; test
/// split when a test set is provided).
pub fn train<T: Element>(
    model: &mut Model<T>,
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    if train_ds.n == 0 {
        return Err(Error::invalid("empty training set"));
    }
    if train_ds.num_classes > model.config.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes but model was built for {}",
            train_ds.num_classes, model.config.num_classes
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("batch size and epochs must be positive"));
    }
    model.norm = ChannelNorm::from_train_split(train_ds);

    let steps_per_epoch = train_ds.n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let schedule = Schedule::new(
        cfg.lr,
        ((total_steps as f64 * cfg.warmup_frac).round() as usize).min(total_steps),
        total_steps,
    );
    let mut opt = AdamW::new(
        AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() },
        model.store.len(),
    );
    let workers = if cfg.deterministic { 1 } else { worker_count() };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idxs: Vec<usize> = (0..train_ds.n).collect();
    let mut metrics = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        idxs.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for batch_idxs in idxs.chunks(cfg.batch_size) {
            let lr = schedule.lr_at(step);
            let (loss, correct) =
                train_step(model, train_ds, batch_idxs, cfg, &mut opt, lr, step, workers)?;
            epoch_loss += loss * batch_idxs.len() as f64;
            epoch_correct += correct;
            step += 1;
        }
        metrics.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss: epoch_loss / train_ds.n as f64,
            top1: epoch_correct as f64 / train_ds.n as f64,
        });
        if let Some(test) = test_ds {
            let (top1, loss) = evaluate(model, test, cfg.batch_size)?;
            metrics.push(EpochMetrics { epoch, split: "test".into(), loss, top1 });
            if cfg.early_stop_top1.is_some_and(|target| top1 >= target) {
                break;
            }
        }
    }
    Ok(metrics)
}

/// Eval-mode top-1 accuracy and mean unsmoothed loss.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if ds.n == 0 {
        return Err(Error::invalid("empty evaluation set"));
    }
    let idxs: Vec<usize> = (0..ds.n).collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for chunk in idxs.chunks(batch_size.max(1)) {
        let images = ds.batch::<T>(chunk, &model.norm)?;
        let labels = ds.batch_labels(chunk);
        let mut tape = Tape::new();
        let pass = model.forward_on_tape(&mut tape, &images, None)?;
        // Loss accumulates at f64 so the reported mean is independent of
        // how samples are grouped into chunks.
        let logits64 = tape.value(pass.logits).cast::<f64>();
        let (chunk_loss, _) = crate::ops::cross_entropy_mean(&logits64, &labels, 0.0)?;
        loss_sum += chunk_loss * chunk.len() as f64;
        let logits = tape.value(pass.logits);
        let classes = logits.dims()[1];
        for (b, &label) in labels.iter().enumerate() {
            let row = &logits.as_slice()[b * classes..(b + 1) * classes];
            if argmax_lowest(row) == label {
                correct += 1;
            }
        }
    }
    Ok((correct as f64 / ds.n as f64, loss_sum / ds.n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::model::{build_model, ModelConfig};

    fn micro() -> Model<f32> {
        build_model::<f32>(&ModelConfig { drop_path: 0.0, ..ModelConfig::micro() }, 1).unwrap()
    }

    fn tiny_synth(n: usize, seed: u64) -> Dataset {
        synth_dataset(10, n, 32, seed).unwrap()
    }


    #[test]
    fn zero_lr_keeps_parameters_fixed() {
        let mut model = micro();
        let before: Vec<_> =
            model.store.iter().map(|(_, p)| p.value.clone()).collect();
        let ds = tiny_synth(8, 3);
        let cfg = TrainConfig { epochs: 1, batch_size: 4, lr: 0.0, ..Default::default() };
        train(&mut model, &ds, None, &cfg).unwrap();
        for ((_, p), b) in model.store.iter().zip(before.iter()) {
            assert!(p.value.bitwise_eq(b), "{} changed under lr=0", p.name);
        }
    }

    #[test]
    fn deterministic_mode_is_bitwise_reproducible() {
        let ds = tiny_synth(16, 7);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 1e-3,
            seed: 42,
            deterministic: true,
            ..Default::default()
        };
        let run = || {
            let mut model = micro();
            let metrics = train(&mut model, &ds, None, &cfg).unwrap();
            (metrics.last().unwrap().loss, model)
        };
        let (loss_a, model_a) = run();
        let (loss_b, model_b) = run();
        assert_eq!(loss_a.to_bits(), loss_b.to_bits());
        for ((_, a), (_, b)) in model_a.store.iter().zip(model_b.store.iter()) {
            assert!(a.value.bitwise_eq(&b.value), "{}", a.name);
        }
    }

    #[test]
    fn identity_init_evaluation_matches_class_zero_frequency() {
        // Uniform logits + lowest-index tie-break => predicted class is
        // always 0, so accuracy equals the class-0 frequency exactly and
        // the unsmoothed loss is ln(classes).
        let model = micro();
        let ds = tiny_synth(30, 5);
        let class0 = ds.labels.iter().filter(|&&l| l == 0).count() as f64 / ds.n as f64;
        let (top1, loss) = evaluate(&model, &ds, 16).unwrap();
        assert_eq!(top1, class0);
        assert!((loss - (10.0f64).ln()).abs() < 1e-5, "loss {loss}");
    }

    #[test]
    fn evaluation_is_invariant_under_shuffling() {
        let mut model = micro();
        let ds = tiny_synth(20, 9);
        // Give the head real weights so logits differ across classes.
        let wid = model.store.by_name("head.fc.w").unwrap();
        let dims = model.store.get(wid).value.dims().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::from_fn(dims, |_| {
            use rand::Rng;
            rng.random_range(-0.5..0.5)
        })
        .unwrap();
        model.store.set_value(wid, w);

        let (top1_a, loss_a) = evaluate(&model, &ds, 7).unwrap();
        // Shuffled copy: same samples, different order.
        let mut order: Vec<usize> = (0..ds.n).collect();
        order.shuffle(&mut rng);
        let plane = 3 * ds.h * ds.w;
        let mut images = Vec::with_capacity(ds.images.len());
        let mut labels = Vec::with_capacity(ds.n);
        for &i in &order {
            images.extend_from_slice(ds.image(i));
            labels.push(ds.labels[i]);
        }
        let shuffled = Dataset {
            images,
            labels,
            n: ds.n,
            h: ds.h,
            w: ds.w,
            num_classes: ds.num_classes,
        };
        assert_eq!(shuffled.image(3).len(), plane);
        let (top1_b, loss_b) = evaluate(&model, &shuffled, 7).unwrap();
        assert_eq!(top1_a, top1_b);
        assert!((loss_a - loss_b).abs() < 1e-9);
    }

    #[test]
    fn divergence_guard_reports_step() {
        let mut model = micro();
        let ds = tiny_synth(8, 2);
        // An absurd learning rate sends parameters to overflow within a
        // couple of steps; the guard must fire rather than loop on NaNs.
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr: 1e30,
            warmup_frac: 0.0,
            ..Default::default()
        };
        let err = train(&mut model, &ds, None, &cfg).err().expect("should diverge");
        let msg = err.to_string();
        assert!(msg.contains("step") || msg.contains("non-finite"), "{msg}");
    }

    #[test]
    fn metrics_csv_schema_is_stable() {
        let rows = vec![
            EpochMetrics { epoch: 0, split: "train".into(), loss: 2.302585, top1: 0.1 },
            EpochMetrics { epoch: 0, split: "test".into(), loss: 2.302585, top1: 0.1015 },
        ];
        let csv = metrics_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,split,loss,top1");
        assert_eq!(lines.next().unwrap(), "0,train,2.302585,0.100000");
        assert_eq!(lines.next().unwrap(), "0,test,2.302585,0.101500");
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_index() {
        assert_eq!(argmax_lowest(&[1.0f32, 1.0, 1.0]), 0);
        assert_eq!(argmax_lowest(&[0.0f32, 2.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[0.0f32, -1.0, 3.0]), 2);
    }

    #[test]
    fn sharding_covers_all_indices_in_order() {
        let idxs: Vec<usize> = (0..10).collect();
        let parts = shards(&idxs, 3);
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0], &[0, 1, 2, 3]);
        assert_eq!(parts[1], &[4, 5, 6]);
        assert_eq!(parts[2], &[7, 8, 9]);
        let parts = shards(&idxs[..2], 8);
        assert_eq!(parts.len(), 2);
    }

    #[test]
    fn loss_decreases_on_learnable_data() {
        // Short sanity run: 10 steps on an easy frequency-separable set
        // must reduce the training loss from ln(10).
        let mut model = micro();
        let ds = tiny_synth(32, 11);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            warmup_frac: 0.2,
            ..Default::default()
        };
        let metrics = train(&mut model, &ds, None, &cfg).unwrap();
        let first = metrics.first().unwrap().loss;
        let last = metrics.last().unwrap().loss;
        assert!((first - (10.0f64).ln()).abs() < 0.05, "first-epoch loss {first}");
        assert!(last < first - 0.2, "no learning: {first} -> {last}");
    }
}
