//! SGD training, evaluation and per-epoch metrics.

use std::io::{self, Write};
use std::time::Instant;

use crate::autodiff::Tape;
use crate::data::{BatchPlan, ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::layers::{argmax_rows, softmax_cross_entropy, Mode, Param, Parameterized};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

pub const METRICS_HEADER: &str =
    "epoch,train_loss,train_acc,val_loss,val_acc,val_top1_err,wall_seconds";

/// Batch size used by [`evaluate`].
pub const EVAL_BATCH: usize = 250;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch counts after which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    pub augment: bool,
    /// Record elapsed time in [`MetricsRecord::wall_seconds`]; zero otherwise.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![25, 40],
            lr_decay: 0.1,
            seed: 0,
            augment: true,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    /// The 25/40-of-50 schedule scaled to `epochs`.
    pub fn scaled_milestones(epochs: usize) -> Vec<usize> {
        let mut m: Vec<usize> = [0.5, 0.8]
            .iter()
            .map(|f| (epochs as f64 * f).round() as usize)
            .filter(|&e| e >= 1 && e <= epochs)
            .collect();
        m.dedup();
        m
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return bad(format!("learning rate {} must be positive", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            ));
        }
        if self.lr_decay.is_nan() || self.lr_decay <= 0.0 {
            return bad(format!(
                "learning rate decay {} must be positive",
                self.lr_decay
            ));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "milestones {:?} must be strictly increasing",
                self.milestones
            ));
        }
        if let Some(&m) = self
            .milestones
            .iter()
            .find(|&&m| m < 1 || m > self.epochs.max(1))
        {
            return bad(format!("milestone {m} outside [1, {}]", self.epochs));
        }
        Ok(())
    }

    /// Learning rate for the zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Percent.
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// `100 - val_accuracy`.
    pub val_top1_error: f64,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.train_loss,
            self.train_accuracy,
            self.val_loss,
            self.val_accuracy,
            self.val_top1_error,
            self.wall_seconds
        )
    }
}

pub fn write_metrics_csv(mut w: impl Write, records: &[MetricsRecord]) -> io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// `v ← momentum·v + g + weight_decay·w; w ← w − lr·v`.
pub fn sgd_update<T: Scalar>(
    w: &mut [T],
    g: &[T],
    v: &mut [T],
    lr: T,
    momentum: T,
    weight_decay: T,
) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *w);
        *w -= lr * *v;
    }
}

/// SGD with momentum. Weight decay applies only to parameters flagged with
/// [`Param::decay`] (convolution and dense weights).
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: T::from_f64_lossy(momentum),
            weight_decay: T::from_f64_lossy(weight_decay),
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param<T>>, lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let lr = T::from_f64_lossy(lr);
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            if p.value.shape() != v.shape() || p.grad.shape() != v.shape() {
                return Err(Error::shape("sgd_step", p.value.shape(), v.shape()));
            }
            let wd = if p.decay {
                self.weight_decay
            } else {
                T::zero()
            };
            sgd_update(
                p.value.data_mut(),
                p.grad.data(),
                v.data_mut(),
                lr,
                self.momentum,
                wd,
            );
        }
        Ok(())
    }
}

/// One forward/backward/update on a prepared batch. Returns the batch loss
/// and the number of correct predictions, both measured before the update.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    sgd: &mut Sgd<T>,
    images: Tensor<T>,
    labels: &[usize],
    lr: f64,
) -> Result<(f64, usize)> {
    let tape = Tape::new();
    let x = tape.constant(images);
    let logits = model.forward(&tape, x, Mode::Training)?;
    let loss = softmax_cross_entropy(&tape, logits, labels)?;
    let loss_value = tape.value(loss).data()[0].to_f64_lossy();
    let correct = argmax_rows(&tape.value(logits))?
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    let grads = tape.backward(loss)?;
    model.zero_grads();
    model.accumulate_grads(&grads);
    sgd.step(model.parameters_mut(), lr)?;
    Ok((loss_value, correct))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        100.0 * self.correct as f64 / self.total.max(1) as f64
    }

    pub fn top1_error(&self) -> f64 {
        100.0 - self.accuracy()
    }
}

/// Mean loss and top-1 error with inference-mode batch norm. Images are
/// standardized with the model's input statistics, if any.
pub fn evaluate(model: &mut Model<f32>, dataset: &Dataset) -> Result<Evaluation> {
    let stats = model.input_stats.unwrap_or(ChannelStats::IDENTITY);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let tape = Tape::new();
        let x = tape.constant(dataset.batch(chunk, &stats, None));
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
        let logits = model.forward(&tape, x, Mode::Inference)?;
        let loss = softmax_cross_entropy(&tape, logits, &labels)?;
        loss_sum += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
        correct += argmax_rows(&tape.value(logits))?
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(Evaluation {
        loss: loss_sum / dataset.len().max(1) as f64,
        correct,
        total: dataset.len(),
    })
}

/// Trains `model` in place and returns one record per epoch.
pub fn train(
    model: &mut Model<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<MetricsRecord>> {
    train_with(model, train_set, val_set, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut Model<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if model.input_stats.is_none() {
        model.input_stats = Some(ChannelStats::from_dataset(train_set)?);
    }
    let stats = model.input_stats.unwrap();
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let started = Instant::now();
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let plan = BatchPlan {
            batch_size: config.batch_size,
            seed: config.seed,
            epoch,
            drop_last: false,
        };
        let mut augment_rng = plan.augment_rng();
        let lr = config.lr_at(epoch);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in plan.batches(train_set.len()) {
            let rng = config.augment.then_some(&mut augment_rng);
            let images = train_set.batch(&batch, &stats, rng);
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, hits) = train_step(model, &mut sgd, images, &labels, lr)?;
            loss_sum += loss * batch.len() as f64;
            correct += hits;
        }
        let val = evaluate(model, val_set)?;
        let record = MetricsRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: 100.0 * correct as f64 / train_set.len() as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy(),
            val_top1_error: val.top1_error(),
            wall_seconds: if config.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub min_top1: f64,
    pub avg_top1: f64,
}

/// Minimum and mean validation top-1 error over all epochs.
pub fn summarize(records: &[MetricsRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::EmptyMetrics);
    }
    let errors = records.iter().map(|r| r.val_top1_error);
    Ok(Summary {
        min_top1: errors.clone().fold(f64::INFINITY, f64::min),
        avg_top1: errors.sum::<f64>() / records.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(err: f64) -> MetricsRecord {
        MetricsRecord {
            epoch: 1,
            train_loss: 0.0,
            train_accuracy: 0.0,
            val_loss: 0.0,
            val_accuracy: 100.0 - err,
            val_top1_error: err,
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn sgd_examples() {
        let (mut w, mut v) = ([1.0f64], [0.0]);
        sgd_update(&mut w, &[0.5], &mut v, 0.1, 0.0, 0.0);
        assert!((w[0] - 0.95).abs() < 1e-15);

        let (mut w, mut v) = ([0.7f64], [0.0]);
        sgd_update(&mut w, &[0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(w[0], 0.7);

        let (mut w, mut v) = ([0.0f64], [0.0]);
        sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((w[0] + 0.1).abs() < 1e-15);
        sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((w[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_skips_norm_parameters() {
        let mut weight = Param::new(Tensor::full(&[3], 2.0f64), true);
        let mut gamma = Param::new(Tensor::full(&[3], 1.5f64), false);
        let mut sgd = Sgd::new(0.0, 0.1);
        for step in 1..=3 {
            sgd.step(vec![&mut weight, &mut gamma], 0.5).unwrap();
            let expected = 2.0 * 0.95f64.powi(step);
            assert!(weight
                .value
                .data()
                .iter()
                .all(|&w| (w - expected).abs() < 1e-12));
            assert_eq!(gamma.value.data(), &[1.5; 3]);
        }
    }

    #[test]
    fn sgd_rejects_mismatched_parameters() {
        let mut a = Param::new(Tensor::zeros(&[2]), true);
        let mut b = Param::new(Tensor::zeros(&[3]), true);
        let mut sgd = Sgd::<f32>::new(0.9, 0.0);
        sgd.step(vec![&mut a], 0.1).unwrap();
        assert!(sgd.step(vec![&mut b], 0.1).is_err());
        assert!(sgd.step(vec![&mut a, &mut b], 0.1).is_err());
    }

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(24), 0.1);
        assert!((c.lr_at(25) - 0.01).abs() < 1e-12);
        assert!((c.lr_at(40) - 0.001).abs() < 1e-12);
        assert_eq!(TrainConfig::scaled_milestones(50), vec![25, 40]);
        assert_eq!(TrainConfig::scaled_milestones(15), vec![8, 12]);
        assert_eq!(TrainConfig::scaled_milestones(1), vec![1]);
        assert!(TrainConfig::scaled_milestones(0).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                base_lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                milestones: vec![40, 25],
                ..Default::default()
            },
            TrainConfig {
                milestones: vec![60],
                ..Default::default()
            },
            TrainConfig {
                milestones: vec![0],
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn summarize_examples() {
        let s = summarize(&[record(10.0), record(20.0), record(30.0)]).unwrap();
        assert_eq!((s.min_top1, s.avg_top1), (10.0, 20.0));
        let s = summarize(&[record(12.65)]).unwrap();
        assert_eq!((s.min_top1, s.avg_top1), (12.65, 12.65));
        assert!(matches!(summarize(&[]), Err(Error::EmptyMetrics)));
    }

    #[test]
    fn csv_format() {
        let mut out = Vec::new();
        let r = MetricsRecord {
            epoch: 3,
            train_loss: 1.5,
            train_accuracy: 40.0,
            val_loss: 1.25,
            val_accuracy: 45.5,
            val_top1_error: 54.5,
            wall_seconds: 0.0,
        };
        write_metrics_csv(&mut out, &[r]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "epoch,train_loss,train_acc,val_loss,val_acc,val_top1_err,wall_seconds\n\
             3,1.500000,40.000000,1.250000,45.500000,54.500000,0.000000\n"
        );
    }
}
