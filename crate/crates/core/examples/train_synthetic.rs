//! Trains a small accumulated network on generated images and writes the
//! per-epoch metrics CSV.
//!
//! cargo run --release --example train_synthetic -- [epochs] [metrics.csv]

use std::fs::File;

use acrn::data::{Split, SyntheticConfig, CIFAR_CLASSES};
use acrn::model::{build_model, ModelSpec, Variant};
use acrn::train::{summarize, train_with, write_metrics_csv, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let out = args
        .next()
        .unwrap_or_else(|| "synthetic_metrics.csv".into());

    let data = SyntheticConfig::new(CIFAR_CLASSES, 30, 0);
    let (train_set, val_set) = (
        data.generate(Split::Train),
        SyntheticConfig {
            per_class: 10,
            ..data
        }
        .generate(Split::Test),
    );
    let config = TrainConfig {
        epochs,
        batch_size: 64,
        milestones: TrainConfig::scaled_milestones(epochs),
        ..TrainConfig::default()
    };
    let mut model = build_model::<f32>(ModelSpec::new(8, Variant::Accumulated)?, 0);
    let records = train_with(&mut model, &train_set, &val_set, &config, |r| {
        println!(
            "epoch {:>2}  loss {:.4}  train acc {:5.1}%  val err {:5.1}%",
            r.epoch, r.train_loss, r.train_accuracy, r.val_top1_error
        );
    })?;
    write_metrics_csv(File::create(&out)?, &records)?;
    if let Ok(s) = summarize(&records) {
        println!(
            "min_top1={:.2} avg_top1={:.2}; metrics in {out}",
            s.min_top1, s.avg_top1
        );
    }
    Ok(())
}
