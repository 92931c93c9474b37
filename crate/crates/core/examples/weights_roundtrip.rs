//! Trains briefly, saves the weights, reloads them and confirms the reloaded
//! model scores identically.
//!
//! cargo run --release --example weights_roundtrip

use acrn::data::{Split, SyntheticConfig, CIFAR_CLASSES};
use acrn::model::{build_model, ModelSpec, Variant};
use acrn::train::{evaluate, train, TrainConfig};
use acrn::weights::{encode_weights, load_weights, save_weights};

fn main() -> acrn::Result<()> {
    let data = SyntheticConfig::new(CIFAR_CLASSES, 8, 1);
    let (train_set, val_set) = (data.generate(Split::Train), data.generate(Split::Test));
    let mut model = build_model::<f32>(ModelSpec::new(8, Variant::Accumulated)?, 1);
    let config = TrainConfig {
        epochs: 2,
        batch_size: 32,
        milestones: vec![1],
        ..TrainConfig::default()
    };
    train(&mut model, &train_set, &val_set, &config)?;

    let path = std::env::temp_dir().join("acrn_roundtrip.acrn");
    save_weights(&model, &path)?;
    let mut reloaded = load_weights(&path)?;
    println!(
        "{} bytes written to {}",
        encode_weights(&model).len(),
        path.display()
    );

    let before = evaluate(&mut model, &val_set)?;
    let after = evaluate(&mut reloaded, &val_set)?;
    println!(
        "original: loss {:.6} top-1 err {:.2}",
        before.loss,
        before.top1_error()
    );
    println!(
        "reloaded: loss {:.6} top-1 err {:.2}",
        after.loss,
        after.top1_error()
    );
    assert_eq!(before, after, "reloaded model must score identically");
    assert_eq!(encode_weights(&model), encode_weights(&reloaded));
    std::fs::remove_file(&path).ok();
    Ok(())
}
