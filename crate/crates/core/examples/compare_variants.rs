//! Trains the classic and accumulated networks from the same seed on the
//! same data and reports the validation error of each.
//!
//! cargo run --release --example compare_variants -- [depth] [epochs] [per_class]

use acrn::data::{Split, SyntheticConfig, CIFAR_CLASSES};
use acrn::layers::Parameterized;
use acrn::model::{build_model, ModelSpec, Variant};
use acrn::train::{summarize, train, TrainConfig};

fn main() -> acrn::Result<()> {
    let arg = |i: usize, default: usize| {
        std::env::args()
            .nth(i)
            .and_then(|a| a.parse().ok())
            .unwrap_or(default)
    };
    let (depth, epochs, per_class) = (arg(1, 8), arg(2, 6), arg(3, 40));

    let data = SyntheticConfig {
        noise: 0.8,
        jitter: 8.0,
        ..SyntheticConfig::new(CIFAR_CLASSES, per_class, 0)
    };
    let train_set = data.generate(Split::Train);
    let val_set = SyntheticConfig {
        per_class: per_class / 4 + 1,
        ..data
    }
    .generate(Split::Test);
    let config = TrainConfig {
        epochs,
        milestones: TrainConfig::scaled_milestones(epochs),
        ..TrainConfig::default()
    };

    for variant in [Variant::Classic, Variant::Accumulated] {
        let mut model = build_model::<f32>(ModelSpec::new(depth, variant)?, 0);
        let params = model.parameter_count();
        let records = train(&mut model, &train_set, &val_set, &config)?;
        let s = summarize(&records)?;
        let last = records.last().expect("at least one epoch");
        println!(
            "{variant:<12} depth {depth}  {params:>7} params  final train loss {:.4}  min top-1 {:5.2}  avg top-1 {:5.2}",
            last.train_loss, s.min_top1, s.avg_top1
        );
    }
    Ok(())
}
