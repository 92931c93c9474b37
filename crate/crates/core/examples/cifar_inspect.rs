//! Loads the CIFAR-10 binary files and prints split sizes, label counts and
//! channel statistics.
//!
//! cargo run --release --example cifar_inspect -- path/to/cifar-10-batches-bin

use acrn::data::{load_cifar10, ChannelStats, CIFAR_CLASSES};

fn main() {
    let Some(dir) = std::env::args()
        .nth(1)
        .or_else(|| std::env::var("ACRN_DATA_DIR").ok())
    else {
        eprintln!("usage: cifar_inspect <dir>  (or set ACRN_DATA_DIR)");
        std::process::exit(2);
    };
    let (train, test) = match load_cifar10(&dir) {
        Ok(sets) => sets,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(3);
        }
    };
    for (name, set) in [("train", &train), ("test", &test)] {
        println!(
            "{name}: {} images, labels {:?}",
            set.len(),
            set.label_counts(CIFAR_CLASSES)
        );
    }
    match ChannelStats::from_dataset(&train) {
        Ok(s) => println!("train channel mean {:?} std {:?}", s.mean, s.std),
        Err(e) => eprintln!("error: {e}"),
    }
}
