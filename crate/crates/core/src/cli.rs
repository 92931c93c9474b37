//! Command-line front end: `train`, `eval`, `gradcheck` and `inspect`.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed gradient
//! checks), 2 configuration error, 3 data or weight-file error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::checks;
use crate::data::{load_cifar10, ChannelStats, Dataset, Split, SyntheticConfig, CIFAR_CLASSES};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelSpec, Variant};
use crate::train::{evaluate, summarize, train_with, write_metrics_csv, TrainConfig};
use crate::weights::{load_weights, save_weights};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

/// Environment variable consulted when `--data-dir` is absent.
pub const DATA_DIR_ENV: &str = "ACRN_DATA_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "acrn",
    version,
    about = "Classic and accumulated residual networks on CIFAR-10"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write per-epoch metrics and final weights
    Train(TrainArgs),
    /// Report loss and top-1 error of saved weights
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of every layer and block
    Gradcheck(GradcheckArgs),
    /// Print record counts, label histogram and channel statistics of a dataset
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding the CIFAR-10 binary files [default: $ACRN_DATA_DIR]
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Use generated Gaussian-blob images instead of CIFAR-10
    #[arg(long)]
    synthetic: bool,
    /// Synthetic training images per class
    #[arg(long, default_value_t = 100)]
    synthetic_per_class: usize,
    /// Synthetic validation images per class
    #[arg(long, default_value_t = 20)]
    synthetic_val_per_class: usize,
    /// Standard deviation of synthetic pixel noise
    #[arg(long, default_value_t = 0.05)]
    synthetic_noise: f32,
    /// Standard deviation of the synthetic blob position, in pixels
    #[arg(long, default_value_t = 1.5)]
    synthetic_jitter: f32,
    /// Seed of the synthetic class prototypes and samples
    #[arg(long, default_value_t = 0)]
    synthetic_seed: u64,
    /// Use only the first N training images (0 = all)
    #[arg(long, default_value_t = 0)]
    train_limit: usize,
    /// Use only the first N validation images (0 = all)
    #[arg(long, default_value_t = 0)]
    val_limit: usize,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, val) = if self.synthetic {
            let cfg = SyntheticConfig {
                noise: self.synthetic_noise,
                jitter: self.synthetic_jitter,
                ..SyntheticConfig::new(CIFAR_CLASSES, self.synthetic_per_class, self.synthetic_seed)
            };
            let val_cfg = SyntheticConfig {
                per_class: self.synthetic_val_per_class,
                ..cfg
            };
            (cfg.generate(Split::Train), val_cfg.generate(Split::Test))
        } else {
            let dir = self
                .data_dir
                .clone()
                .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "no data source: pass --data-dir, set {DATA_DIR_ENV}, or use --synthetic"
                    ))
                })?;
            load_cifar10(dir)?
        };
        let limit = |d: Dataset, n: usize| if n == 0 { d } else { d.take(n) };
        Ok((limit(train, self.train_limit), limit(val, self.val_limit)))
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Network variant
    #[arg(long, default_value = "accumulated", value_parser = ["classic", "accumulated"])]
    arch: String,
    /// Network depth, of the form 6n+2
    #[arg(long, default_value_t = 32)]
    depth: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Base learning rate
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Comma-separated epochs after which the learning rate drops 10x
    /// [default: 50% and 80% of --epochs]
    #[arg(long, value_delimiter = ',')]
    milestones: Option<Vec<usize>>,
    /// Seed for initialization, shuffling and augmentation
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable pad-and-crop and horizontal flip augmentation
    #[arg(long)]
    no_augment: bool,
    /// Worker threads for the numeric kernels
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Metrics CSV path
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    /// Final weights path
    #[arg(long, default_value = "weights.acrn")]
    weights_out: PathBuf,
    /// Write 0 in the wall_seconds column so reruns are byte-identical
    #[arg(long)]
    no_timing: bool,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Weight file written by `train`
    #[arg(long, default_value = "weights.acrn")]
    weights: PathBuf,
    /// Expected variant; a mismatch with the weight file is an error [default: from file]
    #[arg(long, value_parser = ["classic", "accumulated"])]
    arch: Option<String>,
    /// Expected depth; a mismatch with the weight file is an error [default: from file]
    #[arg(long)]
    depth: Option<usize>,
    /// Evaluate on the training split instead of the test split
    #[arg(long)]
    on_train: bool,
    /// Worker threads for the numeric kernels
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Maximum accepted relative error
    #[arg(long, default_value_t = checks::DEFAULT_TOL)]
    tol: f64,
    /// Central difference step
    #[arg(long, default_value_t = checks::DEFAULT_STEP)]
    h: f64,
    /// Run a single check (conv2d, batchnorm, batchnorm_inference, dense,
    /// softmax_xent, classic_block, accumulated_block, accumulated_transition)
    #[arg(long)]
    only: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[command(flatten)]
    data: DataArgs,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        e if e.is_data_error() => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}

fn set_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    // The global pool can only be configured once per process.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let variant: Variant = a.arch.parse()?;
    let spec = ModelSpec::new(a.depth, variant)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        base_lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        milestones: a
            .milestones
            .unwrap_or_else(|| TrainConfig::scaled_milestones(a.epochs)),
        lr_decay: 0.1,
        seed: a.seed,
        augment: !a.no_augment,
        record_wall_time: !a.no_timing,
    };
    config.validate()?;
    set_threads(a.threads)?;
    let (train_set, val_set) = a.data.load()?;
    eprintln!(
        "training {variant} depth {} ({} blocks) on {} images, validating on {}",
        spec.depth,
        spec.block_count(),
        train_set.len(),
        val_set.len()
    );

    let mut model = build_model::<f32>(spec, a.seed);
    let records = train_with(&mut model, &train_set, &val_set, &config, |r| {
        eprintln!(
            "epoch {:>3}  train_loss {:.4}  train_acc {:6.2}  val_loss {:.4}  val_top1_err {:6.2}",
            r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_top1_error
        );
    })?;

    let file = File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut w = BufWriter::new(file);
    write_metrics_csv(&mut w, &records)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&a.out, e))?;
    save_weights(&model, &a.weights_out)?;

    match summarize(&records) {
        Ok(s) => println!("min_top1={:.6} avg_top1={:.6}", s.min_top1, s.avg_top1),
        Err(_) => eprintln!("no epochs run"),
    }
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    set_threads(a.threads)?;
    let mut model = load_weights(&a.weights)?;
    if let Some(arch) = &a.arch {
        let expected: Variant = arch.parse()?;
        if expected != model.spec.variant {
            return Err(Error::Format(format!(
                "{} holds a {} model, not {expected}",
                a.weights.display(),
                model.spec.variant
            )));
        }
    }
    if let Some(depth) = a.depth {
        if depth != model.spec.depth {
            return Err(Error::Format(format!(
                "{} holds a depth-{} model, not depth {depth}",
                a.weights.display(),
                model.spec.depth
            )));
        }
    }
    let (train_set, val_set) = a.data.load()?;
    let dataset = if a.on_train { &train_set } else { &val_set };
    let result = evaluate(&mut model, dataset)?;
    println!(
        "loss={:.6} top1_err={:.6}",
        result.loss,
        result.top1_error()
    );
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    if a.h.is_nan() || a.h <= 0.0 || a.tol.is_nan() || a.tol <= 0.0 {
        return Err(Error::Config("--h and --tol must be positive".into()));
    }
    let reports = checks::run_checks(a.only.as_deref(), a.seed, a.h, a.tol)?;
    let mut all_passed = true;
    for (name, report) in &reports {
        let passed = report.passed();
        all_passed &= passed;
        println!(
            "{name:<24} max_rel_err={:.3e} skipped={} {}",
            report.max_rel_error(),
            report.skipped(),
            if passed { "PASS" } else { "FAIL" }
        );
        print!("{report}");
    }
    println!(
        "{} of {} checks passed at tol {:e}",
        reports.iter().filter(|(_, r)| r.passed()).count(),
        reports.len(),
        a.tol
    );
    Ok(if all_passed { EXIT_OK } else { EXIT_RUNTIME })
}

fn cmd_inspect(a: InspectArgs) -> Result<i32> {
    let (train_set, test_set) = a.data.load()?;
    for (name, d) in [("train", &train_set), ("test", &test_set)] {
        println!("{name}: {} records, images {:?}", d.len(), d.images.shape());
        println!("  labels: {:?}", d.label_counts(CIFAR_CLASSES));
        if !d.is_empty() {
            let stats = ChannelStats::from_dataset(d)?;
            println!("  channel mean: {:?}", stats.mean);
            println!("  channel std:  {:?}", stats.std);
        }
    }
    Ok(EXIT_OK)
}
