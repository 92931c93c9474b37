//! The named gradient checks run by `acrn gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_module, GradCheckReport, Tape, Var};
use crate::blocks::{BlockKind, BlockSpec, ResidualAccumulator, ResidualBlock};
use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, DenseLayer, Mode, Param, Parameterized};
use crate::tensor::Tensor;

pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-3;

pub const CHECKS: [&str; 8] = [
    "conv2d",
    "batchnorm",
    "batchnorm_inference",
    "dense",
    "softmax_xent",
    "classic_block",
    "accumulated_block",
    "accumulated_transition",
];

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random non-default affine parameters and running statistics.
fn perturb_norm(bn: &mut BatchNormLayer<f64>, rng: &mut impl Rng) {
    let c = bn.channels();
    bn.gamma.value = uniform(&[c], 0.5, 1.5, rng);
    bn.beta.value = uniform(&[c], -0.5, 0.5, rng);
    bn.running_mean = uniform(&[c], -0.2, 0.2, rng);
    bn.running_var = uniform(&[c], 0.5, 2.0, rng);
}

/// Blocks run in sequence through one accumulator.
struct BlockStack(Vec<ResidualBlock<f64>>);

impl BlockStack {
    fn new(specs: &[BlockSpec], rng: &mut ChaCha8Rng) -> Self {
        let mut blocks: Vec<ResidualBlock<f64>> =
            specs.iter().map(|&s| ResidualBlock::new(s, rng)).collect();
        for b in &mut blocks {
            for bn in b.batch_norms_mut() {
                perturb_norm(bn, rng);
            }
        }
        BlockStack(blocks)
    }

    fn forward(&mut self, tape: &Tape<f64>, x: Var) -> Result<Var> {
        let mut acc = ResidualAccumulator::new();
        let mut h = x;
        for b in &mut self.0 {
            h = b.forward(tape, h, &mut acc, Mode::Training)?;
        }
        Ok(h)
    }
}

impl Parameterized<f64> for BlockStack {
    fn parameters(&self) -> Vec<&Param<f64>> {
        self.0.iter().flat_map(|b| b.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.0.iter_mut().flat_map(|b| b.parameters_mut()).collect()
    }
}

/// Fixture draws considered per block check.
const FIXTURE_ATTEMPTS: usize = 32;

fn block_check(
    specs: &[BlockSpec],
    input: &[usize],
    rng: &mut ChaCha8Rng,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let out_channels = specs.last().expect("non-empty stack").out_channels;
    let out_side = specs
        .iter()
        .fold(input[2], |side, s| side.div_ceil(s.stride));
    // Keep the draw whose ReLU inputs sit farthest from the kink, so that
    // difference steps rarely straddle it.
    let mut best: Option<(f64, BlockStack, Tensor<f64>)> = None;
    for _ in 0..FIXTURE_ATTEMPTS {
        let mut stack = BlockStack::new(specs, rng);
        let x = uniform(input, -1.0, 1.0, rng);
        let tape = Tape::with_kink_tracking();
        let v = tape.constant(x.clone());
        stack.forward(&tape, v)?;
        let margin = tape.relu_margin();
        if best.as_ref().is_none_or(|(m, _, _)| margin > *m) {
            best = Some((margin, stack, x));
        }
    }
    let (_, mut stack, x) = best.expect("at least one fixture draw");
    let w = uniform(
        &[input[0], out_channels, out_side, out_side],
        -1.0,
        1.0,
        rng,
    );
    grad_check_module(
        &mut stack,
        &[x],
        |s, tape, v| {
            let y = s.forward(tape, v[0])?;
            tape.weighted_sum(y, &w)
        },
        h,
        tol,
    )
}

/// Runs one named check in 64-bit. The scalar loss is a random weighting of
/// the layer output, so every output coordinate contributes.
pub fn run_check(name: &str, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "conv2d" => {
            let x = uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng);
            let k = uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng);
            let w = uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut rng);
            grad_check(
                |tape, v| {
                    let y = tape.conv2d(v[0], v[1], 2, 1)?;
                    tape.weighted_sum(y, &w)
                },
                &[x, k],
                h,
                tol,
            )
        }
        "batchnorm" | "batchnorm_inference" => {
            let mode = if name == "batchnorm" {
                Mode::Training
            } else {
                Mode::Inference
            };
            let mut bn = BatchNormLayer::new(3);
            perturb_norm(&mut bn, &mut rng);
            let x = uniform(&[4, 3, 3, 3], -2.0, 2.0, &mut rng);
            let w = uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng);
            grad_check_module(
                &mut bn,
                &[x],
                |bn, tape, v| {
                    let y = bn.forward(tape, v[0], mode)?;
                    tape.weighted_sum(y, &w)
                },
                h,
                tol,
            )
        }
        "dense" => {
            let mut dense = DenseLayer::new(5, 3, &mut rng);
            dense.bias.value = uniform(&[3], -0.5, 0.5, &mut rng);
            let x = uniform(&[4, 5], -1.0, 1.0, &mut rng);
            let w = uniform(&[4, 3], -1.0, 1.0, &mut rng);
            grad_check_module(
                &mut dense,
                &[x],
                |d, tape, v| {
                    let y = d.forward(tape, v[0])?;
                    tape.weighted_sum(y, &w)
                },
                h,
                tol,
            )
        }
        "softmax_xent" => {
            let logits = uniform(&[4, 5], -3.0, 3.0, &mut rng);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            grad_check(
                |tape, v| tape.softmax_cross_entropy(v[0], &labels),
                &[logits],
                h,
                tol,
            )
        }
        "classic_block" => {
            let specs = [
                BlockSpec::new(4, 4, 1, BlockKind::Classic)?,
                BlockSpec::new(4, 8, 2, BlockKind::Classic)?,
            ];
            block_check(&specs, &[2, 4, 6, 6], &mut rng, h, tol)
        }
        "accumulated_block" => {
            let spec = BlockSpec::new(4, 4, 1, BlockKind::Accumulated)?;
            block_check(&[spec, spec], &[4, 4, 4, 4], &mut rng, h, tol)
        }
        "accumulated_transition" => {
            let specs = [
                BlockSpec::new(4, 4, 1, BlockKind::Accumulated)?,
                BlockSpec::new(4, 8, 2, BlockKind::Accumulated)?,
                BlockSpec::new(8, 8, 1, BlockKind::Accumulated)?,
            ];
            block_check(&specs, &[2, 4, 6, 6], &mut rng, h, tol)
        }
        other => Err(Error::Config(format!(
            "unknown check {other:?}; available: {}",
            CHECKS.join(", ")
        ))),
    }
}

/// Runs every check, or only `only` when given.
pub fn run_checks(
    only: Option<&str>,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<Vec<(&'static str, GradCheckReport)>> {
    if let Some(name) = only {
        if !CHECKS.contains(&name) {
            return Err(Error::Config(format!(
                "unknown check {name:?}; available: {}",
                CHECKS.join(", ")
            )));
        }
    }
    CHECKS
        .iter()
        .filter(|&&c| only.is_none_or(|o| o == c))
        .map(|&c| Ok((c, run_check(c, seed, h, tol)?)))
        .collect()
}
