//! The CIFAR network: stem conv, three stages of residual blocks at 16, 32
//! and 64 channels, global average pooling and a dense classifier.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::blocks::{BlockKind, BlockSpec, ResidualAccumulator, ResidualBlock, ResidualPath};
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, Conv2dLayer, DenseLayer, Mode, Param, Parameterized};
use crate::tensor::Scalar;

pub const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
pub const NUM_CLASSES: usize = 10;
pub const INPUT_SHAPE: [usize; 3] = [3, 32, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Classic,
    Accumulated,
}

impl Variant {
    pub fn block_kind(self) -> BlockKind {
        match self {
            Variant::Classic => BlockKind::Classic,
            Variant::Accumulated => BlockKind::Accumulated,
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Variant::Classic => 0,
            Variant::Accumulated => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Variant::Classic),
            1 => Some(Variant::Accumulated),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Classic => "classic",
            Variant::Accumulated => "accumulated",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classic" => Ok(Variant::Classic),
            "accumulated" => Ok(Variant::Accumulated),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?}, expected classic or accumulated"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub depth: usize,
    pub variant: Variant,
    pub num_classes: usize,
}

impl ModelSpec {
    /// `depth` must be of the form `6n + 2` with `n ≥ 1`.
    pub fn new(depth: usize, variant: Variant) -> Result<Self> {
        if depth < 8 || depth % 6 != 2 {
            return Err(Error::Config(format!(
                "depth {depth} is not of the form 6n+2 with n >= 1 (8, 14, 20, 26, 32, ...)"
            )));
        }
        Ok(ModelSpec {
            depth,
            variant,
            num_classes: NUM_CLASSES,
        })
    }

    pub fn blocks_per_stage(&self) -> usize {
        (self.depth - 2) / 6
    }

    pub fn block_count(&self) -> usize {
        3 * self.blocks_per_stage()
    }

    pub fn block_specs(&self) -> Vec<BlockSpec> {
        let kind = self.variant.block_kind();
        let mut specs = Vec::with_capacity(self.block_count());
        let mut channels = STAGE_CHANNELS[0];
        for (stage, &out) in STAGE_CHANNELS.iter().enumerate() {
            for i in 0..self.blocks_per_stage() {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                specs.push(
                    BlockSpec::new(channels, out, stride, kind).expect("stage layout is valid"),
                );
                channels = out;
            }
        }
        specs
    }
}

/// Per-block tape handles collected by [`Model::forward_traced`].
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    pub input: Var,
    pub output: Var,
    /// Normalized input folded into the accumulator (accumulated variant).
    pub term: Option<Var>,
    /// Accumulator value after the block (accumulated variant).
    pub accumulator: Option<Var>,
    pub reinitialized: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Output of the stem, i.e. the input of the first block.
    pub stem: Var,
    pub blocks: Vec<BlockTrace>,
    pub accumulator: ResidualAccumulator,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub stem_conv: Conv2dLayer<T>,
    pub stem_bn: BatchNormLayer<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub head: DenseLayer<T>,
    /// Input standardization computed from the training split.
    pub input_stats: Option<ChannelStats>,
}

/// Builds a model with He-normal kernels drawn from `seed`. Both variants
/// draw the same values for their shared structure.
pub fn build_model<T: Scalar>(spec: ModelSpec, seed: u64) -> Model<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem_conv = Conv2dLayer::new(INPUT_SHAPE[0], STAGE_CHANNELS[0], 3, 1, &mut rng);
    let blocks = spec
        .block_specs()
        .into_iter()
        .map(|b| ResidualBlock::new(b, &mut rng))
        .collect();
    let head = DenseLayer::new(STAGE_CHANNELS[2], spec.num_classes, &mut rng);
    Model {
        spec,
        stem_conv,
        stem_bn: BatchNormLayer::new(STAGE_CHANNELS[0]),
        blocks,
        head,
        input_stats: None,
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Self {
        build_model(spec, seed)
    }

    /// Logits `[N, classes]` for images `[N, 3, 32, 32]`.
    pub fn forward(&mut self, tape: &Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward_traced(tape, x, mode)?.0)
    }

    pub fn forward_traced(
        &mut self,
        tape: &Tape<T>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, ForwardTrace)> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != INPUT_SHAPE {
            return Err(Error::InvalidShape {
                op: "model",
                reason: format!("expected [N, 3, 32, 32] images, got {shape:?}"),
            });
        }
        let h = self.stem_conv.forward(tape, x)?;
        let h = self.stem_bn.forward(tape, h, mode)?;
        let stem = tape.relu(h);

        let mut acc = ResidualAccumulator::new();
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut h = stem;
        for block in &mut self.blocks {
            let trace = match block.spec.kind {
                BlockKind::Classic => BlockTrace {
                    input: h,
                    output: block.forward_classic(tape, h, mode)?,
                    term: None,
                    accumulator: None,
                    reinitialized: false,
                },
                BlockKind::Accumulated => {
                    let step = block.forward_accumulated(tape, h, &mut acc, mode)?;
                    BlockTrace {
                        input: h,
                        output: step.output,
                        term: Some(step.term),
                        accumulator: step.accumulator,
                        reinitialized: step.reinitialized,
                    }
                }
            };
            h = trace.output;
            traces.push(trace);
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits = self.head.forward(tape, pooled)?;
        Ok((
            logits,
            ForwardTrace {
                stem,
                blocks: traces,
                accumulator: acc,
            },
        ))
    }

    /// Switches every accumulated block between its accumulator and the
    /// classic shortcut.
    pub fn set_residual_path(&mut self, path: ResidualPath) {
        for b in &mut self.blocks {
            b.residual_path = path;
        }
    }

    /// All batch norm layers in registry order.
    pub fn batch_norms(&self) -> Vec<&BatchNormLayer<T>> {
        let mut v = vec![&self.stem_bn];
        for b in &self.blocks {
            v.extend(b.batch_norms());
        }
        v
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormLayer<T>> {
        let mut v = vec![&mut self.stem_bn];
        for b in &mut self.blocks {
            v.extend(b.batch_norms_mut());
        }
        v
    }
}

impl<T: Scalar> Parameterized<T> for Model<T> {
    fn parameters(&self) -> Vec<&Param<T>> {
        let mut p = vec![
            &self.stem_conv.kernel,
            &self.stem_bn.gamma,
            &self.stem_bn.beta,
        ];
        for b in &self.blocks {
            p.extend(b.parameters());
        }
        p.extend(self.head.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = vec![
            &mut self.stem_conv.kernel,
            &mut self.stem_bn.gamma,
            &mut self.stem_bn.beta,
        ];
        for b in &mut self.blocks {
            p.extend(b.parameters_mut());
        }
        p.extend(self.head.parameters_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn depth_validation() {
        assert!(ModelSpec::new(33, Variant::Classic).is_err());
        assert!(ModelSpec::new(2, Variant::Classic).is_err());
        let err = ModelSpec::new(33, Variant::Classic)
            .unwrap_err()
            .to_string();
        assert!(err.contains("6n+2"), "{err}");
    }

    #[test]
    fn block_layouts() {
        let spec = ModelSpec::new(32, Variant::Accumulated).unwrap();
        assert_eq!(spec.blocks_per_stage(), 5);
        let blocks = spec.block_specs();
        assert_eq!(blocks.len(), 15);
        let strided: Vec<usize> = blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.stride == 2)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(strided, vec![5, 10]);
        for (i, b) in blocks.iter().enumerate() {
            let out = STAGE_CHANNELS[i / 5];
            assert_eq!(b.out_channels, out);
            if b.stride == 2 {
                assert_eq!(b.in_channels * 2, out);
            } else {
                assert_eq!(b.in_channels, out);
            }
        }
        let small = ModelSpec::new(8, Variant::Classic).unwrap();
        assert_eq!(small.block_specs().len(), 3);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("classic".parse::<Variant>().unwrap(), Variant::Classic);
        assert_eq!(
            "accumulated".parse::<Variant>().unwrap(),
            Variant::Accumulated
        );
        assert!("resnet".parse::<Variant>().is_err());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let mut m: Model<f32> = build_model(ModelSpec::new(8, Variant::Classic).unwrap(), 0);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 16, 16]));
        assert!(m.forward(&tape, x, Mode::Inference).is_err());
    }
}
