//! Residual blocks.
//!
//! A classic block computes `relu(F(x) + shortcut(x))`. An accumulated block
//! replaces the shortcut with a running sum of batch-normalized block inputs:
//!
//! ```text
//! acc ← BN_i(shortcut(x_i))          if the shape differs from the running sum
//! acc ← acc + BN_i(shortcut(x_i))    otherwise
//! y_i = relu(F_i(x_i) + acc)
//! ```
//!
//! `F` is `conv3x3(stride) → BN → relu → conv3x3 → BN` in both kinds. The
//! shortcut is the identity, or a strided 1x1 projection on blocks that change
//! shape; on an accumulated block that projection always starts a new sum.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, Conv2dLayer, Mode, Param, Parameterized};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Classic,
    Accumulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub kind: BlockKind,
}

impl BlockSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        kind: BlockKind,
    ) -> Result<Self> {
        let spec = BlockSpec {
            in_channels,
            out_channels,
            stride,
            kind,
        };
        let valid = match stride {
            1 => out_channels == in_channels,
            2 => out_channels == 2 * in_channels,
            _ => false,
        };
        if !valid || in_channels == 0 {
            return Err(Error::Config(format!(
                "block {in_channels}->{out_channels} with stride {stride}: stride 1 keeps the channel count, stride 2 doubles it"
            )));
        }
        Ok(spec)
    }

    pub fn changes_shape(&self) -> bool {
        self.stride != 1
    }
}

/// What an accumulated block adds to `F(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualPath {
    /// Running sum of normalized block inputs.
    #[default]
    Accumulator,
    /// The classic shortcut; the accumulator is left untouched.
    Identity,
}

/// Running sum of normalized block inputs since the last shape change. One
/// instance lives for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ResidualAccumulator {
    value: Option<Var>,
    shape: Option<Vec<usize>>,
    reinitializations: usize,
    additions: usize,
}

impl ResidualAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self) -> Option<Var> {
        self.value
    }

    /// `[C, H, W]` of the accumulated tensors.
    pub fn shape(&self) -> Option<&[usize]> {
        self.shape.as_deref()
    }

    pub fn reinitializations(&self) -> usize {
        self.reinitializations
    }

    pub fn additions(&self) -> usize {
        self.additions
    }

    /// Folds `term` in, restarting the sum when its `[C, H, W]` differs from
    /// the current one. Returns `true` on a restart.
    pub fn accumulate<T: Scalar>(&mut self, tape: &Tape<T>, term: Var) -> Result<bool> {
        let shape = tape.shape(term)[1..].to_vec();
        match self.value {
            Some(acc) if self.shape.as_deref() == Some(shape.as_slice()) => {
                self.value = Some(tape.add(acc, term)?);
                self.additions += 1;
                Ok(false)
            }
            _ => {
                self.value = Some(term);
                self.shape = Some(shape);
                self.reinitializations += 1;
                Ok(true)
            }
        }
    }
}

/// Tape handles produced by one accumulated block.
#[derive(Debug, Clone, Copy)]
pub struct AccumulatedStep {
    pub output: Var,
    /// The normalized input folded into the accumulator (or the plain
    /// shortcut under [`ResidualPath::Identity`]).
    pub term: Var,
    /// Accumulator value after this block; `None` under
    /// [`ResidualPath::Identity`].
    pub accumulator: Option<Var>,
    pub reinitialized: bool,
}

#[derive(Debug, Clone)]
pub struct ResidualBlock<T: Scalar> {
    pub spec: BlockSpec,
    pub conv1: Conv2dLayer<T>,
    pub bn1: BatchNormLayer<T>,
    pub conv2: Conv2dLayer<T>,
    pub bn2: BatchNormLayer<T>,
    pub projection: Option<Conv2dLayer<T>>,
    pub accumulator_bn: Option<BatchNormLayer<T>>,
    pub residual_path: ResidualPath,
}

impl<T: Scalar> ResidualBlock<T> {
    /// Kernels are drawn from `rng` in the order conv1, conv2, projection, so
    /// both kinds consume the same random stream.
    pub fn new(spec: BlockSpec, rng: &mut impl Rng) -> Self {
        let conv1 = Conv2dLayer::new(spec.in_channels, spec.out_channels, 3, spec.stride, rng);
        let conv2 = Conv2dLayer::new(spec.out_channels, spec.out_channels, 3, 1, rng);
        let projection = spec
            .changes_shape()
            .then(|| Conv2dLayer::new(spec.in_channels, spec.out_channels, 1, spec.stride, rng));
        let accumulator_bn =
            (spec.kind == BlockKind::Accumulated).then(|| BatchNormLayer::new(spec.out_channels));
        ResidualBlock {
            spec,
            conv1,
            bn1: BatchNormLayer::new(spec.out_channels),
            conv2,
            bn2: BatchNormLayer::new(spec.out_channels),
            projection,
            accumulator_bn,
            residual_path: ResidualPath::Accumulator,
        }
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                op: "residual_block",
                left: shape,
                right: vec![self.spec.in_channels],
            });
        }
        Ok(())
    }

    /// `F(x)`.
    pub fn residual_fn(&mut self, tape: &Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.bn1.forward(tape, h, mode)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h)?;
        self.bn2.forward(tape, h, mode)
    }

    /// Identity, or the 1x1 projection on shape-changing blocks.
    pub fn shortcut(&mut self, tape: &Tape<T>, x: Var) -> Result<Var> {
        match &mut self.projection {
            Some(p) => p.forward(tape, x),
            None => Ok(x),
        }
    }

    pub fn forward_classic(&mut self, tape: &Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        if self.spec.kind != BlockKind::Classic {
            return Err(Error::Config(
                "forward_classic called on an accumulated block".into(),
            ));
        }
        self.check_input(tape, x)?;
        let f = self.residual_fn(tape, x, mode)?;
        let s = self.shortcut(tape, x)?;
        let sum = tape.add(f, s)?;
        Ok(tape.relu(sum))
    }

    pub fn forward_accumulated(
        &mut self,
        tape: &Tape<T>,
        x: Var,
        acc: &mut ResidualAccumulator,
        mode: Mode,
    ) -> Result<AccumulatedStep> {
        if self.spec.kind != BlockKind::Accumulated {
            return Err(Error::Config(
                "forward_accumulated called on a classic block".into(),
            ));
        }
        self.check_input(tape, x)?;
        let f = self.residual_fn(tape, x, mode)?;
        let s = self.shortcut(tape, x)?;
        if self.residual_path == ResidualPath::Identity {
            let sum = tape.add(f, s)?;
            return Ok(AccumulatedStep {
                output: tape.relu(sum),
                term: s,
                accumulator: None,
                reinitialized: false,
            });
        }
        let bn = self
            .accumulator_bn
            .as_mut()
            .expect("accumulated block has an accumulator norm");
        let term = bn.forward(tape, s, mode)?;
        let reinitialized = acc.accumulate(tape, term)?;
        let total = acc
            .value()
            .expect("accumulator holds a value after accumulate");
        let sum = tape.add(f, total)?;
        Ok(AccumulatedStep {
            output: tape.relu(sum),
            term,
            accumulator: Some(total),
            reinitialized,
        })
    }

    /// Runs the block according to its kind. `acc` is ignored by classic blocks.
    pub fn forward(
        &mut self,
        tape: &Tape<T>,
        x: Var,
        acc: &mut ResidualAccumulator,
        mode: Mode,
    ) -> Result<Var> {
        match self.spec.kind {
            BlockKind::Classic => self.forward_classic(tape, x, mode),
            BlockKind::Accumulated => Ok(self.forward_accumulated(tape, x, acc, mode)?.output),
        }
    }

    pub fn batch_norms(&self) -> Vec<&BatchNormLayer<T>> {
        let mut v = vec![&self.bn1, &self.bn2];
        v.extend(self.accumulator_bn.as_ref());
        v
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormLayer<T>> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        v.extend(self.accumulator_bn.as_mut());
        v
    }
}

impl<T: Scalar> Parameterized<T> for ResidualBlock<T> {
    /// `[k1, g1, b1, k2, g2, b2]`, then the projection kernel, then the
    /// accumulator norm's `[gamma, beta]`.
    fn parameters(&self) -> Vec<&Param<T>> {
        let mut p = vec![
            &self.conv1.kernel,
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.conv2.kernel,
            &self.bn2.gamma,
            &self.bn2.beta,
        ];
        if let Some(proj) = &self.projection {
            p.push(&proj.kernel);
        }
        if let Some(bn) = &self.accumulator_bn {
            p.extend([&bn.gamma, &bn.beta]);
        }
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = vec![
            &mut self.conv1.kernel,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.kernel,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
        ];
        if let Some(proj) = &mut self.projection {
            p.push(&mut proj.kernel);
        }
        if let Some(bn) = &mut self.accumulator_bn {
            p.extend([&mut bn.gamma, &mut bn.beta]);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(spec: BlockSpec, seed: u64) -> ResidualBlock<f64> {
        ResidualBlock::new(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn spec_validation() {
        assert!(BlockSpec::new(16, 16, 1, BlockKind::Classic).is_ok());
        assert!(BlockSpec::new(16, 32, 2, BlockKind::Accumulated).is_ok());
        assert!(BlockSpec::new(16, 32, 1, BlockKind::Classic).is_err());
        assert!(BlockSpec::new(16, 16, 2, BlockKind::Classic).is_err());
        assert!(BlockSpec::new(16, 48, 3, BlockKind::Classic).is_err());
    }

    #[test]
    fn parameter_layouts() {
        let classic = block(BlockSpec::new(4, 4, 1, BlockKind::Classic).unwrap(), 0);
        let shapes: Vec<_> = classic
            .parameters()
            .iter()
            .map(|p| p.value.shape().to_vec())
            .collect();
        assert_eq!(
            shapes,
            vec![
                vec![4, 4, 3, 3],
                vec![4],
                vec![4],
                vec![4, 4, 3, 3],
                vec![4],
                vec![4]
            ]
        );

        let acc = block(BlockSpec::new(4, 4, 1, BlockKind::Accumulated).unwrap(), 0);
        assert_eq!(acc.parameters().len(), 8);
        assert_eq!(acc.parameters()[6].value.data(), &[1.0; 4]);
        assert_eq!(acc.parameters()[7].value.data(), &[0.0; 4]);

        let proj = block(BlockSpec::new(4, 8, 2, BlockKind::Classic).unwrap(), 0);
        assert_eq!(proj.parameters().len(), 7);
        assert_eq!(proj.parameters()[6].value.shape(), &[8, 4, 1, 1]);
    }

    #[test]
    fn classic_and_accumulated_share_kernels_under_one_seed() {
        let c = block(BlockSpec::new(4, 8, 2, BlockKind::Classic).unwrap(), 9);
        let a = block(BlockSpec::new(4, 8, 2, BlockKind::Accumulated).unwrap(), 9);
        for (pc, pa) in c.parameters().iter().zip(a.parameters()) {
            assert_eq!(pc.value, pa.value);
        }
    }

    #[test]
    fn zero_residual_collapses_to_relu() {
        let mut b = block(BlockSpec::new(3, 3, 1, BlockKind::Classic).unwrap(), 1);
        b.conv1.kernel.value.fill(0.0);
        b.conv2.kernel.value.fill(0.0);
        let x = random_input(&[2, 3, 5, 5], 2);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = b.forward_classic(&tape, xv, Mode::Training).unwrap();
        assert_eq!(*tape.value(y), x.relu());

        let negative = tape.constant(x.map(|v| -v.abs() - 0.1));
        let y = b.forward_classic(&tape, negative, Mode::Training).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut b = block(BlockSpec::new(3, 3, 1, BlockKind::Classic).unwrap(), 1);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
        assert!(matches!(
            b.forward_classic(&tape, x, Mode::Training),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut a = block(BlockSpec::new(3, 3, 1, BlockKind::Accumulated).unwrap(), 1);
        let mut acc = ResidualAccumulator::new();
        assert!(a
            .forward_accumulated(&tape, x, &mut acc, Mode::Training)
            .is_err());
        assert!(acc.value().is_none());
    }

    #[test]
    fn wrong_kind_is_an_error() {
        let mut b = block(BlockSpec::new(3, 3, 1, BlockKind::Classic).unwrap(), 1);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 4, 4]));
        assert!(b
            .forward_accumulated(&tape, x, &mut ResidualAccumulator::new(), Mode::Training)
            .is_err());
    }

    #[test]
    fn first_block_with_standardized_input() {
        let mut b = block(BlockSpec::new(2, 2, 1, BlockKind::Accumulated).unwrap(), 4);
        b.conv1.kernel.value.fill(0.0);
        b.conv2.kernel.value.fill(0.0);
        // Each channel holds ±1 in equal numbers: mean 0, variance 1.
        let x = Tensor::from_fn(&[2, 2, 2, 2], |i| [1.0, -1.0, -1.0, 1.0][i % 4]);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut acc = ResidualAccumulator::new();
        let step = b
            .forward_accumulated(&tape, xv, &mut acc, Mode::Training)
            .unwrap();
        assert!(step.reinitialized);
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        let acc_value = tape.value(step.accumulator.unwrap());
        for (a, v) in acc_value.data().iter().zip(x.data()) {
            assert!((a - v * scale).abs() < 1e-12);
        }
        let y = tape.value(step.output);
        for (a, v) in y.data().iter().zip(x.relu().data()) {
            assert!((a - v * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_change_restarts_the_sum() {
        let tape = Tape::new();
        let mut a = block(BlockSpec::new(2, 4, 2, BlockKind::Accumulated).unwrap(), 5);
        let mut acc = ResidualAccumulator::new();
        let stale = tape.constant(random_input(&[2, 2, 6, 6], 6));
        acc.accumulate(&tape, stale).unwrap();
        let x = tape.constant(random_input(&[2, 2, 6, 6], 7));
        let step = a
            .forward_accumulated(&tape, x, &mut acc, Mode::Training)
            .unwrap();
        assert!(step.reinitialized);
        assert_eq!(step.accumulator, Some(step.term));
        assert_eq!(acc.shape(), Some(&[4, 3, 3][..]));
        assert_eq!(acc.reinitializations(), 2);
        assert_eq!(acc.additions(), 0);
    }

    #[test]
    fn three_blocks_sum_their_terms() {
        let tape = Tape::new();
        let spec = BlockSpec::new(3, 3, 1, BlockKind::Accumulated).unwrap();
        let mut blocks: Vec<_> = (0..3).map(|s| block(spec, 10 + s)).collect();
        let mut acc = ResidualAccumulator::new();
        let mut x = tape.constant(random_input(&[2, 3, 4, 4], 11));
        let mut terms = Vec::new();
        for b in &mut blocks {
            let step = b
                .forward_accumulated(&tape, x, &mut acc, Mode::Training)
                .unwrap();
            terms.push(tape.value(step.term));
            x = step.output;
        }
        let expected = terms[0].add(&terms[1]).unwrap().add(&terms[2]).unwrap();
        assert_eq!(*tape.value(acc.value().unwrap()), expected);
        assert_eq!((acc.reinitializations(), acc.additions()), (1, 2));
    }

    #[test]
    fn identity_path_matches_classic() {
        let x = random_input(&[2, 4, 6, 6], 12);
        for stride in [1, 2] {
            let out = 4 * stride;
            let mut c = block(
                BlockSpec::new(4, out, stride, BlockKind::Classic).unwrap(),
                13,
            );
            let mut a = block(
                BlockSpec::new(4, out, stride, BlockKind::Accumulated).unwrap(),
                13,
            );
            a.residual_path = ResidualPath::Identity;
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let yc = c.forward_classic(&tape, xv, Mode::Training).unwrap();
            let ya = a
                .forward_accumulated(&tape, xv, &mut ResidualAccumulator::new(), Mode::Training)
                .unwrap();
            assert_eq!(*tape.value(yc), *tape.value(ya.output));
        }
    }
}
