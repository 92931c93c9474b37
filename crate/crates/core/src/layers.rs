//! Parameterized layers: convolution, batch normalization and the dense
//! classifier head.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether batch norm uses batch statistics (and updates its running
/// statistics) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// A learned tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether weight decay applies.
    pub decay: bool,
    bound: Option<Var>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            value,
            grad,
            decay,
            bound: None,
        }
    }

    /// Places the current value on `tape` as a gradient-receiving leaf.
    pub fn bind(&mut self, tape: &Tape<T>) -> Var {
        let var = tape.leaf(self.value.clone());
        self.bound = Some(var);
        var
    }

    /// Tape handle from the most recent [`Param::bind`].
    pub fn bound(&self) -> Option<Var> {
        self.bound
    }

    /// Adds this parameter's gradient from `grads` into the buffer.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        if let Some(g) = self.bound.and_then(|v| grads.get(v)) {
            self.grad
                .add_assign(g)
                .expect("gradient shape matches parameter");
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Anything owning learned parameters, listed in a fixed order.
pub trait Parameterized<T: Scalar> {
    fn parameters(&self) -> Vec<&Param<T>>;

    fn parameters_mut(&mut self) -> Vec<&mut Param<T>>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }

    fn accumulate_grads(&mut self, grads: &Gradients<T>) {
        for p in self.parameters_mut() {
            p.accumulate(grads);
        }
    }

    fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }
}

/// Zero-mean Gaussian with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng)))
}

/// 3x3 (or 1x1) convolution without bias.
#[derive(Debug, Clone)]
pub struct Conv2dLayer<T: Scalar> {
    pub kernel: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        size: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [out_channels, in_channels, size, size];
        Conv2dLayer {
            kernel: Param::new(he_normal(&shape, in_channels * size * size, rng), true),
            stride,
            padding: size / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.value.shape()[0]
    }

    pub fn forward(&mut self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let k = self.kernel.bind(tape);
        tape.conv2d(x, k, self.stride, self.padding)
    }
}

impl<T: Scalar> Parameterized<T> for Conv2dLayer<T> {
    fn parameters(&self) -> Vec<&Param<T>> {
        vec![&self.kernel]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.kernel]
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Param::new(Tensor::ones(&[channels]), false),
            beta: Param::new(Tensor::zeros(&[channels]), false),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: T::from_f64_lossy(BN_MOMENTUM),
            epsilon: T::from_f64_lossy(BN_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Normalizes `x` per channel. In training mode the running statistics
    /// move towards the batch statistics; the variance update uses the
    /// unbiased estimate.
    pub fn forward(&mut self, tape: &Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = self.gamma.bind(tape);
        let beta = self.beta.bind(tape);
        match mode {
            Mode::Training => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, self.epsilon)?;
                let m = self.momentum;
                let keep = T::one() - m;
                let n = T::from_usize(stats.count).unwrap();
                let unbiased = n / (n - T::one());
                for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
                    *r = keep * *r + m * b * unbiased;
                }
                Ok(y)
            }
            Mode::Inference => tape.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                self.epsilon,
            ),
        }
    }
}

impl<T: Scalar> Parameterized<T> for BatchNormLayer<T> {
    fn parameters(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Fully connected layer, `weight: [out, in]`.
#[derive(Debug, Clone)]
pub struct DenseLayer<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        DenseLayer {
            weight: Param::new(he_normal(&[fan_out, fan_in], fan_in, rng), true),
            bias: Param::new(Tensor::zeros(&[fan_out]), false),
        }
    }

    pub fn forward(&mut self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        let b = self.bias.bind(tape);
        tape.linear(x, w, b)
    }
}

impl<T: Scalar> Parameterized<T> for DenseLayer<T> {
    fn parameters(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Mean cross-entropy of `logits: [N, K]` against integer labels.
pub fn softmax_cross_entropy<T: Scalar>(
    tape: &Tape<T>,
    logits: Var,
    labels: &[usize],
) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Index of the largest logit per row; the lowest index wins ties.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    if logits.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "argmax",
            reason: format!("expected [N, K], got {:?}", logits.shape()),
        });
    }
    let k = logits.shape()[1];
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn channel_input(values: &[f64]) -> Tensor<f64> {
        Tensor::new(&[1, 1, 1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn batchnorm_symmetric_channel() {
        let mut bn = BatchNormLayer::<f64>::new(1);
        let tape = Tape::new();
        let x = tape.constant(channel_input(&[-3.0, 0.0, 3.0]));
        let y = tape.value(bn.forward(&tape, x, Mode::Training).unwrap());
        let expected = 3.0 / (6.0f64 + 1e-5).sqrt();
        assert!((expected - 1.22474).abs() < 1e-5);
        for (got, want) in y.data().iter().zip([-expected, 0.0, expected]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn batchnorm_constant_channel_maps_to_beta() {
        let mut bn = BatchNormLayer::<f64>::new(1);
        bn.beta.value.data_mut()[0] = 5.0;
        let tape = Tape::new();
        let x = tape.constant(channel_input(&[0.7; 6]));
        let y = tape.value(bn.forward(&tape, x, Mode::Training).unwrap());
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-9));
    }

    #[test]
    fn batchnorm_zero_gamma_yields_beta() {
        let mut bn = BatchNormLayer::<f64>::new(2);
        bn.gamma.value.fill(0.0);
        bn.beta.value.data_mut().copy_from_slice(&[1.5, -2.0]);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| {
            (i * i) as f64 * 0.3 - 1.0
        }));
        let y = tape.value(bn.forward(&tape, x, Mode::Training).unwrap());
        for (i, &v) in y.data().iter().enumerate() {
            let c = (i / 4) % 2;
            assert_eq!(v, [1.5, -2.0][c]);
        }
    }

    #[test]
    fn batchnorm_rejects_single_value_channel_in_training() {
        let mut bn = BatchNormLayer::<f32>::new(3);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(matches!(
            bn.forward(&tape, x, Mode::Training),
            Err(Error::BatchTooSmall(1))
        ));
        assert!(bn.forward(&tape, x, Mode::Inference).is_ok());
    }

    #[test]
    fn batchnorm_running_stats_update() {
        let mut bn = BatchNormLayer::<f64>::new(1);
        let tape = Tape::new();
        let x = tape.constant(channel_input(&[1.0, 3.0]));
        bn.forward(&tape, x, Mode::Training).unwrap();
        // batch mean 2, biased var 1, unbiased var 2
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_inference_uses_running_stats() {
        let mut bn = BatchNormLayer::<f64>::new(1);
        bn.running_mean.data_mut()[0] = 1.0;
        bn.running_var.data_mut()[0] = 4.0 - 1e-5;
        let tape = Tape::new();
        let x = tape.constant(channel_input(&[1.0, 5.0]));
        let y = tape.value(bn.forward(&tape, x, Mode::Inference).unwrap());
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 2.0).abs() < 1e-12);
        assert_eq!(bn.running_mean.data(), &[1.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::<f64>::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 10]));
        let loss = tape.softmax_cross_entropy(uniform, &[0, 4, 9]).unwrap();
        assert!((tape.value(loss).data()[0] - 10f64.ln()).abs() < 1e-12);

        let mut sat = Tensor::zeros(&[1, 10]);
        sat.data_mut()[7] = 1000.0;
        let sat = tape.constant(sat);
        let loss = tape.softmax_cross_entropy(sat, &[7]).unwrap();
        assert!(tape.value(loss).data()[0].abs() < 1e-12);

        let l = tape.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = tape.softmax_cross_entropy(l, &[2]).unwrap();
        assert!((tape.value(loss).data()[0] - 0.40761).abs() < 1e-5);

        assert!(matches!(
            tape.softmax_cross_entropy(l, &[3]),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn parameter_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2dLayer::<f32>::new(2, 4, 3, 1, &mut rng);
        assert_eq!(conv.parameters().len(), 1);
        assert_eq!(conv.parameters()[0].value.shape(), &[4, 2, 3, 3]);
        let bn = BatchNormLayer::<f32>::new(4);
        let p = bn.parameters();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].value.data(), &[1.0; 4]);
        assert_eq!(p[1].value.data(), &[0.0; 4]);
        let dense = DenseLayer::<f32>::new(8, 3, &mut rng);
        let p = dense.parameters();
        assert_eq!(p[0].value.shape(), &[3, 8]);
        assert_eq!(p[1].value.shape(), &[3]);
    }

    #[test]
    fn he_normal_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k: Tensor<f64> = he_normal(&[64, 16, 3, 3], 144, &mut rng);
        let n = k.len() as f64;
        let mean = k.sum() / n;
        let var = k.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01);
        assert!((var.sqrt() - (2.0f64 / 144.0).sqrt()).abs() < 0.005);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        let l = Tensor::new(&[2, 3], vec![1.0f32, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&l).unwrap(), vec![0, 1]);
    }
}
