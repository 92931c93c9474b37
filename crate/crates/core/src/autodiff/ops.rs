use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Scalar, Tensor};

use super::{BackwardRule, Tape, Var};

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divided by the number of values per channel).
    pub var: Vec<T>,
    /// Values per channel, `N * H * W`.
    pub count: usize,
}

struct AddRule;

impl<T: Scalar> BackwardRule<T> for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.clone()), Some(grad.clone())]
    }
}

struct ReluRule;

impl<T: Scalar> BackwardRule<T> for ReluRule {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let g = grad
            .zip_map(
                output,
                "relu",
                |g, y| if y > T::zero() { g } else { T::zero() },
            )
            .expect("same shape");
        vec![Some(g)]
    }
}

struct SumRule;

impl<T: Scalar> BackwardRule<T> for SumRule {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.data()[0]))]
    }
}

struct WeightedSumRule<T> {
    weights: Tensor<T>,
}

impl<T: Scalar> BackwardRule<T> for WeightedSumRule<T> {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(self.weights.scale(grad.data()[0]))]
    }
}

struct Conv2dRule {
    geometry: ConvGeometry,
}

impl<T: Scalar> BackwardRule<T> for Conv2dRule {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let (x, k) = (inputs[0], inputs[1]);
        let g = &self.geometry;
        let dx = tensor::conv2d_grad_input(g, k.data(), grad.data());
        let dk = tensor::conv2d_grad_kernel(g, x.data(), grad.data());
        vec![
            Some(Tensor::new(x.shape(), dx).expect("input shape")),
            Some(Tensor::new(k.shape(), dk).expect("kernel shape")),
        ]
    }
}

struct AvgPoolRule;

impl<T: Scalar> BackwardRule<T> for AvgPoolRule {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let shape = inputs[0].shape();
        let plane = shape[2] * shape[3];
        let inv = T::one() / T::from_usize(plane).unwrap();
        let mut dx = Tensor::zeros(shape);
        for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(grad.data()) {
            chunk.fill(g * inv);
        }
        vec![Some(dx)]
    }
}

/// `y = x · wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
struct LinearRule;

impl<T: Scalar> BackwardRule<T> for LinearRule {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, fan_in) = (x.shape()[0], x.shape()[1]);
        let fan_out = w.shape()[0];
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(
            n,
            fan_out,
            fan_in,
            T::one(),
            grad.data(),
            fan_out as isize,
            1,
            w.data(),
            fan_in as isize,
            1,
            T::zero(),
            dx.data_mut(),
            fan_in as isize,
            1,
        );
        let mut dw = Tensor::zeros(w.shape());
        T::gemm(
            fan_out,
            n,
            fan_in,
            T::one(),
            grad.data(),
            1,
            fan_out as isize,
            x.data(),
            fan_in as isize,
            1,
            T::zero(),
            dw.data_mut(),
            fan_in as isize,
            1,
        );
        let mut db = Tensor::zeros(&[fan_out]);
        for row in grad.data().chunks(fan_out) {
            for (b, &g) in db.data_mut().iter_mut().zip(row) {
                *b += g;
            }
        }
        vec![Some(dx), Some(dw), Some(db)]
    }
}

/// Iterates the `H * W` planes of channel `c` in an `N, C, H, W` buffer.
fn channel_planes(
    n: usize,
    c: usize,
    channels: usize,
    plane: usize,
) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).map(move |b| {
        let start = (b * channels + c) * plane;
        start..start + plane
    })
}

struct BatchNormTrainRule<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BackwardRule<T> for BatchNormTrainRule<T> {
    fn name(&self) -> &'static str {
        "batch_norm_train"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let [n, channels, h, w] = tensor::dims4("batch_norm", x.shape()).expect("rank 4");
        let plane = h * w;
        let count = T::from_usize(n * plane).unwrap();
        let xhat = self.normalized.data();
        let dy = grad.data();
        let mut dx = Tensor::zeros(x.shape());
        let mut dgamma = Tensor::zeros(&[channels]);
        let mut dbeta = Tensor::zeros(&[channels]);
        for c in 0..channels {
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for r in channel_planes(n, c, channels, plane) {
                for i in r {
                    sum_dy += dy[i];
                    sum_dy_xhat += dy[i] * xhat[i];
                }
            }
            dgamma.data_mut()[c] = sum_dy_xhat;
            dbeta.data_mut()[c] = sum_dy;
            let g = gamma.data()[c];
            let scale = g * self.inv_std[c] / count;
            let out = dx.data_mut();
            for r in channel_planes(n, c, channels, plane) {
                for i in r {
                    out[i] = scale * (count * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
                }
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

struct BatchNormEvalRule<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BackwardRule<T> for BatchNormEvalRule<T> {
    fn name(&self) -> &'static str {
        "batch_norm_eval"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let [n, channels, h, w] = tensor::dims4("batch_norm", x.shape()).expect("rank 4");
        let plane = h * w;
        let (xs, dy) = (x.data(), grad.data());
        let mut dx = Tensor::zeros(x.shape());
        let mut dgamma = Tensor::zeros(&[channels]);
        let mut dbeta = Tensor::zeros(&[channels]);
        for c in 0..channels {
            let (mean, inv_std) = (self.mean[c], self.inv_std[c]);
            let scale = gamma.data()[c] * inv_std;
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            let out = dx.data_mut();
            for r in channel_planes(n, c, channels, plane) {
                for i in r {
                    sum_dy += dy[i];
                    sum_dy_xhat += dy[i] * (xs[i] - mean) * inv_std;
                    out[i] = dy[i] * scale;
                }
            }
            dgamma.data_mut()[c] = sum_dy_xhat;
            dbeta.data_mut()[c] = sum_dy;
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

struct SoftmaxCrossEntropyRule<T> {
    probs: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> BackwardRule<T> for SoftmaxCrossEntropyRule<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let classes = self.probs.shape()[1];
        let scale = grad.data()[0] / T::from_usize(self.labels.len()).unwrap();
        let mut d = self.probs.clone();
        for (row, &label) in d.data_mut().chunks_mut(classes).zip(&self.labels) {
            row[label] -= T::one();
            row.iter_mut().for_each(|v| *v *= scale);
        }
        vec![Some(d)]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(&self.value(b))?;
        Ok(self.record(&[a, b], value, Box::new(AddRule)))
    }

    pub fn relu(&self, x: Var) -> Var {
        let input = self.value(x);
        self.record_relu_signs(&input);
        let value = input.relu();
        self.record(&[x], value, Box::new(ReluRule))
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.record(&[x], value, Box::new(SumRule))
    }

    /// `Σ weights ⊙ x` as a scalar.
    pub fn weighted_sum(&self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mul(weights)?.sum());
        Ok(self.record(
            &[x],
            value,
            Box::new(WeightedSumRule {
                weights: weights.clone(),
            }),
        ))
    }

    pub fn conv2d(&self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let geometry = ConvGeometry::new(xv.shape(), kv.shape(), stride, padding)?;
        let mut out = Tensor::zeros(&geometry.output_shape());
        tensor::conv2d_forward(&geometry, xv.data(), kv.data(), out.data_mut());
        Ok(self.record(&[x, kernel], out, Box::new(Conv2dRule { geometry })))
    }

    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let value = self.value(x).global_avg_pool()?;
        Ok(self.record(&[x], value, Box::new(AvgPoolRule)))
    }

    /// Dense layer `x · wᵀ + b`.
    pub fn linear(&self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let ok = xv.rank() == 2 && wv.rank() == 2 && xv.shape()[1] == wv.shape()[1];
        if !ok {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        let (n, fan_in, fan_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        if bv.shape() != [fan_out] {
            return Err(Error::shape("linear", wv.shape(), bv.shape()));
        }
        let mut out = Tensor::zeros(&[n, fan_out]);
        for row in out.data_mut().chunks_mut(fan_out) {
            row.copy_from_slice(bv.data());
        }
        T::gemm(
            n,
            fan_in,
            fan_out,
            T::one(),
            xv.data(),
            fan_in as isize,
            1,
            wv.data(),
            1,
            fan_in as isize,
            T::one(),
            out.data_mut(),
            fan_out as isize,
            1,
        );
        Ok(self.record(&[x, weight, bias], out, Box::new(LinearRule)))
    }

    /// Training-mode batch normalization using the statistics of `x` itself.
    /// The gradient flows through the batch mean and variance.
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let [n, channels, h, w] = tensor::dims4("batch_norm", xv.shape())?;
        check_affine(channels, &gv, &bv)?;
        let plane = h * w;
        let count = n * plane;
        if count < 2 {
            return Err(Error::BatchTooSmall(count));
        }
        let xs = xv.data();
        let mut normalized = Tensor::zeros(xv.shape());
        let mut out = Tensor::zeros(xv.shape());
        let mut stats = BatchStats {
            mean: Vec::with_capacity(channels),
            var: Vec::with_capacity(channels),
            count,
        };
        let mut inv_std = Vec::with_capacity(channels);
        for c in 0..channels {
            let mut total = 0.0f64;
            for r in channel_planes(n, c, channels, plane) {
                total += xs[r].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
            }
            let mean = total / count as f64;
            let mut sq = 0.0f64;
            for r in channel_planes(n, c, channels, plane) {
                sq += xs[r]
                    .iter()
                    .map(|v| (v.to_f64_lossy() - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / count as f64;
            let (mean, var) = (T::from_f64_lossy(mean), T::from_f64_lossy(var));
            let istd = T::one() / (var + eps).sqrt();
            let (g, b) = (gv.data()[c], bv.data()[c]);
            for r in channel_planes(n, c, channels, plane) {
                for i in r {
                    let xhat = (xs[i] - mean) * istd;
                    normalized.data_mut()[i] = xhat;
                    out.data_mut()[i] = g * xhat + b;
                }
            }
            stats.mean.push(mean);
            stats.var.push(var);
            inv_std.push(istd);
        }
        let rule = BatchNormTrainRule {
            normalized,
            inv_std,
        };
        Ok((self.record(&[x, gamma, beta], out, Box::new(rule)), stats))
    }

    /// Batch normalization with fixed statistics (inference mode).
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let [n, channels, h, w] = tensor::dims4("batch_norm", xv.shape())?;
        check_affine(channels, &gv, &bv)?;
        if mean.len() != channels || var.len() != channels {
            return Err(Error::shape(
                "batch_norm",
                xv.shape(),
                &[mean.len(), var.len()],
            ));
        }
        let plane = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xs = xv.data();
        let mut out = Tensor::zeros(xv.shape());
        for c in 0..channels {
            let (g, b) = (gv.data()[c], bv.data()[c]);
            for r in channel_planes(n, c, channels, plane) {
                for i in r {
                    out.data_mut()[i] = g * ((xs[i] - mean[c]) * inv_std[c]) + b;
                }
            }
        }
        let rule = BatchNormEvalRule {
            mean: mean.to_vec(),
            inv_std,
        };
        Ok(self.record(&[x, gamma, beta], out, Box::new(rule)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                lv.shape(),
                &[labels.len()],
            ));
        }
        let classes = lv.shape()[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut probs = Tensor::zeros(lv.shape());
        let mut total = T::zero();
        for ((row, p), &label) in lv
            .data()
            .chunks(classes)
            .zip(probs.data_mut().chunks_mut(classes))
            .zip(labels)
        {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp();
                denom += *pi;
            }
            p.iter_mut().for_each(|pi| *pi = *pi / denom);
            total += max + denom.ln() - row[label];
        }
        let loss = total / T::from_usize(labels.len()).unwrap();
        let rule = SoftmaxCrossEntropyRule {
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.record(&[logits], Tensor::scalar(loss), Box::new(rule)))
    }
}

fn check_affine<T: Scalar>(channels: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(Error::shape("batch_norm", gamma.shape(), beta.shape()));
    }
    Ok(())
}
