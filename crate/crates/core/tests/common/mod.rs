#![allow(dead_code)]

use acrn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct seven-loop convolution with zero padding.
pub fn conv2d_direct(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    stride: usize,
    padding: usize,
) -> Tensor<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for b in 0..n {
        for f in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - padding as isize;
                                let z = (j * stride + v) as isize - padding as isize;
                                if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < w {
                                    acc += x.at(&[b, ch, y as usize, z as usize])
                                        * k.at(&[f, ch, u, v]);
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * o + f) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// A random convolution case with N, C ≤ 4, H, W ≤ 10, stride 1 or 2 and an
/// odd kernel no larger than the padded input.
pub struct ConvCase {
    pub x: Tensor<f64>,
    pub k: Tensor<f64>,
    pub stride: usize,
    pub padding: usize,
}

pub fn random_conv_case(seed: u64) -> ConvCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=4);
    let c = rng.random_range(1..=4);
    let o = rng.random_range(1..=4);
    let h = rng.random_range(1..=10);
    let w = rng.random_range(1..=10);
    let size = [1, 3, 5][rng.random_range(0..3)];
    let padding = size / 2;
    let stride = rng.random_range(1..=2);
    ConvCase {
        x: uniform(&[n, c, h, w], &mut rng),
        k: uniform(&[o, c, size, size], &mut rng),
        stride,
        padding,
    }
}

/// Largest absolute difference between two equally shaped tensors.
pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
