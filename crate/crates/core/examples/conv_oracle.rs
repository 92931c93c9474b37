//! Checks the im2col convolution against a direct loop on random shapes.
//!
//! cargo run --release --example conv_oracle -- [cases]

use acrn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn direct(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, ks) = (k.shape()[0], k.shape()[2]);
    let (oh, ow) = (
        (h + 2 * pad - ks) / stride + 1,
        (w + 2 * pad - ks) / stride + 1,
    );
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for b in 0..n {
        for f in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for u in 0..ks {
                            for v in 0..ks {
                                let (y, z) = (
                                    (i * stride + u) as isize - pad as isize,
                                    (j * stride + v) as isize - pad as isize,
                                );
                                if (0..h as isize).contains(&y) && (0..w as isize).contains(&z) {
                                    acc += x.at(&[b, ch, y as usize, z as usize])
                                        * k.at(&[f, ch, u, v]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn main() {
    let cases: u64 = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(100);
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dim = |hi: usize| rng.random_range(1..=hi);
        let (n, c, o, h, w) = (dim(4), dim(4), dim(4), dim(10), dim(10));
        let size = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let x = Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-1.0..1.0));
        let k = Tensor::from_fn(&[o, c, size, size], |_| rng.random_range(-1.0..1.0));
        let fast = x.conv2d(&k, stride, size / 2).expect("valid geometry");
        let slow = direct(&x, &k, stride, size / 2);
        let diff = fast
            .data()
            .iter()
            .zip(&slow)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
        if seed < 5 {
            println!(
                "x {:?} k {:?} stride {stride} -> {:?}  max |diff| {diff:.2e}",
                x.shape(),
                k.shape(),
                fast.shape()
            );
        }
    }
    println!("{cases} cases, worst max |diff| {worst:.2e}");
}
