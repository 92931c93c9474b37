mod common;

use acrn::tensor::{ConvGeometry, Tensor};
use common::{conv2d_direct, max_abs_diff, random_conv_case, uniform};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_direct_loops_on_random_configurations() {
    for seed in 0..100 {
        let case = random_conv_case(seed);
        let fast = case.x.conv2d(&case.k, case.stride, case.padding).unwrap();
        let slow = conv2d_direct(&case.x, &case.k, case.stride, case.padding);
        let diff = max_abs_diff(&fast, &slow);
        assert!(diff <= 1e-6, "seed {seed}: diff {diff}");
    }
}

#[test]
fn f32_path_agrees_with_f64() {
    let case = random_conv_case(7);
    let fast = case
        .x
        .cast::<f32>()
        .conv2d(&case.k.cast::<f32>(), case.stride, case.padding)
        .unwrap()
        .cast::<f64>();
    let slow = conv2d_direct(&case.x, &case.k, case.stride, case.padding);
    assert!(max_abs_diff(&fast, &slow) < 1e-4);
}

#[test]
fn output_side_uses_floor_division() {
    let g = ConvGeometry::new(&[1, 1, 7, 7], &[1, 1, 3, 3], 2, 1).unwrap();
    assert_eq!(g.output_shape(), [1, 1, 4, 4]);
    let g = ConvGeometry::new(&[1, 1, 32, 32], &[16, 1, 1, 1], 2, 0).unwrap();
    assert_eq!(g.output_shape(), [1, 16, 16, 16]);
}

#[test]
fn rejects_channel_mismatch_and_even_kernels() {
    let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
    assert!(x.conv2d(&Tensor::zeros(&[1, 3, 3, 3]), 1, 1).is_err());
    assert!(x.conv2d(&Tensor::zeros(&[1, 2, 2, 2]), 1, 1).is_err());
    assert!(x.conv2d(&Tensor::zeros(&[1, 2, 3, 3]), 0, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn linear_in_the_input(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let case = random_conv_case(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let y = uniform(case.x.shape(), &mut rng);
        let mixed = case.x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = mixed.conv2d(&case.k, case.stride, case.padding).unwrap();
        let rhs = case.x.conv2d(&case.k, case.stride, case.padding).unwrap().scale(a)
            .add(&y.conv2d(&case.k, case.stride, case.padding).unwrap().scale(b)).unwrap();
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-9);
    }

    #[test]
    fn finite_inputs_give_finite_outputs(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let case = random_conv_case(seed);
        let out = case.x.scale(scale).conv2d(&case.k, case.stride, case.padding).unwrap();
        prop_assert!(out.all_finite());
    }

    #[test]
    fn identity_kernel_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&[2, 3, 5, 6], &mut rng);
        let mut k = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            k.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let y = x.conv2d(&k, 1, 1).unwrap();
        prop_assert!(max_abs_diff(&x, &y) == 0.0);
    }
}
