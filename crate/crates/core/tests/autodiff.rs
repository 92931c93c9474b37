mod common;

use acrn::autodiff::{grad_check, Tape};
use acrn::checks::{run_check, run_checks, CHECKS, DEFAULT_STEP, DEFAULT_TOL};
use acrn::tensor::Tensor;
use common::uniform;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn conv_sum_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = uniform(&[1, 2, 4, 4], &mut rng);
    let k = uniform(&[3, 2, 3, 3], &mut rng);
    let report = grad_check(
        |tape, v| Ok(tape.sum(tape.conv2d(v[0], v[1], 1, 1)?)),
        &[x, k],
        DEFAULT_STEP,
        DEFAULT_TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
    assert_eq!(report.entries.len(), 2);
}

#[test]
fn every_named_check_passes() {
    let reports = run_checks(None, 0, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    assert_eq!(reports.len(), CHECKS.len());
    for (name, report) in reports {
        assert!(report.passed(), "{name}\n{report}");
    }
}

#[test]
fn unreachable_tolerance_fails() {
    let report = run_check("batchnorm", 0, DEFAULT_STEP, 1e-12).unwrap();
    assert!(!report.passed());
}

#[test]
fn unknown_check_is_a_config_error() {
    assert!(matches!(
        run_checks(Some("pooling"), 0, 1e-3, 1e-4),
        Err(acrn::Error::Config(_))
    ));
}

/// Gradients of a value used by two consumers equal the sum of the
/// single-consumer gradients.
#[test]
fn fan_out_gradients_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = uniform(&[2, 2, 3, 3], &mut rng);
    let k1 = uniform(&[2, 2, 3, 3], &mut rng);
    let k2 = uniform(&[2, 2, 3, 3], &mut rng);

    let grad_of = |kernels: &[&Tensor<f64>]| {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let outs: Vec<_> = kernels
            .iter()
            .map(|k| {
                let kv = tape.constant((*k).clone());
                tape.sum(tape.relu(tape.conv2d(xv, kv, 1, 1).unwrap()))
            })
            .collect();
        let loss = outs[1..]
            .iter()
            .fold(outs[0], |a, &b| tape.add(a, b).unwrap());
        tape.backward(loss).unwrap().get(xv).unwrap().clone()
    };
    let both = grad_of(&[&k1, &k2]);
    let separate = grad_of(&[&k1]).add(&grad_of(&[&k2])).unwrap();
    assert!(common::max_abs_diff(&both, &separate) < 1e-12);
}

#[test]
fn one_rule_per_recorded_operation() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
    let k = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d(x, k, 1, 1).unwrap();
    let r = tape.relu(y);
    let s = tape.add(r, y).unwrap();
    let loss = tape.sum(s);
    let recorded = tape.len() - 2;
    tape.backward(loss).unwrap();
    assert_eq!(tape.rules_applied(), recorded);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn block_checks_pass_for_any_seed(seed in 0u64..10_000) {
        for name in ["classic_block", "accumulated_block"] {
            let report = run_check(name, seed, DEFAULT_STEP, DEFAULT_TOL).unwrap();
            prop_assert!(report.passed(), "{} seed {}\n{}", name, seed, report);
        }
    }
}
