mod common;

use acrn::autodiff::Tape;
use acrn::blocks::ResidualPath;
use acrn::layers::{Mode, Parameterized};
use acrn::model::{build_model, Model, ModelSpec, Variant, STAGE_CHANNELS};
use acrn::tensor::Tensor;
use common::{max_abs_diff, uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Parameter count of a classic network written out by hand: stem conv and
/// norm, two 3x3 convs and two norms per block, a 1x1 projection at each
/// stage entry after the first, and the dense head.
fn classic_parameter_oracle(depth: usize) -> usize {
    let n = (depth - 2) / 6;
    let [c1, c2, c3] = STAGE_CHANNELS;
    let conv = |i: usize, o: usize, k: usize| i * o * k * k;
    let block = |i: usize, o: usize| {
        conv(i, o, 3) + conv(o, o, 3) + 4 * o + if i != o { conv(i, o, 1) } else { 0 }
    };
    let stage = |i: usize, o: usize| block(i, o) + (n - 1) * block(o, o);
    conv(3, c1, 3) + 2 * c1 + stage(c1, c1) + stage(c1, c2) + stage(c2, c3) + c3 * 10 + 10
}

fn input(n: usize, seed: u64) -> Tensor<f64> {
    uniform(&[n, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn depth_20_classic_parameter_count() {
    assert_eq!(classic_parameter_oracle(20), 272_282);
    let model = build_model::<f32>(ModelSpec::new(20, Variant::Classic).unwrap(), 0);
    assert_eq!(model.parameter_count(), 272_282);
}

#[test]
fn accumulated_adds_one_affine_norm_per_block() {
    for depth in [8, 14, 20, 32] {
        let classic = build_model::<f32>(ModelSpec::new(depth, Variant::Classic).unwrap(), 0);
        let accumulated =
            build_model::<f32>(ModelSpec::new(depth, Variant::Accumulated).unwrap(), 0);
        assert_eq!(classic.parameter_count(), classic_parameter_oracle(depth));
        let extra: usize = accumulated
            .spec
            .block_specs()
            .iter()
            .map(|b| 2 * b.out_channels)
            .sum();
        assert_eq!(
            accumulated.parameter_count() - classic.parameter_count(),
            extra,
            "depth {depth}"
        );
        assert_eq!(
            accumulated.batch_norms().len() - classic.batch_norms().len(),
            accumulated.blocks.len()
        );
    }
}

#[test]
fn stage_layout_of_depth_32() {
    let spec = ModelSpec::new(32, Variant::Accumulated).unwrap();
    let blocks = spec.block_specs();
    assert_eq!(blocks.len(), 15);
    for (i, b) in blocks.iter().enumerate() {
        let entry = i == 5 || i == 10;
        assert_eq!(b.stride, if entry { 2 } else { 1 }, "block {i}");
        assert_eq!(b.out_channels, STAGE_CHANNELS[i / 5]);
        assert_eq!(b.changes_shape(), entry);
    }
}

#[test]
fn logits_shape_and_inference_determinism() {
    for variant in [Variant::Classic, Variant::Accumulated] {
        let mut model = build_model::<f64>(ModelSpec::new(8, variant).unwrap(), 1);
        let x = input(3, 2);
        let run = |m: &mut Model<f64>| {
            let tape = Tape::new();
            let v = tape.constant(x.clone());
            tape.value(m.forward(&tape, v, Mode::Inference).unwrap())
                .as_ref()
                .clone()
        };
        let a = run(&mut model);
        let b = run(&mut model);
        assert_eq!(a.shape(), &[3, 10]);
        assert_eq!(a.data(), b.data());
        assert!(a.all_finite());
    }
}

#[test]
fn same_seed_builds_identical_models() {
    let spec = ModelSpec::new(14, Variant::Accumulated).unwrap();
    let a = build_model::<f32>(spec, 9);
    let b = build_model::<f32>(spec, 9);
    let c = build_model::<f32>(spec, 10);
    let flat = |m: &Model<f32>| {
        m.parameters()
            .iter()
            .flat_map(|p| p.value.data().to_vec())
            .collect::<Vec<_>>()
    };
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}

#[test]
fn depth_32_accumulator_restarts_at_stage_entries_and_matches_recomputation() {
    let mut model = build_model::<f64>(ModelSpec::new(32, Variant::Accumulated).unwrap(), 4);
    let tape = Tape::new();
    let x = tape.constant(input(2, 5));
    let (_, trace) = model.forward_traced(&tape, x, Mode::Training).unwrap();
    assert_eq!(trace.accumulator.reinitializations(), 3);
    assert_eq!(trace.accumulator.additions(), 12);

    let restarts: Vec<usize> = trace
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.reinitialized)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(restarts, vec![0, 5, 10]);

    let mut running: Option<Tensor<f64>> = None;
    for (i, block) in trace.blocks.iter().enumerate() {
        let term = tape.value(block.term.unwrap()).as_ref().clone();
        running = Some(match running {
            Some(sum) if !block.reinitialized => sum.add(&term).unwrap(),
            _ => term,
        });
        let acc = tape.value(block.accumulator.unwrap());
        assert_eq!(acc.data(), running.as_ref().unwrap().data(), "block {i}");
    }
}

#[test]
fn gradient_reaches_stage_input_through_the_accumulator() {
    let mut model = build_model::<f64>(ModelSpec::new(32, Variant::Accumulated).unwrap(), 4);
    for block in &mut model.blocks[..5] {
        block.conv1.kernel.value.fill(0.0);
        block.conv2.kernel.value.fill(0.0);
    }
    let tape = Tape::new();
    let x = tape.constant(input(2, 6));
    let (logits, trace) = model.forward_traced(&tape, x, Mode::Training).unwrap();
    tape.retain_grad(trace.stem);
    let loss = tape.softmax_cross_entropy(logits, &[1, 7]).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(trace.stem).expect("stem gradient retained");
    assert!(g.max_abs() > 0.0);
    assert!(g.all_finite());
}

#[test]
fn identity_path_reproduces_the_classic_network() {
    for depth in [8, 14] {
        let mut classic = build_model::<f64>(ModelSpec::new(depth, Variant::Classic).unwrap(), 3);
        let mut accumulated =
            build_model::<f64>(ModelSpec::new(depth, Variant::Accumulated).unwrap(), 3);
        accumulated.set_residual_path(ResidualPath::Identity);
        let x = input(2, 8);
        for mode in [Mode::Training, Mode::Inference] {
            let run = |m: &mut Model<f64>| {
                let tape = Tape::new();
                let v = tape.constant(x.clone());
                tape.value(m.forward(&tape, v, mode).unwrap())
                    .as_ref()
                    .clone()
            };
            assert_eq!(
                run(&mut classic).data(),
                run(&mut accumulated).data(),
                "depth {depth} {mode:?}"
            );
        }
    }
}

/// With one block per stage every block restarts the sum, so an accumulator
/// norm that passes its input through unchanged turns the accumulated
/// network into the classic one.
#[test]
fn pass_through_accumulator_norms_reproduce_classic_at_one_block_per_stage() {
    let spec = |v| ModelSpec::new(8, v).unwrap();
    let mut classic = build_model::<f64>(spec(Variant::Classic), 12);
    let mut accumulated = build_model::<f64>(spec(Variant::Accumulated), 12);
    for block in &mut accumulated.blocks {
        let bn = block.accumulator_bn.as_mut().unwrap();
        let eps = bn.epsilon;
        let var = 1.0 - eps;
        assert_eq!(var + eps, 1.0);
        bn.running_mean.fill(0.0);
        bn.running_var.fill(var);
        bn.gamma.value.fill(1.0);
        bn.beta.value.fill(0.0);
    }
    let x = input(2, 13);
    let run = |m: &mut Model<f64>| {
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        tape.value(m.forward(&tape, v, Mode::Inference).unwrap())
            .as_ref()
            .clone()
    };
    let a = run(&mut classic);
    let b = run(&mut accumulated);
    assert!(
        max_abs_diff(&a, &b) == 0.0,
        "{:?} vs {:?}",
        a.data(),
        b.data()
    );
}
