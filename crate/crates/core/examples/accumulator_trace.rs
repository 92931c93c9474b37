//! Traces the residual accumulator through a depth-32 accumulated network:
//! where the sum restarts and how large it grows within each stage.
//!
//! cargo run --release --example accumulator_trace

use acrn::autodiff::Tape;
use acrn::layers::Mode;
use acrn::model::{build_model, ModelSpec, Variant};
use acrn::tensor::Tensor;

fn rms(t: &Tensor<f32>) -> f32 {
    (t.data().iter().map(|v| v * v).sum::<f32>() / t.len() as f32).sqrt()
}

fn main() -> acrn::Result<()> {
    let mut model = build_model::<f32>(ModelSpec::new(32, Variant::Accumulated)?, 0);
    let x = Tensor::from_fn(&[4, 3, 32, 32], |i| {
        ((i * 2_654_435_761) % 1000) as f32 / 500.0 - 1.0
    });
    let tape = Tape::new();
    let input = tape.constant(x);
    let (logits, trace) = model.forward_traced(&tape, input, Mode::Training)?;

    println!("block  input shape        restart  rms(term)  rms(accumulator)");
    for (i, b) in trace.blocks.iter().enumerate() {
        let term = tape.value(b.term.expect("accumulated block"));
        let acc = tape.value(b.accumulator.expect("accumulated block"));
        println!(
            "{:>5}  {:<18} {:<8} {:>9.3}  {:>16.3}",
            i + 1,
            format!("{:?}", tape.shape(b.input)),
            if b.reinitialized { "yes" } else { "" },
            rms(&term),
            rms(&acc)
        );
    }
    println!(
        "{} restarts, {} additions, logits {:?}",
        trace.accumulator.reinitializations(),
        trace.accumulator.additions(),
        tape.shape(logits)
    );
    Ok(())
}
