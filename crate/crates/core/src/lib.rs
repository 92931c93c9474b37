//! Classic and accumulated residual networks for CIFAR-10 on a small CPU
//! deep-learning engine.
//!
//! An accumulated residual network replaces the identity shortcut of each
//! block with a running sum of the batch-normalized inputs of every block in
//! the current stage:
//!
//! ```text
//! y_i = relu(F_i(x_i) + Σ_j BN_j(x_j))
//! ```
//!
//! The sum is a single extra tape value per forward pass
//! ([`blocks::ResidualAccumulator`]) that restarts whenever the block input
//! changes shape.
//!
//! ```
//! use acrn::autodiff::Tape;
//! use acrn::layers::Mode;
//! use acrn::model::{build_model, ModelSpec, Variant};
//! use acrn::tensor::Tensor;
//!
//! let spec = ModelSpec::new(8, Variant::Accumulated).unwrap();
//! let mut model = build_model::<f32>(spec, 0);
//! let tape = Tape::new();
//! let x = tape.constant(Tensor::zeros(&[2, 3, 32, 32]));
//! let logits = model.forward(&tape, x, Mode::Inference).unwrap();
//! assert_eq!(tape.shape(logits), vec![2, 10]);
//! ```

pub mod autodiff;
pub mod blocks;
pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
