//! Minimal dense-tensor algebra with reverse-mode automatic differentiation.
//!
//! Parameters live in a [`ParamStore`]; a forward pass records onto a fresh
//! [`Tape`], [`Tape::backward`] fills gradient slots, and [`Adam`] applies
//! updates to the unfrozen parameters.

mod checkpoint;
mod error;
mod gradcheck;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use error::TensorError;
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::ParamStore;
pub use rng::SeededRng;
pub use tape::{log_softmax_rows, sigmoid, softmax_rows, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
