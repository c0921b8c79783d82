pub mod ae;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod gvp;
pub mod lm;
pub mod model;
pub mod nn;
pub mod reaction;
pub mod train;

pub use error::{ModelError, Result};
