pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
