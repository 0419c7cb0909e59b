pub mod data;
pub mod error;
pub mod guided_filter;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod priors;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{CpgaConfig, CpgaNet, EnhancedOutput};
pub use tensor::{Tape, Tensor, Var};
