pub mod anchor;
pub mod checks;
pub mod data;
pub mod error;
pub mod kan;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::{Bound, ParamStore};
pub use tensor::{Tape, Tensor, Var};
