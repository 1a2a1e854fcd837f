pub mod attribution;
pub mod autodiff;
pub mod error;
pub mod fusion;
pub mod io;
pub mod losses;
pub mod mask;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod params;
pub mod segmentor;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use mask::ClassMask;
pub use tensor::Tensor;
