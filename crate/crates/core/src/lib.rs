pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod optim;
pub mod pipeline;
pub mod readout;
pub mod seeds;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
