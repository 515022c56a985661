pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod channels;
pub mod compiler;
pub mod haar;
pub mod harness;
pub mod io;
pub mod noise;
pub mod sampler;
