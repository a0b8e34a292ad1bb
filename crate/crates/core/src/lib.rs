pub mod cascade;
pub mod error;
pub mod imaging;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod shape;

pub use error::{Error, Result};
