pub mod ci2p;
pub mod codec;
pub mod error;
pub mod flops;
pub mod harness;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
