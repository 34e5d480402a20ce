//! Mixed-precision KV-cache quantization driven by a chunk-level router
//! that picks a bit-width ("expert") for every chunk of cached tokens.

pub mod backbone;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod model;
pub mod numerics;
pub mod quant;
pub mod router;
pub mod trainer;

pub use error::{Error, Result};
