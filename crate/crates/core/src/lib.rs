//! Chunk-cache-quantization inference engine for three-exposure image fusion.
//!
//! Feature maps are scanned in blocks along the channel, width and height axes;
//! each block's local attention output is memoized in a content-addressed cache
//! that stores 8-bit affine-quantized payloads. A small reverse-mode tape makes
//! the same network trainable at desk scale.

pub mod autodiff;
pub mod cache;
pub mod data;
pub mod error;
pub mod io;
pub mod net;
pub mod quant;
pub mod tensor;
pub mod train;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
pub use tensor::{Activation, Axis, ConvParams, Kernel, Real, Shape3, Tensor3};
