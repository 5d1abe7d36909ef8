//! The autoregressive policy: sequence layout, structured causal masking,
//! the transformer backbone, and structured decoding.

pub mod generate;
pub mod layout;
pub mod mask;
pub mod model;
