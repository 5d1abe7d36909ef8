//! Desk-scale latent spatio-temporal planning stack: a synthetic BEV driving
//! micro-world, a small autoregressive policy with structured causal masking
//! and latent reasoning slots, dual feature-alignment training, GRPO
//! refinement, and closed-loop scoring.

pub mod adapters;
pub mod error;
pub mod grpo;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod microworld;
pub mod policy;
pub mod sft;
pub mod tokenizer;

pub use error::LastlabError;
