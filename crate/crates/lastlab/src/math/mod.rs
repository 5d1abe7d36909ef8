//! Numeric plumbing: the autodiff tape, parameter store, and RNG streams.

pub mod graph;
pub mod params;
pub mod rng;
