//! Procedural 2D bird's-eye-view driving micro-world: scenes, rasters, and
//! the deterministic geometry/dynamics teachers.

pub mod dataset;
pub mod geometry;
pub mod oracles;
pub mod raster;
pub mod scene;
