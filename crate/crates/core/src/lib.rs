//! Differentiable isosurface extraction on regular and adaptive grids.
//!
//! A scalar field sampled on a lattice is turned into a mesh by dual marching
//! cubes, where every dual vertex position is a convex combination controlled
//! by per-cell weights (`alpha` on corners, `beta` on edges), quads are split
//! according to a per-cell weight `gamma`, and lattice vertices may move
//! within half a cell. All of these are optimized by gradient descent through
//! a reverse-mode tape.

pub mod diff;
pub mod error;
pub mod extract;
pub mod grid;
pub mod mesh;
pub mod objectives;
pub mod octree;
pub mod optimize;
pub mod meshcheck;
pub mod metrics;
pub mod params;
pub mod spatial;
pub mod target;
pub mod tables;
pub mod tape;
pub mod tet;

pub use error::{Error, Result};
