//! Coupled quasi-harmonic bases for triangle meshes.
//!
//! Laplace-Beltrami eigenbases computed independently on two shapes are
//! rarely compatible: signs flip, repeated eigenvalues mix, and higher
//! frequencies reorder. This crate builds bases that nearly diagonalize each
//! shape's Laplacian while agreeing at a handful of corresponding points, by
//! approximate joint diagonalization, and uses them for functional maps,
//! pose transfer, simultaneous editing and shape similarity.

pub mod analysis;
pub mod apps;
pub mod error;
pub mod funcmap;
pub mod io;
pub mod jointdiag;
pub mod laplacian;
pub mod mesh;
pub mod sparse;
pub mod spectrum;

pub use error::{Error, Result};
pub use laplacian::LaplacianPair;
pub use mesh::TriMesh;
pub use spectrum::{Basis, EigenBasis};
