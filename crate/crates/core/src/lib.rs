//! Finite-element laboratory for divergence-form elliptic equations on closed
//! surfaces with rough metrics: mean-zero solvability, heat kernels, holomorphic
//! functional calculus and Kato square roots, and a heat-kernel metric flow.

pub mod calculus;
pub mod continuity;
pub mod error;
pub mod fem;
pub mod flow;
pub mod heat;
pub mod mesh;
pub mod rng;
pub mod solver;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
