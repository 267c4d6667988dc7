//! Lattice reduction workbench.
//!
//! The crate implements three ways of reducing a lattice basis and the
//! machinery to compare them:
//!
//! - [`lll`]: the Lenstra-Lenstra-Lovász algorithm with Siegel-reduction
//!   certification and an exact unimodular transform certificate;
//! - [`unimodular`]: an exact factorization of special linear integer
//!   matrices into extended Gauss moves;
//! - [`policy`]: a self-supervised scoring network over Gram matrices that
//!   samples extended Gauss moves, equivariant to signed permutations by
//!   construction, trained by minimizing the logarithmic orthogonality
//!   defect with the reverse-mode tape in [`autodiff`];
//! - [`harness`]: data generation, the training loop, and the evaluation
//!   protocols (including worst-subset analysis).

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod intmat;
pub mod io;
pub mod lattice;
pub mod lll;
pub mod mat;
pub mod policy;
pub mod rng;
#[cfg(test)]
pub(crate) mod testutil;
pub mod unimodular;

pub use error::{Error, Result};
