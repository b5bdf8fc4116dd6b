//! Higher-order periodic homogenization on the desk.
//!
//! The crate builds corrector hierarchies for periodic elliptic coefficient
//! fields, computes with heterogeneous polynomials, solves Dirichlet problems
//! on large cubes and measures the decay exponents predicted by large-scale
//! analyticity.

pub mod cell;
pub mod container;
pub mod cubesolver;
pub mod error;
#[cfg(feature = "exact")]
pub mod exact;
pub mod fields;
pub mod harness;
pub(crate) mod grid;
pub mod hetpoly;
pub mod krylov;
pub mod polynomials;
pub mod tensors;

pub use error::{Error, Result};

// Book listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/correctors.md")]
    mod correctors {}
    #[doc = include_str!("../../../book/src/hetpoly.md")]
    mod hetpoly {}
    #[doc = include_str!("../../../book/src/cubes.md")]
    mod cubes {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
