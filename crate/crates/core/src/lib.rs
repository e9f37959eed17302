//! Computational toolkit for anisotropic product harmonic analysis.
//!
//! Functions live on uniform grids ([`grid::GridFunction`]); everything else
//! is built on top of an expansive [`dilation::Dilation`].

pub mod bump;
pub mod calderon;
pub mod dilation;
pub mod error;
pub mod fft;
pub mod grid;
pub mod grids_atoms;
pub mod harness;
pub mod pasio;
pub mod transforms;
pub mod weights;

pub use dilation::Dilation;
pub use error::{Error, Result};
pub use grid::{Domain, Field, Grid, GridFunction};
