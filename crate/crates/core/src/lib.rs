//! Multilayer simplex-structured matrix factorization (MSSMF) for
//! hyperspectral unmixing under endmember variability.
//!
//! The observed pixels `Y` (bands × pixels) are modelled as
//!
//! ```text
//! Y = A1 · S1 · … · S_{P-1} · S + V
//! ```
//!
//! where `A1` is a nonnegative core basis, every `S_l` is column-stochastic,
//! `S` holds per-pixel abundances on the unit simplex and `V` is white
//! Gaussian noise. The factors are fitted by maximizing a closed-form
//! variational lower bound on the marginal likelihood, with a Dirichlet
//! variational posterior for every pixel's abundance vector.
//!
//! Module map:
//!
//! * [`model`] data types and the composition algebra,
//! * [`special`], [`simplex`], [`dirichlet`] numerical primitives,
//! * [`init`] VCA endmember extraction and simplex-constrained least squares,
//! * [`solver`] the variational fitting engine,
//! * [`synth`] synthetic endmember variability and datasets,
//! * [`metrics`] aligned MSE, assignment, SNR and singular spectra,
//! * [`io`] and [`cli`] file formats and the `mssmf` command line.

pub mod cli;
pub mod dirichlet;
pub mod error;
pub mod init;
pub mod io;
mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod simplex;
pub mod solver;
pub mod special;
pub mod synth;

pub use error::{Error, Result};
pub use model::{
    compose_expanded, reconstruct, AbundanceMatrix, ExpandedEndmembers, FactorStack, ModelDims,
    PixelMatrix,
};
pub use solver::{fit, BetaMethod, FitConfig, FitResult, FitTrace, VariationalParams};
