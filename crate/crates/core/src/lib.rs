//! Mori-Zwanzig reduced order models for the Korteweg-de Vries equation
//! with small dispersion.
//!
//! * [`spectral`]: Fourier fields and the truncated convolution algebra.
//! * [`solver`]: the fully resolved reference solver and mass diagnostics.
//! * [`symbolic`]: operator polynomials in `PL`, `QL`, `L` and their
//!   expansion into convolution trees.
//! * [`rom`]: hand-coded memory terms and reduced model right-hand sides.
//! * [`fit`]: renormalization coefficient fitting and scaling laws.
//! * [`experiment`]: end-to-end experiment drivers shared by the CLI.

pub mod error;
pub mod experiment;
pub mod fit;
pub mod rom;
pub mod solver;
pub mod spectral;
pub mod symbolic;

pub use error::{Error, Result};
pub use spectral::{ModePartition, ModeSet, SpectralField, C64};
