//! Spectral and KAM machinery for normal forms of near-standard totally real
//! tori in ℂⁿ.
//!
//! Functions on the torus are truncated Fourier series ([`PeriodicSeries`]);
//! Laurent data on annuli use the same type through `z_j = e^{iθ_j}`. On top
//! of that sit flows of periodic vector fields ([`flows`]), Moser's volume
//! normalization ([`moser`]), the fibering KAM loop ([`fibering`]), the
//! realization of complex n-forms ([`realization`]), plane-curve tools
//! ([`curve`]) and the end-to-end invariant pipeline ([`pipeline`]).

pub mod curve;
pub mod error;
pub mod exec;
pub mod fibering;
pub mod flows;
pub mod grid;
mod jet;
pub mod moser;
pub mod pipeline;
pub mod realization;
pub mod series;

pub use error::{Bound, Error, Result};
pub use flows::{PeriodicVectorField, TorusMapLift};
pub use series::{MultiIndex, NormEstimate, PeriodicSeries, StripDomain};

pub use num_complex::Complex64;
