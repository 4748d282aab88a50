//! Energy-weighted transition superoperators for open quantum systems.
//!
//! A noisy unitary step is averaged into a superoperator `G0`, reweighted by
//! the system energy at an inverse temperature, and applied to density
//! matrices. The modules cover the weighted propagator and its entropy
//! ledger, stationary states, an explicit oscillator reference bath, a spin
//! in a fluctuating field and the high-temperature master-equation limit.

// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod andersen;
pub mod cl_limit;
pub mod entropy;
pub mod error;
pub mod fit;
pub mod oscillator;
pub mod propagator;
pub mod quadrature;
pub mod relaxation;
pub mod spectral;
pub mod spin;
pub mod state;
pub mod stationary;
pub mod superop;

pub use error::{Error, Result};
pub use propagator::{
    build_g0, energy_weight, step_g1, step_g2, step_gn, BetaConvention, NoiseModel,
    SpecializedPropagator, WeightedPropagator,
};
pub use spectral::Spectrum;
pub use state::{CMatrix, CVector, DensityMatrix, HermitianOperator, Wavefunction, C64};
pub use superop::{KrausSet, SuperOperator};
