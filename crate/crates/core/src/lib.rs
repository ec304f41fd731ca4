//! Collective decay dynamics of a blockaded Rydberg superatom.
//!
//! Two levels of description are provided: an effective four-level
//! master equation ([`superatom`]) and a microscopic model of N emitters
//! coupled to a chiral waveguide ([`waveguide`]). On top of them sit the
//! analysis of post-pulse emission ([`analysis`]) and the calibration of
//! the effective model against photon traces ([`calibration`]).

pub mod analysis;
pub mod calibration;
pub mod error;
pub mod lindblad;
pub mod ode;
pub mod params;
pub mod pulse;
pub mod superatom;
pub mod trace;
pub mod waveguide;

pub use error::{Error, Result};
pub use lindblad::{propagate, rhs, steady_state_reached, DensityMatrix, LindbladSystem};
pub use params::{collective_rabi, derive_effective, EffectiveParams, ExperimentParams};
pub use pulse::PulseShape;
