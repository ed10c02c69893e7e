//! Forced periodic Lorentz gas with an isokinetic thermostat.
//!
//! The crate simulates the collision map of a Sinai billiard on the unit
//! torus under a small external field (and optional velocity twist at
//! collisions), computes the entropy production `s = −log J_{μ0}T` and
//! studies its fluctuations two ways: Monte Carlo estimates of the
//! logarithmic moment generating function `e(a)`, and the leading eigenvalue
//! of an Ulam discretization of the weighted transfer operator.

pub mod dynamics;
pub mod entropy;
pub mod error;
pub mod geometry;
pub mod rng;
pub mod statistics;
pub mod ulam;

pub use dynamics::{
    billiard_map, billiard_map_inverse, involution, CollisionCoord, CollisionRecord,
    CurvatureField, FlowState, ForceModel, IntegratorParams, SinusoidalField, System,
    SystemOptions, TwistModel,
};
pub use entropy::LogJacobianBreakdown;
pub use error::{Error, Result};
pub use geometry::{Scatterer, TableConfig, Vec2};
pub use rng::{substream, SimRng, Stream};
pub use statistics::{Init, MgfConfig, MgfGrid, RateFunction};
pub use ulam::{SpectralResult, UlamGrid, UlamMatrix};
