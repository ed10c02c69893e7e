use thiserror::Error;

use crate::geometry::TableViolation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid table: {}", join(.0))]
    InvalidTable(Vec<TableViolation>),

    #[error("infinite horizon: a straight ray travelled {max_len} without a collision")]
    InfiniteHorizon { max_len: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("horizon violation: no collision within flight time {max_time}")]
    HorizonViolation { max_time: f64 },

    #[error(
        "penetration: step starts inside scatterer {scatterer} (signed distance {distance:e})"
    )]
    Penetration { scatterer: usize, distance: f64 },

    #[error("grazing collision on scatterer {scatterer}: |phi| = {phi}")]
    Grazing { scatterer: usize, phi: f64 },

    #[error("near-singularity: perturbed orbits follow different itineraries")]
    NearSingularity,

    #[error("power iteration did not converge in {iterations} iterations (last residual {last_residual:e})")]
    NoConvergence {
        iterations: usize,
        last_residual: f64,
        residual_history: Vec<f64>,
    },

    #[error("resample limit exceeded: {attempts} consecutive grazing aborts")]
    ResampleLimit { attempts: usize },
}

impl Error {
    /// Errors that only discard the current orbit rather than the run.
    pub fn is_orbit_local(&self) -> bool {
        matches!(self, Error::Grazing { .. } | Error::NearSingularity)
    }
}

fn join(v: &[TableViolation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
