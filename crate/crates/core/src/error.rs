use std::path::PathBuf;

use thiserror::Error;

use crate::clock::Micros;

#[derive(Debug, Error)]
pub enum Error {
    #[error("causality violation: event scheduled at {at} µs but clock is at {now} µs")]
    Causality { at: Micros, now: Micros },

    #[error("probability {name} = {value} is outside [0, 1]")]
    Probability { name: &'static str, value: f64 },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("no reservoir in the field of view at t = {0} µs")]
    NoReservoir(Micros),

    #[error("{defects} target site(s) could not be filled")]
    InsufficientAtoms { defects: usize },

    #[error("prepared batch not ready at t = {0} µs")]
    BatchNotReady(Micros),

    #[error("degenerate readout: P_a = {pa} does not exceed P_mF = {pmf}")]
    Degenerate { pa: f64, pmf: f64 },

    #[error("exponential fit did not converge: {0}")]
    NonConvergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Checks that `value` is a probability. Out-of-range values are an error, never clamped.
pub fn check_probability(name: &'static str, value: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(Error::Probability { name, value })
    }
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
