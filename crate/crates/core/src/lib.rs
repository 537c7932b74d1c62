//! Discrete-event simulator for continuously reloaded neutral-atom tweezer arrays.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atom;
pub mod clock;
pub mod coherence;
pub mod config;
pub mod error;
pub mod experiments;
pub mod layout;
pub mod log;
pub mod output;
pub mod pipeline;
pub mod prep;
pub mod rearrange;
pub mod report;
pub mod reservoir;
pub mod rng;
pub mod storage;
pub mod transport;
pub mod units;

pub use clock::{Micros, SimClock};
pub use error::{Error, Result};
pub use rng::{Module, SeededRng};
