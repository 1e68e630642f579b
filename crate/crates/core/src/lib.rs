//! Discrete-time simulator of a connected-vehicle platoon with an
//! event-triggered braking add-on, compared across three warning channels.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod braking;
pub mod channels;
pub mod dynamics;
pub mod engine;
pub mod error;
pub mod export;
pub mod scenario;
pub mod sweep;
pub mod trigger;

pub use channels::ChannelKind;
pub use engine::{run, RunSummary, SimTrace, TraceRecord};
pub use error::{Error, Result};
pub use scenario::Scenario;
pub use sweep::{aggregate, sweep, Aggregate, SweepResult};
