//! Event-camera pupil tracking with a compact hierarchical point network.
//!
//! The pipeline runs: event stream and labels ([`event`], [`io`], [`synth`])
//! → temporal windows ([`windowing`]) → fixed-size normalized point sets
//! ([`pointops`]) → sequences of samples through the network ([`model`]) →
//! training ([`train`]) and evaluation ([`metrics`]). [`dataset`] wires the
//! stages together for whole recordings.

pub mod dataset;
mod error;
pub mod event;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pointops;
pub mod synth;
pub mod train;
pub mod windowing;

pub use error::{Error, Result};
pub use event::{Event, EventStream, Polarity, PupilLabel, Resolution, Window};
