//! Workbench for tiled, fixed-point CNN inference on intermittently powered
//! devices.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds the network IR and the Q-format helpers.
//! * [`exec`] runs inference, either as a plain loop nest or tile by tile.
//! * [`intermittent`] replays tiled execution across power cycles with
//!   double-buffered progress snapshots and fault injection.
//! * [`perfmodel`] predicts per-cycle energy and end-to-end latency without
//!   touching tensor data.
//! * [`explorer`] searches execution designs and network architectures.
//! * [`scheduler`] derives WCETs and runs EDF schedulability analysis.
//! * [`artifacts`] writes C headers, CSV weight sets and JSON documents.
//! * [`synth`] generates seeded random instances and the worked example.

pub mod artifacts;
pub mod error;
pub mod exec;
pub mod explorer;
pub mod intermittent;
pub mod model;
pub mod perfmodel;
pub mod rng;
pub mod scheduler;
pub mod synth;

pub use error::{Error, Infeasibility, Result};
