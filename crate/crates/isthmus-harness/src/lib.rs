//! Deterministic mock-EHR and IoT-sensor HTTP harness.
//!
//! Tests and demos script a scenario (seed, patients, per-cycle events,
//! faults, outcome labels), start a [`server::MockServer`], and drive it
//! cycle by cycle. The same seed and script always produce byte-identical
//! response sequences, which is what makes end-to-end runs reproducible.

pub mod generator;
pub mod scenario;
pub mod server;

pub use generator::{ehr_schedule, outcomes, sensor_schedule, Schedule};
pub use scenario::{Fault, HrShift, ScenarioScript};
pub use server::{sensor_stream, serve, MockServer, RecordedPost, ServeMode};
