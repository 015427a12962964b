//! Isthmus: a config-driven pipeline engine that polls clinical and sensor
//! JSON sources, transforms payloads through user-defined templates into
//! patient-level records, computes features, scores them against versioned
//! model signatures, and persists everything with checkpointed exactly-once
//! recovery, drift monitoring, and webhook alerting.
//!
//! The crate is organized around the stages of a scoring cycle:
//!
//! * [`config`] — the single platform configuration document.
//! * [`ingest`] — source connectors (HTTP poll, file drop, stream drain).
//! * [`transform`] — template-driven extraction and patient-level aggregation.
//! * [`featurize`] — imputation, range filters, and categorical encoding.
//! * [`scoring`] — model registry, scorer, explainer, and retrainer.
//! * [`store`] — score tables, append-only archive, checkpoints, LOCF state.
//! * [`monitor`] — structured logs, PSI drift detection, and alert routing.
//! * [`orchestrator`] — the scheduler tying a cycle together, plus replay
//!   and promotion.

pub mod canon;
pub mod clock;
pub mod config;
pub mod featurize;
pub mod ingest;
pub mod monitor;
pub mod orchestrator;
pub mod scoring;
pub mod store;
pub mod transform;
