//! Scenario scripts: the single knob set that makes a mock run
//! reproducible. Same seed and script, byte-identical served responses.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// A scripted fault, keyed by the 1-based index of data GET requests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    /// Respond HTTP 500 to request `request`.
    Http500 { request: u64 },
    /// Corrupt the first item of request `request` into invalid JSON.
    MalformedItem { request: u64 },
    /// Serve empty item lists for the inclusive request span.
    Silent { from_request: u64, to_request: u64 },
}

/// Distribution shift applied to generated heart rates after a cycle,
/// for drift scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HrShift {
    pub after_cycle: usize,
    pub delta: f64,
}

/// Deterministic scenario definition for the mock EHR / sensor servers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub seed: u64,
    #[serde(default = "default_patient_count")]
    pub patient_count: usize,
    #[serde(default = "default_cycle_count")]
    pub cycle_count: usize,
    #[serde(default = "default_per_patient")]
    pub vitals_per_patient: usize,
    #[serde(default = "default_per_patient")]
    pub labs_per_patient: usize,
    /// Sensor mode: readings emitted per cycle.
    #[serde(default = "default_readings_per_cycle")]
    pub readings_per_cycle: usize,
    #[serde(default)]
    pub faults: Vec<Fault>,
    /// Bearer token the server requires; absent means no auth check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_token: Option<String>,
    /// Binary outcome labels per patient for retraining tests;
    /// generated from the seed when absent.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub outcomes: BTreeMap<String, u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_shift: Option<HrShift>,
    /// Sensor mode: emit one out-of-range pm25 (-5.0) at this cycle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bad_pm25_at_cycle: Option<usize>,
}

fn default_patient_count() -> usize {
    10
}
fn default_cycle_count() -> usize {
    3
}
fn default_per_patient() -> usize {
    1
}
fn default_readings_per_cycle() -> usize {
    10
}

impl ScenarioScript {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            patient_count: default_patient_count(),
            cycle_count: default_cycle_count(),
            vitals_per_patient: default_per_patient(),
            labs_per_patient: default_per_patient(),
            readings_per_cycle: default_readings_per_cycle(),
            faults: Vec::new(),
            expected_token: None,
            outcomes: BTreeMap::new(),
            hr_shift: None,
            bad_pm25_at_cycle: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read scenario `{}`: {e}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| format!("scenario `{}` is invalid: {e}", path.display()))
    }
}
