//! Imputation and filter logic: turns patient records into feature
//! vectors with declared imputation strategies, validity ranges, clamps,
//! and categorical encoding.
//!
//! Baseline statistics live in the feature spec rather than being derived
//! from the live batch, so imputation is deterministic and identical
//! between training-time and scoring-time featurization. Last observation
//! carried forward (LOCF) reads per-patient state that the store persists
//! across cycles and restarts.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde_json::Value;
use thiserror::Error;

use crate::transform::PatientRecord;

/// How a missing value is filled.
#[derive(Debug, Clone, PartialEq)]
pub enum Imputation {
    Mean,
    Median,
    Mode,
    Constant(Value),
    Locf,
    None,
}

/// How a resolved value maps into vector entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Encoding {
    Identity,
    OneHot(Vec<String>),
}

/// Training-time histogram used for median/mode imputation and drift.
#[derive(Debug, Clone, PartialEq)]
pub struct HistBins {
    /// `len() == proportions.len() + 1`, strictly increasing.
    pub edges: Vec<f64>,
    /// Sums to 1 within 1e-9.
    pub proportions: Vec<f64>,
}

impl HistBins {
    /// Bin index for a value; out-of-range values clamp to the end bins.
    pub fn bin_of(&self, value: f64) -> usize {
        if value < self.edges[0] {
            return 0;
        }
        let last = self.proportions.len() - 1;
        for i in 0..self.proportions.len() {
            if value < self.edges[i + 1] {
                return i;
            }
        }
        last
    }

    /// Median by linear interpolation of the histogram CDF.
    pub fn median(&self) -> f64 {
        let mut cum = 0.0;
        for (i, &p) in self.proportions.iter().enumerate() {
            if cum + p >= 0.5 {
                let lo = self.edges[i];
                let hi = self.edges[i + 1];
                let need = 0.5 - cum;
                let frac = if p > 0.0 { need / p } else { 0.5 };
                return lo + frac * (hi - lo);
            }
            cum += p;
        }
        *self.edges.last().unwrap()
    }

    /// Midpoint of the highest-proportion bin; first bin wins ties.
    pub fn mode(&self) -> f64 {
        let mut best = 0;
        for (i, &p) in self.proportions.iter().enumerate() {
            if p > self.proportions[best] {
                best = i;
            }
        }
        (self.edges[best] + self.edges[best + 1]) / 2.0
    }
}

/// Training-time baseline statistics for one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub mean: f64,
    pub std: f64,
    pub bins: Option<HistBins>,
}

/// Declaration of one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDef {
    /// Source field name in the patient record.
    pub name: String,
    pub imputation: Imputation,
    pub range: Option<(f64, f64)>,
    pub clamp: bool,
    pub encoding: Encoding,
    pub baseline: Option<Baseline>,
}

impl FeatureDef {
    /// Vector keys this feature expands into.
    pub fn expanded_keys(&self) -> Vec<String> {
        match &self.encoding {
            Encoding::Identity => vec![self.name.clone()],
            Encoding::OneHot(categories) => categories
                .iter()
                .map(|c| format!("{}={}", self.name, c))
                .collect(),
        }
    }
}

/// Validated, ordered feature declarations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub features: Vec<FeatureDef>,
}

impl FeatureSpec {
    /// The exact vector key set every output shares (shape stability).
    pub fn expanded_keys(&self) -> Vec<String> {
        self.features.iter().flat_map(|f| f.expanded_keys()).collect()
    }
}

#[derive(Debug, Error)]
pub enum FeatureSpecError {
    #[error("feature spec error at {path}: {message}")]
    Schema { path: String, message: String },
}

fn spec_err(path: impl Into<String>, message: impl Into<String>) -> FeatureSpecError {
    FeatureSpecError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn parse_f64(v: &Value, path: &str) -> Result<f64, FeatureSpecError> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| spec_err(path, "expected a finite number"))
}

/// Parse and validate a feature spec document.
pub fn parse_feature_spec(doc: &Value) -> Result<FeatureSpec, FeatureSpecError> {
    let obj = doc
        .as_object()
        .ok_or_else(|| spec_err("$", "feature spec must be a JSON object"))?;
    for key in obj.keys() {
        if key != "features" {
            return Err(spec_err(format!("$.{key}"), "unknown feature spec key"));
        }
    }
    let raw = obj
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| spec_err("$.features", "missing or non-array features"))?;

    let mut features = Vec::with_capacity(raw.len());
    let mut names = BTreeSet::new();
    for (i, f) in raw.iter().enumerate() {
        let at = |field: &str| format!("$.features[{i}].{field}");
        let fo = f
            .as_object()
            .ok_or_else(|| spec_err(format!("$.features[{i}]"), "feature must be an object"))?;
        for key in fo.keys() {
            if !matches!(
                key.as_str(),
                "name" | "imputation" | "range" | "clamp" | "encoding" | "baseline"
            ) {
                return Err(spec_err(at(key), "unknown feature key"));
            }
        }
        let name = fo
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| spec_err(at("name"), "missing or non-string name"))?
            .to_string();
        if name.is_empty() || !names.insert(name.clone()) {
            return Err(spec_err(at("name"), "feature names must be unique and non-empty"));
        }

        let imputation = match fo.get("imputation") {
            None => Imputation::None,
            Some(Value::String(s)) => match s.as_str() {
                "mean" => Imputation::Mean,
                "median" => Imputation::Median,
                "mode" => Imputation::Mode,
                "locf" => Imputation::Locf,
                "none" => Imputation::None,
                other => {
                    return Err(spec_err(
                        at("imputation"),
                        format!("unknown imputation `{other}`"),
                    ))
                }
            },
            Some(Value::Object(m)) if m.len() == 1 && m.contains_key("constant") => {
                Imputation::Constant(m["constant"].clone())
            }
            Some(_) => {
                return Err(spec_err(
                    at("imputation"),
                    "imputation must be a strategy name or {\"constant\": value}",
                ))
            }
        };

        let range = match fo.get("range") {
            None | Some(Value::Null) => None,
            Some(Value::Array(pair)) if pair.len() == 2 => {
                let lo = parse_f64(&pair[0], &at("range[0]"))?;
                let hi = parse_f64(&pair[1], &at("range[1]"))?;
                if lo >= hi {
                    return Err(spec_err(at("range"), "range lower bound must be below upper"));
                }
                Some((lo, hi))
            }
            Some(_) => return Err(spec_err(at("range"), "range must be [lo, hi]")),
        };

        let clamp = match fo.get("clamp") {
            None => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(spec_err(at("clamp"), "clamp must be a boolean")),
        };

        let encoding = match fo.get("encoding") {
            None => Encoding::Identity,
            Some(Value::String(s)) if s == "identity" => Encoding::Identity,
            Some(Value::Object(m)) if m.len() == 1 && m.contains_key("one_hot") => {
                let cats = m["one_hot"]
                    .as_array()
                    .ok_or_else(|| spec_err(at("encoding.one_hot"), "categories must be an array"))?;
                if cats.is_empty() {
                    return Err(spec_err(at("encoding.one_hot"), "categories must be non-empty"));
                }
                let mut list = Vec::with_capacity(cats.len());
                let mut seen = BTreeSet::new();
                for (j, c) in cats.iter().enumerate() {
                    let s = c.as_str().ok_or_else(|| {
                        spec_err(at(&format!("encoding.one_hot[{j}]")), "category must be a string")
                    })?;
                    if !seen.insert(s.to_string()) {
                        return Err(spec_err(
                            at("encoding.one_hot"),
                            format!("duplicate category `{s}`"),
                        ));
                    }
                    list.push(s.to_string());
                }
                Encoding::OneHot(list)
            }
            Some(_) => {
                return Err(spec_err(
                    at("encoding"),
                    "encoding must be \"identity\" or {\"one_hot\": [..]}",
                ))
            }
        };

        let baseline = match fo.get("baseline") {
            None | Some(Value::Null) => None,
            Some(Value::Object(b)) => {
                for key in b.keys() {
                    if !matches!(key.as_str(), "mean" | "std" | "bins") {
                        return Err(spec_err(at(&format!("baseline.{key}")), "unknown baseline key"));
                    }
                }
                let mean = parse_f64(
                    b.get("mean")
                        .ok_or_else(|| spec_err(at("baseline.mean"), "missing mean"))?,
                    &at("baseline.mean"),
                )?;
                let std = parse_f64(
                    b.get("std")
                        .ok_or_else(|| spec_err(at("baseline.std"), "missing std"))?,
                    &at("baseline.std"),
                )?;
                let bins = match b.get("bins") {
                    None | Some(Value::Null) => None,
                    Some(Value::Object(h)) => {
                        let edges_raw = h
                            .get("edges")
                            .and_then(Value::as_array)
                            .ok_or_else(|| spec_err(at("baseline.bins.edges"), "missing edges"))?;
                        let props_raw = h.get("proportions").and_then(Value::as_array).ok_or_else(
                            || spec_err(at("baseline.bins.proportions"), "missing proportions"),
                        )?;
                        let edges: Result<Vec<f64>, _> = edges_raw
                            .iter()
                            .map(|v| parse_f64(v, &at("baseline.bins.edges")))
                            .collect();
                        let proportions: Result<Vec<f64>, _> = props_raw
                            .iter()
                            .map(|v| parse_f64(v, &at("baseline.bins.proportions")))
                            .collect();
                        let (edges, proportions) = (edges?, proportions?);
                        if proportions.is_empty() || edges.len() != proportions.len() + 1 {
                            return Err(spec_err(
                                at("baseline.bins"),
                                "edges length must be proportions length + 1",
                            ));
                        }
                        if edges.windows(2).any(|w| w[0] >= w[1]) {
                            return Err(spec_err(
                                at("baseline.bins.edges"),
                                "edges must be strictly increasing",
                            ));
                        }
                        let sum: f64 = proportions.iter().sum();
                        if (sum - 1.0).abs() > 1e-9 {
                            return Err(spec_err(
                                at("baseline.bins.proportions"),
                                format!("proportions sum to {sum}, expected 1"),
                            ));
                        }
                        if proportions.iter().any(|&p| p < 0.0) {
                            return Err(spec_err(
                                at("baseline.bins.proportions"),
                                "proportions must be non-negative",
                            ));
                        }
                        Some(HistBins { edges, proportions })
                    }
                    Some(_) => return Err(spec_err(at("baseline.bins"), "bins must be an object")),
                };
                Some(Baseline { mean, std, bins })
            }
            Some(_) => return Err(spec_err(at("baseline"), "baseline must be an object")),
        };

        // Strategy/encoding compatibility.
        match (&imputation, &encoding) {
            (Imputation::Mean, _) if baseline.is_none() => {
                return Err(spec_err(at("imputation"), "mean imputation requires a baseline"))
            }
            (Imputation::Median | Imputation::Mode, _)
                if baseline.as_ref().and_then(|b| b.bins.as_ref()).is_none() =>
            {
                return Err(spec_err(
                    at("imputation"),
                    "median/mode imputation requires baseline bins",
                ))
            }
            (Imputation::Locf, Encoding::OneHot(_)) => {
                return Err(spec_err(at("imputation"), "locf does not apply to one_hot features"))
            }
            (Imputation::Locf, _) if baseline.is_none() => {
                return Err(spec_err(
                    at("imputation"),
                    "locf requires a baseline for the cold-start fallback",
                ))
            }
            (Imputation::Mean | Imputation::Median | Imputation::Mode, Encoding::OneHot(_)) => {
                return Err(spec_err(
                    at("imputation"),
                    "numeric imputation does not apply to one_hot features",
                ))
            }
            (Imputation::Constant(v), Encoding::Identity)
                if !v.as_f64().is_some_and(f64::is_finite) =>
            {
                return Err(spec_err(
                    at("imputation.constant"),
                    "constant for an identity feature must be a finite number",
                ))
            }
            (Imputation::Constant(v), Encoding::OneHot(cats)) => {
                let ok = v.as_str().is_some_and(|s| cats.iter().any(|c| c == s));
                if !ok {
                    return Err(spec_err(
                        at("imputation.constant"),
                        "constant for a one_hot feature must be one of its categories",
                    ));
                }
            }
            _ => {}
        }
        if range.is_some() {
            if let Encoding::OneHot(_) = encoding {
                return Err(spec_err(at("range"), "range does not apply to one_hot features"));
            }
        }

        features.push(FeatureDef {
            name,
            imputation,
            range,
            clamp,
            encoding,
            baseline,
        });
    }

    Ok(FeatureSpec { features })
}

/// One-hot encode a value against a category list.
///
/// Exactly one 1 at the matched position; all zeros for null or unknown.
pub fn one_hot(categories: &[String], value: Option<&str>) -> Vec<f64> {
    categories
        .iter()
        .map(|c| match value {
            Some(v) if v == c => 1.0,
            _ => 0.0,
        })
        .collect()
}

/// Per-patient last-observed-value state, keyed by feature.
pub trait LocfState {
    fn get(&mut self, patient_id: &str, feature: &str) -> Option<f64>;
    fn set(&mut self, patient_id: &str, feature: &str, value: f64, as_of: DateTime<Utc>);
}

/// In-memory LOCF state for tests and replay.
#[derive(Debug, Default, Clone)]
pub struct MemoryLocf {
    map: BTreeMap<(String, String), f64>,
}

impl LocfState for MemoryLocf {
    fn get(&mut self, patient_id: &str, feature: &str) -> Option<f64> {
        self.map.get(&(patient_id.to_string(), feature.to_string())).copied()
    }

    fn set(&mut self, patient_id: &str, feature: &str, value: f64, _as_of: DateTime<Utc>) {
        self.map.insert((patient_id.to_string(), feature.to_string()), value);
    }
}

/// Named numeric features ready for scoring; every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub patient_id: String,
    pub values: BTreeMap<String, f64>,
    /// Feature (not expanded-key) names that were imputed.
    pub imputed: BTreeSet<String>,
    pub as_of: DateTime<Utc>,
}

/// Featurization result plus warning counters.
#[derive(Debug, Clone)]
pub struct FeaturizeOutcome {
    pub vector: FeatureVector,
    /// One-hot lookups that saw a category unseen at training time.
    pub unknown_category_warnings: u64,
    /// Identity features whose raw value was present but not numeric.
    pub non_numeric_warnings: u64,
}

#[derive(Debug, Error)]
pub enum FeaturizeError {
    #[error("patient `{patient_id}`: feature `{feature}` missing and imputation is none")]
    MissingRequired { patient_id: String, feature: String },
}

fn numeric_of(value: &Value) -> Option<f64> {
    match value {
        Value::Number(n) => n.as_f64().filter(|x| x.is_finite()),
        Value::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
        _ => None,
    }
}

/// Resolve a patient record into a feature vector.
///
/// Per feature: raw value → range filter (clamp or treat as missing) →
/// imputation → encoding. Observed (non-imputed) identity values update
/// the LOCF state; imputed values never feed back into it.
pub fn featurize(
    spec: &FeatureSpec,
    record: &PatientRecord,
    state: &mut dyn LocfState,
) -> Result<FeaturizeOutcome, FeaturizeError> {
    let mut values = BTreeMap::new();
    let mut imputed = BTreeSet::new();
    let mut unknown_category_warnings = 0;
    let mut non_numeric_warnings = 0;

    for feature in &spec.features {
        let raw = record.fields.get(&feature.name).filter(|v| !v.is_null());
        match &feature.encoding {
            Encoding::Identity => {
                let mut observed = match raw {
                    Some(v) => {
                        let n = numeric_of(v);
                        if n.is_none() {
                            non_numeric_warnings += 1;
                        }
                        n
                    }
                    None => None,
                };
                // Range filter: clamp keeps an adjusted observation,
                // otherwise an out-of-range value counts as missing.
                if let (Some(v), Some((lo, hi))) = (observed, feature.range) {
                    if v < lo || v > hi {
                        observed = if feature.clamp { Some(v.clamp(lo, hi)) } else { None };
                    }
                }
                let value = match observed {
                    Some(v) => {
                        state.set(&record.patient_id, &feature.name, v, record.as_of);
                        v
                    }
                    None => {
                        let filled = match &feature.imputation {
                            Imputation::Mean => Some(feature.baseline.as_ref().unwrap().mean),
                            Imputation::Median => {
                                Some(feature.baseline.as_ref().unwrap().bins.as_ref().unwrap().median())
                            }
                            Imputation::Mode => {
                                Some(feature.baseline.as_ref().unwrap().bins.as_ref().unwrap().mode())
                            }
                            Imputation::Constant(c) => c.as_f64(),
                            Imputation::Locf => Some(
                                state
                                    .get(&record.patient_id, &feature.name)
                                    .unwrap_or(feature.baseline.as_ref().unwrap().mean),
                            ),
                            Imputation::None => None,
                        };
                        match filled {
                            Some(v) => {
                                imputed.insert(feature.name.clone());
                                v
                            }
                            None => {
                                return Err(FeaturizeError::MissingRequired {
                                    patient_id: record.patient_id.clone(),
                                    feature: feature.name.clone(),
                                })
                            }
                        }
                    }
                };
                values.insert(feature.name.clone(), value);
            }
            Encoding::OneHot(categories) => {
                let mut category: Option<String> =
                    raw.and_then(Value::as_str).map(str::to_string);
                if category.is_none() {
                    match &feature.imputation {
                        Imputation::Constant(c) => {
                            category = c.as_str().map(str::to_string);
                            imputed.insert(feature.name.clone());
                        }
                        Imputation::None => {}
                        // Other strategies are rejected at parse time.
                        _ => {}
                    }
                }
                if let Some(cat) = &category {
                    if !categories.iter().any(|c| c == cat) {
                        unknown_category_warnings += 1;
                    }
                }
                let encoded = one_hot(categories, category.as_deref());
                for (key, v) in feature.expanded_keys().into_iter().zip(encoded) {
                    values.insert(key, v);
                }
            }
        }
    }

    Ok(FeaturizeOutcome {
        vector: FeatureVector {
            patient_id: record.patient_id.clone(),
            values,
            imputed,
            as_of: record.as_of,
        },
        unknown_category_warnings,
        non_numeric_warnings,
    })
}
