//! Model signatures, the scorer, the explainer, and the retrainer.
//!
//! The model family is a generalized linear (logistic) model: scoring,
//! explanation (exact additive contributions), and retraining are all
//! fully specifiable against it. The signature format carries a `family`
//! field so other families can be added later.
//!
//! Registry layout: `<data-dir>/models/<model_id>/v<version>.json` plus a
//! `current` marker file naming the live version. Published versions are
//! immutable: re-registering identical bytes is a no-op, anything else is
//! a version conflict.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canon::canonical_json;
use crate::clock::format_ts;
use crate::featurize::FeatureVector;
use crate::transform::SourceRef;

/// Deployment state a signature declares for itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeployMode {
    Live,
    Silent,
}

/// Ordered score thresholds and the labels of the bands between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskBands {
    pub thresholds: Vec<f64>,
    pub labels: Vec<String>,
}

impl RiskBands {
    /// Label of the band containing `score`, lower-inclusive: a score
    /// equal to a threshold belongs to the band above it.
    pub fn label_of(&self, score: f64) -> &str {
        let idx = self.thresholds.iter().filter(|&&t| score >= t).count();
        &self.labels[idx]
    }
}

/// A versioned, self-contained model definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSignature {
    pub model_id: String,
    pub version: u32,
    pub family: String,
    pub features: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub baseline_means: Vec<f64>,
    pub risk_bands: RiskBands,
    pub mode: DeployMode,
    pub created_at: String,
    #[serde(default)]
    pub training_note: String,
}

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("model signature error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("model `{model_id}` v{version} already registered with different content")]
    VersionConflict { model_id: String, version: u32 },
    #[error("model `{model_id}` has no version {version}")]
    UnknownVersion { model_id: String, version: u32 },
    #[error("feature vector is missing feature `{feature}` required by `{model_id}` v{version}")]
    MissingFeature {
        model_id: String,
        version: u32,
        feature: String,
    },
    #[error("retrain dataset error: {0}")]
    Dataset(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: u32 },
    #[error("registry I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn schema_err(path: impl Into<String>, message: impl Into<String>) -> ScoringError {
    ScoringError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

impl ModelSignature {
    /// Validate internal consistency of a parsed signature.
    pub fn validate(&self) -> Result<(), ScoringError> {
        if self.model_id.is_empty() {
            return Err(schema_err("$.model_id", "model id must be non-empty"));
        }
        if self.version < 1 {
            return Err(schema_err("$.version", "version must be >= 1"));
        }
        if self.family != "logistic" {
            return Err(schema_err(
                "$.family",
                format!("unsupported family `{}` (only `logistic`)", self.family),
            ));
        }
        if self.features.is_empty() {
            return Err(schema_err("$.features", "feature list must be non-empty"));
        }
        let unique: BTreeSet<&String> = self.features.iter().collect();
        if unique.len() != self.features.len() {
            return Err(schema_err("$.features", "feature names must be unique"));
        }
        if self.weights.len() != self.features.len() {
            return Err(schema_err(
                "$.weights",
                format!(
                    "weights length {} != features length {}",
                    self.weights.len(),
                    self.features.len()
                ),
            ));
        }
        if self.baseline_means.len() != self.features.len() {
            return Err(schema_err(
                "$.baseline_means",
                format!(
                    "baseline_means length {} != features length {}",
                    self.baseline_means.len(),
                    self.features.len()
                ),
            ));
        }
        if self.weights.iter().any(|w| !w.is_finite())
            || !self.intercept.is_finite()
            || self.baseline_means.iter().any(|m| !m.is_finite())
        {
            return Err(schema_err("$", "coefficients must be finite"));
        }
        let t = &self.risk_bands.thresholds;
        if t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(schema_err(
                "$.risk_bands.thresholds",
                "thresholds must be strictly increasing",
            ));
        }
        if t.iter().any(|&x| x <= 0.0 || x >= 1.0) {
            return Err(schema_err(
                "$.risk_bands.thresholds",
                "thresholds must lie strictly inside (0, 1)",
            ));
        }
        if self.risk_bands.labels.len() != t.len() + 1 {
            return Err(schema_err(
                "$.risk_bands.labels",
                format!(
                    "label count {} != threshold count {} + 1",
                    self.risk_bands.labels.len(),
                    t.len()
                ),
            ));
        }
        Ok(())
    }

    /// Canonical byte identity used for immutability checks.
    pub fn canonical(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("signature serializes"))
    }
}

/// Parse and validate a signature document.
pub fn parse_signature(doc: &Value) -> Result<ModelSignature, ScoringError> {
    let sig: ModelSignature = serde_json::from_value(doc.clone())
        .map_err(|e| schema_err("$", e.to_string()))?;
    sig.validate()?;
    Ok(sig)
}

/// Numerically stable logistic function.
///
/// For z < 0 the `exp(z) / (1 + exp(z))` branch avoids overflow, so the
/// result is finite and strictly inside (0, 1) for all finite inputs.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One feature's additive contribution to a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub feature: String,
    pub contribution: f64,
}

/// Score plus risk level, explanation, echoes, and lineage.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResponse {
    pub patient_id: String,
    pub model_id: String,
    pub version: u32,
    pub score: f64,
    pub risk_level: String,
    pub top_contributors: Vec<Contribution>,
    pub features: std::collections::BTreeMap<String, f64>,
    pub imputed: BTreeSet<String>,
    pub scored_at: DateTime<Utc>,
    pub lineage: Vec<SourceRef>,
}

fn linear_term(sig: &ModelSignature, fv: &FeatureVector) -> Result<f64, ScoringError> {
    let mut z = sig.intercept;
    for (name, weight) in sig.features.iter().zip(&sig.weights) {
        let x = fv
            .values
            .get(name)
            .copied()
            .ok_or_else(|| ScoringError::MissingFeature {
                model_id: sig.model_id.clone(),
                version: sig.version,
                feature: name.clone(),
            })?;
        z += weight * x;
    }
    Ok(z)
}

/// Score a feature vector against a signature.
pub fn score(
    sig: &ModelSignature,
    fv: &FeatureVector,
    scored_at: DateTime<Utc>,
    lineage: Vec<SourceRef>,
) -> Result<ScoreResponse, ScoringError> {
    let z = linear_term(sig, fv)?;
    let score = sigmoid(z);
    let contributors = explain(sig, fv, sig.features.len())?;
    Ok(ScoreResponse {
        patient_id: fv.patient_id.clone(),
        model_id: sig.model_id.clone(),
        version: sig.version,
        score,
        risk_level: sig.risk_bands.label_of(score).to_string(),
        top_contributors: contributors
            .into_iter()
            .map(|(feature, contribution)| Contribution {
                feature,
                contribution,
            })
            .collect(),
        features: fv.values.clone(),
        imputed: fv.imputed.clone(),
        scored_at,
        lineage,
    })
}

/// Top-k feature contributions: `wᵢ·(xᵢ − μᵢ)`, largest absolute value
/// first, ties broken by feature name ascending. `k = 0` yields an empty
/// list. Contributions plus the baseline term `b + Σ wᵢμᵢ` reconstruct
/// the linear term exactly.
pub fn explain(
    sig: &ModelSignature,
    fv: &FeatureVector,
    k: usize,
) -> Result<Vec<(String, f64)>, ScoringError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut contributions = Vec::with_capacity(sig.features.len());
    for ((name, weight), mean) in sig.features.iter().zip(&sig.weights).zip(&sig.baseline_means) {
        let x = fv
            .values
            .get(name)
            .copied()
            .ok_or_else(|| ScoringError::MissingFeature {
                model_id: sig.model_id.clone(),
                version: sig.version,
                feature: name.clone(),
            })?;
        contributions.push((name.clone(), weight * (x - mean)));
    }
    contributions.sort_by(|a, b| {
        b.1.abs()
            .partial_cmp(&a.1.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    contributions.truncate(k);
    Ok(contributions)
}

/// Hyperparameters for logistic retraining.
#[derive(Debug, Clone, Copy)]
pub struct Hyper {
    pub learning_rate: f64,
    pub epochs: u32,
    pub l2: f64,
}

/// Mean log-loss plus `λ‖w‖²/2`, and its analytic gradient.
///
/// Exposed so the training objective can be independently checked by
/// finite differences.
pub fn logloss_and_gradient(
    weights: &[f64],
    intercept: f64,
    data: &[(Vec<f64>, bool)],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = data.len() as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (x, y) in data {
        let z = intercept + weights.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        let p = sigmoid(z);
        let y = if *y { 1.0 } else { 0.0 };
        // Clamped log keeps the loss finite at saturated probabilities.
        let eps = 1e-12;
        loss += -(y * p.max(eps).ln() + (1.0 - y) * (1.0 - p).max(eps).ln());
        let residual = p - y;
        for (g, xi) in grad_w.iter_mut().zip(x) {
            *g += residual * xi;
        }
        grad_b += residual;
    }
    loss = loss / n + l2 * weights.iter().map(|w| w * w).sum::<f64>() / 2.0;
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    (loss, grad_w, grad_b / n)
}

/// Fit a logistic model by full-batch gradient descent.
///
/// The ridge term is applied as a proximal step,
/// `w ← (w − lr·∇logloss) / (1 + lr·λ)`, which minimizes the same
/// objective but stays stable for arbitrarily large λ; at λ = 0 it is
/// exactly plain gradient descent.
///
/// The returned signature always enters silent mode; promotion to live is
/// an explicit, separate step. Baseline means are the dataset's feature
/// means.
#[allow(clippy::too_many_arguments)]
pub fn retrain(
    model_id: &str,
    features: &[String],
    dataset: &[(Vec<f64>, bool)],
    hyper: Hyper,
    next_version: u32,
    bands: RiskBands,
    trained_at: DateTime<Utc>,
    training_note: &str,
) -> Result<ModelSignature, ScoringError> {
    if dataset.is_empty() {
        return Err(ScoringError::Dataset("dataset is empty".to_string()));
    }
    if dataset.iter().any(|(x, _)| x.len() != features.len()) {
        return Err(ScoringError::Dataset(
            "sample width does not match feature list".to_string(),
        ));
    }
    let positives = dataset.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == dataset.len() {
        return Err(ScoringError::Dataset(
            "both outcome classes must be present".to_string(),
        ));
    }

    let mut weights = vec![0.0; features.len()];
    let mut intercept = 0.0;
    let shrink = 1.0 + hyper.learning_rate * hyper.l2;
    for epoch in 0..hyper.epochs {
        // Data-only gradient; the ridge term enters via the proximal
        // shrink below.
        let (loss, grad_w, grad_b) = logloss_and_gradient(&weights, intercept, dataset, 0.0);
        if !loss.is_finite() {
            return Err(ScoringError::Divergence { epoch });
        }
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w = (*w - hyper.learning_rate * g) / shrink;
        }
        intercept -= hyper.learning_rate * grad_b;
    }
    let (final_loss, _, _) = logloss_and_gradient(&weights, intercept, dataset, hyper.l2);
    if !final_loss.is_finite() || weights.iter().any(|w| !w.is_finite()) || !intercept.is_finite() {
        return Err(ScoringError::Divergence {
            epoch: hyper.epochs,
        });
    }

    let n = dataset.len() as f64;
    let baseline_means: Vec<f64> = (0..features.len())
        .map(|j| dataset.iter().map(|(x, _)| x[j]).sum::<f64>() / n)
        .collect();

    let sig = ModelSignature {
        model_id: model_id.to_string(),
        version: next_version,
        family: "logistic".to_string(),
        features: features.to_vec(),
        weights,
        intercept,
        baseline_means,
        risk_bands: bands,
        mode: DeployMode::Silent,
        created_at: format_ts(trained_at),
        training_note: training_note.to_string(),
    };
    sig.validate()?;
    Ok(sig)
}

/// Outcome of a registry registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegisterOutcome {
    Registered,
    /// Version already present with identical content.
    AlreadyRegistered,
}

/// Directory-backed model registry.
#[derive(Debug, Clone)]
pub struct Registry {
    dir: PathBuf,
}

impl Registry {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ScoringError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| ScoringError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Self { dir })
    }

    fn model_dir(&self, model_id: &str) -> PathBuf {
        self.dir.join(model_id)
    }

    fn version_path(&self, model_id: &str, version: u32) -> PathBuf {
        self.model_dir(model_id).join(format!("v{version}.json"))
    }

    fn io(path: &Path, source: std::io::Error) -> ScoringError {
        ScoringError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Register a signature, enforcing version immutability.
    pub fn register(&self, sig: &ModelSignature) -> Result<RegisterOutcome, ScoringError> {
        sig.validate()?;
        let path = self.version_path(&sig.model_id, sig.version);
        let canonical = sig.canonical();
        if path.exists() {
            let existing = fs::read_to_string(&path).map_err(|e| Self::io(&path, e))?;
            let existing_canonical = serde_json::from_str::<Value>(&existing)
                .map(|v| canonical_json(&v))
                .unwrap_or(existing);
            if existing_canonical == canonical {
                return Ok(RegisterOutcome::AlreadyRegistered);
            }
            return Err(ScoringError::VersionConflict {
                model_id: sig.model_id.clone(),
                version: sig.version,
            });
        }
        let dir = self.model_dir(&sig.model_id);
        fs::create_dir_all(&dir).map_err(|e| Self::io(&dir, e))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, &canonical).map_err(|e| Self::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Self::io(&path, e))?;
        Ok(RegisterOutcome::Registered)
    }

    /// Load one registered version.
    pub fn load(&self, model_id: &str, version: u32) -> Result<ModelSignature, ScoringError> {
        let path = self.version_path(model_id, version);
        if !path.exists() {
            return Err(ScoringError::UnknownVersion {
                model_id: model_id.to_string(),
                version,
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| Self::io(&path, e))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| schema_err(path.display().to_string(), e.to_string()))?;
        parse_signature(&doc)
    }

    /// All registered versions, ascending.
    pub fn versions(&self, model_id: &str) -> Result<Vec<u32>, ScoringError> {
        let dir = self.model_dir(model_id);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut versions = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Self::io(&dir, e))? {
            let entry = entry.map_err(|e| Self::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(v) = name
                .strip_prefix('v')
                .and_then(|rest| rest.strip_suffix(".json"))
                .and_then(|num| num.parse::<u32>().ok())
            {
                versions.push(v);
            }
        }
        versions.sort_unstable();
        Ok(versions)
    }

    /// Version named by the `current` marker, if set.
    pub fn current_version(&self, model_id: &str) -> Result<Option<u32>, ScoringError> {
        let path = self.model_dir(model_id).join("current");
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Self::io(&path, e))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| schema_err(path.display().to_string(), e.to_string()))?;
        Ok(v.get("version").and_then(Value::as_u64).map(|n| n as u32))
    }

    /// Atomically flip the `current` marker.
    pub fn set_current(&self, model_id: &str, version: u32) -> Result<(), ScoringError> {
        if !self.version_path(model_id, version).exists() {
            return Err(ScoringError::UnknownVersion {
                model_id: model_id.to_string(),
                version,
            });
        }
        let dir = self.model_dir(model_id);
        fs::create_dir_all(&dir).map_err(|e| Self::io(&dir, e))?;
        let path = dir.join("current");
        let tmp = dir.join("current.tmp");
        fs::write(&tmp, format!("{{\"version\":{version}}}")).map_err(|e| Self::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Self::io(&path, e))?;
        Ok(())
    }

    /// Newest registered version above `above` whose signature declares
    /// silent mode — the shadow candidate scored alongside the live one.
    pub fn newest_silent_above(
        &self,
        model_id: &str,
        above: u32,
    ) -> Result<Option<ModelSignature>, ScoringError> {
        for v in self.versions(model_id)?.into_iter().rev() {
            if v <= above {
                break;
            }
            let sig = self.load(model_id, v)?;
            if sig.mode == DeployMode::Silent {
                return Ok(Some(sig));
            }
        }
        Ok(None)
    }
}
