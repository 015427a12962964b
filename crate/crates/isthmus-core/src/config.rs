//! The single platform configuration document: sources, pipelines,
//! stores, alert routes, and run parameters.
//!
//! Loading validates the whole graph transitively — every referenced
//! template, feature spec, and model signature file is opened and
//! validated — and hands back an immutable [`PlatformConfig`] that is
//! safe to share read-only across concurrently running pipelines.
//! Unknown keys are a hard error: a typo must fail loudly rather than
//! silently misdeploy.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::parse_feature_spec;
use crate::scoring::parse_signature;
use crate::transform::parse_template;

/// Retry policy for transient source failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackoffPolicy {
    #[serde(default = "default_backoff_base_ms")]
    pub base_ms: u64,
    #[serde(default = "default_backoff_factor")]
    pub factor: f64,
    #[serde(default = "default_backoff_attempts")]
    pub max_attempts: u32,
}

fn default_backoff_base_ms() -> u64 {
    1000
}
fn default_backoff_factor() -> f64 {
    2.0
}
fn default_backoff_attempts() -> u32 {
    5
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        Self {
            base_ms: default_backoff_base_ms(),
            factor: default_backoff_factor(),
            max_attempts: default_backoff_attempts(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    HttpPoll,
    FileDrop,
    Stream,
}

/// Declaration of one data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub id: String,
    pub kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    /// Name of the environment variable holding the bearer token.
    /// Secrets are never stored inline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
    /// Expected arrival cadence in seconds, for missing-data alerting
    /// and daemon scheduling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cadence_s: Option<f64>,
    #[serde(default)]
    pub backoff: BackoffPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Live,
    Silent,
}

/// Identity of the model signature a pipeline loaded, captured during
/// transitive validation so config deltas can detect version bumps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureFingerprint {
    pub model_id: String,
    pub version: u32,
}

/// Declaration of one scoring pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub id: String,
    pub source_id: String,
    pub template_path: PathBuf,
    pub feature_spec_path: PathBuf,
    pub model_signature_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sink: Option<String>,
    pub mode: PipelineMode,
    #[serde(skip)]
    pub signature: Option<SignatureFingerprint>,
}

/// Storage locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreSpec {
    pub data_dir: PathBuf,
}

/// Alert routing and monitoring thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlertSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub webhook_url: Option<String>,
    /// Identical alerts within this window aggregate into one delivery.
    #[serde(default = "default_dedup_window")]
    pub dedup_window_s: f64,
    #[serde(default = "default_drift_threshold")]
    pub drift_threshold: f64,
    /// Most-recent committed scores examined per drift evaluation.
    #[serde(default = "default_drift_window")]
    pub drift_window: usize,
    /// Minimum committed observations before drift is evaluated.
    #[serde(default = "default_drift_min_samples")]
    pub drift_min_samples: usize,
    /// Coercion warnings in one cycle at or above this raise an alert.
    #[serde(default = "default_coercion_surge_min")]
    pub coercion_surge_min: u64,
}

fn default_dedup_window() -> f64 {
    60.0
}
fn default_drift_threshold() -> f64 {
    0.2
}
fn default_drift_window() -> usize {
    100
}
fn default_drift_min_samples() -> usize {
    20
}
fn default_coercion_surge_min() -> u64 {
    5
}

impl Default for AlertSpec {
    fn default() -> Self {
        Self {
            webhook_url: None,
            dedup_window_s: default_dedup_window(),
            drift_threshold: default_drift_threshold(),
            drift_window: default_drift_window(),
            drift_min_samples: default_drift_min_samples(),
            coercion_surge_min: default_coercion_surge_min(),
        }
    }
}

/// Engine-wide run parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Default pipeline cadence in seconds when a source declares none.
    pub poll_interval_s: f64,
    pub batch_size: usize,
    pub max_parallel: usize,
    /// Committed silent scores required before a version may go live.
    #[serde(default = "default_promote_min_silent")]
    pub promote_min_silent: u64,
}

fn default_promote_min_silent() -> u64 {
    100
}

/// The validated platform configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformConfig {
    pub sources: Vec<SourceSpec>,
    pub pipelines: Vec<PipelineSpec>,
    pub stores: StoreSpec,
    #[serde(default)]
    pub alerts: AlertSpec,
    pub run: RunSpec,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PlatformConfig {
    /// Resolve a configured path against the config file's directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn source(&self, id: &str) -> Option<&SourceSpec> {
        self.sources.iter().find(|s| s.id == id)
    }

    pub fn pipeline(&self, id: &str) -> Option<&PipelineSpec> {
        self.pipelines.iter().find(|p| p.id == id)
    }

    /// Effective data directory, honoring the `ISTHMUS_DATA_DIR` override.
    pub fn data_dir(&self) -> PathBuf {
        match std::env::var_os("ISTHMUS_DATA_DIR") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.resolve(&self.stores.data_dir),
        }
    }
}

/// One validation finding, addressed by JSON path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Issue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ERROR {}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config `{path}` is not valid JSON: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("configuration is invalid ({} issue(s))", .issues.len())]
    Invalid { issues: Vec<Issue> },
}

impl ConfigError {
    /// All findings, uniformly as issues (parse errors map to `$`).
    pub fn issues(&self) -> Vec<Issue> {
        match self {
            Self::Io { path, source } => vec![Issue {
                path: "$".to_string(),
                message: format!("cannot read `{}`: {source}", path.display()),
            }],
            Self::Parse { path, detail } => vec![Issue {
                path: "$".to_string(),
                message: format!("`{}`: {detail}", path.display()),
            }],
            Self::Invalid { issues } => issues.clone(),
        }
    }
}

fn issue(issues: &mut Vec<Issue>, path: impl Into<String>, message: impl Into<String>) {
    issues.push(Issue {
        path: path.into(),
        message: message.into(),
    });
}

/// Load, parse, and fully validate a platform configuration.
///
/// Every referenced template, feature spec, and model signature file is
/// opened and validated; failures are reported with the JSON path of the
/// offending field or the offending file, and all findings are collected
/// rather than stopping at the first.
pub fn load_config(path: &Path) -> Result<PlatformConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut config: PlatformConfig =
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    config.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut issues = Vec::new();
    validate_shape(&config, &mut issues);
    validate_references(&mut config, &mut issues);

    if issues.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Invalid { issues })
    }
}

fn validate_shape(config: &PlatformConfig, issues: &mut Vec<Issue>) {
    let mut source_ids = BTreeSet::new();
    for (i, source) in config.sources.iter().enumerate() {
        let at = |f: &str| format!("$.sources[{i}].{f}");
        if source.id.is_empty() {
            issue(issues, at("id"), "source id must be non-empty");
        }
        if !source_ids.insert(source.id.clone()) {
            issue(issues, at("id"), format!("duplicate source id `{}`", source.id));
        }
        match source.kind {
            SourceKind::HttpPoll | SourceKind::Stream => {
                if source.endpoint.is_none() {
                    issue(issues, at("endpoint"), "endpoint required for http_poll/stream sources");
                }
                if source.directory.is_some() {
                    issue(issues, at("directory"), "directory only applies to file_drop sources");
                }
            }
            SourceKind::FileDrop => {
                if source.directory.is_none() {
                    issue(issues, at("directory"), "directory required for file_drop sources");
                }
                if source.endpoint.is_some() {
                    issue(issues, at("endpoint"), "endpoint only applies to http_poll/stream sources");
                }
            }
        }
        if let Some(env) = &source.token_env {
            if env.is_empty() || env.contains('=') {
                issue(issues, at("token_env"), "token_env must be an environment variable name");
            }
        }
        if let Some(c) = source.cadence_s {
            if !(c > 0.0) {
                issue(issues, at("cadence_s"), "cadence must be positive");
            }
        }
        if source.backoff.max_attempts == 0 {
            issue(issues, at("backoff.max_attempts"), "at least one attempt is required");
        }
        if !(source.backoff.factor >= 1.0) {
            issue(issues, at("backoff.factor"), "backoff factor must be >= 1");
        }
    }

    let mut pipeline_ids = BTreeSet::new();
    for (i, pipeline) in config.pipelines.iter().enumerate() {
        let at = |f: &str| format!("$.pipelines[{i}].{f}");
        if pipeline.id.is_empty() {
            issue(issues, at("id"), "pipeline id must be non-empty");
        }
        if !pipeline_ids.insert(pipeline.id.clone()) {
            issue(issues, at("id"), format!("duplicate pipeline id `{}`", pipeline.id));
        }
        if !source_ids.contains(&pipeline.source_id) {
            issue(
                issues,
                at("source_id"),
                format!("references unknown source `{}`", pipeline.source_id),
            );
        }
        match (pipeline.mode, &pipeline.sink) {
            (PipelineMode::Live, None) => {
                issue(issues, at("sink"), "live mode requires a sink endpoint");
            }
            (PipelineMode::Silent, Some(_)) => {
                issue(
                    issues,
                    at("sink"),
                    "silent mode must not declare a sink: silent scores are never delivered",
                );
            }
            _ => {}
        }
    }

    if !(config.run.poll_interval_s >= 1.0) {
        issue(issues, "$.run.poll_interval_s", "poll interval must be >= 1 second");
    }
    if config.run.batch_size < 1 {
        issue(issues, "$.run.batch_size", "batch size must be >= 1");
    }
    if config.run.max_parallel < 1 {
        issue(issues, "$.run.max_parallel", "max parallel pipelines must be >= 1");
    }
    if config.run.promote_min_silent < 1 {
        issue(issues, "$.run.promote_min_silent", "promotion gate must be >= 1");
    }
    if !(config.alerts.dedup_window_s >= 0.0) {
        issue(issues, "$.alerts.dedup_window_s", "dedup window must be >= 0");
    }
    if !(config.alerts.drift_threshold > 0.0) {
        issue(issues, "$.alerts.drift_threshold", "drift threshold must be positive");
    }
    if config.alerts.drift_window < 2 {
        issue(issues, "$.alerts.drift_window", "drift window must be >= 2");
    }
}

fn validate_references(config: &mut PlatformConfig, issues: &mut Vec<Issue>) {
    let base_dir = config.base_dir.clone();
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    };
    // model_id -> (canonical signature, declaring pipeline index)
    let mut models: BTreeMap<String, (String, usize)> = BTreeMap::new();

    for i in 0..config.pipelines.len() {
        let at = |f: &str| format!("$.pipelines[{i}].{f}");
        let template_path = resolve(&config.pipelines[i].template_path);
        match read_json(&template_path) {
            Err(e) => issue(issues, at("template_path"), e),
            Ok(doc) => {
                if let Err(e) = parse_template(&doc) {
                    issue(
                        issues,
                        at("template_path"),
                        format!("`{}`: {e}", template_path.display()),
                    );
                }
            }
        }
        let feature_path = resolve(&config.pipelines[i].feature_spec_path);
        match read_json(&feature_path) {
            Err(e) => issue(issues, at("feature_spec_path"), e),
            Ok(doc) => {
                if let Err(e) = parse_feature_spec(&doc) {
                    issue(
                        issues,
                        at("feature_spec_path"),
                        format!("`{}`: {e}", feature_path.display()),
                    );
                }
            }
        }
        let signature_path = resolve(&config.pipelines[i].model_signature_path);
        match read_json(&signature_path) {
            Err(e) => issue(issues, at("model_signature_path"), e),
            Ok(doc) => match parse_signature(&doc) {
                Err(e) => issue(
                    issues,
                    at("model_signature_path"),
                    format!("`{}`: {e}", signature_path.display()),
                ),
                Ok(sig) => {
                    let canonical = sig.canonical();
                    match models.get(&sig.model_id) {
                        Some((existing, first_idx)) if *existing != canonical => {
                            issue(
                                issues,
                                at("model_signature_path"),
                                format!(
                                    "model id `{}` conflicts with $.pipelines[{first_idx}]: \
                                     same id, different signature content",
                                    sig.model_id
                                ),
                            );
                        }
                        Some(_) => {}
                        None => {
                            models.insert(sig.model_id.clone(), (canonical, i));
                        }
                    }
                    config.pipelines[i].signature = Some(SignatureFingerprint {
                        model_id: sig.model_id,
                        version: sig.version,
                    });
                }
            },
        }
    }
}

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read `{}`: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("`{}` is not valid JSON: {e}", path.display()))
}

/// Pipelines affected by a configuration change.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigDelta {
    pub added: Vec<String>,
    pub removed: Vec<String>,
    /// Pipelines whose model signature path or version changed.
    pub changed: Vec<String>,
}

impl ConfigDelta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty()
    }
}

/// Compare two valid configurations pipeline by pipeline.
///
/// Total function: returns the pipelines that were added, removed, or
/// had their model signature path or version change — the orchestrator
/// reloads only those.
pub fn diff_config(old: &PlatformConfig, new: &PlatformConfig) -> ConfigDelta {
    let old_ids: BTreeMap<&str, &PipelineSpec> =
        old.pipelines.iter().map(|p| (p.id.as_str(), p)).collect();
    let new_ids: BTreeMap<&str, &PipelineSpec> =
        new.pipelines.iter().map(|p| (p.id.as_str(), p)).collect();

    let mut delta = ConfigDelta::default();
    for id in new_ids.keys() {
        if !old_ids.contains_key(id) {
            delta.added.push((*id).to_string());
        }
    }
    for id in old_ids.keys() {
        if !new_ids.contains_key(id) {
            delta.removed.push((*id).to_string());
        }
    }
    for (id, new_p) in &new_ids {
        if let Some(old_p) = old_ids.get(id) {
            let path_changed = old_p.model_signature_path != new_p.model_signature_path;
            let version_changed = old_p.signature != new_p.signature;
            if path_changed || version_changed {
                delta.changed.push((*id).to_string());
            }
        }
    }
    delta.added.sort();
    delta.removed.sort();
    delta.changed.sort();
    delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::{json, Value};
    use std::fs;

    fn write(path: &Path, value: &Value) {
        fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    }

    fn template_doc() -> Value {
        json!({
            "key": "$.pat.id",
            "rules": [{"out": "hr", "path": "$.vitals[0].hr", "type": "number"}]
        })
    }

    fn feature_doc() -> Value {
        json!({"features": [{
            "name": "hr", "imputation": "mean",
            "baseline": {"mean": 80.0, "std": 10.0}
        }]})
    }

    fn signature_doc(version: u32) -> Value {
        json!({
            "model_id": "trauma", "version": version, "family": "logistic",
            "features": ["hr"], "weights": [0.02], "intercept": -1.0,
            "baseline_means": [80.0],
            "risk_bands": {"thresholds": [0.3, 0.7], "labels": ["low", "medium", "high"]},
            "mode": "live", "created_at": "2026-01-01T00:00:00.000Z", "training_note": ""
        })
    }

    fn config_doc(pipelines: Value) -> Value {
        json!({
            "sources": [{
                "id": "ehr", "kind": "http_poll",
                "endpoint": "http://127.0.0.1:9/api/patients",
                "token_env": "ISTHMUS_TOKEN_EHR", "cadence_s": 60.0
            }],
            "pipelines": pipelines,
            "stores": {"data_dir": "data"},
            "alerts": {},
            "run": {"poll_interval_s": 60.0, "batch_size": 16, "max_parallel": 2}
        })
    }

    fn pipeline_doc(id: &str, mode: &str, sink: Option<&str>) -> Value {
        let mut p = json!({
            "id": id, "source_id": "ehr",
            "template_path": "template.json",
            "feature_spec_path": "features.json",
            "model_signature_path": "model.json",
            "mode": mode
        });
        if let Some(s) = sink {
            p["sink"] = json!(s);
        }
        p
    }

    struct Fixture {
        dir: tempfile::TempDir,
    }

    impl Fixture {
        fn new(pipelines: Value) -> Self {
            let dir = tempfile::tempdir().unwrap();
            write(&dir.path().join("template.json"), &template_doc());
            write(&dir.path().join("features.json"), &feature_doc());
            write(&dir.path().join("model.json"), &signature_doc(1));
            write(&dir.path().join("config.json"), &config_doc(pipelines));
            Self { dir }
        }

        fn config_path(&self) -> PathBuf {
            self.dir.path().join("config.json")
        }
    }

    #[test]
    fn loads_two_pipelines_sharing_one_source() {
        let fx = Fixture::new(json!([
            pipeline_doc("p-live", "live", Some("http://127.0.0.1:9/emr/score")),
            pipeline_doc("p-silent", "silent", None),
        ]));
        let config = load_config(&fx.config_path()).unwrap();
        assert_eq!(config.pipelines.len(), 2);
        assert_eq!(
            config.pipelines[0].signature,
            Some(SignatureFingerprint {
                model_id: "trauma".into(),
                version: 1
            })
        );
    }

    #[test]
    fn silent_pipeline_with_sink_is_a_conflict() {
        let fx = Fixture::new(json!([
            pipeline_doc("p", "silent", Some("http://127.0.0.1:9/emr/score")),
        ]));
        let err = load_config(&fx.config_path()).unwrap_err();
        let issues = err.issues();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].path, "$.pipelines[0].sink");
        assert!(issues[0].message.contains("silent"));
    }

    #[test]
    fn live_pipeline_requires_sink() {
        let fx = Fixture::new(json!([pipeline_doc("p", "live", None)]));
        let err = load_config(&fx.config_path()).unwrap_err();
        assert!(err.issues().iter().any(|i| i.path == "$.pipelines[0].sink"));
    }

    #[test]
    fn transitive_model_failure_names_the_file() {
        let fx = Fixture::new(json!([pipeline_doc("p", "silent", None)]));
        // A model with a missing coefficient: weights shorter than features.
        let mut bad = signature_doc(1);
        bad["features"] = json!(["hr", "sbp"]);
        write(&fx.dir.path().join("model.json"), &bad);

        let err = load_config(&fx.config_path()).unwrap_err();
        let issues = err.issues();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].path, "$.pipelines[0].model_signature_path");
        assert!(issues[0].message.contains("model.json"), "{}", issues[0].message);
        assert!(issues[0].message.contains("$.weights"), "{}", issues[0].message);
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let fx = Fixture::new(json!([pipeline_doc("p", "silent", None)]));
        let mut doc = config_doc(json!([pipeline_doc("p", "silent", None)]));
        doc["surprise"] = json!(1);
        write(&fx.dir.path().join("config.json"), &doc);
        let err = load_config(&fx.config_path()).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
        assert!(err.to_string().contains("surprise"));
    }

    #[test]
    fn dangling_source_reference_is_reported() {
        let fx = Fixture::new(json!([pipeline_doc("p", "silent", None)]));
        let mut doc = config_doc(json!([pipeline_doc("p", "silent", None)]));
        doc["pipelines"][0]["source_id"] = json!("nope");
        write(&fx.dir.path().join("config.json"), &doc);
        let err = load_config(&fx.config_path()).unwrap_err();
        assert!(err
            .issues()
            .iter()
            .any(|i| i.path == "$.pipelines[0].source_id" && i.message.contains("nope")));
    }

    #[test]
    fn load_is_deterministic_and_round_trips() {
        let fx = Fixture::new(json!([
            pipeline_doc("p-live", "live", Some("http://127.0.0.1:9/emr/score")),
            pipeline_doc("p-silent", "silent", None),
        ]));
        let first = load_config(&fx.config_path()).unwrap();
        let second = load_config(&fx.config_path()).unwrap();
        assert_eq!(first, second);

        // Serialize back out beside the original and reload.
        let reserialized = fx.dir.path().join("config2.json");
        fs::write(&reserialized, serde_json::to_string_pretty(&first).unwrap()).unwrap();
        let third = load_config(&reserialized).unwrap();
        assert_eq!(first, third);
    }

    #[test]
    fn invalid_run_parameters_are_each_reported() {
        let fx = Fixture::new(json!([pipeline_doc("p", "silent", None)]));
        let mut doc = config_doc(json!([pipeline_doc("p", "silent", None)]));
        doc["run"] = json!({"poll_interval_s": 0.5, "batch_size": 0, "max_parallel": 0});
        write(&fx.dir.path().join("config.json"), &doc);
        let err = load_config(&fx.config_path()).unwrap_err();
        let paths: Vec<String> = err.issues().into_iter().map(|i| i.path).collect();
        assert!(paths.contains(&"$.run.poll_interval_s".to_string()));
        assert!(paths.contains(&"$.run.batch_size".to_string()));
        assert!(paths.contains(&"$.run.max_parallel".to_string()));
    }

    #[test]
    fn identical_configs_have_empty_delta() {
        let fx = Fixture::new(json!([pipeline_doc("p", "silent", None)]));
        let a = load_config(&fx.config_path()).unwrap();
        let b = load_config(&fx.config_path()).unwrap();
        assert!(diff_config(&a, &b).is_empty());
    }

    #[test]
    fn version_bump_marks_pipeline_changed() {
        let fx = Fixture::new(json!([pipeline_doc("p", "silent", None)]));
        let old = load_config(&fx.config_path()).unwrap();
        write(&fx.dir.path().join("model.json"), &signature_doc(2));
        let new = load_config(&fx.config_path()).unwrap();
        let delta = diff_config(&old, &new);
        assert_eq!(delta.changed, vec!["p".to_string()]);
        assert!(delta.added.is_empty() && delta.removed.is_empty());
    }

    #[test]
    fn add_and_remove_are_both_listed() {
        let fx = Fixture::new(json!([
            pipeline_doc("p-a", "silent", None),
            pipeline_doc("p-b", "silent", None),
        ]));
        let old = load_config(&fx.config_path()).unwrap();
        let doc = config_doc(json!([
            pipeline_doc("p-b", "silent", None),
            pipeline_doc("p-c", "silent", None),
        ]));
        write(&fx.dir.path().join("config.json"), &doc);
        let new = load_config(&fx.config_path()).unwrap();

        let delta = diff_config(&old, &new);

        // Brute-force oracle: compare raw id sets.
        let old_set: BTreeSet<&str> = old.pipelines.iter().map(|p| p.id.as_str()).collect();
        let new_set: BTreeSet<&str> = new.pipelines.iter().map(|p| p.id.as_str()).collect();
        let added: Vec<String> = new_set.difference(&old_set).map(|s| s.to_string()).collect();
        let removed: Vec<String> = old_set.difference(&new_set).map(|s| s.to_string()).collect();

        assert_eq!(delta.added, added);
        assert_eq!(delta.removed, removed);
        assert!(delta.changed.is_empty());
    }

    #[test]
    fn conflicting_model_ids_across_pipelines_are_rejected() {
        let fx = Fixture::new(json!([
            pipeline_doc("p-a", "silent", None),
            {
                "id": "p-b", "source_id": "ehr",
                "template_path": "template.json",
                "feature_spec_path": "features.json",
                "model_signature_path": "model2.json",
                "mode": "silent"
            }
        ]));
        // Same model id and version, different coefficient.
        let mut other = signature_doc(1);
        other["weights"] = json!([0.9]);
        write(&fx.dir.path().join("model2.json"), &other);
        let err = load_config(&fx.config_path()).unwrap_err();
        assert!(err
            .issues()
            .iter()
            .any(|i| i.message.contains("different signature content")));
    }
}
