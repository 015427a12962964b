//! Structured logging, drift detection, and the alerting service.
//!
//! Log lines are single-line JSON under `<data-dir>/logs/engine.log.jsonl`
//! so any full-text indexer can ingest them. Drift uses the population
//! stability index over the feature spec's baseline histogram bins, with
//! the conventional 0.2 flag threshold. Alerts deduplicate by
//! (kind, pipeline, detail) within a window, then deliver once per window
//! with the aggregated count; delivery failure never fails a pipeline.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::clock::{format_ts, Clock};
use crate::config::{AlertSpec, BackoffPolicy, SourceSpec};
use crate::featurize::{FeatureSpec, HistBins};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("distribution length mismatch: baseline {baseline}, observed {observed}")]
    LengthMismatch { baseline: usize, observed: usize },
    #[error("proportions must sum to 1 (got {sum})")]
    BadDistribution { sum: f64 },
    #[error("log I/O error at `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

// ── structured logging ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogLevel {
    Debug,
    Info,
    Warn,
    Error,
}

impl LogLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Debug => "debug",
            Self::Info => "info",
            Self::Warn => "warn",
            Self::Error => "error",
        }
    }
}

/// Serialized writer of machine-parseable log lines.
pub struct EventLog {
    path: PathBuf,
    file: Mutex<fs::File>,
    clock: Arc<dyn Clock>,
}

impl EventLog {
    pub fn open(data_dir: &Path, clock: Arc<dyn Clock>) -> Result<Self, MonitorError> {
        let dir = data_dir.join("logs");
        fs::create_dir_all(&dir).map_err(|source| MonitorError::Io {
            path: dir.clone(),
            source,
        })?;
        let path = dir.join("engine.log.jsonl");
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| MonitorError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Self {
            path,
            file: Mutex::new(file),
            clock,
        })
    }

    /// Emit one event as a single JSON line.
    pub fn emit(
        &self,
        level: LogLevel,
        pipeline: &str,
        stage: &str,
        message: &str,
        fields: &[(&str, Value)],
    ) {
        let mut obj = Map::new();
        obj.insert("ts".into(), Value::String(format_ts(self.clock.now())));
        obj.insert("level".into(), Value::String(level.as_str().to_string()));
        obj.insert("pipeline".into(), Value::String(pipeline.to_string()));
        obj.insert("stage".into(), Value::String(stage.to_string()));
        obj.insert("message".into(), Value::String(message.to_string()));
        if !fields.is_empty() {
            let mut extra = Map::new();
            for (k, v) in fields {
                extra.insert((*k).to_string(), v.clone());
            }
            obj.insert("fields".into(), Value::Object(extra));
        }
        let line = serde_json::to_string(&Value::Object(obj)).expect("log line serializes");
        // A full disk must not take the pipeline down with it.
        if let Ok(mut file) = self.file.lock() {
            let _ = writeln!(file, "{line}");
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

// ── drift detection ─────────────────────────────────────────────────

/// Population stability index `Σ (qᵢ − pᵢ)·ln(qᵢ/pᵢ)`.
///
/// Zero proportions are replaced by ε = 1e-4 and both distributions
/// renormalized, so the result is always finite.
pub fn psi(baseline: &[f64], observed: &[f64]) -> Result<f64, MonitorError> {
    if baseline.len() != observed.len() {
        return Err(MonitorError::LengthMismatch {
            baseline: baseline.len(),
            observed: observed.len(),
        });
    }
    for dist in [baseline, observed] {
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MonitorError::BadDistribution { sum });
        }
    }
    const EPS: f64 = 1e-4;
    let smooth = |dist: &[f64]| -> Vec<f64> {
        let padded: Vec<f64> = dist
            .iter()
            .map(|&p| if p <= 0.0 { EPS } else { p })
            .collect();
        let total: f64 = padded.iter().sum();
        padded.into_iter().map(|p| p / total).collect()
    };
    let p = smooth(baseline);
    let q = smooth(observed);
    Ok(p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| (qi - pi) * (qi / pi).ln())
        .sum())
}

/// Histogram proportions of observed values against baseline bin edges.
/// Out-of-range values fall into the end bins.
pub fn bin_proportions(bins: &HistBins, values: &[f64]) -> Option<Vec<f64>> {
    if values.is_empty() {
        return None;
    }
    let mut counts = vec![0usize; bins.proportions.len()];
    for &v in values {
        counts[bins.bin_of(v)] += 1;
    }
    let n = values.len() as f64;
    Some(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Drift evaluation result for one feature.
#[derive(Debug, Clone)]
pub struct DriftReport {
    pub feature: String,
    pub psi: f64,
    pub baseline: Vec<f64>,
    pub observed: Vec<f64>,
    pub window: usize,
    pub flagged: bool,
}

/// Evaluate drift for every feature carrying baseline bins.
///
/// `recent` maps feature names to their most recent committed values;
/// features with fewer than `min_samples` observations are skipped.
pub fn evaluate_drift(
    spec: &FeatureSpec,
    recent: &HashMap<String, Vec<f64>>,
    threshold: f64,
    min_samples: usize,
) -> Vec<DriftReport> {
    let mut reports = Vec::new();
    for feature in &spec.features {
        let Some(bins) = feature.baseline.as_ref().and_then(|b| b.bins.as_ref()) else {
            continue;
        };
        let Some(values) = recent.get(&feature.name) else {
            continue;
        };
        if values.len() < min_samples {
            continue;
        }
        let Some(observed) = bin_proportions(bins, values) else {
            continue;
        };
        let Ok(value) = psi(&bins.proportions, &observed) else {
            continue;
        };
        reports.push(DriftReport {
            feature: feature.name.clone(),
            psi: value,
            baseline: bins.proportions.clone(),
            observed,
            window: values.len(),
            flagged: value > threshold,
        });
    }
    reports
}

// ── alerts ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlertKind {
    PipelineFailure,
    MissingData,
    DriftDetected,
    IntegrityViolation,
    CoercionSurge,
}

impl AlertKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PipelineFailure => "pipeline_failure",
            Self::MissingData => "missing_data",
            Self::DriftDetected => "drift_detected",
            Self::IntegrityViolation => "integrity_violation",
            Self::CoercionSurge => "coercion_surge",
        }
    }
}

/// One alert event, possibly aggregating duplicates within its window.
#[derive(Debug, Clone, PartialEq)]
pub struct Alert {
    pub kind: AlertKind,
    pub pipeline: String,
    pub detail: String,
    pub first_seen: DateTime<Utc>,
    pub count: u64,
}

impl Alert {
    fn body(&self) -> String {
        let mut obj = Map::new();
        obj.insert("count".into(), Value::Number(self.count.into()));
        obj.insert("detail".into(), Value::String(self.detail.clone()));
        obj.insert(
            "first_seen".into(),
            Value::String(format_ts(self.first_seen)),
        );
        obj.insert("kind".into(), Value::String(self.kind.as_str().to_string()));
        obj.insert("pipeline".into(), Value::String(self.pipeline.clone()));
        serde_json::to_string(&Value::Object(obj)).expect("alert serializes")
    }
}

#[derive(Debug)]
struct PendingAlert {
    alert: Alert,
    /// Aggregation ends and delivery may start at this instant.
    flush_at: DateTime<Utc>,
    attempts: u32,
    next_try: DateTime<Utc>,
}

/// Outcome counters of an alert pump pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PumpOutcome {
    pub delivered: u64,
    pub failed_attempts: u64,
    pub dropped: u64,
}

/// Deduplicating, never-blocking alert router.
///
/// `raise` only aggregates state; webhook delivery happens in `pump`,
/// which the engine calls after commit points and on shutdown, so a dead
/// alert endpoint can never fail or delay a batch.
pub struct Alerter {
    webhook_url: Option<String>,
    dedup_window: chrono::Duration,
    backoff: BackoffPolicy,
    clock: Arc<dyn Clock>,
    agent: ureq::Agent,
    pending: Mutex<Vec<PendingAlert>>,
    raised_total: Mutex<u64>,
}

impl Alerter {
    pub fn new(spec: &AlertSpec, clock: Arc<dyn Clock>) -> Self {
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .http_status_as_error(false)
                .timeout_global(Some(std::time::Duration::from_secs(5)))
                .build(),
        );
        Self {
            webhook_url: spec.webhook_url.clone(),
            dedup_window: chrono::Duration::milliseconds((spec.dedup_window_s * 1000.0) as i64),
            backoff: BackoffPolicy::default(),
            clock,
            agent,
            pending: Mutex::new(Vec::new()),
            raised_total: Mutex::new(0),
        }
    }

    /// Override the delivery retry policy (tests use millisecond scales).
    pub fn with_backoff(mut self, backoff: BackoffPolicy) -> Self {
        self.backoff = backoff;
        self
    }

    /// Record an alert; identical (kind, pipeline, detail) within the
    /// dedup window increments the count instead of re-sending.
    pub fn raise(&self, kind: AlertKind, pipeline: &str, detail: &str) {
        let now = self.clock.now();
        *self.raised_total.lock().unwrap() += 1;
        let mut pending = self.pending.lock().unwrap();
        if let Some(entry) = pending.iter_mut().find(|p| {
            p.alert.kind == kind && p.alert.pipeline == pipeline && p.alert.detail == detail
        }) {
            entry.alert.count += 1;
            return;
        }
        pending.push(PendingAlert {
            alert: Alert {
                kind,
                pipeline: pipeline.to_string(),
                detail: detail.to_string(),
                first_seen: now,
                count: 1,
            },
            flush_at: now + self.dedup_window,
            attempts: 0,
            next_try: now,
        });
    }

    /// Total alerts raised (before deduplication).
    pub fn raised_total(&self) -> u64 {
        *self.raised_total.lock().unwrap()
    }

    /// Alerts currently aggregating or awaiting delivery.
    pub fn pending_count(&self) -> usize {
        self.pending.lock().unwrap().len()
    }

    /// Attempt delivery of every alert whose window has elapsed and whose
    /// retry timer is due. With no webhook configured, due alerts are
    /// drained without delivery (they remain visible in the log).
    pub fn pump(&self, log: Option<&EventLog>) -> PumpOutcome {
        let now = self.clock.now();
        self.pump_inner(now, false, log)
    }

    /// Flush everything immediately (shutdown path): windows are cut
    /// short and each alert gets one final delivery attempt.
    pub fn flush_all(&self, log: Option<&EventLog>) -> PumpOutcome {
        let now = self.clock.now();
        self.pump_inner(now, true, log)
    }

    fn pump_inner(&self, now: DateTime<Utc>, force: bool, log: Option<&EventLog>) -> PumpOutcome {
        let mut outcome = PumpOutcome::default();
        let mut due = Vec::new();
        {
            let mut pending = self.pending.lock().unwrap();
            let mut keep = Vec::new();
            for entry in pending.drain(..) {
                let window_open = !force && now < entry.flush_at;
                let retry_wait = !force && now < entry.next_try;
                if window_open || retry_wait {
                    keep.push(entry);
                } else {
                    due.push(entry);
                }
            }
            *pending = keep;
        }

        for mut entry in due {
            let delivered = match &self.webhook_url {
                None => true,
                Some(url) => self.post_alert(url, &entry.alert),
            };
            if delivered {
                outcome.delivered += 1;
                if let Some(log) = log {
                    log.emit(
                        LogLevel::Info,
                        &entry.alert.pipeline,
                        "alert",
                        "alert delivered",
                        &[
                            ("kind", Value::String(entry.alert.kind.as_str().into())),
                            ("count", Value::Number(entry.alert.count.into())),
                            ("detail", Value::String(entry.alert.detail.clone())),
                        ],
                    );
                }
                continue;
            }
            outcome.failed_attempts += 1;
            entry.attempts += 1;
            if entry.attempts >= self.backoff.max_attempts {
                outcome.dropped += 1;
                if let Some(log) = log {
                    log.emit(
                        LogLevel::Error,
                        &entry.alert.pipeline,
                        "alert",
                        "alert delivery dropped after retry budget",
                        &[
                            ("kind", Value::String(entry.alert.kind.as_str().into())),
                            ("attempts", Value::Number(entry.attempts.into())),
                        ],
                    );
                }
                continue;
            }
            let delay_ms = (self.backoff.base_ms as f64
                * self.backoff.factor.powi(entry.attempts as i32 - 1))
            .round() as i64;
            entry.next_try = now + chrono::Duration::milliseconds(delay_ms);
            if let Some(log) = log {
                log.emit(
                    LogLevel::Warn,
                    &entry.alert.pipeline,
                    "alert",
                    "alert delivery failed; queued for retry",
                    &[
                        ("kind", Value::String(entry.alert.kind.as_str().into())),
                        ("attempt", Value::Number(entry.attempts.into())),
                    ],
                );
            }
            self.pending.lock().unwrap().push(entry);
        }
        outcome
    }

    fn post_alert(&self, url: &str, alert: &Alert) -> bool {
        match self
            .agent
            .post(url)
            .header("Content-Type", "application/json")
            .send(alert.body())
        {
            Ok(response) => (200..300).contains(&response.status().as_u16()),
            Err(_) => false,
        }
    }
}

// ── missing-data checks ─────────────────────────────────────────────

/// Tracks per-source arrival times and raises when a source goes quiet
/// for more than twice its expected cadence.
#[derive(Debug, Default)]
pub struct MissingDataMonitor {
    last_seen: HashMap<String, DateTime<Utc>>,
    alerting: HashMap<String, bool>,
}

impl MissingDataMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record that payloads arrived from a source. Returns true when
    /// this arrival ends an active missing-data episode (the caller logs
    /// the recovery event).
    pub fn record_arrival(&mut self, source_id: &str, now: DateTime<Utc>) -> bool {
        self.last_seen.insert(source_id.to_string(), now);
        std::mem::replace(
            self.alerting.entry(source_id.to_string()).or_insert(false),
            false,
        )
    }

    /// Check one source against its expected cadence.
    pub fn check(&mut self, source: &SourceSpec, now: DateTime<Utc>) -> Option<Alert> {
        let cadence = source.cadence_s?;
        let last = self
            .last_seen
            .entry(source.id.clone())
            .or_insert(now)
            .to_owned();
        let silence = (now - last).num_milliseconds() as f64 / 1000.0;
        if silence > 2.0 * cadence {
            self.alerting.insert(source.id.clone(), true);
            Some(Alert {
                kind: AlertKind::MissingData,
                pipeline: source.id.clone(),
                detail: format!(
                    "no data from source `{}` for {silence:.1}s (cadence {cadence}s)",
                    source.id
                ),
                first_seen: now,
                count: 1,
            })
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::config::SourceKind;
    use proptest::prelude::*;

    #[test]
    fn psi_of_identical_distributions_is_zero() {
        let p = vec![0.25, 0.25, 0.5];
        assert_eq!(psi(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn psi_matches_direct_formula_evaluation() {
        // Oracle: 0.3·ln(1.6) + (−0.3)·ln(0.4)
        let oracle = 0.3 * 1.6f64.ln() + (-0.3) * 0.4f64.ln();
        let value = psi(&[0.5, 0.5], &[0.8, 0.2]).unwrap();
        assert!((value - oracle).abs() < 1e-12);
        assert!((value - 0.4159).abs() < 1e-4);
    }

    #[test]
    fn psi_handles_zero_bins_via_smoothing() {
        let value = psi(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(value.is_finite());
        assert!(value > 0.0);
    }

    #[test]
    fn psi_rejects_mismatched_or_unnormalized_inputs() {
        assert!(matches!(
            psi(&[0.5, 0.5], &[1.0]),
            Err(MonitorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            psi(&[0.5, 0.4], &[0.5, 0.5]),
            Err(MonitorError::BadDistribution { .. })
        ));
    }

    proptest! {
        #[test]
        fn psi_is_nonnegative_and_permutation_stable(
            raw in proptest::collection::vec(0.01f64..1.0, 2..8),
            shift in 0usize..7,
        ) {
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            // Observed: rotate baseline to vary while keeping a valid
            // distribution.
            let k = shift % p.len();
            let q: Vec<f64> = p.iter().cycle().skip(k).take(p.len()).copied().collect();
            let v = psi(&p, &q).unwrap();
            prop_assert!(v >= -1e-12, "psi = {v}");
            prop_assert_eq!(psi(&p, &p).unwrap(), 0.0);

            // Simultaneous permutation of both distributions is invariant.
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.rotate_left(k);
            let p2: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let q2: Vec<f64> = idx.iter().map(|&i| q[i]).collect();
            prop_assert!((psi(&p2, &q2).unwrap() - v).abs() < 1e-12);
        }
    }

    #[test]
    fn binning_clamps_outliers_into_end_bins() {
        let bins = HistBins {
            edges: vec![0.0, 1.0, 2.0],
            proportions: vec![0.5, 0.5],
        };
        let props = bin_proportions(&bins, &[-5.0, 0.5, 1.5, 99.0]).unwrap();
        assert_eq!(props, vec![0.5, 0.5]);
        assert!(bin_proportions(&bins, &[]).is_none());
    }

    #[test]
    fn evaluate_drift_flags_shifted_distribution() {
        let spec = crate::featurize::parse_feature_spec(&serde_json::json!({
            "features": [{
                "name": "hr", "imputation": "mean",
                "baseline": {"mean": 80.0, "std": 10.0,
                             "bins": {"edges": [60.0, 75.0, 85.0, 100.0],
                                      "proportions": [0.3, 0.4, 0.3]}}
            }]
        }))
        .unwrap();
        let mut recent = HashMap::new();
        // Every observation far above baseline.
        recent.insert("hr".to_string(), vec![115.0; 40]);
        let reports = evaluate_drift(&spec, &recent, 0.2, 20);
        assert_eq!(reports.len(), 1);
        assert!(reports[0].flagged);
        assert!(reports[0].psi > 0.2);

        // Too few samples: skipped.
        recent.insert("hr".to_string(), vec![115.0; 5]);
        assert!(evaluate_drift(&spec, &recent, 0.2, 20).is_empty());
    }

    #[test]
    fn alerts_deduplicate_within_window() {
        let clock = Arc::new(ManualClock::fixed());
        let spec = AlertSpec {
            dedup_window_s: 60.0,
            ..AlertSpec::default()
        };
        let alerter = Alerter::new(&spec, clock.clone());
        for _ in 0..3 {
            alerter.raise(AlertKind::PipelineFailure, "p", "source down");
        }
        assert_eq!(alerter.pending_count(), 1);
        assert_eq!(alerter.raised_total(), 3);

        // Window still open: nothing due.
        let outcome = alerter.pump(None);
        assert_eq!(outcome.delivered, 0);

        // After the window: one delivery carrying count 3.
        clock.advance_millis(61_000);
        let outcome = alerter.pump(None);
        assert_eq!(outcome.delivered, 1);
        assert_eq!(alerter.pending_count(), 0);
    }

    #[test]
    fn distinct_details_do_not_aggregate() {
        let clock = Arc::new(ManualClock::fixed());
        let alerter = Alerter::new(&AlertSpec::default(), clock.clone());
        alerter.raise(AlertKind::PipelineFailure, "p", "a");
        alerter.raise(AlertKind::PipelineFailure, "p", "b");
        alerter.raise(AlertKind::MissingData, "p", "a");
        assert_eq!(alerter.pending_count(), 3);
    }

    #[test]
    fn dead_webhook_retries_then_drops() {
        let clock = Arc::new(ManualClock::fixed());
        let spec = AlertSpec {
            // Closed port: delivery always fails.
            webhook_url: Some("http://127.0.0.1:9/alerts".to_string()),
            dedup_window_s: 0.0,
            ..AlertSpec::default()
        };
        let alerter = Alerter::new(&spec, clock.clone()).with_backoff(BackoffPolicy {
            base_ms: 10,
            factor: 2.0,
            max_attempts: 3,
        });
        alerter.raise(AlertKind::PipelineFailure, "p", "down");

        let first = alerter.pump(None);
        assert_eq!(first.failed_attempts, 1);
        assert_eq!(alerter.pending_count(), 1);

        clock.advance_millis(50);
        let second = alerter.pump(None);
        assert_eq!(second.failed_attempts, 1);

        clock.advance_millis(50);
        let third = alerter.pump(None);
        assert_eq!(third.dropped, 1);
        assert_eq!(alerter.pending_count(), 0);
    }

    #[test]
    fn flush_all_cuts_windows_short() {
        let clock = Arc::new(ManualClock::fixed());
        let spec = AlertSpec {
            dedup_window_s: 3600.0,
            ..AlertSpec::default()
        };
        let alerter = Alerter::new(&spec, clock);
        alerter.raise(AlertKind::DriftDetected, "p", "hr");
        let outcome = alerter.flush_all(None);
        assert_eq!(outcome.delivered, 1);
        assert_eq!(alerter.pending_count(), 0);
    }

    fn cadence_source(id: &str, cadence: f64) -> SourceSpec {
        SourceSpec {
            id: id.into(),
            kind: SourceKind::HttpPoll,
            endpoint: Some("http://127.0.0.1:9/api".into()),
            directory: None,
            token_env: None,
            cadence_s: Some(cadence),
            backoff: BackoffPolicy::default(),
        }
    }

    #[test]
    fn missing_data_fires_beyond_twice_cadence() {
        let clock = ManualClock::fixed();
        let mut monitor = MissingDataMonitor::new();
        let source = cadence_source("ehr", 60.0);

        monitor.record_arrival("ehr", clock.now());

        // 90 s of silence: within 2× cadence, no alert.
        clock.advance_millis(90_000);
        assert!(monitor.check(&source, clock.now()).is_none());

        // 130 s of silence: past 2× cadence.
        clock.advance_millis(40_000);
        let alert = monitor.check(&source, clock.now()).unwrap();
        assert_eq!(alert.kind, AlertKind::MissingData);
        assert!(alert.detail.contains("ehr"));

        // Arrival clears the episode and reports the recovery.
        assert!(monitor.record_arrival("ehr", clock.now()));
        assert!(!monitor.record_arrival("ehr", clock.now()));
        assert!(monitor.check(&source, clock.now()).is_none());
    }

    #[test]
    fn missing_data_ignores_sources_without_cadence() {
        let clock = ManualClock::fixed();
        let mut monitor = MissingDataMonitor::new();
        let mut source = cadence_source("ehr", 60.0);
        source.cadence_s = None;
        clock.advance_millis(10_000_000);
        assert!(monitor.check(&source, clock.now()).is_none());
    }

    #[test]
    fn event_log_writes_single_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::fixed());
        let log = EventLog::open(dir.path(), clock).unwrap();
        log.emit(
            LogLevel::Info,
            "p",
            "fetch",
            "fetched 3 payloads",
            &[("payloads", Value::Number(3.into()))],
        );
        log.emit(LogLevel::Error, "p", "score", "boom", &[]);
        let text = fs::read_to_string(log.path()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for line in &lines {
            let v: Value = serde_json::from_str(line).unwrap();
            assert!(v["ts"].is_string());
            assert!(v["level"].is_string());
        }
        assert_eq!(
            serde_json::from_str::<Value>(lines[0]).unwrap()["fields"]["payloads"],
            Value::Number(3.into())
        );
    }
}
