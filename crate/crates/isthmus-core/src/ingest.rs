//! Source connectors: HTTP polling, file-drop pickup, and stream draining.
//!
//! All connectors produce [`RawPayload`]s — the unit of audit. Sequence
//! numbers are assigned durably by content hash through a
//! [`SequenceAssigner`] (backed by the store in production), so a payload
//! re-fetched after a crash or by a second pipeline sharing the source
//! resolves to the identity it was first given.
//!
//! Wire contract for HTTP sources: `GET <endpoint>?since=<cursor>&limit=<n>`
//! with `Authorization: Bearer <token>`, answered by the envelope
//! `{"cursor": "<opaque>", "items": [<json>...]}`. Items may be inline
//! JSON documents or JSON strings containing a document; string items that
//! fail to parse are quarantined without failing the batch.

use chrono::{DateTime, Utc};
use serde_json::Value;
use thiserror::Error;

use crate::canon::{content_hash, format_hash, parse_hash};
use crate::clock::{format_ts, parse_ts, Clock};
use crate::config::{BackoffPolicy, SourceKind, SourceSpec};

/// One fetched JSON document with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPayload {
    pub source_id: String,
    pub fetched_at: DateTime<Utc>,
    pub body: Value,
    /// Stable 64-bit hash of the canonicalized body.
    pub content_hash: u64,
    /// Monotonically increasing per-source counter.
    pub sequence: u64,
}

impl RawPayload {
    /// Canonical JSON object used for the archive line.
    pub fn to_archive_value(&self) -> Value {
        let mut obj = serde_json::Map::new();
        obj.insert("body".into(), self.body.clone());
        obj.insert("content_hash".into(), Value::String(format_hash(self.content_hash)));
        obj.insert("fetched_at".into(), Value::String(format_ts(self.fetched_at)));
        obj.insert("sequence".into(), Value::Number(self.sequence.into()));
        obj.insert("source_id".into(), Value::String(self.source_id.clone()));
        Value::Object(obj)
    }

    pub fn from_archive_value(value: &Value) -> Option<Self> {
        let obj = value.as_object()?;
        Some(Self {
            source_id: obj.get("source_id")?.as_str()?.to_string(),
            fetched_at: parse_ts(obj.get("fetched_at")?.as_str()?)?,
            body: obj.get("body")?.clone(),
            content_hash: parse_hash(obj.get("content_hash")?.as_str()?)?,
            sequence: obj.get("sequence")?.as_u64()?,
        })
    }
}

/// A bounded group of payloads from one source.
#[derive(Debug, Clone)]
pub struct Batch {
    pub batch_id: String,
    pub payloads: Vec<RawPayload>,
    pub assembled_at: DateTime<Utc>,
}

impl Batch {
    pub fn assemble(source_id: &str, payloads: Vec<RawPayload>, assembled_at: DateTime<Utc>) -> Option<Self> {
        let first = payloads.first()?.sequence;
        let last = payloads.last()?.sequence;
        Some(Self {
            batch_id: batch_id(source_id, first, last),
            payloads,
            assembled_at,
        })
    }

    pub fn first_seq(&self) -> u64 {
        self.payloads.first().map(|p| p.sequence).unwrap_or(0)
    }

    pub fn last_seq(&self) -> u64 {
        self.payloads.last().map(|p| p.sequence).unwrap_or(0)
    }
}

/// Batch identity: source plus the sequence span it covers.
pub fn batch_id(source_id: &str, first_seq: u64, last_seq: u64) -> String {
    format!("{source_id}:{first_seq}-{last_seq}")
}

/// Parse a batch id back into (source, first, last).
pub fn parse_batch_id(id: &str) -> Option<(String, u64, u64)> {
    let (source, span) = id.rsplit_once(':')?;
    let (first, last) = span.split_once('-')?;
    Some((source.to_string(), first.parse().ok()?, last.parse().ok()?))
}

/// Durable sequence assignment by (source, content hash).
pub trait SequenceAssigner {
    /// Return the payload's sequence, assigning the next one if the hash
    /// is new for this source. `new` is false for an already-seen hash.
    fn assign(&mut self, source_id: &str, content_hash: u64) -> Result<Assigned, String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assigned {
    pub sequence: u64,
    pub new: bool,
}

/// In-memory assigner for tests and replay.
#[derive(Debug, Default)]
pub struct MemoryAssigner {
    map: std::collections::HashMap<(String, u64), u64>,
    next: std::collections::HashMap<String, u64>,
}

impl SequenceAssigner for MemoryAssigner {
    fn assign(&mut self, source_id: &str, content_hash: u64) -> Result<Assigned, String> {
        if let Some(&seq) = self.map.get(&(source_id.to_string(), content_hash)) {
            return Ok(Assigned { sequence: seq, new: false });
        }
        let next = self.next.entry(source_id.to_string()).or_insert(0);
        *next += 1;
        self.map.insert((source_id.to_string(), content_hash), *next);
        Ok(Assigned { sequence: *next, new: true })
    }
}

/// A document set aside instead of failing the batch.
#[derive(Debug, Clone)]
pub struct QuarantineItem {
    pub raw: String,
    pub reason: String,
}

/// Outcome of one fetch against a source.
#[derive(Debug, Clone, Default)]
pub struct FetchResult {
    pub payloads: Vec<RawPayload>,
    pub quarantined: Vec<QuarantineItem>,
    /// New cursor to checkpoint once the batch commits (HTTP sources).
    pub cursor: Option<String>,
    /// Transient-failure retries spent on this fetch.
    pub retries: u32,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("source `{source_id}` rejected credentials (HTTP {status})")]
    Auth { source_id: String, status: u16 },
    #[error("source `{source_id}` failed after {attempts} attempts: {last}")]
    ExhaustedRetries {
        source_id: String,
        attempts: u32,
        last: String,
    },
    #[error("source `{source_id}` returned non-retryable HTTP {status}")]
    Http { source_id: String, status: u16 },
    #[error("token environment variable `{env}` for source `{source_id}` is not set")]
    MissingToken { source_id: String, env: String },
    #[error("source `{source_id}` has kind {kind:?}, expected {expected:?}")]
    WrongKind {
        source_id: String,
        kind: SourceKind,
        expected: SourceKind,
    },
    #[error("source `{source_id}` directory error: {detail}")]
    Directory { source_id: String, detail: String },
    #[error("sequence assignment failed for source `{source_id}`: {detail}")]
    Sequence { source_id: String, detail: String },
}

fn sleep_backoff(policy: &BackoffPolicy, attempt: u32) {
    let ms = (policy.base_ms as f64 * policy.factor.powi(attempt as i32 - 1)).round() as u64;
    std::thread::sleep(std::time::Duration::from_millis(ms));
}

/// Resolve the bearer token for a source from its configured env var.
pub fn resolve_token(source: &SourceSpec) -> Result<Option<String>, IngestError> {
    match &source.token_env {
        None => Ok(None),
        Some(env) => match std::env::var(env) {
            Ok(v) => Ok(Some(v)),
            Err(_) => Err(IngestError::MissingToken {
                source_id: source.id.clone(),
                env: env.clone(),
            }),
        },
    }
}

struct EnvelopeFetch {
    items: Vec<Value>,
    cursor: Option<String>,
    retries: u32,
    /// Set when the whole response body failed envelope parsing.
    bad_body: Option<String>,
}

/// GET the cursor envelope with retry-on-transient semantics.
fn fetch_envelope(
    agent: &ureq::Agent,
    source: &SourceSpec,
    token: Option<&str>,
    since: Option<&str>,
    limit: usize,
) -> Result<EnvelopeFetch, IngestError> {
    let endpoint = source.endpoint.as_deref().unwrap_or_default();
    let sep = if endpoint.contains('?') { '&' } else { '?' };
    let url = format!(
        "{endpoint}{sep}since={}&limit={limit}",
        since.unwrap_or_default()
    );
    let policy = &source.backoff;
    let mut last_error = String::new();
    for attempt in 1..=policy.max_attempts {
        if attempt > 1 {
            sleep_backoff(policy, attempt - 1);
        }
        let mut request = agent.get(&url);
        if let Some(token) = token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        match request.call() {
            Ok(mut response) => {
                let status = response.status().as_u16();
                if status == 401 || status == 403 {
                    return Err(IngestError::Auth {
                        source_id: source.id.clone(),
                        status,
                    });
                }
                if (500..600).contains(&status) {
                    last_error = format!("HTTP {status}");
                    continue;
                }
                if status >= 400 {
                    return Err(IngestError::Http {
                        source_id: source.id.clone(),
                        status,
                    });
                }
                match response.body_mut().read_to_string() {
                    Ok(text) => return Ok(parse_envelope(&text, attempt - 1)),
                    Err(e) => {
                        last_error = format!("body read failed: {e}");
                        continue;
                    }
                }
            }
            Err(e) => {
                // Transport-level failures (timeouts, refused connections)
                // are transient by classification.
                last_error = e.to_string();
            }
        }
    }
    Err(IngestError::ExhaustedRetries {
        source_id: source.id.clone(),
        attempts: policy.max_attempts,
        last: last_error,
    })
}

fn parse_envelope(text: &str, retries: u32) -> EnvelopeFetch {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(mut obj)) => {
            let cursor = obj
                .get("cursor")
                .and_then(Value::as_str)
                .map(str::to_string);
            match obj.remove("items") {
                Some(Value::Array(items)) => EnvelopeFetch {
                    items,
                    cursor,
                    retries,
                    bad_body: None,
                },
                _ => EnvelopeFetch {
                    items: Vec::new(),
                    cursor: None,
                    retries,
                    bad_body: Some(text.to_string()),
                },
            }
        }
        _ => EnvelopeFetch {
            items: Vec::new(),
            cursor: None,
            retries,
            bad_body: Some(text.to_string()),
        },
    }
}

fn items_to_payloads(
    source: &SourceSpec,
    items: Vec<Value>,
    assigner: &mut dyn SequenceAssigner,
    clock: &dyn Clock,
    result: &mut FetchResult,
) -> Result<(), IngestError> {
    for item in items {
        // String items carry a JSON document as text; anything else is
        // already a parsed document.
        let body = match item {
            Value::String(text) => match serde_json::from_str::<Value>(&text) {
                Ok(v) => v,
                Err(e) => {
                    result.quarantined.push(QuarantineItem {
                        raw: text,
                        reason: format!("malformed JSON document: {e}"),
                    });
                    continue;
                }
            },
            other => other,
        };
        let hash = content_hash(&body);
        let assigned = assigner
            .assign(&source.id, hash)
            .map_err(|detail| IngestError::Sequence {
                source_id: source.id.clone(),
                detail,
            })?;
        result.payloads.push(RawPayload {
            source_id: source.id.clone(),
            fetched_at: clock.now(),
            body,
            content_hash: hash,
            sequence: assigned.sequence,
        });
    }
    result.payloads.sort_by_key(|p| p.sequence);
    Ok(())
}

/// Poll an HTTP source for documents newer than the cursor.
///
/// Retries transient failures (transport errors and 5xx) per the source's
/// backoff policy; 401/403 are non-retryable. A response that is not a
/// valid envelope is quarantined whole and yields an empty fetch.
pub fn poll_http(
    agent: &ureq::Agent,
    source: &SourceSpec,
    since: Option<&str>,
    limit: usize,
    assigner: &mut dyn SequenceAssigner,
    clock: &dyn Clock,
) -> Result<FetchResult, IngestError> {
    if source.kind != SourceKind::HttpPoll {
        return Err(IngestError::WrongKind {
            source_id: source.id.clone(),
            kind: source.kind,
            expected: SourceKind::HttpPoll,
        });
    }
    let token = resolve_token(source)?;
    fetch_and_convert(agent, source, token.as_deref(), since, limit, assigner, clock)
}

/// Drain up to `limit` readings from a streaming source.
///
/// Identical contract to [`poll_http`]; the long-poll behaviour lives on
/// the server side of the envelope.
pub fn drain_stream(
    agent: &ureq::Agent,
    source: &SourceSpec,
    since: Option<&str>,
    limit: usize,
    assigner: &mut dyn SequenceAssigner,
    clock: &dyn Clock,
) -> Result<FetchResult, IngestError> {
    if source.kind != SourceKind::Stream {
        return Err(IngestError::WrongKind {
            source_id: source.id.clone(),
            kind: source.kind,
            expected: SourceKind::Stream,
        });
    }
    let token = resolve_token(source)?;
    fetch_and_convert(agent, source, token.as_deref(), since, limit, assigner, clock)
}

fn fetch_and_convert(
    agent: &ureq::Agent,
    source: &SourceSpec,
    token: Option<&str>,
    since: Option<&str>,
    limit: usize,
    assigner: &mut dyn SequenceAssigner,
    clock: &dyn Clock,
) -> Result<FetchResult, IngestError> {
    let envelope = fetch_envelope(agent, source, token, since, limit)?;
    let mut result = FetchResult {
        cursor: envelope.cursor,
        retries: envelope.retries,
        ..FetchResult::default()
    };
    if let Some(bad) = envelope.bad_body {
        result.quarantined.push(QuarantineItem {
            raw: bad,
            reason: "response is not a cursor envelope".to_string(),
        });
        return Ok(result);
    }
    items_to_payloads(source, envelope.items, assigner, clock, &mut result)?;
    Ok(result)
}

/// Scan a file-drop directory for documents not yet processed.
///
/// Files are read in name order and never modified or deleted. A document
/// is "new" when its content hash has no assigned sequence yet or its
/// sequence is above `processed_upto` (the pipeline's checkpoint), so
/// hash-identical bodies under different names ingest once.
pub fn scan_file_drop(
    source: &SourceSpec,
    processed_upto: u64,
    limit: usize,
    assigner: &mut dyn SequenceAssigner,
    clock: &dyn Clock,
) -> Result<FetchResult, IngestError> {
    if source.kind != SourceKind::FileDrop {
        return Err(IngestError::WrongKind {
            source_id: source.id.clone(),
            kind: source.kind,
            expected: SourceKind::FileDrop,
        });
    }
    let dir = source
        .directory
        .as_ref()
        .ok_or_else(|| IngestError::Directory {
            source_id: source.id.clone(),
            detail: "no directory configured".to_string(),
        })?;
    let mut names: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| IngestError::Directory {
            source_id: source.id.clone(),
            detail: e.to_string(),
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    names.sort();

    let mut result = FetchResult::default();
    let mut seen_this_scan = std::collections::HashSet::new();
    for path in names {
        if result.payloads.len() >= limit {
            break;
        }
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                result.quarantined.push(QuarantineItem {
                    raw: format!("{}", path.display()),
                    reason: format!("unreadable file: {e}"),
                });
                continue;
            }
        };
        let body = match serde_json::from_str::<Value>(&text) {
            Ok(v) => v,
            Err(e) => {
                result.quarantined.push(QuarantineItem {
                    raw: text,
                    reason: format!("malformed JSON document: {e}"),
                });
                continue;
            }
        };
        let hash = content_hash(&body);
        if !seen_this_scan.insert(hash) {
            continue;
        }
        let assigned = assigner
            .assign(&source.id, hash)
            .map_err(|detail| IngestError::Sequence {
                source_id: source.id.clone(),
                detail,
            })?;
        if !assigned.new && assigned.sequence <= processed_upto {
            continue;
        }
        result.payloads.push(RawPayload {
            source_id: source.id.clone(),
            fetched_at: clock.now(),
            body,
            content_hash: hash,
            sequence: assigned.sequence,
        });
    }
    result.payloads.sort_by_key(|p| p.sequence);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use serde_json::json;
    use std::io::Write;

    fn file_source(dir: &std::path::Path) -> SourceSpec {
        SourceSpec {
            id: "drop".into(),
            kind: SourceKind::FileDrop,
            endpoint: None,
            directory: Some(dir.to_path_buf()),
            token_env: None,
            cadence_s: None,
            backoff: BackoffPolicy::default(),
        }
    }

    fn write_file(dir: &std::path::Path, name: &str, content: &str) {
        let mut f = std::fs::File::create(dir.join(name)).unwrap();
        f.write_all(content.as_bytes()).unwrap();
    }

    #[test]
    fn batch_id_round_trips() {
        let id = batch_id("ehr", 17, 21);
        assert_eq!(id, "ehr:17-21");
        assert_eq!(parse_batch_id(&id), Some(("ehr".to_string(), 17, 21)));
        assert_eq!(parse_batch_id("nonsense"), None);
    }

    #[test]
    fn archive_value_round_trips() {
        let body = json!({"pat": {"id": "P1"}, "hr": 90});
        let p = RawPayload {
            source_id: "ehr".into(),
            fetched_at: crate::clock::parse_ts("2026-01-15T12:00:00.000Z").unwrap(),
            content_hash: content_hash(&body),
            body,
            sequence: 7,
        };
        let v = p.to_archive_value();
        assert_eq!(RawPayload::from_archive_value(&v), Some(p));
    }

    #[test]
    fn empty_directory_yields_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::fixed();
        let mut assigner = MemoryAssigner::default();
        let r = scan_file_drop(&file_source(dir.path()), 0, 100, &mut assigner, &clock).unwrap();
        assert!(r.payloads.is_empty() && r.quarantined.is_empty());
    }

    #[test]
    fn file_drop_skips_processed_files() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "a.json", r#"{"id":"A"}"#);
        write_file(dir.path(), "b.json", r#"{"id":"B"}"#);
        let clock = ManualClock::fixed();
        let mut assigner = MemoryAssigner::default();
        let source = file_source(dir.path());

        let first = scan_file_drop(&source, 0, 100, &mut assigner, &clock).unwrap();
        assert_eq!(first.payloads.len(), 2);

        // Two new files arrive; the originals count as processed now.
        write_file(dir.path(), "c.json", r#"{"id":"C"}"#);
        write_file(dir.path(), "d.json", r#"{"id":"D"}"#);
        let upto = first.payloads.last().unwrap().sequence;
        let second = scan_file_drop(&source, upto, 100, &mut assigner, &clock).unwrap();
        assert_eq!(second.payloads.len(), 2);
        let ids: Vec<_> = second
            .payloads
            .iter()
            .map(|p| p.body["id"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(ids, vec!["C", "D"]);
    }

    #[test]
    fn identical_content_under_two_names_ingests_once() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "x.json", r#"{"id":"A","hr":90}"#);
        write_file(dir.path(), "y.json", r#"{"id":"A","hr":90}"#);
        let clock = ManualClock::fixed();
        let mut assigner = MemoryAssigner::default();
        let r = scan_file_drop(&file_source(dir.path()), 0, 100, &mut assigner, &clock).unwrap();
        assert_eq!(r.payloads.len(), 1);
    }

    #[test]
    fn unreadable_json_file_is_quarantined() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "good.json", r#"{"id":"A"}"#);
        write_file(dir.path(), "bad.json", r#"{"id": oops"#);
        let clock = ManualClock::fixed();
        let mut assigner = MemoryAssigner::default();
        let r = scan_file_drop(&file_source(dir.path()), 0, 100, &mut assigner, &clock).unwrap();
        assert_eq!(r.payloads.len(), 1);
        assert_eq!(r.quarantined.len(), 1);
        assert!(r.quarantined[0].reason.contains("malformed"));
    }

    #[test]
    fn memory_assigner_is_stable_per_hash() {
        let mut a = MemoryAssigner::default();
        let first = a.assign("s", 42).unwrap();
        let again = a.assign("s", 42).unwrap();
        let other = a.assign("s", 43).unwrap();
        assert_eq!(first, Assigned { sequence: 1, new: true });
        assert_eq!(again, Assigned { sequence: 1, new: false });
        assert_eq!(other, Assigned { sequence: 2, new: true });
        // Distinct sources number independently.
        assert_eq!(a.assign("t", 42).unwrap().sequence, 1);
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut source = file_source(dir.path());
        source.kind = SourceKind::HttpPoll;
        let clock = ManualClock::fixed();
        let mut assigner = MemoryAssigner::default();
        let err = scan_file_drop(&source, 0, 100, &mut assigner, &clock).unwrap_err();
        assert!(matches!(err, IngestError::WrongKind { .. }));
    }

    #[test]
    fn envelope_parser_handles_string_items() {
        let parsed = parse_envelope(r#"{"cursor":"5","items":[{"a":1},"{\"b\":2}","{broken"]}"#, 0);
        assert_eq!(parsed.cursor.as_deref(), Some("5"));
        assert_eq!(parsed.items.len(), 3);
        assert!(parsed.bad_body.is_none());

        let bad = parse_envelope("not json at all", 0);
        assert!(bad.bad_body.is_some());
    }
}
