//! Durable persistence: relational score tables, the append-only raw
//! payload archive, batch checkpoints, LOCF state, and sequence
//! assignment.
//!
//! The write protocol per batch is: score rows (idempotent by dedup key)
//! → archive lines (idempotent by sequence) → LOCF state → batch record
//! → checkpoint last. Recovery replays from the checkpointed cursor and
//! the idempotent writes absorb any partial re-execution, which is what
//! gives exactly-once effect without distributed transactions.
//!
//! Layout under the data directory:
//!   isthmus.db                         relational area (SQLite)
//!   archive/<source>/<date>.jsonl      lines `<hash> <canonical-json>`
//!   quarantine/<source>/<ts>-<hash>.json
//!   logs/engine.log.jsonl
//!   models/<model_id>/v<version>.json

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rusqlite::Connection;
use serde_json::Value;
use thiserror::Error;

use crate::canon::{canonical_json, content_hash, fnv1a64, format_hash, parse_hash};
use crate::clock::{format_ts, format_ts_compact, parse_ts};
use crate::featurize::LocfState;
use crate::ingest::{Assigned, RawPayload, SequenceAssigner};
use crate::scoring::{Contribution, ScoreResponse};
use crate::transform::SourceRef;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("database error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("I/O error at `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint for `{pipeline}` would move backward ({have} -> {proposed})")]
    CheckpointRegression {
        pipeline: String,
        have: u64,
        proposed: u64,
    },
    #[error("corrupt archive line in `{file}` line {line}: {detail}")]
    CorruptArchive {
        file: PathBuf,
        line: usize,
        detail: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A score response flattened for the relational table, with the dedup
/// key (pipeline, model_id, version, patient_id, batch_id).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub pipeline: String,
    pub model_id: String,
    pub version: u32,
    pub patient_id: String,
    pub batch_id: String,
    pub score: f64,
    pub risk_level: String,
    pub top_contributors: Vec<Contribution>,
    pub features: BTreeMap<String, f64>,
    pub imputed: Vec<String>,
    pub scored_at: DateTime<Utc>,
    pub lineage: Vec<SourceRef>,
    /// True when the row was produced without delivery eligibility
    /// (silent pipeline or shadow version).
    pub silent: bool,
}

impl ScoreRow {
    pub fn from_response(
        pipeline: &str,
        batch_id: &str,
        response: &ScoreResponse,
        silent: bool,
    ) -> Self {
        Self {
            pipeline: pipeline.to_string(),
            model_id: response.model_id.clone(),
            version: response.version,
            patient_id: response.patient_id.clone(),
            batch_id: batch_id.to_string(),
            score: response.score,
            risk_level: response.risk_level.clone(),
            top_contributors: response.top_contributors.clone(),
            features: response.features.clone(),
            imputed: response.imputed.iter().cloned().collect(),
            scored_at: response.scored_at,
            lineage: response.lineage.clone(),
            silent,
        }
    }

    /// Dedup key used by the sink for its own idempotence.
    pub fn dedup_key(&self) -> String {
        format!(
            "{}/{}/v{}/{}/{}",
            self.pipeline, self.model_id, self.version, self.patient_id, self.batch_id
        )
    }
}

/// Durable checkpoint of the last fully processed batch of a pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub pipeline: String,
    pub batch_id: String,
    pub cursor: Option<String>,
    /// Highest source sequence fully processed by this pipeline.
    pub upto_seq: u64,
    pub committed_at: DateTime<Utc>,
}

/// Record of one committed batch, for replay range selection.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub pipeline: String,
    pub batch_id: String,
    pub first_seq: u64,
    pub last_seq: u64,
    pub committed_at: DateTime<Utc>,
}

/// One integrity finding from archive verification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveViolation {
    pub source_id: String,
    pub file: PathBuf,
    /// 1-based line number within the file.
    pub line: usize,
    pub detail: String,
}

impl std::fmt::Display for ArchiveViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} line {}: {}",
            self.file.display(),
            self.line,
            self.detail
        )
    }
}

/// Single-node durable store.
pub struct Store {
    conn: Connection,
    data_dir: PathBuf,
    /// Highest archived sequence per source, loaded lazily.
    archived_max: HashMap<String, u64>,
}

impl Store {
    /// Open (creating if needed) the store under a data directory.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let data_dir = data_dir.into();
        fs::create_dir_all(&data_dir).map_err(|e| io_err(&data_dir, e))?;
        for sub in ["archive", "quarantine", "logs"] {
            let dir = data_dir.join(sub);
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        let conn = Connection::open(data_dir.join("isthmus.db"))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "FULL")?;
        conn.execute_batch(
            "CREATE TABLE IF NOT EXISTS scores (
                pipeline TEXT NOT NULL,
                model_id TEXT NOT NULL,
                version INTEGER NOT NULL,
                patient_id TEXT NOT NULL,
                batch_id TEXT NOT NULL,
                score REAL NOT NULL,
                risk_level TEXT NOT NULL,
                top_contributors TEXT NOT NULL,
                features TEXT NOT NULL,
                imputed TEXT NOT NULL,
                scored_at TEXT NOT NULL,
                lineage TEXT NOT NULL,
                silent INTEGER NOT NULL,
                delivered INTEGER NOT NULL DEFAULT 0,
                PRIMARY KEY (pipeline, model_id, version, patient_id, batch_id)
            );
            CREATE TABLE IF NOT EXISTS scores_replay (
                pipeline TEXT NOT NULL,
                model_id TEXT NOT NULL,
                version INTEGER NOT NULL,
                patient_id TEXT NOT NULL,
                batch_id TEXT NOT NULL,
                score REAL NOT NULL,
                risk_level TEXT NOT NULL,
                top_contributors TEXT NOT NULL,
                features TEXT NOT NULL,
                imputed TEXT NOT NULL,
                scored_at TEXT NOT NULL,
                lineage TEXT NOT NULL,
                silent INTEGER NOT NULL,
                delivered INTEGER NOT NULL DEFAULT 0,
                PRIMARY KEY (pipeline, model_id, version, patient_id, batch_id)
            );
            CREATE TABLE IF NOT EXISTS checkpoints (
                pipeline TEXT PRIMARY KEY,
                batch_id TEXT NOT NULL,
                cursor TEXT,
                upto_seq INTEGER NOT NULL,
                committed_at TEXT NOT NULL
            );
            CREATE TABLE IF NOT EXISTS batches (
                pipeline TEXT NOT NULL,
                batch_id TEXT NOT NULL,
                first_seq INTEGER NOT NULL,
                last_seq INTEGER NOT NULL,
                committed_at TEXT NOT NULL,
                PRIMARY KEY (pipeline, batch_id)
            );
            CREATE TABLE IF NOT EXISTS locf (
                pipeline TEXT NOT NULL,
                patient_id TEXT NOT NULL,
                feature TEXT NOT NULL,
                value REAL NOT NULL,
                as_of TEXT NOT NULL,
                PRIMARY KEY (pipeline, patient_id, feature)
            );
            CREATE TABLE IF NOT EXISTS seq_assign (
                source_id TEXT NOT NULL,
                content_hash TEXT NOT NULL,
                seq INTEGER NOT NULL,
                PRIMARY KEY (source_id, content_hash)
            );",
        )?;
        Ok(Self {
            conn,
            data_dir,
            archived_max: HashMap::new(),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    // ── scores ──────────────────────────────────────────────────────

    /// Insert rows idempotently; duplicates of the dedup key are skipped.
    /// Atomic per call: either all new rows become visible or none.
    pub fn put_scores(&mut self, rows: &[ScoreRow], replay: bool) -> Result<usize, StoreError> {
        let table = if replay { "scores_replay" } else { "scores" };
        let tx = self.conn.transaction()?;
        let mut inserted = 0;
        {
            let mut stmt = tx.prepare(&format!(
                "INSERT OR IGNORE INTO {table}
                 (pipeline, model_id, version, patient_id, batch_id, score, risk_level,
                  top_contributors, features, imputed, scored_at, lineage, silent)
                 VALUES (?1,?2,?3,?4,?5,?6,?7,?8,?9,?10,?11,?12,?13)"
            ))?;
            for row in rows {
                let contributors =
                    canonical_json(&serde_json::to_value(&row.top_contributors).unwrap());
                let features = canonical_json(&serde_json::to_value(&row.features).unwrap());
                let imputed = canonical_json(&serde_json::to_value(&row.imputed).unwrap());
                let lineage = canonical_json(&serde_json::to_value(&row.lineage).unwrap());
                inserted += stmt.execute(rusqlite::params![
                    row.pipeline,
                    row.model_id,
                    row.version,
                    row.patient_id,
                    row.batch_id,
                    row.score,
                    row.risk_level,
                    contributors,
                    features,
                    imputed,
                    format_ts(row.scored_at),
                    lineage,
                    row.silent as i64,
                ])?;
            }
        }
        tx.commit()?;
        Ok(inserted)
    }

    fn row_from_sql(row: &rusqlite::Row<'_>) -> rusqlite::Result<ScoreRow> {
        let contributors: String = row.get(7)?;
        let features: String = row.get(8)?;
        let imputed: String = row.get(9)?;
        let scored_at: String = row.get(10)?;
        let lineage: String = row.get(11)?;
        Ok(ScoreRow {
            pipeline: row.get(0)?,
            model_id: row.get(1)?,
            version: row.get::<_, i64>(2)? as u32,
            patient_id: row.get(3)?,
            batch_id: row.get(4)?,
            score: row.get(5)?,
            risk_level: row.get(6)?,
            top_contributors: serde_json::from_str(&contributors).unwrap_or_default(),
            features: serde_json::from_str(&features).unwrap_or_default(),
            imputed: serde_json::from_str(&imputed).unwrap_or_default(),
            scored_at: parse_ts(&scored_at).unwrap_or_default(),
            lineage: serde_json::from_str(&lineage).unwrap_or_default(),
            silent: row.get::<_, i64>(12)? != 0,
        })
    }

    /// Rows eligible for delivery that have not been delivered yet,
    /// in insertion order.
    pub fn undelivered(&self, pipeline: &str) -> Result<Vec<ScoreRow>, StoreError> {
        let mut stmt = self.conn.prepare(
            "SELECT pipeline, model_id, version, patient_id, batch_id, score, risk_level,
                    top_contributors, features, imputed, scored_at, lineage, silent
             FROM scores WHERE pipeline = ?1 AND silent = 0 AND delivered = 0
             ORDER BY rowid",
        )?;
        let rows = stmt
            .query_map([pipeline], Self::row_from_sql)?
            .collect::<Result<Vec<_>, _>>()?;
        Ok(rows)
    }

    pub fn mark_delivered(&self, row: &ScoreRow) -> Result<(), StoreError> {
        self.conn.execute(
            "UPDATE scores SET delivered = 1
             WHERE pipeline=?1 AND model_id=?2 AND version=?3 AND patient_id=?4 AND batch_id=?5",
            rusqlite::params![
                row.pipeline,
                row.model_id,
                row.version,
                row.patient_id,
                row.batch_id
            ],
        )?;
        Ok(())
    }

    /// Count committed rows, optionally filtered.
    pub fn count_scores(
        &self,
        pipeline: Option<&str>,
        model_id: Option<&str>,
        version: Option<u32>,
        silent: Option<bool>,
        replay: bool,
    ) -> Result<u64, StoreError> {
        let table = if replay { "scores_replay" } else { "scores" };
        let mut sql = format!("SELECT COUNT(*) FROM {table} WHERE 1=1");
        let mut params: Vec<Box<dyn rusqlite::types::ToSql>> = Vec::new();
        if let Some(p) = pipeline {
            sql.push_str(" AND pipeline = ?");
            params.push(Box::new(p.to_string()));
        }
        if let Some(m) = model_id {
            sql.push_str(" AND model_id = ?");
            params.push(Box::new(m.to_string()));
        }
        if let Some(v) = version {
            sql.push_str(" AND version = ?");
            params.push(Box::new(v as i64));
        }
        if let Some(s) = silent {
            sql.push_str(" AND silent = ?");
            params.push(Box::new(s as i64));
        }
        let refs: Vec<&dyn rusqlite::types::ToSql> = params.iter().map(|b| b.as_ref()).collect();
        let count: i64 = self.conn.query_row(&sql, refs.as_slice(), |r| r.get(0))?;
        Ok(count as u64)
    }

    /// Most recent values of one echoed feature for a pipeline, newest
    /// first, drawn from committed non-replay rows of the given version.
    pub fn recent_feature_values(
        &self,
        pipeline: &str,
        version: u32,
        feature_key: &str,
        limit: usize,
    ) -> Result<Vec<f64>, StoreError> {
        let mut stmt = self.conn.prepare(
            "SELECT features FROM scores
             WHERE pipeline = ?1 AND version = ?2
             ORDER BY rowid DESC LIMIT ?3",
        )?;
        let mut out = Vec::new();
        let rows = stmt.query_map(
            rusqlite::params![pipeline, version as i64, limit as i64],
            |r| r.get::<_, String>(0),
        )?;
        for features in rows {
            let features: BTreeMap<String, f64> =
                serde_json::from_str(&features?).unwrap_or_default();
            if let Some(v) = features.get(feature_key) {
                out.push(*v);
            }
        }
        Ok(out)
    }

    /// Documented CSV column order:
    /// pipeline,model_id,version,patient_id,batch_id,score,risk_level,
    /// scored_at,silent,delivered,imputed,top_contributors,features,lineage
    ///
    /// Rows are ordered by (pipeline, batch_id, model_id, version,
    /// patient_id) so exports are deterministic.
    pub fn export_csv(
        &self,
        pipeline: Option<&str>,
        replay: bool,
        out: &mut dyn Write,
    ) -> Result<u64, StoreError> {
        let table = if replay { "scores_replay" } else { "scores" };
        let mut sql = format!(
            "SELECT pipeline, model_id, version, patient_id, batch_id, score, risk_level,
                    top_contributors, features, imputed, scored_at, lineage, silent, delivered
             FROM {table}"
        );
        if pipeline.is_some() {
            sql.push_str(" WHERE pipeline = ?1");
        }
        sql.push_str(" ORDER BY pipeline, batch_id, model_id, version, patient_id");
        let mut stmt = self.conn.prepare(&sql)?;
        let write_err = |e: std::io::Error| io_err(Path::new("<export>"), e);
        out.write_all(
            b"pipeline,model_id,version,patient_id,batch_id,score,risk_level,scored_at,silent,delivered,imputed,top_contributors,features,lineage\n",
        )
        .map_err(write_err)?;

        let emit = |row: &rusqlite::Row<'_>| -> rusqlite::Result<String> {
            let score: f64 = row.get(5)?;
            let fields = [
                csv_field(&row.get::<_, String>(0)?),
                csv_field(&row.get::<_, String>(1)?),
                row.get::<_, i64>(2)?.to_string(),
                csv_field(&row.get::<_, String>(3)?),
                csv_field(&row.get::<_, String>(4)?),
                format_score(score),
                csv_field(&row.get::<_, String>(6)?),
                csv_field(&row.get::<_, String>(10)?),
                row.get::<_, i64>(12)?.to_string(),
                row.get::<_, i64>(13)?.to_string(),
                csv_field(&row.get::<_, String>(9)?),
                csv_field(&row.get::<_, String>(7)?),
                csv_field(&row.get::<_, String>(8)?),
                csv_field(&row.get::<_, String>(11)?),
            ];
            Ok(fields.join(","))
        };
        let mut count = 0;
        if let Some(p) = pipeline {
            let lines = stmt.query_map([p], emit)?;
            for line in lines {
                out.write_all(line?.as_bytes()).map_err(write_err)?;
                out.write_all(b"\n").map_err(write_err)?;
                count += 1;
            }
        } else {
            let lines = stmt.query_map([], emit)?;
            for line in lines {
                out.write_all(line?.as_bytes()).map_err(write_err)?;
                out.write_all(b"\n").map_err(write_err)?;
                count += 1;
            }
        }
        Ok(count)
    }

    /// Clear the replay shadow table (each replay invocation starts clean).
    pub fn clear_replay(&self, pipeline: &str) -> Result<(), StoreError> {
        self.conn
            .execute("DELETE FROM scores_replay WHERE pipeline = ?1", [pipeline])?;
        Ok(())
    }

    // ── checkpoints and batches ─────────────────────────────────────

    pub fn read_checkpoint(&self, pipeline: &str) -> Result<Option<Checkpoint>, StoreError> {
        let mut stmt = self.conn.prepare(
            "SELECT batch_id, cursor, upto_seq, committed_at FROM checkpoints WHERE pipeline = ?1",
        )?;
        let mut rows = stmt.query([pipeline])?;
        match rows.next()? {
            None => Ok(None),
            Some(row) => Ok(Some(Checkpoint {
                pipeline: pipeline.to_string(),
                batch_id: row.get(0)?,
                cursor: row.get(1)?,
                upto_seq: row.get::<_, i64>(2)? as u64,
                committed_at: parse_ts(&row.get::<_, String>(3)?).unwrap_or_default(),
            })),
        }
    }

    /// Commit a checkpoint; the monotonicity invariant rejects movement
    /// backward in processed sequence.
    pub fn commit_checkpoint(
        &self,
        pipeline: &str,
        batch_id: &str,
        cursor: Option<&str>,
        upto_seq: u64,
        committed_at: DateTime<Utc>,
    ) -> Result<(), StoreError> {
        if let Some(existing) = self.read_checkpoint(pipeline)? {
            if upto_seq < existing.upto_seq {
                return Err(StoreError::CheckpointRegression {
                    pipeline: pipeline.to_string(),
                    have: existing.upto_seq,
                    proposed: upto_seq,
                });
            }
        }
        self.conn.execute(
            "INSERT OR REPLACE INTO checkpoints (pipeline, batch_id, cursor, upto_seq, committed_at)
             VALUES (?1,?2,?3,?4,?5)",
            rusqlite::params![
                pipeline,
                batch_id,
                cursor,
                upto_seq as i64,
                format_ts(committed_at)
            ],
        )?;
        Ok(())
    }

    pub fn record_batch(&self, record: &BatchRecord) -> Result<(), StoreError> {
        self.conn.execute(
            "INSERT OR REPLACE INTO batches (pipeline, batch_id, first_seq, last_seq, committed_at)
             VALUES (?1,?2,?3,?4,?5)",
            rusqlite::params![
                record.pipeline,
                record.batch_id,
                record.first_seq as i64,
                record.last_seq as i64,
                format_ts(record.committed_at)
            ],
        )?;
        Ok(())
    }

    /// Batches of a pipeline in sequence order.
    pub fn list_batches(&self, pipeline: &str) -> Result<Vec<BatchRecord>, StoreError> {
        let mut stmt = self.conn.prepare(
            "SELECT batch_id, first_seq, last_seq, committed_at FROM batches
             WHERE pipeline = ?1 ORDER BY first_seq",
        )?;
        let rows = stmt
            .query_map([pipeline], |row| {
                Ok(BatchRecord {
                    pipeline: pipeline.to_string(),
                    batch_id: row.get(0)?,
                    first_seq: row.get::<_, i64>(1)? as u64,
                    last_seq: row.get::<_, i64>(2)? as u64,
                    committed_at: parse_ts(&row.get::<_, String>(3)?).unwrap_or_default(),
                })
            })?
            .collect::<Result<Vec<_>, _>>()?;
        Ok(rows)
    }

    // ── LOCF state ──────────────────────────────────────────────────

    pub fn get_locf(
        &self,
        pipeline: &str,
        patient_id: &str,
        feature: &str,
    ) -> Result<Option<f64>, StoreError> {
        let mut stmt = self.conn.prepare(
            "SELECT value FROM locf WHERE pipeline=?1 AND patient_id=?2 AND feature=?3",
        )?;
        let mut rows = stmt.query([pipeline, patient_id, feature])?;
        Ok(rows.next()?.map(|r| r.get(0)).transpose()?)
    }

    pub fn put_locf(
        &mut self,
        pipeline: &str,
        entries: &[(String, String, f64, DateTime<Utc>)],
    ) -> Result<(), StoreError> {
        let tx = self.conn.transaction()?;
        {
            let mut stmt = tx.prepare(
                "INSERT OR REPLACE INTO locf (pipeline, patient_id, feature, value, as_of)
                 VALUES (?1,?2,?3,?4,?5)",
            )?;
            for (patient, feature, value, as_of) in entries {
                stmt.execute(rusqlite::params![
                    pipeline,
                    patient,
                    feature,
                    value,
                    format_ts(*as_of)
                ])?;
            }
        }
        tx.commit()?;
        Ok(())
    }

    // ── sequence assignment ─────────────────────────────────────────

    /// Durable first-seen sequence assignment by (source, content hash).
    pub fn assign_sequence(&self, source_id: &str, hash: u64) -> Result<Assigned, StoreError> {
        let hex = format_hash(hash);
        let existing: Option<i64> = self
            .conn
            .query_row(
                "SELECT seq FROM seq_assign WHERE source_id=?1 AND content_hash=?2",
                [source_id, &hex],
                |r| r.get(0),
            )
            .map(Some)
            .or_else(|e| match e {
                rusqlite::Error::QueryReturnedNoRows => Ok(None),
                other => Err(other),
            })?;
        if let Some(seq) = existing {
            return Ok(Assigned {
                sequence: seq as u64,
                new: false,
            });
        }
        let next: i64 = self.conn.query_row(
            "SELECT COALESCE(MAX(seq), 0) + 1 FROM seq_assign WHERE source_id = ?1",
            [source_id],
            |r| r.get(0),
        )?;
        self.conn.execute(
            "INSERT INTO seq_assign (source_id, content_hash, seq) VALUES (?1,?2,?3)",
            rusqlite::params![source_id, hex, next],
        )?;
        Ok(Assigned {
            sequence: next as u64,
            new: true,
        })
    }

    // ── archive ─────────────────────────────────────────────────────

    fn archive_dir(&self, source_id: &str) -> PathBuf {
        self.data_dir.join("archive").join(source_id)
    }

    fn archive_files(&self, source_id: &str) -> Result<Vec<PathBuf>, StoreError> {
        let dir = self.archive_dir(source_id);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| io_err(&dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        Ok(files)
    }

    fn load_archived_max(&mut self, source_id: &str) -> Result<u64, StoreError> {
        if let Some(&max) = self.archived_max.get(source_id) {
            return Ok(max);
        }
        let mut max = 0;
        for file in self.archive_files(source_id)? {
            let text = fs::read_to_string(&file).map_err(|e| io_err(&file, e))?;
            for line in text.lines() {
                if let Some((_, payload)) = line.split_once(' ') {
                    if let Ok(v) = serde_json::from_str::<Value>(payload) {
                        if let Some(seq) = v.get("sequence").and_then(Value::as_u64) {
                            max = max.max(seq);
                        }
                    }
                }
            }
        }
        self.archived_max.insert(source_id.to_string(), max);
        Ok(max)
    }

    /// Append payloads strictly at the end of the source's archive.
    /// Sequences at or below the archived maximum are rejected as
    /// regressions (idempotent re-appends), keeping one line per payload
    /// across any number of restarts. Returns the appended count.
    pub fn append_archive(&mut self, payloads: &[RawPayload]) -> Result<usize, StoreError> {
        let mut by_source: BTreeMap<&str, Vec<&RawPayload>> = BTreeMap::new();
        for p in payloads {
            by_source.entry(&p.source_id).or_default().push(p);
        }
        let mut appended = 0;
        for (source_id, mut group) in by_source {
            group.sort_by_key(|p| p.sequence);
            let mut max = self.load_archived_max(source_id)?;
            let dir = self.archive_dir(source_id);
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            let mut open_file: Option<(PathBuf, fs::File)> = None;
            for payload in group {
                if payload.sequence <= max {
                    continue;
                }
                let date = payload.fetched_at.format("%Y-%m-%d").to_string();
                let path = dir.join(format!("{date}.jsonl"));
                if open_file.as_ref().map(|(p, _)| p != &path).unwrap_or(true) {
                    let file = fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .map_err(|e| io_err(&path, e))?;
                    open_file = Some((path, file));
                }
                let (_, file) = open_file.as_mut().unwrap();
                let line = format!(
                    "{} {}\n",
                    format_hash(payload.content_hash),
                    canonical_json(&payload.to_archive_value())
                );
                file.write_all(line.as_bytes())
                    .map_err(|e| io_err(&dir, e))?;
                max = payload.sequence;
                appended += 1;
            }
            if let Some((path, file)) = open_file {
                file.sync_all().map_err(|e| io_err(&path, e))?;
            }
            self.archived_max.insert(source_id.to_string(), max);
        }
        Ok(appended)
    }

    /// Re-hash every archive line and check per-source sequence
    /// monotonicity. Returns all violations; an empty result is the
    /// integrity pass.
    pub fn verify_archive(&self) -> Result<Vec<ArchiveViolation>, StoreError> {
        let root = self.data_dir.join("archive");
        let mut violations = Vec::new();
        if !root.exists() {
            return Ok(violations);
        }
        let mut sources: Vec<PathBuf> = fs::read_dir(&root)
            .map_err(|e| io_err(&root, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        sources.sort();
        for source_dir in sources {
            let source_id = source_dir
                .file_name()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_default();
            let mut last_seq: Option<u64> = None;
            for file in self.archive_files(&source_id)? {
                let text = fs::read_to_string(&file).map_err(|e| io_err(&file, e))?;
                for (i, line) in text.lines().enumerate() {
                    let check = check_archive_line(line, &mut last_seq);
                    if let Err(detail) = check {
                        violations.push(ArchiveViolation {
                            source_id: source_id.clone(),
                            file: file.clone(),
                            line: i + 1,
                            detail,
                        });
                    }
                }
            }
        }
        Ok(violations)
    }

    /// Archived payloads of a source within a sequence span, ascending.
    pub fn archived_payloads(
        &self,
        source_id: &str,
        first_seq: u64,
        last_seq: u64,
    ) -> Result<Vec<RawPayload>, StoreError> {
        let mut out = Vec::new();
        for file in self.archive_files(source_id)? {
            let text = fs::read_to_string(&file).map_err(|e| io_err(&file, e))?;
            for (i, line) in text.lines().enumerate() {
                let Some((_, payload_text)) = line.split_once(' ') else {
                    return Err(StoreError::CorruptArchive {
                        file: file.clone(),
                        line: i + 1,
                        detail: "line is not `<hash> <json>`".to_string(),
                    });
                };
                let value: Value = serde_json::from_str(payload_text).map_err(|e| {
                    StoreError::CorruptArchive {
                        file: file.clone(),
                        line: i + 1,
                        detail: e.to_string(),
                    }
                })?;
                let Some(payload) = RawPayload::from_archive_value(&value) else {
                    return Err(StoreError::CorruptArchive {
                        file: file.clone(),
                        line: i + 1,
                        detail: "payload shape invalid".to_string(),
                    });
                };
                if payload.sequence >= first_seq && payload.sequence <= last_seq {
                    out.push(payload);
                }
            }
        }
        out.sort_by_key(|p| p.sequence);
        Ok(out)
    }

    pub fn count_archive_lines(&self, source_id: &str) -> Result<u64, StoreError> {
        let mut count = 0;
        for file in self.archive_files(source_id)? {
            let text = fs::read_to_string(&file).map_err(|e| io_err(&file, e))?;
            count += text.lines().count() as u64;
        }
        Ok(count)
    }

    // ── quarantine ──────────────────────────────────────────────────

    /// Write a rejected document aside, deduplicated by content so a
    /// crash-retry does not double-count it. Returns the file path when
    /// a new record was written.
    pub fn quarantine(
        &self,
        source_id: &str,
        raw: &str,
        at: DateTime<Utc>,
    ) -> Result<Option<PathBuf>, StoreError> {
        let dir = self.data_dir.join("quarantine").join(source_id);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let hash = format_hash(fnv1a64(raw.as_bytes()));
        let suffix = format!("-{hash}.json");
        let existing = fs::read_dir(&dir)
            .map_err(|e| io_err(&dir, e))?
            .filter_map(|entry| entry.ok())
            .any(|e| e.file_name().to_string_lossy().ends_with(&suffix));
        if existing {
            return Ok(None);
        }
        let path = dir.join(format!("{}{suffix}", format_ts_compact(at)));
        fs::write(&path, raw).map_err(|e| io_err(&path, e))?;
        Ok(Some(path))
    }

    pub fn count_quarantined(&self, source_id: &str) -> Result<u64, StoreError> {
        let dir = self.data_dir.join("quarantine").join(source_id);
        if !dir.exists() {
            return Ok(0);
        }
        Ok(fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?.count() as u64)
    }
}

fn check_archive_line(line: &str, last_seq: &mut Option<u64>) -> Result<(), String> {
    let Some((hash_text, payload_text)) = line.split_once(' ') else {
        return Err("line is not `<hash> <json>`".to_string());
    };
    let Some(recorded) = parse_hash(hash_text) else {
        return Err("unparseable hash prefix".to_string());
    };
    let Ok(payload) = serde_json::from_str::<Value>(payload_text) else {
        return Err("payload is not valid JSON".to_string());
    };
    let Some(body) = payload.get("body") else {
        return Err("payload has no body".to_string());
    };
    let actual = content_hash(body);
    if actual != recorded {
        return Err(format!(
            "body hash {} does not match recorded {}",
            format_hash(actual),
            format_hash(recorded)
        ));
    }
    let embedded = payload
        .get("content_hash")
        .and_then(Value::as_str)
        .and_then(parse_hash);
    if embedded != Some(recorded) {
        return Err("embedded content_hash differs from line prefix".to_string());
    }
    match (payload.get("sequence").and_then(Value::as_u64), *last_seq) {
        (None, _) => Err("payload has no sequence".to_string()),
        (Some(s), Some(prev)) if s <= prev => {
            Err(format!("sequence {s} not above previous {prev}"))
        }
        (Some(s), _) => {
            *last_seq = Some(s);
            Ok(())
        }
    }
}

/// Adapter exposing the store as a [`SequenceAssigner`] for connectors.
pub struct StoreSequences<'a>(pub &'a Store);

impl SequenceAssigner for StoreSequences<'_> {
    fn assign(&mut self, source_id: &str, content_hash: u64) -> Result<Assigned, String> {
        self.0
            .assign_sequence(source_id, content_hash)
            .map_err(|e| e.to_string())
    }
}

/// LOCF view of the store for one pipeline, staging writes in memory so
/// they can be persisted in the batch's durability phase.
pub struct StagedLocf<'a> {
    store: &'a Store,
    pipeline: String,
    staged: BTreeMap<(String, String), (f64, DateTime<Utc>)>,
}

impl<'a> StagedLocf<'a> {
    pub fn new(store: &'a Store, pipeline: &str) -> Self {
        Self {
            store,
            pipeline: pipeline.to_string(),
            staged: BTreeMap::new(),
        }
    }

    /// Drain staged writes as (patient, feature, value, as_of) tuples.
    pub fn into_entries(self) -> Vec<(String, String, f64, DateTime<Utc>)> {
        self.staged
            .into_iter()
            .map(|((patient, feature), (value, as_of))| (patient, feature, value, as_of))
            .collect()
    }
}

impl LocfState for StagedLocf<'_> {
    fn get(&mut self, patient_id: &str, feature: &str) -> Option<f64> {
        if let Some((v, _)) = self
            .staged
            .get(&(patient_id.to_string(), feature.to_string()))
        {
            return Some(*v);
        }
        self.store
            .get_locf(&self.pipeline, patient_id, feature)
            .ok()
            .flatten()
    }

    fn set(&mut self, patient_id: &str, feature: &str, value: f64, as_of: DateTime<Utc>) {
        self.staged
            .insert((patient_id.to_string(), feature.to_string()), (value, as_of));
    }
}

fn csv_field(text: &str) -> String {
    if text.contains(',') || text.contains('"') || text.contains('\n') {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

/// Shortest round-trip decimal rendering of a score.
fn format_score(score: f64) -> String {
    let s = format!("{score}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use serde_json::json;

    fn fixed_now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2026, 1, 15, 12, 0, 0).unwrap()
    }

    fn payload(source: &str, seq: u64, body: Value) -> RawPayload {
        RawPayload {
            source_id: source.to_string(),
            fetched_at: fixed_now(),
            content_hash: content_hash(&body),
            body,
            sequence: seq,
        }
    }

    fn row(pipeline: &str, patient: &str, batch: &str, score: f64) -> ScoreRow {
        ScoreRow {
            pipeline: pipeline.into(),
            model_id: "m".into(),
            version: 1,
            patient_id: patient.into(),
            batch_id: batch.into(),
            score,
            risk_level: "low".into(),
            top_contributors: vec![],
            features: BTreeMap::from([("hr".to_string(), 80.0)]),
            imputed: vec![],
            scored_at: fixed_now(),
            lineage: vec![],
            silent: false,
        }
    }

    #[test]
    fn put_scores_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let rows: Vec<ScoreRow> = (0..5)
            .map(|i| row("p", &format!("P{i}"), "s:1-5", 0.5))
            .collect();
        assert_eq!(store.put_scores(&rows, false).unwrap(), 5);
        assert_eq!(store.put_scores(&rows, false).unwrap(), 0);
        assert_eq!(
            store.count_scores(Some("p"), None, None, None, false).unwrap(),
            5
        );

        // 3 new + 2 duplicates: oracle counts distinct dedup keys.
        let mixed: Vec<ScoreRow> = (3..8)
            .map(|i| row("p", &format!("P{i}"), "s:1-5", 0.5))
            .collect();
        let existing: HashSet<String> = rows.iter().map(|r| r.dedup_key()).collect();
        let expected_new = mixed
            .iter()
            .filter(|r| !existing.contains(&r.dedup_key()))
            .count();
        assert_eq!(expected_new, 3);
        assert_eq!(store.put_scores(&mixed, false).unwrap(), 3);
        assert_eq!(
            store.count_scores(Some("p"), None, None, None, false).unwrap(),
            8
        );
    }

    #[test]
    fn checkpoint_is_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(store.read_checkpoint("p").unwrap().is_none());
        store
            .commit_checkpoint("p", "s:1-5", Some("5"), 5, fixed_now())
            .unwrap();
        store
            .commit_checkpoint("p", "s:6-9", Some("9"), 9, fixed_now())
            .unwrap();
        let cp = store.read_checkpoint("p").unwrap().unwrap();
        assert_eq!(cp.batch_id, "s:6-9");
        assert_eq!(cp.upto_seq, 9);
        let err = store
            .commit_checkpoint("p", "s:1-5", Some("5"), 5, fixed_now())
            .unwrap_err();
        assert!(matches!(err, StoreError::CheckpointRegression { .. }));
    }

    #[test]
    fn archive_appends_once_per_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let batch: Vec<RawPayload> = (1..=3).map(|i| payload("ehr", i, json!({"n": i}))).collect();
        assert_eq!(store.append_archive(&batch).unwrap(), 3);
        // Re-append after a simulated crash: all rejected as regressions.
        assert_eq!(store.append_archive(&batch).unwrap(), 0);
        assert_eq!(store.count_archive_lines("ehr").unwrap(), 3);
        assert!(store.verify_archive().unwrap().is_empty());

        // A fresh store instance over the same directory sees the max.
        let mut store2 = Store::open(dir.path()).unwrap();
        assert_eq!(store2.append_archive(&batch).unwrap(), 0);
        let more: Vec<RawPayload> = (4..=5).map(|i| payload("ehr", i, json!({"n": i}))).collect();
        assert_eq!(store2.append_archive(&more).unwrap(), 2);
    }

    #[test]
    fn verify_reports_exactly_the_corrupted_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let batch: Vec<RawPayload> = (1..=100)
            .map(|i| payload("ehr", i, json!({"n": i})))
            .collect();
        store.append_archive(&batch).unwrap();
        assert_eq!(store.verify_archive().unwrap(), vec![]);

        // Flip one byte inside the body of line 42.
        let file = store.archive_files("ehr").unwrap()[0].clone();
        let text = fs::read_to_string(&file).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let target = 41;
        lines[target] = lines[target].replace("\"n\":42", "\"n\":43");
        fs::write(&file, lines.join("\n") + "\n").unwrap();

        let violations = store.verify_archive().unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].line, 42);
        assert!(violations[0].detail.contains("hash"));
    }

    #[test]
    fn archived_payloads_filter_by_span() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let batch: Vec<RawPayload> = (1..=9).map(|i| payload("ehr", i, json!({"n": i}))).collect();
        store.append_archive(&batch).unwrap();
        let slice = store.archived_payloads("ehr", 3, 5).unwrap();
        assert_eq!(slice.len(), 3);
        assert_eq!(slice[0].sequence, 3);
        assert_eq!(slice[2].sequence, 5);
        // Round trip is exact.
        assert_eq!(slice[1], batch[3]);
    }

    #[test]
    fn sequence_assignment_is_durable_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let a = store.assign_sequence("ehr", 111).unwrap();
        let b = store.assign_sequence("ehr", 222).unwrap();
        let a_again = store.assign_sequence("ehr", 111).unwrap();
        assert_eq!(a, Assigned { sequence: 1, new: true });
        assert_eq!(b, Assigned { sequence: 2, new: true });
        assert_eq!(a_again, Assigned { sequence: 1, new: false });
        drop(store);
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.assign_sequence("ehr", 222).unwrap().sequence, 2);
        assert_eq!(store.assign_sequence("ehr", 333).unwrap().sequence, 3);
    }

    #[test]
    fn locf_round_trips_and_staged_view_isolates() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        store
            .put_locf("p", &[("P1".into(), "hr".into(), 92.0, fixed_now())])
            .unwrap();
        assert_eq!(store.get_locf("p", "P1", "hr").unwrap(), Some(92.0));
        assert_eq!(store.get_locf("p", "P1", "sbp").unwrap(), None);
        assert_eq!(store.get_locf("q", "P1", "hr").unwrap(), None);

        let mut staged = StagedLocf::new(&store, "p");
        assert_eq!(staged.get("P1", "hr"), Some(92.0));
        staged.set("P1", "hr", 97.0, fixed_now());
        assert_eq!(staged.get("P1", "hr"), Some(97.0));
        // Nothing durable until the entries are put.
        assert_eq!(store.get_locf("p", "P1", "hr").unwrap(), Some(92.0));
        let entries = staged.into_entries();
        store.put_locf("p", &entries).unwrap();
        assert_eq!(store.get_locf("p", "P1", "hr").unwrap(), Some(97.0));
    }

    #[test]
    fn quarantine_dedupes_by_content() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let first = store.quarantine("ehr", "{broken", fixed_now()).unwrap();
        assert!(first.is_some());
        let second = store.quarantine("ehr", "{broken", fixed_now()).unwrap();
        assert!(second.is_none());
        assert_eq!(store.count_quarantined("ehr").unwrap(), 1);
        assert_eq!(store.count_quarantined("other").unwrap(), 0);
    }

    #[test]
    fn undelivered_and_mark_delivered() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let mut silent = row("p", "P1", "s:1-1", 0.5);
        silent.silent = true;
        store
            .put_scores(&[row("p", "P0", "s:1-1", 0.5), silent], false)
            .unwrap();
        let pending = store.undelivered("p").unwrap();
        assert_eq!(pending.len(), 1);
        assert_eq!(pending[0].patient_id, "P0");
        store.mark_delivered(&pending[0]).unwrap();
        assert!(store.undelivered("p").unwrap().is_empty());
    }

    #[test]
    fn export_is_deterministic_and_quoted() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let mut r1 = row("p", "P,with,commas", "s:1-2", 0.25);
        r1.risk_level = "needs \"review\"".into();
        let r2 = row("p", "A", "s:1-2", 0.75);
        store.put_scores(&[r1, r2], false).unwrap();

        let mut fst = Vec::new();
        store.export_csv(Some("p"), false, &mut fst).unwrap();
        let mut snd = Vec::new();
        store.export_csv(Some("p"), false, &mut snd).unwrap();
        assert_eq!(fst, snd);
        let text = String::from_utf8(fst).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("pipeline,model_id"));
        // Sorted by patient within the batch: A first.
        assert!(lines.next().unwrap().starts_with("p,m,1,A,"));
        assert!(text.contains("\"P,with,commas\""));
        assert!(text.contains("\"needs \"\"review\"\"\""));
    }

    #[test]
    fn replay_table_is_separate() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        store
            .put_scores(&[row("p", "P1", "s:1-1", 0.5)], false)
            .unwrap();
        store
            .put_scores(&[row("p", "P1", "s:1-1", 0.9)], true)
            .unwrap();
        assert_eq!(
            store.count_scores(Some("p"), None, None, None, false).unwrap(),
            1
        );
        assert_eq!(
            store.count_scores(Some("p"), None, None, None, true).unwrap(),
            1
        );
        store.clear_replay("p").unwrap();
        assert_eq!(
            store.count_scores(Some("p"), None, None, None, true).unwrap(),
            0
        );
        assert_eq!(
            store.count_scores(Some("p"), None, None, None, false).unwrap(),
            1
        );
    }

    #[test]
    fn recent_feature_values_come_newest_first() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        for (i, hr) in [70.0, 80.0, 90.0].iter().enumerate() {
            let mut r = row("p", &format!("P{i}"), "s:1-3", 0.5);
            r.features = BTreeMap::from([("hr".to_string(), *hr)]);
            store.put_scores(&[r], false).unwrap();
        }
        let recent = store.recent_feature_values("p", 1, "hr", 2).unwrap();
        assert_eq!(recent, vec![90.0, 80.0]);
    }
}
