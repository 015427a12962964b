//! Template-driven transformation of raw JSON payloads into flat typed
//! records, and aggregation of those records into patient-level documents.
//!
//! Templates are user-defined JSON documents: an aggregation key path that
//! identifies the patient, plus an ordered list of extraction rules. The
//! path language is a deliberately small JSONPath subset — root `$`, dot
//! fields, numeric index, wildcard `[*]` — so the evaluator is fully
//! specifiable and testable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde_json::Value;
use thiserror::Error;

use crate::clock::{format_ts, parse_ts};
use crate::ingest::RawPayload;

/// One step of a compiled path expression.
#[derive(Debug, Clone, PartialEq, Eq)]
enum PathStep {
    Field(String),
    Index(usize),
    Wildcard,
}

/// Compiled path expression over JSON documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathExpr {
    text: String,
    steps: Vec<PathStep>,
}

impl PathExpr {
    /// Compile a path like `$.vitals[0].hr` or `$.labs[*].wbc`.
    pub fn compile(text: &str) -> Result<Self, TemplateError> {
        let err = |message: &str| TemplateError::Path {
            expr: text.to_string(),
            message: message.to_string(),
        };
        let mut chars = text.chars().peekable();
        if chars.next() != Some('$') {
            return Err(err("path must start with '$'"));
        }
        let mut steps = Vec::new();
        while let Some(&c) = chars.peek() {
            match c {
                '.' => {
                    chars.next();
                    let mut name = String::new();
                    while let Some(&c) = chars.peek() {
                        if c == '.' || c == '[' {
                            break;
                        }
                        name.push(c);
                        chars.next();
                    }
                    if name.is_empty() {
                        return Err(err("empty field name after '.'"));
                    }
                    steps.push(PathStep::Field(name));
                }
                '[' => {
                    chars.next();
                    let mut inner = String::new();
                    loop {
                        match chars.next() {
                            Some(']') => break,
                            Some(c) => inner.push(c),
                            None => return Err(err("unclosed '['")),
                        }
                    }
                    if inner == "*" {
                        steps.push(PathStep::Wildcard);
                    } else {
                        let idx: usize = inner
                            .parse()
                            .map_err(|_| err("index must be a non-negative integer or '*'"))?;
                        steps.push(PathStep::Index(idx));
                    }
                }
                _ => return Err(err("expected '.' or '[' after a path step")),
            }
        }
        Ok(Self {
            text: text.to_string(),
            steps,
        })
    }

    /// Source text of the expression.
    pub fn text(&self) -> &str {
        &self.text
    }

    /// Evaluate against a document, returning matches in document order.
    pub fn evaluate<'a>(&self, doc: &'a Value) -> Vec<&'a Value> {
        let mut current = vec![doc];
        for step in &self.steps {
            let mut next = Vec::new();
            for value in current {
                match step {
                    PathStep::Field(name) => {
                        if let Some(v) = value.as_object().and_then(|o| o.get(name)) {
                            next.push(v);
                        }
                    }
                    PathStep::Index(i) => {
                        if let Some(v) = value.as_array().and_then(|a| a.get(*i)) {
                            next.push(v);
                        }
                    }
                    PathStep::Wildcard => {
                        if let Some(items) = value.as_array() {
                            next.extend(items.iter());
                        }
                    }
                }
            }
            current = next;
        }
        current
    }
}

impl fmt::Display for PathExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Target type a rule coerces extracted values into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueType {
    Number,
    String,
    Boolean,
    Timestamp,
}

impl ValueType {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "number" => Some(Self::Number),
            "string" => Some(Self::String),
            "boolean" => Some(Self::Boolean),
            "timestamp" => Some(Self::Timestamp),
            _ => None,
        }
    }
}

/// How a rule resolves multiple path matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArrayMode {
    #[default]
    First,
    Last,
    All,
    Flatten,
}

impl ArrayMode {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "first" => Some(Self::First),
            "last" => Some(Self::Last),
            "all" => Some(Self::All),
            "flatten" => Some(Self::Flatten),
            _ => None,
        }
    }
}

/// One extraction rule of a template.
#[derive(Debug, Clone)]
pub struct TemplateRule {
    pub out: String,
    pub path: PathExpr,
    pub ty: ValueType,
    pub default: Option<Value>,
    pub required: bool,
    pub array_mode: ArrayMode,
}

/// A compiled, validated transformation template.
#[derive(Debug, Clone)]
pub struct Template {
    pub key: PathExpr,
    pub rules: Vec<TemplateRule>,
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid path expression `{expr}`: {message}")]
    Path { expr: String, message: String },
}

fn schema_err(path: impl Into<String>, message: impl Into<String>) -> TemplateError {
    TemplateError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

/// Parse and validate a template document.
pub fn parse_template(doc: &Value) -> Result<Template, TemplateError> {
    let obj = doc
        .as_object()
        .ok_or_else(|| schema_err("$", "template must be a JSON object"))?;
    for key in obj.keys() {
        if key != "key" && key != "rules" {
            return Err(schema_err(format!("$.{key}"), "unknown template key"));
        }
    }
    let key_text = obj
        .get("key")
        .and_then(Value::as_str)
        .ok_or_else(|| schema_err("$.key", "missing or non-string aggregation key path"))?;
    let key = PathExpr::compile(key_text)?;

    let rules_raw = obj
        .get("rules")
        .and_then(Value::as_array)
        .ok_or_else(|| schema_err("$.rules", "missing or non-array rules"))?;

    let mut rules = Vec::with_capacity(rules_raw.len());
    let mut seen_out = BTreeSet::new();
    for (i, raw) in rules_raw.iter().enumerate() {
        let at = |field: &str| format!("$.rules[{i}].{field}");
        let rule = raw
            .as_object()
            .ok_or_else(|| schema_err(format!("$.rules[{i}]"), "rule must be an object"))?;
        for key in rule.keys() {
            if !matches!(
                key.as_str(),
                "out" | "path" | "type" | "default" | "required" | "array_mode"
            ) {
                return Err(schema_err(at(key), "unknown rule key"));
            }
        }
        let out = rule
            .get("out")
            .and_then(Value::as_str)
            .ok_or_else(|| schema_err(at("out"), "missing or non-string output field"))?
            .to_string();
        if out.is_empty() {
            return Err(schema_err(at("out"), "output field must be non-empty"));
        }
        if !seen_out.insert(out.clone()) {
            return Err(schema_err(
                at("out"),
                format!("duplicate output field `{out}`"),
            ));
        }
        let path_text = rule
            .get("path")
            .and_then(Value::as_str)
            .ok_or_else(|| schema_err(at("path"), "missing or non-string path"))?;
        let path = PathExpr::compile(path_text)?;
        let ty_name = rule
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| schema_err(at("type"), "missing or non-string type"))?;
        let ty = ValueType::parse(ty_name).ok_or_else(|| {
            schema_err(
                at("type"),
                format!("unknown type `{ty_name}` (expected number|string|boolean|timestamp)"),
            )
        })?;
        let required = match rule.get("required") {
            None => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(schema_err(at("required"), "required must be a boolean")),
        };
        let array_mode = match rule.get("array_mode") {
            None => ArrayMode::default(),
            Some(Value::String(s)) => ArrayMode::parse(s).ok_or_else(|| {
                schema_err(
                    at("array_mode"),
                    format!("unknown array_mode `{s}` (expected first|last|all|flatten)"),
                )
            })?,
            Some(_) => return Err(schema_err(at("array_mode"), "array_mode must be a string")),
        };
        let default = rule.get("default").cloned().filter(|v| !v.is_null());
        rules.push(TemplateRule {
            out,
            path,
            ty,
            default,
            required,
            array_mode,
        });
    }

    Ok(Template { key, rules })
}

/// Why a payload was rejected by the template stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    KeyMissing { path: String },
    KeyNotString { path: String },
    RequiredMissing { field: String },
    RequiredCoercion { field: String, detail: String },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::KeyMissing { path } => write!(f, "aggregation key `{path}` missing"),
            Self::KeyNotString { path } => {
                write!(f, "aggregation key `{path}` did not resolve to a string")
            }
            Self::RequiredMissing { field } => write!(f, "required field `{field}` missing"),
            Self::RequiredCoercion { field, detail } => {
                write!(f, "required field `{field}` failed coercion: {detail}")
            }
        }
    }
}

/// Flat record extracted from one payload, keyed by the template's fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedRecord {
    pub patient_id: String,
    pub fields: BTreeMap<String, Value>,
    pub source_id: String,
    pub sequence: u64,
    pub fetched_at: DateTime<Utc>,
}

/// Result of applying a template to one payload.
#[derive(Debug, Clone, Default)]
pub struct ApplyReport {
    pub records: Vec<ExtractedRecord>,
    /// Non-required fields that failed coercion and were nulled.
    pub coercion_warnings: u64,
    /// Timestamps parsed without an offset and assumed UTC.
    pub naive_timestamps: u64,
}

fn coerce(value: &Value, ty: ValueType) -> Result<(Value, bool), String> {
    let mut naive = false;
    let coerced = match ty {
        ValueType::Number => match value {
            Value::Number(n) => Value::Number(n.clone()),
            Value::String(s) => {
                let parsed: f64 = s
                    .trim()
                    .parse()
                    .map_err(|_| format!("`{s}` is not numeric"))?;
                serde_json::Number::from_f64(parsed)
                    .map(Value::Number)
                    .ok_or_else(|| format!("`{s}` is not a finite number"))?
            }
            other => return Err(format!("cannot coerce {} to number", kind_name(other))),
        },
        ValueType::String => match value {
            Value::String(s) => Value::String(s.clone()),
            Value::Number(n) => Value::String(n.to_string()),
            Value::Bool(b) => Value::String(b.to_string()),
            other => return Err(format!("cannot coerce {} to string", kind_name(other))),
        },
        ValueType::Boolean => match value {
            Value::Bool(b) => Value::Bool(*b),
            Value::String(s) if s == "true" => Value::Bool(true),
            Value::String(s) if s == "false" => Value::Bool(false),
            other => return Err(format!("cannot coerce {} to boolean", kind_name(other))),
        },
        ValueType::Timestamp => match value {
            Value::String(s) => {
                if let Some(ts) = parse_ts(s) {
                    Value::String(format_ts(ts))
                } else if let Ok(n) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f") {
                    naive = true;
                    Value::String(format_ts(n.and_utc()))
                } else {
                    return Err(format!("`{s}` is not an ISO 8601 timestamp"));
                }
            }
            other => return Err(format!("cannot coerce {} to timestamp", kind_name(other))),
        },
    };
    Ok((coerced, naive))
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Apply a template to a payload, producing the extracted record.
///
/// Null path matches are treated as absent. A missing value falls back to
/// the rule's default, then to JSON null for optional rules; required
/// rules without a value reject the payload. Coercion failures on
/// optional rules null the field and bump the warning counter.
pub fn apply_template(template: &Template, payload: &RawPayload) -> Result<ApplyReport, RejectReason> {
    let key_matches = template.key.evaluate(&payload.body);
    let key_value = key_matches
        .iter()
        .find(|v| !v.is_null())
        .ok_or_else(|| RejectReason::KeyMissing {
            path: template.key.text().to_string(),
        })?;
    let patient_id = match key_value {
        Value::String(s) if !s.is_empty() => s.clone(),
        Value::Number(n) => n.to_string(),
        _ => {
            return Err(RejectReason::KeyNotString {
                path: template.key.text().to_string(),
            })
        }
    };

    let mut report = ApplyReport::default();
    let mut fields = BTreeMap::new();
    for rule in &template.rules {
        let matches: Vec<&Value> = rule
            .path
            .evaluate(&payload.body)
            .into_iter()
            .filter(|v| !v.is_null())
            .collect();
        let raw: Option<Value> = match rule.array_mode {
            ArrayMode::First => matches.first().map(|v| (*v).clone()),
            ArrayMode::Last => matches.last().map(|v| (*v).clone()),
            ArrayMode::All => {
                if matches.is_empty() {
                    None
                } else {
                    Some(Value::Array(matches.iter().map(|v| (*v).clone()).collect()))
                }
            }
            ArrayMode::Flatten => {
                let mut flat = Vec::new();
                for m in &matches {
                    match m {
                        Value::Array(items) => {
                            flat.extend(items.iter().filter(|v| !v.is_null()).cloned())
                        }
                        other => flat.push((*other).clone()),
                    }
                }
                if flat.is_empty() {
                    None
                } else {
                    Some(Value::Array(flat))
                }
            }
        };

        let value = match raw {
            Some(Value::Array(items)) => {
                // all/flatten: coerce each element; failures null the element out.
                let mut coerced = Vec::with_capacity(items.len());
                for item in &items {
                    match coerce(item, rule.ty) {
                        Ok((v, naive)) => {
                            report.naive_timestamps += u64::from(naive);
                            coerced.push(v);
                        }
                        Err(_) => report.coercion_warnings += 1,
                    }
                }
                Value::Array(coerced)
            }
            Some(scalar) => match coerce(&scalar, rule.ty) {
                Ok((v, naive)) => {
                    report.naive_timestamps += u64::from(naive);
                    v
                }
                Err(detail) => {
                    if rule.required {
                        return Err(RejectReason::RequiredCoercion {
                            field: rule.out.clone(),
                            detail,
                        });
                    }
                    report.coercion_warnings += 1;
                    Value::Null
                }
            },
            None => match (&rule.default, rule.required) {
                (Some(default), _) => coerce(default, rule.ty).map(|(v, _)| v).map_err(|detail| {
                    RejectReason::RequiredCoercion {
                        field: rule.out.clone(),
                        detail: format!("default value: {detail}"),
                    }
                })?,
                (None, true) => {
                    return Err(RejectReason::RequiredMissing {
                        field: rule.out.clone(),
                    })
                }
                (None, false) => Value::Null,
            },
        };
        fields.insert(rule.out.clone(), value);
    }

    report.records.push(ExtractedRecord {
        patient_id,
        fields,
        source_id: payload.source_id.clone(),
        sequence: payload.sequence,
        fetched_at: payload.fetched_at,
    });
    Ok(report)
}

/// Reference to a contributing payload.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct SourceRef {
    pub source_id: String,
    pub sequence: u64,
}

/// Canonical patient-level document produced by aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub fields: BTreeMap<String, Value>,
    pub sources: Vec<SourceRef>,
    pub as_of: DateTime<Utc>,
}

/// Group extracted records by patient and merge them.
///
/// Within a patient the records merge in sequence order (ties broken by
/// source id): the later value wins per field, except that null never
/// overwrites a non-null value from an earlier record. Output is sorted
/// by patient id.
pub fn aggregate(records: Vec<ExtractedRecord>) -> Vec<PatientRecord> {
    let mut by_patient: BTreeMap<String, Vec<ExtractedRecord>> = BTreeMap::new();
    for record in records {
        by_patient.entry(record.patient_id.clone()).or_default().push(record);
    }

    let mut out = Vec::with_capacity(by_patient.len());
    for (patient_id, mut group) in by_patient {
        group.sort_by(|a, b| {
            (a.sequence, &a.source_id).cmp(&(b.sequence, &b.source_id))
        });
        let mut fields: BTreeMap<String, Value> = BTreeMap::new();
        let mut sources = Vec::with_capacity(group.len());
        let mut as_of = group[0].fetched_at;
        for record in group {
            for (name, value) in record.fields {
                match fields.get(&name) {
                    Some(existing) if value.is_null() && !existing.is_null() => {}
                    _ => {
                        fields.insert(name, value);
                    }
                }
            }
            as_of = as_of.max(record.fetched_at);
            sources.push(SourceRef {
                source_id: record.source_id,
                sequence: record.sequence,
            });
        }
        sources.sort();
        sources.dedup();
        out.push(PatientRecord {
            patient_id,
            fields,
            sources,
            as_of,
        });
    }
    out
}
