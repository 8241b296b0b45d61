//! Record types shared by every stage, and their JSONL persistence.
//!
//! Every line written by [`write_records`] is one JSON object whose first key
//! is `schema_version`, followed by the record's fields in declaration order.
//! Identifiers are ULID strings handed out by [`IdGen`]; they never depend on
//! record content, so two byte-identical stories still have distinct ids.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::suffix_dedup::DedupReport;

/// Version stamped on every persisted record.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: malformed JSON: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: schema error{}: {message}", field.as_ref().map(|f| format!(" in field `{f}`")).unwrap_or_default())]
    Schema {
        path: PathBuf,
        line: usize,
        field: Option<String>,
        message: String,
    },
    #[error("{path}:{line}: unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    Version {
        path: PathBuf,
        line: usize,
        found: String,
    },
    #[error("record {index} ({kind}) is invalid: {message}")]
    Invalid {
        kind: &'static str,
        index: usize,
        message: String,
    },
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("failed to serialize {kind} record {index}: {source}")]
    Serialize {
        kind: &'static str,
        index: usize,
        source: serde_json::Error,
    },
}

impl RecordError {
    /// 1-based line number for errors tied to a specific input line.
    pub fn line(&self) -> Option<usize> {
        match self {
            RecordError::Malformed { line, .. }
            | RecordError::Schema { line, .. }
            | RecordError::Version { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// A type that can be persisted as one JSONL line.
pub trait Record: Serialize + DeserializeOwned {
    const KIND: &'static str;

    fn id(&self) -> &str;

    /// Checks the record-level invariants. Called before every write.
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

/// Sampling controls for one generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationParams {
    pub fn new(temperature: f64, top_p: f64, max_tokens: u32) -> Self {
        Self {
            temperature,
            top_p,
            max_tokens,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }
}

/// A stress-inducing situation used as brainstorming seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<i64>,
    #[serde(default = "default_source")]
    pub source: String,
}

fn default_source() -> String {
    "unspecified".into()
}

impl Record for Scenario {
    const KIND: &'static str = "scenario";
    fn id(&self) -> &str {
        &self.id
    }
    fn validate(&self) -> Result<(), String> {
        non_empty("id", &self.id)?;
        non_empty("text", &self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Story {
    pub id: String,
    pub scenario_id: String,
    pub text: String,
    pub model_id: String,
    pub params: GenerationParams,
    pub created_at: String,
}

impl Record for Story {
    const KIND: &'static str = "story";
    fn id(&self) -> &str {
        &self.id
    }
    fn validate(&self) -> Result<(), String> {
        non_empty("id", &self.id)?;
        non_empty("scenario_id", &self.scenario_id)?;
        non_empty("text", &self.text)?;
        self.params.validate()
    }
}

/// The four Chain-of-Empathy therapy framings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TherapyStyle {
    /// Cognitive behavioral therapy.
    #[serde(rename = "CBT")]
    Cbt,
    /// Dialectical behavior therapy.
    #[serde(rename = "DBT")]
    Dbt,
    /// Person-centered therapy.
    #[serde(rename = "PCT")]
    Pct,
    /// Reality therapy.
    #[serde(rename = "RT")]
    Rt,
}

impl TherapyStyle {
    pub const ALL: [TherapyStyle; 4] = [
        TherapyStyle::Cbt,
        TherapyStyle::Dbt,
        TherapyStyle::Pct,
        TherapyStyle::Rt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TherapyStyle::Cbt => "CBT",
            TherapyStyle::Dbt => "DBT",
            TherapyStyle::Pct => "PCT",
            TherapyStyle::Rt => "RT",
        }
    }
}

impl fmt::Display for TherapyStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TherapyStyle {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TherapyStyle::ALL
            .into_iter()
            .find(|style| style.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown therapy style `{s}` (expected CBT, DBT, PCT or RT)"))
    }
}

/// A story rewritten as a first-person help-seeking message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub id: String,
    pub story_id: String,
    pub style: TherapyStyle,
    pub text: String,
    pub model_id: String,
    pub params: GenerationParams,
}

impl Record for Explanation {
    const KIND: &'static str = "explanation";
    fn id(&self) -> &str {
        &self.id
    }
    fn validate(&self) -> Result<(), String> {
        non_empty("id", &self.id)?;
        non_empty("story_id", &self.story_id)?;
        non_empty("text", &self.text)?;
        self.params.validate()
    }
}

/// Where a corpus row came from, beyond its explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub scenario_id: String,
    pub story_model_id: String,
    pub story_params: GenerationParams,
}

/// One explanation–response pair of the final corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub explanation: Explanation,
    pub response_text: String,
    pub response_model_id: String,
    pub response_params: GenerationParams,
    #[serde(default)]
    pub filtered: bool,
    pub lineage: Lineage,
}

impl Record for CorpusRecord {
    const KIND: &'static str = "corpus_record";
    fn id(&self) -> &str {
        &self.id
    }
    fn validate(&self) -> Result<(), String> {
        non_empty("id", &self.id)?;
        self.explanation.validate()?;
        if !self.filtered {
            non_empty("response_text", &self.response_text)?;
        }
        non_empty("lineage.scenario_id", &self.lineage.scenario_id)?;
        self.response_params.validate()
    }
}

/// The fixed stage sequence of a corpus build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Brainstorm,
    DedupStories,
    Rewrite,
    DedupExplanations,
    Respond,
    DedupPairs,
    Filter,
}

impl StageName {
    pub const ALL: [StageName; 7] = [
        StageName::Brainstorm,
        StageName::DedupStories,
        StageName::Rewrite,
        StageName::DedupExplanations,
        StageName::Respond,
        StageName::DedupPairs,
        StageName::Filter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Brainstorm => "brainstorm",
            StageName::DedupStories => "dedup_stories",
            StageName::Rewrite => "rewrite",
            StageName::DedupExplanations => "dedup_explanations",
            StageName::Respond => "respond",
            StageName::DedupPairs => "dedup_pairs",
            StageName::Filter => "filter",
        }
    }

    pub fn index(self) -> usize {
        StageName::ALL.iter().position(|s| *s == self).unwrap()
    }

    pub fn previous(self) -> Option<StageName> {
        self.index().checked_sub(1).map(|i| StageName::ALL[i])
    }

    /// Stages that only remove items, so `output + removed == input` must hold.
    pub fn is_conserving(self) -> bool {
        matches!(
            self,
            StageName::DedupStories
                | StageName::DedupExplanations
                | StageName::DedupPairs
                | StageName::Filter
        )
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StageName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StageName::ALL
            .into_iter()
            .find(|stage| stage.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = StageName::ALL.iter().map(|s| s.as_str()).collect();
                format!("unknown stage `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// Per-stage accounting written next to each stage's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage_name: StageName,
    pub input_count: usize,
    pub output_count: usize,
    pub removed_count: usize,
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dedup: Option<DedupReport>,
}

impl StageManifest {
    pub fn is_conserving(&self) -> bool {
        self.output_count + self.removed_count == self.input_count
    }
}

impl Record for StageManifest {
    const KIND: &'static str = "stage_manifest";
    fn id(&self) -> &str {
        self.stage_name.as_str()
    }
    fn validate(&self) -> Result<(), String> {
        if self.stage_name.is_conserving() && !self.is_conserving() {
            return Err(format!(
                "{}: output {} + removed {} != input {}",
                self.stage_name, self.output_count, self.removed_count, self.input_count
            ));
        }
        Ok(())
    }
}

fn non_empty(field: &str, value: &str) -> Result<(), String> {
    if value.is_empty() {
        Err(format!("`{field}` must not be empty"))
    } else {
        Ok(())
    }
}

/// Wall clock, or a frozen instant for reproducible runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    Fixed(DateTime<Utc>),
}

impl Clock {
    /// The instant used by deterministic (mock) runs.
    pub fn frozen() -> Self {
        Clock::Fixed(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap())
    }

    pub fn now(&self) -> DateTime<Utc> {
        match self {
            Clock::System => Utc::now(),
            Clock::Fixed(t) => *t,
        }
    }

    pub fn timestamp(&self) -> String {
        iso_timestamp(self.now())
    }
}

/// ISO-8601 UTC with millisecond precision, e.g. `2024-01-01T00:00:00.000Z`.
pub fn iso_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Hands out ULID strings from a seeded generator.
pub struct IdGen {
    clock: Clock,
    rng: ChaCha8Rng,
}

impl IdGen {
    /// The stream is fully determined by `(seed, namespace)` and the clock.
    pub fn new(clock: Clock, seed: u64, namespace: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(namespace.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        Self {
            clock,
            rng: ChaCha8Rng::from_seed(digest),
        }
    }

    pub fn next_id(&mut self) -> String {
        let millis = self.clock.now().timestamp_millis().max(0) as u64;
        ulid::Ulid::from_parts(millis, self.rng.gen::<u128>()).to_string()
    }
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    schema_version: u32,
    #[serde(flatten)]
    record: &'a T,
}

/// Writes `records` as JSONL, replacing `path` atomically. Returns the number
/// of lines written.
pub fn write_records<T: Record>(records: &[T], path: &Path) -> Result<usize, RecordError> {
    let mut seen = HashSet::with_capacity(records.len());
    for (index, record) in records.iter().enumerate() {
        record.validate().map_err(|message| RecordError::Invalid {
            kind: T::KIND,
            index,
            message,
        })?;
        if !seen.insert(record.id()) {
            return Err(RecordError::DuplicateId {
                kind: T::KIND,
                id: record.id().to_string(),
            });
        }
    }
    write_atomic(path, |out| {
        for (index, record) in records.iter().enumerate() {
            let envelope = Envelope {
                schema_version: SCHEMA_VERSION,
                record,
            };
            serde_json::to_writer(&mut *out, &envelope).map_err(|source| {
                WriteError::Record(RecordError::Serialize {
                    kind: T::KIND,
                    index,
                    source,
                })
            })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    })?;
    Ok(records.len())
}

/// Reads every record of `path`, in file order. Blank lines are skipped; a
/// missing `schema_version` is accepted as the current version so operators
/// can hand-write input files.
pub fn read_records<T: Record>(path: &Path) -> Result<Vec<T>, RecordError> {
    let file = File::open(path).map_err(|source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line_no = index + 1;
        let line = line.map_err(|source| RecordError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record_line(path, line_no, &line)?);
    }
    Ok(records)
}

/// Parses one JSONL line into a record, attributing errors to `line_no`.
pub fn parse_record_line<T: Record>(path: &Path, line_no: usize, line: &str) -> Result<T, RecordError> {
    let mut value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| RecordError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
    let Some(object) = value.as_object_mut() else {
        return Err(RecordError::Schema {
            path: path.to_path_buf(),
            line: line_no,
            field: None,
            message: format!("expected a JSON object for a {} record", T::KIND),
        });
    };
    if let Some(version) = object.remove("schema_version") {
        if version.as_u64() != Some(SCHEMA_VERSION as u64) {
            return Err(RecordError::Version {
                path: path.to_path_buf(),
                line: line_no,
                found: version.to_string(),
            });
        }
    }
    serde_json::from_value(value).map_err(|e| {
        let message = e.to_string();
        RecordError::Schema {
            path: path.to_path_buf(),
            line: line_no,
            field: field_from_message(&message),
            message,
        }
    })
}

fn field_from_message(message: &str) -> Option<String> {
    let start = message.find("field `")? + "field `".len();
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

#[derive(Debug)]
pub(crate) enum WriteError {
    Io(io::Error),
    Record(RecordError),
}

impl From<io::Error> for WriteError {
    fn from(e: io::Error) -> Self {
        WriteError::Io(e)
    }
}

/// Writes through a temp file in the destination directory and renames it
/// over `path` once `body` succeeds. Readers never observe a partial file.
/// Name prefix of in-progress atomic writes.
pub(crate) const TEMP_PREFIX: &str = ".tmp-";

pub(crate) fn write_atomic<F>(path: &Path, body: F) -> Result<(), RecordError>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> Result<(), WriteError>,
{
    let io_err = |source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::Builder::new()
        .prefix(TEMP_PREFIX)
        .tempfile_in(dir)
        .map_err(io_err)?;
    {
        let mut out = BufWriter::new(tmp.as_file_mut());
        match body(&mut out) {
            Ok(()) => {}
            Err(WriteError::Io(e)) => return Err(io_err(e)),
            Err(WriteError::Record(e)) => return Err(e),
        }
        out.flush().map_err(io_err)?;
    }
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Atomically writes a single pretty-printed JSON document.
pub fn write_json_document<T: Serialize>(value: &T, path: &Path) -> Result<(), RecordError> {
    write_atomic(path, |out| {
        serde_json::to_writer_pretty(&mut *out, value).map_err(|source| {
            WriteError::Record(RecordError::Serialize {
                kind: "document",
                index: 0,
                source,
            })
        })?;
        out.write_all(b"\n")?;
        Ok(())
    })
}
