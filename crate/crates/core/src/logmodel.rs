//! Impression log schema, demographic types, and NDJSON/CSV ingestion.
//!
//! A corpus is always held sorted by `impression_id`, which is also the order
//! in which it is emitted, so `ingest(emit(c)) == c` for any valid corpus.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::metrics::ReformulationRule;

/// Generational age bins: <18, 18–34, 35–54, 55–74.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgeGroup {
    G1,
    G2,
    G3,
    G4,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 4] = [AgeGroup::G1, AgeGroup::G2, AgeGroup::G3, AgeGroup::G4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            AgeGroup::G1 => "G1",
            AgeGroup::G2 => "G2",
            AgeGroup::G3 => "G3",
            AgeGroup::G4 => "G4",
        }
    }

    pub fn age_range(self) -> &'static str {
        match self {
            AgeGroup::G1 => "<18",
            AgeGroup::G2 => "18-34",
            AgeGroup::G3 => "35-54",
            AgeGroup::G4 => "55-74",
        }
    }
}

impl FromStr for AgeGroup {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "G1" => Ok(AgeGroup::G1),
            "G2" => Ok(AgeGroup::G2),
            "G3" => Ok(AgeGroup::G3),
            "G4" => Ok(AgeGroup::G4),
            other => Err(format!("unknown age group {other:?}")),
        }
    }
}

/// Self-reported binary gender.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
        }
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "M" => Ok(Gender::Male),
            "F" => Ok(Gender::Female),
            other => Err(format!("unknown gender {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DemographicProfile {
    pub age: AgeGroup,
    pub gender: Gender,
}

impl DemographicProfile {
    pub fn new(age: AgeGroup, gender: Gender) -> Self {
        Self { age, gender }
    }

    /// All eight profiles, age-major.
    pub fn all() -> impl Iterator<Item = DemographicProfile> {
        AgeGroup::ALL
            .into_iter()
            .flat_map(|a| Gender::ALL.into_iter().map(move |g| DemographicProfile::new(a, g)))
    }

    /// Dense index in `0..8`, age-major.
    pub fn index(self) -> usize {
        self.age.index() * 2 + self.gender.index()
    }
}

impl fmt::Display for DemographicProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.age.label(), self.gender.label())
    }
}

/// The demographic dimension an audit compares groups along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Age,
    Gender,
}

impl Factor {
    pub fn groups(self) -> Vec<Group> {
        match self {
            Factor::Age => AgeGroup::ALL.into_iter().map(Group::Age).collect(),
            Factor::Gender => Gender::ALL.into_iter().map(Group::Gender).collect(),
        }
    }

    pub fn group_of(self, profile: &DemographicProfile) -> Group {
        match self {
            Factor::Age => Group::Age(profile.age),
            Factor::Gender => Group::Gender(profile.gender),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Factor::Age => "age",
            Factor::Gender => "gender",
        }
    }
}

impl FromStr for Factor {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "age" => Ok(Factor::Age),
            "gender" => Ok(Factor::Gender),
            other => Err(format!("unknown factor {other:?} (expected age or gender)")),
        }
    }
}

/// One group of a [`Factor`]; serialized as its bare label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Group {
    Age(AgeGroup),
    Gender(Gender),
}

impl Group {
    pub fn label(self) -> &'static str {
        match self {
            Group::Age(a) => a.label(),
            Group::Gender(g) => g.label(),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Click {
    pub result_id: String,
    /// 1-based rank on the results page.
    pub position: u32,
    /// Seconds on the clicked page. Absent in clicks-only (external) logs.
    pub dwell_seconds: Option<f64>,
    /// This click ended the query's interaction.
    pub terminated_query: bool,
}

/// One view of a results page shown to one user for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub impression_id: String,
    pub user_id: String,
    pub session_id: String,
    pub timestamp: i64,
    pub query_text: String,
    pub topic: String,
    pub results: Vec<String>,
    /// In order of occurrence.
    pub clicks: Vec<Click>,
    /// A reformulated query followed in the same session.
    pub reformulated: bool,
    pub demographics: DemographicProfile,
    /// Query-level navigational label, when the log source provides one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub navigational: Option<bool>,
}

impl Impression {
    /// Checks the schema invariants, returning a short reason on failure.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.impression_id.is_empty() {
            return Err("empty impression_id".into());
        }
        if self.query_text.is_empty() {
            return Err("empty query_text".into());
        }
        if self.results.is_empty() {
            return Err("empty results".into());
        }
        let mut seen = HashSet::with_capacity(self.results.len());
        for r in &self.results {
            if r.is_empty() || r.contains([';', ':', '|']) {
                return Err("bad result_id".into());
            }
            if !seen.insert(r.as_str()) {
                return Err("duplicate result_id".into());
            }
        }
        let mut terminating = 0;
        for c in &self.clicks {
            if !seen.contains(c.result_id.as_str()) {
                return Err("click on result not in results".into());
            }
            if c.position < 1 {
                return Err("click position < 1".into());
            }
            if let Some(d) = c.dwell_seconds {
                if !d.is_finite() || d < 0.0 {
                    return Err("negative or non-finite dwell".into());
                }
            }
            if c.terminated_query {
                terminating += 1;
            }
        }
        if terminating > 1 {
            return Err("more than one terminating click".into());
        }
        Ok(())
    }
}

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize_query(raw: &str) -> String {
    raw.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Internal,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Ndjson,
    Csv,
}

impl LogFormat {
    /// Guess from a file extension; anything other than `.csv` is NDJSON.
    pub fn from_path(path: &Path) -> LogFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => LogFormat::Csv,
            _ => LogFormat::Ndjson,
        }
    }
}

impl FromStr for LogFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ndjson" | "jsonl" => Ok(LogFormat::Ndjson),
            "csv" => Ok(LogFormat::Csv),
            other => Err(format!("unknown log format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetadata {
    pub source: Source,
    pub records_read: usize,
    pub records_skipped: usize,
    pub skip_reasons: BTreeMap<String, usize>,
}

/// An immutable, id-sorted collection of impressions.
#[derive(Debug, Clone, PartialEq)]
pub struct LogCorpus {
    impressions: Vec<Impression>,
    pub metadata: CorpusMetadata,
}

impl LogCorpus {
    /// Builds a corpus, sorting by impression id. Fails on duplicate ids or
    /// invariant violations.
    pub fn new(mut impressions: Vec<Impression>, source: Source) -> Result<Self> {
        impressions.sort_by(|a, b| a.impression_id.cmp(&b.impression_id));
        for w in impressions.windows(2) {
            if w[0].impression_id == w[1].impression_id {
                return Err(AuditError::Data(format!(
                    "duplicate impression_id {}",
                    w[0].impression_id
                )));
            }
        }
        for imp in &impressions {
            imp.validate()
                .map_err(|e| AuditError::Data(format!("impression {}: {e}", imp.impression_id)))?;
        }
        let n = impressions.len();
        Ok(Self {
            impressions,
            metadata: CorpusMetadata {
                source,
                records_read: n,
                ..Default::default()
            },
        })
    }

    pub fn empty() -> Self {
        Self {
            impressions: Vec::new(),
            metadata: CorpusMetadata::default(),
        }
    }

    pub fn impressions(&self) -> &[Impression] {
        &self.impressions
    }

    pub fn len(&self) -> usize {
        self.impressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.impressions.is_empty()
    }

    pub fn source(&self) -> Source {
        self.metadata.source
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.metadata.source = source;
        self
    }

    /// True when every click carries a dwell time, i.e. dwell-based metrics
    /// are meaningful.
    pub fn has_dwell(&self) -> bool {
        self.impressions
            .iter()
            .all(|i| i.clicks.iter().all(|c| c.dwell_seconds.is_some()))
    }

    pub fn get(&self, impression_id: &str) -> Option<&Impression> {
        self.impressions
            .binary_search_by(|i| i.impression_id.as_str().cmp(impression_id))
            .ok()
            .map(|k| &self.impressions[k])
    }
}

/// Reads a log file with the default reformulation rule.
pub fn ingest(path: &Path, format: LogFormat) -> Result<LogCorpus> {
    ingest_with(path, format, &ReformulationRule::default())
}

/// Reads a log file. Records that fail to parse or violate the schema
/// invariants are skipped and counted; if more than half the records are
/// bad the whole file is rejected. Missing `reformulated` flags are derived
/// from the next query in the same session using `rule`.
pub fn ingest_with(path: &Path, format: LogFormat, rule: &ReformulationRule) -> Result<LogCorpus> {
    let file = File::open(path).map_err(|source| AuditError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let parsed = match format {
        LogFormat::Ndjson => read_ndjson(reader, path)?,
        LogFormat::Csv => read_csv(reader, path)?,
    };
    assemble(parsed, path, rule)
}

/// A parsed record whose reformulation flag may still need deriving.
struct PendingRecord {
    impression: Impression,
    reformulated: Option<bool>,
}

struct Parsed {
    total: usize,
    records: Vec<PendingRecord>,
    skips: BTreeMap<String, usize>,
}

impl Parsed {
    fn new() -> Self {
        Self {
            total: 0,
            records: Vec::new(),
            skips: BTreeMap::new(),
        }
    }

    fn skip(&mut self, reason: impl Into<String>) {
        *self.skips.entry(reason.into()).or_default() += 1;
    }
}

#[derive(Deserialize)]
struct NdjsonRecord {
    impression_id: String,
    user_id: String,
    session_id: String,
    timestamp: i64,
    query_text: String,
    topic: String,
    results: Vec<String>,
    clicks: Vec<Click>,
    #[serde(default)]
    reformulated: Option<bool>,
    demographics: DemographicProfile,
    #[serde(default)]
    navigational: Option<bool>,
}

fn read_ndjson<R: BufRead>(reader: R, path: &Path) -> Result<Parsed> {
    let mut out = Parsed::new();
    for line in reader.lines() {
        let line = line.map_err(|source| AuditError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.total += 1;
        match serde_json::from_str::<NdjsonRecord>(&line) {
            Ok(r) => {
                let impression = Impression {
                    impression_id: r.impression_id,
                    user_id: r.user_id,
                    session_id: r.session_id,
                    timestamp: r.timestamp,
                    query_text: normalize_query(&r.query_text),
                    topic: r.topic,
                    results: r.results,
                    clicks: r.clicks,
                    reformulated: r.reformulated.unwrap_or(false),
                    demographics: r.demographics,
                    navigational: r.navigational,
                };
                out.records.push(PendingRecord {
                    impression,
                    reformulated: r.reformulated,
                });
            }
            Err(_) => out.skip("unparseable record"),
        }
    }
    Ok(out)
}

pub const CSV_HEADER: [&str; 12] = [
    "impression_id",
    "user_id",
    "session_id",
    "timestamp",
    "query_text",
    "topic",
    "results",
    "clicks",
    "reformulated",
    "age",
    "gender",
    "navigational",
];

fn parse_bool(s: &str) -> std::result::Result<Option<bool>, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" => Ok(None),
        "1" | "true" => Ok(Some(true)),
        "0" | "false" => Ok(Some(false)),
        other => Err(format!("bad boolean {other:?}")),
    }
}

/// Parses `position:result_id:dwell_seconds:terminated` entries joined by `;`.
pub fn parse_packed_clicks(field: &str) -> std::result::Result<Vec<Click>, String> {
    if field.trim().is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|entry| {
            let parts: Vec<&str> = entry.split(':').collect();
            if parts.len() != 4 {
                return Err(format!("bad click entry {entry:?}"));
            }
            let position = parts[0]
                .trim()
                .parse::<u32>()
                .map_err(|_| format!("bad click position {:?}", parts[0]))?;
            let dwell_seconds = match parts[2].trim() {
                "" => None,
                d => Some(d.parse::<f64>().map_err(|_| format!("bad dwell {d:?}"))?),
            };
            let terminated_query = parse_bool(parts[3])?.ok_or("missing termination flag")?;
            Ok(Click {
                result_id: parts[1].trim().to_string(),
                position,
                dwell_seconds,
                terminated_query,
            })
        })
        .collect()
}

pub fn pack_clicks(clicks: &[Click]) -> String {
    clicks
        .iter()
        .map(|c| {
            let dwell = c.dwell_seconds.map(|d| d.to_string()).unwrap_or_default();
            format!(
                "{}:{}:{}:{}",
                c.position,
                c.result_id,
                dwell,
                if c.terminated_query { 1 } else { 0 }
            )
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn read_csv<R: BufRead>(reader: R, path: &Path) -> Result<Parsed> {
    let mut out = Parsed::new();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        // An empty file has no header row; that is an empty corpus.
        Err(_) => return Ok(out),
    };
    if headers.is_empty() {
        return Ok(out);
    }
    let col: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    for required in &CSV_HEADER[..11] {
        if !col.contains_key(required) {
            return Err(AuditError::Data(format!(
                "{}: CSV header lacks column {required:?}",
                path.display()
            )));
        }
    }
    for rec in rdr.records() {
        out.total += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(_) => {
                out.skip("unparseable record");
                continue;
            }
        };
        match parse_csv_record(&col, &rec) {
            Ok(p) => out.records.push(p),
            Err(reason) => out.skip(reason),
        }
    }
    Ok(out)
}

fn parse_csv_record(col: &HashMap<&str, usize>, rec: &csv::StringRecord) -> std::result::Result<PendingRecord, String> {
    let field = |name: &str| -> &str { col.get(name).and_then(|&i| rec.get(i)).unwrap_or("") };
    let timestamp = field("timestamp")
        .trim()
        .parse::<i64>()
        .map_err(|_| "bad timestamp".to_string())?;
    let results: Vec<String> = if field("results").trim().is_empty() {
        Vec::new()
    } else {
        field("results").split(';').map(|s| s.trim().to_string()).collect()
    };
    let clicks = parse_packed_clicks(field("clicks"))?;
    let reformulated = parse_bool(field("reformulated"))?;
    let age: AgeGroup = field("age").parse()?;
    let gender: Gender = field("gender").parse()?;
    let navigational = parse_bool(field("navigational"))?;
    Ok(PendingRecord {
        impression: Impression {
            impression_id: field("impression_id").trim().to_string(),
            user_id: field("user_id").trim().to_string(),
            session_id: field("session_id").trim().to_string(),
            timestamp,
            query_text: normalize_query(field("query_text")),
            topic: field("topic").trim().to_string(),
            results,
            clicks,
            reformulated: reformulated.unwrap_or(false),
            demographics: DemographicProfile::new(age, gender),
            navigational,
        },
        reformulated,
    })
}

fn assemble(mut parsed: Parsed, path: &Path, rule: &ReformulationRule) -> Result<LogCorpus> {
    // Invariant checks and duplicate ids; first occurrence of an id wins.
    let mut seen_ids = HashSet::new();
    let mut kept = Vec::with_capacity(parsed.records.len());
    for rec in std::mem::take(&mut parsed.records) {
        if let Err(reason) = rec.impression.validate() {
            parsed.skip(reason);
            continue;
        }
        if !seen_ids.insert(rec.impression.impression_id.clone()) {
            parsed.skip("duplicate impression_id");
            continue;
        }
        kept.push(rec);
    }
    let skipped: usize = parsed.skips.values().sum();
    if parsed.total > 0 && skipped * 2 > parsed.total {
        return Err(AuditError::MostlyMalformed {
            path: path.to_path_buf(),
            skipped,
            total: parsed.total,
        });
    }
    if skipped > 0 {
        log::warn!(
            "{}: skipped {skipped} of {} records ({:?})",
            path.display(),
            parsed.total,
            parsed.skips
        );
    }

    derive_missing_reformulations(&mut kept, rule);

    let mut impressions: Vec<Impression> = kept.into_iter().map(|r| r.impression).collect();
    impressions.sort_by(|a, b| a.impression_id.cmp(&b.impression_id));
    let source = if impressions
        .iter()
        .all(|i| i.clicks.iter().all(|c| c.dwell_seconds.is_some()))
    {
        Source::Internal
    } else {
        Source::External
    };
    Ok(LogCorpus {
        impressions,
        metadata: CorpusMetadata {
            source,
            records_read: parsed.total,
            records_skipped: skipped,
            skip_reasons: parsed.skips,
        },
    })
}

fn derive_missing_reformulations(records: &mut [PendingRecord], rule: &ReformulationRule) {
    if records.iter().all(|r| r.reformulated.is_some()) {
        return;
    }
    let mut sessions: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, r) in records.iter().enumerate() {
        sessions.entry(r.impression.session_id.as_str()).or_default().push(k);
    }
    let mut derived = Vec::new();
    for idx in sessions.values_mut() {
        idx.sort_by(|&a, &b| {
            let (ia, ib) = (&records[a].impression, &records[b].impression);
            (ia.timestamp, &ia.impression_id).cmp(&(ib.timestamp, &ib.impression_id))
        });
        for w in 0..idx.len() {
            let here = &records[idx[w]];
            if here.reformulated.is_some() {
                continue;
            }
            let flag = idx.get(w + 1).is_some_and(|&next| {
                rule.is_reformulation(&here.impression.query_text, &records[next].impression.query_text)
            });
            derived.push((idx[w], flag));
        }
    }
    for (k, flag) in derived {
        records[k].impression.reformulated = flag;
        records[k].reformulated = Some(flag);
    }
}

/// Writes the corpus in impression-id order and returns the record count.
pub fn emit(corpus: &LogCorpus, path: &Path, format: LogFormat) -> Result<usize> {
    let wrap = |source| AuditError::Write {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(wrap)?;
    let mut w = BufWriter::new(file);
    match format {
        LogFormat::Ndjson => {
            for imp in corpus.impressions() {
                serde_json::to_writer(&mut w, imp)?;
                w.write_all(b"\n").map_err(wrap)?;
            }
        }
        LogFormat::Csv => {
            let mut cw = csv::Writer::from_writer(&mut w);
            cw.write_record(CSV_HEADER)?;
            for imp in corpus.impressions() {
                let nav = imp.navigational.map(|b| b.to_string()).unwrap_or_default();
                cw.write_record([
                    imp.impression_id.as_str(),
                    imp.user_id.as_str(),
                    imp.session_id.as_str(),
                    &imp.timestamp.to_string(),
                    imp.query_text.as_str(),
                    imp.topic.as_str(),
                    &imp.results.join(";"),
                    &pack_clicks(&imp.clicks),
                    if imp.reformulated { "true" } else { "false" },
                    imp.demographics.age.label(),
                    imp.demographics.gender.label(),
                    &nav,
                ])?;
            }
            cw.flush().map_err(wrap)?;
        }
    }
    w.flush().map_err(wrap)?;
    Ok(corpus.len())
}
