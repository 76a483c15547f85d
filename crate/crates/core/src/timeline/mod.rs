//! Patient timelines: meta-annotation filtering, confirmation and
//! first-occurrence deduplication, age tokens, truncation, vocabulary and
//! cohort splits.

mod io;
mod split;
mod vocab;

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use io::{
    read_records, read_split, read_timelines, read_vocab, write_records, write_split, write_timelines, write_vocab,
    TimelineLine, TokenLine,
};
pub use split::{split_cohort, CohortSplit, Partition};
pub use vocab::{build_vocab, Vocab, VocabEntry};

/// Largest representable age in years; ages are integer years `0..=MAX_AGE`.
pub const MAX_AGE: i64 = 120;

#[derive(Debug, thiserror::Error)]
pub enum TimelineError {
    #[error("patient {patient_id}: event {event_index} has age {age} outside [0, {MAX_AGE}]")]
    AgeOutOfRange { patient_id: String, event_index: usize, age: i64 },
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("cohort of {n} patients is too small to split (need at least 3)")]
    CohortTooSmall { n: usize },
    #[error("duplicate patient id {0}")]
    DuplicatePatient(String),
    #[error("unknown {kind} token {value:?}")]
    UnknownToken { kind: TokenKind, value: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },
}

/// One annotated concept mention.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEvent {
    pub concept: String,
    pub age: i64,
    pub negated: bool,
    pub subject_is_patient: bool,
    /// Position within the patient record; assigned from file order on load.
    #[serde(skip)]
    pub timestamp_order: usize,
}

impl ConceptEvent {
    pub fn clean(concept: impl Into<String>, age: i64) -> Self {
        Self { concept: concept.into(), age, negated: false, subject_is_patient: true, timestamp_order: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub events: Vec<ConceptEvent>,
}

impl PatientRecord {
    /// Builds a record from `(age, concept)` pairs of clean events in order.
    pub fn from_pairs(patient_id: impl Into<String>, pairs: &[(i64, &str)]) -> Self {
        let events = pairs
            .iter()
            .enumerate()
            .map(|(i, &(age, c))| ConceptEvent { timestamp_order: i, ..ConceptEvent::clean(c, age) })
            .collect();
        Self { patient_id: patient_id.into(), events }
    }

    /// Renumbers `timestamp_order` to match the event order.
    pub fn renumber(&mut self) {
        for (i, e) in self.events.iter_mut().enumerate() {
            e.timestamp_order = i;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TokenKind {
    Age,
    Concept,
    Pad,
}

impl std::fmt::Display for TokenKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TokenKind::Age => "AGE",
            TokenKind::Concept => "CONCEPT",
            TokenKind::Pad => "PAD",
        })
    }
}

impl std::str::FromStr for TokenKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "AGE" => Ok(TokenKind::Age),
            "CONCEPT" => Ok(TokenKind::Concept),
            "PAD" => Ok(TokenKind::Pad),
            other => Err(format!("unknown token kind {other:?}")),
        }
    }
}

/// A vocabulary token. PAD never appears inside a [`Timeline`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Token {
    pub kind: TokenKind,
    pub id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Timeline {
    pub patient_id: String,
    pub tokens: Vec<Token>,
}

impl Timeline {
    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Length rules for [`build_timeline`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineOptions {
    /// A concept must be mentioned at least this many times in the record.
    pub min_confirmations: usize,
    /// Timelines are truncated to their first `max_tokens` tokens.
    pub max_tokens: usize,
    /// Timelines shorter than this after truncation are skipped.
    pub min_tokens: usize,
}

impl Default for TimelineOptions {
    fn default() -> Self {
        Self { min_confirmations: 2, max_tokens: 50, min_tokens: 5 }
    }
}

/// Result of [`build_timeline`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TimelineOutcome {
    Built(Timeline),
    /// Too few tokens survived; carries the candidate tokens for diagnostics.
    Skipped { patient_id: String, tokens: Vec<Token> },
}

impl TimelineOutcome {
    pub fn built(self) -> Option<Timeline> {
        match self {
            TimelineOutcome::Built(t) => Some(t),
            TimelineOutcome::Skipped { .. } => None,
        }
    }

    pub fn tokens(&self) -> &[Token] {
        match self {
            TimelineOutcome::Built(t) => &t.tokens,
            TimelineOutcome::Skipped { tokens, .. } => tokens,
        }
    }
}

/// Keeps events about the patient that are not negated, in order.
pub fn filter_events(record: &PatientRecord) -> PatientRecord {
    PatientRecord {
        patient_id: record.patient_id.clone(),
        events: record.events.iter().filter(|e| e.subject_is_patient && !e.negated).cloned().collect(),
    }
}

fn check_ages(record: &PatientRecord) -> Result<(), TimelineError> {
    match record.events.iter().enumerate().find(|(_, e)| !(0..=MAX_AGE).contains(&e.age)) {
        Some((i, e)) => Err(TimelineError::AgeOutOfRange {
            patient_id: record.patient_id.clone(),
            event_index: i,
            age: e.age,
        }),
        None => Ok(()),
    }
}

/// Concepts of a record mentioned at least `min_confirmations` times, each with
/// its first-occurrence age, in first-occurrence order.
pub(crate) fn confirmed_concepts(record: &PatientRecord, min_confirmations: usize) -> Vec<(&str, i64)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for e in &record.events {
        *counts.entry(e.concept.as_str()).or_default() += 1;
    }
    let mut seen = HashSet::new();
    record
        .events
        .iter()
        .filter(|e| counts[e.concept.as_str()] >= min_confirmations && seen.insert(e.concept.as_str()))
        .map(|e| (e.concept.as_str(), e.age))
        .collect()
}

/// Turns a filtered record into a timeline of AGE and CONCEPT tokens.
///
/// Concepts mentioned fewer than `min_confirmations` times or missing from the
/// vocabulary are dropped; the rest appear once, at their first occurrence,
/// preceded by an AGE token whenever the age differs from the last one
/// emitted. The result is truncated to the first `max_tokens` tokens and
/// skipped when fewer than `min_tokens` remain.
pub fn build_timeline(
    record: &PatientRecord,
    vocab: &Vocab,
    options: &TimelineOptions,
) -> Result<TimelineOutcome, TimelineError> {
    check_ages(record)?;
    let mut tokens = Vec::new();
    let mut last_age = None;
    for (concept, age) in confirmed_concepts(record, options.min_confirmations) {
        let Some(cid) = vocab.concept_id(concept) else { continue };
        if last_age != Some(age) {
            tokens.push(Token { kind: TokenKind::Age, id: vocab.age_id(age).expect("vocab holds every age") });
            last_age = Some(age);
        }
        tokens.push(Token { kind: TokenKind::Concept, id: cid });
    }
    tokens.truncate(options.max_tokens);
    if tokens.len() < options.min_tokens {
        return Ok(TimelineOutcome::Skipped { patient_id: record.patient_id.clone(), tokens });
    }
    Ok(TimelineOutcome::Built(Timeline { patient_id: record.patient_id.clone(), tokens }))
}

/// Runs filtering, vocabulary construction and timeline building over a corpus.
/// Returns the vocabulary and the non-skipped timelines in input order.
pub fn prepare_corpus(
    records: &[PatientRecord],
    min_frequency: u64,
    options: &TimelineOptions,
) -> Result<(Vocab, Vec<Timeline>), TimelineError> {
    let filtered: Vec<PatientRecord> = records.iter().map(filter_events).collect();
    let vocab = build_vocab(&filtered, min_frequency, options.min_confirmations)?;
    let mut timelines = Vec::new();
    for r in &filtered {
        if let Some(t) = build_timeline(r, &vocab, options)?.built() {
            timelines.push(t);
        }
    }
    Ok((vocab, timelines))
}

/// Record that reproduces `timeline` when built again: every concept is
/// mentioned twice at its timeline age.
pub fn timeline_to_record(timeline: &Timeline, vocab: &Vocab) -> PatientRecord {
    let mut events = Vec::new();
    let mut age = 0;
    for t in &timeline.tokens {
        match t.kind {
            TokenKind::Age => age = vocab.age_of(t.id).unwrap_or(0),
            TokenKind::Concept => {
                let code = &vocab.entry(t.id).value;
                events.push(ConceptEvent::clean(code.clone(), age));
                events.push(ConceptEvent::clean(code.clone(), age));
            }
            TokenKind::Pad => {}
        }
    }
    let mut r = PatientRecord { patient_id: timeline.patient_id.clone(), events };
    r.renumber();
    r
}
