use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CohortSplit, PatientRecord, Timeline, TimelineError, Token, TokenKind, Vocab};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TimelineError + '_ {
    move |source| TimelineError::Io { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, line: usize, detail: impl ToString) -> TimelineError {
    TimelineError::Parse { path: path.to_path_buf(), line, detail: detail.to_string() }
}

/// Serialized token: `{"kind": "AGE"|"CONCEPT", "value": str}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLine {
    pub kind: TokenKind,
    pub value: String,
}

/// One line of a timelines file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineLine {
    pub patient_id: String,
    pub tokens: Vec<TokenLine>,
}

impl TimelineLine {
    pub fn from_timeline(t: &Timeline, vocab: &Vocab) -> Self {
        Self {
            patient_id: t.patient_id.clone(),
            tokens: t
                .tokens
                .iter()
                .map(|tok| TokenLine { kind: tok.kind, value: vocab.entry(tok.id).value.clone() })
                .collect(),
        }
    }

    pub fn to_timeline(&self, vocab: &Vocab) -> Result<Timeline, TimelineError> {
        let tokens = self
            .tokens
            .iter()
            .map(|t| {
                vocab
                    .lookup(t.kind, &t.value)
                    .map(|id| Token { kind: t.kind, id })
                    .ok_or_else(|| TimelineError::UnknownToken { kind: t.kind, value: t.value.clone() })
            })
            .collect::<Result<_, _>>()?;
        Ok(Timeline { patient_id: self.patient_id.clone(), tokens })
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, TimelineError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(path, n + 1, e))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), TimelineError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a JSON-lines file of patient records; `timestamp_order` follows file order.
pub fn read_records(path: &Path) -> Result<Vec<PatientRecord>, TimelineError> {
    let mut records: Vec<PatientRecord> = read_jsonl(path)?;
    records.iter_mut().for_each(PatientRecord::renumber);
    Ok(records)
}

pub fn write_records(path: &Path, records: &[PatientRecord]) -> Result<(), TimelineError> {
    write_jsonl(path, records)
}

pub fn read_timelines(path: &Path, vocab: &Vocab) -> Result<Vec<Timeline>, TimelineError> {
    read_jsonl::<TimelineLine>(path)?.iter().map(|l| l.to_timeline(vocab)).collect()
}

pub fn write_timelines(path: &Path, timelines: &[Timeline], vocab: &Vocab) -> Result<(), TimelineError> {
    write_jsonl(path, timelines.iter().map(|t| TimelineLine::from_timeline(t, vocab)))
}

pub fn read_vocab(path: &Path) -> Result<Vocab, TimelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Vocab::from_tsv(&text).map_err(|e| match e {
        TimelineError::Parse { line, detail, .. } => parse_err(path, line, detail),
        other => other,
    })
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<(), TimelineError> {
    fs::write(path, vocab.to_tsv()).map_err(io_err(path))
}

pub fn read_split(path: &Path) -> Result<CohortSplit, TimelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e))
}

pub fn write_split(path: &Path, split: &CohortSplit) -> Result<(), TimelineError> {
    let text = serde_json::to_string_pretty(split).expect("split serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}
