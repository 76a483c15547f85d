use std::path::Path;

use serde::Deserialize;

use medseq::timeline::{
    build_timeline, filter_events, ConceptEvent, PatientRecord, TimelineOptions, TimelineOutcome, Token, TokenKind, Vocab,
};

/// One hand-written case of the timeline fixture.
#[derive(Debug, Deserialize)]
pub struct Case {
    pub case: String,
    pub min_confirmations: usize,
    pub max_tokens: usize,
    pub min_tokens: usize,
    /// Concept codes in the vocabulary; `None` means C1..C20 and K01..K60.
    pub vocab: Option<Vec<String>>,
    pub events: Vec<ConceptEvent>,
    /// `BUILT|tokens`, `SKIP|tokens` or `ERROR`.
    pub expected: String,
}

pub fn load_cases() -> Vec<Case> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/timeline_golden.jsonl");
    std::fs::read_to_string(path)
        .expect("fixture present")
        .lines()
        .map(|l| serde_json::from_str(l).expect("fixture line parses"))
        .collect()
}

fn render(tokens: &[Token], vocab: &Vocab) -> String {
    tokens
        .iter()
        .map(|t| match t.kind {
            TokenKind::Age => format!("AGE:{}", vocab.age_of(t.id).unwrap()),
            _ => format!("CONCEPT:{}", vocab.entry(t.id).value),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Filters and builds `case`, rendered in the fixture's notation.
pub fn run_case(case: &Case) -> String {
    let codes: Vec<String> = case
        .vocab
        .clone()
        .unwrap_or_else(|| (1..=20).map(|i| format!("C{i}")).chain((1..=60).map(|i| format!("K{i:02}"))).collect());
    let vocab = Vocab::from_parts(codes.into_iter().map(|c| (c, 1)).collect(), &[0; 121]).unwrap();
    let mut record = PatientRecord { patient_id: case.case.clone(), events: case.events.clone() };
    record.renumber();
    let options = TimelineOptions {
        min_confirmations: case.min_confirmations,
        max_tokens: case.max_tokens,
        min_tokens: case.min_tokens,
    };
    match build_timeline(&filter_events(&record), &vocab, &options) {
        Ok(TimelineOutcome::Built(t)) => format!("BUILT|{}", render(&t.tokens, &vocab)),
        Ok(TimelineOutcome::Skipped { tokens, .. }) => format!("SKIP|{}", render(&tokens, &vocab)),
        Err(_) => "ERROR".into(),
    }
}

/// Names and outputs of every case whose output differs from the fixture.
pub fn mismatches() -> Vec<String> {
    load_cases()
        .iter()
        .filter_map(|c| {
            let got = run_case(c);
            (got != c.expected).then(|| format!("{}: got {got:?}, expected {:?}", c.case, c.expected))
        })
        .collect()
}
