//! Builds timelines from hand-written records: negations dropped, a concept
//! needs two mentions, AGE tokens only when the age moves.

use medseq::timeline::{build_timeline, build_vocab, filter_events, ConceptEvent, PatientRecord, TimelineOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut record = PatientRecord::from_pairs(
        "demo",
        &[(40, "C1"), (40, "C2"), (40, "C1"), (41, "C3"), (42, "C2"), (43, "C3"), (43, "C4"), (44, "C4"), (44, "C5")],
    );
    record.events.push(ConceptEvent { negated: true, ..ConceptEvent::clean("C5", 45) });

    let filtered = filter_events(&record);
    let options = TimelineOptions { min_tokens: 1, ..TimelineOptions::default() };
    let vocab = build_vocab(std::slice::from_ref(&filtered), 1, options.min_confirmations)?;
    let outcome = build_timeline(&filtered, &vocab, &options)?;
    let rendered: Vec<String> = outcome
        .tokens()
        .iter()
        .map(|t| format!("{}:{}", t.kind, vocab.entry(t.id).value))
        .collect();
    println!("{}", rendered.join(" "));
    Ok(())
}
