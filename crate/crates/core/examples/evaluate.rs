//! Scores the generator oracle and the bag-of-concepts baseline on a held-out
//! split and prints the precision and by-position report.

use medseq::baselines::{boc_dataset, train_boc, BocConfig, BocForecaster};
use medseq::evalmetrics::{evaluate, EvalReport, ReportContext};
use medseq::synthcohort::{generate_cohort, GeneratorConfig, OracleForecaster};
use medseq::timeline::{prepare_corpus, split_cohort, TimelineOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (records, generator) = generate_cohort(&GeneratorConfig { n_patients: 2000, ..GeneratorConfig::default() })?;
    let (vocab, timelines) = prepare_corpus(&records, 1, &TimelineOptions::default())?;
    let ids: Vec<String> = timelines.iter().map(|t| t.patient_id.clone()).collect();
    let split = split_cohort(&ids, 0)?;
    let part = split.partition(&timelines);

    let (x, y) = boc_dataset(&part.train, &vocab);
    let boc = train_boc(&x, &y, &BocConfig::default())?;
    let rows = vec![
        evaluate(&OracleForecaster { model: &generator, vocab: &vocab }, &part.test)?,
        evaluate(&BocForecaster { model: &boc, vocab: &vocab }, &part.test)?,
    ];
    let report = EvalReport::new(ReportContext { seed: 0, split_hash: split.hash(), vocab_hash: vocab.hash() }, rows)?;
    print!("{}", report.to_text());
    Ok(())
}
