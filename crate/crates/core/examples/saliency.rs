//! Gradient saliency of a forecast over its context, both plain gradient norm
//! and gradient times input, with a perturbation cross-check.

use medseq::model::{ModelConfig, Transformer};
use medseq::probe::{perturbation_effect, saliency, SaliencyMode, SaliencyTarget};
use medseq::synthcohort::{generate_cohort, GeneratorConfig};
use medseq::timeline::{prepare_corpus, TimelineOptions};
use medseq::training::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (records, _) = generate_cohort(&GeneratorConfig { n_patients: 800, ..GeneratorConfig::default() })?;
    let (vocab, timelines) = prepare_corpus(&records, 1, &TimelineOptions::default())?;
    let seqs: Vec<Vec<usize>> = timelines.iter().map(|t| t.ids()).collect();
    let tc = TrainConfig { learning_rate: 3e-3, weight_decay: 0.01, max_steps: 400, warmup_steps: 30, ..TrainConfig::default() };
    let model = train(Transformer::new_random(ModelConfig::small(vocab.len(), 2, 2, 32), 0)?, &tc, &seqs, &[], &vocab.hash(), None)?.last;

    let context = &timelines[1].ids()[..8];
    let n = vocab.n_concepts();
    for mode in [SaliencyMode::Gradient, SaliencyMode::GradientTimesInput] {
        let s = saliency(&model, n, context, SaliencyTarget::Argmax, mode)?;
        println!("{mode:?} for {} (log p {:.3}):", vocab.entry(s.target).value, s.log_prob);
        for (&id, w) in context.iter().zip(&s.weights) {
            println!("  {:<8} {:<6} {w:.3}", vocab.entry(id).kind.to_string(), vocab.entry(id).value);
        }
    }

    let s = saliency(&model, n, context, SaliencyTarget::Argmax, SaliencyMode::Gradient)?;
    let order = |better: fn(f64, f64) -> bool| (0..s.weights.len()).fold(0, |b, i| if better(s.weights[i], s.weights[b]) { i } else { b });
    let (hi, lo) = (order(|a, b| a > b), order(|a, b| a < b));
    let effect = |i| perturbation_effect(&model, n, context, s.target, i, 1e-4, 10, 0);
    println!("nudging token {hi} moves log p by {:.2e}, token {lo} by {:.2e}", effect(hi)?, effect(lo)?);
    Ok(())
}
