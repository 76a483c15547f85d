//! Multiple-choice differential ranking and gradient saliency.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{next_disorder_distribution, Batch, ForwardOptions, ModelError, SequenceModel, Transformer};
use crate::numerics::{NumericsError, Tape, Tensor};
use crate::timeline::{TokenKind, TokenLine, Vocab};

pub const MAX_OPTIONS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("empty context")]
    EmptyContext,
    #[error("option {0} is not a concept in the vocabulary")]
    UnknownOption(String),
    #[error("option {0} is listed twice")]
    DuplicateOption(String),
    #[error("{0} options given; between 1 and 10 are allowed")]
    OptionCount(usize),
    #[error("unknown {kind} token {value}")]
    UnknownToken { kind: TokenKind, value: String },
    #[error("target {0} is not a concept")]
    NotAConcept(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One line of an MCQ cases file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqCase {
    pub history: Vec<TokenLine>,
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl McqCase {
    /// Token ids of the history and the options.
    pub fn resolve(&self, vocab: &Vocab) -> Result<(Vec<usize>, Vec<usize>), ProbeError> {
        let history = self
            .history
            .iter()
            .map(|t| {
                vocab.lookup(t.kind, &t.value).ok_or_else(|| ProbeError::UnknownToken { kind: t.kind, value: t.value.clone() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let options = self
            .options
            .iter()
            .map(|o| vocab.concept_id(o).ok_or_else(|| ProbeError::UnknownOption(o.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((history, options))
    }
}

/// A published qualitative case (history, options, reported normalized
/// probabilities). Its concepts are not in any synthetic vocabulary; it exists
/// to exercise report formatting.
pub struct ReferenceMcq {
    pub history: &'static [&'static str],
    pub options: &'static [(&'static str, f64)],
}

pub const REFERENCE_MCQ: ReferenceMcq = ReferenceMcq {
    history: &["40", "Ketoacidosis in Diabetes Mellitus", "Diabetes Mellitus", "Hypertension"],
    options: &[("Type 1 Diabetes Mellitus", 0.92), ("Type 2 Diabetes Mellitus", 0.08)],
};

/// Normalizes raw option probabilities to sum 1 and sorts them descending,
/// ties by ascending id.
pub fn normalize_options(raw: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let total: f64 = raw.iter().map(|(_, p)| p).sum();
    let mut out: Vec<(usize, f64)> =
        raw.iter().map(|&(id, p)| (id, if total > 0.0 { p / total } else { 1.0 / raw.len() as f64 })).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// Next-disorder probabilities of `options` after `history`, renormalized over
/// the options.
pub fn mcq_rank<M: SequenceModel + ?Sized>(
    model: &M,
    n_concepts: usize,
    history: &[usize],
    options: &[usize],
) -> Result<Vec<(usize, f64)>, ProbeError> {
    if history.is_empty() {
        return Err(ProbeError::EmptyContext);
    }
    if options.is_empty() || options.len() > MAX_OPTIONS {
        return Err(ProbeError::OptionCount(options.len()));
    }
    for (i, &o) in options.iter().enumerate() {
        if o >= n_concepts {
            return Err(ProbeError::UnknownOption(o.to_string()));
        }
        if options[..i].contains(&o) {
            return Err(ProbeError::DuplicateOption(o.to_string()));
        }
    }
    let p = next_disorder_distribution(model, n_concepts, history)?;
    Ok(normalize_options(&options.iter().map(|&o| (o, p[o])).collect::<Vec<_>>()))
}

/// Text rendering of ranked options, one `label  probability` line each.
pub fn format_mcq(ranked: &[(String, f64)]) -> String {
    let width = ranked.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    ranked.iter().map(|(l, p)| format!("{l:<width$}  {p:.3}\n")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyTarget {
    Concept(usize),
    Argmax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMode {
    /// L2 norm of the gradient at each input embedding.
    #[default]
    Gradient,
    /// Absolute dot product of that gradient with the token embedding.
    GradientTimesInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyResult {
    pub tokens: Vec<usize>,
    /// Non-negative, summing to 1; uniform when every raw score is zero.
    pub weights: Vec<f64>,
    pub raw: Vec<f64>,
    pub target: usize,
    pub log_prob: f64,
}

/// Scores divided by their sum; uniform when they are all zero.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

fn resolve_target(model: &Transformer, n_concepts: usize, context: &[usize], target: SaliencyTarget) -> Result<usize, ProbeError> {
    match target {
        SaliencyTarget::Concept(c) if c < n_concepts => Ok(c),
        SaliencyTarget::Concept(c) => Err(ProbeError::NotAConcept(c)),
        SaliencyTarget::Argmax => {
            let p = next_disorder_distribution(model, n_concepts, context)?;
            Ok((0..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best }))
        }
    }
}

/// Log-probability of `target` at the last position, restricted to concepts,
/// with an optional offset `[1, len, d_model]` added to the input embeddings.
/// Evaluated in f64.
pub fn target_log_prob(
    model: &Transformer,
    n_concepts: usize,
    context: &[usize],
    target: usize,
    offset: Option<Tensor<f64>>,
) -> Result<f64, ProbeError> {
    let (tape, _, loss) = log_prob_graph(model, n_concepts, context, target, offset)?;
    Ok(-tape.value(loss).item())
}

type Graph = (Tape<f64>, Option<crate::numerics::NodeId>, crate::numerics::NodeId);

fn log_prob_graph(
    model: &Transformer,
    n_concepts: usize,
    context: &[usize],
    target: usize,
    offset: Option<Tensor<f64>>,
) -> Result<Graph, ProbeError> {
    if context.is_empty() {
        return Err(ProbeError::EmptyContext);
    }
    let batch = Batch::single(context)?;
    let params = model.params.cast::<f64>();
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape, false)?;
    let out = model.run(&params, &nodes, &mut tape, &batch, ForwardOptions { input_offset: offset, dropout_rng: None })?;
    let last = tape.slice(out.logits, 1, context.len() - 1, 1)?;
    let cols: Vec<bool> = (0..model.config.vocab_size).map(|c| c < n_concepts).collect();
    let nll = tape.cross_entropy(last, &[target], &[1.0], 1.0, Some(&cols))?;
    Ok((tape, out.input_offset, nll))
}

/// Gradient saliency of the target's next-disorder log-probability with
/// respect to each input token embedding.
pub fn saliency(
    model: &Transformer,
    n_concepts: usize,
    context: &[usize],
    target: SaliencyTarget,
    mode: SaliencyMode,
) -> Result<SaliencyResult, ProbeError> {
    if context.is_empty() {
        return Err(ProbeError::EmptyContext);
    }
    let target = resolve_target(model, n_concepts, context, target)?;
    let d = model.config.d_model;
    let zero = Tensor::zeros(&[1, context.len(), d]);
    let (tape, offset, nll) = log_prob_graph(model, n_concepts, context, target, Some(zero))?;
    let offset = offset.expect("offset was supplied");
    let grads = tape.backward(nll)?;
    let g = grads.get(offset);
    let table = model.params.by_name("tok_emb").expect("token table exists");
    let raw: Vec<f64> = g
        .data()
        .chunks_exact(d)
        .zip(context)
        .map(|(row, &id)| match mode {
            SaliencyMode::Gradient => row.iter().map(|x| x * x).sum::<f64>().sqrt(),
            SaliencyMode::GradientTimesInput => row.iter().zip(table.row(id)).map(|(x, &e)| x * e as f64).sum::<f64>().abs(),
        })
        .collect();
    Ok(SaliencyResult { tokens: context.to_vec(), weights: normalize_scores(&raw), raw, target, log_prob: -tape.value(nll).item() })
}

/// Mean absolute change of the target log-probability when the embedding of
/// token `index` is moved by `eps` along `directions` random unit vectors.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_effect(
    model: &Transformer,
    n_concepts: usize,
    context: &[usize],
    target: usize,
    index: usize,
    eps: f64,
    directions: usize,
    seed: u64,
) -> Result<f64, ProbeError> {
    let d = model.config.d_model;
    let base = target_log_prob(model, n_concepts, context, target, None)?;
    let mut rng = crate::rng::seeded(seed);
    let mut total = 0.0;
    for _ in 0..directions {
        let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut offset = vec![0.0; context.len() * d];
        offset[index * d..(index + 1) * d].iter_mut().zip(&u).for_each(|(o, x)| *o = eps * x / norm);
        let offset = Tensor::new(vec![1, context.len(), d], offset)?;
        total += (target_log_prob(model, n_concepts, context, target, Some(offset))? - base).abs();
    }
    Ok(total / directions.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Transformer {
        let mut c = ModelConfig::small(30, 2, 2, 8);
        c.max_seq = 10;
        Transformer::new_random(c, 9).unwrap()
    }

    #[test]
    fn normalization_arithmetic() {
        let r = normalize_options(&[(4, 0.01), (2, 0.03)]);
        assert_eq!(r[0].0, 2);
        assert!((r[0].1 - 0.75).abs() < 1e-12 && (r[1].1 - 0.25).abs() < 1e-12);
        assert_eq!(normalize_options(&[(7, 0.2)]), vec![(7, 1.0)]);
        let tie = normalize_options(&[(5, 0.1), (3, 0.1)]);
        assert_eq!((tie[0].0, tie[1].0), (3, 5));
    }

    #[test]
    fn mcq_sums_to_one_and_rejects_bad_options() {
        let m = tiny();
        let r = mcq_rank(&m, 20, &[25, 1, 2], &[3, 4, 5]).unwrap();
        assert!((r.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(matches!(mcq_rank(&m, 20, &[25, 1], &[3, 22]), Err(ProbeError::UnknownOption(_))));
        assert!(matches!(mcq_rank(&m, 20, &[25, 1], &[3, 3]), Err(ProbeError::DuplicateOption(_))));
        assert!(matches!(mcq_rank(&m, 20, &[], &[3]), Err(ProbeError::EmptyContext)));
    }

    #[test]
    fn single_token_saliency_is_one() {
        let s = saliency(&tiny(), 20, &[25], SaliencyTarget::Concept(3), SaliencyMode::Gradient).unwrap();
        assert_eq!(s.weights, vec![1.0]);
    }

    #[test]
    fn zero_gradient_token_gets_zero_weight() {
        assert_eq!(normalize_scores(&[0.0, 2.0, 2.0]), vec![0.0, 0.5, 0.5]);
        assert_eq!(normalize_scores(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn saliency_weights_normalize_and_target_checked() {
        let m = tiny();
        for mode in [SaliencyMode::Gradient, SaliencyMode::GradientTimesInput] {
            let s = saliency(&m, 20, &[25, 1, 2, 26, 3], SaliencyTarget::Argmax, mode).unwrap();
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(s.weights.iter().all(|&w| w >= 0.0));
            assert!(s.target < 20);
        }
        assert!(matches!(
            saliency(&m, 20, &[25, 1], SaliencyTarget::Concept(25), SaliencyMode::Gradient),
            Err(ProbeError::NotAConcept(25))
        ));
    }

    #[test]
    fn log_prob_matches_distribution() {
        let m = tiny();
        let p = next_disorder_distribution(&m, 20, &[25, 1, 2]).unwrap();
        let lp = target_log_prob(&m, 20, &[25, 1, 2], 7, None).unwrap();
        assert!((lp.exp() - p[7]).abs() < 1e-6);
    }
}
