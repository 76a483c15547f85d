//! Decoder-only causal transformer over timeline tokens.
//!
//! The base network is a pre-norm decoder with learned positions, a GELU
//! feed-forward block and an output head tied to the token embeddings (plus a
//! free bias). Memory tokens, residual attention, ReZero, talking heads,
//! sparse top-k attention, rotary positions, GEGLU and pretrained embedding
//! init are independent switches on [`ModelConfig`].

mod config;
mod forward;
mod init;

use serde::{Deserialize, Serialize};

pub use config::{Ffn, ModelConfig, Positional, Variant};
pub use forward::{apply_rotary, attention_mask, forward, geglu, topk_mask, ForwardOptions, ForwardOutput, ROTARY_BASE};
pub use init::{
    apply_embeddings, init_params, layer_prefix, load_pretrained_embeddings, parse_embedding_file, EMBEDDING_ROW_NORM,
};

use crate::numerics::{NodeId, NumericsError, ParamSet, Real, Tape, Tensor};
use crate::rng::Rng;
use crate::timeline::Vocab;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    UnknownToken { id: usize, vocab_size: usize },
    #[error("sequence of length {len} exceeds max_seq {max}")]
    Overlength { len: usize, max: usize },
    #[error("empty context")]
    EmptyContext,
    #[error("embedding file: {0}")]
    Embeddings(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Model family tag stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Transformer,
    Lstm,
    Boc,
}

/// Right-padded token batch. Padding uses id 0 with `mask == false`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn new(seqs: &[&[usize]]) -> Result<Self, ModelError> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(ModelError::EmptyContext);
        }
        let seq = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(0, seq - s.len()));
            mask.extend(std::iter::repeat_n(true, s.len()));
            mask.extend(std::iter::repeat_n(false, seq - s.len()));
        }
        Ok(Self { ids, mask, batch: seqs.len(), seq })
    }

    pub fn single(seq: &[usize]) -> Result<Self, ModelError> {
        Self::new(&[seq])
    }

    pub fn len_of(&self, b: usize) -> usize {
        self.mask[b * self.seq..(b + 1) * self.seq].iter().filter(|&&m| m).count()
    }

    /// Rejects overlong batches and unknown ids at real positions.
    pub fn check(&self, vocab_size: usize, max_seq: usize) -> Result<(), ModelError> {
        if self.seq > max_seq {
            return Err(ModelError::Overlength { len: self.seq, max: max_seq });
        }
        match self.ids.iter().zip(&self.mask).find(|(&id, &m)| m && id >= vocab_size) {
            Some((&id, _)) => Err(ModelError::UnknownToken { id, vocab_size }),
            None => Ok(()),
        }
    }
}

/// A next-token model over the timeline vocabulary.
pub trait SequenceModel {
    fn family(&self) -> Family;
    fn params(&self) -> &ParamSet<f32>;
    fn params_mut(&mut self) -> &mut ParamSet<f32>;
    fn vocab_size(&self) -> usize;
    fn max_seq(&self) -> usize;
    fn config_json(&self) -> serde_json::Value;

    /// Logits node `[batch, seq, vocab]` with `params` registered as `nodes`.
    fn logits_node<T: Real>(
        &self,
        params: &ParamSet<T>,
        nodes: &[NodeId],
        tape: &mut Tape<T>,
        batch: &Batch,
        dropout: Option<&mut Rng>,
    ) -> Result<NodeId, ModelError>;

    /// Inference logits `[batch, seq, vocab]`.
    fn logits(&self, batch: &Batch) -> Result<Tensor<f32>, ModelError> {
        let mut tape = Tape::new();
        let nodes = self.params().register(&mut tape, false)?;
        let out = self.logits_node(self.params(), &nodes, &mut tape, batch, None)?;
        Ok(tape.value(out).clone())
    }
}

/// Softmax over the first `n_concepts` logits (the disorder sub-vocabulary).
pub fn concept_softmax(logits: &[f32], n_concepts: usize) -> Vec<f64> {
    let row = &logits[..n_concepts];
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let exps: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Next-disorder distribution after `context`: the last position's logits
/// restricted to CONCEPT entries (ids `0..n_concepts`) and normalized.
pub fn next_disorder_distribution<M: SequenceModel + ?Sized>(
    model: &M,
    n_concepts: usize,
    context: &[usize],
) -> Result<Vec<f64>, ModelError> {
    if context.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    if n_concepts == 0 || n_concepts > model.vocab_size() {
        return Err(ModelError::Config(format!("{n_concepts} concepts for a vocabulary of {}", model.vocab_size())));
    }
    let logits = model.logits(&Batch::single(context)?)?;
    let v = model.vocab_size();
    let last = &logits.data()[(context.len() - 1) * v..context.len() * v];
    Ok(concept_softmax(last, n_concepts))
}

/// Transformer configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

impl Transformer {
    /// Random init; copies pretrained rows when the config names an embedding
    /// file. Returns the model and the number of rows copied.
    pub fn init(config: ModelConfig, seed: u64, vocab: Option<&Vocab>) -> Result<(Self, usize), ModelError> {
        let mut params = init_params(&config, seed)?;
        let mut matched = 0;
        if let Some(path) = &config.init_embeddings {
            let vocab = vocab.ok_or_else(|| ModelError::Config("pretrained init needs the vocabulary".into()))?;
            let table = params.by_name_mut("tok_emb").expect("token table exists");
            matched = load_pretrained_embeddings(std::path::Path::new(path), vocab, table)?;
        }
        Ok((Self { config, params }, matched))
    }

    pub fn new_random(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Full forward pass with options (input offsets, dropout).
    pub fn run<T: Real>(
        &self,
        params: &ParamSet<T>,
        nodes: &[NodeId],
        tape: &mut Tape<T>,
        batch: &Batch,
        options: ForwardOptions<'_, T>,
    ) -> Result<ForwardOutput, ModelError> {
        forward(&self.config, params, nodes, tape, batch, options)
    }
}

impl SequenceModel for Transformer {
    fn family(&self) -> Family {
        Family::Transformer
    }

    fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq(&self) -> usize {
        self.config.max_seq
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    fn logits_node<T: Real>(
        &self,
        params: &ParamSet<T>,
        nodes: &[NodeId],
        tape: &mut Tape<T>,
        batch: &Batch,
        dropout: Option<&mut Rng>,
    ) -> Result<NodeId, ModelError> {
        let options = ForwardOptions { input_offset: None, dropout_rng: dropout };
        Ok(forward(&self.config, params, nodes, tape, batch, options)?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(cfg: impl FnOnce(&mut ModelConfig)) -> Transformer {
        let mut c = ModelConfig::small(40, 2, 2, 8);
        c.max_seq = 12;
        cfg(&mut c);
        Transformer::new_random(c, 5).unwrap()
    }

    #[test]
    fn batch_padding_and_errors() {
        let b = Batch::new(&[&[3, 4, 5], &[6]]).unwrap();
        assert_eq!(b.ids, vec![3, 4, 5, 6, 0, 0]);
        assert_eq!(b.mask, vec![true, true, true, true, false, false]);
        assert_eq!(b.len_of(1), 1);
        assert!(matches!(b.check(5, 10), Err(ModelError::UnknownToken { id: 5, .. })));
        assert!(matches!(b.check(10, 2), Err(ModelError::Overlength { len: 3, max: 2 })));
        assert!(matches!(Batch::new(&[&[]]), Err(ModelError::EmptyContext)));
    }

    #[test]
    fn output_aligns_with_input_for_memory_variant() {
        let m = tiny(|c| c.memory_tokens = 3);
        let out = m.logits(&Batch::single(&[1, 2, 3, 4]).unwrap()).unwrap();
        assert_eq!(out.shape(), &[1, 4, 40]);
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let m = tiny(|_| {});
        let alone = m.logits(&Batch::single(&[7, 8]).unwrap()).unwrap();
        let padded = m.logits(&Batch::new(&[&[7, 8], &[1, 2, 3, 4]]).unwrap()).unwrap();
        assert_eq!(&padded.data()[..2 * 40], alone.data());
    }

    #[test]
    fn disorder_distribution_is_normalized() {
        let m = tiny(|_| {});
        let p = next_disorder_distribution(&m, 25, &[30, 1, 2]).unwrap();
        assert_eq!(p.len(), 25);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(matches!(next_disorder_distribution(&m, 25, &[]), Err(ModelError::EmptyContext)));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = tiny(|c| {
            c.memory_tokens = 2;
            c.talking_heads = true;
            c.sparse_topk = 2;
        });
        let batch = Batch::new(&[&[1, 2, 3, 4, 5], &[6, 7]]).unwrap();
        let mut tape = Tape::new();
        let nodes = m.params.register(&mut tape, false).unwrap();
        let out = m.run(&m.params, &nodes, &mut tape, &batch, ForwardOptions::default()).unwrap();
        for a in out.attention {
            for row in tape.value(a).data().chunks(7) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "{s}");
            }
        }
    }
}
