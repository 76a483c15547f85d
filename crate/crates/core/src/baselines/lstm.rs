use serde::{Deserialize, Serialize};

use crate::model::{Batch, Family, ModelError, SequenceModel};
use crate::numerics::{NodeId, ParamSet, Real, Tape, Tensor};
use crate::rng::Rng;
use crate::training::{check_layout, Checkpoint, TrainConfig, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    /// Output head shares the embedding table; needs `embed_dim == hidden_size`.
    pub tied: bool,
    pub max_seq: usize,
}

impl LstmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size, embed_dim: 300, hidden_size: 300, n_layers: 1, tied: true, max_seq: 50 }
    }

    pub fn small(vocab_size: usize, width: usize) -> Self {
        Self { embed_dim: width, hidden_size: width, ..Self::new(vocab_size) }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_size == 0 || self.n_layers == 0 || self.max_seq == 0 {
            return Err(ModelError::Config("LSTM sizes must be positive".into()));
        }
        if self.tied && self.embed_dim != self.hidden_size {
            return Err(ModelError::Config(format!(
                "tied head needs embed_dim {} == hidden_size {}",
                self.embed_dim, self.hidden_size
            )));
        }
        Ok(())
    }
}

/// Recurrent language model: embedding, stacked LSTM layers, linear head.
///
/// Gate columns are ordered input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub config: LstmConfig,
    pub params: ParamSet<f32>,
}

fn lstm_params(config: &LstmConfig, seed: u64) -> Result<ParamSet<f32>, ModelError> {
    config.validate()?;
    let mut rng = crate::rng::seeded(seed);
    let (v, e, h) = (config.vocab_size, config.embed_dim, config.hidden_size);
    let mut p = ParamSet::new();
    p.push("tok_emb", Tensor::randn(&[v, e], 0.05, &mut rng), false);
    for l in 0..config.n_layers {
        let input = if l == 0 { e } else { h };
        let std = 1.0 / (h as f64).sqrt();
        p.push(format!("layer{l}.w_ih"), Tensor::randn(&[input, 4 * h], std, &mut rng), true);
        p.push(format!("layer{l}.w_hh"), Tensor::randn(&[h, 4 * h], std, &mut rng), true);
        let mut bias = Tensor::zeros(&[4 * h]);
        bias.data_mut()[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
        p.push(format!("layer{l}.bias"), bias, false);
    }
    if !config.tied {
        p.push("head", Tensor::randn(&[h, v], 1.0 / (h as f64).sqrt(), &mut rng), true);
    }
    p.push("lm_bias", Tensor::zeros(&[v]), false);
    Ok(p)
}

/// Concatenates `parts` along `axis` by pairwise rounds.
fn concat_all<T: Real>(tape: &mut Tape<T>, mut parts: Vec<NodeId>, axis: usize) -> Result<NodeId, ModelError> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        for pair in parts.chunks(2) {
            next.push(match *pair {
                [a, b] => tape.concat(a, b, axis)?,
                [a] => a,
                _ => unreachable!(),
            });
        }
        parts = next;
    }
    parts.pop().ok_or(ModelError::EmptyContext)
}

impl Lstm {
    pub fn new_random(config: LstmConfig, seed: u64) -> Result<Self, ModelError> {
        let params = lstm_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn to_checkpoint(&self, train: Option<TrainConfig>, step: u64, val_loss: Option<f64>, vocab_hash: &str) -> Checkpoint {
        Checkpoint::new(Family::Lstm, self.config_json(), train, step, val_loss, vocab_hash.to_string(), self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let config: LstmConfig = ckpt.model_config(Family::Lstm)?;
        let layout = lstm_params(&config, 0).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        check_layout(&ckpt.params, &layout)?;
        Ok(Self { config, params: ckpt.params.clone() })
    }
}

impl SequenceModel for Lstm {
    fn family(&self) -> Family {
        Family::Lstm
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
        _dropout: Option<&mut Rng>,
    ) -> Result<NodeId, ModelError> {
        let c = &self.config;
        batch.check(c.vocab_size, c.max_seq)?;
        let get = |name: &str| {
            params
                .position(name)
                .map(|i| nodes[i])
                .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))
        };
        let (b, s, h) = (batch.batch, batch.seq, c.hidden_size);
        let emb = get("tok_emb")?;
        let mut x = tape.embedding(emb, &batch.ids, &[b, s])?;
        for l in 0..c.n_layers {
            let (w_ih, w_hh, bias) = (get(&format!("layer{l}.w_ih"))?, get(&format!("layer{l}.w_hh"))?, get(&format!("layer{l}.bias"))?);
            let xw = tape.matmul(x, w_ih)?;
            let xw = tape.add(xw, bias)?;
            let mut hidden = tape.constant(Tensor::zeros(&[b, h]))?;
            let mut cell = tape.constant(Tensor::zeros(&[b, h]))?;
            let mut outputs = Vec::with_capacity(s);
            for t in 0..s {
                let xt = tape.slice(xw, 1, t, 1)?;
                let xt = tape.reshape(xt, &[b, 4 * h])?;
                let hw = tape.matmul(hidden, w_hh)?;
                let gates = tape.add(xt, hw)?;
                let i = tape.slice(gates, 1, 0, h)?;
                let i = tape.sigmoid(i)?;
                let f = tape.slice(gates, 1, h, h)?;
                let f = tape.sigmoid(f)?;
                let o = tape.slice(gates, 1, 2 * h, h)?;
                let o = tape.sigmoid(o)?;
                let g = tape.slice(gates, 1, 3 * h, h)?;
                let g = tape.tanh(g)?;
                let kept = tape.mul(f, cell)?;
                let written = tape.mul(i, g)?;
                cell = tape.add(kept, written)?;
                let squashed = tape.tanh(cell)?;
                hidden = tape.mul(o, squashed)?;
                outputs.push(tape.reshape(hidden, &[b, 1, h])?);
            }
            x = concat_all(tape, outputs, 1)?;
        }
        let logits = if c.tied { tape.matmul_nt(x, emb)? } else { tape.matmul(x, get("head")?)? };
        Ok(tape.add(logits, get("lm_bias")?)?)
    }
}
