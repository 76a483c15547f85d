use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use super::{Ffn, ModelConfig, ModelError, Positional};
use crate::numerics::{ParamSet, Tensor};
use crate::rng::Rng;
use crate::timeline::Vocab;

/// L2 norm of every freshly initialized token-embedding row.
pub const EMBEDDING_ROW_NORM: f64 = 0.05;

fn gaussian(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<f32> {
    Tensor::randn(shape, std, rng)
}

/// Gaussian rows rescaled to a common L2 norm, so that tied output logits
/// start nearly uniform.
fn equal_norm_rows(rows: usize, cols: usize, norm: f64, rng: &mut Rng) -> Tensor<f32> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        let len = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        data.extend(row.iter().map(|x| (x * norm / len) as f32));
    }
    Tensor::new(vec![rows, cols], data).expect("shape and data agree")
}

/// Parameter names of layer `l`.
pub fn layer_prefix(l: usize) -> String {
    format!("layer{l}")
}

/// Random initial parameters in checkpoint order.
///
/// Token embeddings have equal-norm rows; linear maps use std `1/sqrt(fan_in)`
/// with sublayer output maps further scaled by `1/sqrt(2 * n_layers)`; biases
/// are zero, norm gains one, ReZero gates zero and head mixers identity.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet<f32>, ModelError> {
    config.validate()?;
    let mut rng = crate::rng::seeded(seed);
    let (d, f, h) = (config.d_model, config.d_ff, config.n_heads);
    let small = EMBEDDING_ROW_NORM / (d as f64).sqrt();
    let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let mut p = ParamSet::new();
    p.push("tok_emb", equal_norm_rows(config.vocab_size, d, EMBEDDING_ROW_NORM, &mut rng), false);
    p.push("lm_bias", Tensor::zeros(&[config.vocab_size]), false);
    if config.positional == Positional::Learned {
        p.push("pos_emb", gaussian(&[config.max_seq, d], small, &mut rng), false);
    }
    if config.memory_tokens > 0 {
        p.push("memory", gaussian(&[config.memory_tokens, d], small, &mut rng), false);
    }
    let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    for l in 0..config.n_layers {
        let pre = layer_prefix(l);
        if !config.rezero {
            p.push(format!("{pre}.ln1.gain"), Tensor::ones(&[d]), false);
            p.push(format!("{pre}.ln1.bias"), Tensor::zeros(&[d]), false);
        }
        p.push(format!("{pre}.attn.w_qkv"), gaussian(&[d, 3 * d], lin(d), &mut rng), true);
        p.push(format!("{pre}.attn.b_qkv"), Tensor::zeros(&[3 * d]), false);
        if config.talking_heads {
            p.push(format!("{pre}.attn.mix_pre"), Tensor::eye(h), false);
            p.push(format!("{pre}.attn.mix_post"), Tensor::eye(h), false);
        }
        p.push(format!("{pre}.attn.w_out"), gaussian(&[d, d], lin(d) * out_scale, &mut rng), true);
        p.push(format!("{pre}.attn.b_out"), Tensor::zeros(&[d]), false);
        if config.rezero {
            p.push(format!("{pre}.attn.gate"), Tensor::zeros(&[1]), false);
        } else {
            p.push(format!("{pre}.ln2.gain"), Tensor::ones(&[d]), false);
            p.push(format!("{pre}.ln2.bias"), Tensor::zeros(&[d]), false);
        }
        if config.ffn == Ffn::Geglu {
            p.push(format!("{pre}.ffn.w_gate"), gaussian(&[d, f], lin(d), &mut rng), true);
            p.push(format!("{pre}.ffn.b_gate"), Tensor::zeros(&[f]), false);
        }
        p.push(format!("{pre}.ffn.w_in"), gaussian(&[d, f], lin(d), &mut rng), true);
        p.push(format!("{pre}.ffn.b_in"), Tensor::zeros(&[f]), false);
        p.push(format!("{pre}.ffn.w_out"), gaussian(&[f, d], lin(f) * out_scale, &mut rng), true);
        p.push(format!("{pre}.ffn.b_out"), Tensor::zeros(&[d]), false);
        if config.rezero {
            p.push(format!("{pre}.ffn.gate"), Tensor::zeros(&[1]), false);
        }
    }
    if !config.rezero {
        p.push("final_ln.gain", Tensor::ones(&[d]), false);
        p.push("final_ln.bias", Tensor::zeros(&[d]), false);
    }
    Ok(p)
}

/// Parses a tab-separated embedding file: concept code, then `dim` floats.
pub fn parse_embedding_file(text: &str, dim: usize) -> Result<Vec<(String, Vec<f32>)>, ModelError> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let code = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|s| s.trim().parse::<f32>())
            .collect::<Result<Vec<f32>, _>>()
            .map_err(|e| ModelError::Embeddings(format!("line {}: {e}", n + 1)))?;
        if values.len() != dim {
            return Err(ModelError::Embeddings(format!(
                "line {}: expected {dim} values for {code}, found {}",
                n + 1,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Embeddings(format!("line {}: non-finite value", n + 1)));
        }
        rows.push((code, values));
    }
    Ok(rows)
}

/// Copies rows for concepts present in `vocab` into `table` (`[V, d]`) and
/// returns how many rows were replaced.
pub fn apply_embeddings(table: &mut Tensor<f32>, rows: &[(String, Vec<f32>)], vocab: &Vocab) -> usize {
    let d = table.shape()[1];
    let mut matched = 0;
    for (code, values) in rows {
        if let Some(id) = vocab.concept_id(code) {
            table.data_mut()[id * d..(id + 1) * d].copy_from_slice(values);
            matched += 1;
        }
    }
    matched
}

/// Reads `path` and copies its rows into `table`; returns the matched count.
pub fn load_pretrained_embeddings(path: &Path, vocab: &Vocab, table: &mut Tensor<f32>) -> Result<usize, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::Embeddings(format!("{}: {e}", path.display())))?;
    let rows = parse_embedding_file(&text, table.shape()[1])?;
    Ok(apply_embeddings(table, &rows, vocab))
}
