use super::{Batch, Ffn, ModelConfig, ModelError, Positional};
use crate::numerics::{NodeId, ParamSet, Real, Tape, Tensor};
use crate::rng::Rng;

pub const ROTARY_BASE: f64 = 10000.0;

/// Extra inputs to [`forward`].
pub struct ForwardOptions<'a, T: Real> {
    /// Added to the token embeddings (`[batch, seq, d_model]`) as a trainable
    /// leaf, so its gradient is the gradient with respect to each input
    /// embedding vector.
    pub input_offset: Option<Tensor<T>>,
    /// Enables dropout at the configured rate.
    pub dropout_rng: Option<&'a mut Rng>,
}

impl<T: Real> Default for ForwardOptions<'_, T> {
    fn default() -> Self {
        Self { input_offset: None, dropout_rng: None }
    }
}

pub struct ForwardOutput {
    /// `[batch, seq, vocab]`; memory positions carry no logits.
    pub logits: NodeId,
    pub input_offset: Option<NodeId>,
    /// Post-softmax (and post-mixing) attention per layer, `[batch, heads, T, T]`
    /// with `T = memory_tokens + seq`.
    pub attention: Vec<NodeId>,
}

/// Resolves parameter names to tape nodes.
struct Bound<'a, T: Real> {
    params: &'a ParamSet<T>,
    nodes: &'a [NodeId],
}

impl<T: Real> Bound<'_, T> {
    fn get(&self, name: &str) -> Result<NodeId, ModelError> {
        self.params
            .position(name)
            .map(|i| self.nodes[i])
            .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))
    }
}

/// Attention visibility `[batch, T, T]`: memory queries see memory keys only;
/// sequence query `i` sees every memory key and the real tokens at positions
/// up to `i`.
pub fn attention_mask(batch: &Batch, memory: usize) -> Vec<bool> {
    let (b, s) = (batch.batch, batch.seq);
    let t = memory + s;
    let mut mask = vec![false; b * t * t];
    for bi in 0..b {
        for i in 0..t {
            for k in 0..t {
                mask[(bi * t + i) * t + k] = if i < memory {
                    k < memory
                } else {
                    k < memory || (k <= i && batch.mask[bi * s + k - memory])
                };
            }
        }
    }
    mask
}

/// Restricts each row of `visible` to its `k` largest entries of `scores`;
/// ties go to the lower key index.
pub fn topk_mask<T: Real>(scores: &[T], visible: &[bool], width: usize, k: usize) -> Vec<bool> {
    let mut out = visible.to_vec();
    let mut idx = Vec::with_capacity(width);
    for (s, m) in scores.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        idx.clear();
        idx.extend((0..width).filter(|&j| m[j]));
        if idx.len() <= k {
            continue;
        }
        idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        for &j in &idx[k..] {
            m[j] = false;
        }
    }
    out
}

fn dropout<T: Real>(tape: &mut Tape<T>, x: NodeId, rate: f64, rng: &mut Option<&mut Rng>) -> Result<NodeId, ModelError> {
    let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    use rand::Rng as _;
    let keep = T::of(1.0 / (1.0 - rate));
    let shape = tape.shape(x).to_vec();
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
    let m = tape.constant(Tensor::new(shape, data)?)?;
    Ok(tape.mul(x, m)?)
}

/// Mixes `[B, H, T, T]` across heads: `out[h'] = Σ_h x[h]·mix[h, h']`.
fn mix_heads<T: Real>(tape: &mut Tape<T>, x: NodeId, mix: NodeId) -> Result<NodeId, ModelError> {
    let y = tape.permute(x, &[0, 2, 3, 1])?;
    let y = tape.matmul(y, mix)?;
    Ok(tape.permute(y, &[0, 3, 1, 2])?)
}

fn linear<T: Real>(tape: &mut Tape<T>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, ModelError> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// Logits of the decoder for `batch`, with parameters `params` registered on
/// `tape` as `nodes` (same order).
pub fn forward<T: Real>(
    config: &ModelConfig,
    params: &ParamSet<T>,
    nodes: &[NodeId],
    tape: &mut Tape<T>,
    batch: &Batch,
    options: ForwardOptions<'_, T>,
) -> Result<ForwardOutput, ModelError> {
    batch.check(config.vocab_size, config.max_seq)?;
    let p = Bound { params, nodes };
    let (b, s, m) = (batch.batch, batch.seq, config.memory_tokens);
    let (d, h, dh) = (config.d_model, config.n_heads, config.head_dim());
    let t = m + s;
    let mut rng = options.dropout_rng;
    let rate = config.dropout;

    let mut x = tape.embedding(p.get("tok_emb")?, &batch.ids, &[b, s])?;
    let mut offset = None;
    if let Some(off) = options.input_offset {
        if off.shape() != [b, s, d] {
            return Err(ModelError::Config(format!("input offset shape {:?} != {:?}", off.shape(), [b, s, d])));
        }
        let id = tape.param(off)?;
        x = tape.add(x, id)?;
        offset = Some(id);
    }
    if config.positional == Positional::Learned {
        let pos = tape.slice(p.get("pos_emb")?, 0, 0, s)?;
        x = tape.add(x, pos)?;
    }
    if m > 0 {
        let mem = tape.broadcast_batch(p.get("memory")?, b)?;
        x = tape.concat(mem, x, 1)?;
    }
    x = dropout(tape, x, rate, &mut rng)?;

    let base_mask = attention_mask(batch, m);
    let head_mask: Vec<bool> = base_mask.chunks_exact(t * t).flat_map(|c| (0..h).flat_map(move |_| c.iter().copied())).collect();
    let positions: Vec<usize> = (0..t).collect();
    let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());
    let mut prev: Option<NodeId> = None;
    let mut attention = Vec::with_capacity(config.n_layers);

    for l in 0..config.n_layers {
        let pre = super::layer_prefix(l);
        let n = |s: &str| format!("{pre}.{s}");

        // attention sublayer
        let hx = if config.rezero { x } else { tape.layer_norm(x, p.get(&n("ln1.gain"))?, p.get(&n("ln1.bias"))?)? };
        let qkv = linear(tape, hx, p.get(&n("attn.w_qkv"))?, p.get(&n("attn.b_qkv"))?)?;
        let qkv = tape.reshape(qkv, &[b, t, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = tape.reshape(qkv, &[3, b * h, t, dh])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let sl = tape.slice(qkv, 0, i, 1)?;
            parts.push(tape.reshape(sl, &[b * h, t, dh])?);
        }
        let (mut q, mut k, v) = (parts[0], parts[1], parts[2]);
        if config.positional == Positional::Rotary {
            q = tape.rotary(q, &positions, ROTARY_BASE)?;
            k = tape.rotary(k, &positions, ROTARY_BASE)?;
        }
        let scores = tape.bmm_nt(q, k)?;
        let scores = tape.scale(scores, inv_sqrt)?;
        let mut scores = tape.reshape(scores, &[b, h, t, t])?;
        if config.residual_attention {
            if let Some(pv) = prev {
                scores = tape.add(scores, pv)?;
            }
            prev = Some(scores);
        }
        if config.talking_heads {
            scores = mix_heads(tape, scores, p.get(&n("attn.mix_pre"))?)?;
        }
        let probs = if config.sparse_topk > 0 {
            let mask = topk_mask(tape.value(scores).data(), &head_mask, t, config.sparse_topk);
            tape.softmax(scores, Some(&mask))?
        } else {
            tape.softmax(scores, Some(&head_mask))?
        };
        let probs = if config.talking_heads { mix_heads(tape, probs, p.get(&n("attn.mix_post"))?)? } else { probs };
        attention.push(probs);
        let flat = tape.reshape(probs, &[b * h, t, t])?;
        let o = tape.bmm(flat, v)?;
        let o = tape.reshape(o, &[b, h, t, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, t, d])?;
        let o = linear(tape, o, p.get(&n("attn.w_out"))?, p.get(&n("attn.b_out"))?)?;
        let o = dropout(tape, o, rate, &mut rng)?;
        let o = if config.rezero { tape.mul(o, p.get(&n("attn.gate"))?)? } else { o };
        x = tape.add(x, o)?;

        // feed-forward sublayer
        let hx = if config.rezero { x } else { tape.layer_norm(x, p.get(&n("ln2.gain"))?, p.get(&n("ln2.bias"))?)? };
        let inner = linear(tape, hx, p.get(&n("ffn.w_in"))?, p.get(&n("ffn.b_in"))?)?;
        let inner = match config.ffn {
            Ffn::Gelu => tape.gelu(inner)?,
            Ffn::Geglu => {
                let gate = linear(tape, hx, p.get(&n("ffn.w_gate"))?, p.get(&n("ffn.b_gate"))?)?;
                let gate = tape.gelu(gate)?;
                tape.mul(gate, inner)?
            }
        };
        let o = linear(tape, inner, p.get(&n("ffn.w_out"))?, p.get(&n("ffn.b_out"))?)?;
        let o = dropout(tape, o, rate, &mut rng)?;
        let o = if config.rezero { tape.mul(o, p.get(&n("ffn.gate"))?)? } else { o };
        x = tape.add(x, o)?;
    }

    if m > 0 {
        x = tape.slice(x, 1, m, s)?;
    }
    if !config.rezero {
        x = tape.layer_norm(x, p.get("final_ln.gain")?, p.get("final_ln.bias")?)?;
    }
    let logits = tape.matmul_nt(x, p.get("tok_emb")?)?;
    let logits = tape.add(logits, p.get("lm_bias")?)?;
    Ok(ForwardOutput { logits, input_offset: offset, attention })
}

/// Position-wise feed-forward block `(GELU(x·V + c) ∘ (x·W + b))·W2 + b2` on
/// its own, for direct testing.
pub fn geglu<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    gate: (NodeId, NodeId),
    value: (NodeId, NodeId),
    out: (NodeId, NodeId),
) -> Result<NodeId, ModelError> {
    let g = linear(tape, x, gate.0, gate.1)?;
    let g = tape.gelu(g)?;
    let v = linear(tape, x, value.0, value.1)?;
    let hv = tape.mul(g, v)?;
    linear(tape, hv, out.0, out.1)
}

/// Rotates `x` viewed as `[..., positions.len(), d]` pairwise by position.
pub fn apply_rotary<T: Real>(x: &Tensor<T>, positions: &[usize]) -> Result<Tensor<T>, ModelError> {
    let mut tape = Tape::new();
    let id = tape.constant(x.clone())?;
    let r = tape.rotary(id, positions, ROTARY_BASE)?;
    Ok(tape.value(r).clone())
}
