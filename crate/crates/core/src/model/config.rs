use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Learned,
    Rotary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ffn {
    Gelu,
    Geglu,
}

/// Architecture of the decoder. Every modification is an independent switch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    pub positional: Positional,
    pub ffn: Ffn,
    /// Trainable prefix vectors attended by every position; 0 disables.
    pub memory_tokens: usize,
    /// Zero-initialized scalar gate per sublayer; disables layer norm.
    pub rezero: bool,
    /// Learned head-mixing before and after the attention softmax.
    pub talking_heads: bool,
    /// Keep only the k largest visible attention logits per query; 0 disables.
    pub sparse_topk: usize,
    /// Add the previous layer's pre-softmax attention logits.
    pub residual_attention: bool,
    /// Tab-separated concept embeddings copied into the token table at init.
    pub init_embeddings: Option<String>,
    pub dropout: f64,
}

impl ModelConfig {
    /// Full-size defaults: 6 layers, 2 heads, width 300.
    pub fn new(vocab_size: usize) -> Self {
        Self {
            n_layers: 6,
            n_heads: 2,
            d_model: 300,
            d_ff: 1200,
            max_seq: 50,
            vocab_size,
            positional: Positional::Learned,
            ffn: Ffn::Gelu,
            memory_tokens: 0,
            rezero: false,
            talking_heads: false,
            sparse_topk: 0,
            residual_attention: false,
            init_embeddings: None,
            dropout: 0.0,
        }
    }

    /// Small configuration with `d_ff = 4 * d_model`.
    pub fn small(vocab_size: usize, n_layers: usize, n_heads: usize, d_model: usize) -> Self {
        Self { n_layers, n_heads, d_model, d_ff: 4 * d_model, ..Self::new(vocab_size) }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("n_layers, n_heads, d_model and d_ff must be positive".into());
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return bad("vocab_size and max_seq must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.positional == Positional::Rotary && !self.head_dim().is_multiple_of(2) {
            return bad(format!("rotary needs an even head dimension, got {}", self.head_dim()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Name of the first field whose value differs from `other`.
    pub fn first_mismatch(&self, other: &ModelConfig) -> Option<&'static str> {
        let checks: [(&'static str, bool); 15] = [
            ("n_layers", self.n_layers == other.n_layers),
            ("n_heads", self.n_heads == other.n_heads),
            ("d_model", self.d_model == other.d_model),
            ("d_ff", self.d_ff == other.d_ff),
            ("max_seq", self.max_seq == other.max_seq),
            ("vocab_size", self.vocab_size == other.vocab_size),
            ("positional", self.positional == other.positional),
            ("ffn", self.ffn == other.ffn),
            ("memory_tokens", self.memory_tokens == other.memory_tokens),
            ("rezero", self.rezero == other.rezero),
            ("talking_heads", self.talking_heads == other.talking_heads),
            ("sparse_topk", self.sparse_topk == other.sparse_topk),
            ("residual_attention", self.residual_attention == other.residual_attention),
            ("init_embeddings", self.init_embeddings == other.init_embeddings),
            ("dropout", self.dropout == other.dropout),
        ];
        checks.into_iter().find(|(_, same)| !same).map(|(name, _)| name)
    }
}

/// One architecture modification, or a `+`-joined combination of several.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    parts: Vec<Switch>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Switch {
    Memory,
    Residual,
    Rezero,
    TalkingHeads,
    Sparse,
    Rotary,
    Glu,
    Pretrained,
}

impl Switch {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "memory" | "memory20" => Switch::Memory,
            "residual" | "residual-attention" => Switch::Residual,
            "rezero" => Switch::Rezero,
            "talking-heads" | "talking" => Switch::TalkingHeads,
            "sparse" | "sparse-top8" | "topk" => Switch::Sparse,
            "rotary" => Switch::Rotary,
            "glu" | "geglu" => Switch::Glu,
            "w2v" | "word2vec" | "pretrained" => Switch::Pretrained,
            _ => return None,
        })
    }

    fn key(self) -> &'static str {
        match self {
            Switch::Memory => "memory",
            Switch::Residual => "residual",
            Switch::Rezero => "rezero",
            Switch::TalkingHeads => "talking-heads",
            Switch::Sparse => "sparse",
            Switch::Rotary => "rotary",
            Switch::Glu => "glu",
            Switch::Pretrained => "w2v",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Switch::Memory => "Memory 20",
            Switch::Residual => "Residual Attention",
            Switch::Rezero => "ReZero",
            Switch::TalkingHeads => "Talking Heads",
            Switch::Sparse => "Sparse Top 8",
            Switch::Rotary => "Rotary",
            Switch::Glu => "GLU",
            Switch::Pretrained => "Word2Vec init",
        }
    }
}

impl Variant {
    /// The ten standard rows of an ablation.
    pub const STANDARD: [&'static str; 10] =
        ["base", "memory", "residual", "rezero", "talking-heads", "sparse", "rotary", "glu", "w2v", "glu+rotary"];

    pub fn parse(name: &str) -> Result<Self, ModelError> {
        let name = name.trim().to_ascii_lowercase();
        if name == "base" {
            return Ok(Self { parts: vec![] });
        }
        let parts = name
            .split('+')
            .map(|p| Switch::parse(p.trim()).ok_or_else(|| ModelError::Config(format!("unknown variant {p:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { parts })
    }

    pub fn key(&self) -> String {
        if self.parts.is_empty() {
            return "base".into();
        }
        self.parts.iter().map(|s| s.key()).collect::<Vec<_>>().join("+")
    }

    pub fn label(&self) -> String {
        if self.parts.is_empty() {
            return "Base".into();
        }
        self.parts.iter().map(|s| s.label()).collect::<Vec<_>>().join(" + ")
    }

    pub fn needs_embeddings(&self) -> bool {
        self.parts.contains(&Switch::Pretrained)
    }

    /// Applies the switches to `base`. `embeddings` is the file used by the
    /// pretrained-init switch.
    pub fn apply(&self, base: &ModelConfig, embeddings: Option<&str>) -> Result<ModelConfig, ModelError> {
        let mut c = base.clone();
        for s in &self.parts {
            match s {
                Switch::Memory => c.memory_tokens = 20,
                Switch::Residual => c.residual_attention = true,
                Switch::Rezero => c.rezero = true,
                Switch::TalkingHeads => c.talking_heads = true,
                Switch::Sparse => c.sparse_topk = 8,
                Switch::Rotary => c.positional = Positional::Rotary,
                Switch::Glu => c.ffn = Ffn::Geglu,
                Switch::Pretrained => {
                    let path = embeddings.ok_or_else(|| {
                        ModelError::Config("the w2v variant needs an embedding file".into())
                    })?;
                    c.init_embeddings = Some(path.to_string());
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}
