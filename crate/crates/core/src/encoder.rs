//! Toy stand-in for the multimodal encoder: a shared trainable embedding
//! table plus one multi-head self-attention layer with residual. Maps a meme
//! record to its L x d representation and a knowledge context to its L_K x d
//! fact rows.
//!
//! There is no positional encoding: records are treated as bags of tokens and
//! tags, which keeps pooled outputs permutation-invariant. Documented
//! limitation of the desk-scale encoder.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::attention::{attention_forward, AttnForward, AttnProjections};
use crate::error::{Error, Result};
use crate::knowledge::{linearize, normalize_token, KnowledgeBase, KnowledgeContext, Modality};
use crate::numerics::{Matrix, Rng};
use crate::pipeline::dataset::MemeRecord;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const NO_KNOWLEDGE: &str = "<no_knowledge>";

/// Token -> dense index map shared by meme text, image tags, and linearized
/// knowledge strings. Indices 0..2 are the special tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    /// Build from a corpus plus every linearized triple in the snapshot.
    /// Deterministic: specials first, then sorted unique tokens.
    pub fn build(records: &[MemeRecord], kb: &KnowledgeBase) -> Vocab {
        let mut set = BTreeSet::new();
        for r in records {
            for t in r.text_tokens.iter().chain(&r.image_tags) {
                set.insert(normalize_token(t));
            }
        }
        for t in kb.triples() {
            for tok in linearize(t).split_whitespace() {
                set.insert(normalize_token(tok));
            }
        }
        set.remove(PAD);
        set.remove(UNK);
        set.remove(NO_KNOWLEDGE);
        let mut tokens: Vec<String> =
            vec![PAD.to_string(), UNK.to_string(), NO_KNOWLEDGE.to_string()];
        tokens.extend(set);
        Vocab { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of a normalized token, falling back to UNK.
    pub fn index(&self, normalized: &str) -> usize {
        self.tokens
            .iter()
            .position(|t| t == normalized)
            .unwrap_or(Self::UNK_IDX)
    }

    pub const PAD_IDX: usize = 0;
    pub const UNK_IDX: usize = 1;
    pub const NO_KNOWLEDGE_IDX: usize = 2;
}

/// Trainable encoder parameters: embedding table, self-attention projections,
/// and the three additive token-type tag vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams {
    pub embedding: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub text_tag: Vec<f64>,
    pub image_tag: Vec<f64>,
    pub knowledge_tag: Vec<f64>,
    pub n_heads: usize,
}

impl EncoderParams {
    pub fn init(rng: &mut Rng, vocab_size: usize, dim: usize, n_heads: usize) -> Result<Self> {
        if dim % n_heads != 0 {
            return Err(Error::Numeric(format!(
                "dim {dim} not divisible by {n_heads} heads"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(EncoderParams {
            embedding: rng.uniform_matrix(vocab_size, dim, bound),
            w_q: rng.uniform_matrix(dim, dim, bound),
            w_k: rng.uniform_matrix(dim, dim, bound),
            w_v: rng.uniform_matrix(dim, dim, bound),
            w_o: rng.uniform_matrix(dim, dim, bound),
            text_tag: rng.uniform_vec(dim, bound),
            image_tag: rng.uniform_vec(dim, bound),
            knowledge_tag: rng.uniform_vec(dim, bound),
            n_heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }

    /// Base (unadapted) self-attention projections.
    pub fn self_attn(&self) -> AttnProjections {
        AttnProjections {
            w_q: self.w_q.clone(),
            w_k: self.w_k.clone(),
            w_v: self.w_v.clone(),
            w_o: self.w_o.clone(),
        }
    }
}

/// The pre-attention input rows plus the vocab index behind each row, so the
/// training backward pass can route gradients into the embedding table.
#[derive(Debug, Clone)]
pub struct TokenRows {
    pub rows: Matrix,
    pub indices: Vec<usize>,
    pub modalities: Vec<Modality>,
    pub n_text: usize,
}

/// Embedding + modality tag per token/tag, text rows first.
pub fn token_rows(record: &MemeRecord, vocab: &Vocab, p: &EncoderParams) -> Result<TokenRows> {
    let total = record.text_tokens.len() + record.image_tags.len();
    if total == 0 {
        return Err(Error::Data(format!(
            "record '{}' is empty: nothing to encode",
            record.id
        )));
    }
    let d = p.dim();
    let mut rows = Matrix::zeros(total, d);
    let mut indices = Vec::with_capacity(total);
    let mut modalities = Vec::with_capacity(total);
    let mut r = 0;
    for (tokens, modality, tag) in [
        (&record.text_tokens, Modality::Text, &p.text_tag),
        (&record.image_tags, Modality::Image, &p.image_tag),
    ] {
        for tok in tokens.iter() {
            let idx = vocab.index(&normalize_token(tok));
            for c in 0..d {
                rows.set(r, c, p.embedding.get(idx, c) + tag[c]);
            }
            indices.push(idx);
            modalities.push(modality);
            r += 1;
        }
    }
    Ok(TokenRows {
        rows,
        indices,
        modalities,
        n_text: record.text_tokens.len(),
    })
}

/// Full encoder output: input rows, attention internals, and h_mm itself.
#[derive(Debug, Clone)]
pub struct MemeEncoding {
    pub tokens: TokenRows,
    pub attn: AttnForward,
    pub h_mm: Matrix,
}

/// Encode with explicit (possibly adapted) projections.
pub fn encode_meme_with(
    record: &MemeRecord,
    vocab: &Vocab,
    p: &EncoderParams,
    projections: &AttnProjections,
) -> Result<MemeEncoding> {
    let tokens = token_rows(record, vocab, p)?;
    let attn = attention_forward(&tokens.rows, &tokens.rows, projections, p.n_heads)?;
    let h_mm = tokens.rows.add(&attn.out)?;
    Ok(MemeEncoding {
        tokens,
        attn,
        h_mm,
    })
}

/// Record -> L x d multimodal representation using the base projections.
pub fn encode_meme(record: &MemeRecord, vocab: &Vocab, p: &EncoderParams) -> Result<Matrix> {
    Ok(encode_meme_with(record, vocab, p, &p.self_attn())?.h_mm)
}

/// Knowledge rows plus the vocab indices behind each row (for gradients).
#[derive(Debug, Clone)]
pub struct KnowledgeEncoding {
    pub m_k: Matrix,
    /// Vocab indices of each fact row's linearized tokens; for the
    /// no-knowledge row this is the NO_KNOWLEDGE index alone.
    pub row_tokens: Vec<Vec<usize>>,
    pub row_weights: Vec<f64>,
    /// True when the context was empty and the single row is the fallback.
    pub is_fallback: bool,
}

/// One row per fact: source weight times the mean embedding of the fact's
/// linearized tokens, plus the knowledge tag. An empty context yields the
/// single NO_KNOWLEDGE row so downstream shapes stay valid (L_K >= 1).
pub fn encode_knowledge_rows(
    ctx: &KnowledgeContext,
    vocab: &Vocab,
    p: &EncoderParams,
) -> KnowledgeEncoding {
    let d = p.dim();
    if ctx.facts.is_empty() {
        let mut m_k = Matrix::zeros(1, d);
        for c in 0..d {
            m_k.set(
                0,
                c,
                p.embedding.get(Vocab::NO_KNOWLEDGE_IDX, c) + p.knowledge_tag[c],
            );
        }
        return KnowledgeEncoding {
            m_k,
            row_tokens: vec![vec![Vocab::NO_KNOWLEDGE_IDX]],
            row_weights: vec![1.0],
            is_fallback: true,
        };
    }
    let mut m_k = Matrix::zeros(ctx.facts.len(), d);
    let mut row_tokens = Vec::with_capacity(ctx.facts.len());
    let mut row_weights = Vec::with_capacity(ctx.facts.len());
    for (r, (fact, line)) in ctx.facts.iter().zip(&ctx.linearized).enumerate() {
        let indices: Vec<usize> = line
            .split_whitespace()
            .map(|t| vocab.index(&normalize_token(t)))
            .collect();
        let inv = 1.0 / indices.len() as f64;
        for c in 0..d {
            let mean: f64 = indices.iter().map(|&i| p.embedding.get(i, c)).sum::<f64>() * inv;
            m_k.set(r, c, fact.weight * mean + p.knowledge_tag[c]);
        }
        row_tokens.push(indices);
        row_weights.push(fact.weight);
    }
    KnowledgeEncoding {
        m_k,
        row_tokens,
        row_weights,
        is_fallback: false,
    }
}

/// KnowledgeContext -> L_K x d knowledge matrix.
pub fn encode_knowledge(ctx: &KnowledgeContext, vocab: &Vocab, p: &EncoderParams) -> Matrix {
    encode_knowledge_rows(ctx, vocab, p).m_k
}
