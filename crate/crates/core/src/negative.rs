//! Negative-sample construction: chunk an irrelevant context and pick the
//! chunk least similar to the synthesized prompt.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine_similarity, EmbedError, JointEncoder, SentenceEmbedding};

pub const DEFAULT_CHUNK_SIZE: usize = 256;
pub const DEFAULT_SEPARATORS: [&str; 4] = ["\n\n", "\n", ". ", " "];

#[derive(Debug, Error)]
pub enum NegativeError {
    #[error("no chunks to choose from")]
    NoChunks,
    #[error("none of the {0} chunks could be embedded")]
    AllUnparseable(usize),
    #[error("chunk size must be at least 1")]
    BadChunkSize,
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeSample {
    pub text: String,
    pub chunk_index: usize,
    pub similarity_to_prompt: f64,
}

fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Splits `text` after each occurrence of `sep`, keeping the separator on the
/// left piece so the pieces concatenate back to `text`.
fn split_keep<'a>(text: &'a str, sep: &str) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, _) in text.match_indices(sep) {
        let end = i + sep.len();
        out.push(&text[start..end]);
        start = end;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Recursive separator-based splitting with whitespace-token budgets.
///
/// The first separator present in the text splits it; adjacent pieces are
/// greedily merged while the merged chunk stays within `chunk_size` tokens, and
/// any piece that alone exceeds the budget is split again with the remaining
/// separators. A piece that no separator can break becomes its own chunk.
/// Chunks are trimmed and never empty.
pub fn split_chunks(text: &str, chunk_size: usize, separators: &[&str]) -> Result<Vec<String>, NegativeError> {
    if chunk_size == 0 {
        return Err(NegativeError::BadChunkSize);
    }
    let mut out = Vec::new();
    split_into(text, chunk_size, separators, &mut out);
    Ok(out)
}

fn push_chunk(out: &mut Vec<String>, chunk: &str) {
    let t = chunk.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
}

fn split_into(text: &str, chunk_size: usize, separators: &[&str], out: &mut Vec<String>) {
    if token_count(text) <= chunk_size {
        push_chunk(out, text);
        return;
    }
    let Some(pos) = separators.iter().position(|s| !s.is_empty() && text.contains(s)) else {
        push_chunk(out, text);
        return;
    };
    let rest = &separators[pos + 1..];
    let mut current = String::new();
    let mut current_tokens = 0;
    for piece in split_keep(text, separators[pos]) {
        let n = token_count(piece);
        if n == 0 {
            current.push_str(piece);
            continue;
        }
        if n > chunk_size {
            push_chunk(out, &current);
            current.clear();
            current_tokens = 0;
            split_into(piece, chunk_size, rest, out);
        } else if current_tokens + n > chunk_size {
            push_chunk(out, &current);
            current = piece.to_string();
            current_tokens = n;
        } else {
            current.push_str(piece);
            current_tokens += n;
        }
    }
    push_chunk(out, &current);
}

/// Argmin of cosine similarity over the embeddable chunks; ties keep the lowest
/// index. `None` entries are chunks that could not be embedded.
pub fn least_similar(
    chunk_embeddings: &[Option<SentenceEmbedding>],
    prompt: &SentenceEmbedding,
) -> Result<(usize, f64), NegativeError> {
    if chunk_embeddings.is_empty() {
        return Err(NegativeError::NoChunks);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, emb) in chunk_embeddings.iter().enumerate() {
        let Some(emb) = emb else { continue };
        let sim = cosine_similarity(emb, prompt)?;
        if best.is_none_or(|(_, b)| sim < b) {
            best = Some((i, sim));
        }
    }
    best.ok_or(NegativeError::AllUnparseable(chunk_embeddings.len()))
}

/// Embeds every chunk (mean over its sentences) and returns the one least
/// similar to `prompt_emb`.
pub fn select_negative(
    chunks: &[String],
    prompt_emb: &SentenceEmbedding,
    encoder: &JointEncoder,
) -> Result<NegativeSample, NegativeError> {
    let embeddings: Vec<Option<SentenceEmbedding>> = chunks
        .par_iter()
        .enumerate()
        .map(|(i, c)| match encoder.embed_text(c, &format!("chunk{i}")) {
            Ok(e) => Some(e),
            Err(e) => {
                warn!("skipping negative chunk {i}: {e}");
                None
            }
        })
        .collect();
    let (chunk_index, similarity_to_prompt) = least_similar(&embeddings, prompt_emb)?;
    Ok(NegativeSample {
        text: chunks[chunk_index].clone(),
        chunk_index,
        similarity_to_prompt,
    })
}
