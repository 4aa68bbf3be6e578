//! Tokenization, sentence splitting, and text-to-graph lookup.

use std::collections::HashMap;

use crate::graph::{DependencyGraph, Edge};

/// Splits on whitespace and peels every non-alphanumeric character into its own
/// token. Case is preserved.
pub fn surface_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() {
                cur.push(c);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Lowercased [`surface_tokens`].
pub fn normalized_tokens(text: &str) -> Vec<String> {
    surface_tokens(&text.to_lowercase())
}

/// Lookup key shared by CoNLL-U forms and raw text.
pub fn sentence_key(text: &str) -> String {
    normalized_tokens(text).join(" ")
}

/// Splits on `.`, `!` or `?` followed by whitespace, and on newlines.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\n' {
            push_trimmed(&mut out, &mut cur);
            continue;
        }
        cur.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            push_trimmed(&mut out, &mut cur);
        }
    }
    push_trimmed(&mut out, &mut cur);
    out
}

fn push_trimmed(out: &mut Vec<String>, cur: &mut String) {
    let s = cur.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    cur.clear();
}

/// Turns raw text into dependency graphs, one per sentence.
pub trait SentenceParser: Send + Sync {
    /// Returns an empty list when the text holds no tokens.
    fn parse(&self, text: &str, id: &str) -> Vec<DependencyGraph>;
}

/// Parser-free fallback: each sentence becomes a star graph with every token
/// headed by the first one under relation `dep`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FlatParser;

impl FlatParser {
    pub fn flat_graph(id: &str, tokens: Vec<String>) -> Option<DependencyGraph> {
        if tokens.is_empty() {
            return None;
        }
        let edges = (1..tokens.len()).map(|j| Edge::new(0, j, "dep")).collect();
        DependencyGraph::new(id, tokens, edges).ok()
    }
}

impl SentenceParser for FlatParser {
    fn parse(&self, text: &str, id: &str) -> Vec<DependencyGraph> {
        split_sentences(text)
            .into_iter()
            .enumerate()
            .filter_map(|(i, s)| Self::flat_graph(&format!("{id}#{i}"), surface_tokens(&s)))
            .collect()
    }
}

/// Pre-parsed CoNLL-U graphs indexed by normalized sentence text. Text that is
/// not in the index falls back to [`FlatParser`] sentence by sentence.
#[derive(Debug, Clone, Default)]
pub struct ConlluIndex {
    by_key: HashMap<String, DependencyGraph>,
}

impl ConlluIndex {
    pub fn new(graphs: impl IntoIterator<Item = DependencyGraph>) -> Self {
        let mut by_key = HashMap::new();
        for g in graphs {
            by_key.entry(sentence_key(&g.text())).or_insert(g);
        }
        Self { by_key }
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    pub fn get(&self, sentence: &str) -> Option<&DependencyGraph> {
        self.by_key.get(&sentence_key(sentence))
    }
}

impl SentenceParser for ConlluIndex {
    fn parse(&self, text: &str, id: &str) -> Vec<DependencyGraph> {
        if let Some(g) = self.get(text) {
            return vec![g.clone()];
        }
        split_sentences(text)
            .into_iter()
            .enumerate()
            .filter_map(|(i, s)| match self.get(&s) {
                Some(g) => Some(g.clone()),
                None => FlatParser::flat_graph(&format!("{id}#{i}"), surface_tokens(&s)),
            })
            .collect()
    }
}
