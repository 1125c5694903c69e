//! Okapi BM25 over whitespace-tokenized, lowercased text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::util::text_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Immutable index over a fixed document list. Document ids are caller ids,
/// not positions.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<usize>,
    term_freqs: Vec<HashMap<String, u32>>,
    doc_lens: Vec<f64>,
    avg_len: f64,
    doc_freq: HashMap<String, u32>,
    params: Bm25Params,
}

impl Bm25Index {
    pub fn build<'a>(docs: impl IntoIterator<Item = (usize, &'a str)>, params: Bm25Params) -> Self {
        let mut ids = Vec::new();
        let mut term_freqs = Vec::new();
        let mut doc_lens = Vec::new();
        let mut doc_freq: HashMap<String, u32> = HashMap::new();
        for (id, text) in docs {
            let tokens = text_tokens(text);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            ids.push(id);
            doc_lens.push(tokens.len() as f64);
            term_freqs.push(tf);
        }
        let avg_len = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().sum::<f64>() / doc_lens.len() as f64
        };
        Bm25Index {
            ids,
            term_freqs,
            doc_lens,
            avg_len,
            doc_freq,
            params,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    /// `ln(1 + (N - n + 0.5) / (n + 0.5))`; strictly positive.
    pub fn idf(&self, term: &str) -> f64 {
        let n_docs = self.ids.len() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n_docs - df + 0.5) / (df + 0.5)).ln()
    }

    fn score_pos(&self, pos: usize, query_terms: &[String]) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let len_norm = if self.avg_len > 0.0 {
            self.doc_lens[pos] / self.avg_len
        } else {
            0.0
        };
        query_terms
            .iter()
            .filter_map(|t| {
                let tf = *self.term_freqs[pos].get(t)? as f64;
                Some(self.idf(t) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len_norm)))
            })
            .sum()
    }

    fn query_terms(query: &str) -> Vec<String> {
        let mut terms = text_tokens(query);
        terms.sort();
        terms.dedup();
        terms
    }

    /// Score of every document, in index order.
    pub fn scores(&self, query: &str) -> Vec<(usize, f64)> {
        let terms = Self::query_terms(query);
        (0..self.ids.len())
            .map(|pos| (self.ids[pos], self.score_pos(pos, &terms)))
            .collect()
    }

    /// Top `h` documents by score, ties broken by ascending id.
    pub fn top_k(&self, query: &str, h: usize) -> Vec<(usize, f64)> {
        let mut scored = self.scores(query);
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(h);
        scored
    }
}
