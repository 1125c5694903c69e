//! Tri-encoder selection policy.
//!
//! Three independent text encoders score candidates against the retrieval
//! state:
//!
//! ```text
//! state_t  = E_x(x) + lambda * sum_{i<t} E_z(z_i)
//! logit_j  = E_c(c_j) . state_t
//! pi(j)    = softmax(logit / tau)_j     (already selected j masked out)
//! ```
//!
//! The reference encoder is `projection * mean(embedding rows of tokens)`.
//! Gradients are written out by hand; [`EmbeddingGrads`] collects gradients
//! at the level of encoder outputs so that a whole batch of logit gradients
//! is pushed through the encoders once.

mod checkpoint;

use std::collections::{BTreeSet, HashMap};

use rand::Rng as _;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};

use crate::corpus::{CandidatePool, Example};
use crate::error::{Error, Result};
use crate::util::{text_tokens, Rng};

/// Logit assigned to masked candidates.
pub const MASKED_LOGIT: f64 = f64::NEG_INFINITY;

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Token to row index. Row 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from texts; tokens are sorted so the result does
    /// not depend on text order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for text in texts {
            set.extend(text_tokens(text));
        }
        set.remove(UNKNOWN_TOKEN);
        let mut tokens = vec![UNKNOWN_TOKEN.to_string()];
        tokens.extend(set);
        Self::from_tokens(tokens)
    }

    /// Vocabulary over the encoder texts of a pool and a set of queries.
    pub fn from_corpus(pool: &[Example], queries: &[Example]) -> Self {
        let texts: Vec<String> = pool
            .iter()
            .map(Example::encoder_text)
            .chain(queries.iter().map(|q| q.source.clone()))
            .collect();
        Self::build(texts.iter().map(String::as_str))
    }

    pub(crate) fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unknown(&self) -> usize {
        0
    }

    /// Token rows of a text; an all-unknown or empty text maps to `[<unk>]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = text_tokens(text)
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(0))
            .collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// One text encoder: an embedding table and a square projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embeddings: Matrix,
    pub projection: Matrix,
}

impl EncoderParams {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        EncoderParams {
            embeddings: Matrix::zeros(vocab_size, dim),
            projection: Matrix::zeros(dim, dim),
        }
    }

    /// Embeddings uniform in (-0.05, 0.05); projection identity plus
    /// uniform (-0.01, 0.01) noise.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(vocab_size, dim);
        for v in &mut p.embeddings.data {
            *v = rng.gen_range(-0.05..0.05);
        }
        p.projection = Matrix::identity(dim);
        for v in &mut p.projection.data {
            *v += rng.gen_range(-0.01..0.01);
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.projection.rows
    }

    fn mean_embedding(&self, tokens: &[usize]) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for &t in tokens {
            axpy(1.0, self.embeddings.row(t), &mut m);
        }
        let n = tokens.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// `projection * mean(embedding rows)`.
    pub fn encode_tokens(&self, tokens: &[usize]) -> Vec<f64> {
        let m = self.mean_embedding(tokens);
        (0..self.dim()).map(|i| dot(self.projection.row(i), &m)).collect()
    }

    /// Adds the parameter gradient for one encoded text given the gradient
    /// of the loss with respect to its output vector.
    pub fn backward(&self, tokens: &[usize], grad_out: &[f64], grads: &mut EncoderParams) {
        let d = self.dim();
        let m = self.mean_embedding(tokens);
        for i in 0..d {
            if grad_out[i] != 0.0 {
                axpy(grad_out[i], &m, grads.projection.row_mut(i));
            }
        }
        let mut grad_mean = vec![0.0; d];
        for i in 0..d {
            axpy(grad_out[i], self.projection.row(i), &mut grad_mean);
        }
        let scale = 1.0 / tokens.len().max(1) as f64;
        for &t in tokens {
            axpy(scale, &grad_mean, grads.embeddings.row_mut(t));
        }
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.embeddings.data, &mut self.projection.data]
    }

    fn slices(&self) -> [&[f64]; 2] {
        [&self.embeddings.data, &self.projection.data]
    }
}

/// Encode a text with one encoder.
pub fn encode_text(params: &EncoderParams, text: &str, vocab: &Vocabulary) -> Vec<f64> {
    params.encode_tokens(&vocab.encode(text))
}

/// Gradients with the shape of the three encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub query: EncoderParams,
    pub selected: EncoderParams,
    pub candidate: EncoderParams,
}

impl ParamGradients {
    pub fn zeros_like(tri: &TriEncoder) -> Self {
        let (v, d) = (tri.vocab.len(), tri.dim());
        ParamGradients {
            query: EncoderParams::zeros(v, d),
            selected: EncoderParams::zeros(v, d),
            candidate: EncoderParams::zeros(v, d),
        }
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        let [a, b] = self.query.slices();
        let [c, d] = self.selected.slices();
        let [e, f] = self.candidate.slices();
        [a, b, c, d, e, f]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        let [a, b] = self.query.slices_mut();
        let [c, d] = self.selected.slices_mut();
        let [e, f] = self.candidate.slices_mut();
        [a, b, c, d, e, f]
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add(&mut self, other: &ParamGradients) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            axpy(1.0, b, a);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriEncoder {
    pub vocab: Vocabulary,
    pub query_enc: EncoderParams,
    pub selected_enc: EncoderParams,
    pub candidate_enc: EncoderParams,
    pub lambda: f64,
    pub tau: f64,
}

/// Pool texts tokenized and encoded by the candidate and selected-example
/// encoders. Valid until the next parameter update.
#[derive(Debug, Clone)]
pub struct EncodedPool {
    pub tokens: Vec<Vec<usize>>,
    pub candidate: Vec<Vec<f64>>,
    pub selected: Vec<Vec<f64>>,
}

impl EncodedPool {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Gradients with respect to encoder outputs, accumulated over many logit
/// vectors before being pushed through the encoders.
#[derive(Debug, Clone)]
pub struct EmbeddingGrads {
    dim: usize,
    queries: Vec<(Vec<usize>, Vec<f64>)>,
    candidate: Vec<Vec<f64>>,
    selected: Vec<Vec<f64>>,
}

impl EmbeddingGrads {
    pub fn new(pool_size: usize, dim: usize) -> Self {
        EmbeddingGrads {
            dim,
            queries: Vec::new(),
            candidate: vec![vec![0.0; dim]; pool_size],
            selected: vec![vec![0.0; dim]; pool_size],
        }
    }

    /// Registers a query text and returns its slot.
    pub fn add_query(&mut self, tokens: Vec<usize>) -> usize {
        self.queries.push((tokens, vec![0.0; self.dim]));
        self.queries.len() - 1
    }
}

impl TriEncoder {
    pub fn new(vocab: Vocabulary, dim: usize, lambda: f64, tau: f64, rng: &mut Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be at least 1".into()));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let v = vocab.len();
        let query_enc = EncoderParams::random(v, dim, rng);
        let selected_enc = EncoderParams::random(v, dim, rng);
        let candidate_enc = EncoderParams::random(v, dim, rng);
        Ok(TriEncoder {
            vocab,
            query_enc,
            selected_enc,
            candidate_enc,
            lambda,
            tau,
        })
    }

    pub fn dim(&self) -> usize {
        self.query_enc.dim()
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        let [a, b] = self.query_enc.slices();
        let [c, d] = self.selected_enc.slices();
        let [e, f] = self.candidate_enc.slices();
        [a, b, c, d, e, f]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        let [a, b] = self.query_enc.slices_mut();
        let [c, d] = self.selected_enc.slices_mut();
        let [e, f] = self.candidate_enc.slices_mut();
        [a, b, c, d, e, f]
    }

    pub fn encode_query(&self, text: &str) -> (Vec<usize>, Vec<f64>) {
        let tokens = self.vocab.encode(text);
        let emb = self.query_enc.encode_tokens(&tokens);
        (tokens, emb)
    }

    pub fn encode_pool(&self, pool: &CandidatePool) -> EncodedPool {
        self.encode_examples(pool.examples())
    }

    pub fn encode_examples(&self, examples: &[Example]) -> EncodedPool {
        let tokens: Vec<Vec<usize>> = examples
            .iter()
            .map(|e| self.vocab.encode(&e.encoder_text()))
            .collect();
        let candidate = tokens.iter().map(|t| self.candidate_enc.encode_tokens(t)).collect();
        let selected = tokens.iter().map(|t| self.selected_enc.encode_tokens(t)).collect();
        EncodedPool {
            tokens,
            candidate,
            selected,
        }
    }

    /// `E_x(x) + lambda * sum E_z(z_i)` over already selected pool positions.
    pub fn state(&self, query_emb: &[f64], selected: &[usize], pool: &EncodedPool) -> Vec<f64> {
        let mut s = query_emb.to_vec();
        for &z in selected {
            axpy(self.lambda, &pool.selected[z], &mut s);
        }
        s
    }

    /// Logits over the whole pool for a given state; masked entries get
    /// [`MASKED_LOGIT`].
    pub fn logits_for_state(&self, state: &[f64], pool: &EncodedPool, mask: &[bool]) -> Vec<f64> {
        pool.candidate
            .iter()
            .zip(mask)
            .map(|(c, &m)| if m { MASKED_LOGIT } else { dot(c, state) })
            .collect()
    }

    /// Selection logits for a query given previously selected examples and
    /// precomputed candidate embeddings.
    pub fn selection_logits(
        &self,
        query: &str,
        selected: &[Example],
        pool_embeddings: &[Vec<f64>],
        mask: &[bool],
    ) -> Result<Vec<f64>> {
        let d = self.dim();
        if pool_embeddings.len() != mask.len() {
            return Err(Error::Dimension(format!(
                "{} candidate embeddings but mask of length {}",
                pool_embeddings.len(),
                mask.len()
            )));
        }
        if let Some(bad) = pool_embeddings.iter().find(|e| e.len() != d) {
            return Err(Error::Dimension(format!(
                "candidate embedding of length {} for dimension {d}",
                bad.len()
            )));
        }
        let (_, mut state) = self.encode_query(query);
        for z in selected {
            let emb = self.selected_enc.encode_tokens(&self.vocab.encode(&z.encoder_text()));
            axpy(self.lambda, &emb, &mut state);
        }
        Ok(pool_embeddings
            .iter()
            .zip(mask)
            .map(|(c, &m)| if m { MASKED_LOGIT } else { dot(c, &state) })
            .collect())
    }

    /// Accumulates output-level gradients for one logit vector
    /// `logit_j = cand_j . state`. Only candidates listed in `dlogits` are
    /// touched.
    pub fn accumulate_logit_grads(
        &self,
        state: &[f64],
        query_slot: usize,
        selected: &[usize],
        pool: &EncodedPool,
        dlogits: &[(usize, f64)],
        grads: &mut EmbeddingGrads,
    ) {
        let mut dstate = vec![0.0; self.dim()];
        for &(j, g) in dlogits {
            if g == 0.0 {
                continue;
            }
            axpy(g, &pool.candidate[j], &mut dstate);
            axpy(g, state, &mut grads.candidate[j]);
        }
        axpy(1.0, &dstate, &mut grads.queries[query_slot].1);
        if self.lambda != 0.0 {
            for &z in selected {
                axpy(self.lambda, &dstate, &mut grads.selected[z]);
            }
        }
    }

    /// Pushes output-level gradients through the three encoders.
    pub fn finish_grads(&self, grads: &EmbeddingGrads, pool: &EncodedPool) -> ParamGradients {
        let mut out = ParamGradients::zeros_like(self);
        for (tokens, g) in &grads.queries {
            self.query_enc.backward(tokens, g, &mut out.query);
        }
        for (j, g) in grads.candidate.iter().enumerate() {
            if g.iter().any(|v| *v != 0.0) {
                self.candidate_enc.backward(&pool.tokens[j], g, &mut out.candidate);
            }
        }
        for (j, g) in grads.selected.iter().enumerate() {
            if g.iter().any(|v| *v != 0.0) {
                self.selected_enc.backward(&pool.tokens[j], g, &mut out.selected);
            }
        }
        out
    }

    /// Gradient of a scalar loss with respect to all parameters, given
    /// `dL/dlogits` for one selection step over `candidates`.
    pub fn backprop_logits(
        &self,
        query: &str,
        selected: &[Example],
        candidates: &[Example],
        dlogits: &[f64],
    ) -> Result<ParamGradients> {
        if dlogits.len() != candidates.len() {
            return Err(Error::Dimension(format!(
                "{} logit gradients for {} candidates",
                dlogits.len(),
                candidates.len()
            )));
        }
        let mut all = candidates.to_vec();
        all.extend_from_slice(selected);
        let pool = self.encode_examples(&all);
        let sel_pos: Vec<usize> = (candidates.len()..all.len()).collect();
        let (tokens, q) = self.encode_query(query);
        let state = self.state(&q, &sel_pos, &pool);
        let mut grads = EmbeddingGrads::new(all.len(), self.dim());
        let slot = grads.add_query(tokens);
        let dl: Vec<(usize, f64)> = dlogits.iter().copied().enumerate().collect();
        self.accumulate_logit_grads(&state, slot, &sel_pos, &pool, &dl, &mut grads);
        Ok(self.finish_grads(&grads, &pool))
    }
}

/// Temperature-scaled softmax with max subtraction. Masked entries get
/// exactly zero probability.
pub fn policy_distribution(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    let (probs, _) = softmax_with_log_norm(logits, tau)?;
    Ok(probs)
}

/// Softmax of `logits / tau` plus `max + ln(sum)` of the scaled logits, so
/// that `log p_j = logits_j / tau - log_norm`.
pub fn softmax_with_log_norm(logits: &[f64], tau: f64) -> Result<(Vec<f64>, f64)> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let max = logits
        .iter()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyActionSpace);
    }
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|&v| if v.is_finite() { (v / tau - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    Ok((probs, max + sum.ln()))
}

/// Draws an index from a distribution by inverse CDF.
pub fn sample_action(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last_positive = i;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Highest-probability index, lowest index on ties.
pub fn argmax_action(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::build(["a b c"])
    }

    #[test]
    fn vocabulary_is_sorted_with_unknown_first() {
        let v = Vocabulary::build(["zeta alpha", "Beta alpha"]);
        assert_eq!(v.tokens(), ["<unk>", "alpha", "beta", "zeta"]);
        assert_eq!(v.encode("alpha omega"), [1, 0]);
        assert_eq!(v.encode(""), [0]);
    }

    #[test]
    fn zero_table_gives_zero_vector() {
        let v = tiny_vocab();
        let mut p = EncoderParams::zeros(v.len(), 3);
        p.projection = Matrix::identity(3);
        assert_eq!(encode_text(&p, "a b", &v), vec![0.0; 3]);
    }

    #[test]
    fn identity_projection_single_token_is_row() {
        let v = tiny_vocab();
        let mut rng = seeded_rng(1);
        let mut p = EncoderParams::random(v.len(), 4, &mut rng);
        p.projection = Matrix::identity(4);
        let row = p.embeddings.row(v.encode("b")[0]).to_vec();
        assert_eq!(encode_text(&p, "b", &v), row);
    }

    #[test]
    fn two_token_hand_computed() {
        let v = tiny_vocab(); // <unk>, a, b, c
        let mut p = EncoderParams::zeros(v.len(), 2);
        p.embeddings.row_mut(1).copy_from_slice(&[1.0, 2.0]);
        p.embeddings.row_mut(2).copy_from_slice(&[3.0, -2.0]);
        p.projection.data = vec![1.0, 2.0, 0.5, -1.0];
        // mean = (2, 0); P * mean = (2, 1)
        assert_eq!(encode_text(&p, "a b", &v), vec![2.0, 1.0]);
    }

    fn hand_tri() -> TriEncoder {
        let v = tiny_vocab();
        let mut tri = TriEncoder::new(v.clone(), 2, 0.1, 1.0, &mut seeded_rng(0)).unwrap();
        for enc in [&mut tri.query_enc, &mut tri.selected_enc, &mut tri.candidate_enc] {
            *enc = EncoderParams::zeros(v.len(), 2);
            enc.projection = Matrix::identity(2);
        }
        tri.query_enc.embeddings.row_mut(1).copy_from_slice(&[1.0, 0.0]);
        tri.selected_enc.embeddings.row_mut(2).copy_from_slice(&[0.0, 10.0]);
        tri
    }

    #[test]
    fn logits_hand_computed() {
        let tri = hand_tri();
        let z = Example::new(0, "b", "b");
        let cands = vec![vec![1.0, 1.0], vec![2.0, -1.0]];
        // state = (1, 0) + 0.1 * (0, 10) = (1, 1)
        let l = tri.selection_logits("a", &[z], &cands, &[false, false]).unwrap();
        assert_eq!(l, vec![2.0, 1.0]);
        let l = tri.selection_logits("a", &[], &cands, &[false, true]).unwrap();
        assert_eq!(l[0], 1.0);
        assert_eq!(l[1], MASKED_LOGIT);
    }

    #[test]
    fn zero_lambda_ignores_selection() {
        let mut tri = TriEncoder::new(tiny_vocab(), 3, 0.0, 0.2, &mut seeded_rng(3)).unwrap();
        tri.lambda = 0.0;
        let cands = vec![vec![0.3, -0.2, 0.5], vec![0.1, 0.1, 0.1]];
        let z = Example::new(0, "b c", "c");
        let a = tri.selection_logits("a b", &[], &cands, &[false; 2]).unwrap();
        let b = tri.selection_logits("a b", &[z], &cands, &[false; 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch() {
        let tri = hand_tri();
        assert!(matches!(
            tri.selection_logits("a", &[], &[vec![1.0]], &[false]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            tri.selection_logits("a", &[], &[vec![1.0, 0.0]], &[false, false]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn softmax_cases() {
        let p = policy_distribution(&[0.5, 0.5, 0.5, 0.5], 0.2).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let p = policy_distribution(&[0.0, 3f64.ln()], 1.0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        let p = policy_distribution(&[1.0, 0.0, 0.0], 0.05).unwrap();
        assert!(p[0] >= 0.999);
        let p = policy_distribution(&[1.0, MASKED_LOGIT, 2.0], 1.0).unwrap();
        assert_eq!(p[1], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(matches!(
            policy_distribution(&[MASKED_LOGIT, MASKED_LOGIT], 1.0),
            Err(Error::EmptyActionSpace)
        ));
    }

    #[test]
    fn argmax_and_one_hot_sampling() {
        assert_eq!(argmax_action(&[0.2, 0.5, 0.3]), 1);
        assert_eq!(argmax_action(&[0.4, 0.4, 0.2]), 0);
        let mut rng = seeded_rng(9);
        for _ in 0..100 {
            assert_eq!(sample_action(&[0.0, 0.0, 1.0, 0.0], &mut rng), 2);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let tri = TriEncoder::new(tiny_vocab(), 3, 0.1, 0.2, &mut seeded_rng(5)).unwrap();
        let cands = vec![Example::new(0, "a", "b"), Example::new(1, "c", "a")];
        let g = tri
            .backprop_logits("a b", &[Example::new(2, "b", "c")], &cands, &[0.0, 0.0])
            .unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn zero_lambda_leaves_selected_encoder_untouched() {
        let mut tri = TriEncoder::new(tiny_vocab(), 3, 0.1, 0.2, &mut seeded_rng(5)).unwrap();
        tri.lambda = 0.0;
        let cands = vec![Example::new(0, "a", "b"), Example::new(1, "c", "a")];
        let g = tri
            .backprop_logits("a b", &[Example::new(2, "b", "c")], &cands, &[0.7, -1.3])
            .unwrap();
        assert_eq!(g.selected.embeddings.data.iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
        assert_eq!(g.selected.projection.data.iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
        assert!(g.max_abs() > 0.0);
    }
}
