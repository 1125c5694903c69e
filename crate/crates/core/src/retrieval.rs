//! Inference-time retrieval and the evaluation harness.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::corpus::{Bm25Index, CandidatePool, Example};
use crate::encoder::{argmax_action, dot, policy_distribution, EncodedPool, TriEncoder};
use crate::error::{Error, Result};
use crate::llm::exact_match;
use crate::rl::{Environment, RewardContext, Target};
use crate::util::{derive_seed, mean, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    Random,
    Bm25,
    Dense,
    Rcr,
}

impl RetrieverKind {
    pub fn name(self) -> &'static str {
        match self {
            RetrieverKind::Random => "random",
            RetrieverKind::Bm25 => "bm25",
            RetrieverKind::Dense => "dense",
            RetrieverKind::Rcr => "rcr",
        }
    }
}

impl fmt::Display for RetrieverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RetrieverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(RetrieverKind::Random),
            "bm25" => Ok(RetrieverKind::Bm25),
            "dense" => Ok(RetrieverKind::Dense),
            "rcr" => Ok(RetrieverKind::Rcr),
            other => Err(Error::Config(format!("unknown retriever `{other}`"))),
        }
    }
}

fn check_pool(pool_len: usize, excluded: &[usize], k: usize) -> Result<()> {
    let available = pool_len - excluded.iter().filter(|&&e| e < pool_len).count();
    if available < k {
        return Err(Error::PoolTooSmall { pool: available, k });
    }
    Ok(())
}

/// Greedy sequential selection: at each step the most probable unselected
/// candidate given the query and earlier picks.
pub fn retrieve_sequential(
    tri: &TriEncoder,
    pool: &EncodedPool,
    query: &str,
    excluded: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    check_pool(pool.len(), excluded, k)?;
    let (_, q) = tri.encode_query(query);
    let mut mask = vec![false; pool.len()];
    for &e in excluded {
        mask[e] = true;
    }
    let mut picks = Vec::with_capacity(k);
    for _ in 0..k {
        let state = tri.state(&q, &picks, pool);
        let logits = tri.logits_for_state(&state, pool, &mask);
        let a = argmax_action(&policy_distribution(&logits, tri.tau)?);
        mask[a] = true;
        picks.push(a);
    }
    Ok(picks)
}

/// Top-k by `E_c(c) · E_x(x)`, ties to the lower position.
pub fn retrieve_dense(
    tri: &TriEncoder,
    pool: &EncodedPool,
    query: &str,
    excluded: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    check_pool(pool.len(), excluded, k)?;
    let (_, q) = tri.encode_query(query);
    let mut scored: Vec<(usize, f64)> = (0..pool.len())
        .filter(|p| !excluded.contains(p))
        .map(|p| (p, dot(&pool.candidate[p], &q)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(k).map(|(p, _)| p).collect())
}

/// BM25 top-k over pool utterances. `index` is keyed by example id.
pub fn retrieve_bm25(
    index: &Bm25Index,
    pool: &CandidatePool,
    query: &str,
    excluded: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    check_pool(pool.len(), excluded, k)?;
    Ok(index
        .top_k(query, k + excluded.len())
        .into_iter()
        .filter_map(|(id, _)| pool.position(id))
        .filter(|p| !excluded.contains(p))
        .take(k)
        .collect())
}

/// Uniform sample without replacement, in sampled order.
pub fn retrieve_random(
    pool_len: usize,
    excluded: &[usize],
    k: usize,
    rng: &mut crate::util::Rng,
) -> Result<Vec<usize>> {
    check_pool(pool_len, excluded, k)?;
    let allowed: Vec<usize> = (0..pool_len).filter(|p| !excluded.contains(p)).collect();
    Ok(sample(rng, allowed.len(), k).into_iter().map(|i| allowed[i]).collect())
}

/// A configured retriever over one pool.
pub enum Retriever<'a> {
    /// Per-query streams derived from `seed` and the query id.
    Random { seed: u64 },
    Bm25(&'a Bm25Index),
    Dense(&'a TriEncoder, EncodedPool),
    Rcr(&'a TriEncoder, EncodedPool),
}

impl<'a> Retriever<'a> {
    pub fn dense(tri: &'a TriEncoder, pool: &CandidatePool) -> Self {
        Retriever::Dense(tri, tri.encode_pool(pool))
    }

    pub fn rcr(tri: &'a TriEncoder, pool: &CandidatePool) -> Self {
        Retriever::Rcr(tri, tri.encode_pool(pool))
    }

    pub fn kind(&self) -> RetrieverKind {
        match self {
            Retriever::Random { .. } => RetrieverKind::Random,
            Retriever::Bm25(_) => RetrieverKind::Bm25,
            Retriever::Dense(..) => RetrieverKind::Dense,
            Retriever::Rcr(..) => RetrieverKind::Rcr,
        }
    }

    /// `k` pool positions for `query`, skipping `excluded`.
    pub fn retrieve(
        &self,
        pool: &CandidatePool,
        query: &Example,
        excluded: &[usize],
        k: usize,
    ) -> Result<Vec<usize>> {
        match self {
            Retriever::Random { seed } => {
                let mut rng = seeded_rng(derive_seed(*seed, &[query.id as u64]));
                retrieve_random(pool.len(), excluded, k, &mut rng)
            }
            Retriever::Bm25(index) => retrieve_bm25(index, pool, &query.source, excluded, k),
            Retriever::Dense(tri, enc) => retrieve_dense(tri, enc, &query.source, excluded, k),
            Retriever::Rcr(tri, enc) => retrieve_sequential(tri, enc, &query.source, excluded, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: usize,
    pub retrieved_ids: Vec<usize>,
    pub prediction: Option<String>,
    pub exact_match: bool,
    pub reward: f64,
    pub coverage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_queries: usize,
    pub exact_match_accuracy: f64,
    pub mean_structural_reward: f64,
    pub mean_coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<EvalRecord>) -> Self {
        let n = records.len();
        let em: Vec<f64> = records.iter().map(|r| r.exact_match as u8 as f64).collect();
        let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
        let cov: Vec<f64> = records.iter().map(|r| r.coverage).collect();
        EvalReport {
            summary: EvalSummary {
                n_queries: n,
                exact_match_accuracy: mean(&em),
                mean_structural_reward: mean(&rewards),
                mean_coverage: mean(&cov),
            },
            records,
        }
    }

    /// One JSON line per query followed by `{"summary": {...}}`.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut out, &serde_json::json!({ "summary": self.summary }))?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }
}

/// Retrieves `k` examples for every test pair, asks `env` for a generation
/// and scores it. Pool entries identical to the test pair are masked. Client
/// failures count as misses and are flagged on the record. With the coverage
/// environment there is no generation and full coverage counts as a match.
pub fn evaluate(
    retriever: &Retriever<'_>,
    pool: &CandidatePool,
    test_pairs: &[Example],
    env: &Environment,
    k: usize,
) -> Result<EvalReport> {
    let cfg = pool.structure_config();
    let mut records = Vec::with_capacity(test_pairs.len());
    for pair in test_pairs {
        let excluded = pool.positions_of_pair(pair);
        let picks = retriever.retrieve(pool, pair, &excluded, k)?;
        let retrieved_ids = picks.iter().map(|&p| pool.get(p).id).collect();
        let target = Target::new(pair.target.as_str(), cfg)?;
        let ctx = RewardContext {
            pool,
            env,
            target: &target,
        };
        let record = match ctx.respond(&pair.source, &picks) {
            Ok(resp) => EvalRecord {
                query_id: pair.id,
                retrieved_ids,
                exact_match: match &resp.prediction {
                    Some(p) => exact_match(p, pair.target.as_str()),
                    None => resp.coverage >= 1.0,
                },
                prediction: resp.prediction,
                reward: resp.reward,
                coverage: resp.coverage,
                error: None,
            },
            Err(e @ (Error::Client(_) | Error::Auth(_))) => {
                log::warn!("query {}: {e}", pair.id);
                EvalRecord {
                    query_id: pair.id,
                    retrieved_ids,
                    prediction: None,
                    exact_match: false,
                    reward: 0.0,
                    coverage: crate::structures::union_coverage(
                        &picks.iter().map(|&p| pool.structures(p)).collect::<Vec<_>>(),
                        &target.structures,
                    ),
                    error: Some(e.to_string()),
                }
            }
            Err(e) => return Err(e),
        };
        records.push(record);
    }
    Ok(EvalReport::from_records(records))
}
