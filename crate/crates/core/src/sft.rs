//! Stage 1: supervised training on greedy coverage traces.
//!
//! For each training pair the uncovered set starts as `LS(y)`; at every step
//! the candidate covering the most uncovered structures becomes the positive
//! for the current prefix and its structures are removed from the uncovered
//! set. The tri-encoder is then trained with InfoNCE over in-batch positives
//! plus one BM25-similar, low-coverage hard negative per instance.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Bm25Index, CandidatePool, Example};
use crate::encoder::{EmbeddingGrads, EncodedPool, ParamGradients, TriEncoder};
use crate::error::{Error, Result};
use crate::optim::{linear_decay, Optimizer, OptimizerKind};
use crate::structures::LocalStructureSet;
use crate::util::{seeded_rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    /// Retrieval steps per query.
    #[serde(skip)]
    pub k: usize,
    /// BM25 depth for hard-negative mining.
    pub bm25_depth: usize,
    /// Hard negatives kept per instance.
    pub hard_negatives: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            k: 4,
            bm25_depth: 50,
            hard_negatives: 5,
            batch_size: 64,
            epochs: 120,
            learning_rate: 1e-5,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("sft: {m}")));
        if self.k < 1 {
            return bad("k must be at least 1");
        }
        if self.hard_negatives < 1 || self.hard_negatives > self.bm25_depth {
            return bad("need 1 <= hard_negatives <= bm25_depth");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative");
        }
        Ok(())
    }
}

/// One `(x, Z_{t-1}, c_t)` training tuple. Candidates are pool positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftInstance {
    pub query: String,
    pub prefix: Vec<usize>,
    pub positive: usize,
    pub hard_negatives: Vec<usize>,
}

/// Pool position maximizing `|LS(c) ∩ reference|` among available
/// candidates, lowest id on ties.
fn best_cover(
    pool: &CandidatePool,
    reference: &LocalStructureSet,
    unavailable: &[usize],
) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for pos in 0..pool.len() {
        if unavailable.contains(&pos) {
            continue;
        }
        let count = pool.structures(pos).intersection_len(reference);
        let better = match best {
            None => true,
            Some((bp, bc)) => count > bc || (count == bc && pool.get(pos).id < pool.get(bp).id),
        };
        if better {
            best = Some((pos, count));
        }
    }
    best.map(|(p, _)| p)
}

/// Greedy coverage trace for one target: `k` distinct pool positions.
/// `excluded` positions are never chosen.
pub fn greedy_trace(
    pool: &CandidatePool,
    target: &LocalStructureSet,
    k: usize,
    excluded: &[usize],
) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut uncovered = target.clone();
    let mut unavailable = excluded.to_vec();
    let mut trace = Vec::with_capacity(k);
    for _ in 0..k {
        // Once everything is covered, fall back to coverage of the full target.
        let reference = if uncovered.is_empty() { target } else { &uncovered };
        let pick = best_cover(pool, reference, &unavailable).ok_or(Error::PoolTooSmall {
            pool: pool.len() - excluded.len().min(pool.len()),
            k,
        })?;
        uncovered.subtract(pool.structures(pick));
        unavailable.push(pick);
        trace.push(pick);
    }
    Ok(trace)
}

/// BM25 top-`depth` candidates for `x`, re-ranked by ascending coverage of
/// `LS(y)` (ties by ascending id), first `count` kept.
pub fn mine_hard_negatives(
    pool: &CandidatePool,
    index: &Bm25Index,
    query: &str,
    target: &LocalStructureSet,
    depth: usize,
    count: usize,
    excluded: &[usize],
) -> Vec<usize> {
    let mut ranked: Vec<(usize, usize, usize)> = index
        .top_k(query, depth + excluded.len())
        .into_iter()
        .filter_map(|(id, _)| pool.position(id))
        .filter(|p| !excluded.contains(p))
        .take(depth)
        .map(|p| (pool.structures(p).intersection_len(target), pool.get(p).id, p))
        .collect();
    ranked.sort();
    ranked.into_iter().take(count).map(|(_, _, p)| p).collect()
}

/// BM25 index over pool utterances, keyed by example id.
pub fn pool_index(pool: &CandidatePool, params: crate::corpus::Bm25Params) -> Bm25Index {
    Bm25Index::build(
        pool.examples().iter().map(|e| (e.id, e.source.as_str())),
        params,
    )
}

/// Builds the SFT dataset: exactly `k` instances per training pair. Pool
/// entries identical to the pair are masked (leave-one-out).
pub fn build_sft_dataset(
    pool: &CandidatePool,
    index: &Bm25Index,
    pairs: &[Example],
    cfg: &SftConfig,
) -> Result<Vec<SftInstance>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let structure_cfg = pool.structure_config();
    let mut out = Vec::with_capacity(pairs.len() * cfg.k);
    for pair in pairs {
        let target = structure_cfg.structures_of(pair.target.as_str())?;
        let own = pool.positions_of_pair(pair);
        let trace = greedy_trace(pool, &target, cfg.k, &own)?;
        for t in 0..trace.len() {
            let prefix = trace[..t].to_vec();
            let mut excluded = own.clone();
            excluded.extend_from_slice(&trace[..=t]);
            let hard_negatives = mine_hard_negatives(
                pool,
                index,
                &pair.source,
                &target,
                cfg.bm25_depth,
                cfg.hard_negatives,
                &excluded,
            );
            out.push(SftInstance {
                query: pair.source.clone(),
                prefix,
                positive: trace[t],
                hard_negatives,
            });
        }
    }
    Ok(out)
}

/// Mean InfoNCE loss over a batch and its gradient. Each instance scores its
/// positive against the other instances' positives and one hard negative
/// drawn from its own list; candidates equal to the positive or already in
/// the prefix are dropped from the negative set.
pub fn infonce_loss(
    tri: &TriEncoder,
    batch: &[SftInstance],
    pool: &EncodedPool,
    rng: &mut Rng,
) -> Result<(f64, ParamGradients)> {
    if batch.is_empty() {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    let mut grads = EmbeddingGrads::new(pool.len(), tri.dim());
    let mut losses = Vec::with_capacity(batch.len());
    let mut pending = Vec::with_capacity(batch.len());
    for (i, inst) in batch.iter().enumerate() {
        let mut candidates = vec![inst.positive];
        let sampled = inst.hard_negatives.choose(rng).copied();
        let others = batch
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, b)| b.positive);
        for c in others.chain(sampled) {
            if !candidates.contains(&c) && !inst.prefix.contains(&c) {
                candidates.push(c);
            }
        }
        if candidates.len() == 1 {
            continue;
        }
        let (tokens, q) = tri.encode_query(&inst.query);
        let state = tri.state(&q, &inst.prefix, pool);
        let logits: Vec<f64> = candidates
            .iter()
            .map(|&c| crate::encoder::dot(&pool.candidate[c], &state))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_norm = max + sum.ln();
        losses.push(log_norm - logits[0]);
        let dlogits: Vec<(usize, f64)> = candidates
            .iter()
            .zip(&logits)
            .enumerate()
            .map(|(n, (&c, &l))| (c, (l - log_norm).exp() - if n == 0 { 1.0 } else { 0.0 }))
            .collect();
        pending.push((tokens, state, inst, dlogits));
    }
    if pending.is_empty() {
        return Err(Error::DegenerateBatch(
            "every instance's negatives coincide with its positive".into(),
        ));
    }
    let scale = 1.0 / pending.len() as f64;
    for (tokens, state, inst, mut dlogits) in pending {
        dlogits.iter_mut().for_each(|(_, g)| *g *= scale);
        let slot = grads.add_query(tokens);
        tri.accumulate_logit_grads(&state, slot, &inst.prefix, pool, &dlogits, &mut grads);
    }
    let loss = losses.iter().sum::<f64>() * scale;
    Ok((loss, tri.finish_grads(&grads, pool)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch training with linear learning-rate decay to zero.
pub fn train_sft(
    tri: &mut TriEncoder,
    pool: &CandidatePool,
    dataset: &[SftInstance],
    cfg: &SftConfig,
) -> Result<SftReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::DegenerateBatch("empty SFT dataset".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let batches_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SftInstance> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let encoded = tri.encode_pool(pool);
            let (loss, grads) = match infonce_loss(tri, &batch, &encoded, &mut rng) {
                Ok(v) => v,
                Err(Error::DegenerateBatch(reason)) => {
                    log::warn!("epoch {epoch} step {step}: skipping batch ({reason})");
                    step += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    value: loss,
                });
            }
            let lr = linear_decay(cfg.learning_rate, step, total_steps);
            if lr > 0.0 {
                optimizer.step(tri, &grads, lr);
            }
            epoch_loss += loss * batch.len() as f64;
            counted += batch.len();
            step += 1;
        }
        let mean = if counted > 0 { epoch_loss / counted as f64 } else { 0.0 };
        log::debug!("sft epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(SftReport { epoch_losses })
}

/// Inspection/replay record; candidates are referenced by example id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub query: String,
    pub prefix_ids: Vec<usize>,
    pub positive_id: usize,
    pub hard_negative_ids: Vec<usize>,
}

pub fn write_sft_dataset(
    path: impl AsRef<Path>,
    pool: &CandidatePool,
    dataset: &[SftInstance],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let id = |p: &usize| pool.get(*p).id;
    for inst in dataset {
        let rec = SftRecord {
            query: inst.query.clone(),
            prefix_ids: inst.prefix.iter().map(id).collect(),
            positive_id: id(&inst.positive),
            hard_negative_ids: inst.hard_negatives.iter().map(id).collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sft_dataset(path: impl AsRef<Path>, pool: &CandidatePool) -> Result<Vec<SftInstance>> {
    let path = path.as_ref();
    let file = std::io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Format {
            path: path.display().to_string(),
            line: n + 1,
            reason,
        };
        let rec: SftRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let pos = |id: usize| pool.position(id).ok_or_else(|| err(format!("unknown pool id {id}")));
        out.push(SftInstance {
            query: rec.query,
            prefix: rec.prefix_ids.into_iter().map(pos).collect::<Result<_>>()?,
            positive: pos(rec.positive_id)?,
            hard_negatives: rec.hard_negative_ids.into_iter().map(pos).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Bm25Params;
    use crate::encoder::Vocabulary;
    use crate::structures::{LocalStructure, StructureConfig};

    fn ls(keys: &[&str]) -> LocalStructureSet {
        LocalStructureSet::from_members(
            keys.iter().map(|k| LocalStructure {
                key: k.to_string(),
                size: 1,
            }),
            1,
        )
    }

    #[test]
    fn greedy_trace_hand_example() {
        // Targets use size-1 structures only: cand0 -> {a,b}, cand1 -> {c},
        // cand2 -> {b,c}; target {a,b,c,d}.
        let pool = CandidatePool::new(
            vec![
                Example::new(0, "x", "f ( a , b )"),
                Example::new(1, "y", "c"),
                Example::new(2, "z", "g ( b , c )"),
            ],
            StructureConfig::raw(1),
        )
        .unwrap();
        let target = ls(&["a", "b", "c", "d"]);
        // cand0 covers {a, b} (+ f, not in target); cand2 covers {b, c}: tie at
        // 2, lowest id wins. Then cand1 and cand2 both cover {c}: cand1 wins.
        let trace = greedy_trace(&pool, &target, 2, &[]).unwrap();
        assert_eq!(trace, vec![0, 1]);
    }

    #[test]
    fn full_cover_empties_uncovered_set() {
        let cfg = StructureConfig::raw(2);
        let pool = CandidatePool::new(
            vec![
                Example::new(0, "x", "h ( z )"),
                Example::new(1, "y", "count ( find ( dog ) )"),
                Example::new(2, "w", "find ( cat )"),
            ],
            cfg.clone(),
        )
        .unwrap();
        let target = cfg.structures_of("count ( find ( dog ) )").unwrap();
        let trace = greedy_trace(&pool, &target, 3, &[]).unwrap();
        assert_eq!(trace[0], 1);
        // Remaining steps rank by coverage of the full target.
        assert_eq!(trace[1], 2);
        assert_eq!(trace[2], 0);
    }

    #[test]
    fn leave_one_out_masks_own_entry() {
        let cfg = StructureConfig::raw(2);
        let pool = CandidatePool::new(
            vec![Example::new(0, "a dog", "find ( dog )"), Example::new(1, "b", "find ( cat )")],
            cfg,
        )
        .unwrap();
        let index = pool_index(&pool, Bm25Params::default());
        let sft = SftConfig {
            k: 1,
            bm25_depth: 2,
            hard_negatives: 1,
            ..Default::default()
        };
        let data = build_sft_dataset(&pool, &index, &[pool.get(0).clone()], &sft).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data[0].positive, 1);
        assert!(data[0].hard_negatives.is_empty());
    }

    #[test]
    fn empty_pool_is_error() {
        let pool = CandidatePool::new(vec![], StructureConfig::raw(2)).unwrap();
        let index = pool_index(&pool, Bm25Params::default());
        let res = build_sft_dataset(&pool, &index, &[Example::new(0, "a", "b")], &SftConfig::default());
        assert!(matches!(res, Err(Error::EmptyPool)));
    }

    fn mining_pool() -> CandidatePool {
        // Ten candidates sharing the query word; coverage of target `f ( a , b )`
        // varies with how many of f/a/b they contain.
        let targets = [
            "f ( a , b )", "z", "f ( a )", "a", "q ( r )", "f ( b )", "b", "y", "f", "x ( a , b )",
        ];
        let ex = targets
            .iter()
            .enumerate()
            .map(|(i, t)| Example::new(i, format!("word w{i}"), *t))
            .collect();
        CandidatePool::new(ex, StructureConfig::raw(1)).unwrap()
    }

    #[test]
    fn hard_negatives_match_sort_oracle() {
        let pool = mining_pool();
        let index = pool_index(&pool, Bm25Params::default());
        let target = StructureConfig::raw(1).structures_of("f ( a , b )").unwrap();
        let got = mine_hard_negatives(&pool, &index, "word", &target, 10, 5, &[]);
        let mut oracle: Vec<(usize, usize)> = (0..pool.len())
            .map(|p| (pool.structures(p).intersection_len(&target), p))
            .collect();
        oracle.sort();
        let expected: Vec<usize> = oracle.iter().take(5).map(|x| x.1).collect();
        assert_eq!(got, expected);
        assert_eq!(got, vec![1, 4, 7, 3, 6]);
    }

    #[test]
    fn hard_negatives_simple_cases() {
        let pool = mining_pool();
        let index = pool_index(&pool, Bm25Params::default());
        let nothing = StructureConfig::raw(1).structures_of("zzz").unwrap();
        // All zero coverage: first B by id.
        assert_eq!(mine_hard_negatives(&pool, &index, "word", &nothing, 10, 3, &[]), [0, 1, 2]);
        // H = 2 over documents 0 and 9 (their ids are queried directly).
        let target = StructureConfig::raw(1).structures_of("f ( a , b )").unwrap();
        let got = mine_hard_negatives(&pool, &index, "w0 w1", &target, 2, 1, &[]);
        assert_eq!(got, [1]);
    }

    fn tiny_setup() -> (TriEncoder, CandidatePool) {
        let pool = CandidatePool::new(
            vec![
                Example::new(0, "red box", "f ( a )"),
                Example::new(1, "blue box", "g ( b )"),
                Example::new(2, "green ball", "h ( c )"),
            ],
            StructureConfig::raw(2),
        )
        .unwrap();
        let vocab = Vocabulary::from_corpus(pool.examples(), &[]);
        let tri = TriEncoder::new(vocab, 4, 0.1, 0.2, &mut seeded_rng(1)).unwrap();
        (tri, pool)
    }

    #[test]
    fn uniform_logits_give_log_m_plus_one() {
        let (mut tri, pool) = tiny_setup();
        for v in &mut tri.candidate_enc.embeddings.data {
            *v = 0.0;
        }
        let enc = tri.encode_pool(&pool);
        let batch = vec![
            SftInstance { query: "red".into(), prefix: vec![], positive: 0, hard_negatives: vec![2] },
            SftInstance { query: "blue".into(), prefix: vec![], positive: 1, hard_negatives: vec![2] },
        ];
        let (loss, _) = infonce_loss(&tri, &batch, &enc, &mut seeded_rng(0)).unwrap();
        // Each instance: positive + other positive + hard negative.
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_batch() {
        let (tri, pool) = tiny_setup();
        let enc = tri.encode_pool(&pool);
        let batch = vec![
            SftInstance { query: "red".into(), prefix: vec![], positive: 0, hard_negatives: vec![] },
            SftInstance { query: "blue".into(), prefix: vec![], positive: 0, hard_negatives: vec![] },
        ];
        assert!(matches!(
            infonce_loss(&tri, &batch, &enc, &mut seeded_rng(0)),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut tri, pool) = tiny_setup();
        let before = tri.clone();
        let data = vec![SftInstance {
            query: "red".into(),
            prefix: vec![],
            positive: 0,
            hard_negatives: vec![1, 2],
        }];
        let cfg = SftConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..Default::default()
        };
        train_sft(&mut tri, &pool, &data, &cfg).unwrap();
        assert_eq!(tri, before);
    }

    #[test]
    fn dump_round_trip() {
        let (_, pool) = tiny_setup();
        let data = vec![SftInstance {
            query: "red".into(),
            prefix: vec![2],
            positive: 0,
            hard_negatives: vec![1],
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sft.jsonl");
        write_sft_dataset(&path, &pool, &data).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.trim(),
            r#"{"query":"red","prefix_ids":[2],"positive_id":0,"hard_negative_ids":[1]}"#
        );
        assert_eq!(read_sft_dataset(&path, &pool).unwrap(), data);
    }
}
