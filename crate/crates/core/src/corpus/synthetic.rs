//! Seeded generator for compositional semantic-parsing tasks.
//!
//! Programs come from a small typed grammar. Every query is checked against
//! the generated pool: no single pool example covers all of its local
//! structures, while a handful of pool examples jointly cover all of them.

use std::collections::{BTreeMap, HashSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{CandidatePool, Example};
use crate::error::{Error, Result};
use crate::structures::{LocalStructureSet, StructureConfig};
use crate::util::{seeded_rng, Rng};

/// One alternative of a nonterminal: a program symbol applied to argument
/// nonterminals, with an utterance template using `{0}`, `{1}`, ...
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Production {
    pub symbol: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub surface: Option<String>,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticGrammar {
    pub start: String,
    pub rules: BTreeMap<String, Vec<Production>>,
    /// Maximum nesting depth of nonterminal expansions.
    pub max_depth: usize,
    /// Queries with fewer program symbols are rejected.
    #[serde(default = "default_min_query_symbols")]
    pub min_query_symbols: usize,
    /// Number of pool examples that must suffice to cover a query.
    #[serde(default = "default_cover_k")]
    pub cover_k: usize,
    /// Attempts per generated program before giving up.
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

fn default_min_query_symbols() -> usize {
    6
}

fn default_cover_k() -> usize {
    4
}

fn default_retries() -> usize {
    2000
}

impl SyntheticGrammar {
    /// Grammar of counting and existence questions over filtered, related
    /// entities.
    pub fn visual_reasoning() -> Self {
        let p = |symbol: &str, args: &[&str], surface: &str| Production {
            symbol: symbol.to_string(),
            args: args.iter().map(|s| s.to_string()).collect(),
            surface: (!surface.is_empty()).then(|| surface.to_string()),
            weight: 1.0,
        };
        let mut rules = BTreeMap::new();
        rules.insert(
            "Q".to_string(),
            vec![
                p("count", &["S"], "what is the number of {0}"),
                p("exists", &["S"], "is there {0}"),
                p("none", &["S"], "none of the {0}"),
                p("all", &["S", "S"], "all {0} are {1}"),
            ],
        );
        rules.insert(
            "S".to_string(),
            vec![
                p("find", &["E"], "{0}"),
                p("filter", &["A", "S"], "{0} {1}"),
                p("with_relation", &["S", "R", "S"], "{0} that is {1} {2}"),
            ],
        );
        rules.insert(
            "E".to_string(),
            ["dog", "cat", "mouse", "animal"]
                .iter()
                .map(|e| p(e, &[], ""))
                .collect(),
        );
        rules.insert(
            "A".to_string(),
            ["black", "white", "round", "square"]
                .iter()
                .map(|a| p(a, &[], ""))
                .collect(),
        );
        rules.insert(
            "R".to_string(),
            ["playing with", "looking at", "chasing"]
                .iter()
                .map(|r| p(r, &[], ""))
                .collect(),
        );
        SyntheticGrammar {
            start: "Q".to_string(),
            rules,
            max_depth: 5,
            min_query_symbols: default_min_query_symbols(),
            cover_k: default_cover_k(),
            max_retries: default_retries(),
        }
    }

    fn validate(&self) -> Result<BTreeMap<String, usize>> {
        let bad = |m: String| Err(Error::Generation(m));
        if !self.rules.contains_key(&self.start) {
            return bad(format!("start symbol `{}` has no rules", self.start));
        }
        for (nt, prods) in &self.rules {
            if prods.is_empty() {
                return bad(format!("nonterminal `{nt}` has no productions"));
            }
            for prod in prods {
                if prod.symbol.split_whitespace().next().is_none() {
                    return bad(format!("empty symbol in `{nt}`"));
                }
                if !(prod.weight > 0.0) {
                    return bad(format!("non-positive weight for `{}`", prod.symbol));
                }
                if let Some(a) = prod.args.iter().find(|a| !self.rules.contains_key(*a)) {
                    return bad(format!("unknown nonterminal `{a}`"));
                }
            }
        }
        // Minimum expansion height per nonterminal, by fixed point.
        let mut height: BTreeMap<String, usize> = BTreeMap::new();
        loop {
            let mut changed = false;
            for (nt, prods) in &self.rules {
                let best = prods
                    .iter()
                    .filter_map(|p| {
                        p.args
                            .iter()
                            .map(|a| height.get(a).copied())
                            .try_fold(0usize, |acc, h| h.map(|h| acc.max(h)))
                            .map(|h| h + 1)
                    })
                    .min();
                if let Some(b) = best {
                    if height.get(nt).is_none_or(|&h| b < h) {
                        height.insert(nt.clone(), b);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        match height.get(&self.start) {
            Some(&h) if h <= self.max_depth => Ok(height),
            _ => bad("start symbol cannot terminate within max_depth".to_string()),
        }
    }

    fn expand(
        &self,
        nt: &str,
        budget: usize,
        heights: &BTreeMap<String, usize>,
        rng: &mut Rng,
    ) -> (String, String) {
        let feasible: Vec<&Production> = self.rules[nt]
            .iter()
            .filter(|p| p.args.iter().all(|a| heights.get(a).is_some_and(|&h| h < budget)))
            .collect();
        let total: f64 = feasible.iter().map(|p| p.weight).sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = feasible[feasible.len() - 1];
        for p in &feasible {
            if pick < p.weight {
                chosen = p;
                break;
            }
            pick -= p.weight;
        }
        let parts: Vec<(String, String)> = chosen
            .args
            .iter()
            .map(|a| self.expand(a, budget - 1, heights, rng))
            .collect();
        let program = if parts.is_empty() {
            chosen.symbol.clone()
        } else {
            let args: Vec<&str> = parts.iter().map(|(p, _)| p.as_str()).collect();
            format!("{} ( {} )", chosen.symbol, args.join(" , "))
        };
        let surface = match &chosen.surface {
            Some(template) => {
                let mut s = template.clone();
                for (i, (_, sub)) in parts.iter().enumerate() {
                    s = s.replace(&format!("{{{i}}}"), sub);
                }
                s
            }
            None => {
                let mut words = vec![chosen.symbol.clone()];
                words.extend(parts.into_iter().map(|(_, s)| s));
                words.join(" ")
            }
        };
        (program, surface)
    }

    fn sample(&self, heights: &BTreeMap<String, usize>, rng: &mut Rng) -> (String, String) {
        self.expand(&self.start, self.max_depth, heights, rng)
    }
}

fn greedy_cover(target: &LocalStructureSet, pool: &CandidatePool, k: usize) -> Vec<usize> {
    let mut uncovered = target.clone();
    let mut picks = Vec::new();
    for _ in 0..k {
        if uncovered.is_empty() {
            break;
        }
        let best = (0..pool.len())
            .filter(|p| !picks.contains(p))
            .max_by(|&a, &b| {
                let ca = pool.structures(a).intersection_len(&uncovered);
                let cb = pool.structures(b).intersection_len(&uncovered);
                ca.cmp(&cb).then(b.cmp(&a))
            });
        match best {
            Some(p) if pool.structures(p).intersection_len(&uncovered) > 0 => {
                uncovered.subtract(pool.structures(p));
                picks.push(p);
            }
            _ => break,
        }
    }
    if uncovered.is_empty() {
        picks
    } else {
        Vec::new()
    }
}

/// Generates a pool and a query set. Deterministic for a given seed.
pub fn generate_synthetic(
    grammar: &SyntheticGrammar,
    structure_cfg: &StructureConfig,
    n_pool: usize,
    n_queries: usize,
    seed: u64,
) -> Result<(CandidatePool, Vec<Example>)> {
    if n_pool == 0 {
        return Err(Error::Generation("pool size must be positive".into()));
    }
    let heights = grammar.validate()?;
    let mut rng = seeded_rng(seed);
    let mut seen: HashSet<String> = HashSet::new();

    let mut pool_examples = Vec::with_capacity(n_pool);
    let mut attempts = 0;
    while pool_examples.len() < n_pool {
        attempts += 1;
        if attempts > grammar.max_retries.saturating_mul(n_pool.max(1)) {
            return Err(Error::Generation(format!(
                "only {} distinct pool programs after {attempts} attempts",
                pool_examples.len()
            )));
        }
        let (program, surface) = grammar.sample(&heights, &mut rng);
        if seen.insert(program.clone()) {
            pool_examples.push(Example::new(pool_examples.len(), surface, program));
        }
    }
    let pool = CandidatePool::new(pool_examples, structure_cfg.clone())?;

    let mut queries = Vec::with_capacity(n_queries);
    while queries.len() < n_queries {
        let mut accepted = None;
        for _ in 0..grammar.max_retries {
            let (program, surface) = grammar.sample(&heights, &mut rng);
            if seen.contains(&program)
                || crate::program::symbol_token_count(&program)? < grammar.min_query_symbols
            {
                continue;
            }
            let target = structure_cfg.structures_of(&program)?;
            let single_full = (0..pool.len()).any(|p| target.is_subset(pool.structures(p)));
            if single_full {
                continue;
            }
            if greedy_cover(&target, &pool, grammar.cover_k).is_empty() {
                continue;
            }
            accepted = Some((program, surface));
            break;
        }
        let Some((program, surface)) = accepted else {
            return Err(Error::Generation(format!(
                "query {} not composable from the pool after {} attempts",
                queries.len(),
                grammar.max_retries
            )));
        };
        seen.insert(program.clone());
        queries.push(Example::new(queries.len(), surface, program));
    }
    Ok((pool, queries))
}

/// Pool positions greedily covering all of `target` within `k` picks, or an
/// empty list when that is impossible for the greedy rule.
pub fn covering_witness(target: &LocalStructureSet, pool: &CandidatePool, k: usize) -> Vec<usize> {
    greedy_cover(target, pool, k)
}
