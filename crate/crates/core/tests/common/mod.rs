#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use seqret_core::corpus::{CandidatePool, Example};
use seqret_core::encoder::{TriEncoder, Vocabulary};
use seqret_core::util::{seeded_rng, Rng};
use seqret_core::{ProgramTree, StructureConfig};

pub const ALPHABET: &[&str] = &["f", "g", "h", "a", "b", "c"];

/// Random program text with `1..=max_nodes` symbols drawn from `alphabet`.
pub fn random_program(rng: &mut Rng, max_nodes: usize, alphabet: &[&str]) -> String {
    let target = rng.gen_range(1..=max_nodes);
    // Attach each new node under a random existing one.
    let mut children: Vec<Vec<usize>> = vec![Vec::new()];
    for n in 1..target {
        let parent = rng.gen_range(0..n);
        children[parent].push(n);
        children.push(Vec::new());
    }
    let symbols: Vec<&str> = (0..target)
        .map(|_| *alphabet.choose(rng).unwrap())
        .collect();
    render(0, &children, &symbols)
}

fn render(n: usize, children: &[Vec<usize>], symbols: &[&str]) -> String {
    if children[n].is_empty() {
        return symbols[n].to_string();
    }
    let args: Vec<String> = children[n].iter().map(|&c| render(c, children, symbols)).collect();
    format!("{} ( {} )", symbols[n], args.join(" , "))
}

/// Reference extraction: enumerate every node subset and keep those that
/// form a local structure.
pub fn oracle_structures(tree: &ProgramTree, max_size: usize) -> BTreeSet<String> {
    let n = tree.len();
    assert!(n <= 20, "oracle enumerates 2^n subsets");
    let mut out = BTreeSet::new();
    for mask in 1u32..(1u32 << n) {
        let size = mask.count_ones() as usize;
        if size > max_size {
            continue;
        }
        if let Some(key) = subset_key(tree, mask) {
            out.insert(key);
        }
    }
    out
}

fn consecutive_siblings(tree: &ProgramTree, x: usize, y: usize) -> bool {
    match (tree.parent(x), tree.parent(y)) {
        (Some(px), Some(py)) if px == py => {
            let kids = tree.children(px);
            let ix = kids.iter().position(|&c| c == x).unwrap();
            let iy = kids.iter().position(|&c| c == y).unwrap();
            ix.abs_diff(iy) == 1
        }
        _ => false,
    }
}

fn subset_key(tree: &ProgramTree, mask: u32) -> Option<String> {
    let inside = |v: usize| mask & (1 << v) != 0;
    let nodes: Vec<usize> = (0..tree.len()).filter(|&v| inside(v)).collect();
    let is_leaf = |v: usize| !tree.children(v).iter().any(|&c| inside(c));
    let leaves: Vec<usize> = nodes.iter().copied().filter(|&v| is_leaf(v)).collect();
    let internal: Vec<usize> = nodes.iter().copied().filter(|&v| !is_leaf(v)).collect();

    // The virtual root never ends a structure.
    if leaves.contains(&0) {
        return None;
    }
    // Sibling edges may only touch subset leaves.
    for &x in &internal {
        if nodes.iter().any(|&y| consecutive_siblings(tree, x, y)) {
            return None;
        }
    }
    // Connectivity over parent-child and consecutive-sibling edges.
    let mut seen = HashSet::from([nodes[0]]);
    let mut stack = vec![nodes[0]];
    while let Some(v) = stack.pop() {
        for &u in &nodes {
            let adjacent = tree.parent(u) == Some(v)
                || tree.parent(v) == Some(u)
                || consecutive_siblings(tree, u, v);
            if adjacent && seen.insert(u) {
                stack.push(u);
            }
        }
    }
    if seen.len() != nodes.len() {
        return None;
    }
    // Leaves must be joined into one run by sibling edges alone.
    let mut run_seen = HashSet::from([leaves[0]]);
    let mut stack = vec![leaves[0]];
    while let Some(v) = stack.pop() {
        for &u in &leaves {
            if consecutive_siblings(tree, u, v) && run_seen.insert(u) {
                stack.push(u);
            }
        }
    }
    if run_seen.len() != leaves.len() {
        return None;
    }

    // Internal nodes form a chain from the top; order them by depth.
    let mut chain = internal;
    chain.sort_by_key(|&v| tree.depth(v));
    let mut run = leaves;
    if run.len() > 1 {
        let parent = tree.parent(run[0]).unwrap();
        let kids = tree.children(parent);
        run.sort_by_key(|&v| kids.iter().position(|&c| c == v).unwrap());
    }
    let mut key = chain
        .iter()
        .map(|&v| tree.symbol(v).to_string())
        .collect::<Vec<_>>()
        .join(" -> ");
    if !key.is_empty() {
        key.push_str(" -> ");
    }
    key.push_str(
        &run.iter()
            .map(|&v| tree.symbol(v).to_string())
            .collect::<Vec<_>>()
            .join(" <-> "),
    );
    Some(key)
}

pub fn oracle_keys(program: &str, max_size: usize) -> BTreeSet<String> {
    oracle_structures(&ProgramTree::parse(program).unwrap(), max_size)
}

/// Reference greedy trace: at each step score every available candidate by
/// how many still-uncovered target structures it contains.
pub fn oracle_greedy(pool: &CandidatePool, target: &str, k: usize, max_size: usize) -> Vec<usize> {
    let full = oracle_keys(target, max_size);
    let sets: Vec<BTreeSet<String>> = pool
        .examples()
        .iter()
        .map(|e| oracle_keys(e.target.as_str(), max_size))
        .collect();
    let mut uncovered = full.clone();
    let mut trace: Vec<usize> = Vec::new();
    for _ in 0..k {
        let reference = if uncovered.is_empty() { &full } else { &uncovered };
        let mut scored: Vec<(usize, usize, usize)> = (0..pool.len())
            .filter(|p| !trace.contains(p))
            .map(|p| (sets[p].intersection(reference).count(), pool.get(p).id, p))
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let pick = scored[0].2;
        uncovered.retain(|s| !sets[pick].contains(s));
        trace.push(pick);
    }
    trace
}

/// Pool of random programs with shuffled, distinct ids.
pub fn random_pool(rng: &mut Rng, n: usize, max_nodes: usize, max_size: usize) -> CandidatePool {
    let mut ids: Vec<usize> = (0..n * 3).collect();
    ids.shuffle(rng);
    let examples = (0..n)
        .map(|i| {
            let target = random_program(rng, max_nodes, ALPHABET);
            Example::new(ids[i], format!("utterance {i} {}", target.replace(['(', ')', ','], " ")), target)
        })
        .collect();
    CandidatePool::new(examples, StructureConfig::raw(max_size)).unwrap()
}

/// Small tri-encoder with noticeably non-identity weights.
pub fn small_encoder(pool: &CandidatePool, queries: &[Example], dim: usize, lambda: f64, seed: u64) -> TriEncoder {
    let vocab = Vocabulary::from_corpus(pool.examples(), queries);
    let mut rng = seeded_rng(seed);
    let mut tri = TriEncoder::new(vocab, dim, lambda, 0.5, &mut rng).unwrap();
    for slice in tri.slices_mut() {
        for v in slice.iter_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    tri
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between an analytic gradient and central
/// differences of `loss` over every parameter of `tri`.
pub fn max_fd_error(
    tri: &TriEncoder,
    analytic: [&[f64]; 6],
    h: f64,
    mut loss: impl FnMut(&TriEncoder) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = tri.clone();
    for s in 0..6 {
        for i in 0..analytic[s].len() {
            let orig = probe.slices()[s][i];
            probe.slices_mut()[s][i] = orig + h;
            let up = loss(&probe);
            probe.slices_mut()[s][i] = orig - h;
            let down = loss(&probe);
            probe.slices_mut()[s][i] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[s][i], fd));
        }
    }
    worst
}
