//! Local structures: small connected subgraphs of a program tree augmented
//! with edges between consecutive siblings.
//!
//! A node subset qualifies when it is connected and sibling edges inside it
//! join only subset leaves (nodes with no child in the subset), with all
//! leaves forming one run of consecutive siblings. Every such subgraph is a
//! downward path, optionally ending in a run of two or more consecutive
//! children, or a bare run of consecutive siblings. Keys use `->` for
//! parent-child and `<->` for sibling edges:
//!
//! ```text
//! count -> with_relation
//! filter -> black <-> find
//! filter <-> playing <-> find
//! ```

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::program::{AnonymizationLexicon, NodeId, ProgramTree};

pub const CHILD_EDGE: &str = " -> ";
pub const SIBLING_EDGE: &str = " <-> ";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LocalStructure {
    pub key: String,
    pub size: usize,
}

impl fmt::Display for LocalStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key)
    }
}

/// One occurrence of a local structure in a particular tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureInstance {
    pub structure: LocalStructure,
    /// Path nodes from the top down, followed by the sibling run if any.
    pub nodes: Vec<NodeId>,
    /// Topmost node; for a bare sibling run, the first sibling.
    pub top: NodeId,
    /// Number of leading `nodes` that form the downward path; zero for a
    /// bare sibling run.
    pub path_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LocalStructureSet {
    members: BTreeSet<LocalStructure>,
    max_size: usize,
}

impl LocalStructureSet {
    pub fn empty(max_size: usize) -> Self {
        LocalStructureSet {
            members: BTreeSet::new(),
            max_size,
        }
    }

    pub fn from_members(members: impl IntoIterator<Item = LocalStructure>, max_size: usize) -> Self {
        LocalStructureSet {
            members: members.into_iter().collect(),
            max_size,
        }
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LocalStructure> {
        self.members.iter()
    }

    pub fn contains(&self, s: &LocalStructure) -> bool {
        self.members.contains(s)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.members.iter().any(|m| m.key == key)
    }

    pub fn insert(&mut self, s: LocalStructure) -> bool {
        self.members.insert(s)
    }

    pub fn intersection_len(&self, other: &Self) -> usize {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.members.iter().filter(|m| large.members.contains(m)).count()
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.members.is_subset(&other.members)
    }

    /// Removes every member of `other` from `self`.
    pub fn subtract(&mut self, other: &Self) {
        self.members.retain(|m| !other.members.contains(m));
    }

    pub fn extend_from(&mut self, other: &Self) {
        self.members.extend(other.members.iter().cloned());
    }

    /// `|a ∩ b| / |a ∪ b|`, defined as 1 when both sets are empty.
    pub fn jaccard(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.max_size, other.max_size);
        let inter = self.intersection_len(other);
        let union = self.len() + other.len() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Members grouped by size, one structure per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for size in 1..=self.max_size {
            for m in self.members.iter().filter(|m| m.size == size) {
                out.push_str(&m.key);
                out.push('\n');
            }
        }
        out
    }
}

impl<'a> IntoIterator for &'a LocalStructureSet {
    type Item = &'a LocalStructure;
    type IntoIter = std::collections::btree_set::Iter<'a, LocalStructure>;

    fn into_iter(self) -> Self::IntoIter {
        self.members.iter()
    }
}

fn make_key(tree: &ProgramTree, path: &[NodeId], run: &[NodeId]) -> String {
    let mut key = String::new();
    for (i, &n) in path.iter().enumerate() {
        if i > 0 {
            key.push_str(CHILD_EDGE);
        }
        key.push_str(tree.symbol(n));
    }
    if !run.is_empty() {
        if !path.is_empty() {
            key.push_str(CHILD_EDGE);
        }
        for (i, &n) in run.iter().enumerate() {
            if i > 0 {
                key.push_str(SIBLING_EDGE);
            }
            key.push_str(tree.symbol(n));
        }
    }
    key
}

fn instance(tree: &ProgramTree, path: &[NodeId], run: &[NodeId]) -> StructureInstance {
    let mut nodes = path.to_vec();
    nodes.extend_from_slice(run);
    StructureInstance {
        structure: LocalStructure {
            key: make_key(tree, path, run),
            size: nodes.len(),
        },
        top: nodes[0],
        nodes,
        path_len: path.len(),
    }
}

/// Every occurrence of a local structure with at most `max_size` nodes.
pub fn structure_instances(tree: &ProgramTree, max_size: usize) -> Result<Vec<StructureInstance>> {
    if max_size < 1 {
        return Err(Error::Size(max_size));
    }
    let mut out = Vec::new();
    let mut path = Vec::with_capacity(max_size);
    for start in 0..tree.len() {
        path.clear();
        path.push(start);
        extend_paths(tree, &mut path, max_size, &mut out);
        // Bare runs of consecutive siblings.
        let children = tree.children(start);
        for i in 0..children.len() {
            for j in i + 2..=children.len().min(i + max_size) {
                out.push(instance(tree, &[], &children[i..j]));
            }
        }
    }
    Ok(out)
}

fn extend_paths(
    tree: &ProgramTree,
    path: &mut Vec<NodeId>,
    max_size: usize,
    out: &mut Vec<StructureInstance>,
) {
    let last = *path.last().expect("non-empty path");
    // The virtual root is never a leaf of a structure.
    if !(path.len() == 1 && last == tree.root()) {
        out.push(instance(tree, path, &[]));
    }
    if path.len() >= max_size {
        return;
    }
    let children = tree.children(last);
    let room = max_size - path.len();
    for i in 0..children.len() {
        for j in i + 2..=children.len().min(i + room) {
            out.push(instance(tree, path, &children[i..j]));
        }
    }
    for &c in children {
        path.push(c);
        extend_paths(tree, path, max_size, out);
        path.pop();
    }
}

/// `LS^l(tree)`: the set of local structures with at most `max_size` nodes.
pub fn extract_local_structures(tree: &ProgramTree, max_size: usize) -> Result<LocalStructureSet> {
    let instances = structure_instances(tree, max_size)?;
    Ok(LocalStructureSet::from_members(
        instances.into_iter().map(|i| i.structure),
        max_size,
    ))
}

/// `|candidate ∩ uncovered|`.
pub fn coverage_count(candidate: &LocalStructureSet, uncovered: &LocalStructureSet) -> usize {
    candidate.intersection_len(uncovered)
}

/// Settings shared by every structural comparison.
#[derive(Debug, Clone)]
pub struct StructureConfig {
    pub max_size: usize,
    pub anonymize: bool,
    pub lexicon: AnonymizationLexicon,
}

impl StructureConfig {
    pub fn new(max_size: usize, anonymize: bool, lexicon: AnonymizationLexicon) -> Self {
        StructureConfig {
            max_size,
            anonymize,
            lexicon,
        }
    }

    /// Raw-symbol comparison with no lexicon.
    pub fn raw(max_size: usize) -> Self {
        Self::new(max_size, false, AnonymizationLexicon::identity())
    }

    pub fn prepare(&self, tree: &ProgramTree) -> ProgramTree {
        if self.anonymize {
            tree.anonymize(&self.lexicon)
        } else {
            tree.clone()
        }
    }

    /// Local structures of program text under this configuration.
    pub fn structures_of(&self, program: &str) -> Result<LocalStructureSet> {
        let tree = ProgramTree::parse(program)?;
        extract_local_structures(&self.prepare(&tree), self.max_size)
    }
}

/// Jaccard similarity between the local structures of a generated and a gold
/// program. An unparseable generation scores 0.
pub fn structural_reward(generated: &str, gold: &str, cfg: &StructureConfig) -> Result<f64> {
    let gold_set = cfg.structures_of(gold)?;
    Ok(match cfg.structures_of(generated) {
        Ok(gen_set) => gen_set.jaccard(&gold_set),
        Err(Error::Parse(_)) => 0.0,
        Err(e) => return Err(e),
    })
}

/// Fraction of `target` covered by the union of `context`; 1 for an empty
/// target.
pub fn union_coverage(context: &[&LocalStructureSet], target: &LocalStructureSet) -> f64 {
    if target.is_empty() {
        return 1.0;
    }
    let covered = target
        .iter()
        .filter(|s| context.iter().any(|c| c.contains(s)))
        .count();
    covered as f64 / target.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    const COVR: &str =
        "count ( with_relation ( filter ( black , find ( mouse ) ) , playing with , find ( dog ) ) )";

    fn keys(program: &str, l: usize, size: usize) -> BTreeSet<String> {
        let tree = ProgramTree::parse(program).unwrap();
        extract_local_structures(&tree, l)
            .unwrap()
            .iter()
            .filter(|s| s.size == size)
            .map(|s| s.key.clone())
            .collect()
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn size_one_block() {
        let got = keys(COVR, 1, 1);
        assert_eq!(
            got,
            set(&["count", "with_relation", "filter", "black", "find", "mouse", "playing", "with", "dog"])
        );
    }

    #[test]
    fn size_two_block() {
        let got = keys(COVR, 2, 2);
        let expected = set(&[
            "<root> -> count",
            "count -> with_relation",
            "filter -> black",
            "filter -> find",
            "find -> dog",
            "find -> mouse",
            "playing -> with",
            "with_relation -> filter",
            "with_relation -> find",
            "with_relation -> playing",
            "black <-> find",
            "filter <-> playing",
            "playing <-> find",
        ]);
        assert_eq!(got, expected);
        assert!(!got.contains("filter <-> find"));
    }

    #[test]
    fn single_node_program() {
        let tree = ProgramTree::parse("dog").unwrap();
        let ls = extract_local_structures(&tree, 1).unwrap();
        assert_eq!(ls.iter().map(|s| s.key.as_str()).collect::<Vec<_>>(), ["dog"]);
        // The root edge is a structure like `<root> -> count` in larger trees.
        for l in 2..5 {
            let ls = extract_local_structures(&tree, l).unwrap();
            assert_eq!(
                ls.iter().map(|s| s.key.as_str()).collect::<Vec<_>>(),
                ["<root> -> dog", "dog"]
            );
        }
    }

    #[test]
    fn zero_size_rejected() {
        let tree = ProgramTree::parse("dog").unwrap();
        assert!(matches!(extract_local_structures(&tree, 0), Err(Error::Size(0))));
    }

    #[test]
    fn jaccard_cases() {
        let cfg = StructureConfig::raw(2);
        let a = cfg.structures_of("find ( dog )").unwrap();
        let b = cfg.structures_of("find ( cat )").unwrap();
        assert_eq!(a.jaccard(&a), 1.0);
        assert!((a.jaccard(&b) - 1.0 / 3.0).abs() < 1e-12);
        let c = cfg.structures_of("g ( h )").unwrap();
        assert_eq!(a.jaccard(&c), 0.0);
        assert_eq!(LocalStructureSet::empty(2).jaccard(&LocalStructureSet::empty(2)), 1.0);
    }

    #[test]
    fn coverage_cases() {
        let cfg = StructureConfig::raw(2);
        let cand = cfg.structures_of("find ( dog )").unwrap();
        let target = cfg.structures_of("count ( find ( dog ) )").unwrap();
        assert_eq!(coverage_count(&cand, &target), 3);
        assert_eq!(coverage_count(&cand, &LocalStructureSet::empty(2)), 0);
        assert_eq!(coverage_count(&target, &target), target.len());
    }

    #[test]
    fn reward_cases() {
        let cfg = StructureConfig::raw(2);
        assert_eq!(structural_reward(COVR, COVR, &cfg).unwrap(), 1.0);
        assert_eq!(structural_reward("", COVR, &cfg).unwrap(), 0.0);
        assert_eq!(structural_reward("f ( (", COVR, &cfg).unwrap(), 0.0);
        let r = structural_reward("find ( dog )", "find ( cat )", &cfg).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-12);
        assert!(structural_reward("dog", "f (", &cfg).is_err());
    }

    #[test]
    fn longer_generation_is_penalized() {
        let cfg = StructureConfig::raw(4);
        let gold = "count ( find ( dog ) )";
        let longer = "count ( filter ( black , find ( dog ) ) )";
        assert!(structural_reward(longer, gold, &cfg).unwrap() < 1.0);
    }

    #[test]
    fn union_coverage_counts_fraction() {
        let cfg = StructureConfig::raw(2);
        let target = cfg.structures_of("count ( find ( dog ) )").unwrap();
        let a = cfg.structures_of("find ( dog )").unwrap();
        let b = cfg.structures_of("count ( find ( cat ) )").unwrap();
        assert!((union_coverage(&[&a], &target) - 0.5).abs() < 1e-12);
        assert_eq!(union_coverage(&[&a, &b], &target), 1.0);
        assert_eq!(union_coverage(&[], &target), 0.0);
    }
}
