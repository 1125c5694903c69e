//! Reward environments: score a retrieved context for a query.

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::llm::{build_prompt, CompletionClient};
use crate::program::ProgramTree;
use crate::structures::{
    structure_instances, union_coverage, LocalStructureSet, StructureConfig, StructureInstance,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Coverage,
    Composer,
    Llm,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coverage" => Ok(EnvKind::Coverage),
            "composer" => Ok(EnvKind::Composer),
            "llm" => Ok(EnvKind::Llm),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }
}

/// A gold program with its prepared tree and structure occurrences.
#[derive(Debug, Clone)]
pub struct Target {
    pub program: String,
    pub structures: LocalStructureSet,
    tree: ProgramTree,
    instances: Vec<StructureInstance>,
}

impl Target {
    pub fn new(gold: &str, cfg: &StructureConfig) -> Result<Self> {
        let tree = cfg.prepare(&ProgramTree::parse(gold)?);
        let instances = structure_instances(&tree, cfg.max_size)?;
        let structures = LocalStructureSet::from_members(
            instances.iter().map(|i| i.structure.clone()),
            cfg.max_size,
        );
        Ok(Target {
            program: gold.to_string(),
            structures,
            tree,
            instances,
        })
    }

    /// Largest covered structure with a single top node, preferring the one
    /// rooted highest, then the earliest; rendered as program text. Empty
    /// when nothing qualifies.
    pub fn covered_fragment(&self, covered: &dyn Fn(&str) -> bool) -> String {
        let best = self
            .instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.path_len > 0 && covered(&inst.structure.key))
            .min_by_key(|(i, inst)| {
                (std::cmp::Reverse(inst.structure.size), self.tree.depth(inst.top), *i)
            });
        match best {
            Some((_, inst)) => self.render(inst),
            None => String::new(),
        }
    }

    fn render(&self, inst: &StructureInstance) -> String {
        let mut path = &inst.nodes[..inst.path_len];
        let run = &inst.nodes[inst.path_len..];
        if path.first() == Some(&self.tree.root()) {
            path = &path[1..];
        }
        let mut out = String::new();
        for (i, &n) in path.iter().enumerate() {
            if i > 0 {
                out.push_str(" ( ");
            }
            out.push_str(self.tree.symbol(n));
        }
        if !run.is_empty() {
            out.push_str(" ( ");
            let names: Vec<&str> = run.iter().map(|&n| self.tree.symbol(n)).collect();
            out.push_str(&names.join(" , "));
            out.push_str(" )");
        }
        for _ in 1..path.len() {
            out.push_str(" )");
        }
        out
    }
}

/// What an environment produced for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    /// Generated program; `None` for the coverage environment.
    pub prediction: Option<String>,
    pub reward: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone)]
pub enum Environment {
    /// Reward is the fraction of the target's structures covered by the
    /// union of the context.
    Coverage,
    /// Emits the gold program once coverage reaches `threshold`, otherwise
    /// the largest covered fragment of it.
    Composer { threshold: f64 },
    /// Prompts a completion endpoint.
    ExternalLlm(CompletionClient),
}

impl Environment {
    pub fn kind(&self) -> EnvKind {
        match self {
            Environment::Coverage => EnvKind::Coverage,
            Environment::Composer { .. } => EnvKind::Composer,
            Environment::ExternalLlm(_) => EnvKind::Llm,
        }
    }

    /// Scores `context` (in retrieval order) for `query`. `context_structures`
    /// are the context examples' local structures under `cfg`.
    pub fn respond(
        &self,
        context: &[&Example],
        context_structures: &[&LocalStructureSet],
        query: &str,
        target: &Target,
        cfg: &StructureConfig,
    ) -> Result<Response> {
        let coverage = union_coverage(context_structures, &target.structures);
        let (prediction, reward) = match self {
            Environment::Coverage => (None, coverage),
            Environment::Composer { threshold } => {
                let prediction = if coverage >= *threshold {
                    target.program.clone()
                } else {
                    target.covered_fragment(&|key| context_structures.iter().any(|s| s.contains_key(key)))
                };
                let reward = score(&prediction, target, cfg)?;
                (Some(prediction), reward)
            }
            Environment::ExternalLlm(client) => {
                let prediction = client.complete(&build_prompt(context, query))?;
                let reward = score(&prediction, target, cfg)?;
                (Some(prediction), reward)
            }
        };
        Ok(Response {
            prediction,
            reward,
            coverage,
        })
    }
}

/// Structural reward of `prediction` against a prepared target.
pub fn score(prediction: &str, target: &Target, cfg: &StructureConfig) -> Result<f64> {
    match cfg.structures_of(prediction) {
        Ok(set) => Ok(set.jaccard(&target.structures)),
        Err(Error::Parse(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Reward of a context for one query and gold program.
pub fn env_reward(
    env: &Environment,
    context: &[Example],
    query: &str,
    gold: &str,
    cfg: &StructureConfig,
) -> Result<f64> {
    let target = Target::new(gold, cfg)?;
    let sets = context
        .iter()
        .map(|e| cfg.structures_of(e.target.as_str()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Example> = context.iter().collect();
    let set_refs: Vec<&LocalStructureSet> = sets.iter().collect();
    Ok(env.respond(&refs, &set_refs, query, &target, cfg)?.reward)
}
