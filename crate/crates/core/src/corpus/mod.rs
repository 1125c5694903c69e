//! Examples, candidate pools, dataset loading, BM25 and synthetic tasks.

mod bm25;
mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bm25::{Bm25Index, Bm25Params};
pub use synthetic::{covering_witness, generate_synthetic, Production, SyntheticGrammar};

use crate::error::{Error, Result};
use crate::program::Program;
use crate::structures::{LocalStructureSet, StructureConfig};

/// A source utterance paired with its target program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: usize,
    pub source: String,
    pub target: Program,
}

impl Example {
    pub fn new(id: usize, source: impl Into<String>, target: impl Into<String>) -> Self {
        Example {
            id,
            source: source.into(),
            target: Program::new(target),
        }
    }

    /// Text seen by the example encoders: utterance followed by program.
    pub fn encoder_text(&self) -> String {
        format!("{} {}", self.source, self.target)
    }

    /// Same utterance and program, ignoring ids.
    pub fn same_pair(&self, other: &Example) -> bool {
        self.source == other.source && self.target == other.target
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    source: String,
    target: String,
}

/// Loads a JSON Lines file of `{"source": ..., "target": ...}` records.
/// Ids follow record order; blank lines are skipped.
pub fn load_examples(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_examples(&text, &path.display().to_string())
}

pub fn parse_examples(text: &str, origin: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let format_err = |reason: String| Error::Format {
            path: origin.to_string(),
            line: lineno + 1,
            reason,
        };
        let record: Record =
            serde_json::from_str(line).map_err(|e| format_err(e.to_string()))?;
        let target = Program::new(record.target);
        target
            .parse()
            .map_err(|e| format_err(format!("unparseable target: {e}")))?;
        out.push(Example {
            id: out.len(),
            source: record.source,
            target,
        });
    }
    Ok(out)
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        let record = Record {
            source: ex.source.clone(),
            target: ex.target.0.clone(),
        };
        serde_json::to_writer(&mut file, &record)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Candidate examples with their local structures precomputed.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    examples: Vec<Example>,
    structures: Vec<LocalStructureSet>,
    by_id: HashMap<usize, usize>,
    structure_cfg: StructureConfig,
}

impl CandidatePool {
    pub fn new(examples: Vec<Example>, structure_cfg: StructureConfig) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(examples.len());
        for (pos, ex) in examples.iter().enumerate() {
            if by_id.insert(ex.id, pos).is_some() {
                return Err(Error::Config(format!("duplicate example id {}", ex.id)));
            }
        }
        let structures = examples
            .iter()
            .map(|ex| structure_cfg.structures_of(ex.target.as_str()))
            .collect::<Result<Vec<_>>>()?;
        Ok(CandidatePool {
            examples,
            structures,
            by_id,
            structure_cfg,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// Example at a pool position.
    pub fn get(&self, pos: usize) -> &Example {
        &self.examples[pos]
    }

    /// Pool position of an example id.
    pub fn position(&self, id: usize) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    pub fn by_id(&self, id: usize) -> Option<&Example> {
        self.position(id).map(|p| &self.examples[p])
    }

    /// Cached local structures of the example at `pos`.
    pub fn structures(&self, pos: usize) -> &LocalStructureSet {
        &self.structures[pos]
    }

    pub fn structure_config(&self) -> &StructureConfig {
        &self.structure_cfg
    }

    /// Positions holding the same (source, target) pair as `ex`; these are
    /// masked out when `ex` itself is being served from the pool.
    pub fn positions_of_pair(&self, ex: &Example) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, c)| c.same_pair(ex))
            .map(|(p, _)| p)
            .collect()
    }
}
