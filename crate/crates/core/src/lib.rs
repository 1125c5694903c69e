//! Sequential compositional retrieval of in-context demonstrations.
//!
//! Retrieval is modeled as a sequential decision process over a candidate
//! pool: a tri-encoder policy picks one demonstration at a time, conditioned
//! on the query and on what it already picked. The policy is trained first
//! by contrastive learning on greedy local-structure-coverage traces and then
//! by group-relative policy optimization against a structural reward.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod llm;
pub mod optim;
pub mod program;
pub mod retrieval;
pub mod rl;
pub mod sft;
pub mod structures;
pub mod util;

pub use error::{Error, ParseError, Result};
pub use program::{AnonymizationLexicon, Program, ProgramTree};
pub use structures::{extract_local_structures, LocalStructure, LocalStructureSet, StructureConfig};
