//! Run configuration: one TOML file holding every tunable and artifact path.
//! Relative paths resolve against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Bm25Params, SyntheticGrammar};
use crate::error::{Error, Result};
use crate::llm::ClientConfig;
use crate::program::AnonymizationLexicon;
use crate::rl::{EnvKind, RlConfig};
use crate::sft::SftConfig;
use crate::structures::StructureConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub pool: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub sft_dataset: PathBuf,
    pub sft_log: PathBuf,
    pub sft_checkpoint: PathBuf,
    pub dense_checkpoint: PathBuf,
    pub rl_checkpoint: PathBuf,
    pub rl_log: PathBuf,
    pub retrievals: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            pool: "data/pool.jsonl".into(),
            train: "data/train.jsonl".into(),
            test: "data/test.jsonl".into(),
            sft_dataset: "out/sft.jsonl".into(),
            sft_log: "out/sft_log.jsonl".into(),
            sft_checkpoint: "out/sft.ckpt".into(),
            dense_checkpoint: "out/dense.ckpt".into(),
            rl_checkpoint: "out/rl.ckpt".into(),
            rl_log: "out/rl_log.jsonl".into(),
            retrievals: "out/retrievals.jsonl".into(),
            report: "out/report.jsonl".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.pool,
            &mut self.train,
            &mut self.test,
            &mut self.sft_dataset,
            &mut self.sft_log,
            &mut self.sft_checkpoint,
            &mut self.dense_checkpoint,
            &mut self.rl_checkpoint,
            &mut self.rl_log,
            &mut self.retrievals,
            &mut self.report,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureSection {
    /// Maximum local-structure size `l`.
    pub max_size: usize,
    pub anonymize: bool,
    /// `identity`, `covr`, or a path to a JSON lexicon.
    pub lexicon: String,
}

impl Default for StructureSection {
    fn default() -> Self {
        StructureSection {
            max_size: 4,
            anonymize: false,
            lexicon: "identity".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub dim: usize,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            dim: 64,
            lambda: 0.1,
            tau: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    /// `visual-reasoning` or a path to a JSON grammar.
    pub grammar: String,
    pub pool: usize,
    pub queries: usize,
    /// How many of the generated queries go to the training split.
    pub train_queries: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            grammar: "visual-reasoning".into(),
            pool: 200,
            queries: 128,
            train_queries: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub kind: EnvKind,
    /// Coverage at which the composer emits the gold program.
    pub threshold: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            kind: EnvKind::Composer,
            threshold: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Examples retrieved per query.
    pub k: usize,
    /// Also use pool pairs (with their own entry masked) as training pairs.
    pub train_on_pool: bool,
    pub paths: Paths,
    pub structures: StructureSection,
    pub encoder: EncoderSection,
    pub bm25: Bm25Params,
    pub synthetic: SyntheticSection,
    pub sft: SftConfig,
    pub rl: RlConfig,
    pub env: EnvSection,
    pub llm: ClientConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            k: 4,
            train_on_pool: true,
            paths: Paths::default(),
            structures: StructureSection::default(),
            encoder: EncoderSection::default(),
            bm25: Bm25Params::default(),
            synthetic: SyntheticSection::default(),
            sft: SftConfig::default(),
            rl: RlConfig::default(),
            env: EnvSection::default(),
            llm: ClientConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; paths stay as written.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a file and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        if !is_builtin_lexicon(&cfg.structures.lexicon) {
            cfg.structures.lexicon = base.join(&cfg.structures.lexicon).display().to_string();
        }
        if cfg.synthetic.grammar != "visual-reasoning" {
            cfg.synthetic.grammar = base.join(&cfg.synthetic.grammar).display().to_string();
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k < 1 {
            return bad("k must be at least 1".into());
        }
        if self.structures.max_size < 1 {
            return bad("structures.max_size must be at least 1".into());
        }
        if self.encoder.dim < 1 {
            return bad("encoder.dim must be at least 1".into());
        }
        if !(self.encoder.tau > 0.0) {
            return bad("encoder.tau must be positive".into());
        }
        if !(self.encoder.lambda >= 0.0) {
            return bad("encoder.lambda must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.env.threshold) {
            return bad("env.threshold must lie in [0, 1]".into());
        }
        if self.synthetic.train_queries > self.synthetic.queries {
            return bad("synthetic.train_queries exceeds synthetic.queries".into());
        }
        if !(self.bm25.k1 >= 0.0) || !(0.0..=1.0).contains(&self.bm25.b) {
            return bad("bm25 needs k1 >= 0 and b in [0, 1]".into());
        }
        self.sft.validate()?;
        self.rl.validate()?;
        self.llm.validate()?;
        Ok(())
    }

    /// Stage-1 settings with the shared `k` and seed applied.
    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            k: self.k,
            seed: self.seed,
            ..self.sft.clone()
        }
    }

    /// Stage-2 settings with the shared `k` and seed applied.
    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            k: self.k,
            seed: self.seed,
            ..self.rl.clone()
        }
    }

    pub fn structure_config(&self) -> Result<StructureConfig> {
        let lexicon = match self.structures.lexicon.as_str() {
            "identity" => AnonymizationLexicon::identity(),
            "covr" => AnonymizationLexicon::covr(),
            path => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read lexicon {path}: {e}")))?;
                let lex: AnonymizationLexicon = serde_json::from_str(&text)?;
                lex.validate().map_err(Error::Config)?;
                lex
            }
        };
        Ok(StructureConfig::new(
            self.structures.max_size,
            self.structures.anonymize,
            lexicon,
        ))
    }

    pub fn grammar(&self) -> Result<SyntheticGrammar> {
        match self.synthetic.grammar.as_str() {
            "visual-reasoning" => Ok(SyntheticGrammar::visual_reasoning()),
            path => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read grammar {path}: {e}")))?;
                Ok(serde_json::from_str(&text)?)
            }
        }
    }
}

fn is_builtin_lexicon(name: &str) -> bool {
    matches!(name, "identity" | "covr")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::AdvantageMethod;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("colour = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[sft]\nbatchsize = 3").is_err());
        assert!(RunConfig::from_toml("[rl]\nclip = 0.3").is_err());
    }

    #[test]
    fn sections_override() {
        let cfg = RunConfig::from_toml(
            "k = 3\nseed = 9\n[rl]\nmethod = \"rloo\"\nratio_mode = \"sequence\"\n[env]\nkind = \"coverage\"",
        )
        .unwrap();
        assert_eq!(cfg.rl.method, AdvantageMethod::Rloo);
        assert_eq!(cfg.rl_config().k, 3);
        assert_eq!(cfg.rl_config().seed, 9);
        assert_eq!(cfg.env.kind, EnvKind::Coverage);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[rl]\nepsilon = 1.5").is_err());
        assert!(RunConfig::from_toml("[sft]\nhard_negatives = 60").is_err());
        assert!(RunConfig::from_toml("[encoder]\ntau = 0.0").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[paths]\npool = \"p.jsonl\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.pool, dir.path().join("p.jsonl"));
        assert_eq!(cfg.paths.report, dir.path().join("out/report.jsonl"));
    }
}
