use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use seqret_core::config::RunConfig;
use seqret_core::corpus::{generate_synthetic, load_examples, write_examples, Bm25Index, CandidatePool, Example};
use seqret_core::encoder::{load_checkpoint, save_checkpoint, TriEncoder, Vocabulary};
use seqret_core::llm::{ClientConfig, CompletionClient};
use seqret_core::program::ProgramTree;
use seqret_core::retrieval::{evaluate, Retriever, RetrieverKind};
use seqret_core::rl::{train_rl, AdvantageMethod, EnvKind, Environment};
use seqret_core::sft::{build_sft_dataset, pool_index, read_sft_dataset, train_sft, write_sft_dataset};
use seqret_core::util::seeded_rng;
use seqret_core::{AnonymizationLexicon, StructureConfig};

#[derive(Parser)]
#[command(name = "seqret", version, about = "Sequential compositional example retrieval")]
struct Cli {
    /// Log verbosity (-v debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse programs (one per line, or JSONL records) and print their trees.
    Parse { file: PathBuf },
    /// Print the local structures of each program.
    Ls {
        file: PathBuf,
        /// Maximum structure size.
        #[arg(long = "l", default_value_t = 4)]
        l: usize,
        /// Anonymize values before extraction.
        #[arg(long)]
        anonymize: bool,
        /// Lexicon used with --anonymize: `covr` or a JSON file.
        #[arg(long, default_value = "covr")]
        lexicon: String,
    },
    /// Generate a synthetic pool and query splits.
    GenSynthetic {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        pool: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
        /// Queries assigned to the training split.
        #[arg(long)]
        train: Option<usize>,
        /// Output directory when no config is given.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Build the stage-1 dataset from greedy coverage traces.
    BuildSft(RunArgs),
    /// Train the tri-encoder on the stage-1 dataset.
    TrainSft {
        #[command(flatten)]
        run: RunArgs,
        /// Train the single-candidate baseline (lambda = 0) instead.
        #[arg(long)]
        dense: bool,
    },
    /// Policy optimization starting from the stage-1 checkpoint.
    TrainRl {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = ["nb", "remax", "rloo", "grpo"])]
        method: Option<String>,
        #[arg(long, value_parser = ["coverage", "composer", "llm"])]
        env: Option<String>,
    },
    /// Retrieve in-context examples for the test queries or a single query.
    Retrieve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "rcr", value_parser = ["random", "bm25", "dense", "rcr"])]
        retriever: String,
        /// Retrieve for this utterance and print the examples.
        #[arg(long)]
        query: Option<String>,
    },
    /// Evaluate a retriever on the test split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "rcr", value_parser = ["random", "bm25", "dense", "rcr"])]
        retriever: String,
        #[arg(long, value_parser = ["coverage", "composer", "llm"])]
        env: Option<String>,
    },
}

/// Errors that should exit with the usage status.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Parse { file } => cmd_parse(&file),
        Command::Ls {
            file,
            l,
            anonymize,
            lexicon,
        } => cmd_ls(&file, l, anonymize, &lexicon),
        Command::GenSynthetic {
            config,
            seed,
            pool,
            queries,
            train,
            out_dir,
        } => cmd_gen(config, seed, pool, queries, train, out_dir),
        Command::BuildSft(run) => cmd_build_sft(&load_config(&run)?),
        Command::TrainSft { run, dense } => cmd_train_sft(&load_config(&run)?, dense),
        Command::TrainRl { run, method, env } => {
            let mut cfg = load_config(&run)?;
            if let Some(m) = method {
                cfg.rl.method = m.parse::<AdvantageMethod>()?;
            }
            if let Some(e) = env {
                cfg.env.kind = e.parse::<EnvKind>()?;
            }
            cfg.validate()?;
            cmd_train_rl(&cfg)
        }
        Command::Retrieve { run, retriever, query } => {
            cmd_retrieve(&load_config(&run)?, retriever.parse()?, query.as_deref())
        }
        Command::Evaluate { run, retriever, env } => {
            let mut cfg = load_config(&run)?;
            if let Some(e) = env {
                cfg.env.kind = e.parse::<EnvKind>()?;
            }
            cmd_evaluate(&cfg, retriever.parse()?)
        }
    }
}

fn load_config(run: &RunArgs) -> Result<RunConfig> {
    if !run.config.is_file() {
        return Err(UsageError(format!("config file {} not found", run.config.display())).into());
    }
    let mut cfg = RunConfig::load(&run.config).map_err(|e| UsageError(e.to_string()))?;
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    log::info!("configuration ({}):\n{}", run.config.display(), cfg.to_toml());
    Ok(cfg)
}

/// Non-empty, non-comment lines; JSON records contribute their `target`.
fn read_programs(file: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('{') {
            let v: serde_json::Value =
                serde_json::from_str(line).with_context(|| format!("{}:{}", file.display(), n + 1))?;
            match v.get("target").and_then(|t| t.as_str()) {
                Some(t) => out.push(t.to_string()),
                None => bail!("{}:{}: record has no string `target`", file.display(), n + 1),
            }
        } else {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

fn print_tree(tree: &ProgramTree, node: usize, depth: usize, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{}{}", "  ".repeat(depth), tree.symbol(node))?;
    for &c in tree.children(node) {
        print_tree(tree, c, depth + 1, out)?;
    }
    Ok(())
}

fn cmd_parse(file: &Path) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, program) in read_programs(file)?.iter().enumerate() {
        let tree = ProgramTree::parse(program).with_context(|| format!("program {}", i + 1))?;
        writeln!(out, "{}", tree.serialize())?;
        print_tree(&tree, tree.root(), 0, &mut out)?;
        writeln!(out)?;
    }
    Ok(())
}

fn lexicon_from(name: &str) -> Result<AnonymizationLexicon> {
    Ok(match name {
        "covr" => AnonymizationLexicon::covr(),
        "identity" => AnonymizationLexicon::identity(),
        path => {
            let lex: AnonymizationLexicon = serde_json::from_str(&fs::read_to_string(path)?)?;
            lex.validate().map_err(anyhow::Error::msg)?;
            lex
        }
    })
}

fn cmd_ls(file: &Path, l: usize, anonymize: bool, lexicon: &str) -> Result<()> {
    if l < 1 {
        return Err(UsageError("--l must be at least 1".into()).into());
    }
    let cfg = if anonymize {
        StructureConfig::new(l, true, lexicon_from(lexicon)?)
    } else {
        StructureConfig::raw(l)
    };
    let programs = read_programs(file)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, program) in programs.iter().enumerate() {
        let set = cfg
            .structures_of(program)
            .with_context(|| format!("program {}", i + 1))?;
        if programs.len() > 1 {
            writeln!(out, "# {program}")?;
        }
        for size in 1..=l {
            let members: Vec<&str> = set.iter().filter(|s| s.size == size).map(|s| s.key.as_str()).collect();
            if members.is_empty() {
                continue;
            }
            writeln!(out, "size {size}:")?;
            for m in members {
                writeln!(out, "  {m}")?;
            }
        }
    }
    Ok(())
}

fn cmd_gen(
    config: Option<PathBuf>,
    seed: Option<u64>,
    pool: Option<usize>,
    queries: Option<usize>,
    train: Option<usize>,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = match &config {
        Some(path) => load_config(&RunArgs {
            config: path.clone(),
            seed: None,
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = pool {
        cfg.synthetic.pool = p;
    }
    if let Some(q) = queries {
        cfg.synthetic.queries = q;
        if train.is_none() {
            cfg.synthetic.train_queries = q / 2;
        }
    }
    if let Some(t) = train {
        cfg.synthetic.train_queries = t;
    }
    match (&config, out_dir) {
        (_, Some(dir)) => {
            cfg.paths.pool = dir.join("pool.jsonl");
            cfg.paths.train = dir.join("train.jsonl");
            cfg.paths.test = dir.join("test.jsonl");
        }
        (None, None) => return Err(UsageError("give --config or --out-dir".into()).into()),
        _ => {}
    }
    if cfg.synthetic.train_queries > cfg.synthetic.queries {
        return Err(UsageError("--train exceeds --queries".into()).into());
    }
    let (pool, queries) = generate_synthetic(
        &cfg.grammar()?,
        &cfg.structure_config()?,
        cfg.synthetic.pool,
        cfg.synthetic.queries,
        cfg.seed,
    )?;
    let (train, test) = queries.split_at(cfg.synthetic.train_queries);
    for (path, data) in [
        (&cfg.paths.pool, pool.examples()),
        (&cfg.paths.train, train),
        (&cfg.paths.test, test),
    ] {
        ensure_parent(path)?;
        write_examples(path, data)?;
        println!("wrote {} examples to {}", data.len(), path.display());
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}

fn load_pool(cfg: &RunConfig) -> Result<CandidatePool> {
    let examples = load_examples(&cfg.paths.pool)
        .with_context(|| format!("loading pool {}", cfg.paths.pool.display()))?;
    Ok(CandidatePool::new(examples, cfg.structure_config()?)?)
}

fn load_split(path: &Path) -> Result<Vec<Example>> {
    load_examples(path).with_context(|| format!("loading {}", path.display()))
}

/// Every pool pair when configured, then the training queries.
fn training_pairs(cfg: &RunConfig, pool: &CandidatePool) -> Result<Vec<Example>> {
    let train = load_split(&cfg.paths.train)?;
    let mut pairs = Vec::with_capacity(pool.len() + train.len());
    if cfg.train_on_pool {
        pairs.extend_from_slice(pool.examples());
    }
    pairs.extend(train);
    Ok(pairs)
}

fn bm25(cfg: &RunConfig, pool: &CandidatePool) -> Bm25Index {
    pool_index(pool, cfg.bm25)
}

fn cmd_build_sft(cfg: &RunConfig) -> Result<()> {
    let pool = load_pool(cfg)?;
    let pairs = training_pairs(cfg, &pool)?;
    let data = build_sft_dataset(&pool, &bm25(cfg, &pool), &pairs, &cfg.sft_config())?;
    ensure_parent(&cfg.paths.sft_dataset)?;
    write_sft_dataset(&cfg.paths.sft_dataset, &pool, &data)?;
    println!("wrote {} instances to {}", data.len(), cfg.paths.sft_dataset.display());
    Ok(())
}

#[derive(Serialize)]
struct LossRecord {
    epoch: usize,
    loss: f64,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_train_sft(cfg: &RunConfig, dense: bool) -> Result<()> {
    let pool = load_pool(cfg)?;
    if !cfg.paths.sft_dataset.is_file() {
        bail!(
            "SFT dataset {} not found; run build-sft first",
            cfg.paths.sft_dataset.display()
        );
    }
    let data = read_sft_dataset(&cfg.paths.sft_dataset, &pool)?;
    let train = load_split(&cfg.paths.train)?;
    let vocab = Vocabulary::from_corpus(pool.examples(), &train);
    let lambda = if dense { 0.0 } else { cfg.encoder.lambda };
    let mut tri = TriEncoder::new(vocab, cfg.encoder.dim, lambda, cfg.encoder.tau, &mut seeded_rng(cfg.seed))?;
    let report = train_sft(&mut tri, &pool, &data, &cfg.sft_config())?;
    let (ckpt, log_path) = if dense {
        (&cfg.paths.dense_checkpoint, cfg.paths.sft_log.with_extension("dense.jsonl"))
    } else {
        (&cfg.paths.sft_checkpoint, cfg.paths.sft_log.clone())
    };
    let rows: Vec<LossRecord> = report
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(epoch, &loss)| LossRecord { epoch, loss })
        .collect();
    write_jsonl(&log_path, &rows)?;
    ensure_parent(ckpt)?;
    save_checkpoint(&tri, ckpt)?;
    if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
        println!("loss {first:.4} -> {last:.4}; checkpoint {}", ckpt.display());
    }
    Ok(())
}

fn environment(cfg: &RunConfig) -> Result<Environment> {
    Ok(match cfg.env.kind {
        EnvKind::Coverage => Environment::Coverage,
        EnvKind::Composer => Environment::Composer {
            threshold: cfg.env.threshold,
        },
        EnvKind::Llm => Environment::ExternalLlm(CompletionClient::new(ClientConfig::clone(&cfg.llm))?),
    })
}

fn load_ckpt(path: &Path) -> Result<TriEncoder> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_train_rl(cfg: &RunConfig) -> Result<()> {
    let pool = load_pool(cfg)?;
    let queries = training_pairs(cfg, &pool)?;
    let reference = load_ckpt(&cfg.paths.sft_checkpoint)?;
    let mut tri = reference.clone();
    let env = environment(cfg)?;
    let result = train_rl(&mut tri, &reference, &pool, &queries, &env, &cfg.rl_config());
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            let dump = cfg.paths.rl_checkpoint.with_extension("failed.ckpt");
            ensure_parent(&dump)?;
            save_checkpoint(&tri, &dump)?;
            return Err(anyhow::Error::new(e).context(format!("parameters saved to {}", dump.display())));
        }
    };
    write_jsonl(&cfg.paths.rl_log, &report.records)?;
    ensure_parent(&cfg.paths.rl_checkpoint)?;
    save_checkpoint(&tri, &cfg.paths.rl_checkpoint)?;
    let trace: Vec<String> = report.epoch_mean_rewards.iter().map(|r| format!("{r:.4}")).collect();
    println!("mean reward per epoch: {}", trace.join(" "));
    Ok(())
}

/// The stage-2 checkpoint when present, otherwise stage 1.
fn policy_checkpoint(cfg: &RunConfig) -> &Path {
    if cfg.paths.rl_checkpoint.is_file() {
        &cfg.paths.rl_checkpoint
    } else {
        &cfg.paths.sft_checkpoint
    }
}

struct Resources {
    index: Bm25Index,
    tri: Option<TriEncoder>,
}

fn resources(cfg: &RunConfig, pool: &CandidatePool, kind: RetrieverKind) -> Result<Resources> {
    let tri = match kind {
        RetrieverKind::Dense => Some(load_ckpt(&cfg.paths.dense_checkpoint)?),
        RetrieverKind::Rcr => Some(load_ckpt(policy_checkpoint(cfg))?),
        _ => None,
    };
    Ok(Resources {
        index: bm25(cfg, pool),
        tri,
    })
}

fn retriever<'a>(cfg: &RunConfig, pool: &CandidatePool, kind: RetrieverKind, res: &'a Resources) -> Retriever<'a> {
    match (kind, &res.tri) {
        (RetrieverKind::Dense, Some(t)) => Retriever::dense(t, pool),
        (RetrieverKind::Rcr, Some(t)) => Retriever::rcr(t, pool),
        (RetrieverKind::Bm25, _) => Retriever::Bm25(&res.index),
        _ => Retriever::Random { seed: cfg.seed },
    }
}

#[derive(Serialize)]
struct RetrievalRecord<'a> {
    query_id: usize,
    query: &'a str,
    retrieved_ids: Vec<usize>,
}

fn cmd_retrieve(cfg: &RunConfig, kind: RetrieverKind, query: Option<&str>) -> Result<()> {
    let pool = load_pool(cfg)?;
    let res = resources(cfg, &pool, kind)?;
    let r = retriever(cfg, &pool, kind, &res);
    if let Some(text) = query {
        let q = Example::new(usize::MAX, text, "query");
        for p in r.retrieve(&pool, &q, &[], cfg.k)? {
            let ex = pool.get(p);
            println!("[{}] {}\t{}", ex.id, ex.source, ex.target.as_str());
        }
        return Ok(());
    }
    let test = load_split(&cfg.paths.test)?;
    let mut rows = Vec::with_capacity(test.len());
    for q in &test {
        let picks = r.retrieve(&pool, q, &pool.positions_of_pair(q), cfg.k)?;
        rows.push(RetrievalRecord {
            query_id: q.id,
            query: &q.source,
            retrieved_ids: picks.iter().map(|&p| pool.get(p).id).collect(),
        });
    }
    write_jsonl(&cfg.paths.retrievals, &rows)?;
    println!("wrote {} retrievals to {}", rows.len(), cfg.paths.retrievals.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, kind: RetrieverKind) -> Result<()> {
    let pool = load_pool(cfg)?;
    let test = load_split(&cfg.paths.test)?;
    let res = resources(cfg, &pool, kind)?;
    let r = retriever(cfg, &pool, kind, &res);
    let report = evaluate(&r, &pool, &test, &environment(cfg)?, cfg.k)?;
    ensure_parent(&cfg.paths.report)?;
    report.write_jsonl(&cfg.paths.report)?;
    println!("{}", serde_json::to_string(&report.summary)?);
    Ok(())
}
