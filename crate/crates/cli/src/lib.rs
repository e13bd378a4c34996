//! The `ctes` command-line tool.
//!
//! All state lives under `--out`:
//!
//! ```text
//! out/config.json              effective configuration of the last command
//! out/data/                    corpus, queries and labels
//! out/split.json               train/validation/test query ids
//! out/models/{mode}.json       trained relevance models
//! out/checkpoints/{mode}/      best-so-far checkpoints during training
//! out/index/{scheme}.json      hash index plus cached embeddings
//! out/results/{mode}.csv       retrieval results
//! out/eval/{mode}.json         metric reports
//! out/bench/hash_{scheme}.csv  hash sweep
//! ```

pub mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ctes_core::bundle::{load_model, save_model};
use ctes_core::eval::{evaluate_protocol, MetricReport, ProtocolConfig, Scorer};
use ctes_core::hashindex::{HashProfile, HashScheme};
use ctes_core::mtpp::MtppModel;
use ctes_core::parallel::Workers;
use ctes_core::relevance::{ModelScorer, RelevanceModel, ScoreMode, SimUScorer};
use ctes_core::retrieval::{
    assemble_index, build_index, embed_corpus, fit_coder, write_results_csv, IndexStore,
    RetrievalMode, RetrievalResult, RetrievalScorer, Retriever,
};
use ctes_core::synth::{generate, split_queries, QuerySplit};
use ctes_core::train::{train, TrainSplit};
use ctes_core::unwarp::UnwarpNet;
use ctes_core::{CoreError, Dataset, EventSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Overrides, RunConfig, DEFAULT_SEED};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Input(String),
    /// Reported like a clap usage error.
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "ctes",
    version,
    about = "Retrieval of continuous-time event sequences"
)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory holding every input and output of the run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus, queries, labels and query split.
    GenData,
    /// Train one relevance model variant.
    Train {
        #[arg(long, value_parser = parse_score_mode)]
        mode: ScoreMode,
    },
    /// Hash the corpus embeddings of the index model.
    BuildIndex {
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<HashScheme>,
    },
    /// Retrieve the top K corpus sequences for one query or every test query.
    Query {
        #[arg(long, value_parser = parse_retrieval_mode)]
        mode: RetrievalMode,
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<HashScheme>,
        #[arg(long)]
        k: Option<usize>,
        /// Query id; defaults to every test query.
        #[arg(long)]
        query: Option<String>,
    },
    /// Run the ranking protocol on the test queries.
    Evaluate {
        /// A model variant, or `sim_u` for the model-independent score.
        #[arg(long)]
        mode: String,
        /// Evaluate the untrained initialization instead of the saved model.
        #[arg(long)]
        init: bool,
    },
    /// Sweep tables and bits per table, reporting NDCG against reduction factor.
    BenchHash {
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<HashScheme>,
    },
}

fn parse_score_mode(s: &str) -> std::result::Result<ScoreMode, String> {
    ScoreMode::parse(s).map_err(|e| e.to_string())
}

fn parse_scheme(s: &str) -> std::result::Result<HashScheme, String> {
    HashScheme::parse(s).map_err(|e| e.to_string())
}

fn parse_retrieval_mode(s: &str) -> std::result::Result<RetrievalMode, String> {
    RetrievalMode::parse(s).map_err(|e| e.to_string())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on usage errors, 2 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            if matches!(e, CliError::Usage(_)) {
                1
            } else {
                2
            }
        }
    }
}

fn one_line(e: &CliError) -> String {
    let mut msg = e.to_string();
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        let text = s.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
        source = s.source();
    }
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

fn execute(cli: Cli) -> Result<()> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out <DIR> is required".into()))?;
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let (scheme, k) = match &cli.command {
        Command::BuildIndex { scheme } | Command::BenchHash { scheme } => (*scheme, None),
        Command::Query { scheme, k, .. } => (*scheme, *k),
        _ => (None, None),
    };
    let cfg = base.resolve(&Overrides {
        seed: cli.seed,
        workers: cli.workers,
        scheme,
        k,
    })?;
    let seed_note = if cli.seed.is_some() {
        "from --seed"
    } else {
        "from config or default"
    };
    eprintln!(
        "ctes: seed {} ({seed_note}), workers {}, out {}",
        cfg.seed,
        cfg.workers,
        out.display()
    );
    create_dir(&out)?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    let ctx = Ctx { cfg, out };
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Train { mode } => train_cmd(&ctx, mode),
        Command::BuildIndex { .. } => build_index_cmd(&ctx),
        Command::Query { mode, query, .. } => query_cmd(&ctx, mode, query.as_deref()),
        Command::Evaluate { mode, init } => evaluate_cmd(&ctx, &mode, init),
        Command::BenchHash { .. } => bench_hash(&ctx),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let io = |source| CliError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    f(&mut w).and_then(|_| w.flush()).map_err(io)
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Input(format!(
            "{} not found; run `{hint}` first",
            path.display()
        )))
    }
}

/// Short scheme name used in file names.
fn scheme_tag(scheme: HashScheme) -> &'static str {
    match scheme {
        HashScheme::RandomHyperplane => "rh",
        HashScheme::Learned => "learned",
    }
}

impl Ctx {
    fn workers(&self) -> Workers {
        Workers::new(self.cfg.workers).unwrap_or(Workers::ONE)
    }

    fn dataset(&self) -> Result<Dataset> {
        let dir = self.out.join("data");
        require(&dir, "ctes gen-data")?;
        Ok(Dataset::load_dir(
            &dir,
            self.cfg.generator.max_len.max(self.cfg.model.mtpp.max_len),
        )?)
    }

    fn split(&self) -> Result<QuerySplit> {
        let path = self.out.join("split.json");
        require(&path, "ctes gen-data")?;
        let text = std::fs::read_to_string(&path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            context: path.display().to_string(),
            source,
        })
    }

    fn model_path(&self, mode: ScoreMode) -> PathBuf {
        self.out
            .join("models")
            .join(format!("{}.json", mode.name()))
    }

    fn load_model(&self, mode: ScoreMode) -> Result<RelevanceModel> {
        let path = self.model_path(mode);
        require(&path, &format!("ctes train --mode {}", mode.name()))?;
        Ok(load_model(&path)?)
    }

    fn index_path(&self) -> PathBuf {
        self.out
            .join("index")
            .join(format!("{}.json", scheme_tag(self.cfg.index.scheme)))
    }

    /// The untrained model for `mode` described by the configuration, with
    /// its Fisher statistics estimated on the corpus.
    fn initial_model(&self, ds: &Dataset, mode: ScoreMode) -> Result<RelevanceModel> {
        let m = &self.cfg.model;
        let mut mtpp_cfg = m.mtpp.clone();
        mtpp_cfg.vocab = ds.mark_vocab_size;
        let mtpp = MtppModel::new(mtpp_cfg)?;
        let scale = ds.global_horizon();
        let unwarp = match m.unwarp_init {
            config::UnwarpInit::Identity => UnwarpNet::identity(m.unwarp.clone(), scale)?,
            config::UnwarpInit::Random => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(self.cfg.seed ^ ctes_core::eval::fnv1a("unwarp"));
                UnwarpNet::random(m.unwarp.clone(), scale, &mut rng)?
            }
        };
        let mut model =
            RelevanceModel::new(mode, mtpp, unwarp, m.fisher.clone(), self.cfg.train.gamma)?;
        let corpus: Vec<&EventSequence> = ds.corpus.values().collect();
        model.refresh_fisher_stats(&corpus, self.workers())?;
        Ok(model)
    }

    fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            ks: self.cfg.eval.ks.clone(),
            negatives: self.cfg.eval.negatives,
            seed: self.cfg.seed,
            workers: self.workers(),
        }
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let syn = generate(&ctx.cfg.generator)?;
    let ds = syn.dataset;
    ds.save_dir(&ctx.out.join("data"))?;
    let split = split_queries(&ds.query_ids(), ctx.cfg.split, ctx.cfg.seed)?;
    let text = serde_json::to_string_pretty(&split).expect("split serializes");
    write_text(&ctx.out.join("split.json"), &text)?;
    println!(
        "generated {} corpus sequences and {} queries ({} train, {} validation, {} test)",
        ds.corpus.len(),
        ds.queries.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn train_cmd(ctx: &Ctx, mode: ScoreMode) -> Result<()> {
    let ds = ctx.dataset()?;
    let split = ctx.split()?;
    let model = ctx.initial_model(&ds, mode)?;
    let ckpt = ctx.out.join("checkpoints").join(mode.name());
    create_dir(&ckpt)?;
    let mut cfg = ctx.cfg.train.clone();
    cfg.mode = mode;
    let tsplit = TrainSplit {
        train: split.train.clone(),
        val: split.val.clone(),
        checkpoint_dir: Some(ckpt),
    };
    let (trained, history) = train(model, &ds, &tsplit, &cfg)?;
    let models = ctx.out.join("models");
    create_dir(&models)?;
    save_model(&ctx.model_path(mode), &trained)?;
    write_with(&models.join(format!("{}_history.csv", mode.name())), |w| {
        history.write_csv(w)
    })?;
    let text = serde_json::to_string_pretty(&history).expect("history serializes");
    write_text(&models.join(format!("{}_history.json", mode.name())), &text)?;
    println!(
        "trained {} for {} epochs: validation MAP {:.4} -> {:.4} (kept epoch {}, {:?})",
        mode.name(),
        history.epochs.len(),
        history.initial_val_map,
        history.best_val_map,
        history.best_epoch,
        history.stop
    );
    Ok(())
}

fn build_index_cmd(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let model = ctx.load_model(ctx.cfg.query.index_model)?;
    let corpus: Vec<&EventSequence> = ds.corpus.values().collect();
    let (store, report) = build_index(&corpus, &model, &ctx.cfg.index, ctx.workers())?;
    let dir = ctx.out.join("index");
    create_dir(&dir)?;
    store.save(&ctx.index_path())?;
    let tag = scheme_tag(ctx.cfg.index.scheme);
    let text = serde_json::to_string_pretty(&report).expect("build report serializes");
    write_text(&dir.join(format!("{tag}_report.json")), &text)?;
    println!(
        "indexed {} sequences: {} tables of {} bits over {}-bit codes, bit balance {:.4}, {} fallback embeddings",
        report.sequences,
        report.tables,
        report.bits,
        report.code_len,
        report.bit_balance,
        report.fallback.len()
    );
    Ok(())
}

fn query_cmd(ctx: &Ctx, mode: RetrievalMode, query: Option<&str>) -> Result<()> {
    let ds = ctx.dataset()?;
    let k = ctx.cfg.query.k;
    let ids: Vec<String> = match query {
        Some(q) if ds.queries.contains_key(q) => vec![q.to_string()],
        Some(q) => return Err(CliError::Input(format!("unknown query id `{q}`"))),
        None => ctx.split()?.test,
    };
    let index_model = ctx.load_model(ctx.cfg.query.index_model)?;
    let store = match mode {
        RetrievalMode::HashedSelf | RetrievalMode::Telescopic => {
            let path = ctx.index_path();
            require(&path, "ctes build-index")?;
            Some(IndexStore::load(&path)?)
        }
        RetrievalMode::Exhaustive => None,
    };
    let reranker = match mode {
        RetrievalMode::Exhaustive | RetrievalMode::Telescopic => {
            Some(ctx.load_model(ctx.cfg.query.rerank_model)?)
        }
        RetrievalMode::HashedSelf => None,
    };
    let mut retriever = Retriever::new(&ds.corpus, &index_model, ctx.workers());
    if let Some(s) = &store {
        retriever = retriever.with_index(s);
    }
    if let Some(r) = &reranker {
        retriever = retriever.with_reranker(r);
    }
    let results: Vec<RetrievalResult> = ids
        .iter()
        .map(|q| retriever.retrieve(&ds.queries[q], k, mode))
        .collect::<std::result::Result<_, _>>()?;
    let dir = ctx.out.join("results");
    create_dir(&dir)?;
    write_with(&dir.join(format!("{}.csv", mode.name())), |w| {
        write_results_csv(w, &results)
    })?;
    let mean =
        results.iter().map(|r| r.comparisons as f64).sum::<f64>() / results.len().max(1) as f64;
    println!(
        "retrieved top {k} for {} queries with {} comparisons each on average (reduction {:.3})",
        results.len(),
        mean.round(),
        1.0 - mean / ds.corpus.len() as f64
    );
    Ok(())
}

fn write_report(ctx: &Ctx, name: &str, report: &MetricReport) -> Result<()> {
    let dir = ctx.out.join("eval");
    create_dir(&dir)?;
    write_text(&dir.join(format!("{name}.json")), &report.to_json())?;
    write_with(&dir.join(format!("{name}.csv")), |w| report.write_csv(w))?;
    write_with(&dir.join(format!("{name}_per_query.csv")), |w| {
        report.write_per_query_csv(w)
    })
}

fn evaluate_cmd(ctx: &Ctx, mode: &str, init: bool) -> Result<()> {
    let ds = ctx.dataset()?;
    let split = ctx.split()?;
    let corpus: Vec<&EventSequence> = ds.corpus.values().collect();
    let protocol = ctx.protocol();
    let (name, report) = if mode == "sim_u" {
        let scorer = SimUScorer { unwarp: None };
        (
            "sim_u".to_string(),
            run_protocol(&scorer, &ds, &split.test, &protocol)?,
        )
    } else {
        let mode = ScoreMode::parse(mode)?;
        let model = if init {
            ctx.initial_model(&ds, mode)?
        } else {
            ctx.load_model(mode)?
        };
        let scorer = ModelScorer::with_corpus_cache(&model, &corpus, ctx.workers())?;
        let name = if init {
            format!("{}_init", mode.name())
        } else {
            mode.name().to_string()
        };
        (name, run_protocol(&scorer, &ds, &split.test, &protocol)?)
    };
    write_report(ctx, &name, &report)?;
    let ndcg: Vec<String> = ctx
        .cfg
        .eval
        .ks
        .iter()
        .map(|&k| format!("NDCG@{k} {:.4}", report.ndcg(k)))
        .collect();
    println!("{name}: MAP {:.4}, {}", report.map(), ndcg.join(", "));
    Ok(())
}

fn run_protocol(
    scorer: &dyn Scorer,
    ds: &Dataset,
    ids: &[String],
    protocol: &ProtocolConfig,
) -> Result<MetricReport> {
    Ok(evaluate_protocol(scorer, ds, ids, protocol)?)
}

pub const BENCH_CSV_HEADER: &str = "scheme,tables,bits,reduction_factor,ndcg@10,mean_comparisons";

fn bench_hash(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let split = ctx.split()?;
    let model = ctx.load_model(ctx.cfg.query.index_model)?;
    let workers = ctx.workers();
    let corpus: Vec<&EventSequence> = ds.corpus.values().collect();
    let emb = embed_corpus(&corpus, &model, workers)?;
    let (coder, _) = fit_coder(&emb, &ctx.cfg.index)?;
    let mut protocol = ctx.protocol();
    let ndcg_k = ctx.cfg.bench.ndcg_k;
    protocol.ks = vec![ndcg_k];
    let header = BENCH_CSV_HEADER.replace("ndcg@10", &format!("ndcg@{ndcg_k}"));
    let mut rows = vec![header];
    for &tables in &ctx.cfg.bench.tables {
        for &bits in &ctx.cfg.bench.bits {
            let profile = HashProfile { tables, bits };
            let (store, _) =
                assemble_index(&emb, coder.clone(), profile, ctx.cfg.index.seed, workers)?;
            let retriever = Retriever::new(&ds.corpus, &model, workers).with_index(&store);
            let scorer = RetrievalScorer {
                retriever: &retriever,
                mode: RetrievalMode::HashedSelf,
            };
            let report = evaluate_protocol(&scorer, &ds, &split.test, &protocol)?;
            let mut comparisons = BTreeMap::new();
            for q in &split.test {
                let (cands, _) = retriever.candidates(&ds.queries[q])?;
                comparisons.insert(q.clone(), cands.len());
            }
            let mean = comparisons.values().sum::<usize>() as f64 / comparisons.len().max(1) as f64;
            let reduction = 1.0 - mean / ds.corpus.len() as f64;
            rows.push(format!(
                "{},{tables},{bits},{reduction},{},{mean}",
                scheme_tag(ctx.cfg.index.scheme),
                report.ndcg(ndcg_k)
            ));
            eprintln!(
                "  M={tables} L={bits}: reduction {reduction:.3}, NDCG@{ndcg_k} {:.4}",
                report.ndcg(ndcg_k)
            );
        }
    }
    let dir = ctx.out.join("bench");
    create_dir(&dir)?;
    let mut text = rows.join("\n");
    text.push('\n');
    write_text(
        &dir.join(format!("hash_{}.csv", scheme_tag(ctx.cfg.index.scheme))),
        &text,
    )?;
    Ok(())
}
