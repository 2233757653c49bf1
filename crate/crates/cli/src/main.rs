use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use linkrec::checkpoint::{load_checkpoint, save_checkpoint};
use linkrec::config::Config;
use linkrec::corpus::{load_embeddings, Corpus, EmbeddingTable};
use linkrec::evaluator::{evaluate, write_details};
use linkrec::model::EmbeddingMode;
use linkrec::pipeline::{embed_corpus, holdout_split, prepare, test_queries, with_bridges};
use linkrec::sampler::{build_positive_pairs, write_pairs};
use linkrec::store::EmbeddingStore;
use linkrec::synth::{generate, validate_synthetic, write_synthetic};
use linkrec::{gradcheck, plot, trainer, Error, Result};

#[derive(Parser)]
#[command(name = "linkrec", version, about = "Recommend code repositories for research papers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `[data] dir`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the corpus files and word vectors.
    Ingest {
        #[command(flatten)]
        common: Common,
    },
    /// Write both context graphs as edge lists and the distant-supervision pairs.
    BuildGraphs {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the non-held-out bridges; writes checkpoint, history and embedding store.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long = "T")]
        t: Option<usize>,
        #[arg(long)]
        bridge_ratio: Option<f64>,
        #[arg(long, value_parser = parse_mode)]
        embedding_mode: Option<EmbeddingMode>,
    },
    /// Score held-out bridge papers on 50-candidate slates.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Top-K repositories for one paper, as `rank<TAB>repo_id<TAB>score`.
    Recommend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        paper: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Embedding store; defaults to `[data] store`.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Write a planted-topic corpus and matching word vectors.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to `[data] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        topics: Option<usize>,
        #[arg(long)]
        papers: Option<usize>,
        #[arg(long)]
        repos: Option<usize>,
        #[arg(long)]
        bridge_fraction: Option<f64>,
    },
    /// Compare analytic gradients with central finite differences on the bundled fixture.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

fn parse_mode(s: &str) -> std::result::Result<EmbeddingMode, String> {
    match s {
        "fixed" => Ok(EmbeddingMode::Fixed),
        "trainable" => Ok(EmbeddingMode::Trainable),
        "concat" => Ok(EmbeddingMode::Concat),
        other => Err(format!("unknown embedding mode `{other}` (fixed, trainable, concat)")),
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(dir) = &common.data_dir {
        cfg.data.dir = dir.clone();
    }
    Ok(cfg)
}

fn path(cfg: &Config, file: &Path) -> PathBuf {
    cfg.data.resolve(file)
}

fn load_corpus(cfg: &Config) -> Result<(Corpus, EmbeddingTable)> {
    let (corpus, report) = Corpus::load(
        path(cfg, &cfg.data.papers),
        path(cfg, &cfg.data.repos),
        path(cfg, &cfg.data.bridges),
    )?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let table = load_embeddings(path(cfg, &cfg.data.embeddings), cfg.model.embedding_dim)?;
    Ok((corpus, table))
}

fn ensure_parent(file: &Path) -> Result<()> {
    match file.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { common } => {
            let cfg = load_config(&common)?;
            let (corpus, table) = load_corpus(&cfg)?;
            println!("papers\t{}", corpus.papers.len());
            println!("repos\t{}", corpus.repos.len());
            println!("bridges\t{}", corpus.bridges.len());
            println!("vectors\t{}", table.len());
            println!("dim\t{}", table.dim());
        }
        Command::BuildGraphs { common } => {
            let cfg = load_config(&common)?;
            cfg.model.validate()?;
            let (corpus, _) = load_corpus(&cfg)?;
            let graphs = prepare(&corpus, &cfg.model)?;
            let dir = path(&cfg, &cfg.data.graphs);
            fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            graphs.citation.write_edge_list(dir.join("citation.tsv"))?;
            graphs.repo.write_edge_list(dir.join("repo.tsv"))?;
            let pairs = build_positive_pairs(&corpus.bridges, &graphs.citation, &corpus.repos, cfg.train.t)?;
            write_pairs(dir.join("pairs.jsonl"), &pairs)?;
            println!("citation_edges\t{}", graphs.citation.edge_count());
            println!("repo_edges\t{}", graphs.repo.edge_count());
            println!("pairs\t{}", pairs.len());
        }
        Command::Train {
            common,
            seed,
            epochs,
            learning_rate,
            t,
            bridge_ratio,
            embedding_mode,
        } => {
            let mut cfg = load_config(&common)?;
            let tc = &mut cfg.train;
            tc.seed = seed.unwrap_or(tc.seed);
            tc.epochs_max = epochs.unwrap_or(tc.epochs_max);
            tc.learning_rate = learning_rate.unwrap_or(tc.learning_rate);
            tc.t = t.unwrap_or(tc.t);
            tc.bridge_ratio = bridge_ratio.unwrap_or(tc.bridge_ratio);
            tc.embedding_mode = embedding_mode.unwrap_or(tc.embedding_mode);
            cfg.validate()?;
            let (corpus, table) = load_corpus(&cfg)?;
            let (train_links, test_links) = holdout_split(&corpus.bridges, cfg.eval.holdout_fraction, cfg.eval.seed);
            log::info!("{} training bridges, {} held out", train_links.len(), test_links.len());
            let train_corpus = with_bridges(&corpus, train_links)?;
            let graphs = prepare(&train_corpus, &cfg.model)?;
            let outcome = trainer::train(&cfg.train, &cfg.model, &train_corpus, &graphs, &table)?;

            let ckpt = path(&cfg, &cfg.data.checkpoint);
            ensure_parent(&ckpt)?;
            save_checkpoint(&outcome.params, &cfg.training_hash(), &ckpt)?;
            outcome.history.write_csv(path(&cfg, &cfg.data.history))?;
            let (papers, repos) = embed_corpus(&outcome.params, &corpus, &table)?;
            EmbeddingStore::new(papers, repos)?.save(path(&cfg, &cfg.data.store))?;
            let best = outcome.history.best().expect("at least one epoch");
            println!("epochs\t{}", outcome.history.records.len());
            println!("best_epoch\t{}", outcome.best_epoch);
            println!("val_warp\t{:.6}", best.val_warp);
            println!("constraint_error\t{:.6}", best.constraint_error);
            println!("checkpoint\t{}", ckpt.display());
        }
        Command::Evaluate { common, runs, seed } => {
            let mut cfg = load_config(&common)?;
            cfg.eval.runs = runs.unwrap_or(cfg.eval.runs);
            cfg.eval.validate()?;
            let (corpus, table) = load_corpus(&cfg)?;
            let params = load_checkpoint(path(&cfg, &cfg.data.checkpoint), Some(&cfg.training_hash()))?;
            let (_, test_links) = holdout_split(&corpus.bridges, cfg.eval.holdout_fraction, cfg.eval.seed);
            if test_links.is_empty() {
                return Err(Error::Precondition("no held-out bridge papers to evaluate".into()));
            }
            let (papers, repos) = embed_corpus(&params, &corpus, &table)?;
            let queries = test_queries(&test_links, &corpus.repos, cfg.eval.t)?;
            let base_seed = seed.unwrap_or(cfg.eval.seed);
            let (report, details) = evaluate(&papers, &repos, &queries, &cfg.eval.ks, cfg.eval.runs, base_seed)?;
            report.write_csv(path(&cfg, &cfg.data.metrics))?;
            write_details(path(&cfg, &cfg.data.details), &details)?;
            plot::write_metrics_svg(&report, "held-out bridge papers", path(&cfg, &cfg.data.plot))?;
            println!("K\tHR\tMRR\tMAP");
            for r in &report.mean {
                println!("{}\t{:.6}\t{:.6}\t{:.6}", r.k, r.hr, r.mrr, r.map);
            }
        }
        Command::Recommend { common, paper, k, store } => {
            let cfg = load_config(&common)?;
            let store_path = store.unwrap_or_else(|| path(&cfg, &cfg.data.store));
            let rec = EmbeddingStore::load(store_path)?.recommend(&paper, k)?;
            for (rank, (id, score)) in rec.items.iter().enumerate() {
                println!("{}\t{id}\t{score:.6}", rank + 1);
            }
        }
        Command::GenSynthetic {
            common,
            out,
            seed,
            topics,
            papers,
            repos,
            bridge_fraction,
        } => {
            let mut cfg = load_config(&common)?;
            let sc = &mut cfg.synth;
            sc.seed = seed.unwrap_or(sc.seed);
            sc.topics = topics.unwrap_or(sc.topics);
            sc.papers = papers.unwrap_or(sc.papers);
            sc.repos = repos.unwrap_or(sc.repos);
            sc.bridge_fraction = bridge_fraction.unwrap_or(sc.bridge_fraction);
            let dir = out.unwrap_or_else(|| cfg.data.dir.clone());
            let synth = generate(&cfg.synth)?;
            let summary = validate_synthetic(&synth.corpus)?;
            write_synthetic(&synth, &dir)?;
            println!("papers\t{}", synth.corpus.papers.len());
            println!("repos\t{}", synth.corpus.repos.len());
            println!("bridges\t{}", synth.corpus.bridges.len());
            println!("cross_topic_citations\t{}/{}", summary.cross_topic_citations, summary.citations);
            println!("out\t{}", dir.display());
        }
        Command::Gradcheck { step, tolerance } => {
            let report = gradcheck::run_bundled(step)?;
            for t in &report.tensors {
                println!("{}\t{}\t{:.3e}", t.name, t.entries, t.max_rel_error);
            }
            println!("max_rel_error\t{:.3e}", report.max_rel_error);
            if !report.passed(tolerance) {
                return Err(Error::Precondition(format!(
                    "gradient check failed: max relative error {:.3e} >= {tolerance:e}",
                    report.max_rel_error
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
