//! End-to-end helpers shared by the command line and the experiment tests.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BridgeLink, Corpus, EmbeddingTable, Repository};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, MetricReport, QueryDetail, TestQuery};
use crate::gcn::EmbeddingMatrix;
use crate::model::{build_graphs, embed_all, Graphs, ModelConfig, ModelInputs, ModelParams};
use crate::sampler::costar_top;
use crate::trainer::{train, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Share of bridge links withheld from training and used as test queries.
    pub holdout_fraction: f64,
    /// Positives per test slate: the bridge repository plus its top co-starred repositories.
    #[serde(rename = "T")]
    pub t: usize,
    pub ks: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            holdout_fraction: 0.2,
            t: 6,
            ks: vec![1, 5, 10, 20, 30, 40, 50],
            runs: 3,
            seed: 7,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config(format!("holdout_fraction {} outside (0, 1)", self.holdout_fraction)));
        }
        if self.t == 0 || self.runs == 0 || self.ks.is_empty() {
            return Err(Error::Config("T, runs and ks must be non-empty".into()));
        }
        Ok(())
    }
}

/// Seeded split of bridge links into `(train, test)`; the test side has
/// `round(fraction * m)` links, at least one when `m > 1`.
pub fn holdout_split(bridges: &[BridgeLink], fraction: f64, seed: u64) -> (Vec<BridgeLink>, Vec<BridgeLink>) {
    let mut all = bridges.to_vec();
    all.sort();
    let mut n_test = (fraction * all.len() as f64).round() as usize;
    if all.len() > 1 {
        n_test = n_test.clamp(1, all.len() - 1);
    } else {
        n_test = 0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    all.shuffle(&mut rng);
    let mut test = all.split_off(all.len() - n_test);
    all.sort();
    test.sort();
    (all, test)
}

/// The bridge repository plus up to `t - 1` of its most co-starred repositories.
pub fn test_queries(test_bridges: &[BridgeLink], repos: &[Repository], t: usize) -> Result<Vec<TestQuery>> {
    test_bridges
        .iter()
        .map(|b| {
            let mut positives = vec![b.repo_id.clone()];
            positives.extend(costar_top(&b.repo_id, repos, t.saturating_sub(1))?);
            Ok(TestQuery {
                paper_id: b.paper_id.clone(),
                positives,
            })
        })
        .collect()
}

/// Same corpus with only the given bridge links.
pub fn with_bridges(corpus: &Corpus, bridges: Vec<BridgeLink>) -> Result<Corpus> {
    Corpus::new(corpus.papers.clone(), corpus.repos.clone(), bridges)
}

/// Trained model, its embeddings and held-out metrics.
pub struct ExperimentResult {
    pub outcome: TrainOutcome,
    pub papers: EmbeddingMatrix,
    pub repos: EmbeddingMatrix,
    pub queries: Vec<TestQuery>,
    pub report: MetricReport,
    pub details: Vec<QueryDetail>,
}

pub fn prepare(corpus: &Corpus, model_cfg: &ModelConfig) -> Result<Graphs> {
    build_graphs(corpus, model_cfg.tfidf_threshold)
}

/// Hold out test bridges, train on the rest, then evaluate on the held-out papers.
pub fn run_experiment(
    corpus: &Corpus,
    table: &EmbeddingTable,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<ExperimentResult> {
    eval_cfg.validate()?;
    let (train_links, test_links) = holdout_split(&corpus.bridges, eval_cfg.holdout_fraction, eval_cfg.seed);
    let train_corpus = with_bridges(corpus, train_links)?;
    let graphs = prepare(&train_corpus, model_cfg)?;
    let outcome = train(train_cfg, model_cfg, &train_corpus, &graphs, table)?;
    let inputs = ModelInputs::new(&train_corpus, &graphs, table, model_cfg)?;
    let (papers, repos) = embed_all(&outcome.params, &inputs)?;
    let queries = test_queries(&test_links, &corpus.repos, eval_cfg.t)?;
    let (report, details) = evaluate(&papers, &repos, &queries, &eval_cfg.ks, eval_cfg.runs, eval_cfg.seed)?;
    Ok(ExperimentResult {
        outcome,
        papers,
        repos,
        queries,
        report,
        details,
    })
}

/// Embeddings of a trained model over a corpus.
pub fn embed_corpus(params: &ModelParams, corpus: &Corpus, table: &EmbeddingTable) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let graphs = prepare(corpus, &params.arch.model)?;
    let inputs = ModelInputs::new(corpus, &graphs, table, &params.arch.model)?;
    embed_all(params, &inputs)
}
