//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every exported method returns JSON strings so the page needs no generated
//! TypeScript types.

use linkrec::evaluator::MetricRow;
use linkrec::model::ModelConfig;
use linkrec::objective::{margin_rank, warp_term, ScoredSlate};
use linkrec::pipeline::{run_experiment, EvalConfig};
use linkrec::store::EmbeddingStore;
use linkrec::synth::{generate, SynthConfig, SyntheticCorpus};
use linkrec::trainer::TrainConfig;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serialises")
}

/// A model small enough to train in a few seconds in the browser.
fn demo_model(embedding_dim: usize) -> ModelConfig {
    ModelConfig {
        embedding_dim,
        abstract_len: 30,
        description_len: 20,
        paper_windows: vec![(2, 16), (3, 16)],
        repo_windows: vec![(2, 16), (3, 16)],
        tag_hidden: 16,
        gcn_hidden: 32,
        gcn_output: 32,
        ..Default::default()
    }
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    best_epoch: usize,
    history: Vec<(usize, f64, f64, f64)>,
    metrics: Vec<MetricRow>,
    held_out: Vec<String>,
}

#[wasm_bindgen]
pub struct Demo {
    synth: SyntheticCorpus,
    store: Option<EmbeddingStore>,
}

#[wasm_bindgen]
impl Demo {
    /// Generates a planted-topic corpus.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, topics: usize, papers: usize, repos: usize) -> Result<Demo, JsValue> {
        let cfg = SynthConfig {
            seed,
            topics,
            papers,
            repos,
            users: repos,
            bridge_fraction: 0.15,
            abstract_words: 30,
            embedding_dim: 32,
            ..Default::default()
        };
        Ok(Demo {
            synth: generate(&cfg).map_err(js_err)?,
            store: None,
        })
    }

    /// Paper ids, with bridge papers first.
    pub fn papers(&self) -> String {
        let mut ids: Vec<&str> = self.synth.corpus.bridges.iter().map(|b| b.paper_id.as_str()).collect();
        ids.extend(
            self.synth
                .corpus
                .papers
                .iter()
                .map(|p| p.id.as_str())
                .filter(|id| !self.synth.corpus.bridges.iter().any(|b| b.paper_id == *id)),
        );
        to_json(&ids)
    }

    /// Trains, evaluates on held-out bridge papers and keeps the embeddings for `recommend`.
    pub fn train(&mut self, epochs: usize, seed: u64) -> Result<String, JsValue> {
        let train = TrainConfig {
            epochs_max: epochs,
            seed,
            learning_rate: 0.002,
            ..Default::default()
        };
        let eval = EvalConfig {
            runs: 1,
            ks: vec![1, 5, 10, 20],
            ..Default::default()
        };
        let model = demo_model(self.synth.embeddings.dim());
        let run = run_experiment(&self.synth.corpus, &self.synth.embeddings, &model, &train, &eval).map_err(js_err)?;
        let (papers, repos) = linkrec::pipeline::embed_corpus(&run.outcome.params, &self.synth.corpus, &self.synth.embeddings).map_err(js_err)?;
        self.store = Some(EmbeddingStore::new(papers, repos).map_err(js_err)?);
        Ok(to_json(&TrainSummary {
            epochs: run.outcome.history.records.len(),
            best_epoch: run.outcome.best_epoch,
            history: run
                .outcome
                .history
                .records
                .iter()
                .map(|r| (r.epoch, r.train_warp, r.constraint_error, r.val_warp))
                .collect(),
            metrics: run.report.mean,
            held_out: run.queries.iter().map(|q| q.paper_id.clone()).collect(),
        }))
    }

    /// Top `k` repositories as `[{repo, score, topic, bridge}]`.
    pub fn recommend(&self, paper_id: &str, k: usize) -> Result<String, JsValue> {
        let store = self.store.as_ref().ok_or_else(|| js_err("train the model first"))?;
        let rec = store.recommend(paper_id, k).map_err(js_err)?;
        let cell = |ids: &[String], cells: &[(usize, usize)], id: &str| ids.iter().position(|x| x == id).map(|i| cells[i].0);
        let paper_ids: Vec<String> = self.synth.corpus.papers.iter().map(|p| p.id.clone()).collect();
        let repo_ids: Vec<String> = self.synth.corpus.repos.iter().map(|r| r.id.clone()).collect();
        let query_topic = cell(&paper_ids, &self.synth.paper_cells, paper_id);
        #[derive(Serialize)]
        struct Item<'a> {
            repo: &'a str,
            score: f64,
            topic: Option<usize>,
            bridge: bool,
        }
        let items: Vec<Item> = rec
            .items
            .iter()
            .map(|(id, score)| Item {
                repo: id,
                score: *score,
                topic: cell(&repo_ids, &self.synth.repo_cells, id),
                bridge: self.synth.corpus.bridges.iter().any(|b| b.paper_id == paper_id && b.repo_id == *id),
            })
            .collect();
        Ok(to_json(&serde_json::json!({ "query_topic": query_topic, "items": items })))
    }
}

/// Loss of one slate: `{rank, loss}` for a positive score, negative scores and a margin.
#[wasm_bindgen]
pub fn warp_slate(positive: f64, negatives: Vec<f64>, margin: f64) -> Result<String, JsValue> {
    let slate = ScoredSlate::new(positive, negatives, margin).map_err(js_err)?;
    Ok(to_json(&serde_json::json!({ "rank": margin_rank(&slate), "loss": warp_term(&slate) })))
}
