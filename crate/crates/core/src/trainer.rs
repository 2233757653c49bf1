//! Optimisation loop for `(1 + C_e) * WARP` with validation-based early stopping.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BridgeLink, Corpus, EmbeddingTable};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::model::{
    bridge_constraint, bridge_cosines, gradients, score_slates, EmbeddingMode, Graphs, ModelConfig, ModelInputs, ModelParams, SlateSpec,
};
use crate::objective::{batch_warp, check_margin, fraction_within, total_loss};
use crate::sampler::{build_positive_pairs, make_batches, positives_by_paper, sample_negatives, Provenance, TrainingBatch, TrainingPair};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs_max: usize,
    pub patience: usize,
    pub batch_size: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub n_k: usize,
    pub margin: f64,
    pub seed: u64,
    pub embedding_mode: EmbeddingMode,
    /// Fraction of bridge links used for training, sampled with the seed.
    pub bridge_ratio: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; off when absent.
    pub clip: Option<f64>,
    /// Cosine gap reported as "within" in the history.
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0005,
            epochs_max: 200,
            patience: 10,
            batch_size: 32,
            t: 6,
            n_k: 44,
            margin: 0.5,
            seed: 7,
            embedding_mode: EmbeddingMode::Fixed,
            bridge_ratio: 1.0,
            optimizer: Optimizer::Adam,
            clip: None,
            eps: 0.001,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_margin(self.margin)?;
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be non-negative", self.learning_rate)));
        }
        if self.t == 0 || self.n_k == 0 || self.batch_size == 0 {
            return Err(Error::Config("T, n_k and batch_size must be at least 1".into()));
        }
        if !(self.bridge_ratio > 0.0 && self.bridge_ratio <= 1.0) {
            return Err(Error::Config(format!("bridge_ratio {} outside (0, 1]", self.bridge_ratio)));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: f64,
    pub train_warp: f64,
    pub constraint_error: f64,
    pub val_warp: f64,
    /// Fraction of constraint bridge pairs with `1 - cos <= eps`.
    pub bridge_within_eps: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.val_warp <= r.val_warp => Some(b),
            _ => Some(r),
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "epoch,train_total,train_warp,constraint_error,val_warp,bridge_within_eps")?;
            for r in &self.records {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.epoch, r.train_total, r.train_warp, r.constraint_error, r.val_warp, r.bridge_within_eps
                )?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// Seeded shuffle, then the first 90% train and the rest validate.
pub fn split_train_validation<R: Rng>(pairs: &[TrainingPair], rng: &mut R) -> Result<(Vec<TrainingPair>, Vec<TrainingPair>)> {
    if pairs.len() < 10 {
        return Err(Error::Precondition(format!(
            "{} training pairs; at least 10 are needed for a validation split",
            pairs.len()
        )));
    }
    let mut shuffled = pairs.to_vec();
    shuffled.shuffle(rng);
    let n_train = pairs.len() * 9 / 10;
    let val = shuffled.split_off(n_train);
    Ok((shuffled, val))
}

/// Seeded subset of `ceil(ratio * m)` bridges, returned sorted.
pub fn subsample_bridges<R: Rng>(bridges: &[BridgeLink], ratio: f64, rng: &mut R) -> Vec<BridgeLink> {
    let mut all = bridges.to_vec();
    all.sort();
    if ratio >= 1.0 {
        return all;
    }
    let keep = ((all.len() as f64 * ratio).ceil() as usize).min(all.len());
    all.shuffle(rng);
    all.truncate(keep);
    all.sort();
    all
}

/// First and second moment estimates for Adam.
struct Moments {
    m: ModelParams,
    v: ModelParams,
    step: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_update(params: &mut ModelParams, grads: &ModelParams, cfg: &TrainConfig, moments: &mut Moments) {
    let scale = match cfg.clip {
        Some(c) => {
            let norm = grads
                .tensors()
                .iter()
                .filter(|t| t.trainable)
                .flat_map(|t| t.data.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let lr = cfg.learning_rate;
    moments.step += 1;
    let (bc1, bc2) = (1.0 - BETA1.powi(moments.step), 1.0 - BETA2.powi(moments.step));
    let grads = grads.tensors();
    let mut ms = moments.m.tensors_mut();
    let mut vs = moments.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms.iter_mut()).zip(vs.iter_mut()) {
        if !p.trainable {
            continue;
        }
        debug_assert_eq!(p.name, g.name);
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (w, &d) in p.data.iter_mut().zip(g.data) {
                    *w -= lr * scale * d;
                }
            }
            Optimizer::Adam => {
                for (((w, &d), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                    let d = d * scale;
                    *mi = BETA1 * *mi + (1.0 - BETA1) * d;
                    *vi = BETA2 * *vi + (1.0 - BETA2) * d * d;
                    *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Everything `train` produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub train_pairs: Vec<TrainingPair>,
    pub val_pairs: Vec<TrainingPair>,
    /// Bridge pairs in the training split; these define `C_e`.
    pub constraint_bridges: Vec<BridgeLink>,
}

type IdIndex<'a> = HashMap<&'a str, usize>;

fn to_slate(pair: &TrainingPair, negatives: &[String], p: &IdIndex, r: &IdIndex) -> SlateSpec {
    SlateSpec {
        paper: p[pair.paper_id.as_str()],
        positive: r[pair.repo_id.as_str()],
        negatives: negatives.iter().map(|n| r[n.as_str()]).collect(),
    }
}

fn batch_slates(batch: &TrainingBatch, pi: &IdIndex, ri: &IdIndex) -> Vec<SlateSpec> {
    batch.pairs.iter().zip(&batch.negatives).map(|(p, n)| to_slate(p, n, pi, ri)).collect()
}

/// Trains on `corpus.bridges` (callers remove held-out links beforehand).
pub fn train(cfg: &TrainConfig, model_cfg: &ModelConfig, corpus: &Corpus, graphs: &Graphs, table: &EmbeddingTable) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.bridges.is_empty() {
        return Err(Error::Precondition("no bridge pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let bridges = subsample_bridges(&corpus.bridges, cfg.bridge_ratio, &mut rng);
    let pairs = build_positive_pairs(&bridges, &graphs.citation, &corpus.repos, cfg.t)?;
    let positives = positives_by_paper(&pairs);
    let (train_pairs, val_pairs) = split_train_validation(&pairs, &mut rng)?;
    let constraint_bridges: Vec<BridgeLink> = train_pairs
        .iter()
        .filter(|p| p.provenance == Provenance::Bridge)
        .map(|p| BridgeLink {
            paper_id: p.paper_id.clone(),
            repo_id: p.repo_id.clone(),
        })
        .collect();
    let (pi, ri) = (corpus.paper_index(), corpus.repo_index());
    let constraint: Vec<(usize, usize)> = constraint_bridges
        .iter()
        .map(|b| (pi[b.paper_id.as_str()], ri[b.repo_id.as_str()]))
        .collect();
    log::info!(
        "{} bridges, {} positive pairs ({} train / {} validation), {} constraint pairs",
        bridges.len(),
        pairs.len(),
        train_pairs.len(),
        val_pairs.len(),
        constraint.len()
    );

    let inputs = ModelInputs::new(corpus, graphs, table, model_cfg)?;
    let mut params = ModelParams::init(model_cfg, cfg.embedding_mode, &inputs, cfg.seed)?;
    params.recalibrate(&inputs)?;
    let all_repos: Vec<String> = corpus.repos.iter().map(|r| r.id.clone()).collect();
    let empty = BTreeSet::new();
    let val_slates: Vec<SlateSpec> = val_pairs
        .iter()
        .map(|p| {
            let negs = sample_negatives(&mut rng, &p.paper_id, &all_repos, positives.get(&p.paper_id).unwrap_or(&empty), cfg.n_k)?;
            Ok(to_slate(p, &negs, &pi, &ri))
        })
        .collect::<Result<_>>()?;

    let mut moments = Moments {
        m: params.zeros_like(),
        v: params.zeros_like(),
        step: 0,
    };
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut stale = 0;
    for epoch in 1..=cfg.epochs_max {
        let batches = make_batches(&train_pairs, &mut rng, cfg.batch_size, cfg.n_k, &all_repos, &positives)?;
        let mut epoch_slates = Vec::new();
        for batch in &batches {
            let slates = batch_slates(batch, &pi, &ri);
            let (loss, grads) = gradients(&params, &inputs, &slates, &constraint, cfg.margin)?;
            if !loss.total.is_finite() {
                let ids: Vec<String> = batch.pairs.iter().map(|p| format!("{}->{}", p.paper_id, p.repo_id)).collect();
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}: warp {} C_e {} on batch [{}]",
                    loss.warp,
                    loss.constraint_error,
                    ids.join(", ")
                )));
            }
            apply_update(&mut params, &grads, cfg, &mut moments);
            epoch_slates.extend(slates);
        }
        params.recalibrate(&inputs)?;

        let pass = params.forward(&inputs, Mode::Infer)?;
        let warp = batch_warp(&score_slates(&pass.papers, &pass.repos, &epoch_slates, cfg.margin)?)?;
        let c_e = bridge_constraint(&pass.papers, &pass.repos, &constraint);
        let totals = total_loss(warp, c_e);
        let val_warp = batch_warp(&score_slates(&pass.papers, &pass.repos, &val_slates, cfg.margin)?)?;
        let within = fraction_within(&bridge_cosines(&pass.papers, &pass.repos, &constraint), cfg.eps);
        let record = EpochRecord {
            epoch,
            train_total: totals.total,
            train_warp: totals.warp,
            constraint_error: totals.constraint_error,
            val_warp,
            bridge_within_eps: within,
        };
        log::debug!("{record:?}");
        history.records.push(record);
        if !val_warp.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: validation loss {val_warp}")));
        }
        if val_warp < best.0 {
            best = (val_warp, epoch, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("early stop at epoch {epoch}; best epoch {}", best.1);
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        history,
        best_epoch: best.1,
        train_pairs,
        val_pairs,
        constraint_bridges,
    })
}
