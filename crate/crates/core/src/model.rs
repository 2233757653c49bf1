//! Full two-tower model: text encoders feeding per-platform GCNs.
//!
//! Convolutions run in vocabulary-projected form. Every token vector is
//! multiplied once by all filter slices (`Y = E W`), and a window's
//! pre-activation is the sum of the projected rows of its tokens. This gives
//! the same values as convolving the padded token matrix, at a cost linear in
//! the number of real tokens. Windows lying entirely in padding evaluate to
//! the filter bias.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus, EmbeddingTable};
use crate::encoder::{relu, BatchNorm, ConvFilterBank, Mode, TagEncoder, TagPooling};
use crate::error::{Error, Result};
use crate::gcn::{gcn_backward, gcn_forward_cached, normalize_rows, normalize_rows_backward, EmbeddingMatrix, GcnCache, GcnTower};
use crate::graph::{build_citation_graph, build_repo_graph, compute_tfidf, normalize_adjacency, ContextGraph, CsrMatrix, TfidfIndex};
use crate::objective::{constraint_error, total_loss, warp_term_grad, LossBreakdown, ScoredSlate};

/// How word vectors enter the encoders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    /// Pre-trained vectors, frozen.
    #[default]
    Fixed,
    /// Initialised from the pre-trained vectors and trained.
    Trainable,
    /// Frozen and trainable copies side by side (doubles the input width).
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub abstract_len: usize,
    pub description_len: usize,
    /// `(window height, feature maps)` for abstracts.
    pub paper_windows: Vec<(usize, usize)>,
    /// `(window height, feature maps)` for descriptions.
    pub repo_windows: Vec<(usize, usize)>,
    pub tag_hidden: usize,
    pub gcn_hidden: usize,
    pub gcn_output: usize,
    pub tag_pooling: TagPooling,
    pub bn_eps: f64,
    pub tfidf_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 200,
            abstract_len: 200,
            description_len: 50,
            paper_windows: vec![(2, 64), (3, 64), (5, 64), (7, 64)],
            repo_windows: vec![(2, 64), (4, 32)],
            tag_hidden: 96,
            gcn_hidden: 256,
            gcn_output: 256,
            tag_pooling: TagPooling::Mean,
            bn_eps: 1e-5,
            tfidf_threshold: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let max_h = |w: &[(usize, usize)]| w.iter().map(|x| x.0).max().unwrap_or(0);
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.paper_windows.is_empty() || self.repo_windows.is_empty() {
            return Err(Error::Config("filter window lists must be non-empty".into()));
        }
        if self.paper_windows.iter().chain(&self.repo_windows).any(|&(h, m)| h == 0 || m == 0) {
            return Err(Error::Config("window heights and map counts must be positive".into()));
        }
        if self.abstract_len < max_h(&self.paper_windows) {
            return Err(Error::Config(format!(
                "abstract_len {} shorter than largest abstract window",
                self.abstract_len
            )));
        }
        if self.description_len < max_h(&self.repo_windows) {
            return Err(Error::Config(format!(
                "description_len {} shorter than largest description window",
                self.description_len
            )));
        }
        if self.tag_hidden == 0 || self.gcn_hidden == 0 || self.gcn_output == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config("bn_eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tfidf_threshold) {
            return Err(Error::Config(format!(
                "tfidf_threshold {} outside [0, 1]",
                self.tfidf_threshold
            )));
        }
        Ok(())
    }
}

/// Both context graphs plus the TF-IDF index they were built from.
#[derive(Clone, Debug)]
pub struct Graphs {
    pub citation: ContextGraph,
    pub repo: ContextGraph,
    pub tfidf: TfidfIndex,
}

pub fn build_graphs(corpus: &Corpus, tfidf_threshold: f64) -> Result<Graphs> {
    let tfidf = compute_tfidf(&corpus.repos)?;
    let repo = build_repo_graph(&corpus.repos, &tfidf, tfidf_threshold)?;
    Ok(Graphs {
        citation: normalize_adjacency(build_citation_graph(&corpus.papers)),
        repo: normalize_adjacency(repo),
        tfidf,
    })
}

type Doc = Vec<Option<u32>>;

/// Index-level view of a corpus prepared for the model.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    pub vocab: Vec<String>,
    /// Pre-trained vectors for `vocab`, one row per token.
    pub base_embeddings: Array2<f64>,
    pub paper_ids: Vec<String>,
    pub repo_ids: Vec<String>,
    pub paper_docs: Vec<Doc>,
    pub repo_docs: Vec<Doc>,
    /// Pooled tag input of each repository as a sparse combination of vocabulary rows.
    pub tag_coeffs: Vec<Vec<(u32, f64)>>,
    pub paper_adj: CsrMatrix,
    pub repo_adj: CsrMatrix,
    pub abstract_len: usize,
    pub description_len: usize,
}

impl ModelInputs {
    pub fn new(corpus: &Corpus, graphs: &Graphs, table: &EmbeddingTable, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if table.dim() != cfg.embedding_dim {
            return Err(Error::Config(format!(
                "embedding table has dimension {}, model expects {}",
                table.dim(),
                cfg.embedding_dim
            )));
        }
        let paper_adj = graphs
            .citation
            .normalized()
            .ok_or_else(|| Error::Precondition("citation graph not normalised".into()))?
            .clone();
        let repo_adj = graphs
            .repo
            .normalized()
            .ok_or_else(|| Error::Precondition("repository graph not normalised".into()))?
            .clone();
        if graphs.citation.node_ids.iter().ne(corpus.papers.iter().map(|p| &p.id))
            || graphs.repo.node_ids.iter().ne(corpus.repos.iter().map(|r| &r.id))
        {
            return Err(Error::Shape("graph node order differs from corpus order".into()));
        }

        let mut used: BTreeSet<&str> = BTreeSet::new();
        let tag_words: Vec<Vec<Vec<String>>> = corpus
            .repos
            .iter()
            .map(|r| r.tags.iter().map(|t| tokenize(t)).collect())
            .collect();
        for p in &corpus.papers {
            used.extend(p.abstract_tokens.iter().take(cfg.abstract_len).map(String::as_str));
        }
        for r in &corpus.repos {
            used.extend(r.description_tokens.iter().take(cfg.description_len).map(String::as_str));
        }
        for words in tag_words.iter().flatten().flatten() {
            used.insert(words.as_str());
        }
        let vocab: Vec<String> = used.into_iter().filter(|t| table.contains(t)).map(str::to_string).collect();
        let index: BTreeMap<&str, u32> = vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32)).collect();
        let mut base = Array2::zeros((vocab.len(), table.dim()));
        for (i, t) in vocab.iter().enumerate() {
            base.row_mut(i).assign(&ndarray::ArrayView1::from(table.lookup(t)));
        }
        let to_doc = |tokens: &[String], len: usize| -> Doc {
            tokens.iter().take(len).map(|t| index.get(t.as_str()).copied()).collect()
        };
        let tag_coeffs = tag_words
            .iter()
            .map(|tags| {
                let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
                let n_tags = tags.len() as f64;
                for words in tags {
                    let scale = match cfg.tag_pooling {
                        TagPooling::Mean if !words.is_empty() => 1.0 / words.len() as f64,
                        _ => 1.0,
                    };
                    for w in words {
                        if let Some(&v) = index.get(w.as_str()) {
                            *acc.entry(v).or_default() += scale / n_tags;
                        }
                    }
                }
                acc.into_iter().collect()
            })
            .collect();
        Ok(ModelInputs {
            paper_docs: corpus.papers.iter().map(|p| to_doc(&p.abstract_tokens, cfg.abstract_len)).collect(),
            repo_docs: corpus.repos.iter().map(|r| to_doc(&r.description_tokens, cfg.description_len)).collect(),
            paper_ids: corpus.papers.iter().map(|p| p.id.clone()).collect(),
            repo_ids: corpus.repos.iter().map(|r| r.id.clone()).collect(),
            vocab,
            base_embeddings: base,
            tag_coeffs,
            paper_adj,
            repo_adj,
            abstract_len: cfg.abstract_len,
            description_len: cfg.description_len,
        })
    }

    pub fn n_papers(&self) -> usize {
        self.paper_ids.len()
    }

    pub fn n_repos(&self) -> usize {
        self.repo_ids.len()
    }
}

/// Trainable word vectors aligned with a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTable {
    pub vocab: Vec<String>,
    pub vectors: Array2<f64>,
}

/// Shape-determining settings stored alongside parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub model: ModelConfig,
    pub embedding_mode: EmbeddingMode,
    /// Vocabulary of the trainable token table, empty in fixed mode.
    pub vocab: Vec<String>,
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        match self.embedding_mode {
            EmbeddingMode::Concat => 2 * self.model.embedding_dim,
            _ => self.model.embedding_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub paper_conv: ConvFilterBank,
    pub repo_conv: ConvFilterBank,
    pub tags: TagEncoder,
    pub bn: BatchNorm,
    pub paper_gcn: GcnTower,
    pub repo_gcn: GcnTower,
    pub tokens: Option<TokenTable>,
}

/// A named view of one parameter tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    pub trainable: bool,
}

pub struct TensorViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
    pub trainable: bool,
}

impl ModelParams {
    /// Seeded initialisation. `inputs` supplies the vocabulary for trainable token modes.
    pub fn init(cfg: &ModelConfig, mode: EmbeddingMode, inputs: &ModelInputs, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture {
            model: cfg.clone(),
            embedding_mode: mode,
            vocab: if mode == EmbeddingMode::Fixed { Vec::new() } else { inputs.vocab.clone() },
        };
        let k = arch.input_dim();
        let paper_conv = ConvFilterBank::init(k, &cfg.paper_windows, &mut rng);
        let repo_conv = ConvFilterBank::init(k, &cfg.repo_windows, &mut rng);
        let repo_width = repo_conv.output_width();
        let tags = TagEncoder::init(k, cfg.tag_hidden, repo_width, &mut rng);
        let paper_gcn = GcnTower::init(&[paper_conv.output_width(), cfg.gcn_hidden, cfg.gcn_output], &mut rng);
        let repo_gcn = GcnTower::init(&[repo_width, cfg.gcn_hidden, cfg.gcn_output], &mut rng);
        let tokens = (mode != EmbeddingMode::Fixed).then(|| TokenTable {
            vocab: inputs.vocab.clone(),
            vectors: inputs.base_embeddings.clone(),
        });
        Ok(ModelParams {
            arch,
            paper_conv,
            repo_conv,
            tags,
            bn: BatchNorm::new(repo_width, cfg.bn_eps),
            paper_gcn,
            repo_gcn,
            tokens,
        })
    }

    /// All-zero parameters with the shapes implied by `arch`.
    pub fn zeros(arch: &Architecture) -> Self {
        let cfg = &arch.model;
        let k = arch.input_dim();
        let paper_conv = ConvFilterBank::zeros(k, &cfg.paper_windows);
        let repo_conv = ConvFilterBank::zeros(k, &cfg.repo_windows);
        let repo_width = repo_conv.output_width();
        let mut bn = BatchNorm::new(repo_width, cfg.bn_eps);
        bn.gamma.fill(0.0);
        bn.running_var.fill(0.0);
        ModelParams {
            tags: TagEncoder::zeros(k, cfg.tag_hidden, repo_width),
            paper_gcn: GcnTower::zeros(&[paper_conv.output_width(), cfg.gcn_hidden, cfg.gcn_output]),
            repo_gcn: GcnTower::zeros(&[repo_width, cfg.gcn_hidden, cfg.gcn_output]),
            tokens: (arch.embedding_mode != EmbeddingMode::Fixed).then(|| TokenTable {
                vocab: arch.vocab.clone(),
                vectors: Array2::zeros((arch.vocab.len(), cfg.embedding_dim)),
            }),
            paper_conv,
            repo_conv,
            bn,
            arch: arch.clone(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch)
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        fn view<'a>(name: String, a: &'a ndarray::ArrayBase<impl ndarray::Data<Elem = f64>, impl ndarray::Dimension>, trainable: bool) -> TensorView<'a> {
            TensorView {
                name,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("parameters use standard layout"),
                trainable,
            }
        }
        let mut out = Vec::new();
        for (i, w) in self.paper_conv.windows.iter().enumerate() {
            out.push(view(format!("paper_conv.{i}.weights"), &w.weights, true));
            out.push(view(format!("paper_conv.{i}.bias"), &w.bias, true));
        }
        for (i, w) in self.repo_conv.windows.iter().enumerate() {
            out.push(view(format!("repo_conv.{i}.weights"), &w.weights, true));
            out.push(view(format!("repo_conv.{i}.bias"), &w.bias, true));
        }
        out.push(view("tags.w0".into(), &self.tags.w0, true));
        out.push(view("tags.b0".into(), &self.tags.b0, true));
        out.push(view("tags.w1".into(), &self.tags.w1, true));
        out.push(view("tags.b1".into(), &self.tags.b1, true));
        out.push(view("bn.gamma".into(), &self.bn.gamma, true));
        out.push(view("bn.beta".into(), &self.bn.beta, true));
        out.push(view("bn.running_mean".into(), &self.bn.running_mean, false));
        out.push(view("bn.running_var".into(), &self.bn.running_var, false));
        for (i, w) in self.paper_gcn.weights.iter().enumerate() {
            out.push(view(format!("paper_gcn.{i}"), w, true));
        }
        for (i, w) in self.repo_gcn.weights.iter().enumerate() {
            out.push(view(format!("repo_gcn.{i}"), w, true));
        }
        if let Some(tok) = &self.tokens {
            out.push(view("tokens".into(), &tok.vectors, true));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out: Vec<TensorViewMut<'_>> = Vec::new();
        {
            let me = &mut *self;
            for (i, w) in me.paper_conv.windows.iter_mut().enumerate() {
                let shape = w.weights.shape().to_vec();
                out.push(view_mut(format!("paper_conv.{i}.weights"), shape, w.weights.as_slice_mut().unwrap(), true));
                let shape = w.bias.shape().to_vec();
                out.push(view_mut(format!("paper_conv.{i}.bias"), shape, w.bias.as_slice_mut().unwrap(), true));
            }
            for (i, w) in me.repo_conv.windows.iter_mut().enumerate() {
                let shape = w.weights.shape().to_vec();
                out.push(view_mut(format!("repo_conv.{i}.weights"), shape, w.weights.as_slice_mut().unwrap(), true));
                let shape = w.bias.shape().to_vec();
                out.push(view_mut(format!("repo_conv.{i}.bias"), shape, w.bias.as_slice_mut().unwrap(), true));
            }
            let t = &mut me.tags;
            out.push(view_mut("tags.w0".into(), t.w0.shape().to_vec(), t.w0.as_slice_mut().unwrap(), true));
            out.push(view_mut("tags.b0".into(), t.b0.shape().to_vec(), t.b0.as_slice_mut().unwrap(), true));
            out.push(view_mut("tags.w1".into(), t.w1.shape().to_vec(), t.w1.as_slice_mut().unwrap(), true));
            out.push(view_mut("tags.b1".into(), t.b1.shape().to_vec(), t.b1.as_slice_mut().unwrap(), true));
            let bn = &mut me.bn;
            out.push(view_mut("bn.gamma".into(), bn.gamma.shape().to_vec(), bn.gamma.as_slice_mut().unwrap(), true));
            out.push(view_mut("bn.beta".into(), bn.beta.shape().to_vec(), bn.beta.as_slice_mut().unwrap(), true));
            out.push(view_mut(
                "bn.running_mean".into(),
                bn.running_mean.shape().to_vec(),
                bn.running_mean.as_slice_mut().unwrap(),
                false,
            ));
            out.push(view_mut(
                "bn.running_var".into(),
                bn.running_var.shape().to_vec(),
                bn.running_var.as_slice_mut().unwrap(),
                false,
            ));
            for (i, w) in me.paper_gcn.weights.iter_mut().enumerate() {
                let shape = w.shape().to_vec();
                out.push(view_mut(format!("paper_gcn.{i}"), shape, w.as_slice_mut().unwrap(), true));
            }
            for (i, w) in me.repo_gcn.weights.iter_mut().enumerate() {
                let shape = w.shape().to_vec();
                out.push(view_mut(format!("repo_gcn.{i}"), shape, w.as_slice_mut().unwrap(), true));
            }
            if let Some(tok) = me.tokens.as_mut() {
                let shape = tok.vectors.shape().to_vec();
                out.push(view_mut("tokens".into(), shape, tok.vectors.as_slice_mut().unwrap(), true));
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors().iter().filter(|t| t.trainable).map(|t| t.data.len()).sum()
    }

    fn check_inputs(&self, inputs: &ModelInputs) -> Result<()> {
        if let Some(tok) = &self.tokens {
            if tok.vocab != inputs.vocab {
                return Err(Error::Shape("trainable token table vocabulary differs from corpus vocabulary".into()));
            }
        }
        if inputs.base_embeddings.ncols() != self.arch.model.embedding_dim {
            return Err(Error::Shape("embedding dimension differs from model".into()));
        }
        Ok(())
    }

    /// Token vectors as seen by the encoders.
    fn effective_embeddings<'a>(&'a self, inputs: &'a ModelInputs) -> Cow<'a, Array2<f64>> {
        match (&self.arch.embedding_mode, &self.tokens) {
            (EmbeddingMode::Trainable, Some(tok)) => Cow::Borrowed(&tok.vectors),
            (EmbeddingMode::Concat, Some(tok)) => Cow::Owned(
                concatenate(Axis(1), &[inputs.base_embeddings.view(), tok.vectors.view()]).expect("matching rows"),
            ),
            _ => Cow::Borrowed(&inputs.base_embeddings),
        }
    }

    pub fn forward(&self, inputs: &ModelInputs, mode: Mode) -> Result<ForwardPass> {
        self.check_inputs(inputs)?;
        let emb = self.effective_embeddings(inputs).into_owned();

        let paper_proj = ProjectedBank::new(&self.paper_conv, &emb);
        let (paper_feat, paper_arg) = paper_proj.forward(&self.paper_conv, &inputs.paper_docs, inputs.abstract_len)?;
        let (paper_raw, paper_gcn) = gcn_forward_cached(&paper_feat, &inputs.paper_adj, &self.paper_gcn)?;
        let (paper_unit, paper_norms, paper_zero_rows) = normalize_rows(&paper_raw);

        let repo_proj = ProjectedBank::new(&self.repo_conv, &emb);
        let (repo_feat, repo_arg) = repo_proj.forward(&self.repo_conv, &inputs.repo_docs, inputs.description_len)?;
        let tag_in = sparse_rows(&inputs.tag_coeffs, &emb);
        let tag_pre = tag_in.dot(&self.tags.w0) + &self.tags.b0;
        let tag_hidden = tag_pre.mapv(relu);
        let tag_out = tag_hidden.dot(&self.tags.w1) + &self.tags.b1;
        if tag_out.ncols() != repo_feat.ncols() {
            return Err(Error::Shape("tag encoder width differs from description width".into()));
        }
        let fused = &repo_feat + &tag_out;
        let (mean, var) = match mode {
            Mode::Train => BatchNorm::batch_stats(&fused),
            Mode::Infer => (self.bn.running_mean.clone(), self.bn.running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.bn.eps).sqrt());
        let x_hat = (&fused - &mean) * &inv_std;
        let repo_in = &x_hat * &self.bn.gamma + &self.bn.beta;
        let (repo_raw, repo_gcn) = gcn_forward_cached(&repo_in, &inputs.repo_adj, &self.repo_gcn)?;
        let (repo_unit, repo_norms, repo_zero_rows) = normalize_rows(&repo_raw);

        Ok(ForwardPass {
            mode,
            papers: paper_unit,
            repos: repo_unit,
            paper_zero_rows,
            repo_zero_rows,
            cache: Cache {
                emb,
                paper_proj,
                paper_feat,
                paper_arg,
                paper_gcn,
                paper_norms,
                repo_proj,
                repo_feat,
                repo_arg,
                tag_in,
                tag_pre,
                tag_hidden,
                fused,
                x_hat,
                inv_std,
                repo_gcn,
                repo_norms,
            },
        })
    }

    /// Gradients of a scalar with respect to every parameter given its gradients
    /// with respect to the unit-normalised embeddings of a train-mode pass.
    pub fn backward(&self, inputs: &ModelInputs, pass: &ForwardPass, d_papers: &Array2<f64>, d_repos: &Array2<f64>) -> Result<ModelParams> {
        if pass.mode != Mode::Train {
            return Err(Error::Precondition("backward needs a train-mode forward pass".into()));
        }
        let c = &pass.cache;
        let mut g = self.zeros_like();
        let mut d_emb = Array2::<f64>::zeros(c.emb.raw_dim());
        let want_emb = self.tokens.is_some();

        // paper tower
        let d_raw = normalize_rows_backward(d_papers, &pass.papers, &c.paper_norms);
        let (gw, d_feat) = gcn_backward(&d_raw, &inputs.paper_adj, &self.paper_gcn, &c.paper_gcn);
        g.paper_gcn.weights = gw;
        c.paper_proj.backward(
            &self.paper_conv,
            &inputs.paper_docs,
            &c.paper_feat,
            &c.paper_arg,
            &d_feat,
            &c.emb,
            &mut g.paper_conv,
            want_emb.then_some(&mut d_emb),
        );

        // repository tower
        let d_raw = normalize_rows_backward(d_repos, &pass.repos, &c.repo_norms);
        let (gw, d_in) = gcn_backward(&d_raw, &inputs.repo_adj, &self.repo_gcn, &c.repo_gcn);
        g.repo_gcn.weights = gw;
        g.bn.gamma = (&d_in * &c.x_hat).sum_axis(Axis(0));
        g.bn.beta = d_in.sum_axis(Axis(0));
        let n = d_in.nrows() as f64;
        let d_xhat = &d_in * &self.bn.gamma;
        let sum_d = d_xhat.sum_axis(Axis(0));
        let sum_dx = (&d_xhat * &c.x_hat).sum_axis(Axis(0));
        let d_fused = ((&d_xhat * n) - &sum_d - &(&c.x_hat * &sum_dx)) * &(&c.inv_std / n);

        c.repo_proj.backward(
            &self.repo_conv,
            &inputs.repo_docs,
            &c.repo_feat,
            &c.repo_arg,
            &d_fused,
            &c.emb,
            &mut g.repo_conv,
            want_emb.then_some(&mut d_emb),
        );
        g.tags.w1 = c.tag_hidden.t().dot(&d_fused);
        g.tags.b1 = d_fused.sum_axis(Axis(0));
        let mut d_pre = d_fused.dot(&self.tags.w1.t());
        d_pre.zip_mut_with(&c.tag_pre, |d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
        g.tags.w0 = c.tag_in.t().dot(&d_pre);
        g.tags.b0 = d_pre.sum_axis(Axis(0));
        if want_emb {
            let d_tag_in = d_pre.dot(&self.tags.w0.t());
            for (r, coeffs) in inputs.tag_coeffs.iter().enumerate() {
                for &(v, w) in coeffs {
                    d_emb.row_mut(v as usize).scaled_add(w, &d_tag_in.row(r));
                }
            }
            let k = self.arch.model.embedding_dim;
            let tok = g.tokens.as_mut().expect("token gradients allocated");
            tok.vectors = match self.arch.embedding_mode {
                EmbeddingMode::Concat => d_emb.slice(ndarray::s![.., k..]).to_owned(),
                _ => d_emb,
            };
        }
        Ok(g)
    }

    /// Repository fused features before batch normalisation.
    pub fn fused_repo_features(&self, inputs: &ModelInputs) -> Result<Array2<f64>> {
        Ok(self.forward(inputs, Mode::Train)?.cache.fused)
    }

    /// Sets the batch-norm running statistics to the statistics of the whole repository set.
    pub fn recalibrate(&mut self, inputs: &ModelInputs) -> Result<()> {
        let fused = self.fused_repo_features(inputs)?;
        let (mean, var) = BatchNorm::batch_stats(&fused);
        self.bn.running_mean = mean;
        self.bn.running_var = var;
        Ok(())
    }
}

fn view_mut(name: String, shape: Vec<usize>, data: &mut [f64], trainable: bool) -> TensorViewMut<'_> {
    TensorViewMut {
        name,
        shape,
        data,
        trainable,
    }
}

/// Rows `sum_j c_j * emb[j]` for each sparse coefficient list.
fn sparse_rows(coeffs: &[Vec<(u32, f64)>], emb: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((coeffs.len(), emb.ncols()));
    for (r, list) in coeffs.iter().enumerate() {
        let mut row = out.row_mut(r);
        for &(v, w) in list {
            row.scaled_add(w, &emb.row(v as usize));
        }
    }
    out
}

/// Filter slices laid out as columns: window `w`, offset `o`, filter `j`
/// maps to column `offset[w] + o * maps + j`.
#[derive(Clone, Debug)]
struct ProjectedBank {
    columns: Array2<f64>,
    offsets: Vec<usize>,
    /// `emb . columns`, one row per vocabulary token.
    projected: Array2<f64>,
}

/// Argmax window start per pooled feature; `-1` marks an all-padding window.
type ArgMax = Vec<i32>;

impl ProjectedBank {
    fn new(bank: &ConvFilterBank, emb: &Array2<f64>) -> Self {
        let k = bank.input_dim;
        let total: usize = bank.windows.iter().map(|w| w.height * w.maps()).sum();
        let mut columns = Array2::zeros((k, total));
        let mut offsets = Vec::with_capacity(bank.windows.len());
        let mut off = 0;
        for w in &bank.windows {
            offsets.push(off);
            let m = w.maps();
            for j in 0..m {
                for o in 0..w.height {
                    for c in 0..k {
                        columns[[c, off + o * m + j]] = w.weights[[j, o * k + c]];
                    }
                }
            }
            off += w.height * m;
        }
        let projected = emb.dot(&columns);
        ProjectedBank {
            columns,
            offsets,
            projected,
        }
    }

    fn forward_doc(&self, bank: &ConvFilterBank, doc: &[Option<u32>], fixed_len: usize) -> (Vec<f64>, ArgMax) {
        let len = doc.len().min(fixed_len);
        let width = bank.output_width();
        let proj = self.projected.as_slice().expect("standard layout");
        let stride = self.projected.ncols();
        let mut feats = Vec::with_capacity(width);
        let mut args = Vec::with_capacity(width);
        for (w, window) in bank.windows.iter().enumerate() {
            let (h, m, off) = (window.height, window.maps(), self.offsets[w]);
            let starts = fixed_len + 1 - h;
            let real = len.min(starts);
            let bias = window.bias.as_slice().expect("contiguous bias");
            let mut best = vec![f64::NEG_INFINITY; m];
            let mut best_at = vec![-1i32; m];
            let mut acc = vec![0.0; m];
            for i in 0..real {
                acc.copy_from_slice(bias);
                for (o, tok) in doc[i..len.min(i + h)].iter().enumerate() {
                    if let Some(v) = *tok {
                        let start = v as usize * stride + off + o * m;
                        for (a, y) in acc.iter_mut().zip(&proj[start..start + m]) {
                            *a += y;
                        }
                    }
                }
                for ((b, at), &a) in best.iter_mut().zip(best_at.iter_mut()).zip(&acc) {
                    if a > *b {
                        *b = a;
                        *at = i as i32;
                    }
                }
            }
            if real < starts {
                for ((b, at), &a) in best.iter_mut().zip(best_at.iter_mut()).zip(bias) {
                    if a > *b {
                        *b = a;
                        *at = -1;
                    }
                }
            }
            feats.extend(best.iter().map(|&b| relu(b)));
            args.extend(best_at);
        }
        (feats, args)
    }

    fn forward(&self, bank: &ConvFilterBank, docs: &[Doc], fixed_len: usize) -> Result<(Array2<f64>, Vec<ArgMax>)> {
        if let Some(w) = bank.windows.iter().find(|w| w.height > fixed_len) {
            return Err(Error::Precondition(format!(
                "text length {fixed_len} shorter than window height {}",
                w.height
            )));
        }
        #[cfg(feature = "parallel")]
        let rows: Vec<(Vec<f64>, ArgMax)> = {
            use rayon::prelude::*;
            docs.par_iter().map(|d| self.forward_doc(bank, d, fixed_len)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let rows: Vec<(Vec<f64>, ArgMax)> = docs.iter().map(|d| self.forward_doc(bank, d, fixed_len)).collect();
        let width = bank.output_width();
        let mut feats = Array2::zeros((docs.len(), width));
        let mut args = Vec::with_capacity(docs.len());
        for (i, (f, a)) in rows.into_iter().enumerate() {
            feats.row_mut(i).assign(&Array1::from(f));
            args.push(a);
        }
        Ok((feats, args))
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        bank: &ConvFilterBank,
        docs: &[Doc],
        feats: &Array2<f64>,
        args: &[ArgMax],
        d_feats: &Array2<f64>,
        emb: &Array2<f64>,
        grad: &mut ConvFilterBank,
        d_emb: Option<&mut Array2<f64>>,
    ) {
        let mut d_proj = Array2::<f64>::zeros(self.projected.raw_dim());
        let total_cols = self.columns.ncols();
        for (d, doc) in docs.iter().enumerate() {
            let mut fi = 0;
            for (w, window) in bank.windows.iter().enumerate() {
                let (h, m, off) = (window.height, window.maps(), self.offsets[w]);
                for j in 0..m {
                    let g = d_feats[[d, fi]];
                    if feats[[d, fi]] > 0.0 && g != 0.0 {
                        grad.windows[w].bias[j] += g;
                        let at = args[d][fi];
                        if at >= 0 {
                            for o in 0..h {
                                let p = at as usize + o;
                                if p >= doc.len() {
                                    break;
                                }
                                if let Some(v) = doc[p] {
                                    d_proj[[v as usize, off + o * m + j]] += g;
                                }
                            }
                        }
                    }
                    fi += 1;
                }
            }
        }
        debug_assert_eq!(d_proj.ncols(), total_cols);
        let d_cols = emb.t().dot(&d_proj);
        let k = bank.input_dim;
        for (w, window) in bank.windows.iter().enumerate() {
            let (m, off) = (window.maps(), self.offsets[w]);
            let gw = &mut grad.windows[w].weights;
            for j in 0..m {
                for o in 0..window.height {
                    for c in 0..k {
                        gw[[j, o * k + c]] += d_cols[[c, off + o * m + j]];
                    }
                }
            }
        }
        if let Some(d_emb) = d_emb {
            *d_emb += &d_proj.dot(&self.columns.t());
        }
    }
}

#[derive(Clone, Debug)]
struct Cache {
    emb: Array2<f64>,
    paper_proj: ProjectedBank,
    paper_feat: Array2<f64>,
    paper_arg: Vec<ArgMax>,
    paper_gcn: GcnCache,
    paper_norms: Array1<f64>,
    repo_proj: ProjectedBank,
    repo_feat: Array2<f64>,
    repo_arg: Vec<ArgMax>,
    tag_in: Array2<f64>,
    tag_pre: Array2<f64>,
    tag_hidden: Array2<f64>,
    fused: Array2<f64>,
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
    repo_gcn: GcnCache,
    repo_norms: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub mode: Mode,
    /// Unit-normalised paper embeddings in corpus order.
    pub papers: Array2<f64>,
    /// Unit-normalised repository embeddings in corpus order.
    pub repos: Array2<f64>,
    pub paper_zero_rows: usize,
    pub repo_zero_rows: usize,
    cache: Cache,
}

impl ForwardPass {
    /// Text features entering the paper GCN.
    pub fn paper_features(&self) -> &Array2<f64> {
        &self.cache.paper_feat
    }

    /// Fused repository features before batch normalisation.
    pub fn repo_fused(&self) -> &Array2<f64> {
        &self.cache.fused
    }
}

/// Inference-mode embeddings for both platforms.
pub fn embed_all(params: &ModelParams, inputs: &ModelInputs) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let pass = params.forward(inputs, Mode::Infer)?;
    if pass.paper_zero_rows + pass.repo_zero_rows > 0 {
        log::warn!(
            "{} paper and {} repository embeddings are zero vectors",
            pass.paper_zero_rows,
            pass.repo_zero_rows
        );
    }
    Ok((
        EmbeddingMatrix {
            node_ids: inputs.paper_ids.clone(),
            vectors: pass.papers,
            zero_rows: pass.paper_zero_rows,
        },
        EmbeddingMatrix {
            node_ids: inputs.repo_ids.clone(),
            vectors: pass.repos,
            zero_rows: pass.repo_zero_rows,
        },
    ))
}

/// One training slate by corpus index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlateSpec {
    pub paper: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

fn dot_rows(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    a.row(i).dot(&b.row(j))
}

pub fn score_slates(papers: &Array2<f64>, repos: &Array2<f64>, slates: &[SlateSpec], margin: f64) -> Result<Vec<ScoredSlate>> {
    slates
        .iter()
        .map(|s| {
            ScoredSlate::new(
                dot_rows(papers, s.paper, repos, s.positive),
                s.negatives.iter().map(|&n| dot_rows(papers, s.paper, repos, n)).collect(),
                margin,
            )
        })
        .collect()
}

/// Cosines of bridge pairs `(paper index, repo index)`.
pub fn bridge_cosines(papers: &Array2<f64>, repos: &Array2<f64>, bridges: &[(usize, usize)]) -> Vec<f64> {
    bridges.iter().map(|&(p, r)| dot_rows(papers, p, repos, r)).collect()
}

/// `(1 + C_e) * mean WARP` on given embeddings, with gradients with respect to them.
pub fn embedding_objective(
    papers: &Array2<f64>,
    repos: &Array2<f64>,
    slates: &[SlateSpec],
    bridges: &[(usize, usize)],
    margin: f64,
) -> Result<(LossBreakdown, Array2<f64>, Array2<f64>)> {
    if slates.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let scored = score_slates(papers, repos, slates, margin)?;
    let b = slates.len() as f64;
    let mut d_papers = Array2::zeros(papers.raw_dim());
    let mut d_repos = Array2::zeros(repos.raw_dim());
    // dL/d(embeddings) for the WARP term
    let mut warp = 0.0;
    let mut d_warp_p = Array2::<f64>::zeros(papers.raw_dim());
    let mut d_warp_r = Array2::<f64>::zeros(repos.raw_dim());
    for (spec, slate) in slates.iter().zip(&scored) {
        let (loss, d_pos, d_neg) = warp_term_grad(slate);
        warp += loss;
        if d_pos != 0.0 {
            d_warp_p.row_mut(spec.paper).scaled_add(d_pos / b, &repos.row(spec.positive));
            d_warp_r.row_mut(spec.positive).scaled_add(d_pos / b, &papers.row(spec.paper));
        }
        for (&n, &dn) in spec.negatives.iter().zip(&d_neg) {
            if dn != 0.0 {
                d_warp_p.row_mut(spec.paper).scaled_add(dn / b, &repos.row(n));
                d_warp_r.row_mut(n).scaled_add(dn / b, &papers.row(spec.paper));
            }
        }
    }
    warp /= b;
    let c_e = bridge_constraint(papers, repos, bridges);
    let breakdown = total_loss(warp, c_e);
    // total = (1 + C_e) * warp
    d_papers.scaled_add(1.0 + c_e, &d_warp_p);
    d_repos.scaled_add(1.0 + c_e, &d_warp_r);
    if warp != 0.0 && !bridges.is_empty() {
        let scale = -warp / (2.0 * bridges.len() as f64);
        for &(p, r) in bridges {
            d_papers.row_mut(p).scaled_add(scale, &repos.row(r));
            d_repos.row_mut(r).scaled_add(scale, &papers.row(p));
        }
    }
    Ok((breakdown, d_papers, d_repos))
}

/// Loss on a batch and gradients with respect to every parameter (train-mode batch norm).
pub fn gradients(
    params: &ModelParams,
    inputs: &ModelInputs,
    slates: &[SlateSpec],
    bridges: &[(usize, usize)],
    margin: f64,
) -> Result<(LossBreakdown, ModelParams)> {
    let pass = params.forward(inputs, Mode::Train)?;
    let (loss, d_p, d_r) = embedding_objective(&pass.papers, &pass.repos, slates, bridges, margin)?;
    let grads = params.backward(inputs, &pass, &d_p, &d_r)?;
    Ok((loss, grads))
}

/// Loss only, train-mode batch norm; used by finite-difference checks.
pub fn loss_only(params: &ModelParams, inputs: &ModelInputs, slates: &[SlateSpec], bridges: &[(usize, usize)], margin: f64) -> Result<LossBreakdown> {
    let pass = params.forward(inputs, Mode::Train)?;
    let scored = score_slates(&pass.papers, &pass.repos, slates, margin)?;
    let warp = crate::objective::batch_warp(&scored)?;
    Ok(total_loss(warp, bridge_constraint(&pass.papers, &pass.repos, bridges)))
}

/// `C_e` over bridge pairs given by index.
pub fn bridge_constraint(papers: &Array2<f64>, repos: &Array2<f64>, bridges: &[(usize, usize)]) -> f64 {
    let pairs: Vec<(&[f64], &[f64])> = bridges
        .iter()
        .map(|&(p, r)| {
            (
                papers.row(p).to_slice().expect("contiguous rows"),
                repos.row(r).to_slice().expect("contiguous rows"),
            )
        })
        .collect();
    constraint_error(&pairs)
}
