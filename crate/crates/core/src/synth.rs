//! Planted-topic synthetic corpora.
//!
//! Every paper, repository and user belongs to one of `topics` topics and to
//! one of `subtopics` facets inside it. Topic `z` owns the words `t{z}w{i}`;
//! facet `s` is the slice of those words with `i % subtopics == s`. Documents
//! draw a word from their facet slice with probability `subtopic_focus` and
//! from the whole topic vocabulary otherwise. Word vectors are a topic centroid
//! plus a facet offset plus noise.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_embeddings, BridgeLink, Corpus, EmbeddingTable, Paper, Repository};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub topics: usize,
    pub papers: usize,
    pub repos: usize,
    pub users: usize,
    /// Fraction of papers that get a bridge link.
    pub bridge_fraction: f64,
    pub intra_citation_prob: f64,
    pub intra_star_prob: f64,
    pub vocab_per_topic: usize,
    pub seed: u64,
    pub subtopics: usize,
    pub subtopic_focus: f64,
    pub citations_per_paper: usize,
    pub stars_per_user: usize,
    pub abstract_words: usize,
    pub description_words: usize,
    pub embedding_dim: usize,
    pub embedding_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            topics: 5,
            papers: 500,
            repos: 300,
            users: 200,
            bridge_fraction: 0.12,
            intra_citation_prob: 0.9,
            intra_star_prob: 0.9,
            vocab_per_topic: 60,
            seed: 7,
            subtopics: 3,
            subtopic_focus: 0.7,
            citations_per_paper: 4,
            stars_per_user: 8,
            abstract_words: 60,
            description_words: 20,
            embedding_dim: 200,
            embedding_noise: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn n_bridges(&self) -> usize {
        (self.bridge_fraction * self.papers as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("topics", self.topics),
            ("papers", self.papers),
            ("repos", self.repos),
            ("users", self.users),
            ("vocab_per_topic", self.vocab_per_topic),
            ("subtopics", self.subtopics),
            ("abstract_words", self.abstract_words),
            ("description_words", self.description_words),
            ("embedding_dim", self.embedding_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, p) in [
            ("bridge_fraction", self.bridge_fraction),
            ("intra_citation_prob", self.intra_citation_prob),
            ("intra_star_prob", self.intra_star_prob),
            ("subtopic_focus", self.subtopic_focus),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.vocab_per_topic < self.subtopics {
            return Err(Error::Config("vocab_per_topic must be at least subtopics".into()));
        }
        if !(self.embedding_noise >= 0.0) {
            return Err(Error::Config("embedding_noise must be non-negative".into()));
        }
        if self.n_bridges() > self.repos {
            return Err(Error::Config(format!(
                "bridge_fraction {} asks for {} bridges but there are only {} repositories",
                self.bridge_fraction,
                self.n_bridges(),
                self.repos
            )));
        }
        Ok(())
    }

    fn cell(&self, i: usize) -> (usize, usize) {
        (i % self.topics, (i / self.topics) % self.subtopics)
    }
}

pub fn word(topic: usize, i: usize) -> String {
    format!("t{topic}w{i}")
}

/// Topic encoded in a synthetic word, if it has the `t{z}w{i}` shape.
pub fn word_topic(word: &str) -> Option<usize> {
    let rest = word.strip_prefix('t')?;
    let (z, i) = rest.split_once('w')?;
    i.parse::<usize>().ok()?;
    z.parse().ok()
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub config: SynthConfig,
    pub corpus: Corpus,
    pub embeddings: EmbeddingTable,
    /// `(topic, subtopic)` of each paper in corpus order.
    pub paper_cells: Vec<(usize, usize)>,
    pub repo_cells: Vec<(usize, usize)>,
}

struct Sampler<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn word(&mut self, (z, s): (usize, usize)) -> String {
        let cfg = self.cfg;
        let i = if self.rng.gen_bool(cfg.subtopic_focus) {
            let slice = (cfg.vocab_per_topic - s).div_ceil(cfg.subtopics);
            s + cfg.subtopics * self.rng.gen_range(0..slice)
        } else {
            self.rng.gen_range(0..cfg.vocab_per_topic)
        };
        word(z, i)
    }

    fn words(&mut self, cell: (usize, usize), n: usize) -> Vec<String> {
        (0..n).map(|_| self.word(cell)).collect()
    }

    /// An index from `cells` in the same topic (facet-preferring) with
    /// probability `intra`, otherwise uniform over everything.
    fn pick(&mut self, cells: &[(usize, usize)], own: (usize, usize), intra: f64) -> usize {
        if self.rng.gen_bool(intra) {
            let same_facet = self.rng.gen_bool(self.cfg.subtopic_focus);
            let pool: Vec<usize> = (0..cells.len())
                .filter(|&j| cells[j].0 == own.0 && (!same_facet || cells[j] == own))
                .collect();
            if let Some(&j) = pool.choose(&mut self.rng) {
                return j;
            }
        }
        self.rng.gen_range(0..cells.len())
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut s = Sampler {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let paper_cells: Vec<(usize, usize)> = (0..cfg.papers).map(|i| cfg.cell(i)).collect();
    let repo_cells: Vec<(usize, usize)> = (0..cfg.repos).map(|i| cfg.cell(i)).collect();
    let user_cells: Vec<(usize, usize)> = (0..cfg.users).map(|i| cfg.cell(i)).collect();
    let pid = |i: usize| format!("p{i:04}");
    let rid = |i: usize| format!("r{i:04}");

    let mut papers = Vec::with_capacity(cfg.papers);
    for (i, &cell) in paper_cells.iter().enumerate() {
        let abstract_tokens = s.words(cell, cfg.abstract_words);
        let title = s.words(cell, 4).join(" ");
        let mut cited_ids = BTreeSet::new();
        if cfg.papers > 1 {
            for _ in 0..cfg.citations_per_paper {
                let j = s.pick(&paper_cells, cell, cfg.intra_citation_prob);
                if j != i {
                    cited_ids.insert(pid(j));
                }
            }
        }
        papers.push(Paper {
            id: pid(i),
            title,
            abstract_tokens,
            cited_ids,
        });
    }

    let mut repos: Vec<Repository> = repo_cells
        .iter()
        .enumerate()
        .map(|(i, &cell)| {
            let description_tokens = s.words(cell, cfg.description_words);
            let n_tags = s.rng.gen_range(1..=3);
            let mut tags = Vec::new();
            for _ in 0..n_tags {
                let t = s.word(cell);
                if !tags.contains(&t) {
                    tags.push(t);
                }
            }
            Repository {
                id: rid(i),
                description_tokens,
                tags,
                starrers: BTreeSet::new(),
            }
        })
        .collect();
    for (u, &cell) in user_cells.iter().enumerate() {
        for _ in 0..cfg.stars_per_user {
            let j = s.pick(&repo_cells, cell, cfg.intra_star_prob);
            repos[j].starrers.insert(format!("u{u:04}"));
        }
    }

    let mut order: Vec<usize> = (0..cfg.papers).collect();
    order.shuffle(&mut s.rng);
    let mut used = vec![false; cfg.repos];
    let mut bridges = Vec::with_capacity(cfg.n_bridges());
    for &p in order.iter().take(cfg.n_bridges()) {
        let mut candidates: Vec<usize> = (0..cfg.repos).filter(|&r| !used[r] && repo_cells[r] == paper_cells[p]).collect();
        if candidates.is_empty() {
            return Err(Error::Config(format!(
                "cannot place {} bridges: topic {} subtopic {} has no unused repository left",
                cfg.n_bridges(),
                paper_cells[p].0,
                paper_cells[p].1
            )));
        }
        candidates.shuffle(&mut s.rng);
        used[candidates[0]] = true;
        bridges.push(BridgeLink {
            paper_id: pid(p),
            repo_id: rid(candidates[0]),
        });
    }

    let mut entries = Vec::with_capacity(cfg.topics * cfg.vocab_per_topic);
    let k = cfg.embedding_dim;
    let uniform = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    for z in 0..cfg.topics {
        let centroid = uniform(&mut s.rng);
        let facets: Vec<Vec<f64>> = (0..cfg.subtopics).map(|_| uniform(&mut s.rng)).collect();
        for i in 0..cfg.vocab_per_topic {
            let noise = uniform(&mut s.rng);
            let f = &facets[i % cfg.subtopics];
            let v = (0..k)
                .map(|d| 0.5 * (centroid[d] + 0.6 * f[d] + cfg.embedding_noise * noise[d]))
                .collect();
            entries.push((word(z, i), v));
        }
    }
    let embeddings = EmbeddingTable::from_entries(k, entries)?;
    // ids are zero-padded, so corpus order equals generation order
    let corpus = Corpus::new(papers, repos, bridges)?;
    Ok(SyntheticCorpus {
        config: cfg.clone(),
        corpus,
        embeddings,
        paper_cells,
        repo_cells,
    })
}

pub const PAPERS_FILE: &str = "papers.jsonl";
pub const REPOS_FILE: &str = "repos.jsonl";
pub const BRIDGES_FILE: &str = "bridges.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

/// Writes the four corpus files into `out_dir`, creating it if needed.
pub fn write_synthetic(synth: &SyntheticCorpus, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    synth
        .corpus
        .save(dir.join(PAPERS_FILE), dir.join(REPOS_FILE), dir.join(BRIDGES_FILE))?;
    write_embeddings(dir.join(EMBEDDINGS_FILE), &synth.embeddings)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub topics: usize,
    pub cross_topic_citations: usize,
    pub citations: usize,
}

/// Checks that every document uses a single topic's vocabulary, that bridges
/// pair same-topic documents, and counts cross-topic citations.
pub fn validate_synthetic(corpus: &Corpus) -> Result<SynthSummary> {
    let topic_of = |id: &str, words: &mut dyn Iterator<Item = &String>| -> Result<Option<usize>> {
        let mut topic = None;
        for w in words {
            let z = word_topic(w).ok_or_else(|| Error::Format(format!("`{id}`: `{w}` is not a synthetic word")))?;
            match topic {
                None => topic = Some(z),
                Some(t) if t != z => return Err(Error::Format(format!("`{id}` mixes topics {t} and {z}"))),
                _ => {}
            }
        }
        Ok(topic)
    };
    let mut paper_topic = std::collections::HashMap::new();
    let mut topics = BTreeSet::new();
    for p in &corpus.papers {
        if let Some(z) = topic_of(&p.id, &mut p.abstract_tokens.iter())? {
            paper_topic.insert(p.id.as_str(), z);
            topics.insert(z);
        }
    }
    let mut repo_topic = std::collections::HashMap::new();
    for r in &corpus.repos {
        let mut all = r.description_tokens.iter().chain(r.tags.iter());
        if let Some(z) = topic_of(&r.id, &mut all)? {
            repo_topic.insert(r.id.as_str(), z);
        }
    }
    for b in &corpus.bridges {
        if paper_topic.get(b.paper_id.as_str()) != repo_topic.get(b.repo_id.as_str()) {
            return Err(Error::Format(format!("bridge {} -> {} crosses topics", b.paper_id, b.repo_id)));
        }
    }
    let mut citations = 0;
    let mut cross = 0;
    for p in &corpus.papers {
        for c in &p.cited_ids {
            citations += 1;
            if paper_topic.get(p.id.as_str()) != paper_topic.get(c.as_str()) {
                cross += 1;
            }
        }
    }
    Ok(SynthSummary {
        topics: topics.len(),
        cross_topic_citations: cross,
        citations,
    })
}
