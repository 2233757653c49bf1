//! Domain data model and offline file ingestion.
//!
//! Papers, repositories and bridge links are stored as line-delimited JSON
//! records, one object per line. Word vectors use the plain-text GloVe
//! layout (`token v1 v2 ... vk`). Blank lines are ignored everywhere.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases `text` and splits it on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|frag| !frag.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Paper {
    pub id: String,
    pub title: String,
    pub abstract_tokens: Vec<String>,
    pub cited_ids: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Repository {
    pub id: String,
    pub description_tokens: Vec<String>,
    /// Deduplicated, first-occurrence order.
    pub tags: Vec<String>,
    pub starrers: BTreeSet<String>,
}

/// A paper that names its own source repository.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BridgeLink {
    pub paper_id: String,
    pub repo_id: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub warnings: Vec<String>,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct PaperRecord {
    id: String,
    #[serde(default)]
    title: String,
    #[serde(default, rename = "abstract")]
    abstract_text: String,
    #[serde(default)]
    cited_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RepoRecord {
    id: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default)]
    starrers: Vec<String>,
}

fn file_label(path: &Path) -> String {
    path.display().to_string()
}

/// Yields `(1-based line number, line)` for every non-blank line.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((idx + 1, line));
        }
    }
    Ok(out)
}

fn parse_record<T: for<'de> Deserialize<'de>>(path: &Path, line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        file: file_label(path),
        line: line_no,
        message: e.to_string(),
    })
}

fn check_id(path: &Path, line_no: usize, id: &str, seen: &mut HashMap<String, usize>) -> Result<()> {
    if id.trim().is_empty() {
        return Err(Error::Parse {
            file: file_label(path),
            line: line_no,
            message: "empty id".into(),
        });
    }
    if let Some(&first_line) = seen.get(id) {
        return Err(Error::DuplicateId {
            id: id.to_string(),
            first_line,
            second_line: line_no,
        });
    }
    seen.insert(id.to_string(), line_no);
    Ok(())
}

pub fn load_papers(path: impl AsRef<Path>) -> Result<(Vec<Paper>, LoadReport)> {
    let path = path.as_ref();
    let mut seen = HashMap::new();
    let mut papers = Vec::new();
    let mut report = LoadReport::default();
    for (line_no, line) in read_lines(path)? {
        let rec: PaperRecord = parse_record(path, line_no, &line)?;
        check_id(path, line_no, &rec.id, &mut seen)?;
        let mut cited_ids: BTreeSet<String> = rec.cited_ids.into_iter().collect();
        if cited_ids.remove(&rec.id) {
            report
                .warnings
                .push(format!("line {line_no}: paper `{}` cites itself; dropped", rec.id));
        }
        papers.push(Paper {
            id: rec.id,
            title: rec.title,
            abstract_tokens: tokenize(&rec.abstract_text),
            cited_ids,
        });
    }
    for paper in &papers {
        for cited in &paper.cited_ids {
            if !seen.contains_key(cited) {
                report
                    .warnings
                    .push(format!("paper `{}` cites unknown paper `{cited}`", paper.id));
            }
        }
    }
    Ok((papers, report))
}

pub fn load_repos(path: impl AsRef<Path>) -> Result<Vec<Repository>> {
    let path = path.as_ref();
    let mut seen = HashMap::new();
    let mut repos = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let rec: RepoRecord = parse_record(path, line_no, &line)?;
        check_id(path, line_no, &rec.id, &mut seen)?;
        let mut tags: Vec<String> = Vec::with_capacity(rec.tags.len());
        for tag in rec.tags {
            if !tags.contains(&tag) {
                tags.push(tag);
            }
        }
        repos.push(Repository {
            id: rec.id,
            description_tokens: tokenize(&rec.description),
            tags,
            starrers: rec.starrers.into_iter().collect(),
        });
    }
    Ok(repos)
}

/// Loads and validates bridge links against an already loaded corpus.
pub fn load_bridges(
    path: impl AsRef<Path>,
    papers: &[Paper],
    repos: &[Repository],
) -> Result<Vec<BridgeLink>> {
    let path = path.as_ref();
    let mut links = Vec::new();
    for (line_no, line) in read_lines(path)? {
        links.push(parse_record::<BridgeLink>(path, line_no, &line)?);
    }
    validate_bridges(&links, papers, repos)?;
    Ok(links)
}

pub fn validate_bridges(links: &[BridgeLink], papers: &[Paper], repos: &[Repository]) -> Result<()> {
    let paper_ids: BTreeSet<&str> = papers.iter().map(|p| p.id.as_str()).collect();
    let repo_ids: BTreeSet<&str> = repos.iter().map(|r| r.id.as_str()).collect();
    let mut used_papers = BTreeSet::new();
    let mut used_repos = BTreeSet::new();
    for link in links {
        if !paper_ids.contains(link.paper_id.as_str()) {
            return Err(Error::Bridge(format!("unknown paper `{}`", link.paper_id)));
        }
        if !repo_ids.contains(link.repo_id.as_str()) {
            return Err(Error::Bridge(format!("unknown repository `{}`", link.repo_id)));
        }
        if !used_papers.insert(link.paper_id.as_str()) {
            return Err(Error::Bridge(format!(
                "paper `{}` appears in more than one link",
                link.paper_id
            )));
        }
        if !used_repos.insert(link.repo_id.as_str()) {
            return Err(Error::Bridge(format!(
                "repository `{}` appears in more than one link",
                link.repo_id
            )));
        }
    }
    Ok(())
}

fn write_json_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_papers(path: impl AsRef<Path>, papers: &[Paper]) -> Result<()> {
    write_json_lines(
        path.as_ref(),
        papers.iter().map(|p| PaperRecord {
            id: p.id.clone(),
            title: p.title.clone(),
            abstract_text: p.abstract_tokens.join(" "),
            cited_ids: p.cited_ids.iter().cloned().collect(),
        }),
    )
}

pub fn write_repos(path: impl AsRef<Path>, repos: &[Repository]) -> Result<()> {
    write_json_lines(
        path.as_ref(),
        repos.iter().map(|r| RepoRecord {
            id: r.id.clone(),
            description: r.description_tokens.join(" "),
            tags: r.tags.clone(),
            starrers: r.starrers.iter().cloned().collect(),
        }),
    )
}

pub fn write_bridges(path: impl AsRef<Path>, links: &[BridgeLink]) -> Result<()> {
    write_json_lines(path.as_ref(), links.iter())
}

/// Pre-trained word vectors. Absent tokens resolve to the all-zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
    zero: Vec<f64>,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            tokens: Vec::new(),
            index: HashMap::new(),
            vectors: Array2::zeros((0, dim)),
            zero: vec![0.0; dim],
            trainable: false,
        }
    }

    /// Builds a table from `(token, vector)` pairs; later duplicates are ignored.
    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        let mut flat = Vec::new();
        for (token, vec) in entries {
            if vec.len() != dim {
                return Err(Error::Shape(format!(
                    "vector for `{token}` has length {}, expected {dim}",
                    vec.len()
                )));
            }
            if index.contains_key(&token) {
                continue;
            }
            index.insert(token.clone(), tokens.len());
            tokens.push(token);
            flat.extend(vec);
        }
        let vectors = Array2::from_shape_vec((tokens.len(), dim), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(EmbeddingTable {
            dim,
            tokens,
            index,
            vectors,
            zero: vec![0.0; dim],
            trainable: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Embedding of `token`, or the zero vector when out of vocabulary.
    pub fn lookup(&self, token: &str) -> &[f64] {
        match self.index.get(token) {
            Some(&i) => self
                .vectors
                .row(i)
                .to_slice()
                .expect("embedding rows are contiguous"),
            None => &self.zero,
        }
    }

    pub fn row(&self, index: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(index)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.vectors
    }
}

pub fn load_embeddings(path: impl AsRef<Path>, expected_dim: usize) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    if expected_dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let mut entries = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-blank line has a token").to_string();
        let values: Vec<&str> = parts.collect();
        if values.len() != expected_dim {
            return Err(Error::Dimension {
                file: file_label(path),
                line: line_no,
                expected: expected_dim,
                found: values.len(),
            });
        }
        let vec = values
            .iter()
            .map(|v| {
                v.parse::<f64>().map_err(|e| Error::Parse {
                    file: file_label(path),
                    line: line_no,
                    message: format!("bad float `{v}`: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        entries.push((token, vec));
    }
    EmbeddingTable::from_entries(expected_dim, entries)
}

pub fn write_embeddings(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (i, token) in table.tokens.iter().enumerate() {
        write!(out, "{token}").map_err(|e| Error::io(path, e))?;
        for v in table.vectors.row(i) {
            write!(out, " {v}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(out).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Fixed-length stack of token embeddings; rows past the text are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    pub values: Array2<f64>,
}

impl TokenMatrix {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }
}

pub fn to_token_matrix(tokens: &[String], table: &EmbeddingTable, fixed_len: usize) -> TokenMatrix {
    let mut values = Array2::zeros((fixed_len, table.dim()));
    for (i, token) in tokens.iter().take(fixed_len).enumerate() {
        values
            .row_mut(i)
            .assign(&ArrayView1::from(table.lookup(token)));
    }
    TokenMatrix { values }
}

/// Papers, repositories and bridges loaded together, ordered by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub papers: Vec<Paper>,
    pub repos: Vec<Repository>,
    pub bridges: Vec<BridgeLink>,
}

impl Corpus {
    /// Sorts every collection by id so downstream results do not depend on file order.
    pub fn new(mut papers: Vec<Paper>, mut repos: Vec<Repository>, mut bridges: Vec<BridgeLink>) -> Result<Self> {
        papers.sort_by(|a, b| a.id.cmp(&b.id));
        repos.sort_by(|a, b| a.id.cmp(&b.id));
        bridges.sort();
        validate_bridges(&bridges, &papers, &repos)?;
        Ok(Corpus {
            papers,
            repos,
            bridges,
        })
    }

    pub fn load(
        papers: impl AsRef<Path>,
        repos: impl AsRef<Path>,
        bridges: impl AsRef<Path>,
    ) -> Result<(Self, LoadReport)> {
        let (papers, report) = load_papers(papers)?;
        let repos = load_repos(repos)?;
        let bridges = load_bridges(bridges, &papers, &repos)?;
        Ok((Corpus::new(papers, repos, bridges)?, report))
    }

    pub fn save(&self, papers: impl AsRef<Path>, repos: impl AsRef<Path>, bridges: impl AsRef<Path>) -> Result<()> {
        write_papers(papers, &self.papers)?;
        write_repos(repos, &self.repos)?;
        write_bridges(bridges, &self.bridges)
    }

    pub fn paper_index(&self) -> HashMap<&str, usize> {
        self.papers.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect()
    }

    pub fn repo_index(&self) -> HashMap<&str, usize> {
        self.repos.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect()
    }
}
