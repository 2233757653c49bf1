//! Context graphs for both platforms and their GCN propagation matrices.
//!
//! Papers are linked when either cites the other. Repositories are linked
//! when they share a starring user or both weight some term at or above the
//! TF-IDF threshold. Both graphs are binary and undirected; the propagation
//! matrix is `D^-1/2 (A + I) D^-1/2` with `D` the degree of `A + I`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::corpus::{tokenize, Paper, Repository};
use crate::error::{Error, Result};

/// Compressed sparse row matrix with sorted column indices per row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[span.clone()].binary_search(&j) {
            Ok(pos) => self.vals[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// `self * rhs`, accumulated in column-index order for reproducibility.
    pub fn matmul(&self, rhs: &ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(rhs.nrows(), self.n, "sparse-dense row mismatch");
        let mut out = Array2::zeros((self.n, rhs.ncols()));
        for i in 0..self.n {
            let mut acc = out.row_mut(i);
            for (j, v) in self.row(i) {
                acc.scaled_add(v, &rhs.row(j));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextGraph {
    pub node_ids: Vec<String>,
    /// Sorted neighbour lists of the binary adjacency (no self loops).
    neighbors: Vec<Vec<usize>>,
    normalized: Option<CsrMatrix>,
}

impl ContextGraph {
    pub fn from_edges(node_ids: Vec<String>, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut sets = vec![BTreeSet::new(); node_ids.len()];
        for (a, b) in edges {
            if a != b {
                sets[a].insert(b);
                sets[b].insert(a);
            }
        }
        ContextGraph {
            node_ids,
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            normalized: None,
        }
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edges as `(i, j)` with `i < j`, in index order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            out.extend(nbrs.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn adjacency_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), self.len()));
        for (i, j) in self.edges() {
            out[[i, j]] = 1.0;
            out[[j, i]] = 1.0;
        }
        out
    }

    pub fn normalized(&self) -> Option<&CsrMatrix> {
        self.normalized.as_ref()
    }

    /// Id pairs sorted lexicographically, smaller id first in each pair.
    pub fn edge_list(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .edges()
            .into_iter()
            .map(|(i, j)| {
                let (a, b) = (&self.node_ids[i], &self.node_ids[j]);
                if a <= b {
                    (a.clone(), b.clone())
                } else {
                    (b.clone(), a.clone())
                }
            })
            .collect();
        out.sort();
        out
    }

    pub fn write_edge_list(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for (a, b) in self.edge_list() {
            writeln!(out, "{a} {b}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn build_citation_graph(papers: &[Paper]) -> ContextGraph {
    let index: HashMap<&str, usize> = papers.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let edges: Vec<(usize, usize)> = papers
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            let index = &index;
            p.cited_ids.iter().filter_map(move |c| index.get(c.as_str()).map(|&j| (i, j)))
        })
        .collect();
    ContextGraph::from_edges(papers.iter().map(|p| p.id.clone()).collect(), edges)
}

/// Per-repository TF-IDF weights over description tokens plus tag tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TfidfIndex {
    pub docs: Vec<BTreeMap<String, f64>>,
    pub n_docs: usize,
    pub df: BTreeMap<String, usize>,
}

impl TfidfIndex {
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(0);
        ((1.0 + self.n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
    }
}

pub fn repo_document(repo: &Repository) -> Vec<String> {
    let mut doc = repo.description_tokens.clone();
    for tag in &repo.tags {
        doc.extend(tokenize(tag));
    }
    doc
}

pub fn compute_tfidf(repos: &[Repository]) -> Result<TfidfIndex> {
    if repos.is_empty() {
        return Err(Error::Precondition("TF-IDF needs at least one repository".into()));
    }
    let docs: Vec<Vec<String>> = repos.iter().map(repo_document).collect();
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for doc in &docs {
        let uniq: BTreeSet<&String> = doc.iter().collect();
        for term in uniq {
            *df.entry(term.clone()).or_default() += 1;
        }
    }
    let n = docs.len() as f64;
    let weights = docs
        .iter()
        .map(|doc| {
            let mut counts: BTreeMap<&String, usize> = BTreeMap::new();
            for t in doc {
                *counts.entry(t).or_default() += 1;
            }
            let len = doc.len() as f64;
            let mut w: BTreeMap<String, f64> = counts
                .into_iter()
                .map(|(t, c)| {
                    let idf = ((1.0 + n) / (1.0 + df[t] as f64)).ln() + 1.0;
                    (t.clone(), c as f64 / len * idf)
                })
                .collect();
            let norm = w.values().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                w.values_mut().for_each(|v| *v /= norm);
            }
            w
        })
        .collect();
    Ok(TfidfIndex {
        docs: weights,
        n_docs: docs.len(),
        df,
    })
}

/// Co-star or shared-salient-term graph over `repos` (same order as `tfidf`).
pub fn build_repo_graph(repos: &[Repository], tfidf: &TfidfIndex, threshold: f64) -> Result<ContextGraph> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("TF-IDF threshold {threshold} outside [0, 1]")));
    }
    if tfidf.docs.len() != repos.len() {
        return Err(Error::Shape(format!(
            "TF-IDF index covers {} documents, corpus has {} repositories",
            tfidf.docs.len(),
            repos.len()
        )));
    }
    let mut buckets: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, repo) in repos.iter().enumerate() {
        for user in &repo.starrers {
            buckets.entry(user.as_str()).or_default().push(i);
        }
    }
    let mut term_buckets: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, doc) in tfidf.docs.iter().enumerate() {
        for (term, &w) in doc {
            if w >= threshold {
                term_buckets.entry(term.as_str()).or_default().push(i);
            }
        }
    }
    let mut edges = BTreeSet::new();
    for members in buckets.values().chain(term_buckets.values()) {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                edges.insert((i.min(j), i.max(j)));
            }
        }
    }
    Ok(ContextGraph::from_edges(
        repos.iter().map(|r| r.id.clone()).collect(),
        edges,
    ))
}

/// Fills in `D^-1/2 (A + I) D^-1/2`.
pub fn normalize_adjacency(mut graph: ContextGraph) -> ContextGraph {
    let n = graph.len();
    let deg: Vec<f64> = (0..n).map(|i| graph.degree(i) as f64 + 1.0).collect();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    for i in 0..n {
        let mut row: Vec<usize> = graph.neighbors[i].clone();
        let pos = row.binary_search(&i).unwrap_err();
        row.insert(pos, i);
        for j in row {
            cols.push(j);
            vals.push(1.0 / (deg[i] * deg[j]).sqrt());
        }
        row_ptr.push(cols.len());
    }
    graph.normalized = Some(CsrMatrix { n, row_ptr, cols, vals });
    graph
}
