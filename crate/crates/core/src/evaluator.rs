//! HR@K, MRR@K and MAP@K on fixed-size candidate slates.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::EmbeddingMatrix;

pub const SLATE_SIZE: usize = 50;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestSlate {
    pub query: String,
    pub candidates: Vec<String>,
    pub labels: Vec<bool>,
}

/// A held-out query paper and the repositories that count as hits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestQuery {
    pub paper_id: String,
    pub positives: Vec<String>,
}

/// Positives plus `size - |positives|` negatives drawn uniformly from `pool`.
pub fn build_test_slate<R: rand::Rng>(query: &str, positives: &[String], pool: &[String], rng: &mut R, size: usize) -> Result<TestSlate> {
    let pos: BTreeSet<&String> = positives.iter().collect();
    if pos.len() != positives.len() {
        return Err(Error::Precondition(format!("duplicate positives for `{query}`")));
    }
    if positives.len() > size {
        return Err(Error::Precondition(format!("{} positives exceed slate size {size}", positives.len())));
    }
    let negatives: Vec<&String> = pool.iter().filter(|r| !pos.contains(r)).collect();
    let need = size - positives.len();
    if negatives.len() < need {
        return Err(Error::Sampling(format!(
            "query `{query}`: {} negative candidates for {need} slots",
            negatives.len()
        )));
    }
    let mut candidates = positives.to_vec();
    let mut labels = vec![true; positives.len()];
    for i in index::sample(rng, negatives.len(), need) {
        candidates.push(negatives[i].clone());
        labels.push(false);
    }
    Ok(TestSlate {
        query: query.to_string(),
        candidates,
        labels,
    })
}

/// Sorts by descending score, ties by ascending id.
pub fn rank_by_score<T>(mut items: Vec<(String, f64, T)>) -> Vec<(String, f64, T)> {
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items
}

/// Candidates with their inner-product score and label, best first.
pub fn rank_candidates(slate: &TestSlate, papers: &EmbeddingMatrix, repos: &EmbeddingMatrix) -> Result<Vec<(String, f64, bool)>> {
    let q = papers.index_of(&slate.query).ok_or_else(|| Error::UnknownId {
        id: slate.query.clone(),
        hint: " (paper)".into(),
    })?;
    let pv = papers.vectors.row(q);
    let items = slate
        .candidates
        .iter()
        .zip(&slate.labels)
        .map(|(c, &l)| {
            let r = repos.index_of(c).ok_or_else(|| Error::UnknownId {
                id: c.clone(),
                hint: " (repository)".into(),
            })?;
            Ok((c.clone(), pv.dot(&repos.vectors.row(r)), l))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_by_score(items))
}

/// Share of all positives that appear in the top `k`.
pub fn hr_at_k(ranked: &[bool], k: usize) -> f64 {
    let total = ranked.iter().filter(|&&l| l).count();
    if total == 0 {
        return 0.0;
    }
    ranked.iter().take(k).filter(|&&l| l).count() as f64 / total as f64
}

pub fn mrr_at_k(ranked: &[bool], k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|&l| l)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Truncated average precision, normalised by `min(|positives|, k)`.
pub fn map_at_k(ranked: &[bool], k: usize) -> f64 {
    let total = ranked.iter().filter(|&&l| l).count();
    if total == 0 || k == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, &l) in ranked.iter().take(k).enumerate() {
        if l {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total.min(k) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: usize,
    pub hr: f64,
    pub mrr: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    pub runs: Vec<RunMetrics>,
    /// Mean over runs, one row per K.
    pub mean: Vec<MetricRow>,
}

impl MetricReport {
    pub fn mean_at(&self, k: usize) -> Option<&MetricRow> {
        self.mean.iter().find(|r| r.k == k)
    }

    /// Columns `K,HR,MRR,MAP,run,seed`; mean rows carry `run = mean` and an empty seed.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "K,HR,MRR,MAP,run,seed")?;
            for run in &self.runs {
                for r in &run.rows {
                    writeln!(out, "{},{},{},{},{},{}", r.k, r.hr, r.mrr, r.map, run.run, run.seed)?;
                }
            }
            for r in &self.mean {
                writeln!(out, "{},{},{},{},mean,", r.k, r.hr, r.mrr, r.map)?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// One query's ranked labels in one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryDetail {
    pub run: usize,
    pub paper_id: String,
    pub ranked: Vec<(String, f64, bool)>,
}

/// Metrics averaged over queries, then over `runs` slate resamplings with
/// seeds `base_seed, base_seed + 1, ...`.
pub fn evaluate(
    papers: &EmbeddingMatrix,
    repos: &EmbeddingMatrix,
    queries: &[TestQuery],
    ks: &[usize],
    runs: usize,
    base_seed: u64,
) -> Result<(MetricReport, Vec<QueryDetail>)> {
    if queries.is_empty() {
        return Err(Error::Precondition("empty test set".into()));
    }
    if runs == 0 {
        return Err(Error::Config("runs must be at least 1".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > SLATE_SIZE) {
        return Err(Error::Config(format!("K = {k} outside 1..={SLATE_SIZE}")));
    }
    let pool = repos.node_ids.clone();
    let mut report = MetricReport {
        ks: ks.to_vec(),
        runs: Vec::with_capacity(runs),
        mean: Vec::new(),
    };
    let mut details = Vec::new();
    for run in 0..runs {
        let seed = base_seed + run as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sums: HashMap<usize, (f64, f64, f64)> = HashMap::new();
        for q in queries {
            let slate = build_test_slate(&q.paper_id, &q.positives, &pool, &mut rng, SLATE_SIZE)?;
            let ranked = rank_candidates(&slate, papers, repos)?;
            let labels: Vec<bool> = ranked.iter().map(|r| r.2).collect();
            for &k in ks {
                let e = sums.entry(k).or_default();
                e.0 += hr_at_k(&labels, k);
                e.1 += mrr_at_k(&labels, k);
                e.2 += map_at_k(&labels, k);
            }
            details.push(QueryDetail {
                run,
                paper_id: q.paper_id.clone(),
                ranked,
            });
        }
        let n = queries.len() as f64;
        report.runs.push(RunMetrics {
            run,
            seed,
            rows: ks
                .iter()
                .map(|&k| {
                    let (h, m, a) = sums[&k];
                    MetricRow {
                        k,
                        hr: h / n,
                        mrr: m / n,
                        map: a / n,
                    }
                })
                .collect(),
        });
    }
    let r = runs as f64;
    report.mean = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let sum = |f: fn(&MetricRow) -> f64| report.runs.iter().map(|run| f(&run.rows[i])).sum::<f64>() / r;
            MetricRow {
                k,
                hr: sum(|m| m.hr),
                mrr: sum(|m| m.mrr),
                map: sum(|m| m.map),
            }
        })
        .collect();
    Ok((report, details))
}

/// Line-delimited JSON, one object per query and run.
pub fn write_details(path: impl AsRef<Path>, details: &[QueryDetail]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for d in details {
        let line = serde_json::to_string(d).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn labels(pos: &[usize], n: usize) -> Vec<bool> {
        (1..=n).map(|i| pos.contains(&i)).collect()
    }

    #[test]
    fn hr_examples() {
        assert_eq!(hr_at_k(&labels(&[1, 2, 3, 4, 5, 6], 50), 10), 1.0);
        assert_eq!(hr_at_k(&labels(&[1, 5, 9, 20, 30, 40], 50), 10), 0.5);
        assert_eq!(hr_at_k(&labels(&[11, 12], 50), 10), 0.0);
        assert_eq!(hr_at_k(&labels(&[50], 50), 50), 1.0);
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr_at_k(&labels(&[1], 50), 10), 1.0);
        assert_eq!(mrr_at_k(&labels(&[4, 9], 50), 10), 0.25);
        assert_eq!(mrr_at_k(&labels(&[11], 50), 10), 0.0);
    }

    #[test]
    fn map_examples() {
        assert_eq!(map_at_k(&labels(&[1, 2], 50), 10), 1.0);
        assert_eq!(map_at_k(&labels(&[2], 50), 10), 0.5);
        let v = map_at_k(&labels(&[1, 3, 5], 50), 10);
        assert!((v - (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0).abs() < 1e-15);
        assert!((v - 0.7556).abs() < 1e-4);
    }

    #[test]
    fn slate_sizes_and_seed() {
        let pool: Vec<String> = (0..100).map(|i| format!("r{i:03}")).collect();
        let pos: Vec<String> = pool[..6].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = build_test_slate("p", &pos, &pool, &mut rng, 50).unwrap();
        assert_eq!(s.candidates.len(), 50);
        assert_eq!(s.labels.iter().filter(|&&l| l).count(), 6);
        assert_eq!(s.candidates.iter().collect::<BTreeSet<_>>().len(), 50);
        let one = build_test_slate("p", &pos[..1], &pool, &mut rng, 50).unwrap();
        assert_eq!(one.labels.iter().filter(|&&l| !l).count(), 49);
        let again = build_test_slate("p", &pos, &pool, &mut ChaCha8Rng::seed_from_u64(1), 50).unwrap();
        assert_eq!(s, again);
        assert!(build_test_slate("p", &pos, &pool[..40], &mut rng, 50).is_err());
    }

    fn matrix(ids: &[&str], v: Array2<f64>) -> EmbeddingMatrix {
        EmbeddingMatrix {
            node_ids: ids.iter().map(|s| s.to_string()).collect(),
            vectors: v,
            zero_rows: 0,
        }
    }

    #[test]
    fn ranking_order_and_ties() {
        let papers = matrix(&["p"], array![[1.0, 0.0]]);
        let repos = matrix(&["a", "b", "c"], array![[0.9, 0.0], [0.1, 0.0], [0.5, 0.0]]);
        let slate = TestSlate {
            query: "p".into(),
            candidates: vec!["a".into(), "b".into(), "c".into()],
            labels: vec![true, false, false],
        };
        let ids: Vec<String> = rank_candidates(&slate, &papers, &repos).unwrap().into_iter().map(|r| r.0).collect();
        assert_eq!(ids, ["a", "c", "b"]);

        let zero = matrix(&["c", "a", "b"], Array2::zeros((3, 2)));
        let slate = TestSlate {
            query: "p".into(),
            candidates: vec!["c".into(), "b".into(), "a".into()],
            labels: vec![false; 3],
        };
        let ids: Vec<String> = rank_candidates(&slate, &papers, &zero).unwrap().into_iter().map(|r| r.0).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        let bad = TestSlate {
            query: "nope".into(),
            ..slate
        };
        assert!(rank_candidates(&bad, &papers, &zero).is_err());
    }
}
