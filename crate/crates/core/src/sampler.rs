//! Distant-supervision positives, uniform negatives and batch assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BridgeLink, Repository};
use crate::error::{Error, Result};
use crate::graph::ContextGraph;

/// Why a pair was labelled positive, highest priority first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Bridge,
    CostarTopT,
    OnehopNeighbor,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrainingPair {
    pub paper_id: String,
    pub repo_id: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingBatch {
    pub pairs: Vec<TrainingPair>,
    /// `negatives[i]` belongs to `pairs[i]`.
    pub negatives: Vec<Vec<String>>,
}

/// Up to `t` repositories most often co-starred with `bridge_repo`, ties by ascending id.
pub fn costar_top(bridge_repo: &str, repos: &[Repository], t: usize) -> Result<Vec<String>> {
    let bridge = repos
        .iter()
        .find(|r| r.id == bridge_repo)
        .ok_or_else(|| Error::UnknownId {
            id: bridge_repo.to_string(),
            hint: String::new(),
        })?;
    let mut scored: Vec<(usize, &str)> = repos
        .iter()
        .filter(|r| r.id != bridge.id)
        .map(|r| (bridge.starrers.intersection(&r.starrers).count(), r.id.as_str()))
        .filter(|&(c, _)| c > 0)
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().take(t).map(|(_, id)| id.to_string()).collect())
}

/// Bridge pairs, co-starred repositories of each bridge repository, and one-hop
/// citation neighbours of each bridge paper paired with its bridge repository.
/// Output is sorted by `(paper_id, repo_id)`.
pub fn build_positive_pairs(
    bridges: &[BridgeLink],
    citation_graph: &ContextGraph,
    repos: &[Repository],
    t: usize,
) -> Result<Vec<TrainingPair>> {
    let node_index: BTreeMap<&str, usize> = citation_graph
        .node_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut best: BTreeMap<(String, String), Provenance> = BTreeMap::new();
    let mut add = |paper: &str, repo: &str, prov: Provenance| {
        best.entry((paper.to_string(), repo.to_string()))
            .and_modify(|p| *p = (*p).min(prov))
            .or_insert(prov);
    };
    let mut sorted = bridges.to_vec();
    sorted.sort();
    for link in &sorted {
        add(&link.paper_id, &link.repo_id, Provenance::Bridge);
        for r in costar_top(&link.repo_id, repos, t)? {
            add(&link.paper_id, &r, Provenance::CostarTopT);
        }
        let &node = node_index.get(link.paper_id.as_str()).ok_or_else(|| Error::UnknownId {
            id: link.paper_id.clone(),
            hint: " (not in citation graph)".into(),
        })?;
        let mut nbrs: Vec<&str> = citation_graph
            .neighbors(node)
            .iter()
            .map(|&j| citation_graph.node_ids[j].as_str())
            .collect();
        nbrs.sort();
        for nbr in nbrs.into_iter().take(t) {
            add(nbr, &link.repo_id, Provenance::OnehopNeighbor);
        }
    }
    Ok(best
        .into_iter()
        .map(|((paper_id, repo_id), provenance)| TrainingPair {
            paper_id,
            repo_id,
            provenance,
        })
        .collect())
}

/// Every labelled repository per paper.
pub fn positives_by_paper(pairs: &[TrainingPair]) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for p in pairs {
        out.entry(p.paper_id.clone()).or_default().insert(p.repo_id.clone());
    }
    out
}

/// Uniform sample without replacement from `all_repos` minus `positives`.
pub fn sample_negatives<R: Rng>(
    rng: &mut R,
    paper_id: &str,
    all_repos: &[String],
    positives: &BTreeSet<String>,
    n_k: usize,
) -> Result<Vec<String>> {
    let candidates: Vec<&String> = all_repos.iter().filter(|r| !positives.contains(*r)).collect();
    if candidates.len() < n_k {
        return Err(Error::Sampling(format!(
            "paper `{paper_id}` has {} negative candidates, {n_k} requested",
            candidates.len()
        )));
    }
    Ok(index::sample(rng, candidates.len(), n_k)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect())
}

/// Shuffles `pairs` and cuts them into batches with fresh negatives.
pub fn make_batches<R: Rng>(
    pairs: &[TrainingPair],
    rng: &mut R,
    batch_size: usize,
    n_k: usize,
    all_repos: &[String],
    positives: &BTreeMap<String, BTreeSet<String>>,
) -> Result<Vec<TrainingBatch>> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no training pairs".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<&TrainingPair> = pairs.iter().collect();
    order.shuffle(rng);
    let empty = BTreeSet::new();
    order
        .chunks(batch_size)
        .map(|chunk| {
            let negatives = chunk
                .iter()
                .map(|p| {
                    let pos = positives.get(&p.paper_id).unwrap_or(&empty);
                    sample_negatives(rng, &p.paper_id, all_repos, pos, n_k)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainingBatch {
                pairs: chunk.iter().map(|&p| p.clone()).collect(),
                negatives,
            })
        })
        .collect()
}

/// Line-delimited JSON audit of labelled pairs.
pub fn write_pairs(path: impl AsRef<Path>, pairs: &[TrainingPair]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for p in pairs {
        let line = serde_json::to_string(p).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Paper;
    use crate::graph::build_citation_graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn repo(id: &str, stars: &[&str]) -> Repository {
        Repository {
            id: id.into(),
            description_tokens: vec![],
            tags: vec![],
            starrers: stars.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn paper(id: &str, cites: &[&str]) -> Paper {
        Paper {
            id: id.into(),
            title: String::new(),
            abstract_tokens: vec![],
            cited_ids: cites.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn costar_ranking() {
        let repos = [
            repo("b", &["u1", "u2"]),
            repo("x", &["u1", "u2"]),
            repo("y", &["u2"]),
            repo("z", &["u3"]),
        ];
        assert_eq!(costar_top("b", &repos, 6).unwrap(), ["x", "y"]);
        assert!(costar_top("z", &repos, 6).unwrap().is_empty());
    }

    #[test]
    fn costar_tie_breaks_by_id() {
        let repos = [repo("b", &["u1"]), repo("r_b", &["u1"]), repo("r_a", &["u1"])];
        assert_eq!(costar_top("b", &repos, 6).unwrap(), ["r_a", "r_b"]);
    }

    #[test]
    fn lone_bridge_gives_one_pair() {
        let papers = [paper("p", &[]), paper("q", &[])];
        let repos = [repo("r", &["u"]), repo("s", &["v"])];
        let g = build_citation_graph(&papers);
        let bridges = [BridgeLink {
            paper_id: "p".into(),
            repo_id: "r".into(),
        }];
        let pairs = build_positive_pairs(&bridges, &g, &repos, 6).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].provenance, Provenance::Bridge);
    }

    #[test]
    fn costar_list_truncated_at_t() {
        let mut repos = vec![repo("b", &["u"])];
        for i in 0..8 {
            repos.push(repo(&format!("c{i}"), &["u"]));
        }
        let papers = [paper("p", &[])];
        let g = build_citation_graph(&papers);
        let bridges = [BridgeLink {
            paper_id: "p".into(),
            repo_id: "b".into(),
        }];
        assert_eq!(build_positive_pairs(&bridges, &g, &repos, 6).unwrap().len(), 7);
    }

    #[test]
    fn negatives_exclude_positives() {
        let all: Vec<String> = (0..100).map(|i| format!("r{i:03}")).collect();
        let pos: BTreeSet<String> = all[..56].iter().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let negs = sample_negatives(&mut rng, "p", &all, &pos, 44).unwrap();
        let set: BTreeSet<String> = negs.iter().cloned().collect();
        assert_eq!(set.len(), 44);
        assert_eq!(set, all[56..].iter().cloned().collect());
        assert!(sample_negatives(&mut rng, "p", &all, &pos, 45).is_err());
    }

    #[test]
    fn negatives_are_seeded() {
        let all: Vec<String> = (0..7516).map(|i| format!("r{i}")).collect();
        let pos = BTreeSet::new();
        let a = sample_negatives(&mut ChaCha8Rng::seed_from_u64(9), "p", &all, &pos, 44).unwrap();
        let b = sample_negatives(&mut ChaCha8Rng::seed_from_u64(9), "p", &all, &pos, 44).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 44);
    }

    fn pairs(n: usize) -> Vec<TrainingPair> {
        (0..n)
            .map(|i| TrainingPair {
                paper_id: format!("p{i}"),
                repo_id: "r0".into(),
                provenance: Provenance::Bridge,
            })
            .collect()
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let all: Vec<String> = (0..20).map(|i| format!("r{i}")).collect();
        let pos = positives_by_paper(&pairs(10));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let epoch1 = make_batches(&pairs(10), &mut rng, 4, 3, &all, &pos).unwrap();
        assert_eq!(epoch1.iter().map(|b| b.pairs.len()).collect::<Vec<_>>(), [4, 4, 2]);
        let epoch2 = make_batches(&pairs(10), &mut rng, 4, 3, &all, &pos).unwrap();
        let mut a: Vec<_> = epoch1.iter().flat_map(|b| b.pairs.clone()).collect();
        let mut b: Vec<_> = epoch2.iter().flat_map(|b| b.pairs.clone()).collect();
        assert_ne!(a, b);
        a.sort();
        b.sort();
        assert_eq!(a, b);

        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2 {
            assert_eq!(
                make_batches(&pairs(10), &mut r1, 4, 3, &all, &pos).unwrap(),
                make_batches(&pairs(10), &mut r2, 4, 3, &all, &pos).unwrap()
            );
        }
        for batch in &epoch1 {
            for (p, negs) in batch.pairs.iter().zip(&batch.negatives) {
                assert!(negs.iter().all(|n| !pos[&p.paper_id].contains(n)));
            }
        }
    }
}
