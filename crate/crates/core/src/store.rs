//! Binary store of final paper and repository embeddings, and top-K lookup.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    4 bytes "LRES"
//! version  u32
//! dim      u32
//! count    u32
//! records  count times:
//!            platform u8 (0 = paper, 1 = repo)
//!            id_len   u32
//!            id       id_len bytes of UTF-8
//!            vector   dim f64 values
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluator::rank_by_score;
use crate::gcn::EmbeddingMatrix;

pub const MAGIC: &[u8; 4] = b"LRES";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Paper,
    Repo,
}

impl Platform {
    fn tag(self) -> u8 {
        match self {
            Platform::Paper => 0,
            Platform::Repo => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub papers: EmbeddingMatrix,
    pub repos: EmbeddingMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedRecommendation {
    pub query: String,
    pub items: Vec<(String, f64)>,
}

impl EmbeddingStore {
    pub fn new(papers: EmbeddingMatrix, repos: EmbeddingMatrix) -> Result<Self> {
        if papers.width() != repos.width() {
            return Err(Error::Shape(format!(
                "paper width {} differs from repo width {}",
                papers.width(),
                repos.width()
            )));
        }
        for (name, m) in [("paper", &papers), ("repo", &repos)] {
            let mut seen = HashSet::new();
            for id in &m.node_ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Format(format!("duplicate {name} id `{id}` in store")));
                }
            }
        }
        Ok(EmbeddingStore { papers, repos })
    }

    pub fn dim(&self) -> usize {
        self.papers.width()
    }

    pub fn len(&self) -> usize {
        self.papers.node_ids.len() + self.repos.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every record as `(platform, id)` in file order.
    pub fn records(&self) -> Vec<(Platform, &str)> {
        let papers = self.papers.node_ids.iter().map(|id| (Platform::Paper, id.as_str()));
        let repos = self.repos.node_ids.iter().map(|id| (Platform::Repo, id.as_str()));
        papers.chain(repos).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (platform, m) in [(Platform::Paper, &self.papers), (Platform::Repo, &self.repos)] {
            for (id, row) in m.node_ids.iter().zip(m.vectors.rows()) {
                out.push(platform.tag());
                out.extend_from_slice(&(id.len() as u32).to_le_bytes());
                out.extend_from_slice(id.as_bytes());
                for v in row {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an embedding store (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut parts: [(Vec<String>, Vec<f64>); 2] = Default::default();
        for _ in 0..count {
            let tag = r.take(1)?[0];
            let slot = match tag {
                0 => 0,
                1 => 1,
                other => return Err(Error::Format(format!("unknown platform tag {other}"))),
            };
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format(format!("id is not UTF-8: {e}")))?
                .to_string();
            parts[slot].0.push(id);
            for _ in 0..dim {
                parts[slot].1.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
        }
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after store records", bytes.len() - r.at)));
        }
        let [(paper_ids, paper_vals), (repo_ids, repo_vals)] = parts;
        let matrix = |ids: Vec<String>, vals: Vec<f64>| -> EmbeddingMatrix {
            let rows = ids.len();
            EmbeddingMatrix {
                node_ids: ids,
                vectors: Array2::from_shape_vec((rows, dim), vals).expect("row-major values"),
                zero_rows: 0,
            }
        };
        EmbeddingStore::new(matrix(paper_ids, paper_vals), matrix(repo_ids, repo_vals))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Top `k` repositories for a paper over the whole repository set.
    pub fn recommend(&self, paper_id: &str, k: usize) -> Result<RankedRecommendation> {
        let row = self.papers.index_of(paper_id).ok_or_else(|| Error::UnknownId {
            id: paper_id.to_string(),
            hint: suggestion_hint(paper_id, &self.papers.node_ids),
        })?;
        let query = self.papers.vectors.row(row);
        let scored = self
            .repos
            .node_ids
            .iter()
            .zip(self.repos.vectors.rows())
            .map(|(id, r)| (id.clone(), query.dot(&r), ()))
            .collect();
        let items = rank_by_score(scored).into_iter().take(k).map(|(id, s, ())| (id, s)).collect();
        Ok(RankedRecommendation {
            query: paper_id.to_string(),
            items,
        })
    }
}

/// Up to three known ids closest to `id` by edit distance.
pub fn nearest_ids<'a>(id: &str, known: &'a [String], n: usize) -> Vec<&'a str> {
    let mut scored: Vec<(usize, &str)> = known.iter().map(|k| (strsim::levenshtein(id, k), k.as_str())).collect();
    scored.sort();
    scored.into_iter().take(n).map(|(_, k)| k).collect()
}

fn suggestion_hint(id: &str, known: &[String]) -> String {
    let near = nearest_ids(id, known, 3);
    if near.is_empty() {
        String::new()
    } else {
        format!("; nearest known ids: {}", near.join(", "))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("store truncated at offset {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store() -> EmbeddingStore {
        let papers = EmbeddingMatrix {
            node_ids: (0..5).map(|i| format!("p{i}")).collect(),
            vectors: Array2::from_shape_fn((5, 2), |(i, j)| (i + j) as f64 * 0.1),
            zero_rows: 0,
        };
        let repos = EmbeddingMatrix {
            node_ids: vec!["ra".into(), "rb".into(), "rc".into()],
            vectors: array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]],
            zero_rows: 0,
        };
        EmbeddingStore::new(papers, repos).unwrap()
    }

    #[test]
    fn round_trip_and_records() {
        let s = store();
        assert_eq!(s.records().len(), 8);
        assert_eq!(s.records()[5], (Platform::Repo, "ra"));
        assert_eq!(EmbeddingStore::decode(&s.encode()).unwrap(), s);
    }

    #[test]
    fn version_and_truncation() {
        let bytes = store().encode();
        let mut bumped = bytes.clone();
        bumped[4] = 9;
        assert!(matches!(EmbeddingStore::decode(&bumped), Err(Error::Version { found: 9, .. })));
        assert!(EmbeddingStore::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn recommend_ties_and_overflow() {
        let s = store();
        let rec = s.recommend("p1", 10).unwrap();
        let ids: Vec<_> = rec.items.iter().map(|(id, _)| id.as_str()).collect();
        // p1 = (0.1, 0.2): rb scores 0.2, ra and rc tie at 0.1.
        assert_eq!(ids, ["rb", "ra", "rc"]);
        assert_eq!(s.recommend("p1", 1).unwrap().items.len(), 1);
    }

    #[test]
    fn unknown_id_suggests() {
        let err = store().recommend("p7x", 3).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nearest known ids: p0"), "{msg}");
    }
}
