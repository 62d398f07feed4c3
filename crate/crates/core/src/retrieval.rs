//! Exact top-K cosine retrieval over question embeddings.
//!
//! Persisted layout: the 8-byte magic `DSTIDX01`, a little-endian `u32`
//! header length, a JSON header (`dimension`, `count`, `encoder`, `ids`,
//! `tags`), then `count * dimension` little-endian `f32` values row by row.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{l2_normalize, Backend, BackendError};
use crate::corpus::SeedExample;

pub const DEFAULT_K: usize = 5;
const MAGIC: &[u8; 8] = b"DSTIDX01";
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index from zero examples")]
    Empty,
    #[error("embedding {id:?} failed: {source}")]
    Embed {
        id: String,
        #[source]
        source: BackendError,
    },
    #[error("embedding {id:?} has dimension {got}, expected {expected}")]
    Dimension { id: String, expected: usize, got: usize },
    #[error("query embedding failed: {0}")]
    Query(#[source] BackendError),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("index was built with encoder {found:?}, expected {expected:?}")]
    EncoderMismatch { expected: String, found: String },
}

/// A document to index: its id, the text to embed, and free-form tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexItem {
    pub id: String,
    pub text: String,
    pub tags: Vec<String>,
}

impl IndexItem {
    /// Index the question text only; options and reasoning are left out.
    pub fn from_seed(example: &SeedExample, tags: &[&str]) -> Self {
        IndexItem {
            id: example.instance.id.clone(),
            text: example.instance.question.clone(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalHit {
    pub id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    encoder: String,
    dimension: usize,
    ids: Vec<String>,
    tags: Vec<Vec<String>>,
    vectors: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dimension: usize,
    count: usize,
    encoder: String,
    ids: Vec<String>,
    tags: Vec<Vec<String>>,
}

/// Embed every item (concurrently, order preserved) and stack the
/// L2-normalized rows.
pub fn build_index(items: &[IndexItem], embedder: &dyn Backend) -> Result<EmbeddingIndex, RetrievalError> {
    if items.is_empty() {
        return Err(RetrievalError::Empty);
    }
    let rows: Vec<Result<Vec<f32>, BackendError>> = items
        .par_iter()
        .map(|item| embedder.embed(&item.text).and_then(l2_normalize))
        .collect();
    let mut dimension = None;
    let mut vectors = Vec::new();
    for (item, row) in items.iter().zip(rows) {
        let row = row.map_err(|source| RetrievalError::Embed { id: item.id.clone(), source })?;
        let d = *dimension.get_or_insert(row.len());
        if row.len() != d {
            return Err(RetrievalError::Dimension { id: item.id.clone(), expected: d, got: row.len() });
        }
        vectors.extend(row);
    }
    Ok(EmbeddingIndex {
        encoder: embedder.identity(),
        dimension: dimension.unwrap_or(0),
        ids: items.iter().map(|i| i.id.clone()).collect(),
        tags: items.iter().map(|i| i.tags.clone()).collect(),
        vectors,
    })
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn encoder(&self) -> &str {
        &self.encoder
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn tags(&self, row: usize) -> &[String] {
        &self.tags[row]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dimension..(i + 1) * self.dimension]
    }

    /// Exact scan. Scores are dot products of unit vectors; ties keep
    /// insertion order; excluded ids are never returned.
    pub fn top_k_vector(&self, query: &[f32], k: usize, exclude: &HashSet<String>) -> Vec<RetrievalHit> {
        if k == 0 {
            return Vec::new();
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|&i| !exclude.contains(&self.ids[i]))
            .map(|i| (i, dot(self.row(i), query)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(r, (i, score))| RetrievalHit { id: self.ids[i].clone(), score, rank: r + 1 })
            .collect()
    }

    /// Embed the query text and scan.
    pub fn top_k(
        &self,
        embedder: &dyn Backend,
        query_text: &str,
        k: usize,
        exclude: &HashSet<String>,
    ) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let q = embedder.embed(query_text).and_then(l2_normalize).map_err(RetrievalError::Query)?;
        if q.len() != self.dimension {
            return Err(RetrievalError::Dimension { id: "<query>".into(), expected: self.dimension, got: q.len() });
        }
        Ok(self.top_k_vector(&q, k, exclude))
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let header = Header {
            dimension: self.dimension,
            count: self.len(),
            encoder: self.encoder.clone(),
            ids: self.ids.clone(),
            tags: self.tags.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut bytes = Vec::with_capacity(12 + header.len() + self.vectors.len() * 4);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header);
        for x in &self.vectors {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        crate::corpus::write_atomic(path, &bytes).map_err(|e| RetrievalError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Load a persisted index. When `expected_encoder` is given the stored
    /// encoder identity must match it.
    pub fn load(path: &Path, expected_encoder: Option<&str>) -> Result<Self, RetrievalError> {
        let bytes = fs::read(path).map_err(|source| RetrievalError::Io { path: path.to_path_buf(), source })?;
        let bad = |message: &str| RetrievalError::Format { path: path.to_path_buf(), message: message.to_string() };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not an embedding index file"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
        if let Some(expected) = expected_encoder {
            if expected != header.encoder {
                return Err(RetrievalError::EncoderMismatch { expected: expected.to_string(), found: header.encoder });
            }
        }
        if header.ids.len() != header.count || header.tags.len() != header.count {
            return Err(bad("header counts disagree"));
        }
        let data = &bytes[12 + hlen..];
        if data.len() != header.count * header.dimension * 4 {
            return Err(bad("vector payload has the wrong length"));
        }
        let vectors: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let index = EmbeddingIndex {
            encoder: header.encoder,
            dimension: header.dimension,
            ids: header.ids,
            tags: header.tags,
            vectors,
        };
        for i in 0..index.len() {
            let n = index.row(i).iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(bad(&format!("row {i} is not unit-norm")));
            }
        }
        Ok(index)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{MockBackend, MockSettings};
    use crate::backends::scripted::ScriptedBackend;
    use rand::{Rng, SeedableRng};

    fn items(texts: &[&str]) -> Vec<IndexItem> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| IndexItem { id: format!("id{i}"), text: t.to_string(), tags: vec!["seed".into()] })
            .collect()
    }

    fn mock() -> MockBackend {
        MockBackend::new("enc", MockSettings::default())
    }

    #[test]
    fn rows_are_unit_norm() {
        let idx = build_index(&items(&["a b", "c d e", "f"]), &mock()).unwrap();
        assert_eq!(idx.len(), 3);
        for i in 0..3 {
            let n: f64 = idx.row(i).iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicate_texts_get_duplicate_rows() {
        let idx = build_index(&items(&["same text", "same text"]), &mock()).unwrap();
        assert_eq!(idx.row(0), idx.row(1));
        assert_ne!(idx.ids()[0], idx.ids()[1]);
        let hits = idx.top_k(&mock(), "same text", 2, &HashSet::new()).unwrap();
        assert_eq!(hits[0].id, "id0");
        assert_eq!(hits[1].id, "id1");
    }

    #[test]
    fn rebuild_is_identical() {
        let t = items(&["x y", "y z", "z w"]);
        assert_eq!(build_index(&t, &mock()).unwrap(), build_index(&t, &mock()).unwrap());
    }

    #[test]
    fn self_retrieval_and_k_zero() {
        let t = items(&["The group has 8 people.", "Cats chase mice.", "Rain falls in spring."]);
        let idx = build_index(&t, &mock()).unwrap();
        let hits = idx.top_k(&mock(), "Cats chase mice.", 3, &HashSet::new()).unwrap();
        assert_eq!(hits[0].id, "id1");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert_eq!(hits.iter().map(|h| h.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(idx.top_k(&mock(), "Cats", 0, &HashSet::new()).unwrap().is_empty());
    }

    #[test]
    fn exclusion_and_truncation() {
        let t = items(&["a", "b", "c"]);
        let idx = build_index(&t, &mock()).unwrap();
        let ex: HashSet<String> = ["id1".to_string()].into();
        let hits = idx.top_k(&mock(), "b", 10, &ex).unwrap();
        assert_eq!(hits.len(), 2);
        assert!(hits.iter().all(|h| h.id != "id1"));
    }

    #[test]
    fn failing_embedding_names_the_id() {
        let enc = ScriptedBackend::new("e").on_embed(|t| {
            if t == "bad" {
                Err(BackendError::Transient("boom".into()))
            } else {
                Ok(vec![1.0, 0.0])
            }
        });
        let err = build_index(&items(&["ok", "bad"]), &enc).unwrap_err();
        assert!(matches!(err, RetrievalError::Embed { ref id, .. } if id == "id1"), "{err}");
        assert!(matches!(build_index(&[], &enc), Err(RetrievalError::Empty)));
    }

    #[test]
    fn ties_broken_by_insertion_order() {
        let enc = ScriptedBackend::new("e").on_embed(|t| Ok(if t == "q" { vec![1.0, 0.0] } else { vec![0.0, 1.0] }));
        let idx = build_index(&items(&["p", "p", "p"]), &enc).unwrap();
        let hits = idx.top_k(&enc, "q", 3, &HashSet::new()).unwrap();
        assert_eq!(hits.iter().map(|h| h.id.as_str()).collect::<Vec<_>>(), vec!["id0", "id1", "id2"]);
    }

    #[test]
    fn persistence_round_trip_and_encoder_check() {
        let idx = build_index(&items(&["a b", "b c"]), &mock()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seed.idx");
        idx.save(&p).unwrap();
        assert_eq!(EmbeddingIndex::load(&p, Some("mock/enc")).unwrap(), idx);
        assert!(matches!(
            EmbeddingIndex::load(&p, Some("other")),
            Err(RetrievalError::EncoderMismatch { .. })
        ));
        std::fs::write(&p, b"garbage").unwrap();
        assert!(matches!(EmbeddingIndex::load(&p, None), Err(RetrievalError::Format { .. })));
    }

    #[test]
    fn scores_bounded_and_monotone() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let enc = ScriptedBackend::new("e").on_embed(|t| {
            let seed: u64 = t.parse().unwrap();
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            Ok((0..8).map(|_| r.gen_range(-1.0..1.0)).collect())
        });
        let t: Vec<IndexItem> = (0..50)
            .map(|i| IndexItem { id: i.to_string(), text: rng.gen::<u32>().to_string(), tags: vec![] })
            .collect();
        let idx = build_index(&t, &enc).unwrap();
        let hits = idx.top_k(&enc, "12345", 50, &HashSet::new()).unwrap();
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(hits.iter().all(|h| h.score >= -1.0 - 1e-6 && h.score <= 1.0 + 1e-6));
    }
}
