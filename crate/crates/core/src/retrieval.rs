//! Per-task embedding index with exhaustive cosine search.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{ImageSource, Manifest, PaintingRecord, Split, Task};
use crate::descriptors::DescriptorKind;
use crate::net::{l2_normalized, EmbeddingTriple, PaintingNet};
use crate::train::{self, FeatureCache, TrainError};

pub const INDEX_MAGIC: &str = "pictor-index 1";

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("{task} vector has dimension {got}, index expects {expected}")]
    Dim { task: Task, expected: usize, got: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("duplicate painting id `{0}`")]
    DuplicateId(String),
    #[error("malformed index file: {0}")]
    Format(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHit {
    pub painting_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexHeader {
    dims: [usize; 3],
    count: usize,
    checkpoint_sha256: String,
    ids: Vec<String>,
}

/// Three dense row-major matrices (artist, style, genre) sharing one id list.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub ids: Vec<String>,
    pub dims: [usize; 3],
    pub checkpoint_sha256: String,
    matrices: [Vec<f32>; 3],
    positions: HashMap<String, usize>,
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl EmbeddingIndex {
    pub fn new(
        ids: Vec<String>,
        embeddings: &[EmbeddingTriple],
        dims: [usize; 3],
        checkpoint_sha256: String,
    ) -> Result<Self, IndexError> {
        if ids.len() != embeddings.len() {
            return Err(IndexError::Format(format!("{} ids for {} embeddings", ids.len(), embeddings.len())));
        }
        let mut matrices: [Vec<f32>; 3] = Default::default();
        for e in embeddings {
            for t in Task::ALL {
                let v = e.get(t);
                if v.len() != dims[t.index()] {
                    return Err(IndexError::Dim { task: t, expected: dims[t.index()], got: v.len() });
                }
                matrices[t.index()].extend_from_slice(v);
            }
        }
        Self::from_parts(ids, dims, checkpoint_sha256, matrices)
    }

    fn from_parts(ids: Vec<String>, dims: [usize; 3], checkpoint_sha256: String, matrices: [Vec<f32>; 3]) -> Result<Self, IndexError> {
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(IndexError::DuplicateId(id.clone()));
            }
        }
        Ok(Self { ids, dims, checkpoint_sha256, matrices, positions })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn matrix(&self, task: Task) -> &[f32] {
        &self.matrices[task.index()]
    }

    pub fn row(&self, task: Task, i: usize) -> &[f32] {
        let d = self.dims[task.index()];
        &self.matrices[task.index()][i * d..(i + 1) * d]
    }

    /// Top `min(k, N)` rows by dot product with `vector`; ties go to the smaller id.
    pub fn query_topk(&self, task: Task, vector: &[f32], k: usize) -> Result<Vec<SimilarityHit>, IndexError> {
        self.query_topk_excluding(task, vector, k, None)
    }

    /// As [`EmbeddingIndex::query_topk`], skipping the row with id `exclude`.
    pub fn query_topk_excluding(
        &self,
        task: Task,
        vector: &[f32],
        k: usize,
        exclude: Option<&str>,
    ) -> Result<Vec<SimilarityHit>, IndexError> {
        let d = self.dims[task.index()];
        if vector.len() != d {
            return Err(IndexError::Dim { task, expected: d, got: vector.len() });
        }
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let skip = exclude.and_then(|id| self.position(id));
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| Some(i) != skip)
            .map(|i| {
                let s = self.row(task, i).iter().zip(vector).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
                (s, i)
            })
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]));
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(r, (score, i))| SimilarityHit { painting_id: self.ids[i].clone(), score, rank: r + 1 })
            .collect())
    }

    /// Text header line, JSON header line, then little-endian f32 rows per task.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), IndexError> {
        let header = IndexHeader {
            dims: self.dims,
            count: self.len(),
            checkpoint_sha256: self.checkpoint_sha256.clone(),
            ids: self.ids.clone(),
        };
        writeln!(w, "{INDEX_MAGIC}")?;
        writeln!(w, "{}", serde_json::to_string(&header).map_err(|e| IndexError::Format(e.to_string()))?)?;
        for m in &self.matrices {
            let bytes: Vec<u8> = m.iter().flat_map(|v| v.to_le_bytes()).collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, IndexError> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != INDEX_MAGIC {
            return Err(IndexError::Format(format!("expected `{INDEX_MAGIC}`")));
        }
        line.clear();
        r.read_line(&mut line)?;
        let h: IndexHeader = serde_json::from_str(&line).map_err(|e| IndexError::Format(e.to_string()))?;
        if h.ids.len() != h.count {
            return Err(IndexError::Format(format!("header lists {} ids for count {}", h.ids.len(), h.count)));
        }
        let mut matrices: [Vec<f32>; 3] = Default::default();
        for (m, d) in matrices.iter_mut().zip(h.dims) {
            let mut buf = vec![0u8; h.count * d * 4];
            r.read_exact(&mut buf).map_err(|e| IndexError::Format(format!("truncated payload: {e}")))?;
            *m = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(IndexError::Format("trailing bytes after payload".into()));
        }
        Self::from_parts(h.ids, h.dims, h.checkpoint_sha256, matrices)
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Embeds every painting of the given splits with `net` and indexes the results.
pub fn build_index(
    net: &PaintingNet,
    checkpoint_sha256: &str,
    manifest: &Manifest,
    source: &dyn ImageSource,
    splits: &[Split],
    inject: Option<(DescriptorKind, &FeatureCache)>,
) -> Result<EmbeddingIndex, IndexError> {
    let records: Vec<&PaintingRecord> = manifest.records.iter().filter(|r| splits.contains(&r.split)).collect();
    let preds = train::predict(net, manifest, source, &records, inject)?;
    let ids = preds.iter().map(|p| p.id.clone()).collect();
    let embeddings: Vec<EmbeddingTriple> = preds
        .iter()
        .map(|p| EmbeddingTriple {
            artist: l2_normalized(&p.logits.artist),
            style: l2_normalized(&p.logits.style),
            genre: l2_normalized(&p.logits.genre),
        })
        .collect();
    EmbeddingIndex::new(ids, &embeddings, net.cfg.classes(), checkpoint_sha256.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_index(n: usize, dims: [usize; 3], seed: u64) -> EmbeddingIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |d: usize| l2_normalized(&(0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>());
        let embs: Vec<EmbeddingTriple> =
            (0..n).map(|_| EmbeddingTriple { artist: v(dims[0]), style: v(dims[1]), genre: v(dims[2]) }).collect();
        EmbeddingIndex::new((0..n).map(|i| format!("p{i:04}")).collect(), &embs, dims, "abc".into()).unwrap()
    }

    #[test]
    fn self_query_ranks_first() {
        let idx = random_index(50, [6, 4, 3], 1);
        for i in 0..idx.len() {
            let hits = idx.query_topk(Task::Artist, idx.row(Task::Artist, i), 1).unwrap();
            assert_eq!(hits[0].painting_id, idx.ids[i]);
            assert!((hits[0].score - 1.0).abs() < 1e-6);
            let excl = idx.query_topk_excluding(Task::Artist, idx.row(Task::Artist, i), 4, Some(&idx.ids[i])).unwrap();
            assert!(excl.iter().all(|h| h.painting_id != idx.ids[i]));
        }
    }

    #[test]
    fn k_beyond_size_returns_everything_ranked() {
        let idx = random_index(7, [5, 5, 5], 2);
        let hits = idx.query_topk(Task::Genre, idx.row(Task::Genre, 0), 100).unwrap();
        assert_eq!(hits.len(), 7);
        assert_eq!(hits.iter().map(|h| h.rank).collect::<Vec<_>>(), (1..=7).collect::<Vec<_>>());
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(matches!(idx.query_topk(Task::Genre, &[0.0; 4], 1), Err(IndexError::Dim { .. })));
        assert!(matches!(idx.query_topk(Task::Genre, &[0.0; 5], 0), Err(IndexError::ZeroK)));
    }

    #[test]
    fn ties_break_by_id() {
        let e = EmbeddingTriple { artist: vec![1.0, 0.0], style: vec![1.0], genre: vec![1.0] };
        let ids = vec!["c".to_string(), "a".to_string(), "b".to_string()];
        let idx = EmbeddingIndex::new(ids, &[e.clone(), e.clone(), e], [2, 1, 1], String::new()).unwrap();
        let hits = idx.query_topk(Task::Artist, &[1.0, 0.0], 2).unwrap();
        assert_eq!(hits.iter().map(|h| h.painting_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let idx = random_index(20, [6, 4, 3], 3);
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        let back = EmbeddingIndex::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, idx);
        for t in Task::ALL {
            let a: Vec<u32> = idx.matrix(t).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.matrix(t).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        buf.pop();
        assert!(EmbeddingIndex::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn rejects_mismatched_dims_and_duplicates() {
        let e = EmbeddingTriple { artist: vec![1.0, 0.0], style: vec![1.0], genre: vec![1.0] };
        assert!(matches!(
            EmbeddingIndex::new(vec!["a".into()], &[e.clone()], [3, 1, 1], String::new()),
            Err(IndexError::Dim { .. })
        ));
        assert!(matches!(
            EmbeddingIndex::new(vec!["a".into(), "a".into()], &[e.clone(), e], [2, 1, 1], String::new()),
            Err(IndexError::DuplicateId(_))
        ));
    }

    proptest! {
        #[test]
        fn hits_are_sorted_and_unique(seed in 0u64..1000, k in 1usize..40) {
            let idx = random_index(25, [4, 3, 2], seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let q: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let hits = idx.query_topk(Task::Style, &q, k).unwrap();
            prop_assert_eq!(hits.len(), k.min(25));
            for w in hits.windows(2) {
                prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].painting_id < w[1].painting_id));
            }
        }
    }
}
