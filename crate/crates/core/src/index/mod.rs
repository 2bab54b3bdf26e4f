//! Identity database: unit-norm embeddings keyed by (individual, image),
//! exhaustive cosine-distance retrieval and top-k evaluation.

mod io;

pub use io::{decode_index, encode_index, load_index, save_index, sidecar_path};

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{FvState, KpcaModel};
use crate::scalar::{dot, lit, to_f64, Real};
use crate::vocab::{VocabId, Vocabulary};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("empty database")]
    EmptyDatabase,
    #[error("duplicate entry ({0}, {1})")]
    DuplicateKey(String, String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding is not unit length (norm {0})")]
    NotNormalized(f64),
    #[error("embedding state {got:?} does not match index state {expected:?}")]
    StateMismatch { expected: FvState, got: FvState },
    #[error("vocabulary mismatch")]
    VocabularyMismatch,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unsupported index version {0}")]
    VersionMismatch(u32),
    #[error("corrupt file")]
    CorruptFile,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Initial,
    ExpertConfirmed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct DatabaseEntry<T> {
    pub individual_id: String,
    pub image_id: String,
    #[serde(skip)]
    pub embedding: Vec<T>,
    pub descriptor_ref: Option<String>,
    /// Unix seconds.
    pub added_at: u64,
    pub provenance: Provenance,
}

impl<T> DatabaseEntry<T> {
    pub fn new(individual_id: impl Into<String>, image_id: impl Into<String>, embedding: Vec<T>) -> Self {
        Self {
            individual_id: individual_id.into(),
            image_id: image_id.into(),
            embedding,
            descriptor_ref: None,
            added_at: now_unix(),
            provenance: Provenance::Initial,
        }
    }

    pub fn with_descriptor_ref(mut self, path: impl Into<String>) -> Self {
        self.descriptor_ref = Some(path.into());
        self
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = p;
        self
    }

    pub fn with_added_at(mut self, t: u64) -> Self {
        self.added_at = t;
        self
    }

    fn key(&self) -> (String, String) {
        (self.individual_id.clone(), self.image_id.clone())
    }
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedMatch<T> {
    pub entry: DatabaseEntry<T>,
    pub distance: f64,
    pub rank: usize,
}

/// `1 − a·b`, clamped to `[0, 2]`.
pub fn cosine_distance<T: Real>(a: &[T], b: &[T]) -> Result<T, IndexError> {
    if a.len() != b.len() {
        return Err(IndexError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    Ok((T::one() - dot(a, b)).max(T::zero()).min(lit(2.0)))
}

/// One evaluation query: an embedding and its true individual.
#[derive(Debug, Clone)]
pub struct EvalQuery<T> {
    pub query_id: String,
    pub individual_id: String,
    pub embedding: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct QueryOutcome {
    pub query_id: String,
    pub individual_id: String,
    /// Top-ranked individuals, best first (at most `k_max`).
    pub ranking: Vec<String>,
    /// 1-based rank of the true individual, if it is in the database.
    pub true_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalReport {
    pub k_max: usize,
    /// `accuracy[k − 1]` is the top-k accuracy.
    pub accuracy: Vec<f64>,
    pub query_count: usize,
    /// true individual → predicted top-1 individual → count.
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
    pub queries: Vec<QueryOutcome>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn top(&self, k: usize) -> f64 {
        if self.accuracy.is_empty() || k == 0 {
            return 0.0;
        }
        self.accuracy[(k - 1).min(self.accuracy.len() - 1)]
    }
}

/// Exhaustive-search embedding database.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityIndex<T> {
    entries: Vec<DatabaseEntry<T>>,
    keys: HashSet<(String, String)>,
    dim: Option<usize>,
    state: FvState,
    vocab_id: Option<VocabId>,
    /// Pipeline configuration the embeddings were produced with.
    pub config: serde_json::Value,
    pub vocabulary: Option<Vocabulary<T>>,
    pub kpca: Option<KpcaModel<T>>,
}

impl<T: Real> Default for IdentityIndex<T> {
    fn default() -> Self {
        Self::new(FvState::Final, None)
    }
}

impl<T: Real> IdentityIndex<T> {
    /// Empty index for embeddings of the given state (`final` or `compressed`).
    pub fn new(state: FvState, vocab_id: Option<VocabId>) -> Self {
        Self {
            entries: Vec::new(),
            keys: HashSet::new(),
            dim: None,
            state,
            vocab_id,
            config: serde_json::Value::Null,
            vocabulary: None,
            kpca: None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn state(&self) -> FvState {
        self.state
    }

    pub fn vocab_id(&self) -> Option<VocabId> {
        self.vocab_id
    }

    pub fn entries(&self) -> &[DatabaseEntry<T>] {
        &self.entries
    }

    pub fn contains(&self, individual_id: &str, image_id: &str) -> bool {
        self.keys.contains(&(individual_id.to_string(), image_id.to_string()))
    }

    /// Individual ids with their image counts, sorted by id.
    pub fn individuals(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.individual_id.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn images_of(&self, individual_id: &str) -> Vec<&DatabaseEntry<T>> {
        self.entries.iter().filter(|e| e.individual_id == individual_id).collect()
    }

    /// Checks an embedding against the index's state, vocabulary and dimension.
    pub fn check_embedding(&self, state: FvState, vocab_id: VocabId, values: &[T]) -> Result<(), IndexError> {
        if state != self.state {
            return Err(IndexError::StateMismatch { expected: self.state, got: state });
        }
        if let Some(id) = self.vocab_id {
            if id != vocab_id {
                return Err(IndexError::VocabularyMismatch);
            }
        }
        self.check_values(values)
    }

    /// Length and unit-norm check for a candidate embedding.
    pub fn check_values(&self, values: &[T]) -> Result<(), IndexError> {
        if let Some(d) = self.dim {
            if values.len() != d {
                return Err(IndexError::DimensionMismatch { expected: d, got: values.len() });
            }
        }
        if values.is_empty() {
            return Err(IndexError::DimensionMismatch { expected: self.dim.unwrap_or(1), got: 0 });
        }
        let n = to_f64(crate::scalar::norm(values));
        if !((n - 1.0).abs() <= 1e-6) {
            return Err(IndexError::NotNormalized(n));
        }
        Ok(())
    }

    /// Adds an entry; duplicates and wrong-length or non-unit embeddings are
    /// rejected with the index unchanged.
    pub fn add_entry(&mut self, entry: DatabaseEntry<T>) -> Result<(), IndexError> {
        let key = entry.key();
        if self.keys.contains(&key) {
            return Err(IndexError::DuplicateKey(key.0, key.1));
        }
        self.check_values(&entry.embedding)?;
        self.dim = Some(entry.embedding.len());
        self.keys.insert(key);
        self.entries.push(entry);
        Ok(())
    }

    /// Every entry with its distance, sorted by (distance, individual, image).
    fn scan(&self, query: &[T]) -> Result<Vec<(T, usize)>, IndexError> {
        if self.entries.is_empty() {
            return Err(IndexError::EmptyDatabase);
        }
        let d = self.dim.unwrap_or(0);
        if query.len() != d {
            return Err(IndexError::DimensionMismatch { expected: d, got: query.len() });
        }
        let mut scored: Vec<(T, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (cosine_distance(query, &e.embedding).expect("lengths checked"), i))
            .collect();
        scored.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.entries[a.1].individual_id.cmp(&self.entries[b.1].individual_id))
                .then_with(|| self.entries[a.1].image_id.cmp(&self.entries[b.1].image_id))
        });
        Ok(scored)
    }

    fn ranked(&self, hits: impl Iterator<Item = (T, usize)>) -> Vec<RankedMatch<T>> {
        hits.enumerate()
            .map(|(r, (dist, i))| RankedMatch { entry: self.entries[i].clone(), distance: to_f64(dist), rank: r + 1 })
            .collect()
    }

    /// The `k` nearest images.
    pub fn query_topk(&self, query: &[T], k: usize) -> Result<Vec<RankedMatch<T>>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidParameter("k must be >= 1".into()));
        }
        let scored = self.scan(query)?;
        Ok(self.ranked(scored.into_iter().take(k)))
    }

    /// The `k` nearest individuals, each represented by its best image.
    pub fn query_individuals(&self, query: &[T], k: usize) -> Result<Vec<RankedMatch<T>>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidParameter("k must be >= 1".into()));
        }
        let scored = self.scan(query)?;
        Ok(self.ranked(dedup_individuals(&self.entries, scored).take(k)))
    }

    /// Top-k identification accuracy for `k = 1..=k_max` over individuals.
    pub fn evaluate_topk(&self, queries: &[EvalQuery<T>], k_max: usize) -> Result<EvalReport, IndexError> {
        if self.entries.is_empty() {
            return Err(IndexError::EmptyDatabase);
        }
        if k_max == 0 {
            return Err(IndexError::InvalidParameter("k_max must be >= 1".into()));
        }
        use rayon::prelude::*;
        let outcomes: Vec<QueryOutcome> = queries
            .par_iter()
            .map(|q| {
                let scored = self.scan(&q.embedding)?;
                let order: Vec<String> = dedup_individuals(&self.entries, scored)
                    .map(|(_, i)| self.entries[i].individual_id.clone())
                    .collect();
                let true_rank = order.iter().position(|id| *id == q.individual_id).map(|p| p + 1);
                Ok(QueryOutcome {
                    query_id: q.query_id.clone(),
                    individual_id: q.individual_id.clone(),
                    ranking: order.into_iter().take(k_max).collect(),
                    true_rank,
                })
            })
            .collect::<Result<_, IndexError>>()?;
        let n = outcomes.len();
        let mut accuracy = vec![0.0; k_max];
        let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for o in &outcomes {
            if let Some(r) = o.true_rank {
                for a in accuracy.iter_mut().skip(r - 1) {
                    *a += 1.0;
                }
            }
            if let Some(top) = o.ranking.first() {
                *confusion.entry(o.individual_id.clone()).or_default().entry(top.clone()).or_insert(0) += 1;
            }
        }
        if n > 0 {
            accuracy.iter_mut().for_each(|a| *a /= n as f64);
        }
        Ok(EvalReport { k_max, accuracy, query_count: n, confusion, queries: outcomes, config: self.config.clone() })
    }
}

fn dedup_individuals<T>(
    entries: &[DatabaseEntry<T>],
    scored: Vec<(T, usize)>,
) -> impl Iterator<Item = (T, usize)> + '_ {
    let mut seen = HashSet::new();
    scored.into_iter().filter(move |&(_, i)| seen.insert(entries[i].individual_id.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn cosine_distance_examples() {
        let a = [1.0, 0.0];
        assert_eq!(cosine_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(cosine_distance(&a, &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&a, &[-1.0, 0.0]).unwrap(), 2.0);
        assert!(cosine_distance(&a, &[1.0]).is_err());
    }

    #[test]
    fn add_rejects_duplicates_and_bad_vectors() {
        let mut idx = IdentityIndex::<f64>::default();
        idx.add_entry(DatabaseEntry::new("a", "1", unit(&[1.0, 2.0]))).unwrap();
        assert!(matches!(
            idx.add_entry(DatabaseEntry::new("a", "1", unit(&[2.0, 1.0]))),
            Err(IndexError::DuplicateKey(..))
        ));
        assert!(matches!(
            idx.add_entry(DatabaseEntry::new("a", "2", unit(&[1.0, 1.0, 1.0]))),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            idx.add_entry(DatabaseEntry::new("a", "3", vec![1.0, 1.0])),
            Err(IndexError::NotNormalized(_))
        ));
        assert_eq!(idx.len(), 1);
        assert!(idx.contains("a", "1"));
    }

    #[test]
    fn empty_database_query() {
        let idx = IdentityIndex::<f64>::default();
        assert!(matches!(idx.query_topk(&[1.0], 1), Err(IndexError::EmptyDatabase)));
    }

    #[test]
    fn ties_break_on_ids() {
        let mut idx = IdentityIndex::<f64>::default();
        for (ind, img) in [("b", "2"), ("a", "9"), ("b", "1"), ("a", "3")] {
            idx.add_entry(DatabaseEntry::new(ind, img, vec![1.0, 0.0])).unwrap();
        }
        let r = idx.query_topk(&[0.0, 1.0], 4).unwrap();
        let keys: Vec<_> = r.iter().map(|m| (m.entry.individual_id.as_str(), m.entry.image_id.as_str())).collect();
        assert_eq!(keys, [("a", "3"), ("a", "9"), ("b", "1"), ("b", "2")]);
        assert_eq!(r.iter().map(|m| m.rank).collect::<Vec<_>>(), [1, 2, 3, 4]);
        let ind = idx.query_individuals(&[0.0, 1.0], 5).unwrap();
        assert_eq!(ind.len(), 2);
        assert_eq!(ind[1].entry.image_id, "1");
    }
}
