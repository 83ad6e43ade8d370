//! Candidate retrieval: weighted-embedding document queries, exhaustive
//! cosine k-NN over the annotated training index, and candidate ranking by
//! summed neighbor IDF mass.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::{CorpusStats, CorpusStore, EmbeddingTable};
use crate::error::{Error, Result};
use crate::textprep::{TokenSequence, UNK_ID};

pub const DEFAULT_RETRIEVED_DOCS: usize = 5000;
pub const DEFAULT_CANDIDATES: usize = 1024;
pub const DEFAULT_BM25_K1: f64 = 1.2;
pub const DEFAULT_BM25_B: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightScheme {
    TfIdf,
    Bm25 { k1: f64, b: f64 },
}

/// Term weighting over fixed corpus statistics. Statistics are fitted on the
/// training corpus only and never mutated here.
#[derive(Debug, Clone)]
pub struct TermWeighting {
    scheme: WeightScheme,
    stats: CorpusStats,
}

impl TermWeighting {
    pub fn tfidf(stats: CorpusStats) -> Self {
        Self {
            scheme: WeightScheme::TfIdf,
            stats,
        }
    }

    pub fn bm25(stats: CorpusStats, k1: f64, b: f64) -> Result<Self> {
        if k1 <= 0.0 {
            return Err(Error::InvalidInput(format!("bm25 k1 must be > 0, got {k1}")));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::InvalidInput(format!("bm25 b must be in [0, 1], got {b}")));
        }
        Ok(Self {
            scheme: WeightScheme::Bm25 { k1, b },
            stats,
        })
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    /// Smoothed inverse document frequency: ln((N+1)/(df+1)) + 1.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.stats.n_docs as f64;
        let df = self.stats.doc_freq.get(term).copied().unwrap_or(0) as f64;
        ((n + 1.0) / (df + 1.0)).ln() + 1.0
    }

    /// Weight of a term within a document; 0 when the term is absent.
    pub fn weight(&self, term: &str, doc: &TokenSequence) -> f64 {
        let tf = doc.terms.iter().filter(|t| t.as_str() == term).count() as f64;
        if tf == 0.0 {
            return 0.0;
        }
        let idf = self.idf(term);
        match self.scheme {
            WeightScheme::TfIdf => tf * idf,
            WeightScheme::Bm25 { k1, b } => {
                let avg = if self.stats.mean_len > 0.0 {
                    self.stats.mean_len
                } else {
                    1.0
                };
                idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc.len() as f64 / avg))
            }
        }
    }

    /// Mean token IDF of a document, the per-neighbor mass used when scoring
    /// candidate indexes (length-normalized so long documents do not
    /// dominate).
    pub fn idf_mass(&self, doc: &TokenSequence) -> f64 {
        if doc.is_empty() {
            return 0.0;
        }
        doc.terms.iter().map(|t| self.idf(t)).sum::<f64>() / doc.len() as f64
    }
}

/// Weight-normalized mean of embedding vectors. Exposed for the
/// normalization-invariance property: scaling all weights by a positive
/// constant leaves the output unchanged.
pub(crate) fn weighted_mean(parts: &[(f64, &[f64])], dim: usize) -> Option<Vec<f64>> {
    let mut num = vec![0.0; dim];
    let mut den = 0.0;
    for (w, v) in parts {
        den += w;
        for (acc, x) in num.iter_mut().zip(v.iter()) {
            *acc += w * x;
        }
    }
    if den <= 0.0 {
        return None;
    }
    for x in &mut num {
        *x /= den;
    }
    Some(num)
}

/// Represent a document as the weight-normalized sum of its token
/// embeddings. UNK tokens and tokens without an embedding are excluded.
pub fn doc_query_vector(
    doc: &TokenSequence,
    emb: &EmbeddingTable,
    weighting: &TermWeighting,
) -> Result<Vec<f64>> {
    if doc.is_empty() {
        return Err(Error::DegenerateQuery {
            id: doc.doc_id.clone(),
            msg: "empty token sequence".into(),
        });
    }
    let mut weight_cache: BTreeMap<&str, f64> = BTreeMap::new();
    let mut parts: Vec<(f64, &[f64])> = Vec::with_capacity(doc.len());
    for (term, &id) in doc.terms.iter().zip(&doc.ids) {
        if id == UNK_ID {
            continue;
        }
        let Some(vector) = emb.get(term) else {
            continue;
        };
        let w = *weight_cache
            .entry(term.as_str())
            .or_insert_with(|| weighting.weight(term, doc));
        parts.push((w, vector));
    }
    weighted_mean(&parts, emb.dimension()).ok_or_else(|| Error::DegenerateQuery {
        id: doc.doc_id.clone(),
        msg: "no token with nonzero weight and an embedding".into(),
    })
}

/// Annotated document index: one query vector, gold major-heading set and
/// IDF mass per training document. Immutable once built.
#[derive(Debug, Clone, Default)]
pub struct DocIndex {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub golds: Vec<BTreeSet<String>>,
    pub idf_mass: Vec<f64>,
    pub dimension: usize,
}

impl DocIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Build the retrieval index over a preprocessed corpus. `seqs[i]` must
/// correspond to `corpus.documents()[i]`.
pub fn build_index(
    corpus: &CorpusStore,
    seqs: &[TokenSequence],
    emb: &EmbeddingTable,
    weighting: &TermWeighting,
) -> Result<DocIndex> {
    if corpus.len() != seqs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} documents but {} token sequences",
            corpus.len(),
            seqs.len()
        )));
    }
    let mut index = DocIndex {
        dimension: emb.dimension(),
        ..DocIndex::default()
    };
    for (doc, seq) in corpus.documents().iter().zip(seqs) {
        index.ids.push(doc.id.clone());
        index.vectors.push(doc_query_vector(seq, emb, weighting)?);
        index.golds.push(doc.mesh_major.clone());
        index.idf_mass.push(weighting.idf_mass(seq));
    }
    Ok(index)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Ranking entry ordered so that greater = better: higher cosine first,
/// ties by ascending document id.
#[derive(Debug, Clone, PartialEq)]
struct Ranked {
    cos: f64,
    id: String,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.cos
            .partial_cmp(&other.cos)
            .expect("cosine is finite")
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Top-k documents of the index by cosine similarity to `query`, descending,
/// ties broken by ascending id. `exclude_id` removes the query document
/// itself during training. Selection runs through a bounded min-heap.
pub fn nearest_neighbors(
    query: &[f64],
    index: &DocIndex,
    k: usize,
    exclude_id: Option<&str>,
) -> Result<Vec<(String, f64)>> {
    if query.iter().map(|x| x * x).sum::<f64>() == 0.0 {
        return Err(Error::ZeroNormQuery);
    }
    if query.len() != index.dimension {
        return Err(Error::ShapeMismatch(format!(
            "query length {} vs index dimension {}",
            query.len(),
            index.dimension
        )));
    }
    use std::cmp::Reverse;
    let mut heap: std::collections::BinaryHeap<Reverse<Ranked>> =
        std::collections::BinaryHeap::with_capacity(k + 1);
    for (id, vector) in index.ids.iter().zip(&index.vectors) {
        if exclude_id == Some(id.as_str()) {
            continue;
        }
        heap.push(Reverse(Ranked {
            cos: cosine(query, vector),
            id: id.clone(),
        }));
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut kept: Vec<Ranked> = heap.into_iter().map(|Reverse(r)| r).collect();
    kept.sort_by(|a, b| b.cmp(a));
    Ok(kept.into_iter().map(|r| (r.id, r.cos)).collect())
}

/// Ranked candidate index ids for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub doc_id: String,
    /// (index id, score), scores non-increasing; gold ids appended in
    /// training mode carry a sentinel score of negative infinity.
    pub candidates: Vec<(String, f64)>,
}

impl CandidateSet {
    pub fn ids(&self) -> Vec<String> {
        self.candidates.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Score every index found on the retrieved neighbors by summing the
/// neighbors' IDF mass, keep the top `m`, and in training mode union in the
/// gold labels so the classifier always sees its positives.
pub fn select_candidates(
    doc_id: &str,
    neighbors: &[(String, f64)],
    index: &DocIndex,
    m: usize,
    gold: Option<&BTreeSet<String>>,
) -> Result<CandidateSet> {
    if neighbors.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no neighbors retrieved for document {doc_id:?}"
        )));
    }
    let pos: BTreeMap<&str, usize> = index
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
    for (neighbor_id, _) in neighbors {
        let Some(&i) = pos.get(neighbor_id.as_str()) else {
            return Err(Error::InvalidInput(format!(
                "neighbor {neighbor_id:?} not present in the index"
            )));
        };
        let mass = index.idf_mass[i];
        for label in &index.golds[i] {
            *scores.entry(label.as_str()).or_insert(0.0) += mass;
        }
    }
    let mut ranked: Vec<(&str, f64)> = scores.into_iter().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then_with(|| a.0.cmp(b.0)));
    ranked.truncate(m);
    let mut candidates: Vec<(String, f64)> = ranked
        .into_iter()
        .map(|(id, s)| (id.to_string(), s))
        .collect();
    if let Some(gold) = gold {
        let present: BTreeSet<&str> = candidates.iter().map(|(id, _)| id.as_str()).collect();
        let missing: Vec<String> = gold
            .iter()
            .filter(|g| !present.contains(g.as_str()))
            .cloned()
            .collect();
        for g in missing {
            candidates.push((g, f64::NEG_INFINITY));
        }
    }
    Ok(CandidateSet {
        doc_id: doc_id.to_string(),
        candidates,
    })
}

/// Fraction of gold labels captured by the candidate sets (pooled over
/// documents). Reported as retrieval instrumentation.
pub fn candidate_recall(
    candidates: &[CandidateSet],
    golds: &BTreeMap<String, BTreeSet<String>>,
) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for cand in candidates {
        let Some(gold) = golds.get(&cand.doc_id) else {
            continue;
        };
        let ids: BTreeSet<&str> = cand
            .candidates
            .iter()
            .filter(|(_, s)| s.is_finite())
            .map(|(id, _)| id.as_str())
            .collect();
        total += gold.len();
        hit += gold.iter().filter(|g| ids.contains(g.as_str())).count();
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}
