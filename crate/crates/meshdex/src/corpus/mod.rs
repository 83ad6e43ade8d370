//! Corpus loading and validation: citation records, the index ontology,
//! word-embedding tables and chronological splits.

mod ontology;

pub use ontology::{EdgeKind, MeshOntology, NodeKind, OntologyNode};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textprep::TextAnalyzer;

/// One citation record: identifier, text, date and gold label sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub abstract_text: String,
    pub journal: Option<String>,
    pub date: NaiveDate,
    pub mesh_major: BTreeSet<String>,
    pub supplementary: BTreeSet<String>,
}

impl Document {
    /// Gold labels for joint or majors-only indexing.
    pub fn gold_labels(&self, joint: bool) -> BTreeSet<String> {
        let mut set = self.mesh_major.clone();
        if joint {
            set.extend(self.supplementary.iter().cloned());
        }
        set
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    title: String,
    #[serde(rename = "abstract")]
    abstract_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    journal: Option<String>,
    date: String,
    #[serde(default)]
    mesh_major: Vec<String>,
    #[serde(default)]
    supplementary: Vec<String>,
}

/// Global term statistics over the preprocessed corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStats {
    pub n_docs: usize,
    /// Number of distinct documents whose preprocessed token set contains
    /// the term.
    pub doc_freq: BTreeMap<String, u32>,
    /// Total occurrences of the term across the corpus.
    pub term_counts: BTreeMap<String, u64>,
    /// Mean preprocessed document length in tokens.
    pub mean_len: f64,
}

/// Ordered document list with id lookup and cached term statistics.
#[derive(Debug, Clone)]
pub struct CorpusStore {
    documents: Vec<Document>,
    by_id: BTreeMap<String, usize>,
    stats: CorpusStats,
}

impl CorpusStore {
    /// Build a store from documents, validating invariants and computing
    /// term statistics with `analyzer`.
    pub fn from_documents(
        documents: Vec<Document>,
        ontology: Option<&MeshOntology>,
        analyzer: &TextAnalyzer,
    ) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (pos, doc) in documents.iter().enumerate() {
            validate_document(doc, ontology, "<memory>", pos + 1)?;
            if by_id.insert(doc.id.clone(), pos).is_some() {
                return Err(Error::DuplicateId {
                    path: "<memory>".into(),
                    line: pos + 1,
                    id: doc.id.clone(),
                });
            }
        }
        let stats = compute_stats(&documents, analyzer);
        Ok(Self {
            documents,
            by_id,
            stats,
        })
    }

    /// Load a line-delimited corpus file (one JSON record per line).
    pub fn load(
        path: &Path,
        ontology: Option<&MeshOntology>,
        analyzer: &TextAnalyzer,
    ) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let path_str = path.display().to_string();
        let mut documents = Vec::new();
        let mut by_id = BTreeMap::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path_str.clone(),
                line: lineno,
                msg: e.to_string(),
            })?;
            let date = NaiveDate::parse_from_str(&raw.date, "%Y-%m-%d").map_err(|_| {
                Error::Parse {
                    path: path_str.clone(),
                    line: lineno,
                    msg: format!("bad date {:?}, expected YYYY-MM-DD", raw.date),
                }
            })?;
            let doc = Document {
                id: raw.id,
                title: raw.title,
                abstract_text: raw.abstract_text,
                journal: raw.journal,
                date,
                mesh_major: raw.mesh_major.into_iter().collect(),
                supplementary: raw.supplementary.into_iter().collect(),
            };
            validate_document(&doc, ontology, &path_str, lineno)?;
            if by_id.insert(doc.id.clone(), documents.len()).is_some() {
                return Err(Error::DuplicateId {
                    path: path_str,
                    line: lineno,
                    id: doc.id,
                });
            }
            documents.push(doc);
        }
        let stats = compute_stats(&documents, analyzer);
        Ok(Self {
            documents,
            by_id,
            stats,
        })
    }

    /// Write the corpus back out in the one-record-per-line format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for doc in &self.documents {
            let raw = RawRecord {
                id: doc.id.clone(),
                title: doc.title.clone(),
                abstract_text: doc.abstract_text.clone(),
                journal: doc.journal.clone(),
                date: doc.date.format("%Y-%m-%d").to_string(),
                mesh_major: doc.mesh_major.iter().cloned().collect(),
                supplementary: doc.supplementary.iter().cloned().collect(),
            };
            out.push_str(&serde_json::to_string(&raw).expect("record serializes"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&pos| &self.documents[pos])
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    /// Distinct preprocessed terms, sorted.
    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.stats.doc_freq.keys().map(String::as_str)
    }

    /// Split chronologically: the documents are sorted by (date, id) and
    /// split `i` holds the first `floor(fraction_i * N)` of them, with
    /// statistics recomputed per split.
    pub fn chronological_split(
        &self,
        fractions: &[f64],
        analyzer: &TextAnalyzer,
    ) -> Result<Vec<CorpusStore>> {
        for pair in fractions.windows(2) {
            if pair[0] > pair[1] {
                return Err(Error::InvalidInput(format!(
                    "fractions must be sorted ascending, got {} after {}",
                    pair[1], pair[0]
                )));
            }
        }
        if let Some(bad) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::InvalidInput(format!(
                "fraction {bad} outside [0, 1]"
            )));
        }
        let mut sorted: Vec<&Document> = self.documents.iter().collect();
        sorted.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.id.cmp(&b.id)));
        let n = sorted.len();
        let mut splits = Vec::with_capacity(fractions.len());
        for &fraction in fractions {
            let take = (fraction * n as f64).floor() as usize;
            let docs: Vec<Document> = sorted[..take].iter().map(|d| (*d).clone()).collect();
            splits.push(CorpusStore::from_documents(docs, None, analyzer)?);
        }
        Ok(splits)
    }
}

fn validate_document(
    doc: &Document,
    ontology: Option<&MeshOntology>,
    path: &str,
    line: usize,
) -> Result<()> {
    if doc.id.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line,
            msg: "empty document id".into(),
        });
    }
    if doc.title.trim().is_empty() && doc.abstract_text.trim().is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line,
            msg: format!("document {:?} has empty title and abstract", doc.id),
        });
    }
    if let Some(overlap) = doc.mesh_major.intersection(&doc.supplementary).next() {
        return Err(Error::Parse {
            path: path.into(),
            line,
            msg: format!(
                "document {:?} lists {overlap:?} as both major and supplementary",
                doc.id
            ),
        });
    }
    if let Some(onto) = ontology {
        let unknown: Vec<String> = doc
            .mesh_major
            .iter()
            .chain(doc.supplementary.iter())
            .filter(|id| !onto.contains(id))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownLabels {
                doc_id: doc.id.clone(),
                ids: unknown,
            });
        }
    }
    Ok(())
}

fn compute_stats(documents: &[Document], analyzer: &TextAnalyzer) -> CorpusStats {
    let mut doc_freq: BTreeMap<String, u32> = BTreeMap::new();
    let mut term_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut total_len = 0usize;
    for doc in documents {
        let terms = analyzer.analyze(&format!("{} {}", doc.title, doc.abstract_text));
        total_len += terms.len();
        let mut seen = BTreeSet::new();
        for term in terms {
            *term_counts.entry(term.clone()).or_insert(0) += 1;
            if seen.insert(term.clone()) {
                *doc_freq.entry(term).or_insert(0) += 1;
            }
        }
    }
    let n_docs = documents.len();
    CorpusStats {
        n_docs,
        doc_freq,
        term_counts,
        mean_len: if n_docs == 0 {
            0.0
        } else {
            total_len as f64 / n_docs as f64
        },
    }
}

/// Word-embedding table: `word -> vector`, one shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            entries: BTreeMap::new(),
        }
    }

    /// Load the text format: optional `<count> <dim>` header, then
    /// `word v1 ... vd` per line. Words are lowercased.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let path_str = path.display().to_string();
        let mut dimension: Option<usize> = None;
        let mut entries = BTreeMap::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if lineno == 1 && fields.len() == 2 {
                if let (Ok(_count), Ok(dim)) =
                    (fields[0].parse::<usize>(), fields[1].parse::<usize>())
                {
                    dimension = Some(dim);
                    continue;
                }
            }
            let word = fields[0].to_lowercase();
            let mut vector = Vec::with_capacity(fields.len() - 1);
            for value in &fields[1..] {
                let v: f64 = value.parse().map_err(|_| Error::Parse {
                    path: path_str.clone(),
                    line: lineno,
                    msg: format!("non-numeric component {value:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        path: path_str.clone(),
                        line: lineno,
                        msg: format!("non-finite component {value:?}"),
                    });
                }
                vector.push(v);
            }
            match dimension {
                None => dimension = Some(vector.len()),
                Some(dim) if dim != vector.len() => {
                    return Err(Error::Parse {
                        path: path_str,
                        line: lineno,
                        msg: format!("dimension mismatch: expected {dim}, found {}", vector.len()),
                    })
                }
                Some(_) => {}
            }
            if entries.insert(word.clone(), vector).is_some() {
                return Err(Error::Parse {
                    path: path_str,
                    line: lineno,
                    msg: format!("duplicate word {word:?}"),
                });
            }
        }
        Ok(Self {
            dimension: dimension.unwrap_or(0),
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("{} {}\n", self.entries.len(), self.dimension);
        for (word, vector) in &self.entries {
            out.push_str(word);
            for v in vector {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Seeded random table over `words`, uniform in [-0.5, 0.5] scaled by
    /// 1/dim, the usual fallback when no pretrained table is supplied.
    pub fn random(words: impl IntoIterator<Item = String>, dim: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let mut entries = BTreeMap::new();
        for word in words {
            let vector: Vec<f64> = (0..dim)
                .map(|_| (rng.gen::<f64>() - 0.5) / dim as f64)
                .collect();
            entries.insert(word.to_lowercase(), vector);
        }
        Self {
            dimension: dim,
            entries,
        }
    }

    pub fn insert(&mut self, word: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dimension {
            return Err(Error::ShapeMismatch(format!(
                "embedding for {word:?} has length {}, table dimension is {}",
                vector.len(),
                self.dimension
            )));
        }
        self.entries.insert(word.to_lowercase(), vector);
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.entries.get(word).map(Vec::as_slice)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn corpus_from_docs(docs: Vec<Document>, analyzer: &TextAnalyzer) -> CorpusStore {
        CorpusStore::from_documents(docs, None, analyzer).unwrap()
    }

    fn record(id: &str, date: &str, title: &str, abstract_text: &str, labels: &[&str]) -> String {
        serde_json::json!({
            "id": id,
            "title": title,
            "abstract": abstract_text,
            "date": date,
            "mesh_major": labels,
            "supplementary": [],
        })
        .to_string()
    }

    fn write_corpus(lines: &[String]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        (dir, path)
    }

    #[test]
    fn load_three_line_fixture_counts_terms() {
        let lines = vec![
            record("p1", "2020-01-01", "spike protein", "viral entry", &[]),
            record("p2", "2020-01-02", "spike binding", "receptor", &[]),
            record("p3", "2020-01-03", "immune response", "antibody", &[]),
        ];
        let (_dir, path) = write_corpus(&lines);
        let corpus = CorpusStore::load(&path, None, &TextAnalyzer::default()).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.stats().n_docs, 3);
        // "spike" appears in p1 and p2; "viral" only in p1.
        assert_eq!(corpus.stats().doc_freq["spike"], 2);
        assert_eq!(corpus.stats().doc_freq["viral"], 1);
        assert_eq!(corpus.get("p2").unwrap().title, "spike binding");
    }

    #[test]
    fn empty_file_gives_empty_store() {
        let (_dir, path) = write_corpus(&[]);
        let corpus = CorpusStore::load(&path, None, &TextAnalyzer::default()).unwrap();
        assert_eq!(corpus.len(), 0);
        assert!(corpus.stats().doc_freq.is_empty());
        assert_eq!(corpus.stats().mean_len, 0.0);
    }

    #[test]
    fn duplicate_id_error_names_id_and_line() {
        let lines = vec![
            record("p1", "2020-01-01", "one", "a", &[]),
            record("p2", "2020-01-02", "two", "b", &[]),
            record("p3", "2020-01-03", "three", "c", &[]),
            record("p1", "2020-01-04", "again", "d", &[]),
        ];
        let (_dir, path) = write_corpus(&lines);
        let err = CorpusStore::load(&path, None, &TextAnalyzer::default()).unwrap_err();
        match err {
            Error::DuplicateId { id, line, .. } => {
                assert_eq!(id, "p1");
                assert_eq!(line, 4);
            }
            other => panic!("expected duplicate id error, got {other}"),
        }
    }

    #[test]
    fn malformed_line_error_carries_line_number() {
        let lines = vec![
            record("p1", "2020-01-01", "one", "a", &[]),
            "{not json".to_string(),
        ];
        let (_dir, path) = write_corpus(&lines);
        let err = CorpusStore::load(&path, None, &TextAnalyzer::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn unknown_labels_are_rejected_when_ontology_given() {
        let dir = tempfile::tempdir().unwrap();
        let onto_path = dir.path().join("onto.tsv");
        std::fs::write(&onto_path, "#nodes\nm1\tmajor\tM1\n#edges\n").unwrap();
        let onto = MeshOntology::load(&onto_path).unwrap();
        let lines = vec![record("p1", "2020-01-01", "one", "a", &["m1", "mX", "mY"])];
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = CorpusStore::load(&path, Some(&onto), &TextAnalyzer::default()).unwrap_err();
        match err {
            Error::UnknownLabels { doc_id, ids } => {
                assert_eq!(doc_id, "p1");
                assert_eq!(ids, vec!["mX".to_string(), "mY".to_string()]);
            }
            other => panic!("expected unknown label error, got {other}"),
        }
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let analyzer = TextAnalyzer::default();
        let docs: Vec<Document> = (0..10)
            .map(|i| Document {
                id: format!("d{i:02}"),
                title: format!("title {i}"),
                abstract_text: "body".into(),
                journal: None,
                date: NaiveDate::from_ymd_opt(2020, 1, 1 + i).unwrap(),
                mesh_major: BTreeSet::new(),
                supplementary: BTreeSet::new(),
            })
            .collect();
        let corpus = corpus_from_docs(docs, &analyzer);
        let splits = corpus
            .chronological_split(&[0.0, 0.5, 1.0], &analyzer)
            .unwrap();
        let sizes: Vec<usize> = splits.iter().map(CorpusStore::len).collect();
        assert_eq!(sizes, vec![0, 5, 10]);
    }

    #[test]
    fn split_sizes_match_published_protocol() {
        let analyzer = TextAnalyzer::default();
        let base = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap();
        let docs: Vec<Document> = (0..10210)
            .map(|i| Document {
                id: format!("d{i:05}"),
                title: "t".into(),
                abstract_text: "b".into(),
                journal: None,
                date: base + chrono::Days::new(i as u64 % 700),
                mesh_major: BTreeSet::new(),
                supplementary: BTreeSet::new(),
            })
            .collect();
        let corpus = corpus_from_docs(docs, &analyzer);
        let splits = corpus
            .chronological_split(&[0.0, 0.05, 0.1, 0.2, 0.5, 1.0], &analyzer)
            .unwrap();
        let sizes: Vec<usize> = splits.iter().map(CorpusStore::len).collect();
        assert_eq!(sizes, vec![0, 510, 1021, 2042, 5105, 10210]);
    }

    #[test]
    fn split_ties_break_by_id() {
        let analyzer = TextAnalyzer::default();
        let date = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        let docs = vec![
            Document {
                id: "b".into(),
                title: "doc b".into(),
                abstract_text: "x".into(),
                journal: None,
                date,
                mesh_major: BTreeSet::new(),
                supplementary: BTreeSet::new(),
            },
            Document {
                id: "a".into(),
                title: "doc a".into(),
                abstract_text: "y".into(),
                journal: None,
                date,
                mesh_major: BTreeSet::new(),
                supplementary: BTreeSet::new(),
            },
        ];
        let corpus = corpus_from_docs(docs, &analyzer);
        let splits = corpus.chronological_split(&[0.5], &analyzer).unwrap();
        assert_eq!(splits[0].len(), 1);
        assert!(splits[0].get("a").is_some());
    }

    #[test]
    fn unsorted_or_out_of_range_fractions_are_rejected() {
        let analyzer = TextAnalyzer::default();
        let corpus = corpus_from_docs(vec![], &analyzer);
        assert!(corpus.chronological_split(&[0.5, 0.2], &analyzer).is_err());
        assert!(corpus.chronological_split(&[-0.1], &analyzer).is_err());
        assert!(corpus.chronological_split(&[1.5], &analyzer).is_err());
    }

    #[test]
    fn corpus_roundtrip_is_identity() {
        let lines = vec![
            record("p1", "2020-01-01", "spike protein", "viral entry", &["m1"]),
            record("p2", "2020-02-01", "immune response", "antibody", &[]),
        ];
        let (_dir, path) = write_corpus(&lines);
        let analyzer = TextAnalyzer::default();
        let corpus = CorpusStore::load(&path, None, &analyzer).unwrap();
        let out = path.with_extension("copy.jsonl");
        corpus.save(&out).unwrap();
        let reloaded = CorpusStore::load(&out, None, &analyzer).unwrap();
        assert_eq!(corpus.documents(), reloaded.documents());
        assert_eq!(corpus.stats(), reloaded.stats());
    }

    #[test]
    fn embeddings_load_basic_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "alpha 1 2 3 4\nBETA 0.5 -0.5 0 1\n").unwrap();
        let table = EmbeddingTable::load(&path).unwrap();
        assert_eq!(table.dimension(), 4);
        assert_eq!(table.len(), 2);
        assert_eq!(table.get("beta"), Some(&[0.5, -0.5, 0.0, 1.0][..]));

        std::fs::write(&path, "alpha 1 2 3 4\nbeta 1 2 3\n").unwrap();
        let err = EmbeddingTable::load(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));

        std::fs::write(&path, "2 4\nalpha 1 2 3 4\nbeta 4 3 2 1\n").unwrap();
        let table = EmbeddingTable::load(&path).unwrap();
        assert_eq!(table.dimension(), 4);
        assert_eq!(table.len(), 2);

        std::fs::write(&path, "alpha 1 x 3 4\n").unwrap();
        assert!(EmbeddingTable::load(&path).is_err());
    }

    #[test]
    fn random_table_is_seed_deterministic() {
        let words = || ["alpha".to_string(), "beta".to_string()];
        let a = EmbeddingTable::random(words(), 256, 7);
        let b = EmbeddingTable::random(words(), 256, 7);
        assert_eq!(a, b);
        assert_eq!(a.dimension(), 256);
        let c = EmbeddingTable::random(words(), 256, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn nested_fractions_give_nested_prefixes() {
        let analyzer = TextAnalyzer::default();
        let docs: Vec<Document> = (0..17)
            .map(|i| Document {
                id: format!("d{i:02}"),
                title: format!("w{i}"),
                abstract_text: "z".into(),
                journal: None,
                date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(i),
                mesh_major: BTreeSet::new(),
                supplementary: BTreeSet::new(),
            })
            .collect();
        let corpus = corpus_from_docs(docs, &analyzer);
        let splits = corpus
            .chronological_split(&[0.2, 0.5, 1.0], &analyzer)
            .unwrap();
        for w in splits.windows(2) {
            let small: BTreeSet<&str> = w[0].documents().iter().map(|d| d.id.as_str()).collect();
            let large: BTreeSet<&str> = w[1].documents().iter().map(|d| d.id.as_str()).collect();
            assert!(small.is_subset(&large));
        }
        assert_eq!(splits[2].len(), corpus.len());
    }
}
