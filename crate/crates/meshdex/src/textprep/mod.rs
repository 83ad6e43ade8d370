//! Text preprocessing: tokenization, stemming, stopword removal, vocabulary
//! construction and the mapping of documents to token-id sequences.

mod porter;

pub use porter::stem;

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::corpus::{CorpusStore, Document};
use crate::error::{Error, Result};

/// Reserved token ids. `PAD` and `MASK` are never produced by corpus text;
/// `UNK` stands in for out-of-vocabulary tokens.
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const RESERVED: [(&str, u32); 3] = [("<PAD>", PAD_ID), ("<UNK>", UNK_ID), ("<MASK>", MASK_ID)];

/// Lowercase and split on any non-alphanumeric character, dropping empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|piece| !piece.is_empty())
        .map(str::to_string)
        .collect()
}

/// Tokenizer + stopword filter + stemmer, applied in that order. The
/// stopword test runs on the raw lowercase token, before stemming.
#[derive(Debug, Clone, Default)]
pub struct TextAnalyzer {
    stopwords: BTreeSet<String>,
}

impl TextAnalyzer {
    pub fn new(stopwords: BTreeSet<String>) -> Self {
        Self { stopwords }
    }

    /// Load a stopword list: one token per line, `#` starts a comment.
    pub fn from_stopword_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut stopwords = BTreeSet::new();
        for line in text.lines() {
            let word = line.split('#').next().unwrap_or("").trim();
            if !word.is_empty() {
                stopwords.insert(word.to_lowercase());
            }
        }
        Ok(Self { stopwords })
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    /// Full analysis chain for a piece of text: stemmed non-stopword tokens.
    pub fn analyze(&self, text: &str) -> Vec<String> {
        tokenize(text)
            .into_iter()
            .filter(|t| !self.is_stopword(t))
            .map(|t| stem(&t))
            .collect()
    }
}

/// Token-string to token-id map with the three reserved entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: BTreeMap<String, u32>,
    terms: Vec<String>,
}

impl Vocabulary {
    /// Build a vocabulary from an ordered list of non-reserved terms.
    pub fn from_terms<I: IntoIterator<Item = String>>(terms: I) -> Self {
        let mut ids = BTreeMap::new();
        let mut all = Vec::new();
        for (term, id) in RESERVED {
            ids.insert(term.to_string(), id);
            all.push(term.to_string());
        }
        for term in terms {
            let id = all.len() as u32;
            if ids.insert(term.clone(), id).is_none() {
                all.push(term);
            }
        }
        Self { ids, terms: all }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries are always present
    }

    pub fn id(&self, term: &str) -> Option<u32> {
        self.ids.get(term).copied()
    }

    /// Token id for a term, falling back to `UNK`.
    pub fn id_or_unk(&self, term: &str) -> u32 {
        self.id(term).unwrap_or(UNK_ID)
    }

    pub fn term(&self, id: u32) -> Option<&str> {
        self.terms.get(id as usize).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, term) in self.terms.iter().enumerate() {
            out.push_str(term);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let (term, id) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "expected token<TAB>id".into(),
            })?;
            let id: u32 = id.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("bad id {id:?}"),
            })?;
            entries.push((id, term.to_string()));
        }
        entries.sort();
        for (expect, (id, term)) in entries.iter().enumerate() {
            if *id as usize != expect {
                return Err(Error::InvalidInput(format!(
                    "vocabulary ids not contiguous at {term:?} (id {id})"
                )));
            }
        }
        for (i, (term, expect_id)) in RESERVED.iter().enumerate() {
            if entries.get(i).map(|(_, t)| t.as_str()) != Some(*term) {
                return Err(Error::InvalidInput(format!(
                    "vocabulary missing reserved entry {term}={expect_id}"
                )));
            }
        }
        let terms: Vec<String> = entries.into_iter().map(|(_, t)| t).collect();
        let ids = terms
            .iter()
            .enumerate()
            .map(|(id, t)| (t.clone(), id as u32))
            .collect();
        Ok(Self { ids, terms })
    }
}

/// Preprocessed document: stemmed stopword-free terms and their token ids,
/// in original text order, truncated to the configured maximum length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub doc_id: String,
    /// Stemmed token strings (kept for retrieval-side term weighting).
    pub terms: Vec<String>,
    /// Token ids aligned with `terms`; out-of-vocabulary terms map to `UNK`.
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Map a document to its token sequence. Stopwords are filtered on the raw
/// lowercase tokens, stems are mapped through `vocab` (UNK for unknown), and
/// the result is truncated to `max_len` tokens.
pub fn preprocess_document(
    doc: &Document,
    vocab: &Vocabulary,
    analyzer: &TextAnalyzer,
    max_len: usize,
) -> Result<TokenSequence> {
    let text = format!("{} {}", doc.title, doc.abstract_text);
    let mut terms = analyzer.analyze(&text);
    terms.truncate(max_len);
    if terms.is_empty() {
        return Err(Error::EmptyDocument { id: doc.id.clone() });
    }
    let ids = terms.iter().map(|t| vocab.id_or_unk(t)).collect();
    Ok(TokenSequence {
        doc_id: doc.id.clone(),
        terms,
        ids,
    })
}

/// Build a vocabulary from the `max_size - 3` most frequent corpus terms
/// (total occurrence count, ties broken lexicographically).
pub fn build_vocabulary(corpus: &CorpusStore, max_size: usize) -> Result<Vocabulary> {
    if max_size <= RESERVED.len() {
        return Err(Error::InvalidInput(format!(
            "vocabulary size {max_size} leaves no room for reserved ids"
        )));
    }
    let mut by_count: Vec<(&String, u64)> = corpus
        .stats()
        .term_counts
        .iter()
        .map(|(t, &c)| (t, c))
        .collect();
    by_count.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocabulary::from_terms(
        by_count
            .into_iter()
            .take(max_size - RESERVED.len())
            .map(|(t, _)| t.clone()),
    ))
}
