//! Seeded synthetic benchmark: latent topics drive both the vocabulary and
//! the gold index assignments, so retrieval and the classifier have real
//! signal to find. Used by the end-to-end test suites and the examples.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::corpus::{Document, EdgeKind, EmbeddingTable, MeshOntology, NodeKind, OntologyNode};

#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub n_topics: usize,
    pub words_per_topic: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_ssl: usize,
    /// Supplementary concepts mapped onto the first majors; 0 disables them.
    pub n_supplementary: usize,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_topics: 20,
            words_per_topic: 5,
            n_train: 200,
            n_test: 50,
            n_ssl: 300,
            n_supplementary: 3,
            embedding_dim: 24,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub ontology: MeshOntology,
    pub train: Vec<Document>,
    pub test: Vec<Document>,
    pub ssl: Vec<Document>,
    pub embeddings: EmbeddingTable,
    pub stopwords: BTreeSet<String>,
}

const STOPWORDS: [&str; 4] = ["the", "of", "and", "with"];
const IN_TOPIC_WEIGHTS: [f64; 5] = [0.40, 0.30, 0.15, 0.10, 0.05];

pub fn major_id(topic: usize) -> String {
    format!("M{:02}", topic + 1)
}

pub fn supplementary_id(k: usize) -> String {
    format!("S{:02}", k + 1)
}

fn word(spec: &SyntheticSpec, topic: usize, j: usize) -> String {
    format!("w{:03}", topic * spec.words_per_topic + j)
}

fn build_ontology(spec: &SyntheticSpec) -> MeshOntology {
    let mut nodes: BTreeMap<String, OntologyNode> = BTreeMap::new();
    let mut edges = Vec::new();
    let n_roots = 4.min(spec.n_topics.max(1));
    for r in 0..n_roots {
        nodes.insert(
            format!("R{:02}", r + 1),
            OntologyNode {
                kind: NodeKind::Major,
                name: format!("topic group {}", r + 1),
            },
        );
    }
    for t in 0..spec.n_topics {
        let id = major_id(t);
        nodes.insert(
            id.clone(),
            OntologyNode {
                kind: NodeKind::Major,
                name: format!("topic {}", t + 1),
            },
        );
        let root = format!("R{:02}", (t % n_roots) + 1);
        edges.push((id, root, EdgeKind::Hierarchy));
    }
    for k in 0..spec.n_supplementary.min(spec.n_topics) {
        let id = supplementary_id(k);
        nodes.insert(
            id.clone(),
            OntologyNode {
                kind: NodeKind::Supplementary,
                name: format!("fine-grained concept {}", k + 1),
            },
        );
        edges.push((id, major_id(k), EdgeKind::Mapping));
    }
    MeshOntology::new(nodes, edges).expect("synthetic ontology is valid")
}

fn pick_word(spec: &SyntheticSpec, rng: &mut ChaCha20Rng, topics: &[usize]) -> String {
    let u: f64 = rng.gen();
    if u < 0.06 {
        return STOPWORDS[rng.gen_range(0..STOPWORDS.len())].to_string();
    }
    if u < 0.97 {
        let topic = topics[rng.gen_range(0..topics.len())];
        let mut v: f64 = rng.gen();
        for (j, w) in IN_TOPIC_WEIGHTS[..spec.words_per_topic.min(5)].iter().enumerate() {
            if v < *w {
                return word(spec, topic, j);
            }
            v -= w;
        }
        return word(spec, topic, spec.words_per_topic - 1);
    }
    let t = rng.gen_range(0..spec.n_topics);
    let j = rng.gen_range(0..spec.words_per_topic);
    word(spec, t, j)
}

fn make_doc(
    spec: &SyntheticSpec,
    rng: &mut ChaCha20Rng,
    id: String,
    date: NaiveDate,
    labeled: bool,
) -> Document {
    let n_topics = if rng.gen::<f64>() < 0.65 { 1 } else { 2 };
    let mut topics = Vec::with_capacity(n_topics);
    while topics.len() < n_topics {
        let t = rng.gen_range(0..spec.n_topics);
        if !topics.contains(&t) {
            topics.push(t);
        }
    }
    topics.sort_unstable();

    let title: Vec<String> = (0..4).map(|_| pick_word(spec, rng, &topics)).collect();
    let body_len = rng.gen_range(20..=32);
    let body: Vec<String> = (0..body_len).map(|_| pick_word(spec, rng, &topics)).collect();

    let mut mesh_major = BTreeSet::new();
    let mut supplementary = BTreeSet::new();
    if labeled {
        for &t in &topics {
            mesh_major.insert(major_id(t));
            if t < spec.n_supplementary && rng.gen::<f64>() < 0.9 {
                supplementary.insert(supplementary_id(t));
            }
        }
    } else {
        // the label draw still advances the rng so corpora stay aligned
        for &t in &topics {
            if t < spec.n_supplementary {
                let _: f64 = rng.gen();
            }
        }
    }

    Document {
        id,
        title: title.join(" "),
        abstract_text: body.join(" "),
        journal: None,
        date,
        mesh_major,
        supplementary,
    }
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticData {
    let ontology = build_ontology(spec);

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let train_base = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    let train: Vec<Document> = (0..spec.n_train)
        .map(|i| {
            make_doc(
                spec,
                &mut rng,
                format!("train{i:04}"),
                train_base + chrono::Days::new(i as u64),
                true,
            )
        })
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed.wrapping_add(0x7e57));
    let test_base = NaiveDate::from_ymd_opt(2020, 9, 1).unwrap();
    let test: Vec<Document> = (0..spec.n_test)
        .map(|i| {
            make_doc(
                spec,
                &mut rng,
                format!("test{i:04}"),
                test_base + chrono::Days::new(i as u64),
                true,
            )
        })
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed.wrapping_add(0x551));
    let ssl_base = NaiveDate::from_ymd_opt(2019, 6, 1).unwrap();
    let ssl: Vec<Document> = (0..spec.n_ssl)
        .map(|i| {
            make_doc(
                spec,
                &mut rng,
                format!("ssl{i:04}"),
                ssl_base + chrono::Days::new(i as u64),
                false,
            )
        })
        .collect();

    // word embeddings: a topic-indicator direction plus small noise, so
    // same-topic documents are cosine neighbors
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed.wrapping_add(0xe3b));
    let dim = spec.embedding_dim.max(spec.n_topics);
    let mut embeddings = EmbeddingTable::new(dim);
    for t in 0..spec.n_topics {
        for j in 0..spec.words_per_topic {
            let mut v = vec![0.0; dim];
            v[t] = 1.0;
            for x in v.iter_mut() {
                *x += (rng.gen::<f64>() - 0.5) * 0.16;
            }
            embeddings.insert(&word(spec, t, j), v).expect("dim fixed");
        }
    }
    for sw in STOPWORDS {
        let v: Vec<f64> = (0..dim).map(|_| (rng.gen::<f64>() - 0.5) * 0.16).collect();
        embeddings.insert(sw, v).expect("dim fixed");
    }

    SyntheticData {
        ontology,
        train,
        test,
        ssl,
        embeddings,
        stopwords: STOPWORDS.iter().map(|s| s.to_string()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textprep::TextAnalyzer;

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.ssl, b.ssl);
        assert_eq!(a.embeddings, b.embeddings);
    }

    #[test]
    fn corpus_sizes_and_labels() {
        let spec = SyntheticSpec::default();
        let data = generate(&spec);
        assert_eq!(data.train.len(), 200);
        assert_eq!(data.test.len(), 50);
        assert_eq!(data.ssl.len(), 300);
        assert!(data.train.iter().all(|d| !d.mesh_major.is_empty()));
        assert!(data.ssl.iter().all(|d| d.mesh_major.is_empty()));
        assert_eq!(data.ontology.major_ids().count(), 24); // 20 topics + 4 roots
        assert_eq!(data.ontology.supplementary_ids().count(), 3);

        // labels resolve against the ontology and corpora validate
        let analyzer = TextAnalyzer::new(data.stopwords.clone());
        crate::corpus::CorpusStore::from_documents(
            data.train.clone(),
            Some(&data.ontology),
            &analyzer,
        )
        .unwrap();
    }

    #[test]
    fn topic_words_dominate_documents() {
        let spec = SyntheticSpec::default();
        let data = generate(&spec);
        let doc = &data.train[0];
        let topics: Vec<usize> = doc
            .mesh_major
            .iter()
            .map(|m| m[1..].parse::<usize>().unwrap() - 1)
            .collect();
        let text = format!("{} {}", doc.title, doc.abstract_text);
        let topical = text
            .split_whitespace()
            .filter(|w| {
                w.starts_with('w')
                    && topics.contains(&(w[1..].parse::<usize>().unwrap() / spec.words_per_topic))
            })
            .count();
        let total = text.split_whitespace().count();
        assert!(
            topical * 2 > total,
            "topic words should dominate: {topical}/{total}"
        );
    }
}
