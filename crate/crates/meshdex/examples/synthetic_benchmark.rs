//! End-to-end run on the seeded synthetic benchmark: retrieval, MLM
//! pretraining, fine-tuning from the pretrained checkpoint and from
//! scratch, threshold fitting and evaluation.
//!
//!     cargo run --release --example synthetic_benchmark [seed]

use std::collections::{BTreeMap, BTreeSet};

use meshdex::corpus::{CorpusStore, EmbeddingTable};
use meshdex::metrics;
use meshdex::retrieval::{
    build_index, candidate_recall, doc_query_vector, nearest_neighbors, select_candidates,
    CandidateSet, DocIndex, TermWeighting,
};
use meshdex::synthetic::{generate, SyntheticSpec};
use meshdex::textprep::{build_vocabulary, preprocess_document, TextAnalyzer, Vocabulary};
use meshdex::thresholds::{apply_thresholds, fit_thresholds, ScoredDoc, ThresholdTable};
use meshdex::training::{finetune, pretrain, FinetuneDoc, PretrainDoc, TrainConfig};
use meshdex::transformer::{forward_index, LabelSpace, ModelConfig, ModelParams};

const K: usize = 25;
const M: usize = 10;
const MAX_LEN: usize = 64;

struct Bench {
    analyzer: TextAnalyzer,
    vocab: Vocabulary,
    space: LabelSpace,
    emb: EmbeddingTable,
    train: CorpusStore,
    test: CorpusStore,
    ssl: CorpusStore,
    model: ModelConfig,
}

fn setup(seed: u64) -> Bench {
    let spec = SyntheticSpec {
        seed,
        n_supplementary: 0,
        ..SyntheticSpec::default()
    };
    let data = generate(&spec);
    let analyzer = TextAnalyzer::new(data.stopwords.clone());
    let train = CorpusStore::from_documents(data.train, Some(&data.ontology), &analyzer).unwrap();
    let test = CorpusStore::from_documents(data.test, Some(&data.ontology), &analyzer).unwrap();
    let ssl = CorpusStore::from_documents(data.ssl, None, &analyzer).unwrap();
    let vocab = build_vocabulary(&train, 90_000).unwrap();
    let space = LabelSpace::from_ontology(&data.ontology);
    Bench {
        analyzer,
        vocab,
        space,
        emb: data.embeddings,
        train,
        test,
        ssl,
        model: ModelConfig {
            d_model: 24,
            n_layers: 1,
            d_ff: 96,
            n_heads: 4,
            max_sequence_length: MAX_LEN,
            dropout: 0.0,
        },
    }
}

fn candidates_for(
    bench: &Bench,
    corpus: &CorpusStore,
    index: &DocIndex,
    weighting: &TermWeighting,
    training_mode: bool,
) -> BTreeMap<String, CandidateSet> {
    let mut out = BTreeMap::new();
    for doc in corpus.documents() {
        let seq = preprocess_document(doc, &bench.vocab, &bench.analyzer, MAX_LEN).unwrap();
        let query = doc_query_vector(&seq, &bench.emb, weighting).unwrap();
        let exclude = training_mode.then_some(doc.id.as_str());
        let neighbors = nearest_neighbors(&query, index, K, exclude).unwrap();
        let gold = training_mode.then_some(&doc.mesh_major);
        let cands = select_candidates(&doc.id, &neighbors, index, M, gold).unwrap();
        out.insert(doc.id.clone(), cands);
    }
    out
}

fn chronological(corpus: &CorpusStore) -> Vec<usize> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&corpus.documents()[a], &corpus.documents()[b]);
        da.date.cmp(&db.date).then_with(|| da.id.cmp(&db.id))
    });
    order
}

fn score_docs(
    bench: &Bench,
    corpus: &CorpusStore,
    cands: &BTreeMap<String, CandidateSet>,
    params: &ModelParams,
) -> Vec<ScoredDoc> {
    corpus
        .documents()
        .iter()
        .map(|doc| {
            let seq = preprocess_document(doc, &bench.vocab, &bench.analyzer, MAX_LEN).unwrap();
            let candidates = &cands[&doc.id];
            let scores = forward_index(&seq, candidates, params, &bench.space).unwrap();
            ScoredDoc {
                doc_id: doc.id.clone(),
                scores: candidates.ids().into_iter().zip(scores).collect(),
            }
        })
        .collect()
}

fn golds_of(corpus: &CorpusStore) -> BTreeMap<String, BTreeSet<String>> {
    corpus
        .documents()
        .iter()
        .map(|d| (d.id.clone(), d.gold_labels(false)))
        .collect()
}

fn mif_of(
    scored: &[ScoredDoc],
    golds: &BTreeMap<String, BTreeSet<String>>,
    table: &ThresholdTable,
) -> f64 {
    let preds = apply_thresholds(scored, table);
    metrics::flat_metrics(&preds, golds).unwrap().mif
}

fn run_pretrain(bench: &Bench, cands: &BTreeMap<String, CandidateSet>, seed: u64) -> ModelParams {
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 8,
        max_epochs: 30,
        patience: 10,
        seed,
        ..TrainConfig::default()
    };
    let docs: Vec<PretrainDoc> = chronological(&bench.ssl)
        .into_iter()
        .map(|i| {
            let doc = &bench.ssl.documents()[i];
            PretrainDoc {
                seq: preprocess_document(doc, &bench.vocab, &bench.analyzer, MAX_LEN).unwrap(),
                candidates: cands[&doc.id].clone(),
            }
        })
        .collect();
    let n_val = docs.len() / 10;
    let at = docs.len() - n_val;
    let init = ModelParams::init(bench.model, bench.vocab.len(), bench.space.len(), seed).unwrap();
    let (params, report) = pretrain(&docs[..at], &docs[at..], init, &bench.space, &cfg).unwrap();
    println!(
        "  pretrain: {} epochs, final train MLM loss {:.3} (uniform baseline ln|V| = {:.3})",
        report.stopped_epoch,
        report.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN),
        (bench.vocab.len() as f64).ln()
    );
    params
}

fn run_arm(
    bench: &Bench,
    init: ModelParams,
    train_cands: &BTreeMap<String, CandidateSet>,
    test_cands: &BTreeMap<String, CandidateSet>,
    seed: u64,
) -> (f64, f64) {
    let cfg = TrainConfig {
        learning_rate: 2e-3,
        batch_size: 16,
        max_epochs: 60,
        patience: 15,
        seed,
        ..TrainConfig::default()
    };
    let docs: Vec<FinetuneDoc> = chronological(&bench.train)
        .into_iter()
        .map(|i| {
            let doc = &bench.train.documents()[i];
            FinetuneDoc {
                seq: preprocess_document(doc, &bench.vocab, &bench.analyzer, MAX_LEN).unwrap(),
                candidates: train_cands[&doc.id].clone(),
                gold: doc.gold_labels(false),
            }
        })
        .collect();
    let n_val = docs.len() / 10;
    let at = docs.len() - n_val;
    let (params, _) = finetune(&docs[..at], &docs[at..], init, &bench.space, &cfg).unwrap();

    let train_scored = score_docs(bench, &bench.train, train_cands, &params);
    let train_golds = golds_of(&bench.train);
    let fit = fit_thresholds(&train_scored, &train_golds).unwrap();
    let train_mif = mif_of(&train_scored, &train_golds, &fit.table);

    let test_scored = score_docs(bench, &bench.test, test_cands, &params);
    let test_golds = golds_of(&bench.test);
    let test_mif = mif_of(&test_scored, &test_golds, &fit.table);
    (train_mif, test_mif)
}

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(7);
    println!("synthetic benchmark, seed {seed}");
    let bench = setup(seed);

    let weighting = TermWeighting::tfidf(bench.train.stats().clone());
    let seqs: Vec<_> = bench
        .train
        .documents()
        .iter()
        .map(|d| preprocess_document(d, &bench.vocab, &bench.analyzer, MAX_LEN).unwrap())
        .collect();
    let index = build_index(&bench.train, &seqs, &bench.emb, &weighting).unwrap();

    let train_cands = candidates_for(&bench, &bench.train, &index, &weighting, true);
    let test_cands = candidates_for(&bench, &bench.test, &index, &weighting, false);
    let ssl_cands = candidates_for(&bench, &bench.ssl, &index, &weighting, false);

    let recall = candidate_recall(
        &test_cands.values().cloned().collect::<Vec<_>>(),
        &golds_of(&bench.test),
    );
    println!("  test candidate recall at m={M}: {recall:.4}");

    let pretrained = run_pretrain(&bench, &ssl_cands, seed);
    let (train_mif, test_mif) = run_arm(&bench, pretrained, &train_cands, &test_cands, seed);
    println!("  pretrained start: train MiF {train_mif:.4}  test MiF {test_mif:.4}");

    let scratch =
        ModelParams::init(bench.model, bench.vocab.len(), bench.space.len(), seed).unwrap();
    let (train_mif, test_mif) = run_arm(&bench, scratch, &train_cands, &test_cands, seed);
    println!("  from scratch:     train MiF {train_mif:.4}  test MiF {test_mif:.4}");
}
