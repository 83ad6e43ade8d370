//! Shared driver for the synthetic end-to-end criteria: corpus generation,
//! retrieval artifacts, pretraining and the two fine-tuning arms, plus the
//! file-based pipeline runs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use meshdex::corpus::{CorpusStore, EmbeddingTable, MeshOntology};
use meshdex::metrics::flat_metrics;
use meshdex::pipeline::{self, Command, Overrides, PipelineConfig};
use meshdex::retrieval::{
    build_index, doc_query_vector, nearest_neighbors, select_candidates, CandidateSet, DocIndex,
    TermWeighting,
};
use meshdex::synthetic::{generate, SyntheticSpec};
use meshdex::textprep::{build_vocabulary, preprocess_document, TextAnalyzer, Vocabulary};
use meshdex::thresholds::{apply_thresholds, fit_thresholds, ScoredDoc};
use meshdex::training::{finetune, pretrain, FinetuneDoc, PretrainDoc, TrainConfig};
use meshdex::transformer::{forward_index, LabelSpace, ModelConfig, ModelParams};

pub const K: usize = 25;
pub const M: usize = 10;
pub const MAX_LEN: usize = 64;

pub fn model_config() -> ModelConfig {
    ModelConfig {
        d_model: 24,
        n_layers: 1,
        d_ff: 96,
        n_heads: 4,
        max_sequence_length: MAX_LEN,
        dropout: 0.0,
    }
}

pub fn pretrain_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 8,
        max_epochs: 30,
        patience: 10,
        mask_rate: 0.15,
        seed,
        ..TrainConfig::default()
    }
}

/// Limited identical budget for the pretrained-vs-scratch comparison.
pub fn limited_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        max_epochs: 20,
        patience: 20,
        seed,
        ..TrainConfig::default()
    }
}

/// Full training budget used for the absolute-quality criterion.
pub fn full_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        batch_size: 16,
        max_epochs: 60,
        patience: 15,
        seed,
        ..TrainConfig::default()
    }
}

/// Budget for the per-fraction runs of the efficiency curve; without a
/// validation split every fraction trains for the whole budget.
pub fn curve_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        max_epochs: 40,
        patience: 40,
        seed,
        ..TrainConfig::default()
    }
}

/// Budget for the joint-vs-majors comparison.
pub fn joint_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        batch_size: 16,
        max_epochs: 60,
        patience: 15,
        seed,
        ..TrainConfig::default()
    }
}

pub struct Bench {
    analyzer: TextAnalyzer,
    ontology: MeshOntology,
    vocab: Vocabulary,
    space: LabelSpace,
    train: CorpusStore,
    test: CorpusStore,
    ssl: CorpusStore,
    weighting: TermWeighting,
    train_cands: BTreeMap<String, CandidateSet>,
    test_cands: BTreeMap<String, CandidateSet>,
    ssl_cands: BTreeMap<String, CandidateSet>,
}

pub struct PretrainOutcome {
    pub params: ModelParams,
    pub final_train_loss: f64,
}

impl Clone for PretrainOutcome {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            final_train_loss: self.final_train_loss,
        }
    }
}

pub struct ArmResult {
    pub train_mif: f64,
    pub test_mif: f64,
    /// Test MiF restricted to major headings (equals `test_mif` when the
    /// arm trains on majors only).
    pub major_test_mif: f64,
}

impl Bench {
    pub fn setup(seed: u64, n_supplementary: usize) -> Self {
        let spec = SyntheticSpec {
            seed,
            n_supplementary,
            ..SyntheticSpec::default()
        };
        let data = generate(&spec);
        let analyzer = TextAnalyzer::new(data.stopwords.clone());
        let train =
            CorpusStore::from_documents(data.train, Some(&data.ontology), &analyzer).unwrap();
        let test =
            CorpusStore::from_documents(data.test, Some(&data.ontology), &analyzer).unwrap();
        let ssl = CorpusStore::from_documents(data.ssl, None, &analyzer).unwrap();
        let vocab = build_vocabulary(&train, 90_000).unwrap();
        let space = LabelSpace::from_ontology(&data.ontology);
        let weighting = TermWeighting::tfidf(train.stats().clone());

        let seqs: Vec<_> = train
            .documents()
            .iter()
            .map(|d| preprocess_document(d, &vocab, &analyzer, MAX_LEN).unwrap())
            .collect();
        let index = build_index(&train, &seqs, &data.embeddings, &weighting).unwrap();

        let candidates = |corpus: &CorpusStore, training: bool| {
            candidates_for(
                corpus,
                &index,
                &data.embeddings,
                &weighting,
                &vocab,
                &analyzer,
                training,
            )
        };
        let train_cands = candidates(&train, true);
        let test_cands = candidates(&test, false);
        let ssl_cands = candidates(&ssl, false);
        Self {
            analyzer,
            ontology: data.ontology,
            vocab,
            space,
            train,
            test,
            ssl,
            weighting,
            train_cands,
            test_cands,
            ssl_cands,
        }
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn fresh_init(&self, seed: u64) -> ModelParams {
        ModelParams::init(model_config(), self.vocab.len(), self.space.len(), seed).unwrap()
    }

    pub fn run_pretrain(&self, cfg: TrainConfig) -> PretrainOutcome {
        let docs: Vec<PretrainDoc> = chronological(&self.ssl)
            .into_iter()
            .map(|i| {
                let doc = &self.ssl.documents()[i];
                PretrainDoc {
                    seq: preprocess_document(doc, &self.vocab, &self.analyzer, MAX_LEN).unwrap(),
                    candidates: self.ssl_cands[&doc.id].clone(),
                }
            })
            .collect();
        let n_val = docs.len() / 10;
        let at = docs.len() - n_val;
        let init = self.fresh_init(cfg.seed);
        let (params, report) = pretrain(&docs[..at], &docs[at..], init, &self.space, &cfg).unwrap();
        PretrainOutcome {
            params,
            final_train_loss: report.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN),
        }
    }

    pub fn run_arm(&self, init: impl IntoParams, cfg: TrainConfig, joint: bool) -> ArmResult {
        let init = init.into_params();
        let docs = self.finetune_docs(&self.train, &self.train_cands, joint);
        let n_val = docs.len() / 10;
        let at = docs.len() - n_val;
        let (params, _) = finetune(&docs[..at], &docs[at..], init, &self.space, &cfg).unwrap();

        let train_scored = self.score(&self.train, &self.train_cands, &params, joint);
        let train_golds = self.golds(&self.train, joint);
        let fit = fit_thresholds(&train_scored, &train_golds).unwrap();

        let test_scored = self.score(&self.test, &self.test_cands, &params, joint);
        let test_golds = self.golds(&self.test, joint);
        let preds = apply_thresholds(&test_scored, &fit.table);
        let test_mif = flat_metrics(&preds, &test_golds).unwrap().mif;
        let train_preds = apply_thresholds(&train_scored, &fit.table);
        let train_mif = flat_metrics(&train_preds, &train_golds).unwrap().mif;

        // restrict predictions and golds to major headings
        let majors: BTreeSet<String> = self.ontology.major_ids().map(str::to_string).collect();
        let major_preds: Vec<_> = preds
            .iter()
            .map(|p| meshdex::metrics::PredictionSet {
                doc_id: p.doc_id.clone(),
                predicted: p.predicted.intersection(&majors).cloned().collect(),
            })
            .collect();
        let major_golds: BTreeMap<String, BTreeSet<String>> = test_golds
            .iter()
            .map(|(id, g)| (id.clone(), g.intersection(&majors).cloned().collect()))
            .collect();
        let major_test_mif = flat_metrics(&major_preds, &major_golds).unwrap().mif;

        ArmResult {
            train_mif,
            test_mif,
            major_test_mif,
        }
    }

    fn finetune_docs(
        &self,
        corpus: &CorpusStore,
        cands: &BTreeMap<String, CandidateSet>,
        joint: bool,
    ) -> Vec<FinetuneDoc> {
        chronological(corpus)
            .into_iter()
            .map(|i| {
                let doc = &corpus.documents()[i];
                let mut candidates = cands[&doc.id].clone();
                if joint {
                    candidates = extend_joint(&candidates, &self.ontology);
                }
                FinetuneDoc {
                    seq: preprocess_document(doc, &self.vocab, &self.analyzer, MAX_LEN).unwrap(),
                    candidates,
                    gold: doc.gold_labels(joint),
                }
            })
            .collect()
    }

    fn score(
        &self,
        corpus: &CorpusStore,
        cands: &BTreeMap<String, CandidateSet>,
        params: &ModelParams,
        joint: bool,
    ) -> Vec<ScoredDoc> {
        corpus
            .documents()
            .iter()
            .map(|doc| {
                let seq =
                    preprocess_document(doc, &self.vocab, &self.analyzer, MAX_LEN).unwrap();
                let mut candidates = cands[&doc.id].clone();
                if joint {
                    candidates = extend_joint(&candidates, &self.ontology);
                }
                let scores = forward_index(&seq, &candidates, params, &self.space).unwrap();
                ScoredDoc {
                    doc_id: doc.id.clone(),
                    scores: candidates.ids().into_iter().zip(scores).collect(),
                }
            })
            .collect()
    }

    fn golds(&self, corpus: &CorpusStore, joint: bool) -> BTreeMap<String, BTreeSet<String>> {
        corpus
            .documents()
            .iter()
            .map(|d| (d.id.clone(), d.gold_labels(joint)))
            .collect()
    }

    #[allow(dead_code)]
    pub fn weighting(&self) -> &TermWeighting {
        &self.weighting
    }
}

pub trait IntoParams {
    fn into_params(self) -> ModelParams;
}

impl IntoParams for ModelParams {
    fn into_params(self) -> ModelParams {
        self
    }
}

impl IntoParams for PretrainOutcome {
    fn into_params(self) -> ModelParams {
        self.params
    }
}

fn chronological(corpus: &CorpusStore) -> Vec<usize> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&corpus.documents()[a], &corpus.documents()[b]);
        da.date.cmp(&db.date).then_with(|| da.id.cmp(&db.id))
    });
    order
}

fn extend_joint(cands: &CandidateSet, onto: &MeshOntology) -> CandidateSet {
    let present: BTreeSet<&str> = cands.candidates.iter().map(|(id, _)| id.as_str()).collect();
    let mut finite: Vec<(String, f64)> = cands
        .candidates
        .iter()
        .filter(|(_, s)| s.is_finite())
        .cloned()
        .collect();
    for supp in onto.supplementary_ids() {
        if !present.contains(supp) {
            finite.push((supp.to_string(), 0.0));
        }
    }
    finite.extend(
        cands
            .candidates
            .iter()
            .filter(|(_, s)| !s.is_finite())
            .cloned(),
    );
    CandidateSet {
        doc_id: cands.doc_id.clone(),
        candidates: finite,
    }
}

fn candidates_for(
    corpus: &CorpusStore,
    index: &DocIndex,
    emb: &EmbeddingTable,
    weighting: &TermWeighting,
    vocab: &Vocabulary,
    analyzer: &TextAnalyzer,
    training_mode: bool,
) -> BTreeMap<String, CandidateSet> {
    corpus
        .documents()
        .iter()
        .map(|doc| {
            let seq = preprocess_document(doc, vocab, analyzer, MAX_LEN).unwrap();
            let query = doc_query_vector(&seq, emb, weighting).unwrap();
            let exclude = training_mode.then_some(doc.id.as_str());
            let neighbors = nearest_neighbors(&query, index, K, exclude).unwrap();
            let gold = training_mode.then_some(&doc.mesh_major);
            (
                doc.id.clone(),
                select_candidates(&doc.id, &neighbors, index, M, gold).unwrap(),
            )
        })
        .collect()
}

/// Write the benchmark corpora and a config file into a temp dir.
fn write_benchmark_files(
    dir: &std::path::Path,
    seed: u64,
    spec: &SyntheticSpec,
    train_cfg: &TrainConfig,
    out_name: &str,
) -> PathBuf {
    let data = generate(spec);
    let analyzer = TextAnalyzer::new(data.stopwords.clone());
    CorpusStore::from_documents(data.train, Some(&data.ontology), &analyzer)
        .unwrap()
        .save(&dir.join("train.jsonl"))
        .unwrap();
    CorpusStore::from_documents(data.test, Some(&data.ontology), &analyzer)
        .unwrap()
        .save(&dir.join("test.jsonl"))
        .unwrap();
    CorpusStore::from_documents(data.ssl, None, &analyzer)
        .unwrap()
        .save(&dir.join("ssl.jsonl"))
        .unwrap();
    data.ontology.save(&dir.join("ontology.tsv")).unwrap();
    data.embeddings.save(&dir.join("embeddings.txt")).unwrap();
    let stopwords: String = data.stopwords.iter().map(|w| format!("{w}\n")).collect();
    std::fs::write(dir.join("stopwords.txt"), stopwords).unwrap();

    let model = model_config();
    let config = format!(
        r#"
[paths]
train_corpus = "train.jsonl"
test_corpus = "test.jsonl"
ssl_corpus = "ssl.jsonl"
ontology = "ontology.tsv"
embeddings = "embeddings.txt"
stopwords = "stopwords.txt"
out_dir = "{out_name}"

[retrieval]
k = {K}
m = {M}

[model]
d_model = {}
n_layers = {}
d_ff = {}
n_heads = {}
max_sequence_length = {}

[train]
learning_rate = {}
batch_size = {}
max_epochs = {}
patience = {}
mask_rate = {}
seed = {seed}
"#,
        model.d_model,
        model.n_layers,
        model.d_ff,
        model.n_heads,
        model.max_sequence_length,
        train_cfg.learning_rate,
        train_cfg.batch_size,
        train_cfg.max_epochs,
        train_cfg.patience,
        train_cfg.mask_rate,
    );
    let name = format!("config_{}.toml", out_name);
    let config_path = dir.join(name);
    std::fs::write(&config_path, config).unwrap();
    config_path
}

/// Full-benchmark efficiency curve through the file-based pipeline:
/// prep/index/retrieve/pretrain under the pretraining config, then the
/// curve command under the fine-tuning config. Returns (fraction, MiF) rows.
pub fn run_efficiency_curve(seed: u64) -> Vec<(f64, f64)> {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        seed,
        n_supplementary: 0,
        ..SyntheticSpec::default()
    };
    let pre_cfg_path =
        write_benchmark_files(dir.path(), seed, &spec, &pretrain_cfg(seed), "out");
    let pre_cfg = PipelineConfig::parse(Some(&pre_cfg_path), &Overrides::default()).unwrap();
    for cmd in [
        Command::Prep,
        Command::IndexBuild,
        Command::Retrieve,
        Command::Pretrain,
    ] {
        pipeline::run(cmd, &pre_cfg).unwrap();
    }
    // same artifacts, fine-tuning budget for the per-fraction runs
    let ft = curve_cfg(seed);
    let ft_cfg_path = dir.path().join("config_curve.toml");
    let text = std::fs::read_to_string(&pre_cfg_path).unwrap().replace(
        &format!(
            "learning_rate = {}\nbatch_size = {}\nmax_epochs = {}\npatience = {}",
            pretrain_cfg(seed).learning_rate,
            pretrain_cfg(seed).batch_size,
            pretrain_cfg(seed).max_epochs,
            pretrain_cfg(seed).patience
        ),
        &format!(
            "learning_rate = {}\nbatch_size = {}\nmax_epochs = {}\npatience = {}",
            ft.learning_rate, ft.batch_size, ft.max_epochs, ft.patience
        ),
    );
    std::fs::write(&ft_cfg_path, text).unwrap();
    let ft_cfg = PipelineConfig::parse(Some(&ft_cfg_path), &Overrides::default()).unwrap();
    pipeline::run(Command::EfficiencyCurve, &ft_cfg).unwrap();

    let curve = std::fs::read_to_string(ft_cfg.out_dir.join(pipeline::CURVE_TSV_FILE)).unwrap();
    curve
        .lines()
        .skip(1)
        .map(|line| {
            let (f, mif) = line.split_once('\t').unwrap();
            (f.parse().unwrap(), mif.parse().unwrap())
        })
        .collect()
}

/// Run every pipeline stage on a small fixture; returns the bytes of each
/// comparable artifact (checkpoints, candidates, predictions, reports).
pub fn run_small_pipeline(out_name: &str) -> (tempfile::TempDir, BTreeMap<String, Vec<u8>>) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_train: 60,
        n_test: 20,
        n_ssl: 60,
        seed: 5,
        ..SyntheticSpec::default()
    };
    let cfg_path = write_benchmark_files(
        dir.path(),
        5,
        &spec,
        &TrainConfig {
            learning_rate: 2e-3,
            batch_size: 16,
            max_epochs: 4,
            patience: 4,
            seed: 5,
            ..TrainConfig::default()
        },
        out_name,
    );
    let cfg = PipelineConfig::parse(Some(&cfg_path), &Overrides::default()).unwrap();
    for cmd in [
        Command::Prep,
        Command::IndexBuild,
        Command::Retrieve,
        Command::Pretrain,
        Command::Finetune,
        Command::ThresholdsFit,
        Command::Predict,
        Command::Evaluate,
    ] {
        pipeline::run(cmd, &cfg).unwrap();
    }
    let mut files = BTreeMap::new();
    for name in [
        pipeline::VOCAB_FILE,
        pipeline::INDEX_TENSORS_FILE,
        pipeline::INDEX_SIDECAR_FILE,
        pipeline::CANDIDATES_TRAIN_FILE,
        pipeline::CANDIDATES_TEST_FILE,
        pipeline::CANDIDATES_SSL_FILE,
        pipeline::PRETRAINED_FILE,
        pipeline::MODEL_FILE,
        pipeline::THRESHOLDS_FILE,
        pipeline::SCORES_TEST_FILE,
        pipeline::PREDICTIONS_FILE,
        pipeline::REPORT_KV_FILE,
        pipeline::REPORT_TXT_FILE,
    ] {
        files.insert(
            name.to_string(),
            std::fs::read(cfg.out_dir.join(name)).unwrap(),
        );
    }
    (dir, files)
}
