//! Stage orchestration: each command reads its upstream artifacts, runs one
//! pipeline stage and writes its outputs plus a manifest (input content
//! hashes, resolved config snapshot, seed) into the output directory.

pub mod config;

pub use config::{EmbeddingInit, Overrides, PipelineConfig, WeightingKind};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::corpus::{CorpusStore, EmbeddingTable, MeshOntology};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, PredictionSet};
use crate::retrieval::{
    build_index, candidate_recall, doc_query_vector, nearest_neighbors, select_candidates,
    CandidateSet, DocIndex, TermWeighting,
};
use crate::textprep::{build_vocabulary, preprocess_document, TextAnalyzer, TokenSequence, Vocabulary};
use crate::thresholds::{apply_thresholds, fit_thresholds, ScoredDoc, ThresholdTable};
use crate::training::{finetune, pretrain, FinetuneDoc, PretrainDoc, TrainReport};
use crate::transformer::{forward_index, LabelSpace, ModelParams};

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const GENERATED_EMBEDDINGS_FILE: &str = "embeddings_generated.txt";
pub const INDEX_TENSORS_FILE: &str = "index.tensors";
pub const INDEX_SIDECAR_FILE: &str = "index_sidecar.tsv";
pub const CANDIDATES_TRAIN_FILE: &str = "candidates_train.tsv";
pub const CANDIDATES_TEST_FILE: &str = "candidates_test.tsv";
pub const CANDIDATES_SSL_FILE: &str = "candidates_ssl.tsv";
pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const THRESHOLDS_FILE: &str = "thresholds.tsv";
pub const THRESHOLDS_TRACE_FILE: &str = "thresholds_trace.tsv";
pub const SCORES_TEST_FILE: &str = "scores_test.tsv";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const REPORT_KV_FILE: &str = "report.kv";
pub const REPORT_TXT_FILE: &str = "report.txt";
pub const CURVE_TSV_FILE: &str = "curve.tsv";
pub const CURVE_TXT_FILE: &str = "curve.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Prep,
    IndexBuild,
    Retrieve,
    Pretrain,
    Finetune,
    ThresholdsFit,
    ThresholdsApply,
    Predict,
    Evaluate,
    EfficiencyCurve,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prep => "prep",
            Command::IndexBuild => "index build",
            Command::Retrieve => "retrieve",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::ThresholdsFit => "thresholds fit",
            Command::ThresholdsApply => "thresholds apply",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::EfficiencyCurve => "efficiency-curve",
        }
    }
}

pub fn run(cmd: Command, cfg: &PipelineConfig) -> Result<()> {
    cfg.check_paths()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    match cmd {
        Command::Prep => prep(cfg),
        Command::IndexBuild => index_build(cfg),
        Command::Retrieve => retrieve(cfg),
        Command::Pretrain => pretrain_stage(cfg),
        Command::Finetune => finetune_stage(cfg),
        Command::ThresholdsFit => thresholds_fit_stage(cfg),
        Command::ThresholdsApply => predict_stage(cfg, false),
        Command::Predict => predict_stage(cfg, true),
        Command::Evaluate => evaluate_stage(cfg),
        Command::EfficiencyCurve => efficiency_curve(cfg),
    }
}

// ---------------------------------------------------------------- plumbing

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(
    cfg: &PipelineConfig,
    stage: &str,
    inputs: &[&Path],
    outputs: &[&str],
) -> Result<()> {
    let mut input_hashes = BTreeMap::new();
    for path in inputs {
        input_hashes.insert(path.display().to_string(), sha256_file(path)?);
    }
    let manifest = serde_json::json!({
        "stage": stage,
        "seed": cfg.train.seed,
        "config": cfg.snapshot(),
        "inputs": input_hashes,
        "outputs": outputs,
    });
    let name = format!("{}_manifest.json", stage.replace(' ', "_"));
    let path = cfg.out_dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("json"))
        .map_err(|e| Error::io(&path, e))
}

fn require_artifact(cfg: &PipelineConfig, name: &str, producer: Command) -> Result<PathBuf> {
    let path = cfg.out_dir.join(name);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.display().to_string(),
            producer: producer.name().to_string(),
        });
    }
    Ok(path)
}

struct Ctx {
    analyzer: TextAnalyzer,
    ontology: MeshOntology,
}

impl Ctx {
    fn load(cfg: &PipelineConfig) -> Result<Self> {
        let analyzer = TextAnalyzer::from_stopword_file(&cfg.require_stopwords()?)?;
        let ontology = MeshOntology::load(&cfg.require_ontology()?)?;
        Ok(Self { analyzer, ontology })
    }
}

fn load_vocab(cfg: &PipelineConfig) -> Result<(Vocabulary, PathBuf)> {
    let path = require_artifact(cfg, VOCAB_FILE, Command::Prep)?;
    Ok((Vocabulary::load(&path)?, path))
}

pub fn preprocess_corpus(
    corpus: &CorpusStore,
    vocab: &Vocabulary,
    analyzer: &TextAnalyzer,
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    corpus
        .documents()
        .iter()
        .map(|d| preprocess_document(d, vocab, analyzer, max_len))
        .collect()
}

fn resolve_embeddings(cfg: &PipelineConfig) -> Result<(EmbeddingTable, PathBuf)> {
    match cfg.embedding_init {
        EmbeddingInit::File => {
            let path = cfg.embeddings.clone().ok_or_else(|| {
                Error::Config(
                    "embedding_init = \"file\" requires [paths] embeddings (or use --init random)"
                        .into(),
                )
            })?;
            Ok((EmbeddingTable::load(&path)?, path))
        }
        EmbeddingInit::Random => {
            let path = require_artifact(cfg, GENERATED_EMBEDDINGS_FILE, Command::IndexBuild)?;
            Ok((EmbeddingTable::load(&path)?, path))
        }
    }
}

fn weighting_for(cfg: &PipelineConfig, corpus: &CorpusStore) -> Result<TermWeighting> {
    match cfg.weighting {
        WeightingKind::TfIdf => Ok(TermWeighting::tfidf(corpus.stats().clone())),
        WeightingKind::Bm25 => TermWeighting::bm25(corpus.stats().clone(), cfg.bm25_k1, cfg.bm25_b),
    }
}

fn save_index(cfg: &PipelineConfig, index: &DocIndex) -> Result<()> {
    let n = index.len();
    let dim = index.dimension;
    let mut vectors = ndarray::Array2::zeros((n, dim));
    for (i, v) in index.vectors.iter().enumerate() {
        for (j, x) in v.iter().enumerate() {
            vectors[[i, j]] = *x;
        }
    }
    let mass = ndarray::Array2::from_shape_fn((n, 1), |(i, _)| index.idf_mass[i]);
    crate::transformer::save_tensors(
        &cfg.out_dir.join(INDEX_TENSORS_FILE),
        &[("vectors".into(), &vectors), ("idf_mass".into(), &mass)],
    )?;
    let mut sidecar = String::new();
    for (id, gold) in index.ids.iter().zip(&index.golds) {
        sidecar.push_str(id);
        sidecar.push('\t');
        sidecar.push_str(&gold.iter().cloned().collect::<Vec<_>>().join(","));
        sidecar.push('\n');
    }
    let path = cfg.out_dir.join(INDEX_SIDECAR_FILE);
    std::fs::write(&path, sidecar).map_err(|e| Error::io(&path, e))
}

fn load_index(cfg: &PipelineConfig) -> Result<DocIndex> {
    let tensors_path = require_artifact(cfg, INDEX_TENSORS_FILE, Command::IndexBuild)?;
    let sidecar_path = require_artifact(cfg, INDEX_SIDECAR_FILE, Command::IndexBuild)?;
    let tensors: BTreeMap<String, ndarray::Array2<f64>> =
        crate::transformer::load_tensors(&tensors_path)?
            .into_iter()
            .collect();
    let vectors = tensors
        .get("vectors")
        .ok_or_else(|| Error::InvalidInput("index archive missing \"vectors\"".into()))?;
    let mass = tensors
        .get("idf_mass")
        .ok_or_else(|| Error::InvalidInput("index archive missing \"idf_mass\"".into()))?;
    let text = std::fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    let mut ids = Vec::new();
    let mut golds = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (id, labels) = line.split_once('\t').ok_or_else(|| Error::InvalidInput(
            format!("bad index sidecar line {line:?}"),
        ))?;
        ids.push(id.to_string());
        golds.push(
            labels
                .split(',')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect::<BTreeSet<String>>(),
        );
    }
    if ids.len() != vectors.nrows() || ids.len() != mass.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "index sidecar has {} entries, tensors have {} rows",
            ids.len(),
            vectors.nrows()
        )));
    }
    Ok(DocIndex {
        ids,
        vectors: vectors.rows().into_iter().map(|r| r.to_vec()).collect(),
        golds,
        idf_mass: mass.column(0).to_vec(),
        dimension: vectors.ncols(),
    })
}

fn write_candidates(path: &Path, cands: &[CandidateSet]) -> Result<()> {
    let mut out = String::new();
    for c in cands {
        out.push_str(&c.doc_id);
        out.push('\t');
        let parts: Vec<String> = c
            .candidates
            .iter()
            .map(|(id, s)| format!("{id}:{s}"))
            .collect();
        out.push_str(&parts.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_candidates(path: &Path) -> Result<Vec<CandidateSet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (doc_id, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: "expected doc_id<TAB>id:score ...".into(),
        })?;
        let mut candidates = Vec::new();
        for part in rest.split(' ').filter(|p| !p.is_empty()) {
            let (id, score) = part.rsplit_once(':').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("bad candidate entry {part:?}"),
            })?;
            let score: f64 = score.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("bad score in {part:?}"),
            })?;
            candidates.push((id.to_string(), score));
        }
        out.push(CandidateSet {
            doc_id: doc_id.to_string(),
            candidates,
        });
    }
    Ok(out)
}

/// In joint mode every supplementary concept becomes an always-present
/// candidate, appended after the retrieved ones (score 0) and before any
/// gold sentinels, keeping scores non-increasing.
fn extend_with_supplementary(cands: &CandidateSet, onto: &MeshOntology) -> CandidateSet {
    let present: BTreeSet<&str> = cands.candidates.iter().map(|(id, _)| id.as_str()).collect();
    let mut finite: Vec<(String, f64)> = Vec::new();
    let mut sentinels: Vec<(String, f64)> = Vec::new();
    for (id, s) in &cands.candidates {
        if s.is_finite() {
            finite.push((id.clone(), *s));
        } else {
            sentinels.push((id.clone(), *s));
        }
    }
    for supp in onto.supplementary_ids() {
        if !present.contains(supp) {
            finite.push((supp.to_string(), 0.0));
        }
    }
    finite.extend(sentinels);
    CandidateSet {
        doc_id: cands.doc_id.clone(),
        candidates: finite,
    }
}

fn candidate_map(cands: Vec<CandidateSet>) -> BTreeMap<String, CandidateSet> {
    cands.into_iter().map(|c| (c.doc_id.clone(), c)).collect()
}

/// Sort document positions chronologically (date, then id).
fn chronological_order(corpus: &CorpusStore) -> Vec<usize> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| {
        let da = &corpus.documents()[a];
        let db = &corpus.documents()[b];
        da.date.cmp(&db.date).then_with(|| da.id.cmp(&db.id))
    });
    order
}

fn write_train_logs(cfg: &PipelineConfig, prefix: &str, report: &TrainReport) -> Result<()> {
    let log_path = cfg.out_dir.join(format!("{prefix}_log.tsv"));
    std::fs::write(&log_path, report.log_lines()).map_err(|e| Error::io(&log_path, e))?;
    let summary_path = cfg.out_dir.join(format!("{prefix}_summary.txt"));
    std::fs::write(&summary_path, report.summary()).map_err(|e| Error::io(&summary_path, e))?;
    println!(
        "{prefix}: {} epochs (best {}), wall {:.1}s",
        report.stopped_epoch, report.best_epoch, report.wall_secs
    );
    Ok(())
}

// ------------------------------------------------------------------ stages

fn prep(cfg: &PipelineConfig) -> Result<()> {
    let ctx = Ctx::load(cfg)?;
    let train_path = cfg.require_train_corpus()?;
    let corpus = CorpusStore::load(&train_path, Some(&ctx.ontology), &ctx.analyzer)?;
    let vocab = build_vocabulary(&corpus, cfg.vocab_size)?;
    vocab.save(&cfg.out_dir.join(VOCAB_FILE))?;
    println!(
        "prep: {} documents, vocabulary {} (cap {})",
        corpus.len(),
        vocab.len(),
        cfg.vocab_size
    );
    write_manifest(
        cfg,
        "prep",
        &[
            &train_path,
            &cfg.require_stopwords()?,
            &cfg.require_ontology()?,
        ],
        &[VOCAB_FILE],
    )
}

fn index_build(cfg: &PipelineConfig) -> Result<()> {
    let ctx = Ctx::load(cfg)?;
    let (vocab, vocab_path) = load_vocab(cfg)?;
    let train_path = cfg.require_train_corpus()?;
    let corpus = CorpusStore::load(&train_path, Some(&ctx.ontology), &ctx.analyzer)?;
    let seqs = preprocess_corpus(&corpus, &vocab, &ctx.analyzer, cfg.model.max_sequence_length)?;

    let (emb, emb_path) = match cfg.embedding_init {
        EmbeddingInit::File => resolve_embeddings(cfg)?,
        EmbeddingInit::Random => {
            let table = EmbeddingTable::random(
                corpus.terms().map(str::to_string),
                cfg.embedding_dim,
                cfg.train.seed,
            );
            let path = cfg.out_dir.join(GENERATED_EMBEDDINGS_FILE);
            table.save(&path)?;
            (table, path)
        }
    };
    let weighting = weighting_for(cfg, &corpus)?;
    let index = build_index(&corpus, &seqs, &emb, &weighting)?;
    save_index(cfg, &index)?;
    println!(
        "index build: {} documents indexed, dimension {}",
        index.len(),
        index.dimension
    );
    write_manifest(
        cfg,
        "index build",
        &[&train_path, &vocab_path, &emb_path],
        &[INDEX_TENSORS_FILE, INDEX_SIDECAR_FILE],
    )
}

fn retrieve(cfg: &PipelineConfig) -> Result<()> {
    let ctx = Ctx::load(cfg)?;
    let (vocab, vocab_path) = load_vocab(cfg)?;
    let index = load_index(cfg)?;
    let (emb, emb_path) = resolve_embeddings(cfg)?;
    let train_path = cfg.require_train_corpus()?;
    let train = CorpusStore::load(&train_path, Some(&ctx.ontology), &ctx.analyzer)?;
    // query weighting is fitted on the training statistics only
    let weighting = weighting_for(cfg, &train)?;

    let mut inputs: Vec<PathBuf> = vec![train_path.clone(), vocab_path, emb_path];
    let mut outputs: Vec<&str> = Vec::new();

    let retrieve_split =
        |corpus: &CorpusStore, training_mode: bool, file: &'static str| -> Result<()> {
            let mut cands = Vec::with_capacity(corpus.len());
            for doc in corpus.documents() {
                let seq =
                    preprocess_document(doc, &vocab, &ctx.analyzer, cfg.model.max_sequence_length)?;
                let query = doc_query_vector(&seq, &emb, &weighting)?;
                let exclude = training_mode.then_some(doc.id.as_str());
                let neighbors = nearest_neighbors(&query, &index, cfg.k, exclude)?;
                let gold = training_mode.then_some(&doc.mesh_major);
                cands.push(select_candidates(&doc.id, &neighbors, &index, cfg.m, gold)?);
            }
            let golds: BTreeMap<String, BTreeSet<String>> = corpus
                .documents()
                .iter()
                .map(|d| (d.id.clone(), d.mesh_major.clone()))
                .collect();
            if golds.values().any(|g| !g.is_empty()) {
                println!(
                    "retrieve {}: candidate recall {:.4} at m={}",
                    file,
                    candidate_recall(&cands, &golds),
                    cfg.m
                );
            }
            write_candidates(&cfg.out_dir.join(file), &cands)
        };

    retrieve_split(&train, true, CANDIDATES_TRAIN_FILE)?;
    outputs.push(CANDIDATES_TRAIN_FILE);
    if let Some(test_path) = &cfg.test_corpus {
        let test = CorpusStore::load(test_path, Some(&ctx.ontology), &ctx.analyzer)?;
        retrieve_split(&test, false, CANDIDATES_TEST_FILE)?;
        inputs.push(test_path.clone());
        outputs.push(CANDIDATES_TEST_FILE);
    }
    if let Some(ssl_path) = &cfg.ssl_corpus {
        let ssl = CorpusStore::load(ssl_path, None, &ctx.analyzer)?;
        retrieve_split(&ssl, false, CANDIDATES_SSL_FILE)?;
        inputs.push(ssl_path.clone());
        outputs.push(CANDIDATES_SSL_FILE);
    }
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    write_manifest(cfg, "retrieve", &input_refs, &outputs)
}

fn pretrain_stage(cfg: &PipelineConfig) -> Result<()> {
    let ctx = Ctx::load(cfg)?;
    let (vocab, vocab_path) = load_vocab(cfg)?;
    let ssl_path = cfg.require_ssl_corpus()?;
    let ssl = CorpusStore::load(&ssl_path, None, &ctx.analyzer)?;
    let cand_path = require_artifact(cfg, CANDIDATES_SSL_FILE, Command::Retrieve)?;
    let cands = candidate_map(read_candidates(&cand_path)?);
    let space = LabelSpace::from_ontology(&ctx.ontology);

    let order = chronological_order(&ssl);
    let mut docs = Vec::with_capacity(ssl.len());
    for &i in &order {
        let doc = &ssl.documents()[i];
        let seq = preprocess_document(doc, &vocab, &ctx.analyzer, cfg.model.max_sequence_length)?;
        let candidates = cands
            .get(&doc.id)
            .cloned()
            .ok_or_else(|| Error::MissingArtifact {
                path: format!("{} (no candidates for {:?})", cand_path.display(), doc.id),
                producer: Command::Retrieve.name().to_string(),
            })?;
        docs.push(PretrainDoc { seq, candidates });
    }
    let n_val = docs.len() / 10;
    let split = docs.len() - n_val;
    let (train_docs, val_docs) = docs.split_at(split);

    let init = ModelParams::init(cfg.model, vocab.len(), space.len(), cfg.train.seed)?;
    let (params, report) = pretrain(train_docs, val_docs, init, &space, &cfg.train)?;
    params.save(&cfg.out_dir.join(PRETRAINED_FILE))?;
    write_train_logs(cfg, "pretrain", &report)?;
    write_manifest(
        cfg,
        "pretrain",
        &[&ssl_path, &vocab_path, &cand_path],
        &[PRETRAINED_FILE, "pretrain_log.tsv", "pretrain_summary.txt"],
    )
}

/// Assemble fine-tuning documents from a labeled corpus and its candidate
/// sets, chronologically ordered, with joint supplementary extension when
/// configured.
fn finetune_docs(
    cfg: &PipelineConfig,
    ctx: &Ctx,
    vocab: &Vocabulary,
    corpus: &CorpusStore,
    cands: &BTreeMap<String, CandidateSet>,
) -> Result<Vec<FinetuneDoc>> {
    let order = chronological_order(corpus);
    let mut docs = Vec::with_capacity(corpus.len());
    for &i in &order {
        let doc = &corpus.documents()[i];
        let seq = preprocess_document(doc, vocab, &ctx.analyzer, cfg.model.max_sequence_length)?;
        let mut candidates = cands
            .get(&doc.id)
            .cloned()
            .ok_or_else(|| Error::MissingArtifact {
                path: format!("candidates for document {:?}", doc.id),
                producer: Command::Retrieve.name().to_string(),
            })?;
        if cfg.joint_supplementary {
            candidates = extend_with_supplementary(&candidates, &ctx.ontology);
        }
        docs.push(FinetuneDoc {
            seq,
            candidates,
            gold: doc.gold_labels(cfg.joint_supplementary),
        });
    }
    Ok(docs)
}

fn finetune_stage(cfg: &PipelineConfig) -> Result<()> {
    let ctx = Ctx::load(cfg)?;
    let (vocab, vocab_path) = load_vocab(cfg)?;
    let train_path = cfg.require_train_corpus()?;
    let corpus = CorpusStore::load(&train_path, Some(&ctx.ontology), &ctx.analyzer)?;
    let cand_path = require_artifact(cfg, CANDIDATES_TRAIN_FILE, Command::Retrieve)?;
    let cands = candidate_map(read_candidates(&cand_path)?);
    let space = LabelSpace::from_ontology(&ctx.ontology);

    let docs = finetune_docs(cfg, &ctx, &vocab, &corpus, &cands)?;
    let n_val = docs.len() / 10;
    let split = docs.len() - n_val;
    let (train_docs, val_docs) = docs.split_at(split);

    let pretrained = cfg.out_dir.join(PRETRAINED_FILE);
    let init = if pretrained.exists() {
        println!("finetune: starting from {}", pretrained.display());
        ModelParams::load(&pretrained)?
    } else {
        println!("finetune: no pretrained checkpoint, starting from scratch");
        ModelParams::init(cfg.model, vocab.len(), space.len(), cfg.train.seed)?
    };
    let (params, report) = finetune(train_docs, val_docs, init, &space, &cfg.train)?;
    params.save(&cfg.out_dir.join(MODEL_FILE))?;
    write_train_logs(cfg, "finetune", &report)?;
    write_manifest(
        cfg,
        "finetune",
        &[&train_path, &vocab_path, &cand_path],
        &[MODEL_FILE, "finetune_log.tsv", "finetune_summary.txt"],
    )
}

/// Score every document of a corpus against its candidates.
fn score_corpus(
    cfg: &PipelineConfig,
    ctx: &Ctx,
    vocab: &Vocabulary,
    corpus: &CorpusStore,
    cands: &BTreeMap<String, CandidateSet>,
    params: &ModelParams,
    space: &LabelSpace,
) -> Result<Vec<ScoredDoc>> {
    let mut out = Vec::with_capacity(corpus.len());
    for doc in corpus.documents() {
        let seq = preprocess_document(doc, vocab, &ctx.analyzer, cfg.model.max_sequence_length)?;
        let mut candidates = cands
            .get(&doc.id)
            .cloned()
            .ok_or_else(|| Error::MissingArtifact {
                path: format!("candidates for document {:?}", doc.id),
                producer: Command::Retrieve.name().to_string(),
            })?;
        if cfg.joint_supplementary {
            candidates = extend_with_supplementary(&candidates, &ctx.ontology);
        }
        let scores = forward_index(&seq, &candidates, params, space)?;
        out.push(ScoredDoc {
            doc_id: doc.id.clone(),
            scores: candidates
                .ids()
                .into_iter()
                .zip(scores)
                .collect(),
        });
    }
    Ok(out)
}

fn thresholds_fit_stage(cfg: &PipelineConfig) -> Result<()> {
    let ctx = Ctx::load(cfg)?;
    let (vocab, vocab_path) = load_vocab(cfg)?;
    let train_path = cfg.require_train_corpus()?;
    let corpus = CorpusStore::load(&train_path, Some(&ctx.ontology), &ctx.analyzer)?;
    let cand_path = require_artifact(cfg, CANDIDATES_TRAIN_FILE, Command::Retrieve)?;
    let cands = candidate_map(read_candidates(&cand_path)?);
    let model_path = require_artifact(cfg, MODEL_FILE, Command::Finetune)?;
    let params = ModelParams::load(&model_path)?;
    let space = LabelSpace::from_ontology(&ctx.ontology);

    let scored = score_corpus(cfg, &ctx, &vocab, &corpus, &cands, &params, &space)?;
    let golds: BTreeMap<String, BTreeSet<String>> = corpus
        .documents()
        .iter()
        .map(|d| (d.id.clone(), d.gold_labels(cfg.joint_supplementary)))
        .collect();
    let fit = fit_thresholds(&scored, &golds)?;
    fit.table.save(&cfg.out_dir.join(THRESHOLDS_FILE))?;
    let trace: String = fit
        .objective_trace
        .iter()
        .map(|f| format!("{f}\n"))
        .collect();
    let trace_path = cfg.out_dir.join(THRESHOLDS_TRACE_FILE);
    std::fs::write(&trace_path, trace).map_err(|e| Error::io(&trace_path, e))?;
    println!(
        "thresholds fit: {} indexes, train micro-F {:.4}",
        fit.table.len(),
        fit.objective_trace.last().copied().unwrap_or(0.0)
    );
    write_manifest(
        cfg,
        "thresholds fit",
        &[&train_path, &vocab_path, &cand_path, &model_path],
        &[THRESHOLDS_FILE, THRESHOLDS_TRACE_FILE],
    )
}

fn predict_stage(cfg: &PipelineConfig, _full: bool) -> Result<()> {
    let ctx = Ctx::load(cfg)?;
    let (vocab, vocab_path) = load_vocab(cfg)?;
    let test_path = cfg.require_test_corpus()?;
    let corpus = CorpusStore::load(&test_path, Some(&ctx.ontology), &ctx.analyzer)?;
    let cand_path = require_artifact(cfg, CANDIDATES_TEST_FILE, Command::Retrieve)?;
    let cands = candidate_map(read_candidates(&cand_path)?);
    let model_path = require_artifact(cfg, MODEL_FILE, Command::Finetune)?;
    let thresholds_path = require_artifact(cfg, THRESHOLDS_FILE, Command::ThresholdsFit)?;
    let table = ThresholdTable::load(&thresholds_path)?;
    let params = ModelParams::load(&model_path)?;
    let space = LabelSpace::from_ontology(&ctx.ontology);

    let scored = score_corpus(cfg, &ctx, &vocab, &corpus, &cands, &params, &space)?;
    let mut scores_text = String::new();
    for doc in &scored {
        scores_text.push_str(&doc.doc_id);
        scores_text.push('\t');
        let parts: Vec<String> = doc
            .scores
            .iter()
            .map(|(id, s)| format!("{id}:{s}"))
            .collect();
        scores_text.push_str(&parts.join(" "));
        scores_text.push('\n');
    }
    let scores_path = cfg.out_dir.join(SCORES_TEST_FILE);
    std::fs::write(&scores_path, scores_text).map_err(|e| Error::io(&scores_path, e))?;

    let preds = apply_thresholds(&scored, &table);
    metrics::write_label_file(&cfg.out_dir.join(PREDICTIONS_FILE), &preds)?;
    println!("predict: {} documents scored", preds.len());
    write_manifest(
        cfg,
        "predict",
        &[
            &test_path,
            &vocab_path,
            &cand_path,
            &model_path,
            &thresholds_path,
        ],
        &[SCORES_TEST_FILE, PREDICTIONS_FILE],
    )
}

fn evaluate_stage(cfg: &PipelineConfig) -> Result<()> {
    let ctx = Ctx::load(cfg)?;
    let test_path = cfg.require_test_corpus()?;
    let corpus = CorpusStore::load(&test_path, Some(&ctx.ontology), &ctx.analyzer)?;
    let pred_path = require_artifact(cfg, PREDICTIONS_FILE, Command::Predict)?;
    let pred_map = metrics::read_label_file(&pred_path)?;
    let mut preds = Vec::with_capacity(corpus.len());
    for doc in corpus.documents() {
        preds.push(PredictionSet {
            doc_id: doc.id.clone(),
            predicted: pred_map.get(&doc.id).cloned().unwrap_or_default(),
        });
    }
    let golds: BTreeMap<String, BTreeSet<String>> = corpus
        .documents()
        .iter()
        .map(|d| (d.id.clone(), d.gold_labels(cfg.joint_supplementary)))
        .collect();
    let report = metrics::evaluate(&preds, &golds, Some(&ctx.ontology))?;
    write_report(cfg, &report)?;
    print!("{}", report.to_table());
    write_manifest(
        cfg,
        "evaluate",
        &[&test_path, &pred_path],
        &[REPORT_KV_FILE, REPORT_TXT_FILE],
    )
}

fn write_report(cfg: &PipelineConfig, report: &MetricsReport) -> Result<()> {
    let kv_path = cfg.out_dir.join(REPORT_KV_FILE);
    std::fs::write(&kv_path, report.to_kv()).map_err(|e| Error::io(&kv_path, e))?;
    let txt_path = cfg.out_dir.join(REPORT_TXT_FILE);
    std::fs::write(&txt_path, report.to_table()).map_err(|e| Error::io(&txt_path, e))
}

/// Standalone evaluation of prediction and gold label files.
pub fn evaluate_files(
    gold_path: &Path,
    pred_path: &Path,
    ontology_path: &Path,
) -> Result<MetricsReport> {
    let onto = MeshOntology::load(ontology_path)?;
    let golds = metrics::read_label_file(gold_path)?;
    let pred_map = metrics::read_label_file(pred_path)?;
    let preds: Vec<PredictionSet> = pred_map
        .into_iter()
        .map(|(doc_id, predicted)| PredictionSet { doc_id, predicted })
        .collect();
    metrics::evaluate(&preds, &golds, Some(&onto))
}

/// One fraction of the data-efficiency protocol; returns test micro-F.
#[allow(clippy::too_many_arguments)]
fn run_fraction(
    cfg: &PipelineConfig,
    ctx: &Ctx,
    vocab: &Vocabulary,
    emb: &EmbeddingTable,
    full_train: &CorpusStore,
    test: &CorpusStore,
    init: &ModelParams,
    space: &LabelSpace,
    fraction: f64,
) -> Result<(f64, Vec<PredictionSet>, MetricsReport)> {
    let split = full_train
        .chronological_split(&[fraction], &ctx.analyzer)?
        .pop()
        .expect("one fraction requested");

    let max_len = cfg.model.max_sequence_length;
    let (params, table, test_cands) = if split.is_empty() {
        // zero-shot: no labeled data at all, so no retrieval index and no
        // fitted thresholds; every major heading is a candidate
        let all_majors: Vec<(String, f64)> = ctx
            .ontology
            .major_ids()
            .take(cfg.m)
            .map(|id| (id.to_string(), 0.0))
            .collect();
        let cands: Vec<CandidateSet> = test
            .documents()
            .iter()
            .map(|d| CandidateSet {
                doc_id: d.id.clone(),
                candidates: all_majors.clone(),
            })
            .collect();
        (init.clone(), ThresholdTable::default(), cands)
    } else {
        let seqs = preprocess_corpus(&split, vocab, &ctx.analyzer, max_len)?;
        let weighting = weighting_for(cfg, &split)?;
        let index = build_index(&split, &seqs, emb, &weighting)?;

        let mut train_cands = Vec::with_capacity(split.len());
        for doc in split.documents() {
            let seq = preprocess_document(doc, vocab, &ctx.analyzer, max_len)?;
            let query = doc_query_vector(&seq, emb, &weighting)?;
            let neighbors = if index.len() > 1 {
                nearest_neighbors(&query, &index, cfg.k, Some(doc.id.as_str()))?
            } else {
                // a single-document split can only match itself
                nearest_neighbors(&query, &index, cfg.k, None)?
            };
            train_cands.push(select_candidates(
                &doc.id,
                &neighbors,
                &index,
                cfg.m,
                Some(&doc.mesh_major),
            )?);
        }
        let cand_map = candidate_map(train_cands);
        let docs = finetune_docs(cfg, ctx, vocab, &split, &cand_map)?;
        // the fraction itself is the training budget: no validation split,
        // which at small fractions would hold out only one or two documents
        let (params, _) = finetune(&docs, &[], init.clone(), space, &cfg.train)?;

        let scored = score_corpus(cfg, ctx, vocab, &split, &cand_map, &params, space)?;
        let golds: BTreeMap<String, BTreeSet<String>> = split
            .documents()
            .iter()
            .map(|d| (d.id.clone(), d.gold_labels(cfg.joint_supplementary)))
            .collect();
        let fit = fit_thresholds(&scored, &golds)?;

        let mut test_cands = Vec::with_capacity(test.len());
        for doc in test.documents() {
            let seq = preprocess_document(doc, vocab, &ctx.analyzer, max_len)?;
            let query = doc_query_vector(&seq, emb, &weighting)?;
            let neighbors = nearest_neighbors(&query, &index, cfg.k, None)?;
            test_cands.push(select_candidates(&doc.id, &neighbors, &index, cfg.m, None)?);
        }
        (params, fit.table, test_cands)
    };

    let cand_map = candidate_map(test_cands);
    let scored = score_corpus(cfg, ctx, vocab, test, &cand_map, &params, space)?;
    let preds = apply_thresholds(&scored, &table);
    let golds: BTreeMap<String, BTreeSet<String>> = test
        .documents()
        .iter()
        .map(|d| (d.id.clone(), d.gold_labels(cfg.joint_supplementary)))
        .collect();
    let report = metrics::evaluate(&preds, &golds, Some(&ctx.ontology))?;
    Ok((report.mif, preds, report))
}

fn efficiency_curve(cfg: &PipelineConfig) -> Result<()> {
    let ctx = Ctx::load(cfg)?;
    let (vocab, vocab_path) = load_vocab(cfg)?;
    let (emb, emb_path) = resolve_embeddings(cfg)?;
    let train_path = cfg.require_train_corpus()?;
    let train = CorpusStore::load(&train_path, Some(&ctx.ontology), &ctx.analyzer)?;
    let test_path = cfg.require_test_corpus()?;
    let test = CorpusStore::load(&test_path, Some(&ctx.ontology), &ctx.analyzer)?;
    let space = LabelSpace::from_ontology(&ctx.ontology);

    let pretrained = cfg.out_dir.join(PRETRAINED_FILE);
    let init = if pretrained.exists() {
        println!("efficiency-curve: starting each fraction from {}", pretrained.display());
        ModelParams::load(&pretrained)?
    } else {
        println!("efficiency-curve: no pretrained checkpoint, fractions start from scratch");
        ModelParams::init(cfg.model, vocab.len(), space.len(), cfg.train.seed)?
    };

    let mut rows = Vec::new();
    for &fraction in &cfg.fractions {
        let (mif, preds, report) = run_fraction(
            cfg, &ctx, &vocab, &emb, &train, &test, &init, &space, fraction,
        )?;
        let dir = cfg.out_dir.join(format!("fraction_{fraction}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        metrics::write_label_file(&dir.join(PREDICTIONS_FILE), &preds)?;
        let kv = dir.join(REPORT_KV_FILE);
        std::fs::write(&kv, report.to_kv()).map_err(|e| Error::io(&kv, e))?;
        println!(
            "efficiency-curve: fraction {fraction} -> test MiF {mif:.4} (MiP {:.4}, MiR {:.4})",
            report.mip, report.mir
        );
        rows.push((fraction, mif));
    }

    let mut tsv = String::from("fraction\tmif\n");
    let mut txt = String::from("fraction  test-MiF\n");
    for (f, mif) in &rows {
        tsv.push_str(&format!("{f}\t{mif}\n"));
        txt.push_str(&format!("{f:<8}  {mif:.4}\n"));
    }
    let tsv_path = cfg.out_dir.join(CURVE_TSV_FILE);
    std::fs::write(&tsv_path, tsv).map_err(|e| Error::io(&tsv_path, e))?;
    let txt_path = cfg.out_dir.join(CURVE_TXT_FILE);
    std::fs::write(&txt_path, txt).map_err(|e| Error::io(&txt_path, e))?;
    write_manifest(
        cfg,
        "efficiency-curve",
        &[&train_path, &test_path, &vocab_path, &emb_path],
        &[CURVE_TSV_FILE, CURVE_TXT_FILE],
    )
}
