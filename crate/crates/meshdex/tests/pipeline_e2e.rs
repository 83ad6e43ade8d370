//! File-based pipeline runs over a small synthetic corpus: every stage in
//! order, artifact layout, idempotence and stage-dependency errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use meshdex::corpus::CorpusStore;
use meshdex::pipeline::{self, Command, Overrides, PipelineConfig};
use meshdex::synthetic::{generate, SyntheticSpec};
use meshdex::textprep::TextAnalyzer;
use meshdex::Error;

struct Fixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    config_path: PathBuf,
    out_dir: PathBuf,
}

fn write_fixture(out_name: &str) -> Fixture {
    let spec = SyntheticSpec {
        n_train: 60,
        n_test: 20,
        n_ssl: 60,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let data = generate(&spec);
    let dir = tempfile::tempdir().unwrap();
    let analyzer = TextAnalyzer::new(data.stopwords.clone());

    let train = CorpusStore::from_documents(data.train, Some(&data.ontology), &analyzer).unwrap();
    train.save(&dir.path().join("train.jsonl")).unwrap();
    let test = CorpusStore::from_documents(data.test, Some(&data.ontology), &analyzer).unwrap();
    test.save(&dir.path().join("test.jsonl")).unwrap();
    let ssl = CorpusStore::from_documents(data.ssl, None, &analyzer).unwrap();
    ssl.save(&dir.path().join("ssl.jsonl")).unwrap();
    data.ontology.save(&dir.path().join("ontology.tsv")).unwrap();
    data.embeddings.save(&dir.path().join("embeddings.txt")).unwrap();
    let stopwords: String = data.stopwords.iter().map(|w| format!("{w}\n")).collect();
    std::fs::write(dir.path().join("stopwords.txt"), stopwords).unwrap();

    let out_dir = dir.path().join(out_name);
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
k = 15
m = 8

[model]
d_model = 24
n_layers = 1
d_ff = 32
n_heads = 4
max_sequence_length = 64

[train]
learning_rate = 0.002
batch_size = 16
max_epochs = 4
patience = 4
seed = 11
"#
    );
    let config_path = dir.path().join("config.toml");
    std::fs::write(&config_path, config).unwrap();
    Fixture {
        dir,
        config_path,
        out_dir,
    }
}

fn parse(fixture: &Fixture) -> PipelineConfig {
    PipelineConfig::parse(Some(&fixture.config_path), &Overrides::default()).unwrap()
}

fn run_all(cfg: &PipelineConfig) {
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
        pipeline::run(cmd, cfg).unwrap_or_else(|e| panic!("{} failed: {e}", cmd.name()));
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let fixture = write_fixture("out");
    let cfg = parse(&fixture);
    run_all(&cfg);

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
        "prep_manifest.json",
        "predict_manifest.json",
    ] {
        assert!(
            fixture.out_dir.join(name).exists(),
            "missing artifact {name}"
        );
    }

    let kv = String::from_utf8(read(&fixture.out_dir.join(pipeline::REPORT_KV_FILE))).unwrap();
    assert!(kv.contains("MiF\t"));
    assert!(kv.contains("LCA-F\t"));

    // manifests carry content hashes for every input
    let manifest: serde_json::Value = serde_json::from_slice(&read(
        &fixture.out_dir.join("predict_manifest.json"),
    ))
    .unwrap();
    let inputs = manifest["inputs"].as_object().unwrap();
    assert!(!inputs.is_empty());
    for (_, hash) in inputs {
        assert_eq!(hash.as_str().unwrap().len(), 64);
    }
}

#[test]
fn stage_reruns_are_idempotent() {
    let fixture = write_fixture("out");
    let cfg = parse(&fixture);
    pipeline::run(Command::Prep, &cfg).unwrap();
    pipeline::run(Command::IndexBuild, &cfg).unwrap();
    let vocab1 = read(&fixture.out_dir.join(pipeline::VOCAB_FILE));
    let index1 = read(&fixture.out_dir.join(pipeline::INDEX_TENSORS_FILE));
    pipeline::run(Command::Prep, &cfg).unwrap();
    pipeline::run(Command::IndexBuild, &cfg).unwrap();
    assert_eq!(vocab1, read(&fixture.out_dir.join(pipeline::VOCAB_FILE)));
    assert_eq!(index1, read(&fixture.out_dir.join(pipeline::INDEX_TENSORS_FILE)));
}

#[test]
fn predict_without_thresholds_names_the_producer() {
    let fixture = write_fixture("out");
    let cfg = parse(&fixture);
    for cmd in [
        Command::Prep,
        Command::IndexBuild,
        Command::Retrieve,
        Command::Finetune,
    ] {
        pipeline::run(cmd, &cfg).unwrap();
    }
    let err = pipeline::run(Command::Predict, &cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    match err {
        Error::MissingArtifact { producer, .. } => assert_eq!(producer, "thresholds fit"),
        other => panic!("expected missing-artifact error, got {other}"),
    }
}

#[test]
fn missing_upstream_artifact_names_prep() {
    let fixture = write_fixture("out");
    let cfg = parse(&fixture);
    let err = pipeline::run(Command::IndexBuild, &cfg).unwrap_err();
    match err {
        Error::MissingArtifact { producer, .. } => assert_eq!(producer, "prep"),
        other => panic!("expected missing-artifact error, got {other}"),
    }
}

#[test]
fn evaluate_identity_fixture_scores_one() {
    let fixture = write_fixture("out");
    let dir = fixture.dir.path();
    std::fs::write(dir.join("gold.tsv"), "d1\tM01,M02\nd2\tM03\n").unwrap();
    std::fs::write(dir.join("pred.tsv"), "d1\tM01,M02\nd2\tM03\n").unwrap();
    let report =
        pipeline::evaluate_files(&dir.join("gold.tsv"), &dir.join("pred.tsv"), &dir.join("ontology.tsv"))
            .unwrap();
    assert_eq!(report.mif, 1.0);
    assert_eq!(report.lca_f, Some(1.0));
    assert_eq!(report.accuracy, 1.0);
}

#[test]
fn gold_labels_respect_joint_flag() {
    let spec = SyntheticSpec {
        n_train: 10,
        n_test: 5,
        n_ssl: 0,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let data = generate(&spec);
    let with_supp = data
        .train
        .iter()
        .find(|d| !d.supplementary.is_empty())
        .expect("some doc has supplementary labels");
    let majors: BTreeSet<String> = with_supp.gold_labels(false);
    let joint: BTreeSet<String> = with_supp.gold_labels(true);
    assert!(majors.len() < joint.len());
    assert!(majors.is_subset(&joint));
}
