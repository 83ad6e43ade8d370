//! Pipeline configuration: TOML file, profile presets, flag overrides and
//! the `MESHDEX_OUT` environment override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{DEFAULT_BM25_B, DEFAULT_BM25_K1, DEFAULT_CANDIDATES, DEFAULT_RETRIEVED_DOCS};
use crate::training::TrainConfig;
use crate::transformer::ModelConfig;

pub const DEFAULT_VOCAB_SIZE: usize = 90_000;
pub const DEFAULT_FRACTIONS: [f64; 6] = [0.0, 0.05, 0.1, 0.2, 0.5, 1.0];

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    paths: RawPaths,
    #[serde(default)]
    retrieval: RawRetrieval,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    mode: RawMode,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawPaths {
    train_corpus: Option<String>,
    test_corpus: Option<String>,
    ssl_corpus: Option<String>,
    ontology: Option<String>,
    embeddings: Option<String>,
    stopwords: Option<String>,
    out_dir: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawRetrieval {
    k: Option<usize>,
    m: Option<usize>,
    weighting: Option<String>,
    bm25_k1: Option<f64>,
    bm25_b: Option<f64>,
    embedding_init: Option<String>,
    embedding_dim: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    profile: Option<String>,
    d_model: Option<usize>,
    n_layers: Option<usize>,
    d_ff: Option<usize>,
    n_heads: Option<usize>,
    max_sequence_length: Option<usize>,
    dropout: Option<f64>,
    vocab_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    mask_rate: Option<f64>,
    seed: Option<u64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawMode {
    joint_supplementary: Option<bool>,
    fractions: Option<Vec<f64>>,
}

/// Flag-level overrides, applied after the file and profile presets.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub profile: Option<String>,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub joint_supplementary: Option<bool>,
    pub fractions: Option<Vec<f64>>,
    pub out_dir: Option<PathBuf>,
    pub embedding_init: Option<String>,
    pub embedding_dim: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingInit {
    File,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightingKind {
    TfIdf,
    Bm25,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub train_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub ssl_corpus: Option<PathBuf>,
    pub ontology: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub k: usize,
    pub m: usize,
    pub weighting: WeightingKind,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub embedding_init: EmbeddingInit,
    pub embedding_dim: usize,

    pub model: ModelConfig,
    pub vocab_size: usize,
    pub train: TrainConfig,
    pub joint_supplementary: bool,
    pub fractions: Vec<f64>,
}

struct Preset {
    d_model: usize,
    n_layers: usize,
    d_ff: usize,
    n_heads: usize,
    learning_rate: f64,
}

fn preset(profile: &str) -> Result<Preset> {
    match profile {
        "base" => Ok(Preset {
            d_model: 256,
            n_layers: 4,
            d_ff: 256,
            n_heads: 4,
            learning_rate: 5e-4,
        }),
        "large" => Ok(Preset {
            d_model: 1024,
            n_layers: 6,
            d_ff: 512,
            n_heads: 8,
            learning_rate: 1e-4,
        }),
        other => Err(Error::Config(format!(
            "unknown profile {other:?}, expected \"base\" or \"large\""
        ))),
    }
}

impl PipelineConfig {
    /// Parse a config file and apply overrides: defaults, then the profile
    /// preset, then explicit file keys, then flags, then `MESHDEX_OUT`.
    pub fn parse(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let raw: RawConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RawConfig::default(),
        };
        Self::resolve(raw, overrides, path)
    }

    fn resolve(raw: RawConfig, ov: &Overrides, base: Option<&Path>) -> Result<Self> {
        // relative paths resolve against the config file's directory
        let resolve_path = |s: &String| -> PathBuf {
            let p = PathBuf::from(s);
            if p.is_absolute() {
                return p;
            }
            match base.and_then(Path::parent) {
                Some(dir) => dir.join(p),
                None => p,
            }
        };

        let profile_name = ov.profile.clone().or(raw.model.profile.clone());
        let pres = match &profile_name {
            Some(name) => Some(preset(name)?),
            None => None,
        };
        let pick = |explicit: Option<usize>, from_preset: Option<usize>, default: usize| {
            explicit.or(from_preset).unwrap_or(default)
        };

        let model = ModelConfig {
            d_model: pick(raw.model.d_model, pres.as_ref().map(|p| p.d_model), 256),
            n_layers: pick(raw.model.n_layers, pres.as_ref().map(|p| p.n_layers), 4),
            d_ff: pick(raw.model.d_ff, pres.as_ref().map(|p| p.d_ff), 256),
            n_heads: pick(raw.model.n_heads, pres.as_ref().map(|p| p.n_heads), 4),
            max_sequence_length: raw.model.max_sequence_length.unwrap_or(256),
            dropout: raw.model.dropout.unwrap_or(0.0),
        };
        model.validate()?;

        let train = TrainConfig {
            learning_rate: raw
                .train
                .learning_rate
                .or(pres.as_ref().map(|p| p.learning_rate))
                .unwrap_or(5e-4),
            batch_size: raw.train.batch_size.unwrap_or(16),
            max_epochs: raw.train.max_epochs.unwrap_or(30),
            patience: raw.train.patience.unwrap_or(5),
            mask_rate: raw.train.mask_rate.unwrap_or(0.15),
            seed: ov.seed.or(raw.train.seed).unwrap_or(7),
            beta1: raw.train.beta1.unwrap_or(0.9),
            beta2: raw.train.beta2.unwrap_or(0.999),
            eps: raw.train.eps.unwrap_or(1e-8),
        };
        train.validate()?;

        let weighting = match raw.retrieval.weighting.as_deref() {
            None | Some("tfidf") => WeightingKind::TfIdf,
            Some("bm25") => WeightingKind::Bm25,
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown weighting {other:?}, expected \"tfidf\" or \"bm25\""
                )))
            }
        };
        let embedding_init = match ov
            .embedding_init
            .as_deref()
            .or(raw.retrieval.embedding_init.as_deref())
        {
            None | Some("file") => EmbeddingInit::File,
            Some("random") => EmbeddingInit::Random,
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown embedding_init {other:?}, expected \"file\" or \"random\""
                )))
            }
        };

        let out_dir = ov
            .out_dir
            .clone()
            .or_else(|| std::env::var("MESHDEX_OUT").ok().map(PathBuf::from))
            .or_else(|| raw.paths.out_dir.as_ref().map(resolve_path))
            .unwrap_or_else(|| PathBuf::from("meshdex-out"));

        let fractions = ov
            .fractions
            .clone()
            .or(raw.mode.fractions.clone())
            .unwrap_or_else(|| DEFAULT_FRACTIONS.to_vec());
        for pair in fractions.windows(2) {
            if pair[0] > pair[1] {
                return Err(Error::Config(format!(
                    "fractions must be ascending, got {} after {}",
                    pair[1], pair[0]
                )));
            }
        }
        if let Some(bad) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::Config(format!("fraction {bad} outside [0, 1]")));
        }

        let cfg = Self {
            train_corpus: raw.paths.train_corpus.as_ref().map(resolve_path),
            test_corpus: raw.paths.test_corpus.as_ref().map(resolve_path),
            ssl_corpus: raw.paths.ssl_corpus.as_ref().map(resolve_path),
            ontology: raw.paths.ontology.as_ref().map(resolve_path),
            embeddings: raw.paths.embeddings.as_ref().map(resolve_path),
            stopwords: raw.paths.stopwords.as_ref().map(resolve_path),
            out_dir,
            k: ov.k.or(raw.retrieval.k).unwrap_or(DEFAULT_RETRIEVED_DOCS),
            m: ov.m.or(raw.retrieval.m).unwrap_or(DEFAULT_CANDIDATES),
            weighting,
            bm25_k1: raw.retrieval.bm25_k1.unwrap_or(DEFAULT_BM25_K1),
            bm25_b: raw.retrieval.bm25_b.unwrap_or(DEFAULT_BM25_B),
            embedding_init,
            embedding_dim: ov
                .embedding_dim
                .or(raw.retrieval.embedding_dim)
                .unwrap_or(256),
            model,
            vocab_size: raw.model.vocab_size.unwrap_or(DEFAULT_VOCAB_SIZE),
            train,
            joint_supplementary: ov
                .joint_supplementary
                .or(raw.mode.joint_supplementary)
                .unwrap_or(false),
            fractions,
        };
        cfg.validate_static()?;
        Ok(cfg)
    }

    fn validate_static(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(Error::Config("k and m must be positive".into()));
        }
        if self.vocab_size <= 3 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for reserved ids",
                self.vocab_size
            )));
        }
        if self.bm25_k1 <= 0.0 || !(0.0..=1.0).contains(&self.bm25_b) {
            return Err(Error::Config("bm25 parameters out of range".into()));
        }
        Ok(())
    }

    /// Verify every configured input path exists; run at command start.
    pub fn check_paths(&self) -> Result<()> {
        let paths = [
            ("train_corpus", &self.train_corpus),
            ("test_corpus", &self.test_corpus),
            ("ssl_corpus", &self.ssl_corpus),
            ("ontology", &self.ontology),
            ("embeddings", &self.embeddings),
            ("stopwords", &self.stopwords),
        ];
        for (name, path) in paths {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "{name} path {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    fn required(&self, field: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
        value
            .clone()
            .ok_or_else(|| Error::Config(format!("[paths] {field} is required for this command")))
    }

    pub fn require_train_corpus(&self) -> Result<PathBuf> {
        self.required("train_corpus", &self.train_corpus)
    }

    pub fn require_test_corpus(&self) -> Result<PathBuf> {
        self.required("test_corpus", &self.test_corpus)
    }

    pub fn require_ssl_corpus(&self) -> Result<PathBuf> {
        self.required("ssl_corpus", &self.ssl_corpus)
    }

    pub fn require_ontology(&self) -> Result<PathBuf> {
        self.required("ontology", &self.ontology)
    }

    pub fn require_stopwords(&self) -> Result<PathBuf> {
        self.required("stopwords", &self.stopwords)
    }

    /// Resolved-config snapshot for manifests; deterministic rendering.
    pub fn snapshot(&self) -> String {
        let raw = RawConfig {
            paths: RawPaths {
                train_corpus: self.train_corpus.as_ref().map(|p| p.display().to_string()),
                test_corpus: self.test_corpus.as_ref().map(|p| p.display().to_string()),
                ssl_corpus: self.ssl_corpus.as_ref().map(|p| p.display().to_string()),
                ontology: self.ontology.as_ref().map(|p| p.display().to_string()),
                embeddings: self.embeddings.as_ref().map(|p| p.display().to_string()),
                stopwords: self.stopwords.as_ref().map(|p| p.display().to_string()),
                out_dir: None, // differs per run; not part of the snapshot
            },
            retrieval: RawRetrieval {
                k: Some(self.k),
                m: Some(self.m),
                weighting: Some(
                    match self.weighting {
                        WeightingKind::TfIdf => "tfidf",
                        WeightingKind::Bm25 => "bm25",
                    }
                    .to_string(),
                ),
                bm25_k1: Some(self.bm25_k1),
                bm25_b: Some(self.bm25_b),
                embedding_init: Some(
                    match self.embedding_init {
                        EmbeddingInit::File => "file",
                        EmbeddingInit::Random => "random",
                    }
                    .to_string(),
                ),
                embedding_dim: Some(self.embedding_dim),
            },
            model: RawModel {
                profile: None,
                d_model: Some(self.model.d_model),
                n_layers: Some(self.model.n_layers),
                d_ff: Some(self.model.d_ff),
                n_heads: Some(self.model.n_heads),
                max_sequence_length: Some(self.model.max_sequence_length),
                dropout: Some(self.model.dropout),
                vocab_size: Some(self.vocab_size),
            },
            train: RawTrain {
                learning_rate: Some(self.train.learning_rate),
                batch_size: Some(self.train.batch_size),
                max_epochs: Some(self.train.max_epochs),
                patience: Some(self.train.patience),
                mask_rate: Some(self.train.mask_rate),
                seed: Some(self.train.seed),
                beta1: Some(self.train.beta1),
                beta2: Some(self.train.beta2),
                eps: Some(self.train.eps),
            },
            mode: RawMode {
                joint_supplementary: Some(self.joint_supplementary),
                fractions: Some(self.fractions.clone()),
            },
        };
        toml::to_string(&raw).expect("config serializes")
    }
}
