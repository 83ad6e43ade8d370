//! The numerical core: stream-separated self-attention encoders for
//! document tokens and candidate indexes, scaled dot-product cross-attention
//! producing index-specific context vectors, the sigmoid projection head and
//! the masked-language-model head.
//!
//! Document and index streams never attend to each other during encoding;
//! only the document stream receives positional encoding. Candidates are
//! processed internally in canonical (sorted-id) order and mapped back to
//! presentation order, which makes every forward exactly equivariant under
//! candidate permutation, bit for bit.

mod checkpoint;
pub mod graph;

pub use checkpoint::{load_tensors, save_tensors};

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::corpus::MeshOntology;
use crate::error::{Error, Result};
use crate::retrieval::CandidateSet;
use crate::textprep::{TokenSequence, MASK_ID};
use graph::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub max_sequence_length: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.max_sequence_length == 0 {
            return Err(Error::Config("max_sequence_length must be positive".into()));
        }
        Ok(())
    }
}

/// Stable mapping from ontology node ids to embedding rows: every node,
/// major or supplementary, owns one row, in sorted-id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    ids: Vec<String>,
    rows: BTreeMap<String, usize>,
}

impl LabelSpace {
    pub fn from_ontology(onto: &MeshOntology) -> Self {
        let ids: Vec<String> = onto.node_ids().map(str::to_string).collect();
        let rows = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Self { ids, rows }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, id: &str) -> Option<usize> {
        self.rows.get(id).copied()
    }

    pub fn id(&self, row: usize) -> Option<&str> {
        self.ids.get(row).map(String::as_str)
    }
}

/// One encoder block: multi-head self-attention and position-wise
/// feed-forward, each followed by residual connection and layer norm.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: Arc<Array2<f64>>,
    pub wk: Arc<Array2<f64>>,
    pub wv: Arc<Array2<f64>>,
    pub wo: Arc<Array2<f64>>,
    pub attn_gain: Arc<Array2<f64>>,
    pub attn_bias: Arc<Array2<f64>>,
    pub ff_w1: Arc<Array2<f64>>,
    pub ff_b1: Arc<Array2<f64>>,
    pub ff_w2: Arc<Array2<f64>>,
    pub ff_b2: Arc<Array2<f64>>,
    pub ff_gain: Arc<Array2<f64>>,
    pub ff_bias: Arc<Array2<f64>>,
}

/// Named-tensor store for everything trainable.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Arc<Array2<f64>>,
    pub idx_emb: Arc<Array2<f64>>,
    pub doc_layers: Vec<LayerParams>,
    pub idx_layers: Vec<LayerParams>,
    pub mlm_mix_w: Arc<Array2<f64>>,
    pub mlm_mix_b: Arc<Array2<f64>>,
    pub mlm_out_w: Arc<Array2<f64>>,
    pub mlm_out_b: Arc<Array2<f64>>,
    pub proj_u: Arc<Array2<f64>>,
    pub proj_v: Arc<Array2<f64>>,
    /// Per-ontology-index bias, gathered into the candidate-shaped B.
    pub idx_bias: Arc<Array2<f64>>,
}

fn glorot(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Arc<Array2<f64>> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Arc::new(Array2::from_shape_fn((rows, cols), |_| {
        (rng.gen::<f64>() * 2.0 - 1.0) * limit
    }))
}

fn ones(cols: usize) -> Arc<Array2<f64>> {
    Arc::new(Array2::from_elem((1, cols), 1.0))
}

fn zeros(rows: usize, cols: usize) -> Arc<Array2<f64>> {
    Arc::new(Array2::zeros((rows, cols)))
}

impl ModelParams {
    /// Glorot-uniform initialization for matrices, zeros for biases, ones
    /// for layer-norm gains. Draw order is fixed, so a seed pins every
    /// weight bitwise.
    pub fn init(config: ModelConfig, vocab_size: usize, label_count: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 || label_count == 0 {
            return Err(Error::Config(
                "vocabulary and label space must be non-empty".into(),
            ));
        }
        let d = config.d_model;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let tok_emb = glorot(&mut rng, vocab_size, d);
        let idx_emb = glorot(&mut rng, label_count, d);
        let layer = |rng: &mut ChaCha20Rng| LayerParams {
            wq: glorot(rng, d, d),
            wk: glorot(rng, d, d),
            wv: glorot(rng, d, d),
            wo: glorot(rng, d, d),
            attn_gain: ones(d),
            attn_bias: zeros(1, d),
            ff_w1: glorot(rng, d, config.d_ff),
            ff_b1: zeros(1, config.d_ff),
            ff_w2: glorot(rng, config.d_ff, d),
            ff_b2: zeros(1, d),
            ff_gain: ones(d),
            ff_bias: zeros(1, d),
        };
        let doc_layers: Vec<LayerParams> = (0..config.n_layers).map(|_| layer(&mut rng)).collect();
        let idx_layers: Vec<LayerParams> = (0..config.n_layers).map(|_| layer(&mut rng)).collect();
        Ok(Self {
            config,
            tok_emb,
            idx_emb,
            doc_layers,
            idx_layers,
            mlm_mix_w: glorot(&mut rng, 2 * d, d),
            mlm_mix_b: zeros(1, d),
            mlm_out_w: glorot(&mut rng, d, vocab_size),
            mlm_out_b: zeros(1, vocab_size),
            // the projection head starts at exactly sigma(0) = 0.5 for every
            // candidate; a Glorot-scaled head on top of trained encoder
            // activations saturates the sigmoid before learning begins
            proj_u: zeros(1, d),
            proj_v: zeros(1, d),
            idx_bias: zeros(label_count, 1),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_emb.nrows()
    }

    pub fn label_count(&self) -> usize {
        self.idx_emb.nrows()
    }

    /// All trainable tensors with stable names, in a fixed order shared by
    /// the optimizer, checkpoints and the gradient checker.
    pub fn named_tensors(&self) -> Vec<(String, &Arc<Array2<f64>>)> {
        let mut out: Vec<(String, &Arc<Array2<f64>>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("idx_emb".into(), &self.idx_emb),
        ];
        for (prefix, layers) in [("doc", &self.doc_layers), ("idx", &self.idx_layers)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.wq"), &l.wq));
                out.push((format!("{prefix}.{i}.wk"), &l.wk));
                out.push((format!("{prefix}.{i}.wv"), &l.wv));
                out.push((format!("{prefix}.{i}.wo"), &l.wo));
                out.push((format!("{prefix}.{i}.attn_gain"), &l.attn_gain));
                out.push((format!("{prefix}.{i}.attn_bias"), &l.attn_bias));
                out.push((format!("{prefix}.{i}.ff_w1"), &l.ff_w1));
                out.push((format!("{prefix}.{i}.ff_b1"), &l.ff_b1));
                out.push((format!("{prefix}.{i}.ff_w2"), &l.ff_w2));
                out.push((format!("{prefix}.{i}.ff_b2"), &l.ff_b2));
                out.push((format!("{prefix}.{i}.ff_gain"), &l.ff_gain));
                out.push((format!("{prefix}.{i}.ff_bias"), &l.ff_bias));
            }
        }
        out.push(("mlm.mix_w".into(), &self.mlm_mix_w));
        out.push(("mlm.mix_b".into(), &self.mlm_mix_b));
        out.push(("mlm.out_w".into(), &self.mlm_out_w));
        out.push(("mlm.out_b".into(), &self.mlm_out_b));
        out.push(("proj.u".into(), &self.proj_u));
        out.push(("proj.v".into(), &self.proj_v));
        out.push(("proj.idx_bias".into(), &self.idx_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Arc<Array2<f64>>)> {
        let mut out: Vec<(String, &mut Arc<Array2<f64>>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("idx_emb".into(), &mut self.idx_emb),
        ];
        for (prefix, layers) in [("doc", &mut self.doc_layers), ("idx", &mut self.idx_layers)] {
            for (i, l) in layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.{i}.wq"), &mut l.wq));
                out.push((format!("{prefix}.{i}.wk"), &mut l.wk));
                out.push((format!("{prefix}.{i}.wv"), &mut l.wv));
                out.push((format!("{prefix}.{i}.wo"), &mut l.wo));
                out.push((format!("{prefix}.{i}.attn_gain"), &mut l.attn_gain));
                out.push((format!("{prefix}.{i}.attn_bias"), &mut l.attn_bias));
                out.push((format!("{prefix}.{i}.ff_w1"), &mut l.ff_w1));
                out.push((format!("{prefix}.{i}.ff_b1"), &mut l.ff_b1));
                out.push((format!("{prefix}.{i}.ff_w2"), &mut l.ff_w2));
                out.push((format!("{prefix}.{i}.ff_b2"), &mut l.ff_b2));
                out.push((format!("{prefix}.{i}.ff_gain"), &mut l.ff_gain));
                out.push((format!("{prefix}.{i}.ff_bias"), &mut l.ff_bias));
            }
        }
        out.push(("mlm.mix_w".into(), &mut self.mlm_mix_w));
        out.push(("mlm.mix_b".into(), &mut self.mlm_mix_b));
        out.push(("mlm.out_w".into(), &mut self.mlm_out_w));
        out.push(("mlm.out_b".into(), &mut self.mlm_out_b));
        out.push(("proj.u".into(), &mut self.proj_u));
        out.push(("proj.v".into(), &mut self.proj_v));
        out.push(("proj.idx_bias".into(), &mut self.idx_bias));
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let cfg = Array2::from_shape_vec(
            (1, 6),
            vec![
                self.config.d_model as f64,
                self.config.n_layers as f64,
                self.config.d_ff as f64,
                self.config.n_heads as f64,
                self.config.max_sequence_length as f64,
                self.config.dropout,
            ],
        )
        .expect("config shape");
        let mut tensors: Vec<(String, &Array2<f64>)> = vec![("__config__".into(), &cfg)];
        let named = self.named_tensors();
        tensors.extend(named.iter().map(|(n, t)| (n.clone(), t.as_ref())));
        save_tensors(path, &tensors)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut tensors: BTreeMap<String, Array2<f64>> =
            load_tensors(path)?.into_iter().collect();
        let cfg = tensors
            .remove("__config__")
            .ok_or_else(|| Error::InvalidInput(format!("{}: missing __config__", path.display())))?;
        if cfg.len() != 6 {
            return Err(Error::InvalidInput("bad __config__ tensor".into()));
        }
        let config = ModelConfig {
            d_model: cfg[[0, 0]] as usize,
            n_layers: cfg[[0, 1]] as usize,
            d_ff: cfg[[0, 2]] as usize,
            n_heads: cfg[[0, 3]] as usize,
            max_sequence_length: cfg[[0, 4]] as usize,
            dropout: cfg[[0, 5]],
        };
        config.validate()?;
        let mut take = |name: String| -> Result<Arc<Array2<f64>>> {
            tensors
                .remove(&name)
                .map(Arc::new)
                .ok_or_else(|| Error::InvalidInput(format!("checkpoint missing tensor {name:?}")))
        };
        let tok_emb = take("tok_emb".into())?;
        let idx_emb = take("idx_emb".into())?;
        let layers = |prefix: &str, take: &mut dyn FnMut(String) -> Result<Arc<Array2<f64>>>| {
            (0..config.n_layers)
                .map(|i| {
                    Ok(LayerParams {
                        wq: take(format!("{prefix}.{i}.wq"))?,
                        wk: take(format!("{prefix}.{i}.wk"))?,
                        wv: take(format!("{prefix}.{i}.wv"))?,
                        wo: take(format!("{prefix}.{i}.wo"))?,
                        attn_gain: take(format!("{prefix}.{i}.attn_gain"))?,
                        attn_bias: take(format!("{prefix}.{i}.attn_bias"))?,
                        ff_w1: take(format!("{prefix}.{i}.ff_w1"))?,
                        ff_b1: take(format!("{prefix}.{i}.ff_b1"))?,
                        ff_w2: take(format!("{prefix}.{i}.ff_w2"))?,
                        ff_b2: take(format!("{prefix}.{i}.ff_b2"))?,
                        ff_gain: take(format!("{prefix}.{i}.ff_gain"))?,
                        ff_bias: take(format!("{prefix}.{i}.ff_bias"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        let doc_layers = layers("doc", &mut take)?;
        let idx_layers = layers("idx", &mut take)?;
        let params = Self {
            config,
            tok_emb,
            idx_emb,
            doc_layers,
            idx_layers,
            mlm_mix_w: take("mlm.mix_w".into())?,
            mlm_mix_b: take("mlm.mix_b".into())?,
            mlm_out_w: take("mlm.out_w".into())?,
            mlm_out_b: take("mlm.out_b".into())?,
            proj_u: take("proj.u".into())?,
            proj_v: take("proj.v".into())?,
            idx_bias: take("proj.idx_bias".into())?,
        };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.config.d_model;
        let checks = [
            (self.tok_emb.ncols() == d, "tok_emb"),
            (self.idx_emb.ncols() == d, "idx_emb"),
            (self.mlm_mix_w.nrows() == 2 * d && self.mlm_mix_w.ncols() == d, "mlm.mix_w"),
            (self.mlm_out_w.nrows() == d, "mlm.out_w"),
            (self.proj_u.ncols() == d, "proj.u"),
            (self.proj_v.ncols() == d, "proj.v"),
            (self.idx_bias.nrows() == self.idx_emb.nrows(), "proj.idx_bias"),
        ];
        for (ok, name) in checks {
            if !ok {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name} inconsistent with model config"
                )));
            }
        }
        for t in self.named_tensors() {
            if t.1.iter().any(|v| !v.is_finite()) {
                return Err(Error::ShapeMismatch(format!("tensor {} not finite", t.0)));
            }
        }
        Ok(())
    }
}

/// Sinusoidal positional encoding, sin on even columns, cos on odd ones.
pub fn positional_encoding(length: usize, d_model: usize) -> Array2<f64> {
    Array2::from_shape_fn((length, d_model), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d_model as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Document and index encodings produced by the two self-attention streams.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub doc: Array2<f64>,
    pub idx: Array2<f64>,
}

/// Candidate ids rearranged into canonical sorted order plus the mapping
/// back to presentation order.
pub(crate) struct CandidateLayout {
    /// Embedding rows in canonical order.
    pub rows: Vec<usize>,
    /// For presentation position i, the canonical position of that id.
    pub to_canonical: Vec<usize>,
}

pub(crate) fn candidate_layout(ids: &[String], space: &LabelSpace) -> Result<CandidateLayout> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("empty candidate set".into()));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let mut rows = Vec::with_capacity(ids.len());
    let mut to_canonical = vec![0usize; ids.len()];
    for (canonical, &pres) in order.iter().enumerate() {
        let id = &ids[pres];
        let row = space
            .row(id)
            .ok_or_else(|| Error::InvalidInput(format!("candidate {id:?} not in the ontology")))?;
        rows.push(row);
        to_canonical[pres] = canonical;
    }
    Ok(CandidateLayout { rows, to_canonical })
}

/// Node handles for every parameter tensor inserted into a tape.
pub(crate) struct ParamNodes {
    pub tok_emb: NodeId,
    pub idx_emb: NodeId,
    pub doc_layers: Vec<LayerNodes>,
    pub idx_layers: Vec<LayerNodes>,
    pub mlm_mix_w: NodeId,
    pub mlm_mix_b: NodeId,
    pub mlm_out_w: NodeId,
    pub mlm_out_b: NodeId,
    pub proj_u: NodeId,
    pub proj_v: NodeId,
    pub idx_bias: NodeId,
}

pub(crate) struct LayerNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub attn_gain: NodeId,
    pub attn_bias: NodeId,
    pub ff_w1: NodeId,
    pub ff_b1: NodeId,
    pub ff_w2: NodeId,
    pub ff_b2: NodeId,
    pub ff_gain: NodeId,
    pub ff_bias: NodeId,
}

impl ParamNodes {
    pub fn insert(tape: &mut Tape, params: &ModelParams) -> Self {
        let layer = |tape: &mut Tape, l: &LayerParams| LayerNodes {
            wq: tape.leaf_shared(l.wq.clone()),
            wk: tape.leaf_shared(l.wk.clone()),
            wv: tape.leaf_shared(l.wv.clone()),
            wo: tape.leaf_shared(l.wo.clone()),
            attn_gain: tape.leaf_shared(l.attn_gain.clone()),
            attn_bias: tape.leaf_shared(l.attn_bias.clone()),
            ff_w1: tape.leaf_shared(l.ff_w1.clone()),
            ff_b1: tape.leaf_shared(l.ff_b1.clone()),
            ff_w2: tape.leaf_shared(l.ff_w2.clone()),
            ff_b2: tape.leaf_shared(l.ff_b2.clone()),
            ff_gain: tape.leaf_shared(l.ff_gain.clone()),
            ff_bias: tape.leaf_shared(l.ff_bias.clone()),
        };
        Self {
            tok_emb: tape.leaf_shared(params.tok_emb.clone()),
            idx_emb: tape.leaf_shared(params.idx_emb.clone()),
            doc_layers: params.doc_layers.iter().map(|l| layer(tape, l)).collect(),
            idx_layers: params.idx_layers.iter().map(|l| layer(tape, l)).collect(),
            mlm_mix_w: tape.leaf_shared(params.mlm_mix_w.clone()),
            mlm_mix_b: tape.leaf_shared(params.mlm_mix_b.clone()),
            mlm_out_w: tape.leaf_shared(params.mlm_out_w.clone()),
            mlm_out_b: tape.leaf_shared(params.mlm_out_b.clone()),
            proj_u: tape.leaf_shared(params.proj_u.clone()),
            proj_v: tape.leaf_shared(params.proj_v.clone()),
            idx_bias: tape.leaf_shared(params.idx_bias.clone()),
        }
    }

    /// Node ids in `named_tensors` order, for gradient extraction.
    pub fn ordered_ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.tok_emb, self.idx_emb];
        for layers in [&self.doc_layers, &self.idx_layers] {
            for l in layers {
                out.extend([
                    l.wq, l.wk, l.wv, l.wo, l.attn_gain, l.attn_bias, l.ff_w1, l.ff_b1, l.ff_w2,
                    l.ff_b2, l.ff_gain, l.ff_bias,
                ]);
            }
        }
        out.extend([
            self.mlm_mix_w,
            self.mlm_mix_b,
            self.mlm_out_w,
            self.mlm_out_b,
            self.proj_u,
            self.proj_v,
            self.idx_bias,
        ]);
        out
    }
}

/// Inverted-dropout context used only during training.
pub(crate) struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut ChaCha20Rng,
}

fn apply_dropout(tape: &mut Tape, x: NodeId, dropout: &mut Option<Dropout<'_>>) -> NodeId {
    let Some(ctx) = dropout else {
        return x;
    };
    if ctx.p <= 0.0 {
        return x;
    }
    let shape = tape.value(x).raw_dim();
    let keep = 1.0 - ctx.p;
    let mask = Array2::from_shape_fn(shape, |_| {
        if ctx.rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    tape.mul_const(x, mask)
}

fn encoder_block(
    tape: &mut Tape,
    x: NodeId,
    layer: &LayerNodes,
    cfg: &ModelConfig,
    dropout: &mut Option<Dropout<'_>>,
) -> NodeId {
    let d_k = cfg.d_model / cfg.n_heads;
    let q = tape.matmul(x, layer.wq);
    let k = tape.matmul(x, layer.wk);
    let v = tape.matmul(x, layer.wv);
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * d_k, d_k);
        let kh = tape.slice_cols(k, h * d_k, d_k);
        let vh = tape.slice_cols(v, h * d_k, d_k);
        let logits = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(logits, 1.0 / (d_k as f64).sqrt());
        let weights = tape.softmax_rows(scaled);
        heads.push(tape.matmul(weights, vh));
    }
    let ctx = tape.concat_cols(&heads);
    let attn = tape.matmul(ctx, layer.wo);
    let attn = apply_dropout(tape, attn, dropout);
    let res = tape.add(x, attn);
    let x = tape.layer_norm(res, layer.attn_gain, layer.attn_bias);

    let h1 = tape.matmul(x, layer.ff_w1);
    let h1 = tape.add_row(h1, layer.ff_b1);
    let h1 = tape.gelu(h1);
    let ff = tape.matmul(h1, layer.ff_w2);
    let ff = tape.add_row(ff, layer.ff_b2);
    let ff = apply_dropout(tape, ff, dropout);
    let res = tape.add(x, ff);
    tape.layer_norm(res, layer.ff_gain, layer.ff_bias)
}

fn encoder_stack(
    tape: &mut Tape,
    mut x: NodeId,
    layers: &[LayerNodes],
    cfg: &ModelConfig,
    dropout: &mut Option<Dropout<'_>>,
) -> NodeId {
    for layer in layers {
        x = encoder_block(tape, x, layer, cfg, dropout);
    }
    x
}

/// Both encoder streams on one tape: documents get positional encoding,
/// indexes do not, and there is no cross-stream attention inside.
pub(crate) fn build_streams(
    tape: &mut Tape,
    p: &ParamNodes,
    cfg: &ModelConfig,
    token_ids: &[usize],
    cand_rows: &[usize],
    dropout: &mut Option<Dropout<'_>>,
) -> (NodeId, NodeId) {
    let doc0 = tape.gather_rows(p.tok_emb, token_ids);
    let pe = positional_encoding(token_ids.len(), cfg.d_model);
    let doc0 = tape.add_const(doc0, &pe);
    let doc0 = apply_dropout(tape, doc0, dropout);
    let doc = encoder_stack(tape, doc0, &p.doc_layers, cfg, dropout);

    let idx0 = tape.gather_rows(p.idx_emb, cand_rows);
    let idx0 = apply_dropout(tape, idx0, dropout);
    let idx = encoder_stack(tape, idx0, &p.idx_layers, cfg, dropout);
    (doc, idx)
}

/// Index-side cross attention: O = Softmax(M' D'^T / sqrt(d)) D'.
pub(crate) fn build_cross_attention(
    tape: &mut Tape,
    doc: NodeId,
    idx: NodeId,
    d_model: usize,
) -> NodeId {
    let logits = tape.matmul_nt(idx, doc);
    let scaled = tape.scale(logits, 1.0 / (d_model as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    tape.matmul(weights, doc)
}

/// Likelihood scores: sigma(U O^T + V M'^T + B), one per candidate row.
pub(crate) fn build_projection(
    tape: &mut Tape,
    p: &ParamNodes,
    o: NodeId,
    idx: NodeId,
    cand_rows: &[usize],
) -> NodeId {
    let ou = tape.matmul_nt(o, p.proj_u);
    let mv = tape.matmul_nt(idx, p.proj_v);
    let b = tape.gather_rows(p.idx_bias, cand_rows);
    let sum = tape.add(ou, mv);
    let logits = tape.add(sum, b);
    tape.sigmoid(logits)
}

/// Whole classification forward on one tape, candidates in canonical order.
pub(crate) fn build_index_scores(
    tape: &mut Tape,
    p: &ParamNodes,
    cfg: &ModelConfig,
    token_ids: &[usize],
    layout: &CandidateLayout,
    dropout: &mut Option<Dropout<'_>>,
) -> NodeId {
    let (doc, idx) = build_streams(tape, p, cfg, token_ids, &layout.rows, dropout);
    let o = build_cross_attention(tape, doc, idx, cfg.d_model);
    build_projection(tape, p, o, idx, &layout.rows)
}

/// MLM forward: word-side cross attention (softmax over the index axis)
/// concatenated with the document encodings, linearly mixed and projected to
/// vocabulary logits.
pub(crate) fn build_mlm_logits(
    tape: &mut Tape,
    p: &ParamNodes,
    cfg: &ModelConfig,
    token_ids: &[usize],
    layout: &CandidateLayout,
    dropout: &mut Option<Dropout<'_>>,
) -> NodeId {
    let (doc, idx) = build_streams(tape, p, cfg, token_ids, &layout.rows, dropout);
    let logits = tape.matmul_nt(doc, idx);
    let scaled = tape.scale(logits, 1.0 / (cfg.d_model as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    let word_ctx = tape.matmul(weights, idx);
    let cat = tape.concat_cols(&[doc, word_ctx]);
    let mixed = tape.matmul(cat, p.mlm_mix_w);
    let mixed = tape.add_row(mixed, p.mlm_mix_b);
    let out = tape.matmul(mixed, p.mlm_out_w);
    tape.add_row(out, p.mlm_out_b)
}

fn token_rows(seq: &TokenSequence, params: &ModelParams) -> Result<Vec<usize>> {
    if seq.is_empty() {
        return Err(Error::InvalidInput(format!(
            "document {:?} has an empty token sequence",
            seq.doc_id
        )));
    }
    let vocab = params.vocab_size();
    seq.ids
        .iter()
        .map(|&id| {
            let row = id as usize;
            if row >= vocab {
                Err(Error::ShapeMismatch(format!(
                    "token id {id} outside vocabulary of {vocab}"
                )))
            } else {
                Ok(row)
            }
        })
        .collect()
}

/// Encode both streams. The index rows of the result follow the
/// presentation order of `candidates`; internally candidates are processed
/// in canonical order, making the encoding exactly permutation-equivariant.
pub fn encode_streams(
    seq: &TokenSequence,
    candidates: &[String],
    params: &ModelParams,
    space: &LabelSpace,
) -> Result<EncodedPair> {
    let tokens = token_rows(seq, params)?;
    let layout = candidate_layout(candidates, space)?;
    let mut tape = Tape::new();
    let p = ParamNodes::insert(&mut tape, params);
    let (doc, idx) = build_streams(&mut tape, &p, &params.config, &tokens, &layout.rows, &mut None);
    let idx_canonical = tape.value(idx);
    let mut idx_pres = Array2::zeros((candidates.len(), params.config.d_model));
    for (pres, &canon) in layout.to_canonical.iter().enumerate() {
        idx_pres.row_mut(pres).assign(&idx_canonical.row(canon));
    }
    Ok(EncodedPair {
        doc: tape.value(doc).clone(),
        idx: idx_pres,
    })
}

/// Attention weights of the index-side cross attention, rows summing to 1.
pub fn cross_attention_weights(pair: &EncodedPair, d_model: usize) -> Array2<f64> {
    let mut tape = Tape::new();
    let doc = tape.leaf(pair.doc.clone());
    let idx = tape.leaf(pair.idx.clone());
    let logits = tape.matmul_nt(idx, doc);
    let scaled = tape.scale(logits, 1.0 / (d_model as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    tape.value(weights).clone()
}

/// Index-specific context vectors from an encoded pair.
pub fn cross_attention(pair: &EncodedPair, d_model: usize) -> Array2<f64> {
    let mut tape = Tape::new();
    let doc = tape.leaf(pair.doc.clone());
    let idx = tape.leaf(pair.idx.clone());
    let o = build_cross_attention(&mut tape, doc, idx, d_model);
    tape.value(o).clone()
}

/// Projection head on precomputed context and index encodings.
pub fn project_scores(
    o: &Array2<f64>,
    idx_enc: &Array2<f64>,
    candidates: &[String],
    params: &ModelParams,
    space: &LabelSpace,
) -> Result<Vec<f64>> {
    if o.nrows() != idx_enc.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "context rows {} vs index rows {}",
            o.nrows(),
            idx_enc.nrows()
        )));
    }
    let rows: Vec<usize> = candidates
        .iter()
        .map(|id| {
            space
                .row(id)
                .ok_or_else(|| Error::InvalidInput(format!("candidate {id:?} not in the ontology")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let p = ParamNodes::insert(&mut tape, params);
    let o = tape.leaf(o.clone());
    let idx = tape.leaf(idx_enc.clone());
    let scores = build_projection(&mut tape, &p, o, idx, &rows);
    Ok(tape.value(scores).column(0).to_vec())
}

/// Full classification forward: likelihood score per candidate, in the
/// candidate set's presentation order. Deterministic; dropout is inactive.
pub fn forward_index(
    seq: &TokenSequence,
    candidates: &CandidateSet,
    params: &ModelParams,
    space: &LabelSpace,
) -> Result<Vec<f64>> {
    let tokens = token_rows(seq, params)?;
    let ids = candidates.ids();
    let layout = candidate_layout(&ids, space)?;
    let mut tape = Tape::new();
    let p = ParamNodes::insert(&mut tape, params);
    let scores = build_index_scores(&mut tape, &p, &params.config, &tokens, &layout, &mut None);
    let canonical = tape.value(scores);
    Ok(layout
        .to_canonical
        .iter()
        .map(|&c| canonical[[c, 0]])
        .collect())
}

/// MLM forward over a masked sequence: vocabulary logits per position.
pub fn forward_mlm(
    masked: &TokenSequence,
    candidates: &CandidateSet,
    params: &ModelParams,
    space: &LabelSpace,
) -> Result<Array2<f64>> {
    if !masked.ids.contains(&MASK_ID) {
        return Err(Error::InvalidInput(format!(
            "document {:?} carries no MASK position",
            masked.doc_id
        )));
    }
    let tokens = token_rows(masked, params)?;
    let ids = candidates.ids();
    let layout = candidate_layout(&ids, space)?;
    let mut tape = Tape::new();
    let p = ParamNodes::insert(&mut tape, params);
    let logits = build_mlm_logits(&mut tape, &p, &params.config, &tokens, &layout, &mut None);
    Ok(tape.value(logits).clone())
}

/// Word-side attention weights inside the MLM head (softmax over indexes).
pub fn mlm_attention_weights(pair: &EncodedPair, d_model: usize) -> Array2<f64> {
    let mut tape = Tape::new();
    let doc = tape.leaf(pair.doc.clone());
    let idx = tape.leaf(pair.idx.clone());
    let logits = tape.matmul_nt(doc, idx);
    let scaled = tape.scale(logits, 1.0 / (d_model as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    tape.value(weights).clone()
}

#[cfg(test)]
pub(crate) fn layer_norm_reference(x: &Array2<f64>) -> Array2<f64> {
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone());
    let gain = tape.leaf(Array2::from_elem((1, x.ncols()), 1.0));
    let bias = tape.leaf(Array2::zeros((1, x.ncols())));
    let out = tape.layer_norm(xn, gain, bias);
    tape.value(out).clone()
}
