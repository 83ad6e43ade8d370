//! MLM pretraining, supervised fine-tuning, losses, the Adam optimizer,
//! early stopping and the finite-difference gradient oracle.
//!
//! Every random draw flows from the run seed through fixed derivation tags,
//! so identical configs reproduce checkpoints bit for bit.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::retrieval::CandidateSet;
use crate::textprep::{TokenSequence, MASK_ID};
use crate::transformer::graph::{NodeId, Tape};
use crate::transformer::{
    build_index_scores, build_mlm_logits, candidate_layout, CandidateLayout, Dropout, LabelSpace,
    ModelParams, ParamNodes,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub mask_rate: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 16,
            max_epochs: 30,
            patience: 5,
            mask_rate: 0.15,
            seed: 7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.mask_rate) || self.mask_rate == 0.0 {
            return Err(Error::Config("mask_rate must be in (0, 1)".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_mif: Option<f64>,
}

/// Per-epoch record of a training run. Wall-clock time is kept in memory
/// and logged, but never written into comparable artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub seed: u64,
    pub wall_secs: f64,
}

impl TrainReport {
    /// Log lines, one per epoch, without timing.
    pub fn log_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!("epoch\t{}\ttrain_loss\t{}", e.epoch, e.train_loss));
            if let Some(v) = e.val_loss {
                out.push_str(&format!("\tval_loss\t{v}"));
            }
            if let Some(v) = e.val_mif {
                out.push_str(&format!("\tval_mif\t{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "seed\t{}\nepochs\t{}\nbest_epoch\t{}\n",
            self.seed, self.stopped_epoch, self.best_epoch
        )
    }
}

const TAG_SHUFFLE: u64 = 0x5348;
const TAG_MASK: u64 = 0x4d41;
const TAG_VAL_MASK: u64 = 0x564d;
const TAG_DROPOUT: u64 = 0x4452;

/// splitmix64-style seed derivation; fixed tags keep streams independent.
fn subseed(seed: u64, tag: u64, k: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ k.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Masked copy of a token sequence plus the (position, original id) targets.
///
/// Draw protocol, reproducible from the seed alone:
/// 1. `ceil(mask_rate * len)` positions via partial Fisher-Yates over
///    `0..len`, then sorted ascending;
/// 2. per position, one uniform draw: < 0.8 replaces with MASK, < 0.9 with a
///    random non-reserved token id, otherwise the token stays.
pub fn mask_tokens(
    seq: &TokenSequence,
    mask_rate: f64,
    vocab_size: usize,
    seed: u64,
) -> Result<(TokenSequence, Vec<(usize, u32)>)> {
    if mask_rate <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "mask_rate must be positive, got {mask_rate}"
        )));
    }
    if seq.is_empty() {
        return Err(Error::InvalidInput(format!(
            "cannot mask empty sequence {:?}",
            seq.doc_id
        )));
    }
    let len = seq.len();
    let n_mask = ((mask_rate * len as f64).ceil() as usize).clamp(1, len);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = (0..len).collect();
    for i in 0..n_mask {
        let j = rng.gen_range(i..len);
        positions.swap(i, j);
    }
    let mut selected: Vec<usize> = positions[..n_mask].to_vec();
    selected.sort_unstable();

    let mut masked = seq.clone();
    let mut targets = Vec::with_capacity(n_mask);
    for &pos in &selected {
        let original = seq.ids[pos];
        targets.push((pos, original));
        let u: f64 = rng.gen();
        if u < 0.8 {
            masked.ids[pos] = MASK_ID;
        } else if u < 0.9 && vocab_size > 3 {
            masked.ids[pos] = rng.gen_range(3..vocab_size) as u32;
        }
    }
    Ok((masked, targets))
}

/// Mean binary cross-entropy with scores clipped into [1e-7, 1 - 1e-7].
pub fn bce_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput("empty score vector".into()));
    }
    let eps = crate::transformer::graph::BCE_EPS;
    let mut loss = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        let sc = s.clamp(eps, 1.0 - eps);
        loss -= y * sc.ln() + (1.0 - y) * (1.0 - sc).ln();
    }
    Ok(loss / scores.len() as f64)
}

/// Adam with global gradient-norm clipping at 1.0. State tensors follow the
/// `named_tensors` order of the model.
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
    cfg: TrainConfig,
}

pub const GRAD_CLIP: f64 = 1.0;

impl Adam {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        let shapes: Vec<_> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Array2::zeros(t.raw_dim()))
            .collect();
        Self {
            m: shapes.clone(),
            v: shapes,
            t: 0,
            cfg: *cfg,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Array2<f64>]) {
        let norm: f64 = grads.iter().map(|g| g.mapv(|x| x * x).sum()).sum::<f64>().sqrt();
        let scale = if norm > GRAD_CLIP { GRAD_CLIP / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for ((i, (_, tensor)), grad) in params.named_tensors_mut().into_iter().enumerate().zip(grads)
        {
            let g = grad * scale;
            self.m[i] = &self.m[i] * self.cfg.beta1 + &g * (1.0 - self.cfg.beta1);
            self.v[i] = &self.v[i] * self.cfg.beta2 + &g.mapv(|x| x * x) * (1.0 - self.cfg.beta2);
            let target = Arc::make_mut(tensor);
            ndarray::Zip::from(&mut *target)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.eps);
                });
        }
    }
}

/// Evaluate a loss graph and pull gradients in `named_tensors` order,
/// substituting zeros for tensors the loss does not touch.
pub(crate) fn loss_and_grads<F>(params: &ModelParams, build: F) -> Result<(f64, Vec<Array2<f64>>)>
where
    F: FnOnce(&mut Tape, &ParamNodes) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let nodes = ParamNodes::insert(&mut tape, params);
    let loss = build(&mut tape, &nodes)?;
    let value = tape.value(loss)[[0, 0]];
    let mut grads = tape.backward(loss);
    let out = nodes
        .ordered_ids()
        .iter()
        .zip(params.named_tensors())
        .map(|(&id, (_, t))| grads.take(id).unwrap_or_else(|| Array2::zeros(t.raw_dim())))
        .collect();
    Ok((value, out))
}

/// Gold labels aligned with the canonical (sorted) candidate order.
fn canonical_labels(cands: &CandidateSet, gold: &BTreeSet<String>) -> Vec<f64> {
    let mut ids = cands.ids();
    ids.sort();
    ids.iter()
        .map(|id| if gold.contains(id) { 1.0 } else { 0.0 })
        .collect()
}

fn token_rows(seq: &TokenSequence) -> Vec<usize> {
    seq.ids.iter().map(|&id| id as usize).collect()
}

pub(crate) fn index_loss_graph(
    tape: &mut Tape,
    nodes: &ParamNodes,
    params: &ModelParams,
    space: &LabelSpace,
    seq: &TokenSequence,
    cands: &CandidateSet,
    gold: &BTreeSet<String>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<NodeId> {
    let ids = cands.ids();
    let layout: CandidateLayout = candidate_layout(&ids, space)?;
    let scores = build_index_scores(
        tape,
        nodes,
        &params.config,
        &token_rows(seq),
        &layout,
        dropout,
    );
    Ok(tape.bce_mean(scores, canonical_labels(cands, gold)))
}

pub(crate) fn mlm_loss_graph(
    tape: &mut Tape,
    nodes: &ParamNodes,
    params: &ModelParams,
    space: &LabelSpace,
    masked: &TokenSequence,
    targets: &[(usize, u32)],
    cands: &CandidateSet,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<NodeId> {
    if targets.is_empty() {
        return Err(Error::InvalidInput("no mask targets".into()));
    }
    let ids = cands.ids();
    let layout = candidate_layout(&ids, space)?;
    let logits = build_mlm_logits(
        tape,
        nodes,
        &params.config,
        &token_rows(masked),
        &layout,
        dropout,
    );
    let ce_targets: Vec<(usize, usize)> =
        targets.iter().map(|&(p, id)| (p, id as usize)).collect();
    Ok(tape.masked_ce(logits, ce_targets))
}

/// BCE loss of one document, value only. Used by the gradient oracle.
pub fn index_loss(
    params: &ModelParams,
    space: &LabelSpace,
    seq: &TokenSequence,
    cands: &CandidateSet,
    gold: &BTreeSet<String>,
) -> Result<f64> {
    let (value, _) = loss_and_grads(params, |tape, nodes| {
        index_loss_graph(tape, nodes, params, space, seq, cands, gold, &mut None)
    })?;
    Ok(value)
}

/// Analytic gradients of the document BCE loss for every trainable tensor.
pub fn index_loss_grads(
    params: &ModelParams,
    space: &LabelSpace,
    seq: &TokenSequence,
    cands: &CandidateSet,
    gold: &BTreeSet<String>,
) -> Result<(f64, Vec<(String, Array2<f64>)>)> {
    let (value, grads) = loss_and_grads(params, |tape, nodes| {
        index_loss_graph(tape, nodes, params, space, seq, cands, gold, &mut None)
    })?;
    let names = params.named_tensors();
    Ok((
        value,
        names
            .into_iter()
            .map(|(n, _)| n)
            .zip(grads)
            .collect(),
    ))
}

/// MLM cross-entropy of one masked document, value only.
pub fn mlm_loss(
    params: &ModelParams,
    space: &LabelSpace,
    masked: &TokenSequence,
    targets: &[(usize, u32)],
    cands: &CandidateSet,
) -> Result<f64> {
    let (value, _) = loss_and_grads(params, |tape, nodes| {
        mlm_loss_graph(tape, nodes, params, space, masked, targets, cands, &mut None)
    })?;
    Ok(value)
}

/// Analytic gradients of the MLM loss for every trainable tensor.
pub fn mlm_loss_grads(
    params: &ModelParams,
    space: &LabelSpace,
    masked: &TokenSequence,
    targets: &[(usize, u32)],
    cands: &CandidateSet,
) -> Result<(f64, Vec<(String, Array2<f64>)>)> {
    let (value, grads) = loss_and_grads(params, |tape, nodes| {
        mlm_loss_graph(tape, nodes, params, space, masked, targets, cands, &mut None)
    })?;
    let names = params.named_tensors();
    Ok((
        value,
        names
            .into_iter()
            .map(|(n, _)| n)
            .zip(grads)
            .collect(),
    ))
}

/// Central finite differences of an arbitrary scalar loss over every
/// parameter entry: (f(p + eps) - f(p - eps)) / (2 eps).
pub fn finite_difference_grad<F>(
    loss: F,
    params: &ModelParams,
    eps: f64,
) -> Result<Vec<(String, Array2<f64>)>>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    let mut work = params.clone();
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        let shape = params.named_tensors()[ti].1.raw_dim();
        let mut grad = Array2::zeros(shape);
        let (rows, cols) = (grad.nrows(), grad.ncols());
        for r in 0..rows {
            for c in 0..cols {
                let original = work.named_tensors()[ti].1[[r, c]];
                {
                    let mut tensors = work.named_tensors_mut();
                    Arc::make_mut(tensors[ti].1)[[r, c]] = original + eps;
                }
                let plus = loss(&work)?;
                {
                    let mut tensors = work.named_tensors_mut();
                    Arc::make_mut(tensors[ti].1)[[r, c]] = original - eps;
                }
                let minus = loss(&work)?;
                {
                    let mut tensors = work.named_tensors_mut();
                    Arc::make_mut(tensors[ti].1)[[r, c]] = original;
                }
                grad[[r, c]] = (plus - minus) / (2.0 * eps);
            }
        }
        out.push((name.clone(), grad));
    }
    Ok(out)
}

/// One pretraining document: its sequence and retrieved candidate indexes.
#[derive(Debug, Clone)]
pub struct PretrainDoc {
    pub seq: TokenSequence,
    pub candidates: CandidateSet,
}

/// One fine-tuning document: sequence, candidates (gold-unioned for
/// training-split docs) and the gold label set used for loss and metrics.
#[derive(Debug, Clone)]
pub struct FinetuneDoc {
    pub seq: TokenSequence,
    pub candidates: CandidateSet,
    pub gold: BTreeSet<String>,
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

struct EarlyStop {
    best_metric: f64,
    higher_is_better: bool,
    best_epoch: usize,
    bad_epochs: usize,
    patience: usize,
}

impl EarlyStop {
    fn new(higher_is_better: bool, patience: usize) -> Self {
        Self {
            best_metric: if higher_is_better {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            },
            higher_is_better,
            best_epoch: 0,
            bad_epochs: 0,
            patience,
        }
    }

    /// Returns true when this epoch improved the best metric.
    fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        let improved = if self.higher_is_better {
            metric > self.best_metric
        } else {
            metric < self.best_metric
        };
        if improved {
            self.best_metric = metric;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        improved
    }

    fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

/// Micro-F over per-document scores at a fixed 0.5 cutoff; the cheap
/// validation metric for fine-tuning early stops.
fn mif_at_half(scored: &[(Vec<String>, Vec<f64>, &BTreeSet<String>)]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (ids, scores, gold) in scored {
        let predicted: BTreeSet<&str> = ids
            .iter()
            .zip(scores)
            .filter(|(_, &s)| s > 0.5)
            .map(|(id, _)| id.as_str())
            .collect();
        tp += predicted.iter().filter(|id| gold.contains(**id)).count();
        fp += predicted.iter().filter(|id| !gold.contains(**id)).count();
        fn_ += gold
            .iter()
            .filter(|g| !predicted.contains(g.as_str()))
            .count();
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Adam-optimize the MLM objective on an unlabeled corpus. Early stopping
/// watches validation MLM loss (fixed validation masks); the returned
/// parameters are the best-epoch snapshot.
pub fn pretrain(
    train: &[PretrainDoc],
    val: &[PretrainDoc],
    init: ModelParams,
    space: &LabelSpace,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    let start = std::time::Instant::now();
    let mut params = init;
    let vocab = params.vocab_size();
    let mut adam = Adam::new(&params, cfg);
    let mut best = params.clone();
    let mut stopper = EarlyStop::new(false, cfg.patience);
    let mut report = TrainReport {
        epochs: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
        seed: cfg.seed,
        wall_secs: 0.0,
    };
    if train.is_empty() {
        report.wall_secs = start.elapsed().as_secs_f64();
        return Ok((params, report));
    }

    for epoch in 1..=cfg.max_epochs {
        let order = shuffled(train.len(), subseed(cfg.seed, TAG_SHUFFLE, epoch as u64));
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Option<Vec<Array2<f64>>> = None;
            let mut batch_loss = 0.0;
            for &di in batch {
                let doc = &train[di];
                let mask_seed = subseed(cfg.seed, TAG_MASK.wrapping_add(epoch as u64), di as u64);
                let (masked, targets) = mask_tokens(&doc.seq, cfg.mask_rate, vocab, mask_seed)?;
                let mut drop_rng = ChaCha20Rng::seed_from_u64(subseed(
                    cfg.seed,
                    TAG_DROPOUT.wrapping_add(epoch as u64),
                    di as u64,
                ));
                let p = params.config.dropout;
                let (loss, grads) = loss_and_grads(&params, |tape, nodes| {
                    let mut dropout = if p > 0.0 {
                        Some(Dropout {
                            p,
                            rng: &mut drop_rng,
                        })
                    } else {
                        None
                    };
                    mlm_loss_graph(
                        tape, nodes, &params, space, &masked, &targets, &doc.candidates,
                        &mut dropout,
                    )
                })?;
                batch_loss += loss;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            *a += g;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("pretrain epoch {epoch} batch {batch_no}"),
                });
            }
            let mut grads = acc.expect("non-empty batch");
            for g in &mut grads {
                *g *= scale;
            }
            adam.step(&mut params, &grads);
            epoch_loss += batch_loss * batch.len() as f64;
        }
        epoch_loss /= train.len() as f64;

        let val_loss = if val.is_empty() {
            None
        } else {
            let mut sum = 0.0;
            for (di, doc) in val.iter().enumerate() {
                let mask_seed = subseed(cfg.seed, TAG_VAL_MASK, di as u64);
                let (masked, targets) = mask_tokens(&doc.seq, cfg.mask_rate, vocab, mask_seed)?;
                sum += mlm_loss(&params, space, &masked, &targets, &doc.candidates)?;
            }
            Some(sum / val.len() as f64)
        };

        report.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss,
            val_loss,
            val_mif: None,
        });
        report.stopped_epoch = epoch;

        let metric = val_loss.unwrap_or(epoch_loss);
        if stopper.observe(epoch, metric) {
            best = params.clone();
            report.best_epoch = epoch;
        }
        if stopper.should_stop() {
            break;
        }
    }
    report.wall_secs = start.elapsed().as_secs_f64();
    if report.best_epoch == 0 {
        // no epoch ran or none improved; fall back to the final state
        best = params;
        report.best_epoch = report.stopped_epoch;
    }
    Ok((best, report))
}

/// Adam-optimize mean BCE over candidate scores. Early stopping watches
/// validation micro-F at the 0.5 cutoff; returns the best-epoch snapshot.
pub fn finetune(
    train: &[FinetuneDoc],
    val: &[FinetuneDoc],
    init: ModelParams,
    space: &LabelSpace,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    let start = std::time::Instant::now();
    let mut params = init;
    let mut adam = Adam::new(&params, cfg);
    let mut best = params.clone();
    let mut stopper = EarlyStop::new(true, cfg.patience);
    let mut report = TrainReport {
        epochs: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
        seed: cfg.seed,
        wall_secs: 0.0,
    };
    if train.is_empty() {
        report.wall_secs = start.elapsed().as_secs_f64();
        return Ok((params, report));
    }

    for epoch in 1..=cfg.max_epochs {
        let order = shuffled(train.len(), subseed(cfg.seed, TAG_SHUFFLE, epoch as u64));
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Option<Vec<Array2<f64>>> = None;
            let mut batch_loss = 0.0;
            for &di in batch {
                let doc = &train[di];
                let mut drop_rng = ChaCha20Rng::seed_from_u64(subseed(
                    cfg.seed,
                    TAG_DROPOUT.wrapping_add(epoch as u64),
                    di as u64,
                ));
                let p = params.config.dropout;
                let (loss, grads) = loss_and_grads(&params, |tape, nodes| {
                    let mut dropout = if p > 0.0 {
                        Some(Dropout {
                            p,
                            rng: &mut drop_rng,
                        })
                    } else {
                        None
                    };
                    index_loss_graph(
                        tape,
                        nodes,
                        &params,
                        space,
                        &doc.seq,
                        &doc.candidates,
                        &doc.gold,
                        &mut dropout,
                    )
                })?;
                batch_loss += loss;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            *a += g;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("finetune epoch {epoch} batch {batch_no}"),
                });
            }
            let mut grads = acc.expect("non-empty batch");
            for g in &mut grads {
                *g *= scale;
            }
            adam.step(&mut params, &grads);
            epoch_loss += batch_loss * batch.len() as f64;
        }
        epoch_loss /= train.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("finetune epoch {epoch}"),
            });
        }

        let val_mif = if val.is_empty() {
            None
        } else {
            let mut scored = Vec::with_capacity(val.len());
            for doc in val {
                let scores =
                    crate::transformer::forward_index(&doc.seq, &doc.candidates, &params, space)?;
                scored.push((doc.candidates.ids(), scores, &doc.gold));
            }
            Some(mif_at_half(&scored))
        };

        report.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss,
            val_loss: None,
            val_mif,
        });
        report.stopped_epoch = epoch;

        match val_mif {
            Some(mif) => {
                if stopper.observe(epoch, mif) {
                    best = params.clone();
                    report.best_epoch = epoch;
                }
                if stopper.should_stop() {
                    break;
                }
            }
            None => {
                // no validation split: keep the latest state
                best = params.clone();
                report.best_epoch = epoch;
            }
        }
    }
    report.wall_secs = start.elapsed().as_secs_f64();
    if report.best_epoch == 0 {
        best = params;
        report.best_epoch = report.stopped_epoch;
    }
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;
    use approx::assert_relative_eq;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            d_ff: 16,
            n_heads: 2,
            max_sequence_length: 64,
            dropout: 0.0,
        }
    }

    fn space(n: usize) -> LabelSpace {
        let onto = crate::corpus::MeshOntology::new(
            (0..n)
                .map(|i| {
                    (
                        format!("m{i:02}"),
                        crate::corpus::OntologyNode {
                            kind: crate::corpus::NodeKind::Major,
                            name: format!("m{i:02}"),
                        },
                    )
                })
                .collect(),
            vec![],
        )
        .unwrap();
        LabelSpace::from_ontology(&onto)
    }

    fn seq(id: &str, ids: &[u32]) -> TokenSequence {
        TokenSequence {
            doc_id: id.into(),
            terms: ids.iter().map(|i| format!("t{i}")).collect(),
            ids: ids.to_vec(),
        }
    }

    fn cands(ids: &[&str]) -> CandidateSet {
        CandidateSet {
            doc_id: "d".into(),
            candidates: ids.iter().map(|i| (i.to_string(), 1.0)).collect(),
        }
    }

    #[test]
    fn mask_ceiling_rule_keeps_at_least_one() {
        let s = seq("d", &[3, 4, 5, 6, 7, 8, 9, 10, 11, 12]);
        let (_, targets) = mask_tokens(&s, 0.001, 100, 7).unwrap();
        assert_eq!(targets.len(), 1);
        let (_, targets) = mask_tokens(&s, 0.15, 100, 7).unwrap();
        assert_eq!(targets.len(), 2); // ceil(1.5)
        assert!(mask_tokens(&s, 0.0, 100, 7).is_err());
    }

    #[test]
    fn masking_is_seed_deterministic() {
        let s = seq("d", &(3..40).collect::<Vec<u32>>());
        let a = mask_tokens(&s, 0.15, 100, 42).unwrap();
        let b = mask_tokens(&s, 0.15, 100, 42).unwrap();
        assert_eq!(a, b);
        let c = mask_tokens(&s, 0.15, 100, 43).unwrap();
        assert_ne!(a, c);
    }

    /// Independent replay of the documented draw protocol.
    #[test]
    fn masking_matches_reference_rng_trace() {
        let ids: Vec<u32> = (3..103).collect();
        let s = seq("d", &ids);
        let (masked, targets) = mask_tokens(&s, 0.15, 100, 99).unwrap();
        assert_eq!(targets.len(), 15);

        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let len = 100;
        let mut positions: Vec<usize> = (0..len).collect();
        for i in 0..15 {
            let j = rng.gen_range(i..len);
            positions.swap(i, j);
        }
        let mut selected: Vec<usize> = positions[..15].to_vec();
        selected.sort_unstable();
        let mut expect_ids = ids.clone();
        let mut expect_targets = Vec::new();
        for &pos in &selected {
            expect_targets.push((pos, ids[pos]));
            let u: f64 = rng.gen();
            if u < 0.8 {
                expect_ids[pos] = MASK_ID;
            } else if u < 0.9 {
                expect_ids[pos] = rng.gen_range(3usize..100) as u32;
            }
        }
        assert_eq!(targets, expect_targets);
        assert_eq!(masked.ids, expect_ids);
        // corruption split: MASK positions dominate
        let n_masked = selected.iter().filter(|&&p| masked.ids[p] == MASK_ID).count();
        assert!(n_masked >= 9, "expected mostly MASK corruption, got {n_masked}");
    }

    #[test]
    fn bce_known_values() {
        assert_relative_eq!(
            bce_loss(&[0.5, 0.5, 0.5], &[1.0, 0.0, 1.0]).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );
        let eps = crate::transformer::graph::BCE_EPS;
        let perfect = bce_loss(&[1.0 - eps, eps], &[1.0, 0.0]).unwrap();
        assert!(perfect < 1e-5);
        assert_relative_eq!(
            bce_loss(&[0.9, 0.2], &[1.0, 0.0]).unwrap(),
            -(0.9f64.ln() + 0.8f64.ln()) / 2.0,
            epsilon = 1e-12
        );
        assert!(bce_loss(&[0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn finite_difference_on_quadratic_probe() {
        // f(theta) = theta^2 over a single designated entry
        let params = ModelParams::init(tiny_config(), 10, 2, 1).unwrap();
        let mut probe = params.clone();
        {
            let mut tensors = probe.named_tensors_mut();
            Arc::make_mut(tensors[0].1)[[0, 0]] = 3.0;
        }
        let grads = finite_difference_grad(
            |p| Ok(p.named_tensors()[0].1[[0, 0]].powi(2)),
            &probe,
            1e-4,
        )
        .unwrap();
        assert_relative_eq!(grads[0].1[[0, 0]], 6.0, epsilon = 1e-8);
    }

    #[test]
    fn analytic_bce_gradients_match_finite_differences() {
        let sp = space(3);
        let params = ModelParams::init(tiny_config(), 20, 3, 5).unwrap();
        let s = seq("d", &[3, 7, 11, 4, 9]);
        let c = cands(&["m01", "m00"]);
        let gold: BTreeSet<String> = ["m00".to_string()].into();
        let (_, analytic) = index_loss_grads(&params, &sp, &s, &c, &gold).unwrap();
        let numeric =
            finite_difference_grad(|p| index_loss(p, &sp, &s, &c, &gold), &params, 1e-5).unwrap();
        for ((name, a), (_, n)) in analytic.iter().zip(&numeric) {
            let na = a.mapv(|x| x * x).sum().sqrt();
            let nn = n.mapv(|x| x * x).sum().sqrt();
            let diff = (a - n).mapv(|x| x * x).sum().sqrt();
            let denom = na.max(nn).max(1e-12);
            assert!(
                diff / denom < 1e-6,
                "tensor {name}: rel err {}",
                diff / denom
            );
        }
    }

    #[test]
    fn learning_rate_zero_freezes_parameters_bitwise() {
        let sp = space(2);
        let params = ModelParams::init(tiny_config(), 15, 2, 3).unwrap();
        let docs = vec![FinetuneDoc {
            seq: seq("d", &[3, 4, 5]),
            candidates: cands(&["m00", "m01"]),
            gold: ["m00".to_string()].into(),
        }];
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (trained, _) = finetune(&docs, &[], params.clone(), &sp, &cfg).unwrap();
        for ((_, a), (_, b)) in params.named_tensors().iter().zip(trained.named_tensors()) {
            assert_eq!(a.as_ref(), b.as_ref());
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let sp = space(2);
        let params = ModelParams::init(tiny_config(), 15, 2, 3).unwrap();
        let docs = vec![PretrainDoc {
            seq: seq("d", &[3, 4, 5, 6]),
            candidates: cands(&["m00"]),
        }];
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let (out, report) = pretrain(&docs, &[], params.clone(), &sp, &cfg).unwrap();
        assert_eq!(report.stopped_epoch, 0);
        assert!(report.epochs.is_empty());
        for ((_, a), (_, b)) in params.named_tensors().iter().zip(out.named_tensors()) {
            assert_eq!(a.as_ref(), b.as_ref());
        }
    }

    #[test]
    fn pretraining_is_bitwise_deterministic() {
        let sp = space(3);
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mk_docs = || -> Vec<PretrainDoc> {
            (0..6)
                .map(|i| PretrainDoc {
                    seq: seq(&format!("d{i}"), &[3 + i, 4 + i, 5 + i, 6 + i, 7 + i]),
                    candidates: cands(&["m00", "m02"]),
                })
                .collect()
        };
        let init = ModelParams::init(tiny_config(), 15, 3, 9).unwrap();
        let (a, ra) = pretrain(&mk_docs(), &[], init.clone(), &sp, &cfg).unwrap();
        let (b, rb) = pretrain(&mk_docs(), &[], init, &sp, &cfg).unwrap();
        // wall-clock differs between runs; everything else must match
        assert_eq!(ra.epochs, rb.epochs);
        assert_eq!(ra.best_epoch, rb.best_epoch);
        for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert_eq!(ta.as_ref(), tb.as_ref());
        }
    }

    #[test]
    fn early_stopping_returns_best_snapshot() {
        let sp = space(2);
        // one training doc and one validation doc with conflicting labels:
        // validation MiF degrades while the train loss keeps improving.
        let train = vec![FinetuneDoc {
            seq: seq("t", &[3, 4, 5]),
            candidates: cands(&["m00", "m01"]),
            gold: ["m00".to_string()].into(),
        }];
        let val = vec![FinetuneDoc {
            seq: seq("v", &[3, 4, 5]),
            candidates: cands(&["m00", "m01"]),
            gold: ["m01".to_string()].into(),
        }];
        let cfg = TrainConfig {
            max_epochs: 40,
            patience: 3,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let init = ModelParams::init(tiny_config(), 15, 2, 11).unwrap();
        let (best, report) = finetune(&train, &val, init, &sp, &cfg).unwrap();
        assert!(report.stopped_epoch <= report.best_epoch + cfg.patience);
        // best snapshot reproduces the recorded best validation MiF
        let best_mif = report
            .epochs
            .iter()
            .map(|e| e.val_mif.unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let scores =
            crate::transformer::forward_index(&val[0].seq, &val[0].candidates, &best, &sp).unwrap();
        let scored = vec![(val[0].candidates.ids(), scores, &val[0].gold)];
        assert_relative_eq!(mif_at_half(&scored), best_mif, epsilon = 1e-12);
        // best-so-far validation metric is non-decreasing across the report
        let mut best_so_far = f64::NEG_INFINITY;
        for e in &report.epochs {
            best_so_far = best_so_far.max(e.val_mif.unwrap());
            assert!(best_so_far >= e.val_mif.unwrap() - 1e-15);
        }
    }

    #[test]
    fn joint_mode_scores_cover_appended_supplementary_ids() {
        // shape contract: 2 majors + 3 supplementary appended
        let sp = space(5);
        let params = ModelParams::init(tiny_config(), 15, 5, 3).unwrap();
        let c = cands(&["m00", "m01", "m02", "m03", "m04"]);
        let scores =
            crate::transformer::forward_index(&seq("d", &[3, 4]), &c, &params, &sp).unwrap();
        assert_eq!(scores.len(), 5);
    }
}
