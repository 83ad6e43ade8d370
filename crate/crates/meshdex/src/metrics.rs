//! Flat multi-label measures (micro/macro P-R-F, example-averaged Jaccard
//! accuracy) and the hierarchical lowest-common-ancestor F-measure over the
//! ontology DAG.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::corpus::MeshOntology;
use crate::error::{Error, Result};

/// Predicted label set of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    pub doc_id: String,
    pub predicted: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mip: f64,
    pub mir: f64,
    pub mif: f64,
    pub map: f64,
    pub mar: f64,
    pub maf: f64,
    /// Example-averaged Jaccard overlap; 1.0 for doubly-empty documents.
    pub accuracy: f64,
    /// Fraction of documents predicted exactly.
    pub subset_accuracy: f64,
    pub lca_p: Option<f64>,
    pub lca_r: Option<f64>,
    pub lca_f: Option<f64>,
    /// Per-index (tp, fp, fn) pooled over documents.
    pub per_index: BTreeMap<String, (u32, u32, u32)>,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Flat micro/macro measures and both accuracy notions.
pub fn flat_metrics(
    preds: &[PredictionSet],
    golds: &BTreeMap<String, BTreeSet<String>>,
) -> Result<MetricsReport> {
    let pred_ids: BTreeSet<&str> = preds.iter().map(|p| p.doc_id.as_str()).collect();
    let gold_ids: BTreeSet<&str> = golds.keys().map(String::as_str).collect();
    if pred_ids != gold_ids || pred_ids.len() != preds.len() {
        return Err(Error::InvalidInput(format!(
            "prediction/gold document sets differ ({} predictions, {} golds)",
            preds.len(),
            golds.len()
        )));
    }

    let mut per_index: BTreeMap<String, (u32, u32, u32)> = BTreeMap::new();
    let mut jaccard_sum = 0.0;
    let mut subset_hits = 0usize;
    for pred in preds {
        let gold = &golds[&pred.doc_id];
        for id in pred.predicted.intersection(gold) {
            per_index.entry(id.clone()).or_insert((0, 0, 0)).0 += 1;
        }
        for id in pred.predicted.difference(gold) {
            per_index.entry(id.clone()).or_insert((0, 0, 0)).1 += 1;
        }
        for id in gold.difference(&pred.predicted) {
            per_index.entry(id.clone()).or_insert((0, 0, 0)).2 += 1;
        }
        let union = pred.predicted.union(gold).count();
        let inter = pred.predicted.intersection(gold).count();
        jaccard_sum += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        if pred.predicted == *gold {
            subset_hits += 1;
        }
    }

    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for &(a, b, c) in per_index.values() {
        tp += a as u64;
        fp += b as u64;
        fn_ += c as u64;
    }
    let mip = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let mir = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };

    // macro over indexes appearing in golds or predictions
    let mut map = 0.0;
    let mut mar = 0.0;
    let mut maf = 0.0;
    for &(tp, fp, fn_) in per_index.values() {
        let p = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let r = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        map += p;
        mar += r;
        maf += harmonic(p, r);
    }
    let n_idx = per_index.len().max(1) as f64;
    map /= n_idx;
    mar /= n_idx;
    maf /= n_idx;

    let n_docs = preds.len().max(1) as f64;
    Ok(MetricsReport {
        mip,
        mir,
        mif: harmonic(mip, mir),
        map,
        mar,
        maf,
        accuracy: jaccard_sum / n_docs,
        subset_accuracy: subset_hits as f64 / n_docs,
        lca_p: None,
        lca_r: None,
        lca_f: None,
        per_index,
    })
}

/// Cached upward-distance maps per node.
struct AncestorCache<'a> {
    onto: &'a MeshOntology,
    dist: BTreeMap<String, BTreeMap<String, usize>>,
}

impl<'a> AncestorCache<'a> {
    fn new(onto: &'a MeshOntology) -> Self {
        Self {
            onto,
            dist: BTreeMap::new(),
        }
    }

    fn distances(&mut self, id: &str) -> &BTreeMap<String, usize> {
        if !self.dist.contains_key(id) {
            let d = self.onto.ancestor_distances(id);
            self.dist.insert(id.to_string(), d);
        }
        &self.dist[id]
    }
}

/// One deterministic shortest upward path `from -> lca`, inclusive. At each
/// step the smallest-id parent lying on some shortest path is taken.
fn path_up(cache: &mut AncestorCache<'_>, from: &str, lca: &str) -> Vec<String> {
    let mut path = vec![from.to_string()];
    let mut cur = from.to_string();
    while cur != lca {
        let remaining = *cache.distances(&cur).get(lca).expect("lca reachable");
        let parents: Vec<String> = cache.onto.parents(&cur).to_vec();
        let mut next = None;
        for p in parents {
            if cache.distances(&p).get(lca) == Some(&(remaining - 1)) {
                next = Some(p);
                break; // parents are sorted; first hit is the smallest id
            }
        }
        cur = next.expect("shortest path step exists");
        path.push(cur.clone());
    }
    path
}

/// Augment `a_set` with, for each of its nodes, the nodes of one shortest
/// path to the best-matching node of `b_set` through their lowest common
/// ancestor. Ties break toward smaller ids; nodes of disconnected pairs
/// contribute only themselves.
pub fn lca_augment(
    a_set: &BTreeSet<String>,
    b_set: &BTreeSet<String>,
    onto: &MeshOntology,
) -> BTreeSet<String> {
    let mut cache = AncestorCache::new(onto);
    let mut out: BTreeSet<String> = a_set.clone();
    for a in a_set {
        let mut best: Option<(usize, &str, String)> = None; // (distance, b, lca)
        for b in b_set {
            let anc_a = cache.distances(a).clone();
            let anc_b = cache.distances(b).clone();
            let common: Vec<&String> = anc_a.keys().filter(|k| anc_b.contains_key(*k)).collect();
            if common.is_empty() {
                continue;
            }
            // lowest common ancestors: no other common node descends from them
            let mut pair_best: Option<(usize, String)> = None;
            for l in &common {
                let is_lowest = common.iter().all(|c| {
                    *c == *l || !cache.distances(c).contains_key(l.as_str())
                });
                if !is_lowest {
                    continue;
                }
                let d = anc_a[l.as_str()] + anc_b[l.as_str()];
                match &pair_best {
                    Some((bd, bl)) if d > *bd || (d == *bd && *l >= bl) => {}
                    _ => pair_best = Some((d, (*l).clone())),
                }
            }
            let Some((d, l)) = pair_best else {
                continue;
            };
            match &best {
                Some((bd, _, _)) if d >= *bd => {}
                _ => best = Some((d, b, l)),
            }
        }
        if let Some((_, b, l)) = best {
            out.extend(path_up(&mut cache, a, &l));
            out.extend(path_up(&mut cache, b, &l));
        }
    }
    out
}

/// Hierarchical LCA precision/recall/F, averaged over documents. A document
/// with an empty prediction against a non-empty gold scores zero; a document
/// where both augmented sets are empty scores one.
pub fn lca_f(
    preds: &[PredictionSet],
    golds: &BTreeMap<String, BTreeSet<String>>,
    onto: &MeshOntology,
) -> Result<(f64, f64, f64)> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("no documents to evaluate".into()));
    }
    let mut sum_p = 0.0;
    let mut sum_r = 0.0;
    let mut sum_f = 0.0;
    for pred in preds {
        let gold = golds.get(&pred.doc_id).ok_or_else(|| {
            Error::InvalidInput(format!("no gold labels for document {:?}", pred.doc_id))
        })?;
        for id in pred.predicted.iter().chain(gold.iter()) {
            if !onto.contains(id) {
                return Err(Error::InvalidInput(format!(
                    "label {id:?} not present in the ontology"
                )));
            }
        }
        let p_aug = lca_augment(&pred.predicted, gold, onto);
        let y_aug = lca_augment(gold, &pred.predicted, onto);
        let inter = p_aug.intersection(&y_aug).count() as f64;
        let (p, r) = if p_aug.is_empty() && y_aug.is_empty() {
            (1.0, 1.0)
        } else {
            (
                if p_aug.is_empty() {
                    0.0
                } else {
                    inter / p_aug.len() as f64
                },
                if y_aug.is_empty() {
                    0.0
                } else {
                    inter / y_aug.len() as f64
                },
            )
        };
        sum_p += p;
        sum_r += r;
        sum_f += harmonic(p, r);
    }
    let n = preds.len() as f64;
    Ok((sum_p / n, sum_r / n, sum_f / n))
}

/// Flat metrics plus the hierarchical measures when an ontology is given.
pub fn evaluate(
    preds: &[PredictionSet],
    golds: &BTreeMap<String, BTreeSet<String>>,
    onto: Option<&MeshOntology>,
) -> Result<MetricsReport> {
    let mut report = flat_metrics(preds, golds)?;
    if let Some(onto) = onto {
        if !preds.is_empty() {
            let (p, r, f) = lca_f(preds, golds, onto)?;
            report.lca_p = Some(p);
            report.lca_r = Some(r);
            report.lca_f = Some(f);
        }
    }
    Ok(report)
}

impl MetricsReport {
    /// Machine-readable key-value lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: f64| out.push_str(&format!("{k}\t{v}\n"));
        push("MiP", self.mip);
        push("MiR", self.mir);
        push("MiF", self.mif);
        push("MaP", self.map);
        push("MaR", self.mar);
        push("MaF", self.maf);
        push("accuracy", self.accuracy);
        push("subset_accuracy", self.subset_accuracy);
        if let (Some(p), Some(r), Some(f)) = (self.lca_p, self.lca_r, self.lca_f) {
            push("LCA-P", p);
            push("LCA-R", r);
            push("LCA-F", f);
        }
        out
    }

    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        let mut rows = vec![
            ("MiP", self.mip),
            ("MiR", self.mir),
            ("MiF", self.mif),
            ("MaP", self.map),
            ("MaR", self.mar),
            ("MaF", self.maf),
            ("accuracy", self.accuracy),
            ("subset_accuracy", self.subset_accuracy),
        ];
        if let (Some(p), Some(r), Some(f)) = (self.lca_p, self.lca_r, self.lca_f) {
            rows.push(("LCA-P", p));
            rows.push(("LCA-R", r));
            rows.push(("LCA-F", f));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<width$}  {v:.4}\n"));
        }
        out
    }
}

/// Read a `doc_id<TAB>comma-separated-ids` label file.
pub fn read_label_file(path: &Path) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (doc_id, labels) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: "expected doc_id<TAB>comma-separated ids".into(),
        })?;
        let set: BTreeSet<String> = labels
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        if out.insert(doc_id.to_string(), set).is_some() {
            return Err(Error::DuplicateId {
                path: path.display().to_string(),
                line: idx + 1,
                id: doc_id.to_string(),
            });
        }
    }
    Ok(out)
}

/// Write predictions in the label-file format.
pub fn write_label_file(path: &Path, preds: &[PredictionSet]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&p.doc_id);
        out.push('\t');
        out.push_str(&p.predicted.iter().cloned().collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
