//! Per-index decision thresholds fitted by coordinate ascent on
//! training-set micro-F, and their application to score vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::PredictionSet;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const MAX_SWEEPS: usize = 5;
const DEFAULT_KEY: &str = "<DEFAULT>";

/// Scored candidates of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub scores: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    per_index: BTreeMap<String, f64>,
    default: f64,
}

impl Default for ThresholdTable {
    fn default() -> Self {
        Self {
            per_index: BTreeMap::new(),
            default: DEFAULT_THRESHOLD,
        }
    }
}

impl ThresholdTable {
    pub fn threshold(&self, index_id: &str) -> f64 {
        self.per_index
            .get(index_id)
            .copied()
            .unwrap_or(self.default)
    }

    pub fn set(&mut self, index_id: &str, value: f64) {
        self.per_index.insert(index_id.to_string(), value);
    }

    pub fn len(&self) -> usize {
        self.per_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_index.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("{DEFAULT_KEY}\t{}\n", self.default);
        for (id, t) in &self.per_index {
            out.push_str(&format!("{id}\t{t}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = ThresholdTable::default();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, value) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: "expected index-id<TAB>threshold".into(),
            })?;
            let value: f64 = value.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("bad threshold {value:?}"),
            })?;
            if id == DEFAULT_KEY {
                table.default = value;
            } else {
                table.per_index.insert(id.to_string(), value);
            }
        }
        Ok(table)
    }
}

/// Result of threshold fitting: the table plus the micro-F value after each
/// accepted coordinate move (non-decreasing by construction).
#[derive(Debug, Clone)]
pub struct FitResult {
    pub table: ThresholdTable,
    pub objective_trace: Vec<f64>,
}

/// Per-index cached view of the fitting problem.
struct IndexStats {
    /// (score, is_gold) pairs over documents where the index was scored.
    scored: Vec<(f64, bool)>,
    /// Number of documents carrying the index as gold, scored or not.
    gold_count: usize,
    /// Candidate thresholds to evaluate.
    candidates: Vec<f64>,
}

impl IndexStats {
    fn counts_at(&self, t: f64) -> (usize, usize, usize) {
        let mut tp = 0;
        let mut fp = 0;
        for &(s, is_gold) in &self.scored {
            if s > t {
                if is_gold {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        (tp, fp, self.gold_count - tp)
    }
}

fn micro_f(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Coordinate ascent over per-index thresholds maximizing training micro-F.
///
/// For every index the candidate cut points are its distinct observed
/// scores, the 0.5 starting point, and one value strictly below the minimum
/// observed score; the last makes every achievable prediction subset
/// reachable, so single-index problems match exhaustive search. Ties in the
/// objective go to the larger threshold.
pub fn fit_thresholds(
    docs: &[ScoredDoc],
    golds: &BTreeMap<String, BTreeSet<String>>,
) -> Result<FitResult> {
    if docs.is_empty() {
        return Err(Error::InvalidInput(
            "cannot fit thresholds on an empty score set".into(),
        ));
    }
    let mut stats: BTreeMap<String, IndexStats> = BTreeMap::new();
    for doc in docs {
        let gold = golds.get(&doc.doc_id).ok_or_else(|| {
            Error::InvalidInput(format!("no gold labels for document {:?}", doc.doc_id))
        })?;
        for (id, score) in &doc.scores {
            if !score.is_finite() {
                continue; // retrieval sentinels carry no usable score
            }
            let entry = stats.entry(id.clone()).or_insert_with(|| IndexStats {
                scored: Vec::new(),
                gold_count: 0,
                candidates: Vec::new(),
            });
            entry.scored.push((*score, gold.contains(id)));
        }
    }
    // gold occurrences, including indexes that were never scored
    let mut unreachable_fn = 0usize;
    for doc in docs {
        let gold = &golds[&doc.doc_id];
        let scored_ids: BTreeSet<&str> = doc
            .scores
            .iter()
            .filter(|(_, s)| s.is_finite())
            .map(|(id, _)| id.as_str())
            .collect();
        for g in gold {
            match stats.get_mut(g.as_str()) {
                Some(entry) if scored_ids.contains(g.as_str()) => entry.gold_count += 1,
                _ => unreachable_fn += 1,
            }
        }
    }
    for entry in stats.values_mut() {
        let mut cands: Vec<f64> = entry.scored.iter().map(|&(s, _)| s).collect();
        cands.push(DEFAULT_THRESHOLD);
        if let Some(min) = entry
            .scored
            .iter()
            .map(|&(s, _)| s)
            .min_by(|a, b| a.partial_cmp(b).expect("finite"))
        {
            cands.push(min / 2.0);
        }
        cands.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        cands.dedup();
        entry.candidates = cands;
    }

    let ids: Vec<String> = stats.keys().cloned().collect();
    let mut thresholds: BTreeMap<&str, f64> = ids
        .iter()
        .map(|id| (id.as_str(), DEFAULT_THRESHOLD))
        .collect();
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = ids
        .iter()
        .map(|id| (id.as_str(), stats[id].counts_at(DEFAULT_THRESHOLD)))
        .collect();
    let total = |counts: &BTreeMap<&str, (usize, usize, usize)>| {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = unreachable_fn;
        for (a, b, c) in counts.values() {
            tp += a;
            fp += b;
            fn_ += c;
        }
        (tp, fp, fn_)
    };

    let (tp, fp, fn_) = total(&counts);
    let mut best_f = micro_f(tp, fp, fn_);
    let mut trace = vec![best_f];

    for _sweep in 0..MAX_SWEEPS {
        let sweep_start = best_f;
        for id in &ids {
            let entry = &stats[id];
            let current_t = thresholds[id.as_str()];
            let (tp, fp, fn_) = total(&counts);
            let (ctp, cfp, cfn) = counts[id.as_str()];
            let (base_tp, base_fp, base_fn) = (tp - ctp, fp - cfp, fn_ - cfn);
            let mut choice = (current_t, best_f);
            for &cand in &entry.candidates {
                let (ntp, nfp, nfn) = entry.counts_at(cand);
                let f = micro_f(base_tp + ntp, base_fp + nfp, base_fn + nfn);
                // strictly better, or equal with a larger threshold
                if f > choice.1 || (f == choice.1 && cand > choice.0) {
                    choice = (cand, f);
                }
            }
            if choice.0 != current_t || choice.1 > best_f {
                thresholds.insert(id.as_str(), choice.0);
                counts.insert(id.as_str(), entry.counts_at(choice.0));
                best_f = choice.1;
                trace.push(best_f);
            }
        }
        if best_f <= sweep_start {
            break;
        }
    }

    let per_index = thresholds
        .into_iter()
        .map(|(id, t)| (id.to_string(), t))
        .collect();
    Ok(FitResult {
        table: ThresholdTable {
            per_index,
            default: DEFAULT_THRESHOLD,
        },
        objective_trace: trace,
    })
}

/// Predict an index exactly when its score strictly exceeds the threshold.
pub fn apply_thresholds(docs: &[ScoredDoc], table: &ThresholdTable) -> Vec<PredictionSet> {
    docs.iter()
        .map(|doc| PredictionSet {
            doc_id: doc.doc_id.clone(),
            predicted: doc
                .scores
                .iter()
                .filter(|(id, s)| s.is_finite() && *s > table.threshold(id))
                .map(|(id, _)| id.clone())
                .collect(),
        })
        .collect()
}

/// Micro-F of thresholded predictions against gold sets, pooled counts.
pub fn micro_f_at(
    docs: &[ScoredDoc],
    golds: &BTreeMap<String, BTreeSet<String>>,
    table: &ThresholdTable,
) -> f64 {
    let preds = apply_thresholds(docs, table);
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for pred in &preds {
        let gold = golds.get(&pred.doc_id).cloned().unwrap_or_default();
        tp += pred.predicted.intersection(&gold).count();
        fp += pred.predicted.difference(&gold).count();
        fn_ += gold.difference(&pred.predicted).count();
    }
    micro_f(tp, fp, fn_)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, scores: &[(&str, f64)]) -> ScoredDoc {
        ScoredDoc {
            doc_id: id.into(),
            scores: scores.iter().map(|(i, s)| (i.to_string(), *s)).collect(),
        }
    }

    fn gold_map(entries: &[(&str, &[&str])]) -> BTreeMap<String, BTreeSet<String>> {
        entries
            .iter()
            .map(|(id, labels)| {
                (
                    id.to_string(),
                    labels.iter().map(|l| l.to_string()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn separable_scores_reach_perfect_micro_f() {
        let docs = vec![
            doc("d1", &[("A", 0.9), ("B", 0.1)]),
            doc("d2", &[("A", 0.1), ("B", 0.9)]),
            doc("d3", &[("A", 0.9), ("B", 0.9)]),
        ];
        let golds = gold_map(&[("d1", &["A"]), ("d2", &["B"]), ("d3", &["A", "B"])]);
        let fit = fit_thresholds(&docs, &golds).unwrap();
        assert_eq!(micro_f_at(&docs, &golds, &fit.table), 1.0);
    }

    /// Exhaustive oracle over every cut point of a single-index problem.
    fn exhaustive_best(scores: &[f64], labels: &[bool]) -> f64 {
        let mut cuts: Vec<f64> = scores.to_vec();
        cuts.push(scores.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0);
        cuts.push(0.5);
        let mut best = 0.0f64;
        for &t in &cuts {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| **s > t && **l)
                .count();
            let fp = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| **s > t && !**l)
                .count();
            let fn_ = labels.iter().filter(|l| **l).count() - tp;
            best = best.max(micro_f(tp, fp, fn_));
        }
        best
    }

    #[test]
    fn single_index_matches_exhaustive_search() {
        let docs = vec![
            doc("d1", &[("A", 0.2)]),
            doc("d2", &[("A", 0.6)]),
            doc("d3", &[("A", 0.8)]),
        ];
        let golds = gold_map(&[("d1", &[]), ("d2", &["A"]), ("d3", &["A"])]);
        let fit = fit_thresholds(&docs, &golds).unwrap();
        let t = fit.table.threshold("A");
        assert!(t > 0.2 && t <= 0.6, "threshold {t} outside (0.2, 0.6]");
        assert_eq!(micro_f_at(&docs, &golds, &fit.table), 1.0);
        assert_eq!(
            exhaustive_best(&[0.2, 0.6, 0.8], &[false, true, true]),
            1.0
        );
    }

    #[test]
    fn all_positive_low_scores_are_still_reachable() {
        // both docs gold, scores below 0.5: needs the below-minimum cut
        let docs = vec![doc("d1", &[("A", 0.3)]), doc("d2", &[("A", 0.4)])];
        let golds = gold_map(&[("d1", &["A"]), ("d2", &["A"])]);
        let fit = fit_thresholds(&docs, &golds).unwrap();
        assert_eq!(micro_f_at(&docs, &golds, &fit.table), 1.0);
        assert!(fit.table.threshold("A") < 0.3);
    }

    #[test]
    fn random_instances_match_exhaustive_search() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(1..12);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 0.98) + 0.01).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen::<bool>()).collect();
            let docs: Vec<ScoredDoc> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| doc(&format!("d{i}"), &[("A", s)]))
                .collect();
            let golds: BTreeMap<String, BTreeSet<String>> = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    (
                        format!("d{i}"),
                        if l {
                            ["A".to_string()].into()
                        } else {
                            BTreeSet::new()
                        },
                    )
                })
                .collect();
            let fit = fit_thresholds(&docs, &golds).unwrap();
            let got = micro_f_at(&docs, &golds, &fit.table);
            let want = exhaustive_best(&scores, &labels);
            assert_eq!(got, want, "scores {scores:?} labels {labels:?}");
        }
    }

    #[test]
    fn fitting_never_loses_to_uniform_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(23);
        let indexes = ["A", "B", "C"];
        let docs: Vec<ScoredDoc> = (0..20)
            .map(|i| {
                let scores: Vec<(String, f64)> = indexes
                    .iter()
                    .map(|id| (id.to_string(), rng.gen::<f64>()))
                    .collect();
                ScoredDoc {
                    doc_id: format!("d{i}"),
                    scores,
                }
            })
            .collect();
        let golds: BTreeMap<String, BTreeSet<String>> = (0..20)
            .map(|i| {
                (
                    format!("d{i}"),
                    indexes
                        .iter()
                        .filter(|_| rng.gen::<f64>() < 0.3)
                        .map(|s| s.to_string())
                        .collect(),
                )
            })
            .collect();
        let fit = fit_thresholds(&docs, &golds).unwrap();
        let fitted = micro_f_at(&docs, &golds, &fit.table);
        let uniform = micro_f_at(&docs, &golds, &ThresholdTable::default());
        assert!(fitted >= uniform);
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] >= w[0], "objective decreased: {:?}", fit.objective_trace);
        }
    }

    #[test]
    fn strict_inequality_at_the_boundary() {
        let mut table = ThresholdTable::default();
        table.set("A", 0.7);
        let preds = apply_thresholds(&[doc("d", &[("A", 0.7)])], &table);
        assert!(preds[0].predicted.is_empty());
        let preds = apply_thresholds(&[doc("d", &[("A", 0.7000001)])], &table);
        assert!(preds[0].predicted.contains("A"));
    }

    #[test]
    fn zero_thresholds_predict_every_candidate() {
        let mut table = ThresholdTable::default();
        table.set("A", 0.0);
        table.set("B", 0.0);
        let preds = apply_thresholds(&[doc("d", &[("A", 0.01), ("B", 0.99)])], &table);
        assert_eq!(preds[0].predicted.len(), 2);
    }

    #[test]
    fn unseen_ids_use_the_default_threshold() {
        let mut table = ThresholdTable::default();
        table.set("A", 0.6);
        // per-index 0.6 admits 0.7; unseen id B with default 0.5 admits it
        // too; with a 0.9 default it would not.
        let preds = apply_thresholds(&[doc("d", &[("A", 0.7), ("B", 0.7)])], &table);
        assert!(preds[0].predicted.contains("A"));
        assert!(preds[0].predicted.contains("B"));
        let strict = ThresholdTable {
            per_index: [("A".to_string(), 0.6)].into(),
            default: 0.9,
        };
        let preds = apply_thresholds(&[doc("d", &[("A", 0.7), ("B", 0.7)])], &strict);
        assert!(preds[0].predicted.contains("A"));
        assert!(!preds[0].predicted.contains("B"));
    }

    #[test]
    fn sentinel_scores_never_predict() {
        let table = ThresholdTable::default();
        let preds = apply_thresholds(&[doc("d", &[("A", f64::NEG_INFINITY)])], &table);
        assert!(preds[0].predicted.is_empty());
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(fit_thresholds(&[], &BTreeMap::new()).is_err());
    }

    #[test]
    fn table_roundtrip() {
        let mut table = ThresholdTable::default();
        table.set("A", 0.625);
        table.set("B", 0.1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("thresholds.tsv");
        table.save(&path).unwrap();
        assert_eq!(ThresholdTable::load(&path).unwrap(), table);
    }
}
