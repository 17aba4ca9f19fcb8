//! Per-class (macro-averaged) accuracy, the seen/unseen harmonic mean and
//! top-K accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// Per-class top-1 accuracy over a class pool.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolAccuracy {
    pub per_class: BTreeMap<usize, f64>,
    /// Mean of the per-class accuracies (0 when no pool class has rows).
    pub mean: f64,
    /// Pool classes without any evaluated rows; left out of `mean`.
    pub excluded: Vec<usize>,
}

/// Fraction of correct predictions per class of `pool`. Rows whose true class
/// lies outside `pool` are ignored.
pub fn per_class_top1(predicted: &[usize], truths: &[usize], pool: &[usize]) -> Result<PoolAccuracy> {
    if pool.is_empty() {
        return Err(Error::invalid("empty class pool"));
    }
    if predicted.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truths.len()
        )));
    }
    let pool: BTreeSet<usize> = pool.iter().copied().collect();
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &t) in predicted.iter().zip(truths) {
        if pool.contains(&t) {
            let e = tally.entry(t).or_default();
            e.1 += 1;
            if p == t {
                e.0 += 1;
            }
        }
    }
    let per_class: BTreeMap<usize, f64> = tally
        .iter()
        .map(|(&c, &(hit, total))| (c, hit as f64 / total as f64))
        .collect();
    let excluded = pool.iter().copied().filter(|c| !tally.contains_key(c)).collect();
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(PoolAccuracy {
        per_class,
        mean,
        excluded,
    })
}

/// `2·tr·ts / (tr + ts)`, and 0 when both are 0.
pub fn harmonic_mean(tr: f64, ts: f64) -> f64 {
    if tr + ts > 0.0 {
        2.0 * tr * ts / (tr + ts)
    } else {
        0.0
    }
}

/// Top-K accuracy, macro-averaged over classes and micro-averaged over rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopK {
    pub macro_avg: BTreeMap<usize, f64>,
    pub micro_avg: BTreeMap<usize, f64>,
}

/// Rank (0-based) of `truth` among `candidates` given their `scores`; ties
/// are ordered by ascending class id, matching the argmax rule.
fn rank_of(truth: usize, candidates: &[usize], scores: &[f64]) -> Option<usize> {
    let pos = candidates.iter().position(|&c| c == truth)?;
    let ts = scores[pos];
    Some(
        candidates
            .iter()
            .zip(scores)
            .filter(|&(&c, &s)| s > ts || (s == ts && c < truth))
            .count(),
    )
}

/// Top-K accuracy over the rows whose true class is in `pool`, ranking each
/// row's scores over all `candidates` (one score per candidate and row).
pub fn topk_accuracy(
    scores: &[Vec<f64>],
    candidates: &[usize],
    truths: &[usize],
    ks: &[usize],
    pool: &[usize],
) -> Result<TopK> {
    if pool.is_empty() {
        return Err(Error::invalid("empty class pool"));
    }
    if scores.len() != truths.len() {
        return Err(Error::invalid("score rows and labels differ in length"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > candidates.len()) {
        return Err(Error::invalid(format!(
            "k = {k} outside 1..={} candidates",
            candidates.len()
        )));
    }
    let pool: BTreeSet<usize> = pool.iter().copied().collect();
    let mut ranks: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &t) in scores.iter().zip(truths) {
        if !pool.contains(&t) {
            continue;
        }
        if row.len() != candidates.len() {
            return Err(Error::invalid("score row length differs from candidate count"));
        }
        let r =
            rank_of(t, candidates, row).ok_or_else(|| Error::invalid(format!("true class {t} is not a candidate")))?;
        ranks.entry(t).or_default().push(r);
    }
    let mut macro_avg = BTreeMap::new();
    let mut micro_avg = BTreeMap::new();
    let total: usize = ranks.values().map(Vec::len).sum();
    for &k in ks {
        let mut class_sum = 0.0;
        let mut hits_all = 0usize;
        for rs in ranks.values() {
            let hits = rs.iter().filter(|&&r| r < k).count();
            hits_all += hits;
            class_sum += hits as f64 / rs.len() as f64;
        }
        let n_classes = ranks.len();
        macro_avg.insert(
            k,
            if n_classes == 0 {
                0.0
            } else {
                class_sum / n_classes as f64
            },
        );
        micro_avg.insert(
            k,
            if total == 0 {
                0.0
            } else {
                hits_all as f64 / total as f64
            },
        );
    }
    Ok(TopK { macro_avg, micro_avg })
}

/// Score rows, their candidate class ids and the `k` values to report.
pub type TopkInput<'a> = (&'a [Vec<f64>], &'a [usize], &'a [usize]);

/// Generalized zero-shot evaluation summary. Accuracies are fractions in
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_class_acc: BTreeMap<usize, f64>,
    /// Mean per-class accuracy on unseen classes.
    pub ts: f64,
    /// Mean per-class accuracy on seen classes.
    pub tr: f64,
    #[serde(rename = "H")]
    pub h: f64,
    /// Macro-averaged top-K accuracy over unseen classes.
    pub topk: BTreeMap<usize, f64>,
    pub topk_micro: BTreeMap<usize, f64>,
    /// Classes without test rows, left out of the averages.
    pub excluded: Vec<usize>,
}

impl EvalReport {
    /// Builds the report from argmax predictions and (optionally) full score
    /// rows for top-K.
    pub fn from_predictions(
        predicted: &[usize],
        truths: &[usize],
        seen: &[usize],
        unseen: &[usize],
        topk: Option<TopkInput>,
    ) -> Result<Self> {
        let mut per_class_acc = BTreeMap::new();
        let mut excluded = Vec::new();
        let mut pool_mean = |pool: &[usize]| -> Result<f64> {
            if pool.is_empty() {
                return Ok(0.0);
            }
            let acc = per_class_top1(predicted, truths, pool)?;
            per_class_acc.extend(acc.per_class.iter().map(|(&c, &a)| (c, a)));
            excluded.extend(acc.excluded.iter().copied());
            Ok(acc.mean)
        };
        let tr = pool_mean(seen)?;
        let ts = pool_mean(unseen)?;
        excluded.sort_unstable();
        let (topk, topk_micro) = match topk {
            Some((scores, candidates, ks)) if !unseen.is_empty() && !ks.is_empty() => {
                let t = topk_accuracy(scores, candidates, truths, ks, unseen)?;
                (t.macro_avg, t.micro_avg)
            }
            _ => Default::default(),
        };
        Ok(Self {
            per_class_acc,
            ts,
            tr,
            h: harmonic_mean(tr, ts),
            topk,
            topk_micro,
            excluded,
        })
    }

    /// Aligned text table with accuracies in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>8} {:>8} {:>8}", "ts", "tr", "H");
        let _ = writeln!(
            out,
            "{:>8.1} {:>8.1} {:>8.1}",
            100.0 * self.ts,
            100.0 * self.tr,
            100.0 * self.h
        );
        if !self.topk.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:>6} {:>10} {:>10}", "top-k", "macro", "micro");
            for (k, v) in &self.topk {
                let micro = self.topk_micro.get(k).copied().unwrap_or(f64::NAN);
                let _ = writeln!(out, "{:>6} {:>10.1} {:>10.1}", k, 100.0 * v, 100.0 * micro);
            }
        }
        if !self.excluded.is_empty() {
            let _ = writeln!(out, "\nclasses without test rows: {:?}", self.excluded);
        }
        out
    }
}
