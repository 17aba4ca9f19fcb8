//! Meta-class formation: each class is attached to the `K` seen classes whose
//! attribute vectors are nearest in Euclidean distance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SplitSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub class: usize,
    pub distance: f64,
}

/// Optional preprocessing of attribute vectors before distances are taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrNorm {
    #[default]
    None,
    L2,
}

impl AttrNorm {
    fn apply(self, v: &[f32]) -> Vec<f64> {
        let mut out: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
        if self == AttrNorm::L2 {
            let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                out.iter_mut().for_each(|x| *x /= norm);
            }
        }
        out
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn by_distance_then_id(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    a.distance.total_cmp(&b.distance).then(a.class.cmp(&b.class))
}

/// Ranks `candidates` by distance to `query`, ties ordered by ascending class
/// id. `exclude` removes one class (the query's own) from the ranking.
pub fn l2_rank(query: &[f64], candidates: &[(usize, Vec<f64>)], exclude: Option<usize>) -> Result<Vec<Neighbor>> {
    let mut ranking: Vec<Neighbor> = candidates
        .iter()
        .filter(|(id, _)| Some(*id) != exclude)
        .map(|(id, attr)| {
            if attr.len() != query.len() {
                return Err(Error::DimensionMismatch {
                    expected: query.len(),
                    actual: attr.len(),
                });
            }
            Ok(Neighbor {
                class: *id,
                distance: l2(query, attr),
            })
        })
        .collect::<Result<_>>()?;
    if ranking.is_empty() {
        return Err(Error::invalid("no seen classes left to rank"));
    }
    ranking.sort_by(by_distance_then_id);
    Ok(ranking)
}

/// Picks `k` supporting classes from a ranking.
///
/// While the k-th and (k+1)-th entries are tied, the k-th slot moves on to the
/// first entry with a strictly larger distance. If no such entry exists the
/// first `k` entries in (distance, class id) order are kept.
pub fn select_support(ranking: &[Neighbor], k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 {
        return Err(Error::invalid("support size K must be positive"));
    }
    if ranking.len() < k {
        return Err(Error::invalid(format!(
            "ranking has {} entries, fewer than K = {k}",
            ranking.len()
        )));
    }
    let mut sorted = ranking.to_vec();
    sorted.sort_by(by_distance_then_id);
    let kth = sorted[k - 1].distance;
    if sorted.len() > k && sorted[k].distance == kth {
        if let Some(next) = sorted[k..].iter().find(|n| n.distance > kth) {
            let mut out = sorted[..k - 1].to_vec();
            out.push(*next);
            return Ok(out);
        }
    }
    sorted.truncate(k);
    Ok(sorted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub support: Vec<usize>,
    pub distances: Vec<f64>,
}

/// Supporting seen classes for every seen and unseen class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaClassMap {
    pub k: usize,
    pub entries: BTreeMap<usize, Support>,
}

impl MetaClassMap {
    pub fn support(&self, class: usize) -> Option<&[usize]> {
        self.entries.get(&class).map(|s| s.support.as_slice())
    }

    /// JSON object keyed by class id: `{"3": {"support": [..], "distances": [..]}}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.entries).expect("support map serializes")
    }
}

/// Builds the meta-class map for the split's seen and unseen classes. Seen
/// classes never support themselves.
pub fn build_meta_classes(dataset: &Dataset, splits: &SplitSpec, k: usize, norm: AttrNorm) -> Result<MetaClassMap> {
    if k == 0 {
        return Err(Error::invalid("support size K must be positive"));
    }
    if splits.seen_train.len() < k + 1 {
        return Err(Error::invalid(format!(
            "K = {k} needs at least {} seen classes, split has {}",
            k + 1,
            splits.seen_train.len()
        )));
    }
    let seen: Vec<(usize, Vec<f64>)> = splits
        .seen_train
        .iter()
        .map(|&c| (c, norm.apply(dataset.attribute(c))))
        .collect();

    let targets: Vec<(usize, bool)> = splits
        .seen_train
        .iter()
        .map(|&c| (c, true))
        .chain(splits.unseen.iter().map(|&c| (c, false)))
        .collect();

    let build = |&(class, is_seen): &(usize, bool)| -> Result<(usize, Support)> {
        let query = norm.apply(dataset.attribute(class));
        let ranking = l2_rank(&query, &seen, is_seen.then_some(class))?;
        let picked = select_support(&ranking, k)?;
        Ok((
            class,
            Support {
                support: picked.iter().map(|n| n.class).collect(),
                distances: picked.iter().map(|n| n.distance).collect(),
            },
        ))
    };

    #[cfg(feature = "parallel")]
    let entries: Vec<(usize, Support)> = {
        use rayon::prelude::*;
        targets.par_iter().map(build).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let entries: Vec<(usize, Support)> = targets.iter().map(build).collect::<Result<_>>()?;

    Ok(MetaClassMap {
        k,
        entries: entries.into_iter().collect(),
    })
}
