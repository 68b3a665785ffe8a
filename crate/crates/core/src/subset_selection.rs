//! k-nearest synthetic subset selection by two-sample Cramér–von Mises distance.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiError};
use crate::transporter::ScoreVector;

/// Two-sample Cramér–von Mises statistic on pooled ranks.
///
/// `T = U / (N M (N + M)) - (4 M N - 1) / (6 (M + N))` with
/// `U = N sum_i (r_(i) - i)^2 + M sum_j (s_(j) - j)^2`. All pooled values must be distinct.
pub fn cvm_statistic(x: &ScoreVector, y: &ScoreVector) -> Result<f64> {
    let (n, m) = (x.len(), y.len());
    if n == 0 || m == 0 {
        return Err(SpiError::domain("Cramér–von Mises statistic needs two nonempty samples"));
    }
    let (xs, ys) = (x.sorted(), y.sorted());
    // Merge, accumulating (pooled rank - within-sample rank)^2 per sample.
    let (mut i, mut j) = (0usize, 0usize);
    let (mut sum_x, mut sum_y) = (0u128, 0u128);
    while i < n || j < m {
        let take_x = match (xs.get(i), ys.get(j)) {
            (Some(a), Some(b)) => match a.total_cmp(b) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => {
                    return Err(SpiError::Ties { context: "pooled Cramér–von Mises samples".into(), count: 1 })
                }
            },
            (Some(_), None) => true,
            _ => false,
        };
        let pooled_rank = (i + j + 1) as u128;
        if take_x {
            if i > 0 && xs[i - 1] == xs[i] {
                return Err(SpiError::Ties { context: "first Cramér–von Mises sample".into(), count: 1 });
            }
            let d = pooled_rank - (i as u128 + 1);
            sum_x += d * d;
            i += 1;
        } else {
            if j > 0 && ys[j - 1] == ys[j] {
                return Err(SpiError::Ties { context: "second Cramér–von Mises sample".into(), count: 1 });
            }
            let d = pooled_rank - (j as u128 + 1);
            sum_y += d * d;
            j += 1;
        }
    }
    let u = n as u128 * sum_x + m as u128 * sum_y;
    let (nf, mf) = (n as f64, m as f64);
    Ok(u as f64 / (nf * mf * (nf + mf)) - (4.0 * mf * nf - 1.0) / (6.0 * (mf + nf)))
}

/// Equal-size groups of synthetic scores, each with an identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedScores {
    groups: Vec<(String, ScoreVector)>,
    group_size: usize,
}

impl GroupedScores {
    pub fn new(groups: Vec<(String, ScoreVector)>) -> Result<Self> {
        let group_size = groups
            .first()
            .map(|(_, g)| g.len())
            .ok_or_else(|| SpiError::config("no synthetic groups supplied"))?;
        if group_size == 0 {
            return Err(SpiError::config("synthetic groups are empty"));
        }
        if let Some((id, g)) = groups.iter().find(|(_, g)| g.len() != group_size) {
            return Err(SpiError::config(format!(
                "group {id:?} has {} scores but groups must all have size {group_size}",
                g.len()
            )));
        }
        let mut ids: Vec<&str> = groups.iter().map(|(id, _)| id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(SpiError::config(format!("duplicate group identifier {:?}", w[0])));
        }
        Ok(Self { groups, group_size })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn groups(&self) -> &[(String, ScoreVector)] {
        &self.groups
    }

    pub fn get(&self, id: &str) -> Option<&ScoreVector> {
        self.groups.iter().find(|(g, _)| g == id).map(|(_, s)| s)
    }

    /// Concatenated scores of the named groups, in the order given.
    pub fn pooled(&self, ids: &[String]) -> Result<ScoreVector> {
        let mut out = Vec::with_capacity(ids.len() * self.group_size);
        for id in ids {
            let g = self.get(id).ok_or_else(|| SpiError::config(format!("unknown group {id:?}")))?;
            out.extend_from_slice(g.values());
        }
        ScoreVector::new(out)
    }
}

/// A selected group with its distance to the real scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDistance {
    pub group: String,
    pub distance: f64,
}

/// Distances from the real scores to every group, sorted ascending
/// (ties by group identifier).
pub fn rank_groups(real: &ScoreVector, grouped: &GroupedScores) -> Result<Vec<GroupDistance>> {
    let mut ranked = grouped
        .groups()
        .par_iter()
        .map(|(id, g)| cvm_statistic(real, g).map(|distance| GroupDistance { group: id.clone(), distance }))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.group.cmp(&b.group)));
    Ok(ranked)
}

/// The `k` groups closest to the real scores.
pub fn select_subsets(real: &ScoreVector, grouped: &GroupedScores, k: usize) -> Result<Vec<GroupDistance>> {
    if k == 0 || k > grouped.len() {
        return Err(SpiError::domain(format!("k = {k} outside [1, {}]", grouped.len())));
    }
    let mut ranked = rank_groups(real, grouped)?;
    ranked.truncate(k);
    Ok(ranked)
}
