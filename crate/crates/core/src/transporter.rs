//! Score vectors and the window-constrained score transporter.
//!
//! A real-domain score `eta` with rank `r` among the real calibration scores
//! is mapped into the synthetic window `[L(r), U(r)] = [S~_(R_r^-), S~_(R_r^+)]`:
//! clamped to `U` from above, to `L` from below, and otherwise replaced by the
//! largest in-window synthetic score not exceeding `eta`.

use serde::{Deserialize, Serialize};

use crate::combinatorics::WindowTable;
use crate::error::{Result, SpiError};

/// A finite multiset of scores with sorted access.
///
/// Order statistics are 1-based. `order_stat(0)` is `-inf` and
/// `order_stat(len + 1)` is `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    values: Vec<f64>,
    sorted: Vec<f64>,
}

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(SpiError::domain(format!("score #{i} is not finite ({v})")));
        }
        let mut sorted = values.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        Ok(Self { values, sorted })
    }

    pub fn empty() -> Self {
        Self { values: Vec::new(), sorted: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Scores in input order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Scores in nondecreasing order.
    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// The `i`-th smallest score with the `-inf` / `+inf` sentinels at `0` and `len + 1`.
    pub fn order_stat(&self, i: usize) -> f64 {
        match i {
            0 => f64::NEG_INFINITY,
            i if i > self.sorted.len() => f64::INFINITY,
            i => self.sorted[i - 1],
        }
    }

    /// Number of scores strictly below `x`.
    pub fn count_below(&self, x: f64) -> usize {
        self.sorted.partition_point(|&s| s < x)
    }

    /// Number of scores at most `x`.
    pub fn count_at_most(&self, x: f64) -> usize {
        self.sorted.partition_point(|&s| s <= x)
    }

    /// Number of values equal to their sorted predecessor.
    pub fn duplicate_count(&self) -> usize {
        self.sorted.windows(2).filter(|w| w[0] == w[1]).count()
    }

    pub fn ensure_distinct(&self, context: &str) -> Result<()> {
        match self.duplicate_count() {
            0 => Ok(()),
            count => Err(SpiError::Ties { context: context.to_string(), count }),
        }
    }

    pub fn min(&self) -> Option<f64> {
        self.sorted.first().copied()
    }

    pub fn max(&self) -> Option<f64> {
        self.sorted.last().copied()
    }

    /// Applies `f` to every score, keeping input order.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.values.iter().map(|&v| f(v)).collect())
    }
}

impl TryFrom<Vec<f64>> for ScoreVector {
    type Error = SpiError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// The synthetic-score window `[lower, upper]` for one real rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWindow {
    pub lower: f64,
    pub upper: f64,
    pub lo_rank: usize,
    pub hi_rank: usize,
}

/// `1 + #{real scores < eta}`.
pub fn rank_among(eta: f64, real: &ScoreVector) -> usize {
    real.count_below(eta) + 1
}

fn check_sizes(table: &WindowTable, real: Option<&ScoreVector>, synth: &ScoreVector) -> Result<()> {
    if table.n != synth.len() {
        return Err(SpiError::config(format!(
            "window table built for N = {} but {} synthetic scores supplied",
            table.n,
            synth.len()
        )));
    }
    if let Some(real) = real {
        if table.m != real.len() {
            return Err(SpiError::config(format!(
                "window table built for m = {} but {} real scores supplied",
                table.m,
                real.len()
            )));
        }
    }
    Ok(())
}

/// `[S~_(R_r^-), S~_(R_r^+)]` with `S~_(N+1) = +inf`.
pub fn score_window(r: usize, table: &WindowTable, synth: &ScoreVector) -> Result<ScoreWindow> {
    check_sizes(table, None, synth)?;
    let (lo_rank, hi_rank) = table
        .row(r)
        .ok_or_else(|| SpiError::domain(format!("rank {r} outside [1, {}]", table.m + 1)))?;
    Ok(window_unchecked(lo_rank, hi_rank, synth))
}

fn window_unchecked(lo_rank: usize, hi_rank: usize, synth: &ScoreVector) -> ScoreWindow {
    ScoreWindow {
        lower: synth.order_stat(lo_rank),
        upper: synth.order_stat(hi_rank),
        lo_rank,
        hi_rank,
    }
}

/// Transport `eta` into the synthetic score space.
pub fn transport(
    eta: f64,
    real: &ScoreVector,
    synth: &ScoreVector,
    table: &WindowTable,
) -> Result<f64> {
    check_sizes(table, Some(real), synth)?;
    Ok(Transporter { real, synth, table }.apply(eta))
}

/// A transporter bound to one calibration draw; validated once, applied many times.
#[derive(Debug, Clone, Copy)]
pub struct Transporter<'a> {
    real: &'a ScoreVector,
    synth: &'a ScoreVector,
    table: &'a WindowTable,
}

impl<'a> Transporter<'a> {
    pub fn new(real: &'a ScoreVector, synth: &'a ScoreVector, table: &'a WindowTable) -> Result<Self> {
        check_sizes(table, Some(real), synth)?;
        Ok(Self { real, synth, table })
    }

    /// Window for the rank `eta` would take among the real scores.
    pub fn window_for(&self, eta: f64) -> ScoreWindow {
        let r = rank_among(eta, self.real);
        let (lo, hi) = self.table.rows[r - 1];
        window_unchecked(lo, hi, self.synth)
    }

    pub fn apply(&self, eta: f64) -> f64 {
        let w = self.window_for(eta);
        if eta >= w.upper {
            w.upper
        } else if eta < w.lower {
            w.lower
        } else {
            // L <= eta < U, so S~_(R^-) <= eta and the in-window candidate set
            // is nonempty. Search only ranks R^-..R^+ (upper excluded: it exceeds eta).
            let sorted = self.synth.sorted();
            let start = w.lo_rank - 1;
            let end = (w.hi_rank - 1).min(sorted.len());
            let within = sorted[start..end].partition_point(|&s| s <= eta);
            sorted[start + within - 1]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector::new(v.to_vec()).unwrap()
    }

    fn table(m: usize, n: usize, rows: Vec<(usize, usize)>) -> WindowTable {
        WindowTable { m, n, beta: 0.5, rows }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(ScoreVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ScoreVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn sentinels() {
        let s = sv(&[3.0, 1.0, 2.0]);
        assert_eq!(s.order_stat(0), f64::NEG_INFINITY);
        assert_eq!(s.order_stat(1), 1.0);
        assert_eq!(s.order_stat(3), 3.0);
        assert_eq!(s.order_stat(4), f64::INFINITY);
        assert_eq!(s.values(), &[3.0, 1.0, 2.0]);
    }

    #[test]
    fn rank_examples() {
        let real = sv(&[1.0, 2.0, 3.0]);
        assert_eq!(rank_among(0.0, &real), 1);
        assert_eq!(rank_among(4.0, &real), 4);
        assert_eq!(rank_among(2.0, &real), 2);
    }

    #[test]
    fn window_examples() {
        let synth = sv(&[0.1, 0.3, 0.4]);
        let t = table(0, 3, vec![(1, 2)]);
        let w = score_window(1, &t, &synth).unwrap();
        assert_eq!((w.lower, w.upper), (0.1, 0.3));

        let t = table(0, 3, vec![(2, 4)]);
        assert_eq!(score_window(1, &t, &synth).unwrap().upper, f64::INFINITY);

        let t = WindowTable::new(0, 4, 0.5).unwrap();
        let w = score_window(1, &t, &sv(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!((w.lower, w.upper), (2.0, 4.0));
    }

    #[test]
    fn window_size_mismatch() {
        let t = table(0, 4, vec![(1, 2)]);
        assert!(matches!(score_window(1, &t, &sv(&[1.0])), Err(SpiError::Config(_))));
    }

    #[test]
    fn transport_branches() {
        let real = ScoreVector::empty();
        let synth = sv(&[0.1, 0.3, 0.4]);
        let t = table(0, 3, vec![(2, 3)]);
        // below L
        assert_eq!(transport(0.0, &real, &synth, &t).unwrap(), 0.3);
        // at or above U
        assert_eq!(transport(0.4, &real, &synth, &t).unwrap(), 0.4);
        assert_eq!(transport(9.0, &real, &synth, &t).unwrap(), 0.4);
        // lower nearest neighbour over ranks 1..3
        let t = table(0, 3, vec![(1, 3)]);
        assert_eq!(transport(0.35, &real, &synth, &t).unwrap(), 0.3);
        // exact tie maps to the tied value
        assert_eq!(transport(0.3, &real, &synth, &t).unwrap(), 0.3);
    }

    #[test]
    fn transport_with_infinite_upper() {
        let real = ScoreVector::empty();
        let synth = sv(&[0.1, 0.3, 0.4]);
        let t = table(0, 3, vec![(2, 4)]);
        assert_eq!(transport(100.0, &real, &synth, &t).unwrap(), 0.4);
        assert_eq!(transport(0.2, &real, &synth, &t).unwrap(), 0.3);
    }

    proptest! {
        #[test]
        fn transport_stays_in_window_and_below_eta(
            real in prop::collection::vec(-5.0f64..5.0, 0..12),
            synth in prop::collection::vec(-5.0f64..5.0, 1..60),
            beta in 0.05f64..0.95,
            eta in -6.0f64..6.0,
        ) {
            let real = ScoreVector::new(real).unwrap();
            let synth = ScoreVector::new(synth).unwrap();
            let t = WindowTable::new(real.len(), synth.len(), beta).unwrap();
            let tr = Transporter::new(&real, &synth, &t).unwrap();
            let w = tr.window_for(eta);
            let out = tr.apply(eta);
            prop_assert!(w.lower <= out && out <= w.upper);
            if w.lower <= eta {
                prop_assert!(out <= eta);
            }
        }
    }
}
