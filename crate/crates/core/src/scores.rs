//! Nonconformity scores, tie-breaking jitter, and the affine synthetic-score adjustment.

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{extended_real, PredictionThreshold};
use crate::error::{Result, SpiError};
use crate::transporter::ScoreVector;

/// Estimated class-probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbability {
    probs: Vec<f64>,
}

impl ClassProbability {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(SpiError::domain("probability vector is empty"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(SpiError::domain("probabilities must be finite and nonnegative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SpiError::domain(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Adaptive prediction sets score.
///
/// Classes are ordered by decreasing probability (ties by ascending index);
/// the score is the mass of every class up to and including `label`, minus
/// `u` times the label's own probability.
pub fn aps_score(probs: &ClassProbability, label: usize, u: f64) -> Result<f64> {
    let p = probs.probs();
    if label >= p.len() {
        return Err(SpiError::domain(format!("label index {label} outside [0, {})", p.len())));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(SpiError::domain(format!("u = {u} outside [0, 1]")));
    }
    let own = p[label];
    // Mass of classes ranked strictly ahead of `label`.
    let ahead: f64 = p
        .iter()
        .enumerate()
        .filter(|&(j, &q)| q > own || (q == own && j < label))
        .map(|(_, &q)| q)
        .sum();
    Ok((ahead + own - u * own).clamp(0.0, 1.0))
}

/// Lower and upper conditional quantile estimates at one input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantilePair {
    pub lo: f64,
    pub hi: f64,
}

impl QuantilePair {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(SpiError::domain(format!("invalid quantile pair ({lo}, {hi})")));
        }
        Ok(Self { lo, hi })
    }
}

/// Conformalized quantile regression score: `max(lo - y, y - hi)`.
pub fn cqr_score(q: QuantilePair, y: f64) -> f64 {
    (q.lo - y).max(y - q.hi)
}

/// Closed interval of the real line; empty when `lower > upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    #[serde(with = "extended_real")]
    pub lower: f64,
    #[serde(with = "extended_real")]
    pub upper: f64,
}

impl Interval {
    pub const EMPTY: Interval = Interval { lower: f64::INFINITY, upper: f64::NEG_INFINITY };

    pub fn is_empty(&self) -> bool {
        self.lower > self.upper
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }

    pub fn width(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.upper - self.lower
        }
    }
}

/// `[lo - cutoff, hi + cutoff]`: the set of `y` whose CQR score is within the cutoff.
pub fn cqr_interval(q: QuantilePair, threshold: PredictionThreshold) -> Interval {
    let c = threshold.cutoff;
    if c == f64::NEG_INFINITY {
        return Interval::EMPTY;
    }
    if c == f64::INFINITY {
        return Interval { lower: f64::NEG_INFINITY, upper: f64::INFINITY };
    }
    let iv = Interval { lower: q.lo - c, upper: q.hi + c };
    if iv.is_empty() {
        Interval::EMPTY
    } else {
        iv
    }
}

/// `1e-9` times the score range; falls back to the score magnitude when all scores coincide.
pub fn default_jitter_delta(scores: &ScoreVector) -> f64 {
    match (scores.min(), scores.max()) {
        (Some(lo), Some(hi)) if hi > lo => 1e-9 * (hi - lo),
        (Some(lo), Some(hi)) => 1e-9 * lo.abs().max(hi.abs()).max(1.0),
        _ => 1e-9,
    }
}

const MAX_REDRAW_ROUNDS: usize = 64;

/// Add i.i.d. Uniform[-delta, delta] noise drawn from a stream seeded by `seed`.
pub fn jitter(scores: &ScoreVector, delta: f64, seed: u64) -> Result<ScoreVector> {
    jitter_with_rng(scores, delta, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// As [`jitter`], drawing from a caller-supplied stream.
///
/// Values that still collide after perturbation (possible in floating point
/// when `delta` spans few representable values) are redrawn from the same stream.
pub fn jitter_with_rng<R: Rng + ?Sized>(scores: &ScoreVector, delta: f64, rng: &mut R) -> Result<ScoreVector> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(SpiError::domain(format!("jitter delta = {delta} must be positive")));
    }
    let noise = Uniform::new_inclusive(-delta, delta).map_err(|e| SpiError::domain(e.to_string()))?;
    let base = scores.values();
    let mut out: Vec<f64> = base.iter().map(|&v| v + noise.sample(rng)).collect();
    for _ in 0..MAX_REDRAW_ROUNDS {
        let collided = collided_indices(&out);
        if collided.is_empty() {
            break;
        }
        for i in collided {
            out[i] = base[i] + noise.sample(rng);
        }
    }
    ScoreVector::new(out)
}

/// Indices (ascending) of every value that equals an earlier-indexed value.
fn collided_indices(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out: Vec<usize> = order
        .windows(2)
        .filter(|w| values[w[0]] == values[w[1]])
        .map(|w| w[1])
        .collect();
    out.sort_unstable();
    out
}

/// Affine map `s -> scale * s + shift` applied to synthetic scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineAdjustment {
    pub scale: f64,
    pub shift: f64,
}

impl AffineAdjustment {
    pub const IDENTITY: AffineAdjustment = AffineAdjustment { scale: 1.0, shift: 0.0 };

    pub fn apply(&self, s: f64) -> f64 {
        self.scale * s + self.shift
    }

    pub fn adjust(&self, scores: &ScoreVector) -> Result<ScoreVector> {
        scores.map(|s| self.apply(s))
    }

    pub fn is_increasing(&self) -> bool {
        self.scale > 0.0
    }
}

/// Least-squares fit of the real order statistics `S_(i)` on the matched
/// synthetic order statistics `S~_(floor(i N / m))`, `i = 1..=m`.
pub fn affine_adjust_fit(real: &ScoreVector, synth: &ScoreVector) -> Result<AffineAdjustment> {
    let m = real.len();
    let n = synth.len();
    if m < 2 {
        return Err(SpiError::domain(format!("affine fit needs at least 2 real scores, got {m}")));
    }
    if n < m {
        return Err(SpiError::domain(format!(
            "affine fit needs N >= m for matched indices, got N = {n}, m = {m}"
        )));
    }
    let pairs: Vec<(f64, f64)> = (1..=m)
        .map(|i| (synth.order_stat(i * n / m), real.order_stat(i)))
        .collect();
    let mf = m as f64;
    let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / mf;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / mf;
    let (sxx, sxy) = pairs.iter().fold((0.0, 0.0), |(sxx, sxy), &(x, y)| {
        let dx = x - mean_x;
        (sxx + dx * dx, sxy + dx * (y - mean_y))
    });
    if sxx <= 0.0 {
        return Err(SpiError::Degenerate(
            "matched synthetic order statistics have zero variance".to_string(),
        ));
    }
    let scale = sxy / sxx;
    let fit = AffineAdjustment { scale, shift: mean_y - scale * mean_x };
    if !fit.is_increasing() {
        log::warn!("affine adjustment has non-positive scale {scale}; synthetic score order is reversed");
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn aps_examples() {
        let p = ClassProbability::new(vec![0.7, 0.2, 0.1]).unwrap();
        assert!((aps_score(&p, 0, 1.0).unwrap() - 0.0).abs() < 1e-15);
        assert!((aps_score(&p, 0, 0.0).unwrap() - 0.7).abs() < 1e-15);
        assert!((aps_score(&p, 1, 0.5).unwrap() - 0.8).abs() < 1e-15);
        assert!(aps_score(&p, 3, 0.5).is_err());
        assert!(aps_score(&p, 0, 1.5).is_err());
    }

    #[test]
    fn aps_ties_broken_by_index() {
        let p = ClassProbability::new(vec![0.4, 0.4, 0.2]).unwrap();
        assert!((aps_score(&p, 0, 0.0).unwrap() - 0.4).abs() < 1e-15);
        assert!((aps_score(&p, 1, 0.0).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn class_probability_validation() {
        assert!(ClassProbability::new(vec![0.5, 0.6]).is_err());
        assert!(ClassProbability::new(vec![-0.1, 1.1]).is_err());
        assert!(ClassProbability::new(vec![]).is_err());
    }

    #[test]
    fn cqr_examples() {
        let q = QuantilePair::new(1.0, 3.0).unwrap();
        assert_eq!(cqr_score(q, 2.0), -1.0);
        assert_eq!(cqr_score(q, 4.0), 1.0);
        assert_eq!(cqr_score(q, 0.0), 1.0);
        assert!(QuantilePair::new(3.0, 1.0).is_err());
    }

    #[test]
    fn cqr_interval_examples() {
        let q = QuantilePair::new(1.0, 3.0).unwrap();
        assert_eq!(cqr_interval(q, PredictionThreshold::new(0.0)), Interval { lower: 1.0, upper: 3.0 });
        assert_eq!(cqr_interval(q, PredictionThreshold::new(1.0)), Interval { lower: 0.0, upper: 4.0 });
        let full = cqr_interval(q, PredictionThreshold::new(f64::INFINITY));
        assert_eq!((full.lower, full.upper), (f64::NEG_INFINITY, f64::INFINITY));
        assert!(cqr_interval(q, PredictionThreshold::new(f64::NEG_INFINITY)).is_empty());
        assert!(cqr_interval(q, PredictionThreshold::new(-5.0)).is_empty());
    }

    #[test]
    fn jitter_is_deterministic_and_bounded() {
        let s = sv(&[1.0, 1.0, 2.0, 2.0, 2.0, 3.0]);
        let a = jitter(&s, 1e-6, 42).unwrap();
        let b = jitter(&s, 1e-6, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, jitter(&s, 1e-6, 43).unwrap());
        for (x, y) in s.values().iter().zip(a.values()) {
            assert!((x - y).abs() <= 1e-6);
        }
        assert!(jitter(&s, 0.0, 1).is_err());
    }

    #[test]
    fn jitter_small_delta_preserves_order_of_distinct_scores() {
        let s = sv(&[0.3, 0.1, 0.2, 0.5]);
        let j = jitter(&s, 1e-12, 5).unwrap();
        let before: Vec<usize> = argsort(s.values());
        let after: Vec<usize> = argsort(j.values());
        assert_eq!(before, after);
    }

    fn argsort(v: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        idx
    }

    #[test]
    fn default_delta_breaks_ties_across_seeds() {
        // Heavily tied scores, as produced by a discrete score function.
        let values: Vec<f64> = (0..500).map(|i| f64::from(i % 7) / 6.0).collect();
        let s = ScoreVector::new(values).unwrap();
        let delta = default_jitter_delta(&s);
        assert!((delta - 1e-9).abs() < 1e-20);
        for seed in 0..1000 {
            let j = jitter(&s, delta, seed).unwrap();
            assert_eq!(j.duplicate_count(), 0, "seed {seed}");
        }
    }

    #[test]
    fn default_delta_for_constant_scores() {
        let s = sv(&[5.0, 5.0, 5.0]);
        assert!((default_jitter_delta(&s) - 5e-9).abs() < 1e-20);
        assert_eq!(jitter(&s, default_jitter_delta(&s), 0).unwrap().duplicate_count(), 0);
    }

    /// Synthetic scores of size `n` whose order statistics at the matched
    /// indices `floor(i n / m)` are exactly `targets` (ascending).
    fn synth_with_matched(targets: &[f64], n: usize) -> ScoreVector {
        let m = targets.len();
        let mut out = Vec::with_capacity(n);
        let mut prev_idx = 0;
        let mut prev_val = targets[0] - 1.0;
        for (i, &t) in targets.iter().enumerate() {
            let idx = (i + 1) * n / m;
            let gap = idx - prev_idx;
            for step in 1..gap {
                out.push(prev_val + (t - prev_val) * step as f64 / gap as f64);
            }
            out.push(t);
            prev_idx = idx;
            prev_val = t;
        }
        ScoreVector::new(out).unwrap()
    }

    #[test]
    fn affine_identity_fit() {
        let real = sv(&[1.0, 2.0, 3.0, 4.0]);
        let synth = synth_with_matched(real.sorted(), 8);
        assert_eq!(synth.order_stat(2), 1.0);
        let fit = affine_adjust_fit(&real, &synth).unwrap();
        assert!((fit.scale - 1.0).abs() < 1e-12 && fit.shift.abs() < 1e-12);
    }

    #[test]
    fn affine_recovers_exact_relation() {
        let (a, b) = (2.5, -0.75);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let real = ScoreVector::new((0..15).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap();
        let targets: Vec<f64> = real.sorted().iter().map(|s| (s - b) / a).collect();
        let synth = synth_with_matched(&targets, 61);
        let fit = affine_adjust_fit(&real, &synth).unwrap();
        assert!((fit.scale - a).abs() < 1e-9, "{fit:?}");
        assert!((fit.shift - b).abs() < 1e-9, "{fit:?}");
    }

    #[test]
    fn affine_fit_beats_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let real = ScoreVector::new((0..12).map(|_| 1.0 + 2.0 * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap();
        let synth = ScoreVector::new((0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap();
        let fit = affine_adjust_fit(&real, &synth).unwrap();
        let rss = |a: f64, b: f64| -> f64 {
            (1..=12).map(|i| (a * synth.order_stat(i * 200 / 12) + b - real.order_stat(i)).powi(2)).sum()
        };
        let best = rss(fit.scale, fit.shift);
        for i in 0..100 {
            for j in 0..100 {
                let a = fit.scale + (i as f64 - 50.0) * 0.02;
                let b = fit.shift + (j as f64 - 50.0) * 0.02;
                assert!(best <= rss(a, b) + 1e-12);
            }
        }
    }

    #[test]
    fn affine_fit_errors() {
        assert!(affine_adjust_fit(&sv(&[1.0]), &sv(&[1.0, 2.0])).is_err());
        assert!(affine_adjust_fit(&sv(&[1.0, 2.0, 3.0]), &sv(&[1.0, 2.0])).is_err());
        assert!(matches!(
            affine_adjust_fit(&sv(&[1.0, 2.0]), &sv(&[4.0, 4.0, 4.0, 4.0])),
            Err(SpiError::Degenerate(_))
        ));
    }

    proptest! {
        #[test]
        fn aps_in_unit_interval_and_decreasing_in_u(
            raw in prop::collection::vec(0.0f64..1.0, 2..8),
            label_seed in 0usize..100,
            u1 in 0.0f64..1.0,
            u2 in 0.0f64..1.0,
        ) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-3;
            let mut probs: Vec<f64> = raw.iter().map(|p| (p + 1e-3 / raw.len() as f64) / total).collect();
            let s: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= s);
            let p = ClassProbability::new(probs).unwrap();
            let label = label_seed % p.probs().len();
            let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
            let a = aps_score(&p, label, lo).unwrap();
            let b = aps_score(&p, label, hi).unwrap();
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
            prop_assert!(b <= a);
        }

        #[test]
        fn cqr_score_interval_duality(lo in -10.0f64..10.0, width in 0.0f64..5.0, y in -20.0f64..20.0, t in -5.0f64..5.0) {
            let q = QuantilePair::new(lo, lo + width).unwrap();
            let iv = cqr_interval(q, PredictionThreshold::new(t));
            prop_assert_eq!(cqr_score(q, y) <= t, iv.contains(y));
        }

        #[test]
        fn jitter_reorders_only_within_two_delta(
            values in prop::collection::vec(-1.0f64..1.0, 2..40),
            seed in 0u64..1000,
        ) {
            let delta = 1e-3;
            let s = ScoreVector::new(values).unwrap();
            let j = jitter(&s, delta, seed).unwrap();
            let v = s.values();
            let w = j.values();
            for a in 0..v.len() {
                for b in 0..v.len() {
                    if v[a] < v[b] && w[a] > w[b] {
                        prop_assert!(v[b] - v[a] <= 2.0 * delta);
                    }
                }
            }
        }
    }
}
