//! Finite-population order statistics.
//!
//! When `m + 1` exchangeable real scores are pooled with `N` synthetic scores,
//! the position of the `r`-th smallest real score among the synthetic order
//! statistics follows
//!
//! ```text
//! p(k) = C(k + r - 2, r - 1) * C(N + m - k - r + 2, m - r + 1) / C(N + m + 1, m + 1),   k = 1..=N+1
//! ```
//!
//! This module evaluates that mass function, its CDF, and the rank windows
//! `(R_r^-, R_r^+)` that trim `beta / 2` of probability from each tail.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiError};

/// Absolute slack applied when comparing a CDF value against `beta / 2` or
/// `1 - beta / 2`; resolves floating-point near-ties toward inclusion.
pub const WINDOW_TIE_SLACK: f64 = 1e-12;

/// Masses below this value are stored as zero.
pub const UNDERFLOW_FLOOR: f64 = 1e-300;

/// Re-anchor the multiplicative recurrence in log space every this many entries.
const ANCHOR_STRIDE: usize = 256;

/// Exact integer binomials are used up to this `n` (C(66, 33) < 2^63).
const EXACT_BINOMIAL_MAX_N: u64 = 66;

/// Below this lower index the binomial is evaluated as a short log-sum.
const SMALL_K: u64 = 32;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Natural log of the binomial coefficient `C(n, k)`.
pub fn log_binomial(n: u64, k: u64) -> Result<f64> {
    if k > n {
        return Err(SpiError::domain(format!("log_binomial: k = {k} exceeds n = {n}")));
    }
    let k = k.min(n - k);
    if k == 0 {
        return Ok(0.0);
    }
    if n <= EXACT_BINOMIAL_MAX_N {
        return Ok((exact_binomial(n, k) as f64).ln());
    }
    if k < SMALL_K {
        let nf = n as f64;
        let s: f64 = (0..k)
            .map(|i| ((nf - i as f64) / (i + 1) as f64).ln())
            .sum();
        return Ok(s);
    }
    // Stirling form arranged so that no two large terms cancel.
    let (nf, kf) = (n as f64, k as f64);
    let rest = nf - kf;
    let main = kf * (nf / kf).ln() - rest * (-kf / nf).ln_1p();
    let half = 0.5 * (nf / (kf * rest)).ln();
    Ok(main + half - HALF_LN_2PI + stirling_tail(nf) - stirling_tail(kf) - stirling_tail(rest))
}

/// `ln x! - [(x + 1/2) ln x - x + ln sqrt(2 pi)]` for `x >= 32`.
fn stirling_tail(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 / 1680.0)))
}

fn exact_binomial(n: u64, k: u64) -> u64 {
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * u128::from(n - i) / u128::from(i + 1);
    }
    c as u64
}

/// Mass function of the rank of the `r`-th real order statistic among the
/// synthetic order statistics, with its cumulative distribution.
#[derive(Debug, Clone)]
pub struct OrderStatPmf {
    m: usize,
    n: usize,
    r: usize,
    /// `mass[k - 1] = p(k)` for `k = 1..=N+1`.
    mass: Vec<f64>,
    /// `cdf[t] = F(t)` for `t = 0..=N+1`.
    cdf: Vec<f64>,
}

impl OrderStatPmf {
    /// Compute `p_{m,N,r}(k)` for every `k`.
    pub fn new(m: usize, n: usize, r: usize) -> Result<Self> {
        if n == 0 {
            return Err(SpiError::domain("order_stat_pmf: N must be at least 1"));
        }
        if r == 0 || r > m + 1 {
            return Err(SpiError::domain(format!(
                "order_stat_pmf: rank r = {r} outside [1, {}]",
                m + 1
            )));
        }
        let mass = pmf_entries(m, n, r)?;
        let cdf = accumulate_cdf(&mass);
        Ok(Self { m, n, r, mass, cdf })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn synthetic_count(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    /// Masses indexed from zero: `mass()[k - 1] = p(k)`.
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// `F(t) = sum_{k <= t} p(k)` for `0 <= t <= N + 1`.
    pub fn cdf(&self, t: usize) -> Result<f64> {
        self.cdf.get(t).copied().ok_or_else(|| {
            SpiError::domain(format!("order_stat_cdf: t = {t} outside [0, {}]", self.n + 1))
        })
    }

    /// The full CDF table, `cdf_table()[t] = F(t)`.
    pub fn cdf_table(&self) -> &[f64] {
        &self.cdf
    }

    /// `(R^-, R^+)` for this rank at level `beta`.
    pub fn window(&self, beta: f64) -> Result<(usize, usize)> {
        check_beta(beta)?;
        let n = self.n;
        let lo_threshold = beta / 2.0 + WINDOW_TIE_SLACK;
        let hi_threshold = 1.0 - beta / 2.0 - WINDOW_TIE_SLACK;
        // cdf[0] = 0 <= lo_threshold, so at least one s in 0..=N qualifies;
        // R^- = 1 + max{s : F(s) <= beta/2}.
        let r_minus = self.cdf[..=n].partition_point(|&f| f <= lo_threshold);
        // cdf[N + 1] = 1 >= hi_threshold, so the count below is at most N.
        let r_plus = self.cdf[1..].partition_point(|&f| f < hi_threshold) + 1;
        Ok((r_minus, r_plus))
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(SpiError::domain(format!("beta = {beta} must lie in (0, 1)")))
    }
}

fn log_mass(m: u64, n: u64, r: u64, k: u64, log_total: f64) -> Result<f64> {
    Ok(log_binomial(k + r - 2, r - 1)? + log_binomial(n + m + 2 - k - r, m + 1 - r)? - log_total)
}

/// Largest integer below which every `u64` converts to `f64` without rounding.
const EXACT_F64_INT: u64 = 1 << 53;

/// Each mass as one correctly rounded division of exact integers, when the
/// population is small enough for the counts to be exact in `f64`.
fn exact_pmf_entries(m: u64, n: u64, r: u64) -> Option<Vec<f64>> {
    if n + m + 1 > EXACT_BINOMIAL_MAX_N {
        return None;
    }
    let total = exact_binomial(n + m + 1, m + 1);
    if total >= EXACT_F64_INT {
        return None;
    }
    let entries = (1..=n + 1)
        .map(|k| {
            let count = exact_binomial(k + r - 2, r - 1) * exact_binomial(n + m + 2 - k - r, m + 1 - r);
            count as f64 / total as f64
        })
        .collect();
    Some(entries)
}

fn pmf_entries(m: usize, n: usize, r: usize) -> Result<Vec<f64>> {
    let (mu, nu, ru) = (m as u64, n as u64, r as u64);
    if let Some(exact) = exact_pmf_entries(mu, nu, ru) {
        return Ok(exact);
    }
    let log_total = log_binomial(nu + mu + 1, mu + 1)?;
    let len = n + 1;
    let mut mass = vec![0.0; len];
    let rf = r as f64;
    let nf = n as f64;
    let mf = m as f64;
    // p(k+1)/p(k) = (k + r - 1)(N - k + 1) / (k (N + m - k - r + 2))
    let ratio = |k: f64| ((k + rf - 1.0) * (nf - k + 1.0)) / (k * (nf + mf - k - rf + 2.0));

    let mut block_start = 0;
    while block_start < len {
        let block_end = (block_start + ANCHOR_STRIDE).min(len);
        let k0 = block_start as u64 + 1;
        let anchor = log_mass(mu, nu, ru, k0, log_total)?;
        if anchor > -700.0 {
            let mut p = anchor.exp();
            for (offset, slot) in mass[block_start..block_end].iter_mut().enumerate() {
                if offset > 0 {
                    p *= ratio((block_start + offset) as f64);
                }
                *slot = if p < UNDERFLOW_FLOOR { 0.0 } else { p };
            }
        } else {
            // Anchor underflows f64; carry the recurrence in log space.
            let mut lp = anchor;
            for (offset, slot) in mass[block_start..block_end].iter_mut().enumerate() {
                if offset > 0 {
                    lp += ratio((block_start + offset) as f64).ln();
                }
                let p = lp.exp();
                *slot = if p < UNDERFLOW_FLOOR { 0.0 } else { p };
            }
        }
        block_start = block_end;
    }
    Ok(mass)
}

/// Lower half of the CDF from prefix sums, upper half from `1 - suffix`;
/// each side accumulates from its own tail, so small masses are added first.
fn accumulate_cdf(mass: &[f64]) -> Vec<f64> {
    let len = mass.len();
    let mut prefix = vec![0.0; len + 1];
    for (k, &p) in mass.iter().enumerate() {
        prefix[k + 1] = prefix[k] + p;
    }
    let mut suffix = vec![0.0; len + 1];
    for k in (0..len).rev() {
        suffix[k] = suffix[k + 1] + mass[k];
    }
    let mut cdf = Vec::with_capacity(len + 1);
    let mut last: f64 = 0.0;
    for t in 0..=len {
        let value = if prefix[t] <= 0.5 { prefix[t] } else { 1.0 - suffix[t] };
        last = last.max(value);
        cdf.push(last);
    }
    cdf[0] = 0.0;
    cdf[len] = 1.0;
    cdf
}

/// `p_{m,N,r}` for every `k`.
pub fn order_stat_pmf(m: usize, n: usize, r: usize) -> Result<OrderStatPmf> {
    OrderStatPmf::new(m, n, r)
}

/// `F(t)` of a previously computed mass function.
pub fn order_stat_cdf(pmf: &OrderStatPmf, t: usize) -> Result<f64> {
    pmf.cdf(t)
}

/// `(R_r^-, R_r^+)` for a single rank.
pub fn window_rank_bounds(m: usize, n: usize, r: usize, beta: f64) -> Result<(usize, usize)> {
    check_beta(beta)?;
    OrderStatPmf::new(m, n, r)?.window(beta)
}

/// Mass functions for every rank `r = 1..=m+1` at fixed `(m, N)`.
///
/// These do not depend on `beta`, so sweeps over `beta` reuse one family.
#[derive(Debug, Clone)]
pub struct OrderStatFamily {
    m: usize,
    n: usize,
    ranks: Vec<OrderStatPmf>,
}

impl OrderStatFamily {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        let ranks = (1..=m + 1)
            .map(|r| OrderStatPmf::new(m, n, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { m, n, ranks })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn synthetic_count(&self) -> usize {
        self.n
    }

    pub fn pmf(&self, r: usize) -> Option<&OrderStatPmf> {
        r.checked_sub(1).and_then(|i| self.ranks.get(i))
    }

    pub fn window_table(&self, beta: f64) -> Result<WindowTable> {
        check_beta(beta)?;
        let rows = self
            .ranks
            .iter()
            .map(|pmf| pmf.window(beta))
            .collect::<Result<Vec<_>>>()?;
        Ok(WindowTable { m: self.m, n: self.n, beta, rows })
    }
}

/// Rank windows `(R_r^-, R_r^+)` for `r = 1..=m+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowTable {
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub beta: f64,
    /// `rows[r - 1] = (R_r^-, R_r^+)`.
    pub rows: Vec<(usize, usize)>,
}

impl WindowTable {
    /// Window table for `(m, N, beta)`.
    pub fn new(m: usize, n: usize, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        OrderStatFamily::new(m, n)?.window_table(beta)
    }

    /// `(R_r^-, R_r^+)` for a 1-based rank.
    pub fn row(&self, r: usize) -> Option<(usize, usize)> {
        r.checked_sub(1).and_then(|i| self.rows.get(i)).copied()
    }

    /// Number of ranks whose lower window rank is at most `index`.
    /// Rows are nondecreasing, so this is also the largest such rank.
    pub fn count_lower_at_most(&self, index: usize) -> usize {
        self.rows.partition_point(|&(lo, _)| lo <= index)
    }

    /// Number of ranks whose upper window rank is at most `index`.
    pub fn count_upper_at_most(&self, index: usize) -> usize {
        self.rows.partition_point(|&(_, hi)| hi <= index)
    }
}

/// Alias kept for callers that think of the table as an operation.
pub fn window_table(m: usize, n: usize, beta: f64) -> Result<WindowTable> {
    WindowTable::new(m, n, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn log_binomial_small_values() {
        assert!(close(log_binomial(5, 2).unwrap(), 10f64.ln(), 1e-15));
        for n in 0..40 {
            assert_eq!(log_binomial(n, 0).unwrap(), 0.0);
            assert_eq!(log_binomial(n, n).unwrap(), 0.0);
        }
    }

    #[test]
    fn log_binomial_matches_exact_integers_up_to_60() {
        // Exact integers via Pascal's triangle in u128.
        let mut row: Vec<u128> = vec![1];
        for n in 0..=60u64 {
            for (k, &c) in row.iter().enumerate() {
                let got = log_binomial(n, k as u64).unwrap().exp();
                let rel = (got - c as f64).abs() / c as f64;
                assert!(rel <= 1e-12, "C({n},{k}): rel err {rel}");
            }
            let mut next = vec![1u128; row.len() + 1];
            for k in 1..row.len() {
                next[k] = row[k - 1] + row[k];
            }
            row = next;
        }
    }

    #[test]
    fn log_binomial_large_against_high_precision_loggamma() {
        // lnΓ(n+1) − lnΓ(k+1) − lnΓ(n−k+1), evaluated at 50 significant digits.
        let v = log_binomial(31016, 15001).unwrap();
        assert!(close(v, 21_476.678_352_873_99, 1e-9), "{v}");
        let v = log_binomial(1000, 500).unwrap();
        assert!(close(v, 689.467_261_567_851_2, 1e-10), "{v}");
        let v = log_binomial(100000, 37).unwrap();
        assert!(close(v, 326.640_968_938_663_14, 1e-10), "{v}");
    }

    #[test]
    fn log_binomial_rejects_k_above_n() {
        assert!(matches!(log_binomial(3, 4), Err(SpiError::Domain(_))));
    }

    #[test]
    fn pmf_single_real_score_is_uniform() {
        let pmf = order_stat_pmf(0, 4, 1).unwrap();
        for &p in pmf.mass() {
            assert!(close(p, 0.2, 1e-15));
        }
    }

    #[test]
    fn pmf_one_real_one_synthetic() {
        let lo = order_stat_pmf(1, 1, 1).unwrap();
        assert!(close(lo.mass()[0], 2.0 / 3.0, 1e-15));
        assert!(close(lo.mass()[1], 1.0 / 3.0, 1e-15));
        let hi = order_stat_pmf(1, 1, 2).unwrap();
        assert!(close(hi.mass()[0], 1.0 / 3.0, 1e-15));
        assert!(close(hi.mass()[1], 2.0 / 3.0, 1e-15));
        assert!(close(lo.cdf(1).unwrap(), 2.0 / 3.0, 1e-15));
    }

    #[test]
    fn pmf_rejects_bad_rank() {
        assert!(order_stat_pmf(3, 10, 0).is_err());
        assert!(order_stat_pmf(3, 10, 5).is_err());
        assert!(order_stat_pmf(3, 0, 1).is_err());
    }

    #[test]
    fn cdf_endpoints_and_range() {
        let pmf = order_stat_pmf(7, 50, 3).unwrap();
        assert_eq!(pmf.cdf(0).unwrap(), 0.0);
        assert_eq!(pmf.cdf(51).unwrap(), 1.0);
        assert!(pmf.cdf(52).is_err());
    }

    #[test]
    fn pmf_large_label_conditional_scale() {
        for r in 1..=16 {
            let pmf = order_stat_pmf(15, 30000, r).unwrap();
            let sum: f64 = pmf.mass().iter().sum();
            assert!(close(sum, 1.0, 1e-8), "r={r}: sum={sum}");
            assert!(pmf.mass().iter().all(|p| p.is_finite() && *p >= 0.0));
        }
    }

    #[test]
    fn pmf_survives_underflowing_anchor() {
        // p(1) for r = m + 1 is 1 / C(N + m + 1, m + 1), far below f64 range here.
        let pmf = order_stat_pmf(300, 5000, 301).unwrap();
        let sum: f64 = pmf.mass().iter().sum();
        assert!(close(sum, 1.0, 1e-10), "sum={sum}");
        assert_eq!(pmf.mass()[0], 0.0);
    }

    #[test]
    fn window_examples() {
        assert_eq!(window_rank_bounds(1, 1, 1, 0.5).unwrap(), (1, 2));
        assert_eq!(window_rank_bounds(0, 4, 1, 0.5).unwrap(), (2, 4));
        assert_eq!(window_rank_bounds(6, 9, 4, 1e-9).unwrap(), (1, 10));
        assert!(window_rank_bounds(1, 1, 1, 0.0).is_err());
        assert!(window_rank_bounds(1, 1, 1, 1.0).is_err());
    }

    #[test]
    fn window_matches_direct_scan() {
        // Direct scan of a CDF accumulated left to right with the raw formula.
        let (m, n, r, beta) = (15usize, 1000usize, 8usize, 0.4);
        let log_total = log_binomial((n + m + 1) as u64, (m + 1) as u64).unwrap();
        let mut f = vec![0.0f64; n + 2];
        for k in 1..=n + 1 {
            let lp = log_binomial((k + r - 2) as u64, (r - 1) as u64).unwrap()
                + log_binomial((n + m + 2 - k - r) as u64, (m + 1 - r) as u64).unwrap()
                - log_total;
            f[k] = f[k - 1] + lp.exp();
        }
        let rm = (1..=n + 1).filter(|&t| f[t - 1] <= beta / 2.0).max().unwrap();
        let rp = (1..=n + 1).find(|&t| f[t] >= 1.0 - beta / 2.0).unwrap();
        assert_eq!(window_rank_bounds(m, n, r, beta).unwrap(), (rm, rp));
        assert_eq!((rm, rp), (368, 574));
    }

    #[test]
    fn window_table_examples() {
        assert_eq!(window_table(1, 1, 0.5).unwrap().rows, vec![(1, 2), (1, 2)]);
        assert_eq!(window_table(0, 4, 0.5).unwrap().rows, vec![(2, 4)]);
        let t = window_table(15, 1000, 0.4).unwrap();
        assert_eq!(t.rows.len(), 16);
        for w in t.rows.windows(2) {
            assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn window_table_json_shape() {
        let t = window_table(1, 1, 0.5).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"{"m":1,"N":1,"beta":0.5,"rows":[[1,2],[1,2]]}"#);
    }
}
