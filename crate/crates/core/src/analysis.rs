//! Continuous score distributions and the order-statistic total-variation term.
//!
//! `tv_order_stat(P, Q, m)` is the average over ranks `i = 1..=m+1` of the
//! total-variation distance between the `i`-th order statistics of `m + 1`
//! draws from `P` and from `Q`. It quantifies how far the synthetic score
//! distribution may be from the real one before the coverage window widens.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::combinatorics::log_binomial;
use crate::error::{Result, SpiError};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Tail probability trimmed from each end of the integration domain.
pub const DOMAIN_TAIL: f64 = 1e-9;

/// Absolute tolerance for each per-rank total-variation integral.
pub const TV_TOLERANCE: f64 = 1e-7;

/// A continuous score distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum ContinuousDist {
    Normal { mu: f64, sigma: f64 },
    Uniform { a: f64, b: f64 },
    LogNormal { mu: f64, sigma: f64 },
    /// `shift + scale * X` with `X ~ base`.
    LocScale { base: Box<ContinuousDist>, shift: f64, scale: f64 },
    /// `weight * a + (1 - weight) * b`.
    Mixture { weight: f64, a: Box<ContinuousDist>, b: Box<ContinuousDist> },
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

fn std_normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / SQRT_2)
}

fn std_normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

fn std_normal_ln_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

impl ContinuousDist {
    pub fn normal(mu: f64, sigma: f64) -> Self {
        ContinuousDist::Normal { mu, sigma }
    }

    pub fn uniform(a: f64, b: f64) -> Self {
        ContinuousDist::Uniform { a, b }
    }

    pub fn lognormal(mu: f64, sigma: f64) -> Self {
        ContinuousDist::LogNormal { mu, sigma }
    }

    pub fn locscale(base: ContinuousDist, shift: f64, scale: f64) -> Self {
        ContinuousDist::LocScale { base: Box::new(base), shift, scale }
    }

    pub fn mixture(weight: f64, a: ContinuousDist, b: ContinuousDist) -> Self {
        ContinuousDist::Mixture { weight, a: Box::new(a), b: Box::new(b) }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(SpiError::domain(format!("distribution parameter {name} = {v} is not finite")))
            }
        };
        match self {
            ContinuousDist::Normal { mu, sigma } | ContinuousDist::LogNormal { mu, sigma } => {
                finite("mu", *mu)?;
                finite("sigma", *sigma)?;
                if *sigma <= 0.0 {
                    return Err(SpiError::domain(format!("sigma = {sigma} must be positive")));
                }
            }
            ContinuousDist::Uniform { a, b } => {
                finite("a", *a)?;
                finite("b", *b)?;
                if a >= b {
                    return Err(SpiError::domain(format!("uniform bounds need a < b, got ({a}, {b})")));
                }
            }
            ContinuousDist::LocScale { base, shift, scale } => {
                finite("shift", *shift)?;
                finite("scale", *scale)?;
                if *scale <= 0.0 {
                    return Err(SpiError::domain(format!("scale = {scale} must be positive")));
                }
                base.validate()?;
            }
            ContinuousDist::Mixture { weight, a, b } => {
                if !(0.0..=1.0).contains(weight) {
                    return Err(SpiError::domain(format!("mixture weight {weight} outside [0, 1]")));
                }
                a.validate()?;
                b.validate()?;
            }
        }
        Ok(())
    }

    /// Accepts `±inf`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x == f64::INFINITY {
            return 1.0;
        }
        if x == f64::NEG_INFINITY {
            return 0.0;
        }
        match self {
            ContinuousDist::Normal { mu, sigma } => std_normal_cdf((x - mu) / sigma),
            ContinuousDist::Uniform { a, b } => ((x - a) / (b - a)).clamp(0.0, 1.0),
            ContinuousDist::LogNormal { mu, sigma } => {
                if x <= 0.0 {
                    0.0
                } else {
                    std_normal_cdf((x.ln() - mu) / sigma)
                }
            }
            ContinuousDist::LocScale { base, shift, scale } => base.cdf((x - shift) / scale),
            ContinuousDist::Mixture { weight, a, b } => weight * a.cdf(x) + (1.0 - weight) * b.cdf(x),
        }
    }

    /// Survival function `1 - cdf(x)` without cancellation in the upper tail.
    pub fn sf(&self, x: f64) -> f64 {
        if x == f64::INFINITY {
            return 0.0;
        }
        if x == f64::NEG_INFINITY {
            return 1.0;
        }
        match self {
            ContinuousDist::Normal { mu, sigma } => std_normal_sf((x - mu) / sigma),
            ContinuousDist::Uniform { a, b } => ((b - x) / (b - a)).clamp(0.0, 1.0),
            ContinuousDist::LogNormal { mu, sigma } => {
                if x <= 0.0 {
                    1.0
                } else {
                    std_normal_sf((x.ln() - mu) / sigma)
                }
            }
            ContinuousDist::LocScale { base, shift, scale } => base.sf((x - shift) / scale),
            ContinuousDist::Mixture { weight, a, b } => weight * a.sf(x) + (1.0 - weight) * b.sf(x),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if !x.is_finite() {
            return 0.0;
        }
        match self {
            ContinuousDist::Normal { mu, sigma } => (std_normal_ln_pdf((x - mu) / sigma)).exp() / sigma,
            ContinuousDist::Uniform { a, b } => {
                if x >= *a && x <= *b {
                    1.0 / (b - a)
                } else {
                    0.0
                }
            }
            ContinuousDist::LogNormal { mu, sigma } => {
                if x <= 0.0 {
                    0.0
                } else {
                    (std_normal_ln_pdf((x.ln() - mu) / sigma)).exp() / (sigma * x)
                }
            }
            ContinuousDist::LocScale { base, shift, scale } => base.pdf((x - shift) / scale) / scale,
            ContinuousDist::Mixture { weight, a, b } => weight * a.pdf(x) + (1.0 - weight) * b.pdf(x),
        }
    }

    /// Generalized inverse of the CDF for `p` in `[0, 1]`.
    pub fn quantile(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return self.support().0;
        }
        if p >= 1.0 {
            return self.support().1;
        }
        match self {
            ContinuousDist::Normal { mu, sigma } => mu + sigma * std_normal_quantile(p),
            ContinuousDist::Uniform { a, b } => a + p * (b - a),
            ContinuousDist::LogNormal { mu, sigma } => (mu + sigma * std_normal_quantile(p)).exp(),
            ContinuousDist::LocScale { base, shift, scale } => shift + scale * base.quantile(p),
            ContinuousDist::Mixture { a, b, .. } => {
                let (qa, qb) = (a.quantile(p), b.quantile(p));
                self.bisect_quantile(p, qa.min(qb), qa.max(qb))
            }
        }
    }

    /// The mixture quantile lies between the component quantiles.
    fn bisect_quantile(&self, p: f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    /// Closed support `(inf, sup)`, possibly infinite.
    pub fn support(&self) -> (f64, f64) {
        match self {
            ContinuousDist::Normal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            ContinuousDist::Uniform { a, b } => (*a, *b),
            ContinuousDist::LogNormal { .. } => (0.0, f64::INFINITY),
            ContinuousDist::LocScale { base, shift, scale } => {
                let (lo, hi) = base.support();
                (shift + scale * lo, shift + scale * hi)
            }
            ContinuousDist::Mixture { a, b, .. } => {
                let (a0, a1) = a.support();
                let (b0, b1) = b.support();
                (a0.min(b0), a1.max(b1))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ContinuousDist::Normal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                mu + sigma * z
            }
            ContinuousDist::Uniform { a, b } => a + (b - a) * rng.random::<f64>(),
            ContinuousDist::LogNormal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (mu + sigma * z).exp()
            }
            ContinuousDist::LocScale { base, shift, scale } => shift + scale * base.sample(rng),
            ContinuousDist::Mixture { weight, a, b } => {
                if rng.random::<f64>() < *weight {
                    a.sample(rng)
                } else {
                    b.sample(rng)
                }
            }
        }
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Density of the `i`-th order statistic of `sample_size` i.i.d. draws, at `x`.
pub fn order_stat_density(dist: &ContinuousDist, sample_size: usize, i: usize, x: f64) -> Result<f64> {
    if i == 0 || i > sample_size {
        return Err(SpiError::domain(format!("rank {i} outside [1, {sample_size}]")));
    }
    let f = dist.pdf(x);
    if f <= 0.0 {
        return Ok(0.0);
    }
    let below = (i - 1) as f64;
    let above = (sample_size - i) as f64;
    let (cdf, sf) = (dist.cdf(x), dist.sf(x));
    if (below > 0.0 && cdf <= 0.0) || (above > 0.0 && sf <= 0.0) {
        return Ok(0.0);
    }
    // n! / ((i-1)! (n-i)!) = n * C(n-1, i-1)
    let log_prefactor = (sample_size as f64).ln() + log_binomial((sample_size - 1) as u64, (i - 1) as u64)?;
    let mut log_density = log_prefactor + f.ln();
    if below > 0.0 {
        log_density += below * cdf.ln();
    }
    if above > 0.0 {
        log_density += above * sf.ln();
    }
    Ok(log_density.exp())
}

/// Average total-variation distance between matching order statistics of
/// `m + 1` draws from `p` and from `q`.
pub fn tv_order_stat(p: &ContinuousDist, q: &ContinuousDist, m: usize) -> Result<f64> {
    p.validate()?;
    q.validate()?;
    if p == q {
        return Ok(0.0);
    }
    let lo = p.quantile(DOMAIN_TAIL).min(q.quantile(DOMAIN_TAIL));
    let hi = p.quantile(1.0 - DOMAIN_TAIL).max(q.quantile(1.0 - DOMAIN_TAIL));
    let n = m + 1;
    let per_rank = (1..=n)
        .into_par_iter()
        .map(|i| {
            let diff = |x: f64| {
                let fp = order_stat_density(p, n, i, x).unwrap_or(0.0);
                let fq = order_stat_density(q, n, i, x).unwrap_or(0.0);
                0.5 * (fp - fq).abs()
            };
            integrate(diff, lo, hi, TV_TOLERANCE)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((per_rank.iter().sum::<f64>() / n as f64).clamp(0.0, 1.0))
}

// 15-point Kronrod abscissae with the embedded 7-point Gauss rule.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_SUBINTERVALS: usize = 4000;

fn gauss_kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for (j, (&x, &w)) in XGK[..7].iter().zip(&WGK[..7]).enumerate() {
        let dx = half * x;
        let pair = f(center - dx) + f(center + dx);
        kronrod += w * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Globally adaptive Gauss–Kronrod (7, 15) quadrature to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) || a > b {
        return Err(SpiError::domain(format!("integration bounds ({a}, {b}) must be finite and ordered")));
    }
    if a == b {
        return Ok(0.0);
    }
    let (value, error) = gauss_kronrod(&f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Segment { a, b, value, error });
    let (mut total, mut total_err) = (value, error);
    while total_err > tol {
        if heap.len() >= MAX_SUBINTERVALS {
            return Err(SpiError::Quadrature { estimate: total, tolerance: tol });
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // cannot split further in floating point
            return Err(SpiError::Quadrature { estimate: total, tolerance: tol });
        }
        let (lv, le) = gauss_kronrod(&f, worst.a, mid);
        let (rv, re) = gauss_kronrod(&f, mid, worst.b);
        total += lv + rv - worst.value;
        total_err += le + re - worst.error;
        heap.push(Segment { a: worst.a, b: mid, value: lv, error: le });
        heap.push(Segment { a: mid, b: worst.b, value: rv, error: re });
    }
    // Re-sum from the segments to shed the running-update rounding.
    Ok(heap.iter().map(|s| s.value).sum())
}
