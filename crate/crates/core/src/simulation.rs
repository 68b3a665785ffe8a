//! Deterministic Monte Carlo experiments.
//!
//! Every trial draws from its own generator, seeded by a stateless mix of the
//! master seed and the trial index, and results are reduced in trial order, so
//! output is bit-identical at any thread count. Coverage is recorded as the
//! exact conditional probability `P.cdf(cutoff)` rather than a test-set frequency.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::ContinuousDist;
use crate::calibration::{
    check_unit_open, extended_real, split_conformal_threshold, CoverageBounds, PredictionThreshold, SpiCalibrator,
    SyntheticSource,
};
use crate::combinatorics::OrderStatFamily;
use crate::error::{Result, SpiError};
use crate::scores::affine_adjust_fit;
use crate::subset_selection::{select_subsets, GroupedScores};
use crate::transporter::ScoreVector;

pub const DEFAULT_BETA: f64 = 0.4;

fn default_beta() -> f64 {
    DEFAULT_BETA
}

/// Calibration procedure compared in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    OnlyReal,
    OnlySynth,
    Spi,
    SpiSubset,
    SpiAffine,
    LabelConditional,
}

/// Synthetic data arranged as `groups` groups of `group_size`, of which the `k`
/// nearest (by Cramér–von Mises distance) are pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetConfig {
    pub groups: usize,
    pub group_size: usize,
    pub k: usize,
    /// One distribution per group; every group draws from `q_dist` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_dists: Option<Vec<ContinuousDist>>,
}

/// One label of a label-conditional experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelConfig {
    pub label: String,
    pub p_dist: ContinuousDist,
    /// Labels without a synthetic distribution fall back to the whole synthetic set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_dist: Option<ContinuousDist>,
    /// Real draws for this label; defaults to the top-level `m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Synthetic draws for this label; defaults to the top-level `N`.
    #[serde(default, rename = "N", skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_dist: Option<ContinuousDist>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_dist: Option<ContinuousDist>,
    pub trials: usize,
    pub master_seed: u64,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<LabelConfig>>,
    /// Width `hi - lo` of a simulated quantile-regression band; enables the
    /// interval-width report `2 * cutoff + band_width`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_width: Option<f64>,
}

impl TrialConfig {
    /// A two-distribution config with `beta = 0.4`, 100 trials and seed 0.
    pub fn new(method: Method, m: usize, n: usize, alpha: f64, p: ContinuousDist, q: ContinuousDist) -> Self {
        Self {
            m,
            n,
            alpha,
            beta: DEFAULT_BETA,
            p_dist: Some(p),
            q_dist: Some(q),
            trials: 100,
            master_seed: 0,
            method,
            subset: None,
            labels: None,
            band_width: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn p(&self) -> Result<&ContinuousDist> {
        self.p_dist.as_ref().ok_or_else(|| SpiError::config("p_dist is required for this method"))
    }

    fn q(&self) -> Result<&ContinuousDist> {
        self.q_dist.as_ref().ok_or_else(|| SpiError::config("q_dist is required for this method"))
    }

    /// Checks every parameter and method combination.
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(SpiError::config("trials must be at least 1"));
        }
        check_unit_open("alpha", self.alpha)?;
        check_unit_open("beta", self.beta)?;
        if let Some(w) = self.band_width {
            if !(w.is_finite() && w >= 0.0) {
                return Err(SpiError::domain(format!("band_width = {w} must be finite and nonnegative")));
            }
        }
        if self.subset.is_some() && self.method != Method::SpiSubset {
            return Err(SpiError::config("subset parameters are only valid with method spi-subset"));
        }
        if self.labels.is_some() && self.method != Method::LabelConditional {
            return Err(SpiError::config("labels are only valid with method label-conditional"));
        }
        for d in self.p_dist.iter().chain(self.q_dist.iter()) {
            d.validate()?;
        }
        match self.method {
            Method::OnlyReal => {
                self.p()?;
            }
            Method::OnlySynth | Method::Spi => {
                self.p()?;
                self.q()?;
            }
            Method::SpiAffine => {
                self.p()?;
                self.q()?;
                if self.m < 2 || self.n < self.m {
                    return Err(SpiError::config(format!(
                        "spi-affine needs m >= 2 and N >= m, got m = {}, N = {}",
                        self.m, self.n
                    )));
                }
            }
            Method::SpiSubset => self.validate_subset()?,
            Method::LabelConditional => self.validate_labels()?,
        }
        Ok(())
    }

    fn validate_subset(&self) -> Result<()> {
        self.p()?;
        let s = self.subset.as_ref().ok_or_else(|| SpiError::config("spi-subset needs a subset block"))?;
        if s.groups == 0 || s.group_size == 0 {
            return Err(SpiError::config("subset groups and group_size must be positive"));
        }
        if s.k == 0 || s.k > s.groups {
            return Err(SpiError::config(format!("subset k = {} outside [1, {}]", s.k, s.groups)));
        }
        if s.groups * s.group_size != self.n {
            return Err(SpiError::config(format!(
                "N = {} must equal groups * group_size = {}",
                self.n,
                s.groups * s.group_size
            )));
        }
        match &s.group_dists {
            Some(ds) if ds.len() != s.groups => {
                return Err(SpiError::config(format!(
                    "{} group distributions given for {} groups",
                    ds.len(),
                    s.groups
                )))
            }
            Some(ds) => ds.iter().try_for_each(ContinuousDist::validate)?,
            None => {
                self.q()?;
            }
        }
        Ok(())
    }

    fn validate_labels(&self) -> Result<()> {
        if self.p_dist.is_some() || self.q_dist.is_some() {
            return Err(SpiError::config("label-conditional takes p_dist and q_dist per label, not at top level"));
        }
        let labels = self.labels.as_ref().ok_or_else(|| SpiError::config("label-conditional needs labels"))?;
        if labels.is_empty() {
            return Err(SpiError::config("label list is empty"));
        }
        let mut seen = BTreeSet::new();
        for l in labels {
            if !seen.insert(l.label.as_str()) {
                return Err(SpiError::config(format!("duplicate label {:?}", l.label)));
            }
            l.p_dist.validate()?;
            if let Some(q) = &l.q_dist {
                q.validate()?;
            }
        }
        if self.synthetic_label_total() == 0 {
            return Err(SpiError::config("no label has synthetic draws; the whole synthetic set would be empty"));
        }
        Ok(())
    }

    fn label_sizes(&self, l: &LabelConfig) -> (usize, usize) {
        let n = if l.q_dist.is_some() { l.n.unwrap_or(self.n) } else { 0 };
        (l.m.unwrap_or(self.m), n)
    }

    fn synthetic_label_total(&self) -> usize {
        self.labels.iter().flatten().map(|l| self.label_sizes(l).1).sum()
    }
}

/// Stateless 64-bit mixer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for trial `index` under `master_seed`.
pub fn trial_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(index))
}

pub fn trial_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(trial_seed(master_seed, index))
}

/// Runs `f` on a dedicated pool of `workers` threads, or the global pool for `None`.
fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(SpiError::config("worker count must be at least 1")),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| SpiError::config(format!("cannot start {w} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn sample_scores<R: Rng>(dist: &ContinuousDist, n: usize, rng: &mut R) -> Result<ScoreVector> {
    ScoreVector::new(dist.sample_n(n, rng))
}

/// One trial (and one label, for label-conditional runs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(with = "extended_real")]
    pub threshold: f64,
    pub coverage: f64,
    pub trivial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageQuantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Aggregates over a set of trial records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub count: usize,
    pub mean_coverage: f64,
    /// `sqrt(v(1 - v) / count)` for mean coverage `v`.
    pub coverage_se: f64,
    /// Population standard deviation of the per-trial coverage values.
    pub coverage_sd: f64,
    /// `coverage_sd / sqrt(count)`.
    pub empirical_se: f64,
    pub quantiles: CoverageQuantiles,
    /// Mean over finite thresholds; absent when none are finite.
    pub mean_threshold: Option<f64>,
    pub finite_thresholds: usize,
    pub fraction_trivial: f64,
    /// Mean CQR interval width over non-trivial trials.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_interval_width: Option<f64>,
}

/// Linear-interpolation quantile of sorted data.
fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl CoverageSummary {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a TrialRecord>, band_width: Option<f64>) -> Self {
        let records: Vec<&TrialRecord> = records.into_iter().collect();
        let count = records.len();
        if count == 0 {
            let nan = f64::NAN;
            return Self {
                count,
                mean_coverage: nan,
                coverage_se: nan,
                coverage_sd: nan,
                empirical_se: nan,
                quantiles: CoverageQuantiles { min: nan, q25: nan, median: nan, q75: nan, max: nan },
                mean_threshold: None,
                finite_thresholds: 0,
                fraction_trivial: nan,
                mean_interval_width: None,
            };
        }
        let t = count as f64;
        let mean = records.iter().map(|r| r.coverage).sum::<f64>() / t;
        let var = records.iter().map(|r| (r.coverage - mean).powi(2)).sum::<f64>() / t;
        let mut sorted: Vec<f64> = records.iter().map(|r| r.coverage).collect();
        sorted.sort_by(f64::total_cmp);
        let finite: Vec<f64> = records.iter().map(|r| r.threshold).filter(|c| c.is_finite()).collect();
        let mean_of = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let widths: Vec<f64> = match band_width {
            Some(b) => finite.iter().map(|&c| (2.0 * c + b).max(0.0)).collect(),
            None => Vec::new(),
        };
        Self {
            count,
            mean_coverage: mean,
            coverage_se: (mean * (1.0 - mean) / t).max(0.0).sqrt(),
            coverage_sd: var.sqrt(),
            empirical_se: (var / t).sqrt(),
            quantiles: CoverageQuantiles {
                min: sorted[0],
                q25: sorted_quantile(&sorted, 0.25),
                median: sorted_quantile(&sorted, 0.5),
                q75: sorted_quantile(&sorted, 0.75),
                max: sorted[count - 1],
            },
            mean_threshold: mean_of(&finite),
            finite_thresholds: finite.len(),
            fraction_trivial: records.iter().filter(|r| r.trivial).count() as f64 / t,
            mean_interval_width: band_width.and(mean_of(&widths)),
        }
    }
}

/// Per-label results of a label-conditional experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub bounds: CoverageBounds,
    pub synthetic_source: SyntheticSource,
    pub summary: CoverageSummary,
}

/// Output of [`run_coverage_experiment`]. JSON carries everything but the
/// per-trial records, which go to CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub config: TrialConfig,
    /// Worst-case coverage interval of the synthetic-powered methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<CoverageBounds>,
    pub aggregate: CoverageSummary,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_label: BTreeMap<String, LabelSummary>,
    #[serde(skip)]
    pub records: Vec<TrialRecord>,
}

impl TrialReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let labeled = self.config.method == Method::LabelConditional;
        let mut w = csv::Writer::from_writer(out);
        if labeled {
            w.write_record(["trial", "label", "threshold", "coverage", "trivial"])?;
        } else {
            w.write_record(["trial", "threshold", "coverage", "trivial"])?;
        }
        for r in &self.records {
            let mut row = vec![r.trial.to_string()];
            if labeled {
                row.push(r.label.clone().unwrap_or_default());
            }
            row.push(extended_real::format(r.threshold, None));
            row.push(format!("{}", r.coverage));
            row.push(r.trivial.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
    }

    pub fn json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct LabelPlan {
    label: String,
    p: ContinuousDist,
    q: Option<ContinuousDist>,
    m: usize,
    n: usize,
    calibrator: SpiCalibrator,
}

enum Plan {
    OnlyReal,
    OnlySynth,
    Spi(SpiCalibrator),
    SpiAffine(SpiCalibrator),
    SpiSubset(SpiCalibrator),
    Labels(Vec<LabelPlan>),
}

fn build_plan(config: &TrialConfig) -> Result<Plan> {
    let (m, n, alpha, beta) = (config.m, config.n, config.alpha, config.beta);
    Ok(match config.method {
        Method::OnlyReal => Plan::OnlyReal,
        Method::OnlySynth => Plan::OnlySynth,
        Method::Spi => Plan::Spi(SpiCalibrator::new(m, n, alpha, beta)?),
        Method::SpiAffine => Plan::SpiAffine(SpiCalibrator::new(m, n, alpha, beta)?),
        Method::SpiSubset => {
            let s = config.subset.as_ref().expect("validated");
            Plan::SpiSubset(SpiCalibrator::new(m, s.k * s.group_size, alpha, beta)?)
        }
        Method::LabelConditional => {
            let whole = config.synthetic_label_total();
            let plans = config
                .labels
                .iter()
                .flatten()
                .map(|l| {
                    let (m_y, n_y) = config.label_sizes(l);
                    let pool = if n_y > 0 { n_y } else { whole };
                    Ok(LabelPlan {
                        label: l.label.clone(),
                        p: l.p_dist.clone(),
                        q: l.q_dist.clone().filter(|_| n_y > 0),
                        m: m_y,
                        n: n_y,
                        calibrator: SpiCalibrator::new(m_y, pool, alpha, beta)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Plan::Labels(plans)
        }
    })
}

fn record(trial: usize, label: Option<String>, p: &ContinuousDist, t: PredictionThreshold) -> TrialRecord {
    TrialRecord { trial, label, threshold: t.cutoff, coverage: p.cdf(t.cutoff), trivial: t.is_trivial() }
}

fn group_id(l: usize, groups: usize) -> String {
    let width = groups.saturating_sub(1).to_string().len();
    format!("g{l:0width$}")
}

fn run_trial(config: &TrialConfig, plan: &Plan, trial: usize) -> Result<Vec<TrialRecord>> {
    let mut rng = trial_rng(config.master_seed, trial as u64);
    if let Plan::Labels(labels) = plan {
        let mut real = Vec::with_capacity(labels.len());
        let mut synth = Vec::with_capacity(labels.len());
        for l in labels {
            real.push(sample_scores(&l.p, l.m, &mut rng)?);
            synth.push(match &l.q {
                Some(q) => Some(sample_scores(q, l.n, &mut rng)?),
                None => None,
            });
        }
        let whole = ScoreVector::new(synth.iter().flatten().flat_map(|s| s.values().iter().copied()).collect())?;
        return labels
            .iter()
            .zip(real.iter().zip(&synth))
            .map(|(l, (r, s))| {
                let t = l.calibrator.threshold(r, s.as_ref().unwrap_or(&whole))?;
                Ok(record(trial, Some(l.label.clone()), &l.p, t))
            })
            .collect();
    }

    let p = config.p()?;
    let real = sample_scores(p, config.m, &mut rng)?;
    let threshold = match plan {
        Plan::OnlyReal => split_conformal_threshold(&real, config.alpha)?,
        Plan::OnlySynth => split_conformal_threshold(&sample_scores(config.q()?, config.n, &mut rng)?, config.alpha)?,
        Plan::Spi(c) => c.threshold(&real, &sample_scores(config.q()?, config.n, &mut rng)?)?,
        Plan::SpiAffine(c) => {
            let synth = sample_scores(config.q()?, config.n, &mut rng)?;
            let fit = affine_adjust_fit(&real, &synth)?;
            c.threshold(&real, &fit.adjust(&synth)?)?
        }
        Plan::SpiSubset(c) => {
            let s = config.subset.as_ref().expect("validated");
            let groups = (0..s.groups)
                .map(|l| {
                    let dist = match &s.group_dists {
                        Some(ds) => &ds[l],
                        None => config.q()?,
                    };
                    Ok((group_id(l, s.groups), sample_scores(dist, s.group_size, &mut rng)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let grouped = GroupedScores::new(groups)?;
            let chosen: Vec<String> = select_subsets(&real, &grouped, s.k)?.into_iter().map(|g| g.group).collect();
            c.threshold(&real, &grouped.pooled(&chosen)?)?
        }
        Plan::Labels(_) => unreachable!(),
    };
    Ok(vec![record(trial, None, p, threshold)])
}

pub fn run_coverage_experiment(config: &TrialConfig) -> Result<TrialReport> {
    run_coverage_experiment_with_workers(config, None)
}

/// As [`run_coverage_experiment`] on a dedicated pool of `workers` threads.
pub fn run_coverage_experiment_with_workers(config: &TrialConfig, workers: Option<usize>) -> Result<TrialReport> {
    config.validate()?;
    let plan = build_plan(config)?;
    let per_trial = with_workers(workers, || {
        (0..config.trials)
            .into_par_iter()
            .map(|t| run_trial(config, &plan, t))
            .collect::<Result<Vec<_>>>()
    })??;
    let records: Vec<TrialRecord> = per_trial.into_iter().flatten().collect();

    let bounds = match &plan {
        Plan::Spi(c) | Plan::SpiAffine(c) | Plan::SpiSubset(c) => Some(c.bounds()),
        _ => None,
    };
    let per_label = match &plan {
        Plan::Labels(labels) => labels
            .iter()
            .map(|l| {
                let mine = records.iter().filter(|r| r.label.as_deref() == Some(l.label.as_str()));
                let source = if l.q.is_some() { SyntheticSource::SameLabel } else { SyntheticSource::WholeSet };
                let summary = LabelSummary {
                    bounds: l.calibrator.bounds(),
                    synthetic_source: source,
                    summary: CoverageSummary::from_records(mine, config.band_width),
                };
                (l.label.clone(), summary)
            })
            .collect(),
        _ => BTreeMap::new(),
    };
    Ok(TrialReport {
        config: config.clone(),
        bounds,
        aggregate: CoverageSummary::from_records(&records, config.band_width),
        per_label,
        records,
    })
}

/// One row of a bound sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Worst-case bounds over the grid, ordered by `m`, then `alpha`, then `beta`.
pub fn run_bound_sweep(m_values: &[usize], beta_values: &[f64], alpha_values: &[f64], n: usize) -> Result<Vec<BoundRow>> {
    if m_values.is_empty() || beta_values.is_empty() || alpha_values.is_empty() {
        return Err(SpiError::config("bound sweep grids must be nonempty"));
    }
    for &a in alpha_values {
        check_unit_open("alpha", a)?;
    }
    let blocks = m_values
        .par_iter()
        .map(|&m| {
            let family = OrderStatFamily::new(m, n)?;
            let tables = beta_values.iter().map(|&b| family.window_table(b)).collect::<Result<Vec<_>>>()?;
            let mut rows = Vec::with_capacity(alpha_values.len() * beta_values.len());
            for &alpha in alpha_values {
                for table in &tables {
                    let b = SpiCalibrator::from_table(table.clone(), alpha)?.bounds();
                    rows.push(BoundRow { m, n, alpha, beta: b.beta, lower: b.lower, upper: b.upper });
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(blocks.into_iter().flatten().collect())
}

pub fn write_bound_rows<W: Write>(rows: &[BoundRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Empirical window-hit frequency for one real rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankHit {
    pub rank: usize,
    pub lo_rank: usize,
    pub hi_rank: usize,
    pub hits: u64,
    pub frequency: f64,
    pub se: f64,
    /// Exact hit probability `F(R^+) - F(R^-)`.
    pub exact: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowHitReport {
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub beta: f64,
    pub trials: usize,
    pub master_seed: u64,
    pub ranks: Vec<RankHit>,
}

/// How often the `r`-th of `m + 1` real scores lands in its synthetic window
/// when real and synthetic scores share `dist`.
pub fn run_lemma1_check(
    m: usize,
    n: usize,
    beta: f64,
    dist: &ContinuousDist,
    trials: usize,
    master_seed: u64,
) -> Result<WindowHitReport> {
    run_lemma1_check_with_workers(m, n, beta, dist, trials, master_seed, None)
}

#[allow(clippy::too_many_arguments)]
pub fn run_lemma1_check_with_workers(
    m: usize,
    n: usize,
    beta: f64,
    dist: &ContinuousDist,
    trials: usize,
    master_seed: u64,
    workers: Option<usize>,
) -> Result<WindowHitReport> {
    if trials == 0 {
        return Err(SpiError::config("trials must be at least 1"));
    }
    dist.validate()?;
    let family = OrderStatFamily::new(m, n)?;
    let table = family.window_table(beta)?;
    let hits = with_workers(workers, || {
        (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = trial_rng(master_seed, t as u64);
                let real = sample_scores(dist, m + 1, &mut rng)?;
                let synth = sample_scores(dist, n, &mut rng)?;
                Ok::<_, SpiError>(table
                    .rows
                    .iter()
                    .enumerate()
                    .map(|(i, &(lo, hi))| {
                        let s = real.order_stat(i + 1);
                        u64::from(synth.order_stat(lo) <= s && s <= synth.order_stat(hi))
                    })
                    .collect::<Vec<u64>>())
            })
            .try_reduce(|| vec![0; m + 1], |a, b| Ok(a.iter().zip(&b).map(|(x, y)| x + y).collect()))
    })??;
    let tf = trials as f64;
    let ranks = table
        .rows
        .iter()
        .zip(hits)
        .enumerate()
        .map(|(i, (&(lo, hi), h))| {
            let f = h as f64 / tf;
            let cdf = family.pmf(i + 1).expect("rank in range").cdf_table();
            RankHit {
                rank: i + 1,
                lo_rank: lo,
                hi_rank: hi,
                hits: h,
                frequency: f,
                se: (f * (1.0 - f) / tf).sqrt(),
                exact: cdf[hi] - cdf[lo],
            }
        })
        .collect();
    Ok(WindowHitReport { m, n, beta, trials, master_seed, ranks })
}

/// A random calibration problem for comparing the two membership rules.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceInstance {
    pub real: ScoreVector,
    pub synth: ScoreVector,
    pub alpha: f64,
    pub beta: f64,
}

impl EquivalenceInstance {
    /// `m` in `[2, 30]`, `N` in `[10, 2000]`, Gaussian real scores, Gaussian
    /// synthetic scores with random location and scale.
    pub fn random<R: Rng>(rng: &mut R) -> Result<Self> {
        let m = rng.random_range(2..=30);
        let n = rng.random_range(10..=2000);
        let alpha = rng.random_range(0.01..0.5);
        let beta = rng.random_range(0.05..0.95);
        let mu = rng.random_range(-2.0..2.0);
        let sigma = rng.random_range(0.5..2.0);
        let real = sample_scores(&ContinuousDist::normal(0.0, 1.0), m, rng)?;
        let synth = sample_scores(&ContinuousDist::normal(mu, sigma), n, rng)?;
        Ok(Self { real, synth, alpha, beta })
    }

    /// Points on both sides of every score, plus the scores themselves when
    /// `include_scores` is set (membership exactly at a tie may legitimately differ).
    pub fn candidate_grid(&self, include_scores: bool) -> Vec<f64> {
        let mut pooled: Vec<f64> = self.real.values().iter().chain(self.synth.values()).copied().collect();
        pooled.sort_by(f64::total_cmp);
        pooled.dedup();
        let Some((&first, &last)) = pooled.first().zip(pooled.last()) else {
            return vec![0.0];
        };
        let mut grid = vec![first - 1.0, last + 1.0];
        for (i, &v) in pooled.iter().enumerate() {
            let below = if i == 0 { 1.0 } else { v - pooled[i - 1] };
            let above = if i + 1 == pooled.len() { 1.0 } else { pooled[i + 1] - v };
            grid.push(v - 0.25 * below);
            grid.push(v + 0.25 * above);
            if include_scores {
                grid.push(v);
            }
        }
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        grid
    }

    /// `(candidates checked, disagreements)` between the fast threshold and
    /// direct transport-based membership.
    pub fn disagreements(&self, include_scores: bool) -> Result<(u64, u64)> {
        let c = SpiCalibrator::new(self.real.len(), self.synth.len(), self.alpha, self.beta)?;
        let threshold = c.threshold(&self.real, &self.synth)?;
        let grid = self.candidate_grid(include_scores);
        let mut bad = 0;
        for &x in &grid {
            if c.member_direct(x, &self.real, &self.synth)? != threshold.contains(x) {
                bad += 1;
            }
        }
        Ok((grid.len() as u64, bad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub instances: usize,
    pub master_seed: u64,
    pub candidates: u64,
    pub disagreements: u64,
}

/// Random instances compared on their candidate grids; expected to report zero disagreements.
pub fn run_equivalence_check(instances: usize, master_seed: u64) -> Result<EquivalenceReport> {
    run_equivalence_check_with_workers(instances, master_seed, None)
}

pub fn run_equivalence_check_with_workers(
    instances: usize,
    master_seed: u64,
    workers: Option<usize>,
) -> Result<EquivalenceReport> {
    if instances == 0 {
        return Err(SpiError::config("instances must be at least 1"));
    }
    let (candidates, disagreements) = with_workers(workers, || {
        (0..instances)
            .into_par_iter()
            .map(|i| EquivalenceInstance::random(&mut trial_rng(master_seed, i as u64))?.disagreements(false))
            .try_reduce(|| (0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1)))
    })??;
    Ok(EquivalenceReport { instances, master_seed, candidates, disagreements })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n01() -> ContinuousDist {
        ContinuousDist::normal(0.0, 1.0)
    }

    fn config(method: Method, m: usize, n: usize, alpha: f64, q: ContinuousDist, trials: usize) -> TrialConfig {
        TrialConfig { trials, master_seed: 11, ..TrialConfig::new(method, m, n, alpha, n01(), q) }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(trial_seed(1, 2), trial_seed(1, 2));
        assert_ne!(trial_seed(1, 2), trial_seed(1, 3));
        assert_ne!(trial_seed(1, 2), trial_seed(2, 2));
    }

    #[test]
    fn only_real_small_m_is_trivial() {
        let r = run_coverage_experiment(&config(Method::OnlyReal, 18, 0, 0.05, n01(), 50)).unwrap();
        assert!(r.records.iter().all(|t| t.trivial && t.threshold == f64::INFINITY));
        assert_eq!(r.aggregate.mean_coverage, 1.0);
        assert_eq!(r.aggregate.fraction_trivial, 1.0);
        assert!(r.bounds.is_none());
    }

    #[test]
    fn only_synth_with_low_shift_undercovers() {
        let q = ContinuousDist::normal(-3.0, 1.0);
        let r = run_coverage_experiment(&config(Method::OnlySynth, 15, 1000, 0.1, q, 200)).unwrap();
        // cutoff near -3 + 1.28: coverage about Phi(-1.7)
        assert!(r.aggregate.mean_coverage < 0.1, "{}", r.aggregate.mean_coverage);
    }

    #[test]
    fn spi_within_bounds_when_shifted() {
        let q = ContinuousDist::normal(5.0, 1.0);
        let r = run_coverage_experiment(&config(Method::Spi, 15, 1000, 0.1, q, 400)).unwrap();
        let b = r.bounds.unwrap();
        assert_eq!((b.lower, b.upper), (0.8125, 0.9375));
        let a = &r.aggregate;
        assert!(a.mean_coverage >= b.lower - 3.0 * a.coverage_se && a.mean_coverage <= b.upper + 3.0 * a.coverage_se);
    }

    #[test]
    fn aggregates_recomputable_and_se_identity() {
        let r = run_coverage_experiment(&config(Method::Spi, 15, 200, 0.1, ContinuousDist::normal(0.5, 1.2), 300)).unwrap();
        let again = CoverageSummary::from_records(&r.records, None);
        assert_eq!(again, r.aggregate);
        let a = &r.aggregate;
        assert!(r.records.iter().all(|t| (0.0..=1.0).contains(&t.coverage)));
        // mean of per-trial Bernoulli variances plus spread of v equals v(1 - v)
        let t = a.count as f64;
        let within = r.records.iter().map(|x| x.coverage * (1.0 - x.coverage)).sum::<f64>() / t;
        let total = a.mean_coverage * (1.0 - a.mean_coverage);
        assert!((within + a.coverage_sd.powi(2) - total).abs() <= 0.1 * total);
        assert!((a.coverage_se - (total / t).sqrt()).abs() < 1e-15);
        assert!(a.empirical_se <= a.coverage_se);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let c = config(Method::SpiAffine, 15, 300, 0.1, ContinuousDist::normal(2.0, 2.0), 64);
        let one = run_coverage_experiment_with_workers(&c, Some(1)).unwrap();
        let many = run_coverage_experiment_with_workers(&c, Some(8)).unwrap();
        assert_eq!(one.csv_string().unwrap(), many.csv_string().unwrap());
        assert_eq!(one.json_string().unwrap(), many.json_string().unwrap());
    }

    #[test]
    fn subset_with_all_groups_equals_spi() {
        let mut sub = config(Method::SpiSubset, 10, 200, 0.1, ContinuousDist::normal(0.3, 1.0), 30);
        sub.subset = Some(SubsetConfig { groups: 10, group_size: 20, k: 10, group_dists: None });
        let spi = config(Method::Spi, 10, 200, 0.1, ContinuousDist::normal(0.3, 1.0), 30);
        let a = run_coverage_experiment(&sub).unwrap();
        let b = run_coverage_experiment(&spi).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn subset_prefers_matching_groups() {
        let mut c = config(Method::SpiSubset, 30, 600, 0.1, n01(), 40);
        let dists = (0..20).map(|l| if l % 2 == 0 { n01() } else { ContinuousDist::normal(4.0, 1.0) }).collect();
        c.subset = Some(SubsetConfig { groups: 20, group_size: 30, k: 5, group_dists: Some(dists) });
        let r = run_coverage_experiment(&c).unwrap();
        let a = &r.aggregate;
        // pooled set comes from the matching groups, so coverage sits near 1 - alpha
        assert!((a.mean_coverage - 0.9).abs() < 0.05, "{}", a.mean_coverage);
    }

    #[test]
    fn label_conditional_reports_fallback() {
        let json = r#"{
            "m": 20, "N": 200, "alpha": 0.1, "trials": 20, "master_seed": 3,
            "method": "label-conditional",
            "labels": [
                {"label": "a", "p_dist": {"family":"normal","mu":0,"sigma":1}, "q_dist": {"family":"normal","mu":0,"sigma":1}},
                {"label": "b", "p_dist": {"family":"uniform","a":0,"b":1}}
            ]
        }"#;
        let c = TrialConfig::from_json(json).unwrap();
        assert_eq!(c.beta, 0.4);
        let r = run_coverage_experiment(&c).unwrap();
        assert_eq!(r.records.len(), 40);
        assert_eq!(r.per_label["a"].synthetic_source, SyntheticSource::SameLabel);
        assert_eq!(r.per_label["b"].synthetic_source, SyntheticSource::WholeSet);
        assert!(r.csv_string().unwrap().starts_with("trial,label,threshold,coverage,trivial\n"));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = config(Method::Spi, 15, 100, 0.1, n01(), 0);
        assert!(matches!(run_coverage_experiment(&c), Err(SpiError::Config(_))));
        c.trials = 5;
        c.q_dist = None;
        assert!(run_coverage_experiment(&c).is_err());
        let mut c = config(Method::SpiSubset, 15, 100, 0.1, n01(), 5);
        assert!(run_coverage_experiment(&c).is_err());
        c.subset = Some(SubsetConfig { groups: 7, group_size: 15, k: 3, group_dists: None });
        assert!(run_coverage_experiment(&c).is_err());
        let mut c = config(Method::Spi, 15, 100, 0.1, n01(), 5);
        c.subset = Some(SubsetConfig { groups: 10, group_size: 10, k: 3, group_dists: None });
        assert!(run_coverage_experiment(&c).is_err());
        assert!(TrialConfig::from_json(r#"{"m":1,"N":1,"alpha":0.1,"trials":1,"master_seed":0,"method":"magic"}"#).is_err());
        let c = config(Method::SpiAffine, 1, 100, 0.1, n01(), 5);
        assert!(run_coverage_experiment(&c).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = config(Method::Spi, 15, 1000, 0.1, ContinuousDist::normal(5.0, 1.0), 10);
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"N\":1000") && text.contains("\"method\":\"spi\""));
        assert_eq!(TrialConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn band_width_reported() {
        let mut c = config(Method::Spi, 15, 200, 0.1, n01(), 20);
        c.band_width = Some(1.5);
        let r = run_coverage_experiment(&c).unwrap();
        let expect = r.records.iter().map(|t| (2.0 * t.threshold + 1.5).max(0.0)).sum::<f64>() / 20.0;
        assert!((r.aggregate.mean_interval_width.unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn bound_sweep_structure() {
        let rows = run_bound_sweep(&[15], &[0.1, 0.2, 0.4, 0.6, 0.8], &[0.05], 1000).unwrap();
        assert!(rows.windows(2).all(|w| w[1].lower >= w[0].lower));
        assert!(rows.iter().all(|r| (r.lower * 16.0).fract() == 0.0 && (r.upper * 16.0).fract() == 0.0));
        let single = run_bound_sweep(&[15], &[0.4], &[0.05], 1000).unwrap();
        assert_eq!((single[0].lower, single[0].upper), (0.9375, 1.0));
        let ms = run_bound_sweep(&[5, 15, 50, 200], &[0.4], &[0.1], 1000).unwrap();
        let widths: Vec<f64> = ms.iter().map(|r| r.upper - r.lower).collect();
        assert!(widths.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{widths:?}");
        let mut buf = Vec::new();
        write_bound_rows(&single, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "m,N,alpha,beta,lower,upper\n15,1000,0.05,0.4,0.9375,1.0\n");
        assert!(run_bound_sweep(&[], &[0.4], &[0.1], 10).is_err());
    }

    #[test]
    fn window_hits_match_exact_probability() {
        for dist in [n01(), ContinuousDist::uniform(0.0, 1.0)] {
            let r = run_lemma1_check(5, 50, 0.4, &dist, 4000, 9).unwrap();
            assert_eq!(r.ranks.len(), 6);
            for h in &r.ranks {
                let se = (h.exact * (1.0 - h.exact) / 4000.0).sqrt();
                assert!((h.frequency - h.exact).abs() <= 4.0 * se, "{h:?}");
                assert!(h.exact > 0.5 && h.exact < 0.7, "{h:?}");
            }
        }
    }

    #[test]
    fn narrow_windows_can_collapse_to_a_point() {
        // With beta close to 1 the lower and upper window ranks coincide, and a
        // continuous score never equals the single synthetic value.
        let r = run_lemma1_check(5, 50, 0.99, &n01(), 2000, 9).unwrap();
        for h in &r.ranks {
            assert_eq!(h.lo_rank, h.hi_rank);
            assert_eq!((h.hits, h.exact), (0, 0.0));
        }
    }

    #[test]
    fn window_hit_counts_independent_of_workers() {
        let d = ContinuousDist::uniform(0.0, 1.0);
        let a = run_lemma1_check_with_workers(4, 30, 0.3, &d, 500, 2, Some(1)).unwrap();
        let b = run_lemma1_check_with_workers(4, 30, 0.3, &d, 500, 2, Some(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equivalence_small_exhaustive() {
        let inst = EquivalenceInstance {
            real: ScoreVector::new(vec![0.3]).unwrap(),
            synth: ScoreVector::new(vec![0.1, 0.7]).unwrap(),
            alpha: 0.3,
            beta: 0.5,
        };
        assert_eq!(inst.disagreements(false).unwrap().1, 0);
        for alpha in [0.05, 0.2, 0.4, 0.6] {
            for beta in [0.1, 0.5, 0.9] {
                let inst = EquivalenceInstance { alpha, beta, ..inst.clone() };
                assert_eq!(inst.disagreements(false).unwrap().1, 0, "alpha {alpha} beta {beta}");
            }
        }
    }

    #[test]
    fn equivalence_random_instances() {
        let r = run_equivalence_check(50, 1).unwrap();
        assert_eq!(r.disagreements, 0);
        assert!(r.candidates > 0);
    }

    #[test]
    fn tied_instance_disagreement_is_reported() {
        // every score equal: the continuity hypothesis fails
        let inst = EquivalenceInstance {
            real: ScoreVector::new(vec![1.0; 4]).unwrap(),
            synth: ScoreVector::new(vec![1.0; 40]).unwrap(),
            alpha: 0.1,
            beta: 0.4,
        };
        let (checked, bad) = inst.disagreements(true).unwrap();
        assert_eq!(checked, 5);
        assert!(bad > 0);
    }
}
