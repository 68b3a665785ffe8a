//! Prediction-set thresholds and worst-case coverage bounds.
//!
//! Every method here produces a single cutoff `Q`; a label `y` belongs to the
//! prediction set iff `score(x, y) <= Q`. The synthetic-powered threshold is
//!
//! ```text
//! Q = max{ min{Q~', S_(R~^-)}, S_(R~^+) },   R~^± = max{r : R_r^± <= ceil((1 - alpha)(N + 1))}
//! ```
//!
//! with `S_(0) = -inf` and `S_(m+1) = +inf`, and it agrees almost surely with
//! transporting the candidate score and comparing against the synthetic
//! conformal quantile (see [`SpiCalibrator::member_direct`]).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::combinatorics::{OrderStatFamily, WindowTable};
use crate::error::{Result, SpiError};
use crate::transporter::{ScoreVector, Transporter};

/// Relative slack subtracted before taking the ceiling in conformal indices,
/// so `(1 - 0.05) * 20 = 19.000000000000004` maps to 19, not 20.
const CEIL_SLACK: f64 = 1e-9;

/// `ceil(level * count)` with a tolerance for representation error in `level * count`.
pub(crate) fn ceil_with_slack(x: f64) -> usize {
    (x - CEIL_SLACK * x.abs().max(1.0)).ceil().max(0.0) as usize
}

/// `ceil((1 - alpha)(n + 1))`.
pub fn conformal_index(alpha: f64, n: usize) -> usize {
    ceil_with_slack((1.0 - alpha) * (n as f64 + 1.0))
}

pub(crate) fn check_unit_open(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(SpiError::domain(format!("{name} = {v} must lie in (0, 1)")))
    }
}

/// Serde helpers for extended reals encoded as a number, `"+inf"`, or `"-inf"`.
pub mod extended_real {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;
    use std::fmt;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("+inf")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = f64;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number, \"+inf\" or \"-inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                match v {
                    "+inf" | "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    other => Err(E::custom(format!("unexpected string {other:?}"))),
                }
            }
        }
        d.deserialize_any(V)
    }

    /// Text form used in CSV and human output.
    pub fn format(v: f64, decimals: Option<usize>) -> String {
        if v == f64::INFINITY {
            "+inf".to_string()
        } else if v == f64::NEG_INFINITY {
            "-inf".to_string()
        } else if let Some(d) = decimals {
            format!("{v:.d$}")
        } else {
            format!("{v}")
        }
    }
}

/// A score cutoff; `+inf` is the trivial (full) set and `-inf` the empty set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionThreshold {
    #[serde(with = "extended_real")]
    pub cutoff: f64,
}

impl PredictionThreshold {
    pub fn new(cutoff: f64) -> Self {
        Self { cutoff }
    }

    pub fn contains(&self, score: f64) -> bool {
        score <= self.cutoff
    }

    pub fn is_trivial(&self) -> bool {
        self.cutoff == f64::INFINITY
    }

    pub fn is_empty_set(&self) -> bool {
        self.cutoff == f64::NEG_INFINITY
    }
}

/// Distribution-free coverage interval for the synthetic-powered set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageBounds {
    pub lower: f64,
    pub upper: f64,
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
}

/// Split conformal cutoff: the `ceil((1 - alpha)(m + 1))`-th smallest score, or `+inf`.
pub fn split_conformal_threshold(scores: &ScoreVector, alpha: f64) -> Result<PredictionThreshold> {
    check_unit_open("alpha", alpha)?;
    let k = conformal_index(alpha, scores.len());
    Ok(PredictionThreshold::new(scores.order_stat(k)))
}

/// The `(ceil((1 - alpha)(N + 1)) + offset)`-th smallest synthetic score, `+inf` past the end.
pub fn synth_quantile(synth: &ScoreVector, alpha: f64, offset: usize) -> Result<f64> {
    check_unit_open("alpha", alpha)?;
    if offset > 1 {
        return Err(SpiError::domain(format!("quantile offset must be 0 or 1, got {offset}")));
    }
    Ok(synth.order_stat(conformal_index(alpha, synth.len()) + offset))
}

/// Precomputed calibration state for fixed `(m, N, alpha, beta)`.
///
/// Construction costs one window table; each [`threshold`](Self::threshold)
/// call is then O(1) beyond the sorting done by [`ScoreVector`].
#[derive(Debug, Clone)]
pub struct SpiCalibrator {
    table: WindowTable,
    alpha: f64,
    quantile_index: usize,
    /// `R~^-`: largest rank whose lower window rank is within the quantile index.
    lower_rank_cut: usize,
    /// `R~^+`: largest rank whose upper window rank is within the quantile index.
    upper_rank_cut: usize,
}

impl SpiCalibrator {
    pub fn new(m: usize, n: usize, alpha: f64, beta: f64) -> Result<Self> {
        check_unit_open("alpha", alpha)?;
        check_unit_open("beta", beta)?;
        Self::from_table(WindowTable::new(m, n, beta)?, alpha)
    }

    pub fn from_table(table: WindowTable, alpha: f64) -> Result<Self> {
        check_unit_open("alpha", alpha)?;
        let quantile_index = conformal_index(alpha, table.n);
        // Rows are nondecreasing in r, so the qualifying ranks form a prefix
        // and the count is the maximum (0 when empty, i.e. S_(0) = -inf).
        let lower_rank_cut = table.count_lower_at_most(quantile_index);
        let upper_rank_cut = table.count_upper_at_most(quantile_index);
        Ok(Self { table, alpha, quantile_index, lower_rank_cut, upper_rank_cut })
    }

    pub fn table(&self) -> &WindowTable {
        &self.table
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `ceil((1 - alpha)(N + 1))`.
    pub fn quantile_index(&self) -> usize {
        self.quantile_index
    }

    /// `(R~^-, R~^+)`.
    pub fn rank_cuts(&self) -> (usize, usize) {
        (self.lower_rank_cut, self.upper_rank_cut)
    }

    pub fn bounds(&self) -> CoverageBounds {
        let denom = (self.table.m + 1) as f64;
        CoverageBounds {
            lower: self.upper_rank_cut as f64 / denom,
            upper: self.lower_rank_cut as f64 / denom,
            m: self.table.m,
            n: self.table.n,
            alpha: self.alpha,
            beta: self.table.beta,
        }
    }

    fn check(&self, real: &ScoreVector, synth: &ScoreVector) -> Result<()> {
        if real.len() != self.table.m || synth.len() != self.table.n {
            return Err(SpiError::config(format!(
                "calibrator built for (m, N) = ({}, {}) but got ({}, {})",
                self.table.m,
                self.table.n,
                real.len(),
                synth.len()
            )));
        }
        Ok(())
    }

    /// Fast closed-form threshold.
    pub fn threshold(&self, real: &ScoreVector, synth: &ScoreVector) -> Result<PredictionThreshold> {
        self.check(real, synth)?;
        let q_prime = synth.order_stat(self.quantile_index + 1);
        let cutoff = q_prime
            .min(real.order_stat(self.lower_rank_cut))
            .max(real.order_stat(self.upper_rank_cut));
        Ok(PredictionThreshold::new(cutoff))
    }

    /// Direct membership: `T(candidate) <= Q~`.
    pub fn member_direct(&self, candidate: f64, real: &ScoreVector, synth: &ScoreVector) -> Result<bool> {
        self.check(real, synth)?;
        let transporter = Transporter::new(real, synth, &self.table)?;
        Ok(transporter.apply(candidate) <= synth.order_stat(self.quantile_index))
    }
}

/// Synthetic-powered threshold (fast form).
pub fn spi_threshold(
    real: &ScoreVector,
    synth: &ScoreVector,
    alpha: f64,
    beta: f64,
) -> Result<PredictionThreshold> {
    SpiCalibrator::new(real.len(), synth.len(), alpha, beta)?.threshold(real, synth)
}

/// Synthetic-powered membership evaluated through the transporter.
pub fn spi_member_direct(
    candidate: f64,
    real: &ScoreVector,
    synth: &ScoreVector,
    alpha: f64,
    beta: f64,
) -> Result<bool> {
    if !candidate.is_finite() {
        return Err(SpiError::domain("candidate score must be finite"));
    }
    SpiCalibrator::new(real.len(), synth.len(), alpha, beta)?.member_direct(candidate, real, synth)
}

/// Worst-case coverage interval; depends only on `(m, N, alpha, beta)`.
pub fn worst_case_bounds(m: usize, n: usize, alpha: f64, beta: f64) -> Result<CoverageBounds> {
    Ok(SpiCalibrator::new(m, n, alpha, beta)?.bounds())
}

/// Result of a successful beta search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSelection {
    pub beta: f64,
    pub bounds: CoverageBounds,
}

/// Smallest `beta` on the grid `step, 2 step, ...` (below 1) whose worst-case
/// lower bound reaches `target_lower`.
pub fn select_beta(
    m: usize,
    n: usize,
    alpha: f64,
    target_lower: f64,
    step: f64,
) -> Result<BetaSelection> {
    check_unit_open("alpha", alpha)?;
    if !(step > 0.0 && step < 1.0) {
        return Err(SpiError::domain(format!("step = {step} must lie in (0, 1)")));
    }
    if !(0.0..=1.0).contains(&target_lower) {
        return Err(SpiError::domain(format!("target lower bound {target_lower} outside [0, 1]")));
    }
    let family = OrderStatFamily::new(m, n)?;
    let mut i = 1u64;
    loop {
        let beta = i as f64 * step;
        if beta >= 1.0 - 1e-12 {
            break;
        }
        let bounds = SpiCalibrator::from_table(family.window_table(beta)?, alpha)?.bounds();
        if bounds.lower >= target_lower - 1e-12 {
            return Ok(BetaSelection { beta, bounds });
        }
        i += 1;
    }
    Err(SpiError::NoSolution(format!(
        "no β on grid achieves target lower bound {target_lower} (m = {m}, N = {n}, alpha = {alpha}, step = {step})"
    )))
}

/// Scores tagged with a discrete label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledScoreSet {
    pub entries: Vec<(String, f64)>,
}

impl LabeledScoreSet {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        if let Some((label, v)) = entries.iter().find(|(_, v)| !v.is_finite()) {
            return Err(SpiError::domain(format!("score {v} for label {label:?} is not finite")));
        }
        Ok(Self { entries })
    }

    pub fn labels(&self) -> BTreeSet<String> {
        self.entries.iter().map(|(l, _)| l.clone()).collect()
    }

    /// Scores carrying `label`, in input order.
    pub fn scores_for(&self, label: &str) -> Result<ScoreVector> {
        ScoreVector::new(self.entries.iter().filter(|(l, _)| l == label).map(|&(_, s)| s).collect())
    }

    pub fn all_scores(&self) -> Result<ScoreVector> {
        ScoreVector::new(self.entries.iter().map(|&(_, s)| s).collect())
    }
}

/// Which synthetic scores a label was calibrated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticSource {
    /// Synthetic scores carrying the same label.
    SameLabel,
    /// The label never appears in the synthetic set; all synthetic scores are used.
    WholeSet,
}

/// Per-label output of label-conditional calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelThreshold {
    pub threshold: PredictionThreshold,
    pub bounds: CoverageBounds,
    pub synthetic_source: SyntheticSource,
    pub real_count: usize,
    pub synthetic_count: usize,
    /// The label had no real calibration scores (`m_y = 0`).
    pub no_real_scores: bool,
    /// The threshold is `+inf`.
    pub trivial: bool,
}

/// Run the synthetic-powered procedure separately within each label.
///
/// Labels present in the synthetic set use only their own synthetic scores;
/// absent labels fall back to the whole synthetic set.
pub fn label_conditional_thresholds(
    real: &LabeledScoreSet,
    synth: &LabeledScoreSet,
    universe: &BTreeSet<String>,
    alpha: f64,
    beta: f64,
) -> Result<BTreeMap<String, LabelThreshold>> {
    check_unit_open("alpha", alpha)?;
    check_unit_open("beta", beta)?;
    for (name, set) in [("real", real), ("synthetic", synth)] {
        if let Some(label) = set.labels().into_iter().find(|l| !universe.contains(l)) {
            return Err(SpiError::config(format!(
                "{name} label {label:?} is not in the declared label universe"
            )));
        }
    }
    let synthetic_labels = synth.labels();
    let whole = synth.all_scores()?;
    if whole.is_empty() {
        return Err(SpiError::config("synthetic set is empty"));
    }

    let mut out = BTreeMap::new();
    for label in universe {
        let real_y = real.scores_for(label)?;
        let (synth_y, source) = if synthetic_labels.contains(label) {
            (synth.scores_for(label)?, SyntheticSource::SameLabel)
        } else {
            (whole.clone(), SyntheticSource::WholeSet)
        };
        let calibrator = SpiCalibrator::new(real_y.len(), synth_y.len(), alpha, beta)?;
        let threshold = calibrator.threshold(&real_y, &synth_y)?;
        out.insert(
            label.clone(),
            LabelThreshold {
                threshold,
                bounds: calibrator.bounds(),
                synthetic_source: source,
                real_count: real_y.len(),
                synthetic_count: synth_y.len(),
                no_real_scores: real_y.is_empty(),
                trivial: threshold.is_trivial(),
            },
        );
    }
    Ok(out)
}
