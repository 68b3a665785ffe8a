//! Synthetic-powered conformal calibration.
//!
//! A small set of real calibration scores is combined with a large set of
//! synthetic scores through rank windows on the synthetic order statistics.
//! The resulting prediction threshold keeps a distribution-free coverage
//! guarantee that depends only on `(m, N, alpha, beta)`.

pub mod analysis;
pub mod calibration;
pub mod combinatorics;
pub mod error;
pub mod io;
pub mod scores;
pub mod simulation;
pub mod subset_selection;
pub mod transporter;

pub use analysis::{order_stat_density, tv_order_stat, ContinuousDist};
pub use calibration::{
    conformal_index, label_conditional_thresholds, select_beta, spi_member_direct, spi_threshold,
    split_conformal_threshold, worst_case_bounds, BetaSelection, CoverageBounds, LabelThreshold,
    LabeledScoreSet, PredictionThreshold, SpiCalibrator, SyntheticSource,
};
pub use combinatorics::{log_binomial, order_stat_pmf, window_rank_bounds, window_table, OrderStatPmf, WindowTable};
pub use error::{Result, SpiError};
pub use scores::{affine_adjust_fit, aps_score, cqr_interval, cqr_score, jitter, AffineAdjustment, Interval, QuantilePair};
pub use subset_selection::{cvm_statistic, select_subsets, GroupDistance, GroupedScores};
pub use transporter::{rank_among, score_window, transport, ScoreVector, ScoreWindow, Transporter};
