//! Engagement metrics and rank-based hypothesis tests.
//!
//! Exact p-values come from integer dynamic programming over doubled ranks
//! (so tied half-ranks stay integral); above the exact bounds the tests use
//! tie-corrected normal or chi-squared approximations.

mod engagement;
mod nonparametric;
mod survey;

use serde::Serialize;
use thiserror::Error;

use crate::scalar::Scalar;

pub use engagement::{
    condition_engagement, daily_series, engagement, Completion, DailyPoint, DateWindow, EngagementSummary,
};
pub use nonparametric::{
    friedman, holm_bonferroni, mann_whitney_u, wilcoxon_paired, wilcoxon_signed_rank, wilcoxon_with,
    ZeroPolicy, MWU_EXACT_MAX, WILCOXON_EXACT_MAX,
};
pub use survey::{survey_deltas, Instrument, SurveyDelta, SurveyReport, SurveyScore, WithinOutcome};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("window end must be after its start")]
    EmptyWindow,
    #[error("every difference is zero")]
    AllZero,
    #[error("group `{0}` is empty")]
    EmptyGroup(&'static str),
    #[error("ratings matrix is incomplete: {0}")]
    Incomplete(String),
    #[error("p-value {0} is outside [0, 1]")]
    PValueRange(f64),
    #[error("non-finite observation")]
    NonFinite,
    #[error("user `{0}` has no matching pre/post score")]
    Unmatched(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    WilcoxonSignedRank,
    MannWhitneyU,
    Friedman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleInfo {
    N(usize),
    Groups { n1: usize, n2: usize },
    Grid { n: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct TestResult<S: Scalar> {
    pub method: Method,
    /// W = min(W+, W-), U for the first group, or chi-squared.
    pub statistic: S,
    pub p_value: S,
    pub effect_size: Option<S>,
    pub n_info: SampleInfo,
    pub exact: bool,
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn mean_sd<S: Scalar>(values: &[S]) -> (S, S) {
    if values.is_empty() {
        return (S::zero(), S::zero());
    }
    let n = S::from_usize_lossy(values.len());
    let mean = values.iter().copied().sum::<S>() / n;
    if values.len() < 2 {
        return (mean, S::zero());
    }
    let ss = values.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>();
    (mean, (ss / (n - S::one())).sqrt())
}

/// "Mean=0.94, SD=0.07"
pub fn format_mean_sd<S: Scalar>(values: &[S]) -> String {
    let (m, sd) = mean_sd(values);
    format!("Mean={:.2}, SD={:.2}", m.to_f64_lossy(), sd.to_f64_lossy())
}

/// "Mean=4.09, SD=6.78, W=187.5, p=0.006"
pub fn format_wilcoxon<S: Scalar>(values: &[S], result: &TestResult<S>) -> String {
    format!(
        "{}, W={}, p={:.3}",
        format_mean_sd(values),
        trim_float(result.statistic.to_f64_lossy()),
        result.p_value.to_f64_lossy()
    )
}

fn trim_float(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').to_string()
    }
}
