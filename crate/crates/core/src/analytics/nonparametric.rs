//! Wilcoxon signed-rank, Mann-Whitney U, Friedman and Holm-Bonferroni.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use super::{Method, SampleInfo, StatsError, TestResult};
use crate::scalar::{total_cmp, Scalar};

/// Largest number of non-zero differences given an exact signed-rank p-value.
pub const WILCOXON_EXACT_MAX: usize = 20;
/// Largest combined sample size given an exact rank-sum p-value.
pub const MWU_EXACT_MAX: usize = 12;

/// Treatment of zero differences in the signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroPolicy {
    /// Drop zeros before ranking.
    #[default]
    Wilcox,
    /// Rank zeros with the rest, then discard their ranks.
    Pratt,
}

fn check_finite<S: Scalar>(xs: &[S]) -> Result<(), StatsError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

/// Average ranks (1-based) doubled so that half ranks stay integral, plus
/// the size of every tie group.
fn doubled_ranks<S: Scalar>(values: &[S]) -> (Vec<u64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| total_cmp(&values[a], &values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        // positions i+1 ..= j share rank (i+1+j)/2
        let doubled = (i + 1 + j) as u64;
        for &k in &idx[i..j] {
            ranks[k] = doubled;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

fn std_normal_sf(z: f64) -> f64 {
    Normal::standard().sf(z)
}

/// Signed-rank test on paired differences, zeros dropped.
pub fn wilcoxon_signed_rank<S: Scalar>(diffs: &[S]) -> Result<TestResult<S>, StatsError> {
    wilcoxon_with(diffs, ZeroPolicy::Wilcox)
}

/// Signed-rank test on post − pre.
pub fn wilcoxon_paired<S: Scalar>(pre: &[S], post: &[S]) -> Result<TestResult<S>, StatsError> {
    if pre.len() != post.len() {
        return Err(StatsError::Incomplete(format!("{} pre vs {} post values", pre.len(), post.len())));
    }
    let diffs: Vec<S> = pre.iter().zip(post).map(|(a, b)| *b - *a).collect();
    wilcoxon_signed_rank(&diffs)
}

pub fn wilcoxon_with<S: Scalar>(diffs: &[S], policy: ZeroPolicy) -> Result<TestResult<S>, StatsError> {
    check_finite(diffs)?;
    let ranked: Vec<S> = match policy {
        ZeroPolicy::Wilcox => diffs.iter().copied().filter(|d| *d != S::zero()).collect(),
        ZeroPolicy::Pratt => diffs.to_vec(),
    };
    let abs: Vec<S> = ranked.iter().map(|d| d.abs()).collect();
    let (all_ranks, _) = doubled_ranks(&abs);
    let mut ranks = Vec::new();
    let mut plus = 0u64;
    for (d, r) in ranked.iter().zip(&all_ranks) {
        if *d == S::zero() {
            continue;
        }
        ranks.push(*r);
        if *d > S::zero() {
            plus += r;
        }
    }
    let n = ranks.len();
    if n == 0 {
        return Err(StatsError::AllZero);
    }
    let total: u64 = ranks.iter().sum();
    let minus = total - plus;
    let w_plus = plus as f64 / 2.0;
    let w_minus = minus as f64 / 2.0;
    let exact = n <= WILCOXON_EXACT_MAX;
    let p = if exact {
        signed_rank_exact_p(&ranks, plus)
    } else {
        let mean = total as f64 / 4.0;
        let var: f64 = ranks.iter().map(|r| (*r as f64 / 2.0).powi(2)).sum::<f64>() / 4.0;
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * std_normal_sf(z)).min(1.0)
    };
    Ok(TestResult {
        method: Method::WilcoxonSignedRank,
        statistic: S::from_f64_lossy(w_plus.min(w_minus)),
        p_value: S::from_f64_lossy(p),
        effect_size: Some(S::from_f64_lossy((w_plus - w_minus) / (w_plus + w_minus))),
        n_info: SampleInfo::N(n),
        exact,
    })
}

/// Two-sided exact p: share of the 2^n sign assignments whose doubled
/// positive rank sum lies at least as far from its mean as the observed one.
fn signed_rank_exact_p(ranks: &[u64], observed_plus: u64) -> f64 {
    let total: u64 = ranks.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let obs = (2 * observed_plus as i128 - total as i128).abs();
    let extreme: u64 = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| (2 * *s as i128 - total as i128).abs() >= obs)
        .map(|(_, c)| *c)
        .sum();
    let all = 2f64.powi(ranks.len() as i32);
    (extreme as f64 / all).min(1.0)
}

/// Two-sided rank-sum test. U is reported for group `a`; the effect size is
/// |1 − 2U/(n1·n2)|.
pub fn mann_whitney_u<S: Scalar>(a: &[S], b: &[S]) -> Result<TestResult<S>, StatsError> {
    if a.is_empty() {
        return Err(StatsError::EmptyGroup("a"));
    }
    if b.is_empty() {
        return Err(StatsError::EmptyGroup("b"));
    }
    check_finite(a)?;
    check_finite(b)?;
    let (n1, n2) = (a.len(), b.len());
    let n = n1 + n2;
    let pooled: Vec<S> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = doubled_ranks(&pooled);
    let r1: u64 = ranks[..n1].iter().sum();
    // doubled U for group a
    let u_d = r1 as i128 - (n1 * (n1 + 1)) as i128;
    let mid_d = (n1 * n2) as i128;
    let u = u_d as f64 / 2.0;
    let exact = n <= MWU_EXACT_MAX;
    let p = if exact {
        rank_sum_exact_p(&ranks, n1, u_d, mid_d)
    } else {
        let nf = n as f64;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (nf * (nf - 1.0));
        let var = (n1 * n2) as f64 / 12.0 * ((nf + 1.0) - tie_term);
        if var <= 0.0 {
            1.0
        } else {
            let z = ((u - (n1 * n2) as f64 / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
            (2.0 * std_normal_sf(z)).min(1.0)
        }
    };
    let r = (1.0 - 2.0 * u / (n1 * n2) as f64).abs();
    Ok(TestResult {
        method: Method::MannWhitneyU,
        statistic: S::from_f64_lossy(u),
        p_value: S::from_f64_lossy(p),
        effect_size: Some(S::from_f64_lossy(r)),
        n_info: SampleInfo::Groups { n1, n2 },
        exact,
    })
}

/// Share of the C(n, n1) label assignments whose doubled U lies at least as
/// far from n1·n2/2 as the observed one.
fn rank_sum_exact_p(ranks: &[u64], n1: usize, observed_u_d: i128, mid_d: i128) -> f64 {
    let total: usize = ranks.iter().sum::<u64>() as usize;
    // counts[j][s]: subsets of size j with doubled rank sum s
    let mut counts = vec![vec![0u64; total + 1]; n1 + 1];
    counts[0][0] = 1;
    for &r in ranks {
        let r = r as usize;
        for j in (0..n1).rev() {
            for s in (0..=total - r).rev() {
                let c = counts[j][s];
                if c != 0 {
                    counts[j + 1][s + r] += c;
                }
            }
        }
    }
    let obs = (observed_u_d - mid_d).abs();
    let offset = (n1 * (n1 + 1)) as i128;
    let mut extreme = 0u64;
    let mut all = 0u64;
    for (s, &c) in counts[n1].iter().enumerate() {
        if c == 0 {
            continue;
        }
        all += c;
        if (s as i128 - offset - mid_d).abs() >= obs {
            extreme += c;
        }
    }
    (extreme as f64 / all as f64).min(1.0)
}

/// Friedman test on an N × k matrix (rows are subjects).
pub fn friedman<S: Scalar>(ratings: &[Vec<S>]) -> Result<TestResult<S>, StatsError> {
    let n = ratings.len();
    if n < 2 {
        return Err(StatsError::Incomplete(format!("{n} subjects, need at least 2")));
    }
    let k = ratings[0].len();
    if k < 2 {
        return Err(StatsError::Incomplete(format!("{k} conditions, need at least 2")));
    }
    for (i, row) in ratings.iter().enumerate() {
        if row.len() != k {
            return Err(StatsError::Incomplete(format!("row {} has {} values, expected {k}", i + 1, row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::Incomplete(format!("row {} has a missing value", i + 1)));
        }
    }
    let mut rank_sums = vec![0.0f64; k];
    let mut tie_sum = 0.0f64;
    for row in ratings {
        let (ranks, ties) = doubled_ranks(row);
        for (j, r) in ranks.iter().enumerate() {
            rank_sums[j] += *r as f64 / 2.0;
        }
        tie_sum += ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>();
    }
    let (nf, kf) = (n as f64, k as f64);
    let numer = 12.0 * rank_sums.iter().map(|r| r * r).sum::<f64>() - 3.0 * nf * nf * kf * (kf + 1.0).powi(2);
    let denom = nf * kf * (kf + 1.0) - tie_sum / (kf - 1.0);
    let (chi2, p) = if denom <= 0.0 {
        (0.0, 1.0)
    } else {
        let chi2 = (numer / denom).max(0.0);
        let dist = ChiSquared::new(kf - 1.0).expect("k >= 2");
        (chi2, dist.sf(chi2).clamp(0.0, 1.0))
    };
    Ok(TestResult {
        method: Method::Friedman,
        statistic: S::from_f64_lossy(chi2),
        p_value: S::from_f64_lossy(p),
        effect_size: None,
        n_info: SampleInfo::Grid { n, k },
        exact: false,
    })
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_bonferroni<S: Scalar>(p_values: &[S]) -> Result<Vec<S>, StatsError> {
    for p in p_values {
        if !(p.is_finite() && *p >= S::zero() && *p <= S::one()) {
            return Err(StatsError::PValueRange(p.to_f64_lossy()));
        }
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| total_cmp(&p_values[a], &p_values[b]));
    let mut out = vec![S::zero(); m];
    let mut running = S::zero();
    for (j, &i) in order.iter().enumerate() {
        let scaled = (S::from_usize_lossy(m - j) * p_values[i]).min(S::one());
        running = running.max(scaled);
        out[i] = running;
    }
    Ok(out)
}
