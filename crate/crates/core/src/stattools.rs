//! Mann–Whitney U tests for base vs REFER comparisons, plus summary length statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::fairmetrics::Metric;
use crate::pipeline::TrialRecord;
use crate::promptkit::PromptFrame;

pub const DEFAULT_ALPHA: f64 = 0.05;
/// Largest combined sample size that gets an exact p-value.
pub const EXACT_MAX_N: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum StatError {
    #[error("sample is empty")]
    EmptySample,
    #[error("need at least {needed} trials per side, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("sample contains a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// `a` tends to be smaller than `b`.
    Less,
    /// `a` tends to be larger than `b`.
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U for the first sample.
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_sizes = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        if end - start > 1 {
            tie_sizes.push(end - start);
        }
        start = end;
    }
    (ranks, tie_sizes)
}

/// Number of arrangements giving each value of U, for samples of size `na`, `nb`.
fn u_frequencies(na: usize, nb: usize) -> Vec<u128> {
    // f[i][j][u]: arrangements of i and j items with statistic u.
    let max_u = na * nb;
    let mut f = vec![vec![vec![0u128; max_u + 1]; nb + 1]; na + 1];
    for row in f.iter_mut() {
        row[0][0] = 1;
    }
    for cell in f[0].iter_mut() {
        cell[0] = 1;
    }
    for i in 1..=na {
        for j in 1..=nb {
            for u in 0..=i * j {
                // The largest element belongs to a (adds j to U) or to b.
                let from_a = if u >= j { f[i - 1][j][u - j] } else { 0 };
                f[i][j][u] = from_a + f[i][j - 1][u];
            }
        }
    }
    f.swap_remove(na).swap_remove(nb)
}

fn exact_p(u: f64, na: usize, nb: usize, alternative: Alternative) -> f64 {
    let freq = u_frequencies(na, nb);
    let total: u128 = freq.iter().sum();
    let u = u.round() as usize;
    let le: u128 = freq[..=u].iter().sum();
    let ge: u128 = freq[u..].iter().sum();
    let (le, ge) = (le as f64 / total as f64, ge as f64 / total as f64);
    match alternative {
        Alternative::Less => le,
        Alternative::Greater => ge,
        Alternative::TwoSided => (2.0 * le.min(ge)).min(1.0),
    }
}

fn normal_p(u: f64, na: usize, nb: usize, tie_sizes: &[usize], alternative: Alternative) -> f64 {
    let (na_f, nb_f) = (na as f64, nb as f64);
    let n = na_f + nb_f;
    let mu = na_f * nb_f / 2.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = na_f * nb_f / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let sigma = var.sqrt();
    let phi = Normal::standard();
    let p = match alternative {
        Alternative::Less => phi.cdf((u - mu + 0.5) / sigma),
        Alternative::Greater => phi.sf((u - mu - 0.5) / sigma),
        Alternative::TwoSided => 2.0 * phi.sf(((u - mu).abs() - 0.5) / sigma),
    };
    p.clamp(0.0, 1.0)
}

/// Rank-sum test. Exact when the combined size is at most twelve and there are
/// no ties; otherwise the normal approximation with tie and continuity corrections.
pub fn mann_whitney_u(
    a: &[f64],
    b: &[f64],
    alternative: Alternative,
) -> Result<MannWhitney, StatError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatError::EmptySample);
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(StatError::NonFinite);
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, tie_sizes) = average_ranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    let exact = na + nb <= EXACT_MAX_N && tie_sizes.is_empty();
    let p = if exact {
        exact_p(u, na, nb, alternative)
    } else {
        normal_p(u, na, nb, &tie_sizes, alternative)
    };
    Ok(MannWhitney { u, p, exact })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ReferBetter,
    BaseBetter,
    None,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::ReferBetter => "refer_better",
            Direction::BaseBetter => "base_better",
            Direction::None => "none",
        }
    }

    /// Bar-chart marker: green for a REFER win, red for a base win.
    pub fn marker(&self) -> &'static str {
        match self {
            Direction::ReferBetter => "star_green",
            Direction::BaseBetter => "star_red",
            Direction::None => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub base_frame: PromptFrame,
    pub refer_frame: PromptFrame,
    pub metric: Metric,
    pub u_statistic: f64,
    pub p_value: f64,
    pub direction: Direction,
    pub significant: bool,
}

impl PairComparison {
    pub fn marker(&self) -> &'static str {
        self.direction.marker()
    }
}

/// Two-sided test of base against REFER samples. Lower metric values are
/// better, so a significant result with a lower REFER median is a REFER win.
pub fn compare_frameworks(
    base_frame: PromptFrame,
    refer_frame: PromptFrame,
    metric: Metric,
    base: &[f64],
    refer: &[f64],
    alpha: f64,
) -> Result<PairComparison, StatError> {
    let got = base.len().min(refer.len());
    if got < 2 {
        return Err(StatError::InsufficientData { needed: 2, got });
    }
    let test = mann_whitney_u(refer, base, Alternative::TwoSided)?;
    let (mb, mr) = (median(base), median(refer));
    let direction = if test.p >= alpha {
        Direction::None
    } else if mr < mb {
        Direction::ReferBetter
    } else if mr > mb {
        Direction::BaseBetter
    } else {
        Direction::None
    };
    Ok(PairComparison {
        base_frame,
        refer_frame,
        metric,
        u_statistic: test.u,
        p_value: test.p,
        direction,
        significant: direction != Direction::None,
    })
}

/// Linear interpolation at position `q * (n - 1)` of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl LengthStats {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

pub fn length_stats_of(word_counts: &[usize]) -> Result<LengthStats, StatError> {
    if word_counts.is_empty() {
        return Err(StatError::EmptySample);
    }
    let mut v: Vec<f64> = word_counts.iter().map(|&c| c as f64).collect();
    v.sort_by(f64::total_cmp);
    Ok(LengthStats {
        n: v.len(),
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
    })
}

/// Word-count statistics of the summaries in `trials`.
pub fn length_stats(trials: &[TrialRecord]) -> Result<LengthStats, StatError> {
    length_stats_of(&trials.iter().map(|t| t.word_count).collect::<Vec<_>>())
}
