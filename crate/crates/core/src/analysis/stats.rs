//! Paired t, Mann-Whitney U, Pearson r, Bonferroni and star labels.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} observations, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("zero variance")]
    DegenerateVariance,
    #[error("non-finite input")]
    NonFinite,
    #[error("exact enumeration is limited to 20 observations, got {0}")]
    TooLargeForExact(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test_name: String,
    pub comparison: String,
    pub family: String,
    pub statistic: Option<f64>,
    pub df: Option<f64>,
    pub raw_p: f64,
    pub adjusted_p: f64,
    /// Family size used for the Bonferroni adjustment.
    pub m: usize,
    pub n: usize,
    pub stars: String,
    pub note: Option<String>,
}

impl TestResult {
    pub fn new(
        test_name: &str,
        comparison: &str,
        statistic: f64,
        df: Option<f64>,
        p: f64,
        n: usize,
    ) -> Self {
        TestResult {
            test_name: test_name.into(),
            comparison: comparison.into(),
            family: String::new(),
            statistic: Some(statistic),
            df,
            raw_p: p,
            adjusted_p: p,
            m: 1,
            n,
            stars: stars(p).into(),
            note: None,
        }
    }

    /// Placeholder for a comparison that could not be computed.
    pub fn not_computed(test_name: &str, comparison: &str, n: usize, why: &str) -> Self {
        TestResult {
            test_name: test_name.into(),
            comparison: comparison.into(),
            family: String::new(),
            statistic: None,
            df: None,
            raw_p: 1.0,
            adjusted_p: 1.0,
            m: 1,
            n,
            stars: "ns".into(),
            note: Some(why.into()),
        }
    }

    pub fn in_family(mut self, family: &str, m: usize) -> Self {
        self.family = family.into();
        self.m = m;
        self.adjusted_p = bonferroni(self.raw_p, m);
        self.stars = stars(self.adjusted_p).into();
        self
    }
}

pub fn bonferroni(p: f64, m: usize) -> f64 {
    (p * m as f64).min(1.0)
}

pub fn stars(p: f64) -> &'static str {
    if p <= 1e-4 {
        "****"
    } else if p <= 1e-3 {
        "***"
    } else if p <= 0.01 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else {
        "ns"
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n - 1).
pub fn sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

pub fn sem(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    sd(x) / (x.len() as f64).sqrt()
}

fn finite(xs: &[&[f64]]) -> Result<(), StatsError> {
    if xs.iter().all(|x| x.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

fn t_two_sided(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive df");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedT {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub mean_diff: f64,
}

pub fn paired_t(x: &[f64], y: &[f64]) -> Result<PairedT, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooFew {
            need: 2,
            got: x.len(),
        });
    }
    finite(&[x, y])?;
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let s = sd(&d);
    if s == 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    let n = d.len() as f64;
    let mean_diff = mean(&d);
    let t = mean_diff / (s / n.sqrt());
    let df = n - 1.0;
    Ok(PairedT {
        t,
        df,
        p: t_two_sided(t, df),
        mean_diff,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwuMethod {
    /// Exact when n1 + n2 <= 12, otherwise asymptotic.
    Auto,
    Exact,
    Asymptotic,
}

pub const EXACT_MAX_N: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    pub u1: f64,
    pub u2: f64,
    pub p: f64,
    pub exact: bool,
}

/// Midranks (1-based) of the concatenation of `x` and `y`, and the tie
/// group sizes.
fn midranks(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.sort_by(|&a, &b| all[a].total_cmp(&all[b]));
    let mut ranks = vec![0.0; all.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && all[idx[j + 1]] == all[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

pub fn mann_whitney_u(x: &[f64], y: &[f64], method: MwuMethod) -> Result<MannWhitney, StatsError> {
    if x.is_empty() || y.is_empty() {
        return Err(StatsError::TooFew {
            need: 1,
            got: x.len().min(y.len()),
        });
    }
    finite(&[x, y])?;
    let (n1, n2) = (x.len(), y.len());
    let n = n1 + n2;
    let (ranks, ties) = midranks(x, y);
    let r1: f64 = ranks[..n1].iter().sum();
    let u1 = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let u2 = (n1 * n2) as f64 - u1;
    let exact = match method {
        MwuMethod::Auto => n <= EXACT_MAX_N,
        MwuMethod::Exact => true,
        MwuMethod::Asymptotic => false,
    };
    let p = if exact {
        if n > 20 {
            return Err(StatsError::TooLargeForExact(n));
        }
        exact_p(&ranks, n1)
    } else {
        let mu = (n1 * n2) as f64 / 2.0;
        let tie_term: f64 =
            ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1)) as f64;
        let var = (n1 * n2) as f64 / 12.0 * ((n + 1) as f64 - tie_term);
        if var <= 0.0 {
            1.0
        } else {
            let z = (u1.max(u2) - mu - 0.5) / var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            (2.0 * normal.sf(z)).min(1.0)
        }
    };
    Ok(MannWhitney { u1, u2, p, exact })
}

/// Two-sided permutation p over every assignment of the pooled midranks to
/// the first sample.
fn exact_p(ranks: &[f64], n1: usize) -> f64 {
    let n = ranks.len();
    let doubled: Vec<i64> = ranks.iter().map(|r| (r * 2.0).round() as i64).collect();
    let observed: i64 = doubled[..n1].iter().sum();
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let s: i64 = (0..n)
            .filter(|&i| mask >> i & 1 == 1)
            .map(|i| doubled[i])
            .sum();
        total += 1;
        le += u64::from(s <= observed);
        ge += u64::from(s >= observed);
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pearson {
    pub r: f64,
    pub t: f64,
    pub p: f64,
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<Pearson, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFew {
            need: 3,
            got: x.len(),
        });
    }
    finite(&[x, y])?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (x.len() - 2) as f64;
    if (1.0 - r.abs()) < 1e-15 {
        return Ok(Pearson {
            r,
            t: f64::INFINITY.copysign(r),
            p: 0.0,
        });
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    Ok(Pearson {
        r,
        t,
        p: t_two_sided(t, df),
    })
}
