//! Rank tests and small descriptive statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::statistics::{Data, Median};

/// Summary of one tensor's entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorSummary {
    pub stdev: f64,
    pub mean: f64,
    pub norm: f64,
    pub max: f64,
}

impl TensorSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            stdev: var.sqrt(),
            mean,
            norm: values.iter().map(|v| v * v).sum::<f64>().sqrt(),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Median of a sample; NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    Data::new(values.to_vec()).median()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub exact: bool,
}

/// Largest combined sample size for which the exact null distribution is used.
const EXACT_LIMIT: usize = 50;

/// Two-sided Mann-Whitney U test. Returns `None` when either sample is empty.
///
/// Small tie-free samples use the exact permutation distribution; otherwise
/// the normal approximation with tie and continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Option<MannWhitney> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return None;
    }
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));

    let n = pooled.len();
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut has_ties = false;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        if t > 1.0 {
            has_ties = true;
            tie_term += t * t * t - t;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_a += pooled[i..=j].iter().filter(|p| p.1).count() as f64 * avg_rank;
        i = j + 1;
    }
    let (f1, f2) = (n1 as f64, n2 as f64);
    let u = rank_sum_a - f1 * (f1 + 1.0) / 2.0;

    if !has_ties && n <= EXACT_LIMIT {
        let counts = u_null_counts(n1, n2);
        let total: f64 = counts.iter().sum();
        let k = u.round() as usize;
        let lower: f64 = counts[..=k].iter().sum::<f64>() / total;
        let upper: f64 = counts[k..].iter().sum::<f64>() / total;
        return Some(MannWhitney {
            u,
            p_value: (2.0 * lower.min(upper)).min(1.0),
            exact: true,
        });
    }

    let mean = f1 * f2 / 2.0;
    let nf = n as f64;
    let var = f1 * f2 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Some(MannWhitney {
        u,
        p_value,
        exact: false,
    })
}

/// Number of orderings yielding each value of U, i.e. the coefficients of
/// the Gaussian binomial `[n1 + n2 choose n1]_q`.
fn u_null_counts(n1: usize, n2: usize) -> Vec<f64> {
    // row[k] holds the polynomial [n choose k]_q for the current n.
    let mut row: Vec<Vec<f64>> = vec![vec![1.0]];
    for nn in 1..=(n1 + n2) {
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(nn.min(n1) + 1);
        for k in 0..=nn.min(n1) {
            let degree = k * (nn - k);
            let mut poly = vec![0.0; degree + 1];
            if k >= 1 {
                for (d, &c) in row[k - 1].iter().enumerate() {
                    poly[d] += c;
                }
            }
            if k < row.len() && k < nn {
                for (d, &c) in row[k].iter().enumerate() {
                    poly[d + k] += c;
                }
            }
            next.push(poly);
        }
        row = next;
    }
    row.swap_remove(n1)
}
