//! Pre-tests of the covariate/instrument independence requirement. The
//! moment condition behind both homogeneity tests needs X independent of the
//! tested instrument coordinate, so callers can screen that assumption here
//! before reading test p-values: chi-squared for discrete pairs, two-sample
//! Kolmogorov-Smirnov when one side is binary and the other continuous.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndependenceReport {
    /// "chi_squared" or "ks_two_sample".
    pub method: String,
    pub statistic: f64,
    pub p_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn validate_pair(x: &[f64], w: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Invalid("independence test needs data".into()));
    }
    if x.len() != w.len() {
        return Err(Error::Invalid(format!(
            "length mismatch: {} vs {}",
            x.len(),
            w.len()
        )));
    }
    if let Some(v) = x.iter().chain(w.iter()).find(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite value {v}")));
    }
    Ok(())
}

// Exact-value levels. -0.0 folds into 0.0 so relabeling a category cannot
// split it in two.
fn levels(v: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().map(|&a| if a == 0.0 { 0.0 } else { a }).collect();
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out.dedup();
    out
}

fn level_index(levels: &[f64], v: f64) -> usize {
    let v = if v == 0.0 { 0.0 } else { v };
    levels.partition_point(|&l| l < v)
}

const MAX_LEVELS: usize = 50;

/// Pearson chi-squared independence test on the contingency table of two
/// discrete variables, with (r-1)(c-1) degrees of freedom. Small expected
/// cell counts do not stop the test but are flagged in the note.
pub fn chi_squared_independence(x: &[f64], w: &[f64]) -> Result<IndependenceReport> {
    validate_pair(x, w)?;
    let xl = levels(x);
    let wl = levels(w);
    if xl.len() < 2 {
        return Err(Error::Degenerate(
            "covariate is constant, independence is vacuous".into(),
        ));
    }
    if wl.len() < 2 {
        return Err(Error::Degenerate(
            "instrument is constant, independence is vacuous".into(),
        ));
    }
    if xl.len() > MAX_LEVELS || wl.len() > MAX_LEVELS {
        return Err(Error::Invalid(format!(
            "more than {MAX_LEVELS} distinct values; the chi-squared pre-test needs discrete data"
        )));
    }

    let (r, c) = (xl.len(), wl.len());
    let mut table = vec![vec![0.0f64; c]; r];
    for (&xi, &wi) in x.iter().zip(w) {
        table[level_index(&xl, xi)][level_index(&wl, wi)] += 1.0;
    }
    let n = x.len() as f64;
    let row_sums: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();

    let mut statistic = 0.0;
    let mut min_expected = f64::INFINITY;
    for i in 0..r {
        for j in 0..c {
            let expected = row_sums[i] * col_sums[j] / n;
            min_expected = min_expected.min(expected);
            // Marginals are positive by construction of the levels, so
            // expected > 0 in every cell.
            let diff = table[i][j] - expected;
            statistic += diff * diff / expected;
        }
    }
    let df = ((r - 1) * (c - 1)) as f64;
    let dist = ChiSquared::new(df).map_err(|e| Error::Invalid(e.to_string()))?;
    let p_value = dist.sf(statistic).clamp(0.0, 1.0);
    let note = (min_expected < 5.0).then(|| {
        format!(
            "smallest expected cell count is {min_expected:.2}; the chi-squared approximation wants at least 5"
        )
    });
    Ok(IndependenceReport {
        method: "chi_squared".into(),
        statistic,
        p_value,
        note,
    })
}

/// P(sup_t |B(F(t))| > lambda) for a Brownian bridge B, the asymptotic null
/// law of the scaled two-sample KS statistic.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.2 {
        // The alternating series needs hundreds of terms here and the true
        // tail is 1 to well past double precision.
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-17 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test of whether w is distributed the same
/// in the two groups defined by a binary x. Ties in w are handled with the
/// midrank ECDF convention, F(t) = (#{w < t} + #{w = t}/2) / n, and flagged
/// when they are frequent enough to distort the continuous-case asymptotics.
pub fn ks_two_sample(x: &[f64], w: &[f64]) -> Result<IndependenceReport> {
    validate_pair(x, w)?;
    let xl = levels(x);
    if xl.len() == 1 {
        return Err(Error::Degenerate(
            "grouping variable is constant, one group is empty".into(),
        ));
    }
    if xl.len() != 2 {
        return Err(Error::Invalid(format!(
            "grouping variable must be binary, found {} distinct values",
            xl.len()
        )));
    }
    let mut g0: Vec<f64> = Vec::new();
    let mut g1: Vec<f64> = Vec::new();
    for (&xi, &wi) in x.iter().zip(w) {
        if level_index(&xl, xi) == 0 {
            g0.push(wi);
        } else {
            g1.push(wi);
        }
    }
    g0.sort_by(|a, b| a.partial_cmp(b).unwrap());
    g1.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (n0, n1) = (g0.len() as f64, g1.len() as f64);

    let pooled = {
        let mut all = w.to_vec();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.dedup();
        all
    };
    let tie_fraction = 1.0 - pooled.len() as f64 / w.len() as f64;

    // Midrank ECDF via binary search: below(t) counts w < t, upper counts
    // w <= t, and the midrank value averages them.
    let mid = |g: &[f64], t: f64| -> f64 {
        let below = g.partition_point(|&v| v < t) as f64;
        let upto = g.partition_point(|&v| v <= t) as f64;
        (below + upto) / 2.0 / g.len() as f64
    };
    let statistic = pooled
        .iter()
        .map(|&t| (mid(&g0, t) - mid(&g1, t)).abs())
        .fold(0.0f64, f64::max);

    let effective = n0 * n1 / (n0 + n1);
    let p_value = kolmogorov_sf(effective.sqrt() * statistic);
    let note = (tie_fraction > 0.10).then(|| {
        format!(
            "{:.0}% of the values are tied; the asymptotic p-value assumes a continuous distribution",
            100.0 * tie_fraction
        )
    });
    Ok(IndependenceReport {
        method: "ks_two_sample".into(),
        statistic,
        p_value,
        note,
    })
}
