//! Pairwise bootstrap engine, p-values and the warp-speed pool.
//!
//! `bootstrap` resamples rows with replacement, recomputes a statistic on
//! each resample and reports symmetric (default) and equal-tailed p-values.
//! Replicate b draws its indices from the dedicated RNG stream (seed, b), so
//! the replicate vector does not depend on worker count or scheduling.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{domain, stream_rng};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PValueMode {
    /// p = (1/B) Σ 1{|T*_b − T| > |T|}. Reported always.
    Symmetric,
    /// Additionally reports 2·min(F̂(T), 1 − F̂(T)) over the centered
    /// replicates D_b = T*_b − T.
    EqualTailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestReport {
    pub statistic: f64,
    pub replicates: Vec<f64>,
    pub p_symmetric: f64,
    pub p_equal_tailed: Option<f64>,
    pub discarded_count: usize,
    pub config: serde_json::Value,
}

#[derive(Serialize)]
struct Quantiles {
    min: f64,
    q025: f64,
    q25: f64,
    q50: f64,
    q75: f64,
    q975: f64,
    max: f64,
}

#[derive(Serialize)]
struct ReplicatesSummary {
    count: usize,
    mean: f64,
    sd: f64,
    quantiles: Quantiles,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    statistic: f64,
    replicates_summary: ReplicatesSummary,
    p_symmetric: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_equal_tailed: Option<f64>,
    discarded_count: usize,
    config: &'a serde_json::Value,
}

/// Linear-interpolation quantile on a sorted slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[n - 1]
    }
}

impl TestReport {
    pub fn to_json(&self) -> serde_json::Value {
        let mut sorted = self.replicates.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let count = sorted.len();
        let mean = sorted.iter().sum::<f64>() / count as f64;
        let sd = if count < 2 {
            0.0
        } else {
            (sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1) as f64)
                .sqrt()
        };
        let q = |p| quantile_sorted(&sorted, p);
        let summary = ReplicatesSummary {
            count,
            mean,
            sd,
            quantiles: Quantiles {
                min: sorted[0],
                q025: q(0.025),
                q25: q(0.25),
                q50: q(0.5),
                q75: q(0.75),
                q975: q(0.975),
                max: sorted[count - 1],
            },
        };
        serde_json::to_value(ReportJson {
            statistic: self.statistic,
            replicates_summary: summary,
            p_symmetric: self.p_symmetric,
            p_equal_tailed: self.p_equal_tailed,
            discarded_count: self.discarded_count,
            config: &self.config,
        })
        .expect("report serialization cannot fail")
    }
}

impl Serialize for TestReport {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

fn p_symmetric(statistic: f64, replicates: &[f64]) -> f64 {
    let t = statistic.abs();
    let hits = replicates
        .iter()
        .filter(|&&r| (r - statistic).abs() > t)
        .count();
    hits as f64 / replicates.len() as f64
}

fn p_equal_tailed(statistic: f64, replicates: &[f64]) -> f64 {
    let below = replicates
        .iter()
        .filter(|&&r| r - statistic <= statistic)
        .count() as f64
        / replicates.len() as f64;
    2.0 * below.min(1.0 - below)
}

/// Runs the pairwise bootstrap. Replicates whose statistic fails for a
/// numerical reason (rank deficiency, degenerate resample, regularization
/// breakdown) are discarded; more than 1% of them aborts the run.
pub fn bootstrap<F>(
    data: &Dataset,
    statistic_fn: F,
    b: usize,
    seed: u64,
    mode: PValueMode,
    config: serde_json::Value,
) -> Result<TestReport>
where
    F: Fn(&Dataset) -> Result<f64> + Sync,
{
    if b == 0 {
        return Err(Error::Config("bootstrap needs B >= 1 replicates".into()));
    }
    let statistic = statistic_fn(data)?;
    if !statistic.is_finite() {
        return Err(Error::Degenerate(
            "test statistic is not finite on the original sample".into(),
        ));
    }
    let n = data.n();
    let draws: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|rep| -> Result<Option<f64>> {
            let mut rng = stream_rng(seed, domain::BOOTSTRAP, rep as u64);
            let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let resampled = data.resample(&indices)?;
            match statistic_fn(&resampled) {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                Ok(_) => Ok(None),
                Err(
                    Error::RankDeficient { .. }
                    | Error::Degenerate(_)
                    | Error::Numerical { .. }
                    | Error::CvFailure(_),
                ) => Ok(None),
                Err(fatal) => Err(fatal),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let replicates: Vec<f64> = draws.iter().filter_map(|&v| v).collect();
    let discarded_count = b - replicates.len();
    if discarded_count * 100 > b {
        return Err(Error::Degenerate(format!(
            "{discarded_count} of {b} bootstrap replicates failed (cap is 1%)"
        )));
    }
    let p_sym = p_symmetric(statistic, &replicates);
    let p_eq = match mode {
        PValueMode::Symmetric => None,
        PValueMode::EqualTailed => Some(p_equal_tailed(statistic, &replicates)),
    };
    Ok(TestReport {
        statistic,
        replicates,
        p_symmetric: p_sym,
        p_equal_tailed: p_eq,
        discarded_count,
        config,
    })
}

/// Pool of (statistic, bootstrap statistic) pairs, one bootstrap draw per
/// Monte Carlo iteration.
#[derive(Debug, Clone, Default)]
pub struct WarpSpeedPool {
    pairs: Vec<(f64, f64)>,
}

impl WarpSpeedPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: Vec<(f64, f64)>) -> Self {
        Self { pairs }
    }

    pub fn push(&mut self, statistic: f64, bootstrap_statistic: f64) {
        self.pairs.push((statistic, bootstrap_statistic));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }
}

/// Warp-speed p-values: the pooled deviations D_{m'} = T*_{m'} − T_{m'},
/// each bootstrap statistic centered at its own iteration's statistic, stand
/// in for a full replicate set, and iteration m gets
/// p_m = (1/M) Σ_{m'} 1{|D_{m'}| > |T_m|}.
pub fn warp_speed_pvalues(pool: &WarpSpeedPool) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::Invalid("warp-speed pool is empty".into()));
    }
    let m = pool.len() as f64;
    let mut abs_dev: Vec<f64> = pool
        .pairs
        .iter()
        .map(|&(t, ts)| (ts - t).abs())
        .collect();
    abs_dev.sort_by(|a, b| a.total_cmp(b));
    Ok(pool
        .pairs
        .iter()
        .map(|&(t, _)| {
            let cut = t.abs();
            // strict inequality: count deviations > |T_m|
            let above = abs_dev.len() - abs_dev.partition_point(|&d| d <= cut);
            above as f64 / m
        })
        .collect())
}
