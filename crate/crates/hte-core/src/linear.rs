//! Two-stage least squares and the linear moment test.
//!
//! Under homogeneous effects the TSLS residual satisfies
//! E[U X (W_k − E W_k)] = 0, so T_n = n^{-1/2} Σ Û_i X_i (W_ki − W̄_k)
//! is asymptotically mean-zero Gaussian; a pairwise bootstrap calibrates it.

use crate::bootstrap::{bootstrap, PValueMode, TestReport};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub beta_tsls: DVector<f64>,
    pub gamma_hat: DMatrix<f64>,
    pub residuals: DVector<f64>,
}

/// Solves `m x = rhs` by SVD, rejecting matrices with condition number above
/// 1e12. `name` identifies the matrix in the error.
fn guarded_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    let (smax, smin) = svd
        .singular_values
        .iter()
        .fold((f64::MIN, f64::MAX), |(hi, lo), &s| (hi.max(s), lo.min(s)));
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::RankDeficient {
            matrix: name.to_string(),
            cond,
        });
    }
    svd.solve(rhs, 0.0)
        .map_err(|e| Error::Numerical {
            context: format!("solving against {name}: {e}"),
            cond,
        })
}

/// TSLS: Γ̂ = (WᵀW/n)⁻¹(WᵀZ/n), β̂ = [Γ̂ᵀ(WᵀW/n)Γ̂]⁻¹ Γ̂ᵀ(WᵀY/n),
/// residuals Û = Y − Zβ̂.
pub fn tsls_fit(d: &Dataset) -> Result<LinearFit> {
    let n = d.n() as f64;
    let w = d.w();
    let a = w.transpose() * w / n;
    let wz = w.transpose() * d.z() / n;
    let wy = w.transpose() * d.y() / n;
    let gamma_hat = guarded_solve(&a, &wz, "instrument second-moment matrix W'W/n")?;
    let projected = gamma_hat.transpose() * &a * &gamma_hat;
    let rhs = gamma_hat.transpose() * wy;
    let rhs = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
    let beta = guarded_solve(&projected, &rhs, "projected treatment matrix G'(W'W/n)G")?;
    let beta_tsls = DVector::from_column_slice(beta.as_slice());
    let residuals = d.y() - d.z() * &beta_tsls;
    Ok(LinearFit {
        beta_tsls,
        gamma_hat,
        residuals,
    })
}

/// T_n = n^{-1/2} Σ Û_i X_i (W_ki − W̄_k).
pub fn linear_statistic(d: &Dataset, fit: &LinearFit) -> f64 {
    let wk = d.w().column(d.k());
    let wbar = wk.sum() / d.n() as f64;
    let acc: f64 = fit
        .residuals
        .iter()
        .zip(d.x().iter())
        .zip(wk.iter())
        .map(|((&u, &x), &w)| u * x * (w - wbar))
        .sum();
    acc / (d.n() as f64).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct LinearTestConfig {
    pub bootstrap_count: usize,
    pub seed: u64,
    pub p_value_mode: PValueMode,
}

impl Default for LinearTestConfig {
    fn default() -> Self {
        Self {
            bootstrap_count: 1000,
            seed: 0,
            p_value_mode: PValueMode::Symmetric,
        }
    }
}

/// Full linear test: statistic on the sample, B pairwise-bootstrap replicates
/// (each refits TSLS and recomputes W̄_k on the resample), p-values per mode.
pub fn linear_test(d: &Dataset, cfg: &LinearTestConfig) -> Result<TestReport> {
    if cfg.bootstrap_count == 0 {
        return Err(Error::Config("bootstrap count B must be at least 1".into()));
    }
    let config = serde_json::json!({
        "test": "linear",
        "b": cfg.bootstrap_count,
        "seed": cfg.seed,
        "p_value_mode": cfg.p_value_mode,
        "k": d.k(),
        "n": d.n(),
        "p": d.p(),
        "q": d.q(),
    });
    let stat = |s: &Dataset| -> Result<f64> {
        let fit = tsls_fit(s)?;
        Ok(linear_statistic(s, &fit))
    };
    bootstrap(d, stat, cfg.bootstrap_count, cfg.seed, cfg.p_value_mode, config)
}
