//! Tikhonov-regularized NPIV estimation on the sample points.
//!
//! The conditional-expectation operator and its adjoint are discretized as
//! kernel matrices M_Z, M_W; the regularized estimator solves
//! (λI + M_Z M_W) φ̂ = M_Z r̂ where r̂ smooths Y on the instrument. λ comes
//! from leave-one-out cross-validation on a log grid with golden-section
//! refinement.
//!
//! Cross-validation evaluates the criterion at ~65 values of λ. Each
//! evaluation needs a solve against (λI + M_Z M_W); doing that naively is
//! O(n³) per λ. We reduce M_Z M_W to Hessenberg form once (O(n³)) and then
//! every shifted solve is O(n²) Gaussian elimination on the single
//! subdiagonal, which keeps Monte Carlo runs tractable on one core. The
//! final fit still goes through a plain LU solve.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{kernel_eval, Bandwidths, KernelSpec, WeightDensity};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

const SOLVE_RTOL: f64 = 1e-8;
const GRID_POINTS: usize = 40;
const GRID_LO: f64 = 1e-6;
const GRID_HI: f64 = 1e1;
const GOLDEN_ITERS: usize = 25;

#[derive(Debug, Clone)]
pub struct NpivFit {
    pub m_z: DMatrix<f64>,
    pub m_w: DMatrix<f64>,
    pub r_hat: DVector<f64>,
    pub lambda: f64,
    pub phi_hat: DVector<f64>,
    pub residuals: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub lambda_star: f64,
    /// every (λ, criterion) pair evaluated, grid scan first
    pub objective_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum LambdaPolicy {
    /// cross-validate, then multiply the minimizer by `scale`
    Cv { scale: f64 },
    Fixed { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum BandwidthPolicy {
    /// rule-of-thumb bandwidths, both multiplied by `scale`
    Silverman { scale: f64 },
    Fixed { h_z: f64, h_w: f64 },
}

impl BandwidthPolicy {
    pub fn resolve(&self, z: &DVector<f64>, w: &DVector<f64>) -> Result<Bandwidths> {
        match *self {
            BandwidthPolicy::Silverman { scale } => {
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(Error::Config(format!(
                        "bandwidth scale must be positive, got {scale}"
                    )));
                }
                crate::kernels::silverman_bandwidths(z, w)?.scaled(scale)
            }
            BandwidthPolicy::Fixed { h_z, h_w } => Bandwidths::new(h_z, h_w),
        }
    }
}

fn scalar_column(d: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    if d.p() != 1 || d.q() != 1 {
        return Err(Error::Config(format!(
            "the nonparametric path needs scalar treatment and instrument, got p={}, q={}",
            d.p(),
            d.q()
        )));
    }
    Ok((
        d.z().column(0).iter().copied().collect(),
        d.w().column(0).iter().copied().collect(),
    ))
}

/// Builds the kernel matrices and the smoothed outcome:
/// M_Z[i,j] = K((Z_i−Z_j)/h_z) / (π(Z_i)·n·h_z),
/// M_W[i,j] = K((W_i−W_j)/h_w) / (τ(W_i)·n·h_w),
/// r̂_i = (1/(n·h_w)) Σ_j Y_j K((W_j−W_i)/h_w) / τ(W_i).
pub fn build_matrices(
    d: &Dataset,
    kern: KernelSpec,
    bw: Bandwidths,
    pi: WeightDensity,
    tau: WeightDensity,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let (z, w) = scalar_column(d)?;
    let n = d.n();
    let nf = n as f64;
    let row_scale = |vals: &[f64], dens: WeightDensity, h: f64, name: &str| -> Result<Vec<f64>> {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| {
                let p = dens.eval(v);
                let s = 1.0 / (p * nf * h);
                if !s.is_finite() {
                    return Err(Error::Degenerate(format!(
                        "weight density for {name} underflows at observation {i} (value {v})"
                    )));
                }
                Ok(s)
            })
            .collect()
    };
    let inv_pi = row_scale(&z, pi, bw.h_z, "the treatment")?;
    let inv_tau = row_scale(&w, tau, bw.h_w, "the instrument")?;

    let fill = |vals: &[f64], scale: &[f64], h: f64| -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        m.as_mut_slice()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(j, col)| {
                let vj = vals[j];
                for (i, slot) in col.iter_mut().enumerate() {
                    *slot = kernel_eval(kern, (vals[i] - vj) / h) * scale[i];
                }
            });
        m
    };
    let m_z = fill(&z, &inv_pi, bw.h_z);
    let m_w = fill(&w, &inv_tau, bw.h_w);

    let y = d.y();
    let r_hat: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                acc += y[j] * kernel_eval(kern, (w[j] - w[i]) / bw.h_w);
            }
            acc * inv_tau[i]
        })
        .collect();
    Ok((m_z, m_w, DVector::from_vec(r_hat)))
}

/// Solves (λI + p) x = rhs by LU with a post-hoc residual check.
fn shifted_lu_solve(p: &DMatrix<f64>, rhs: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let n = p.nrows();
    let mut a = p.clone();
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    let lu = a.clone().lu();
    let fail = |context: String, lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>| {
        let u = lu.u();
        let (mut dmax, mut dmin) = (f64::MIN, f64::MAX);
        for i in 0..n {
            let v = u[(i, i)].abs();
            dmax = dmax.max(v);
            dmin = dmin.min(v);
        }
        let cond = if dmin > 0.0 { dmax / dmin } else { f64::INFINITY };
        Error::Numerical {
            context: format!("{context} (lambda={lambda:.6e})"),
            cond,
        }
    };
    let x = match lu.solve(rhs) {
        Some(x) if x.iter().all(|v| v.is_finite()) => x,
        _ => {
            return Err(fail(
                "regularized system is singular or produced non-finite values".into(),
                a.clone().lu(),
            ))
        }
    };
    let resid = (&a * &x - rhs).norm();
    if resid > SOLVE_RTOL * rhs.norm() {
        return Err(fail(
            format!(
                "solve residual {resid:.3e} exceeds {SOLVE_RTOL:.0e} x |rhs| = {:.3e}",
                SOLVE_RTOL * rhs.norm()
            ),
            a.clone().lu(),
        ));
    }
    Ok(x)
}

/// Solves (λI + M_Z M_W) φ̂ = M_Z r̂ without forming an inverse.
pub fn tikhonov_solve(
    m_z: &DMatrix<f64>,
    m_w: &DMatrix<f64>,
    r_hat: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Config(format!(
            "regularization parameter must be positive, got {lambda}"
        )));
    }
    let p = m_z * m_w;
    let rhs = m_z * r_hat;
    shifted_lu_solve(&p, &rhs, lambda)
}

/// Largest-singular-value estimate by power iteration on PᵀP, deterministic
/// start. Only used to scale the λ grid, so 30 iterations is plenty.
fn spectral_norm_estimate(p: &DMatrix<f64>) -> f64 {
    let n = p.nrows();
    let mut v = DVector::from_element(n, (n as f64).sqrt().recip());
    let mut sigma = 0.0;
    for _ in 0..30 {
        let pv = p * &v;
        sigma = pv.norm();
        let back = p.tr_mul(&pv);
        let norm = back.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return sigma.max(f64::MIN_POSITIVE);
        }
        v = back / norm;
    }
    sigma.max(f64::MIN_POSITIVE)
}

/// Solves (λI + H) x = b for upper-Hessenberg H in O(n²): eliminate the
/// single subdiagonal with partial pivoting, then back-substitute.
fn hessenberg_shifted_solve(h: &DMatrix<f64>, lambda: f64, b: &DVector<f64>) -> Option<DVector<f64>> {
    let n = h.nrows();
    let mut a = h.clone();
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    let mut x = b.clone();
    for k in 0..n.saturating_sub(1) {
        if a[(k + 1, k)].abs() > a[(k, k)].abs() {
            a.swap_rows(k, k + 1);
            x.swap_rows(k, k + 1);
        }
        let piv = a[(k, k)];
        if piv == 0.0 {
            return None;
        }
        let m = a[(k + 1, k)] / piv;
        if m != 0.0 {
            for j in k..n {
                a[(k + 1, j)] -= m * a[(k, j)];
            }
            x[k + 1] -= m * x[k];
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= a[(i, j)] * x[j];
        }
        if a[(i, i)] == 0.0 {
            return None;
        }
        x[i] = s / a[(i, i)];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Leave-one-out CV state: P = Q H Qᵀ reduced once, criterion per λ in O(n²).
struct CvEngine {
    q: DMatrix<f64>,
    h: DMatrix<f64>,
    qtb: DVector<f64>,
    mw_off: DMatrix<f64>,
    r_hat: DVector<f64>,
}

impl CvEngine {
    fn new(p: DMatrix<f64>, m_z: &DMatrix<f64>, m_w: &DMatrix<f64>, r_hat: &DVector<f64>) -> Self {
        let n = p.nrows();
        // b = (M_Z − diag M_Z) r̂
        let mut b = m_z * r_hat;
        for i in 0..n {
            b[i] -= m_z[(i, i)] * r_hat[i];
        }
        let mut mw_off = m_w.clone();
        for i in 0..n {
            mw_off[(i, i)] = 0.0;
        }
        let (q, h) = p.hessenberg().unpack();
        let qtb = q.tr_mul(&b);
        Self {
            q,
            h,
            qtb,
            mw_off,
            r_hat: r_hat.clone(),
        }
    }

    /// Σ_i [v_i(λ) − r̂_i]² with v = (M_W − diag)(λI + P)⁻¹(M_Z − diag) r̂.
    fn criterion(&self, lambda: f64) -> f64 {
        match hessenberg_shifted_solve(&self.h, lambda, &self.qtb) {
            Some(x) => {
                let v = &self.mw_off * (&self.q * x);
                let mut acc = 0.0;
                for i in 0..v.len() {
                    let e = v[i] - self.r_hat[i];
                    acc += e * e;
                }
                acc
            }
            None => f64::INFINITY,
        }
    }
}

fn cv_core(
    p: DMatrix<f64>,
    m_z: &DMatrix<f64>,
    m_w: &DMatrix<f64>,
    r_hat: &DVector<f64>,
    grid: Option<&[f64]>,
) -> Result<CvResult> {
    let default_grid;
    let grid = match grid {
        Some(g) => {
            if g.is_empty() {
                return Err(Error::Config("lambda grid is empty".into()));
            }
            if let Some(&bad) = g.iter().find(|&&l| !(l.is_finite() && l > 0.0)) {
                return Err(Error::Config(format!(
                    "lambda grid entries must be positive, got {bad}"
                )));
            }
            g
        }
        None => {
            let scale = spectral_norm_estimate(&p);
            let (lo, hi) = ((GRID_LO * scale).ln(), (GRID_HI * scale).ln());
            default_grid = (0..GRID_POINTS)
                .map(|i| (lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64).exp())
                .collect::<Vec<_>>();
            &default_grid
        }
    };

    let engine = CvEngine::new(p, m_z, m_w, r_hat);
    let mut curve: Vec<(f64, f64)> = grid
        .iter()
        .map(|&l| (l, engine.criterion(l)))
        .collect();
    let Some(best) = (0..curve.len())
        .filter(|&i| curve[i].1.is_finite())
        .min_by(|&a, &b| curve[a].1.total_cmp(&curve[b].1))
    else {
        return Err(Error::CvFailure(
            "cross-validation criterion is non-finite on the whole grid".into(),
        ));
    };
    let grid_star = curve[best].0;

    // golden-section refinement in log space on the bracketing interval
    if best > 0 && best + 1 < grid.len() {
        let gr = (5.0_f64.sqrt() - 1.0) / 2.0;
        let (mut lo, mut hi) = (grid[best - 1].ln(), grid[best + 1].ln());
        let mut refined = Vec::with_capacity(GOLDEN_ITERS + 2);
        let mut eval = |ll: f64| -> f64 {
            let c = engine.criterion(ll.exp());
            refined.push((ll.exp(), c));
            c
        };
        let mut c = hi - gr * (hi - lo);
        let mut d = lo + gr * (hi - lo);
        let (mut fc, mut fd) = (eval(c), eval(d));
        let mut ok = fc.is_finite() && fd.is_finite();
        if ok {
            for _ in 0..GOLDEN_ITERS {
                if fc < fd {
                    hi = d;
                    d = c;
                    fd = fc;
                    c = hi - gr * (hi - lo);
                    fc = eval(c);
                } else {
                    lo = c;
                    c = d;
                    fc = fd;
                    d = lo + gr * (hi - lo);
                    fd = eval(d);
                }
                if !(fc.is_finite() && fd.is_finite()) {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            eval(((lo + hi) / 2.0).exp());
        } else {
            log::warn!(
                "cross-validation refinement hit a non-finite criterion; keeping the grid minimizer {grid_star:.6e}"
            );
        }
        curve.extend(refined);
    }

    // Minimize over every evaluation made, so a misconverged refinement can
    // never lose to a point already seen. Ties keep the earliest entry.
    let (lambda_star, crit_star) = curve
        .iter()
        .filter(|(_, c)| c.is_finite())
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("grid minimizer is finite");

    debug_assert!(crit_star.is_finite());
    Ok(CvResult {
        lambda_star,
        objective_curve: curve,
    })
}

/// Scans `grid` for the leave-one-out optimal λ, then refines around the
/// grid minimizer by golden-section search (log scale).
pub fn cross_validate_lambda(
    d: &Dataset,
    kern: KernelSpec,
    bw: Bandwidths,
    pi: WeightDensity,
    tau: WeightDensity,
    grid: &[f64],
) -> Result<CvResult> {
    let (m_z, m_w, r_hat) = build_matrices(d, kern, bw, pi, tau)?;
    let p = &m_z * &m_w;
    cv_core(p, &m_z, &m_w, &r_hat, Some(grid))
}

/// Full estimator: kernel matrices, λ per policy, regularized solve,
/// residuals Û = Y − φ̂.
pub fn npiv_fit(
    d: &Dataset,
    kern: KernelSpec,
    bw: Bandwidths,
    pi: WeightDensity,
    tau: WeightDensity,
    lambda: LambdaPolicy,
) -> Result<NpivFit> {
    let (m_z, m_w, r_hat) = build_matrices(d, kern, bw, pi, tau)?;
    let p = &m_z * &m_w;
    let lambda = match lambda {
        LambdaPolicy::Fixed { value } => {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!(
                    "regularization parameter must be positive, got {value}"
                )));
            }
            value
        }
        LambdaPolicy::Cv { scale } => {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(Error::Config(format!(
                    "lambda scale must be positive, got {scale}"
                )));
            }
            scale * cv_core(p.clone(), &m_z, &m_w, &r_hat, None)?.lambda_star
        }
    };
    let rhs = &m_z * &r_hat;
    let phi_hat = shifted_lu_solve(&p, &rhs, lambda)?;
    let residuals = d.y() - &phi_hat;
    Ok(NpivFit {
        m_z,
        m_w,
        r_hat,
        lambda,
        phi_hat,
        residuals,
    })
}
