//! Nonparametric test statistic S_n and its bootstrap test.
//!
//! S_n = n^{-1/2} Σ Û_i (W_i − W̄) X_i with Û from the regularized NPIV fit.
//! The bootstrap selects bandwidths, weights and λ once on the original
//! sample and holds all of them fixed across replicates; only the data rows
//! are redrawn (and W̄ is recomputed per resample).

use crate::bootstrap::{bootstrap, PValueMode, TestReport};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{default_weights, KernelSpec};
use crate::npiv::{npiv_fit, BandwidthPolicy, LambdaPolicy, NpivFit};
use nalgebra::DVector;

#[derive(Debug, Clone, Copy)]
pub struct NpTestConfig {
    pub bootstrap_count: usize,
    pub seed: u64,
    pub lambda: LambdaPolicy,
    pub bandwidths: BandwidthPolicy,
    pub kernel: KernelSpec,
    pub p_value_mode: PValueMode,
}

impl Default for NpTestConfig {
    fn default() -> Self {
        Self {
            bootstrap_count: 1000,
            seed: 0,
            lambda: LambdaPolicy::Cv { scale: 1.0 },
            bandwidths: BandwidthPolicy::Silverman { scale: 1.0 },
            kernel: KernelSpec::default(),
            p_value_mode: PValueMode::Symmetric,
        }
    }
}

/// S_n = n^{-1/2} Σ Û_i (W_i − W̄) X_i.
pub fn np_statistic(d: &Dataset, fit: &NpivFit) -> f64 {
    let w = d.w().column(0);
    let wbar = w.sum() / d.n() as f64;
    let acc: f64 = fit
        .residuals
        .iter()
        .zip(d.x().iter())
        .zip(w.iter())
        .map(|((&u, &x), &wi)| u * (wi - wbar) * x)
        .sum();
    acc / (d.n() as f64).sqrt()
}

/// Full nonparametric test. Step 1 resolves (h_z, h_w), (π, τ) and λ on the
/// original sample; step 2 reruns the fit on B pairwise resamples with those
/// choices frozen; p-values as in the linear test.
pub fn np_test(d: &Dataset, cfg: &NpTestConfig) -> Result<TestReport> {
    if cfg.bootstrap_count == 0 {
        return Err(Error::Config("bootstrap count B must be at least 1".into()));
    }
    let z = DVector::from_column_slice(d.z().column(0).as_slice());
    let w = DVector::from_column_slice(d.w().column(0).as_slice());
    let bw = cfg.bandwidths.resolve(&z, &w)?;
    let (pi, tau) = default_weights(&z, &w)?;
    let original = npiv_fit(d, cfg.kernel, bw, pi, tau, cfg.lambda)?;
    let lambda = original.lambda;

    let config = serde_json::json!({
        "test": "np",
        "b": cfg.bootstrap_count,
        "seed": cfg.seed,
        "p_value_mode": cfg.p_value_mode,
        "lambda": cfg.lambda,
        "lambda_resolved": lambda,
        "bandwidths": cfg.bandwidths,
        "h_z": bw.h_z,
        "h_w": bw.h_w,
        "kernel": cfg.kernel,
        "pi": pi,
        "tau": tau,
        "n": d.n(),
    });
    let frozen = LambdaPolicy::Fixed { value: lambda };
    let stat = |s: &Dataset| -> Result<f64> {
        let fit = npiv_fit(s, cfg.kernel, bw, pi, tau, frozen)?;
        Ok(np_statistic(s, &fit))
    };
    bootstrap(d, stat, cfg.bootstrap_count, cfg.seed, cfg.p_value_mode, config)
}

/// Joint law of binary (Z, W) plus the conditional outcome means, for
/// checking the moment logic on discrete designs where kernel smoothing
/// cannot go.
#[derive(Debug, Clone, Copy)]
pub struct DiscreteJoint {
    /// prob[z][w] = P(Z=z, W=w)
    pub prob: [[f64; 2]; 2],
    /// y_mean[z][w] = E[Y | Z=z, W=w]
    pub y_mean: [[f64; 2]; 2],
}

/// Solves E[Y|W=w] = Σ_z φ(z) P(Z=z|W=w) for (φ(0), φ(1)) exactly.
pub fn discrete_npiv_oracle(joint: &DiscreteJoint) -> Result<[f64; 2]> {
    let p = &joint.prob;
    let total: f64 = p.iter().flatten().sum();
    if p.iter().flatten().any(|&v| !(0.0..=1.0).contains(&v)) || (total - 1.0).abs() > 1e-12 {
        return Err(Error::Invalid(format!(
            "joint probabilities must be in [0,1] and sum to 1, got sum {total}"
        )));
    }
    if joint.y_mean.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("conditional outcome means must be finite".into()));
    }
    // marginals of W and the conditional system rows
    let mut a = [[0.0; 2]; 2]; // a[w][z] = P(Z=z | W=w)
    let mut b = [0.0; 2]; // b[w] = E[Y | W=w]
    for w in 0..2 {
        let pw = p[0][w] + p[1][w];
        if pw <= 0.0 {
            return Err(Error::Invalid(format!("instrument level {w} has probability 0")));
        }
        for z in 0..2 {
            a[w][z] = p[z][w] / pw;
            b[w] += joint.y_mean[z][w] * p[z][w] / pw;
        }
    }
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let scale = a.iter().flatten().fold(0.0f64, |m, &v| m.max(v.abs()));
    if det.abs() <= 1e-10 * scale * scale {
        return Err(Error::Identification(
            "treatment distribution does not vary with the instrument".into(),
        ));
    }
    Ok([
        (b[0] * a[1][1] - b[1] * a[0][1]) / det,
        (a[0][0] * b[1] - a[1][0] * b[0]) / det,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Bandwidths;
    use crate::kernels::WeightDensity;
    use crate::rng::{domain, stream_rng};
    use crate::sim::{generate, Dgp};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rayon::prelude::*;

    fn hand_dataset() -> Dataset {
        Dataset::new(
            DVector::from_vec(vec![1.0, 2.0, 0.0]),
            DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]),
            DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 1.0]),
            DVector::from_vec(vec![1.0, -1.0, 2.0]),
            0,
        )
        .unwrap()
    }

    #[test]
    fn hand_statistic_matches_scripted_evaluation() {
        let d = hand_dataset();
        let fit = npiv_fit(
            &d,
            KernelSpec::default(),
            Bandwidths::new(1.0, 1.0).unwrap(),
            WeightDensity::new(0.0, 2.0).unwrap(),
            WeightDensity::new(0.0, 2.0).unwrap(),
            LambdaPolicy::Fixed { value: 0.5 },
        )
        .unwrap();
        let s = np_statistic(&d, &fit);
        assert_relative_eq!(s, -1.0376002672662902, max_relative = 1e-12);
    }

    #[test]
    fn zero_residuals_give_zero_statistic() {
        let d = hand_dataset();
        let mut fit = npiv_fit(
            &d,
            KernelSpec::default(),
            Bandwidths::new(1.0, 1.0).unwrap(),
            WeightDensity::new(0.0, 2.0).unwrap(),
            WeightDensity::new(0.0, 2.0).unwrap(),
            LambdaPolicy::Fixed { value: 0.5 },
        )
        .unwrap();
        fit.residuals = DVector::zeros(3);
        assert_eq!(np_statistic(&d, &fit), 0.0);
    }

    #[test]
    fn statistic_is_linear_in_x() {
        let d = generate(Dgp::Sigmoid, 0.0, 80, 1, 0).unwrap();
        let z = DVector::from_column_slice(d.z().column(0).as_slice());
        let w = DVector::from_column_slice(d.w().column(0).as_slice());
        let bw = crate::kernels::silverman_bandwidths(&z, &w).unwrap();
        let (pi, tau) = default_weights(&z, &w).unwrap();
        let fit = npiv_fit(&d, KernelSpec::default(), bw, pi, tau, LambdaPolicy::Fixed { value: 0.05 })
            .unwrap();
        let s = np_statistic(&d, &fit);
        let scaled = Dataset::new(d.y().clone(), d.z().clone(), d.w().clone(), d.x() * -2.5, 0)
            .unwrap();
        assert_relative_eq!(np_statistic(&scaled, &fit), -2.5 * s, max_relative = 1e-12);
    }

    #[test]
    fn shifting_the_instrument_leaves_the_statistic_unchanged() {
        // kernel differences, recentered weights and W - Wbar are all
        // shift-invariant, so the whole pipeline is
        let d = generate(Dgp::Sigmoid, 0.3, 120, 2, 0).unwrap();
        let run = |data: &Dataset| {
            let z = DVector::from_column_slice(data.z().column(0).as_slice());
            let w = DVector::from_column_slice(data.w().column(0).as_slice());
            let bw = crate::kernels::silverman_bandwidths(&z, &w).unwrap();
            let (pi, tau) = default_weights(&z, &w).unwrap();
            let fit = npiv_fit(data, KernelSpec::default(), bw, pi, tau, LambdaPolicy::Cv { scale: 1.0 })
                .unwrap();
            np_statistic(data, &fit)
        };
        let s = run(&d);
        let shifted = Dataset::new(
            d.y().clone(),
            d.z().clone(),
            d.w().add_scalar(11.0),
            d.x().clone(),
            0,
        )
        .unwrap();
        let s2 = run(&shifted);
        assert_relative_eq!(s, s2, max_relative = 1e-10);
    }

    #[test]
    fn full_test_is_deterministic() {
        let d = generate(Dgp::Sigmoid, 0.0, 60, 3, 0).unwrap();
        let cfg = NpTestConfig {
            bootstrap_count: 40,
            seed: 5,
            ..NpTestConfig::default()
        };
        let a = np_test(&d, &cfg).unwrap();
        let b = np_test(&d, &cfg).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.p_symmetric));
    }

    #[test]
    fn bootstrap_replicates_freeze_the_original_tuning() {
        let d = generate(Dgp::Sigmoid, 0.0, 70, 4, 0).unwrap();
        let cfg = NpTestConfig {
            bootstrap_count: 1,
            seed: 9,
            ..NpTestConfig::default()
        };
        let report = np_test(&d, &cfg).unwrap();

        // replay by hand: original-sample tuning, replicate-0 indices
        let z = DVector::from_column_slice(d.z().column(0).as_slice());
        let w = DVector::from_column_slice(d.w().column(0).as_slice());
        let bw = cfg.bandwidths.resolve(&z, &w).unwrap();
        let (pi, tau) = default_weights(&z, &w).unwrap();
        let original = npiv_fit(&d, cfg.kernel, bw, pi, tau, cfg.lambda).unwrap();
        assert_relative_eq!(report.statistic, np_statistic(&d, &original), max_relative = 1e-14);

        let mut rng = stream_rng(9, domain::BOOTSTRAP, 0);
        let idx: Vec<usize> = (0..d.n()).map(|_| rng.random_range(0..d.n())).collect();
        let resampled = d.resample(&idx).unwrap();
        let refit = npiv_fit(
            &resampled,
            cfg.kernel,
            bw,
            pi,
            tau,
            LambdaPolicy::Fixed { value: original.lambda },
        )
        .unwrap();
        assert_relative_eq!(
            report.replicates[0],
            np_statistic(&resampled, &refit),
            max_relative = 1e-14
        );
    }

    #[test]
    fn statistic_is_centered_under_the_null() {
        let m = 100u64;
        let stats: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|rep| {
                let d = generate(Dgp::Sigmoid, 0.0, 100, 6, rep).unwrap();
                let z = DVector::from_column_slice(d.z().column(0).as_slice());
                let w = DVector::from_column_slice(d.w().column(0).as_slice());
                let bw = crate::kernels::silverman_bandwidths(&z, &w).unwrap();
                let (pi, tau) = default_weights(&z, &w).unwrap();
                let fit = npiv_fit(
                    &d,
                    KernelSpec::default(),
                    bw,
                    pi,
                    tau,
                    LambdaPolicy::Cv { scale: 1.0 },
                )
                .unwrap();
                np_statistic(&d, &fit)
            })
            .collect();
        let mean = stats.iter().sum::<f64>() / m as f64;
        let var = stats.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (m - 1) as f64;
        let se = (var / m as f64).sqrt();
        assert!(mean.abs() < 4.0 * se, "mean {mean} exceeds 4 SE {se}");
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let d = hand_dataset();
        let cfg = NpTestConfig {
            bootstrap_count: 0,
            ..NpTestConfig::default()
        };
        assert!(matches!(np_test(&d, &cfg), Err(Error::Config(_))));
        let cfg = NpTestConfig {
            bandwidths: BandwidthPolicy::Fixed { h_z: -1.0, h_w: 0.5 },
            ..NpTestConfig::default()
        };
        assert!(matches!(np_test(&d, &cfg), Err(Error::Config(_))));
    }

    /// Binary design: E uniform on [-1,1], X, W independent Bernoulli(1/2),
    /// Z = W·X·1{E>=0}, Y = rho·X·E when Z=0 and Y = 0 when Z=1.
    fn binary_joint(rho: f64) -> DiscreteJoint {
        // W=0 forces Z=0; given W=1, Z=1 has probability 1/4
        let prob = [[0.5, 0.375], [0.0, 0.125]];
        // E[Y|Z=0,W=1] = rho E[XE | not(X=1,E>=0)] = -rho/6
        let y_mean = [[0.0, -rho / 6.0], [0.0, 0.0]];
        DiscreteJoint { prob, y_mean }
    }

    #[test]
    fn binary_design_oracle_matches_the_exact_solution() {
        let phi = discrete_npiv_oracle(&binary_joint(0.8)).unwrap();
        assert_relative_eq!(phi[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(phi[1], -0.4, max_relative = 1e-14);
    }

    #[test]
    fn irrelevant_instrument_is_an_identification_error() {
        // Z independent of W: both conditional rows are (0.6, 0.4)
        let joint = DiscreteJoint {
            prob: [[0.3, 0.3], [0.2, 0.2]],
            y_mean: [[1.0, 1.0], [2.0, 2.0]],
        };
        assert!(matches!(
            discrete_npiv_oracle(&joint),
            Err(Error::Identification(_))
        ));
    }

    #[test]
    fn constant_outcome_solves_to_the_constant() {
        let joint = DiscreteJoint {
            prob: [[0.4, 0.1], [0.1, 0.4]],
            y_mean: [[7.0, 7.0], [7.0, 7.0]],
        };
        let phi = discrete_npiv_oracle(&joint).unwrap();
        assert_relative_eq!(phi[0], 7.0, max_relative = 1e-12);
        assert_relative_eq!(phi[1], 7.0, max_relative = 1e-12);
    }

    #[test]
    fn invalid_joint_tables_are_rejected() {
        let mut j = binary_joint(0.5);
        j.prob[0][0] = 0.9; // sum > 1
        assert!(matches!(discrete_npiv_oracle(&j), Err(Error::Invalid(_))));
        let mut j = binary_joint(0.5);
        j.y_mean[0][1] = f64::NAN;
        assert!(matches!(discrete_npiv_oracle(&j), Err(Error::Invalid(_))));
    }
}
