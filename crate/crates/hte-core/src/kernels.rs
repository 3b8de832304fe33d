//! Kernel functions, rule-of-thumb bandwidths and weight densities.

use crate::error::{Error, Result};
use nalgebra::DVector;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Epanechnikov,
}

/// A second-order kernel. `order` is carried for config echo; only order 2 is
/// implemented and anything else is rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub order: u32,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            family: KernelFamily::Gaussian,
            order: 2,
        }
    }
}

impl KernelSpec {
    pub fn new(family: KernelFamily, order: u32) -> Result<Self> {
        if order != 2 {
            return Err(Error::Config(format!(
                "only second-order kernels are supported, got order {order}"
            )));
        }
        Ok(Self { family, order })
    }
}

pub fn kernel_eval(spec: KernelSpec, u: f64) -> f64 {
    match spec.family {
        KernelFamily::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        KernelFamily::Epanechnikov => {
            if u.abs() < 1.0 {
                0.75 * (1.0 - u * u)
            } else {
                0.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bandwidths {
    pub h_z: f64,
    pub h_w: f64,
}

impl Bandwidths {
    pub fn new(h_z: f64, h_w: f64) -> Result<Self> {
        if !(h_z.is_finite() && h_z > 0.0 && h_w.is_finite() && h_w > 0.0) {
            return Err(Error::Config(format!(
                "bandwidths must be positive and finite, got h_z={h_z}, h_w={h_w}"
            )));
        }
        Ok(Self { h_z, h_w })
    }

    /// Uniform rescaling, used to sweep the bandwidth constant in simulations.
    pub fn scaled(self, c: f64) -> Result<Self> {
        Self::new(c * self.h_z, c * self.h_w)
    }
}

fn sample_mean(v: &DVector<f64>) -> f64 {
    v.sum() / v.len() as f64
}

/// Unbiased sample variance (n-1 denominator).
fn sample_var(v: &DVector<f64>) -> f64 {
    let n = v.len();
    assert!(n >= 2, "variance needs at least two observations");
    let m = sample_mean(v);
    v.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Rule-of-thumb bandwidth sd * n^(-1/5) for each smoothing variable.
pub fn silverman_bandwidths(z: &DVector<f64>, w: &DVector<f64>) -> Result<Bandwidths> {
    if z.len() != w.len() || z.len() < 2 {
        return Err(Error::Invalid(format!(
            "bandwidth selection needs matched samples of at least 2, got {} and {}",
            z.len(),
            w.len()
        )));
    }
    let n_pow = (z.len() as f64).powf(-0.2);
    let (sz, sw) = (sample_var(z).sqrt(), sample_var(w).sqrt());
    if sz == 0.0 || sw == 0.0 {
        return Err(Error::Degenerate(
            "constant smoothing variable: rule-of-thumb bandwidth is zero".into(),
        ));
    }
    Bandwidths::new(sz * n_pow, sw * n_pow)
}

/// Normal density used to downweight the kernel matrices in regions where the
/// smoothing variable is scarce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightDensity {
    pub mean: f64,
    pub variance: f64,
}

impl WeightDensity {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !(mean.is_finite() && variance.is_finite() && variance > 0.0) {
            return Err(Error::Config(format!(
                "weight density needs finite mean and positive variance, got ({mean}, {variance})"
            )));
        }
        Ok(Self { mean, variance })
    }

    pub fn eval(&self, v: f64) -> f64 {
        let d = v - self.mean;
        (-0.5 * d * d / self.variance).exp()
            / (2.0 * std::f64::consts::PI * self.variance).sqrt()
    }
}

/// Default weights: normal with the sample mean and twice the sample variance
/// of each smoothing variable. The inflated variance keeps the density (and
/// hence the kernel matrices) bounded on the observed support.
pub fn default_weights(z: &DVector<f64>, w: &DVector<f64>) -> Result<(WeightDensity, WeightDensity)> {
    if z.len() < 2 || w.len() < 2 {
        return Err(Error::Invalid("weight defaults need at least 2 observations".into()));
    }
    Ok((
        WeightDensity::new(sample_mean(z), 2.0 * sample_var(z))?,
        WeightDensity::new(sample_mean(w), 2.0 * sample_var(w))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gaussian_kernel_matches_reference_values() {
        let g = KernelSpec::default();
        assert_relative_eq!(kernel_eval(g, 0.0), 0.39894228040143268, max_relative = 1e-15);
        assert_relative_eq!(kernel_eval(g, 1.5), 0.12951759566589173, max_relative = 1e-15);
        assert_relative_eq!(kernel_eval(g, -1.5), kernel_eval(g, 1.5), max_relative = 1e-15);
    }

    #[test]
    fn epanechnikov_kernel_matches_reference_values() {
        let e = KernelSpec::new(KernelFamily::Epanechnikov, 2).unwrap();
        assert_eq!(kernel_eval(e, 0.0), 0.75);
        assert_eq!(kernel_eval(e, 0.5), 0.5625);
        assert_eq!(kernel_eval(e, 1.0), 0.0);
        assert_eq!(kernel_eval(e, -1.2), 0.0);
    }

    #[test]
    fn kernels_integrate_to_one() {
        // Simpson's rule on a wide grid.
        let simpson = |spec: KernelSpec, a: f64, b: f64, m: usize| -> f64 {
            let h = (b - a) / m as f64;
            let mut acc = kernel_eval(spec, a) + kernel_eval(spec, b);
            for i in 1..m {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * kernel_eval(spec, a + i as f64 * h);
            }
            acc * h / 3.0
        };
        assert_relative_eq!(simpson(KernelSpec::default(), -8.0, 8.0, 4000), 1.0, epsilon = 1e-10);
        let e = KernelSpec::new(KernelFamily::Epanechnikov, 2).unwrap();
        assert_relative_eq!(simpson(e, -1.0, 1.0, 4000), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn higher_order_kernels_are_rejected() {
        assert!(KernelSpec::new(KernelFamily::Gaussian, 4).is_err());
        assert!(KernelSpec::new(KernelFamily::Gaussian, 0).is_err());
    }

    #[test]
    fn rule_of_thumb_bandwidth_matches_hand_value() {
        // (-1, 0, 1) has unbiased sd exactly 1, so h = 3^(-1/5) on both sides.
        let v = DVector::from_vec(vec![-1.0, 0.0, 1.0]);
        let b = silverman_bandwidths(&v, &v).unwrap();
        assert_relative_eq!(b.h_z, 0.80274156176023068, max_relative = 1e-15);
        assert_relative_eq!(b.h_w, b.h_z, max_relative = 1e-15);
    }

    #[test]
    fn constant_sample_has_no_bandwidth() {
        let c = DVector::from_element(5, 2.0);
        let v = DVector::from_vec(vec![-1.0, 0.0, 1.0, 2.0, 3.0]);
        assert!(matches!(
            silverman_bandwidths(&c, &v),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn weight_density_matches_reference_values() {
        let d = WeightDensity::new(0.0, 2.0).unwrap();
        assert_relative_eq!(d.eval(0.0), 0.28209479177387814, max_relative = 1e-15);
        let d = WeightDensity::new(1.0, 2.0).unwrap();
        assert_relative_eq!(d.eval(2.5), 0.16073276729880183, max_relative = 1e-15);
    }

    #[test]
    fn default_weights_use_mean_and_doubled_variance() {
        // (-1, 0, 1): mean 0, unbiased variance 1; (0, 1, 2): mean 1, variance 1.
        let w = DVector::from_vec(vec![-1.0, 0.0, 1.0]);
        let z = DVector::from_vec(vec![0.0, 1.0, 2.0]);
        let (pi, tau) = default_weights(&z, &w).unwrap();
        assert_relative_eq!(pi.mean, 1.0, max_relative = 1e-15);
        assert_relative_eq!(pi.variance, 2.0, max_relative = 1e-15);
        assert_relative_eq!(tau.mean, 0.0, epsilon = 1e-15);
        assert_relative_eq!(tau.variance, 2.0, max_relative = 1e-15);
    }

    #[test]
    fn scaled_bandwidths_multiply_both_sides() {
        let b = Bandwidths::new(0.5, 0.25).unwrap().scaled(2.0).unwrap();
        assert_eq!((b.h_z, b.h_w), (1.0, 0.5));
        assert!(Bandwidths::new(0.5, 0.25).unwrap().scaled(-1.0).is_err());
    }
}
