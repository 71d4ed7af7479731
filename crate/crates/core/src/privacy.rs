//! Randomization mechanisms for shared tensors and their nominal privacy
//! parameters.
//!
//! The noise scale is relative: with `σ` the population standard deviation of
//! the tensor being shared, Gaussian noise has standard deviation `α·σ` and
//! Laplace noise has scale `α·σ/√2`, so both mechanisms add noise of the same
//! standard deviation for a given `α`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    #[default]
    None,
    Gaussian,
    Laplace,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::None => "none",
            Mechanism::Gaussian => "gaussian",
            Mechanism::Laplace => "laplace",
        })
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Mechanism::None),
            "gaussian" => Ok(Mechanism::Gaussian),
            "laplace" => Ok(Mechanism::Laplace),
            other => Err(Error::InvalidArgument(format!("unknown noise mechanism `{other}`"))),
        }
    }
}

/// Which mechanism to apply and at what relative level `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub mechanism: Mechanism,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            mechanism: Mechanism::None,
            alpha: 0.0,
            seed: 0,
        }
    }

    pub fn gaussian(alpha: f64) -> Self {
        Self {
            mechanism: Mechanism::Gaussian,
            alpha,
            seed: 0,
        }
    }

    pub fn laplace(alpha: f64) -> Self {
        Self {
            mechanism: Mechanism::Laplace,
            alpha,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise alpha {} must be finite and >= 0", self.alpha)));
        }
        Ok(())
    }

    /// `true` when shared tensors are actually randomized.
    pub fn is_active(&self) -> bool {
        self.mechanism != Mechanism::None && self.alpha > 0.0
    }
}

/// Population standard deviation; exactly 0 for a constant tensor.
pub fn population_std(values: &[f64]) -> f64 {
    if values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Inverse CDF of the zero-centred Laplace distribution with scale `b`.
pub fn laplace_inverse_cdf(u: f64, b: f64) -> f64 {
    let p = u - 0.5;
    if p == 0.0 {
        return 0.0;
    }
    -b * p.signum() * (1.0 - 2.0 * p.abs()).ln()
}

/// One draw from Laplace(0, b), density `exp(-|x|/b) / 2b`, by inverse CDF.
pub fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, b: f64) -> f64 {
    loop {
        let u: f64 = rng.random();
        // u = 0 maps to -inf
        if u > 0.0 {
            return laplace_inverse_cdf(u, b);
        }
    }
}

/// Adds mechanism noise to `tensor` in place, scaled by the tensor's own
/// standard deviation. A constant tensor (σ = 0) or `alpha = 0` is left
/// untouched. Returns the noise standard deviation that was applied.
pub fn perturb_in_place<R: Rng + ?Sized>(tensor: &mut [f64], spec: &NoiseSpec, rng: &mut R) -> f64 {
    if !spec.is_active() {
        return 0.0;
    }
    let sigma = population_std(tensor);
    let std = spec.alpha * sigma;
    if std == 0.0 {
        return 0.0;
    }
    match spec.mechanism {
        Mechanism::None => {}
        Mechanism::Gaussian => {
            for v in tensor.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += std * z;
            }
        }
        Mechanism::Laplace => {
            let b = std / std::f64::consts::SQRT_2;
            for v in tensor.iter_mut() {
                *v += sample_laplace(rng, b);
            }
        }
    }
    std
}

/// `w + M(w)`: a noised copy of `tensor`.
pub fn perturb_tensor<R: Rng + ?Sized>(tensor: &[f64], spec: &NoiseSpec, rng: &mut R) -> Vec<f64> {
    let mut out = tensor.to_vec();
    perturb_in_place(&mut out, spec, rng);
    out
}

/// Nominal (ε, δ) for a mechanism with sensitivity `s_h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: f64,
    /// `false` when the Gaussian bound is used outside `ε < 1`.
    pub in_regime: bool,
}

/// Smallest ε for which Gaussian noise of standard deviation `sigma_noise`
/// gives (ε, δ)-privacy under the classical bound
/// `ε = sqrt(2·ln(1.25/δ)) / σ'`, where `σ' = sigma_noise / s_h`
/// (equivalently `δ ≥ (5/4)·exp(-(σ'ε)²/2)`). The bound is only proven for
/// `ε < 1`; larger values are flagged via `in_regime = false`.
pub fn gaussian_budget(sigma_noise: f64, delta: f64, sensitivity: f64) -> Result<PrivacyBudget> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta {delta} must lie in (0, 1)")));
    }
    if !(sigma_noise > 0.0 && sensitivity > 0.0) {
        return Err(Error::InvalidArgument("noise scale and sensitivity must be positive".into()));
    }
    let sigma = sigma_noise / sensitivity;
    let epsilon = (2.0 * (5.0 / (4.0 * delta)).ln()).sqrt() / sigma;
    Ok(PrivacyBudget {
        epsilon,
        delta,
        sensitivity,
        in_regime: epsilon < 1.0,
    })
}

/// Laplace mechanism with scale `b` is (s_h / b, 0)-private.
pub fn laplace_budget(scale_b: f64, sensitivity: f64) -> Result<PrivacyBudget> {
    if !(scale_b > 0.0 && sensitivity > 0.0) {
        return Err(Error::InvalidArgument("Laplace scale and sensitivity must be positive".into()));
    }
    Ok(PrivacyBudget {
        epsilon: sensitivity / scale_b,
        delta: 0.0,
        sensitivity,
        in_regime: true,
    })
}

/// Nominal budget of a relative-noise spec applied to a tensor whose standard
/// deviation is `weight_std`. `None` when no noise is applied.
pub fn budget_for(spec: &NoiseSpec, weight_std: f64, delta: f64, sensitivity: f64) -> Result<Option<PrivacyBudget>> {
    let std = spec.alpha * weight_std;
    if !spec.is_active() || std == 0.0 {
        return Ok(None);
    }
    match spec.mechanism {
        Mechanism::None => Ok(None),
        Mechanism::Gaussian => gaussian_budget(std, delta, sensitivity).map(Some),
        Mechanism::Laplace => laplace_budget(std / std::f64::consts::SQRT_2, sensitivity).map(Some),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn moments(values: &[f64]) -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn zero_alpha_and_constant_tensor_are_identity() {
        let mut r = rng::stream(1, "p");
        let t: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        for spec in [NoiseSpec::gaussian(0.0), NoiseSpec::laplace(0.0), NoiseSpec::none()] {
            assert_eq!(perturb_tensor(&t, &spec, &mut r), t);
        }
        let c = vec![0.7; 50];
        for spec in [NoiseSpec::gaussian(0.5), NoiseSpec::laplace(0.5)] {
            assert_eq!(perturb_tensor(&c, &spec, &mut r), c);
        }
    }

    #[test]
    fn perturbation_is_deterministic_given_rng_state() {
        let t: Vec<f64> = (0..64).map(|i| i as f64 * 0.1).collect();
        let spec = NoiseSpec::laplace(0.2);
        let a = perturb_tensor(&t, &spec, &mut rng::stream(4, "d"));
        let b = perturb_tensor(&t, &spec, &mut rng::stream(4, "d"));
        assert_eq!(a, b);
        assert_eq!(a.len(), t.len());
    }

    #[test]
    fn laplace_inverse_cdf_midpoint_and_symmetry() {
        assert_eq!(laplace_inverse_cdf(0.5, 2.0), 0.0);
        let x = laplace_inverse_cdf(0.8, 1.5);
        assert!((x + laplace_inverse_cdf(0.2, 1.5)).abs() < 1e-12);
        // CDF(x) = 1 - exp(-x/b)/2 for x > 0
        assert!((1.0 - 0.5 * (-x / 1.5).exp() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn laplace_moments() {
        let b = 0.7;
        let mut r = rng::stream(2, "lap");
        let mut draws: Vec<f64> = (0..1_000_000).map(|_| sample_laplace(&mut r, b)).collect();
        let (mean, var) = moments(&draws);
        assert!((var / (2.0 * b * b) - 1.0).abs() < 0.02, "var {var}");
        // mean within 3 standard errors
        assert!(mean.abs() < 3.0 * (2.0 * b * b / 1e6f64).sqrt());
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = 0.5 * (draws[499_999] + draws[500_000]);
        assert!(median.abs() < 0.01 * b);
    }

    #[test]
    fn gaussian_budget_closed_form() {
        let delta: f64 = 1e-5;
        let boundary = (2.0 * (5.0 / (4.0 * delta)).ln()).sqrt();
        let at = gaussian_budget(boundary, delta, 1.0).unwrap();
        assert!((at.epsilon - 1.0).abs() < 1e-12);
        assert!(!at.in_regime);

        let sigma = 3.0;
        let b = gaussian_budget(sigma, 0.8, 1.0).unwrap();
        assert!((b.epsilon - (2.0 * 1.5625f64.ln()).sqrt() / sigma).abs() < 1e-15);
        assert!(b.in_regime);

        let doubled = gaussian_budget(2.0 * sigma, 0.8, 1.0).unwrap();
        assert!((doubled.epsilon * 2.0 - b.epsilon).abs() < 1e-15);
        // sensitivity rescales sigma'
        let scaled = gaussian_budget(2.0 * sigma, 0.8, 2.0).unwrap();
        assert!((scaled.epsilon - b.epsilon).abs() < 1e-15);
    }

    #[test]
    fn gaussian_budget_satisfies_condition_by_bisection() {
        // numeric root of δ = 1.25·exp(-(σε)²/2) over ε
        let (sigma, delta) = (2.5, 0.01);
        let f = |e: f64| 1.25 * (-(sigma * e).powi(2) / 2.0).exp() - delta;
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let eps = gaussian_budget(sigma, delta, 1.0).unwrap().epsilon;
        assert!((eps - lo).abs() < 1e-12);
    }

    #[test]
    fn gaussian_budget_rejects_bad_delta() {
        assert!(gaussian_budget(1.0, 0.0, 1.0).is_err());
        assert!(gaussian_budget(1.0, -0.1, 1.0).is_err());
    }

    #[test]
    fn laplace_budget_relations() {
        assert_eq!(laplace_budget(1.0, 1.0).unwrap().epsilon, 1.0);
        assert_eq!(laplace_budget(0.5, 1.0).unwrap().epsilon, 2.0);
        assert_eq!(laplace_budget(0.5, 1.0).unwrap().delta, 0.0);
        for eps in [0.01, 0.3, 1.0, 7.5] {
            let b = 1.0 / eps;
            assert!((laplace_budget(b, 1.0).unwrap().epsilon - eps).abs() < 1e-12);
        }
    }

    #[test]
    fn mechanism_names_parse() {
        for m in [Mechanism::None, Mechanism::Gaussian, Mechanism::Laplace] {
            assert_eq!(m.to_string().parse::<Mechanism>().unwrap(), m);
        }
        assert!("uniform".parse::<Mechanism>().is_err());
    }
}
