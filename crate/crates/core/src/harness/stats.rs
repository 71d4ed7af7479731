//! Summary statistics and Welch's unequal-variance t-test.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (denominator `n − 1`).
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    sample_variance(xs).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WelchResult {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom (`NaN` when both variances vanish).
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Welch's t-test of `mean(a) − mean(b)`.
///
/// Both samples constant: equal means give `t = 0, p = 1`; different means
/// give `t = ±∞, p = 0`.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("welch_t needs at least two values per sample".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("welch_t inputs must be finite".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let diff = mean(a) - mean(b);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if diff == 0.0 {
            WelchResult { t: 0.0, df: f64::NAN, p: 1.0 }
        } else {
            WelchResult {
                t: diff.signum() * f64::INFINITY,
                df: f64::NAN,
                p: 0.0,
            }
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchResult { t, df, p })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_lists_give_zero_t_and_unit_p() {
        let a = [0.6, 0.7, 0.8];
        let r = welch_t(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-12);
        let c = welch_t(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!((c.t, c.p), (0.0, 1.0));
    }

    #[test]
    fn separated_lists_are_significant() {
        let a = [0.9, 0.9001, 0.8999];
        let b = [0.1, 0.1001, 0.0999];
        assert!(welch_t(&a, &b).unwrap().p < 1e-3);
    }

    #[test]
    fn swapping_negates_t_and_keeps_p() {
        let a = [0.6, 0.65, 0.7, 0.62, 0.68];
        let b = [0.5, 0.55, 0.52, 0.48, 0.51];
        let (x, y) = (welch_t(&a, &b).unwrap(), welch_t(&b, &a).unwrap());
        assert_eq!(x.t, -y.t);
        assert_eq!(x.p, y.p);
    }

    #[test]
    fn rejects_short_samples() {
        assert!(welch_t(&[1.0], &[1.0, 2.0]).is_err());
    }
}
