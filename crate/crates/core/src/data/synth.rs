//! Synthetic multi-site ROI time series with planted class structure.
//!
//! Generation:
//!
//! 1. A shared latent correlation matrix comes from a random low-rank factor
//!    model.
//! 2. Each class adds `±signal_strength/2` (fixed random sign per pair) to the
//!    correlations among the planted informative ROIs. A common ridge keeps
//!    both class templates positive definite.
//! 3. Each site mixes ROIs with `A = I + shift·E/√R` (`E` Gaussian, fixed per
//!    site), giving the site/class covariance `A·Σ·Aᵀ`. Per-ROI offsets and
//!    gains are also applied to the signals; those do not change correlations.
//! 4. Each subject optionally gets its own mixing (`subject_noise`), then
//!    frames are drawn i.i.d. from the resulting Gaussian.
//!
//! With `shift_strength = 0` every site shares the class covariances exactly.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::RoiTimeSeries;
use crate::{rng, Error, Result};

/// Extra shift for one site, overriding the global `shift_strength`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteShift {
    pub site: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_sites: usize,
    /// Subjects per class at every site.
    pub subjects_per_class: usize,
    pub n_rois: usize,
    pub n_frames: usize,
    pub window: usize,
    pub stride: usize,
    pub shift_strength: f64,
    pub site_shifts: Vec<SiteShift>,
    pub signal_strength: f64,
    pub informative_roi_count: usize,
    /// Per-subject ROI mixing magnitude.
    pub subject_noise: f64,
    /// Loadings scale of the shared factor model.
    pub base_coupling: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sites: 4,
            subjects_per_class: 20,
            n_rois: 30,
            n_frames: 48,
            window: 32,
            stride: 1,
            shift_strength: 0.3,
            site_shifts: Vec::new(),
            signal_strength: 0.3,
            informative_roi_count: 10,
            subject_noise: 0.2,
            base_coupling: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic config: {m}")));
        if self.n_sites == 0 || self.subjects_per_class == 0 || self.n_rois < 2 || self.n_frames == 0 {
            return bad("counts must be positive and n_rois >= 2");
        }
        if self.window == 0 || self.window > self.n_frames || self.stride == 0 {
            return bad("need 0 < window <= n_frames and stride > 0");
        }
        if self.informative_roi_count > self.n_rois {
            return bad("informative_roi_count exceeds n_rois");
        }
        let nonneg = [self.shift_strength, self.signal_strength, self.subject_noise, self.base_coupling];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("strengths must be finite and >= 0");
        }
        if let Some(s) = self.site_shifts.iter().find(|s| s.site >= self.n_sites || !(s.strength >= 0.0)) {
            return bad(&format!("invalid site shift for site {}", s.site));
        }
        Ok(())
    }

    pub fn site_id(&self, site: usize) -> String {
        format!("site{site}")
    }

    fn shift_for(&self, site: usize) -> f64 {
        self.site_shifts
            .iter()
            .rev()
            .find(|s| s.site == site)
            .map_or(self.shift_strength, |s| s.strength)
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub series: Vec<RoiTimeSeries>,
    /// Ground-truth planted ROIs, ascending.
    pub informative_rois: Vec<usize>,
    /// Target correlation per `[site][class]`, before subject-level mixing.
    pub site_class_corr: Vec<[Array2<f64>; 2]>,
}

const MAX_RIDGE: f64 = 1e3;

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn to_correlation(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let d: Vec<f64> = (0..cov.nrows()).map(|i| cov[(i, i)].sqrt()).collect();
    DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| {
        if i == j {
            1.0
        } else {
            cov[(i, j)] / (d[i] * d[j])
        }
    })
}

fn to_ndarray(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Cholesky factor, adding a growing ridge when needed.
fn robust_cholesky(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut ridge = 0.0;
    loop {
        let m = cov + DMatrix::identity(cov.nrows(), cov.ncols()) * ridge;
        if let Some(ch) = m.cholesky() {
            return Ok(ch.l());
        }
        ridge = if ridge == 0.0 { 1e-8 } else { ridge * 10.0 };
        if ridge > MAX_RIDGE {
            return Err(Error::NotPositiveDefinite(ridge));
        }
    }
}

/// Class templates sharing one ridge, renormalized to unit diagonal.
fn class_templates(base: &DMatrix<f64>, pattern: &DMatrix<f64>, signal: f64) -> Result<[DMatrix<f64>; 2]> {
    let r = base.nrows();
    let raw = [base - pattern * (signal / 2.0), base + pattern * (signal / 2.0)];
    let mut ridge = 0.0;
    loop {
        let shifted: Vec<DMatrix<f64>> = raw.iter().map(|m| m + DMatrix::identity(r, r) * ridge).collect();
        if shifted.iter().all(|m| m.clone().cholesky().is_some()) {
            let scale = 1.0 / (1.0 + ridge);
            return Ok([shifted[0].clone() * scale, shifted[1].clone() * scale]);
        }
        ridge = if ridge == 0.0 { 1e-3 } else { ridge * 2.0 };
        if ridge > MAX_RIDGE {
            return Err(Error::NotPositiveDefinite(ridge));
        }
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let r = cfg.n_rois;
    let mut template_rng = rng::stream(cfg.seed, "synth/template");

    let factors = (r / 10).max(2);
    let loadings = gaussian_matrix(r, factors, &mut template_rng) * cfg.base_coupling;
    let base = to_correlation(&(&loadings * loadings.transpose() + DMatrix::identity(r, r)));

    let mut informative: Vec<usize> = sample(&mut template_rng, r, cfg.informative_roi_count).into_vec();
    informative.sort_unstable();
    let mut pattern = DMatrix::zeros(r, r);
    for (a, &i) in informative.iter().enumerate() {
        for &j in &informative[a + 1..] {
            let sign = if template_rng.random::<bool>() { 1.0 } else { -1.0 };
            pattern[(i, j)] = sign;
            pattern[(j, i)] = sign;
        }
    }
    let classes = class_templates(&base, &pattern, cfg.signal_strength)?;

    let mut series = Vec::new();
    let mut site_class_corr = Vec::new();
    for site in 0..cfg.n_sites {
        let site_id = cfg.site_id(site);
        let shift = cfg.shift_for(site);
        let mut site_rng = rng::stream(cfg.seed, &format!("synth/site/{site}"));
        let mixing = DMatrix::identity(r, r) + gaussian_matrix(r, r, &mut site_rng) * (shift / (r as f64).sqrt());
        let offsets: Vec<f64> = (0..r)
            .map(|_| shift * Distribution::<f64>::sample(&StandardNormal, &mut site_rng))
            .collect();
        let gains: Vec<f64> = (0..r)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut site_rng);
                (0.25 * shift * z).exp()
            })
            .collect();

        let site_corr: [DMatrix<f64>; 2] = [0, 1].map(|c| to_correlation(&(&mixing * &classes[c] * mixing.transpose())));
        site_class_corr.push([to_ndarray(&site_corr[0]), to_ndarray(&site_corr[1])]);

        for (class, corr) in site_corr.iter().enumerate() {
            for idx in 0..cfg.subjects_per_class {
                let subject_id = format!("{site_id}-c{class}-{idx:03}");
                let mut subj_rng = rng::stream(cfg.seed, &format!("synth/subject/{subject_id}"));
                let cov = if cfg.subject_noise > 0.0 {
                    let b = DMatrix::identity(r, r)
                        + gaussian_matrix(r, r, &mut subj_rng) * (cfg.subject_noise / (r as f64).sqrt());
                    &b * corr * b.transpose()
                } else {
                    corr.clone()
                };
                let chol = robust_cholesky(&cov)?;
                let z = gaussian_matrix(r, cfg.n_frames, &mut subj_rng);
                let x = chol * z; // ROIs × frames
                let frames = Array2::from_shape_fn((cfg.n_frames, r), |(t, i)| offsets[i] + gains[i] * x[(i, t)]);
                series.push(RoiTimeSeries {
                    subject_id,
                    site_id: site_id.clone(),
                    series: frames,
                    label: class,
                });
            }
        }
    }
    Ok(SynthDataset {
        series,
        informative_rois: informative,
        site_class_corr,
    })
}
