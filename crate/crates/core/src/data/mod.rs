//! Connectivity features from ROI time series, site-wise normalization,
//! subject-wise folds, CSV ingestion and synthetic multi-site data.

mod connectivity;
mod folds;
pub mod io;
mod normalize;
mod synth;

use ndarray::Array2;

pub use connectivity::{
    connectivity_vector, feature_len, fisher_z, flatten_upper, pearson_correlation, roi_count_for_len,
    sliding_windows, unflatten_upper, upper_index, FISHER_CLAMP,
};
pub use folds::{subject_kfold, FoldSplit, SubjectKey};
pub use normalize::{zscore_fit, NormStats, SiteStats, STD_FLOOR};
pub use synth::{synth_generate, SiteShift, SynthConfig, SynthDataset};

use crate::Result;

pub const HC: usize = 0;
pub const ASD: usize = 1;

/// One subject's ROI signals: `series` is frames × ROIs.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTimeSeries {
    pub subject_id: String,
    pub site_id: String,
    pub series: Array2<f64>,
    pub label: usize,
}

impl RoiTimeSeries {
    pub fn frames(&self) -> usize {
        self.series.nrows()
    }

    pub fn rois(&self) -> usize {
        self.series.ncols()
    }
}

/// One flattened Fisher-z connectivity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityFeature {
    pub subject_id: String,
    pub site_id: String,
    pub label: usize,
    pub vector: Vec<f64>,
}

/// All window features of one subject, one row per window.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectFeatures {
    pub subject_id: String,
    pub site_id: String,
    pub label: usize,
    pub windows: Array2<f64>,
}

impl SubjectFeatures {
    pub fn key(&self) -> SubjectKey {
        SubjectKey {
            subject_id: self.subject_id.clone(),
            site_id: self.site_id.clone(),
            label: self.label,
        }
    }

    pub fn to_features(&self) -> Vec<ConnectivityFeature> {
        self.windows
            .rows()
            .into_iter()
            .map(|row| ConnectivityFeature {
                subject_id: self.subject_id.clone(),
                site_id: self.site_id.clone(),
                label: self.label,
                vector: row.to_vec(),
            })
            .collect()
    }
}

/// Windows → Pearson → Fisher z → upper triangle, for every window of a subject.
pub fn featurize(series: &RoiTimeSeries, window: usize, stride: usize) -> Result<SubjectFeatures> {
    let windows = sliding_windows(&series.series, window, stride)?;
    let d = feature_len(series.rois());
    let mut out = Array2::zeros((windows.len(), d));
    for (mut row, w) in out.rows_mut().into_iter().zip(&windows) {
        let v = connectivity_vector(w.view())?;
        row.assign(&ndarray::ArrayView1::from(&v));
    }
    Ok(SubjectFeatures {
        subject_id: series.subject_id.clone(),
        site_id: series.site_id.clone(),
        label: series.label,
        windows: out,
    })
}

/// A featurized multi-site dataset.
#[derive(Debug, Clone)]
pub struct FeatureDataset {
    pub subjects: Vec<SubjectFeatures>,
    pub n_rois: usize,
}

impl FeatureDataset {
    pub fn from_series(series: &[RoiTimeSeries], window: usize, stride: usize) -> Result<Self> {
        let n_rois = series.first().map(RoiTimeSeries::rois).unwrap_or(0);
        if let Some(bad) = series.iter().find(|s| s.rois() != n_rois) {
            return Err(crate::Error::Dimension {
                context: "ROI count within dataset",
                expected: n_rois,
                actual: bad.rois(),
            });
        }
        let subjects = series
            .iter()
            .map(|s| featurize(s, window, stride))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { subjects, n_rois })
    }

    pub fn feature_dim(&self) -> usize {
        feature_len(self.n_rois)
    }

    /// Site ids in order of first appearance.
    pub fn sites(&self) -> Vec<String> {
        let mut sites: Vec<String> = Vec::new();
        for s in &self.subjects {
            if !sites.contains(&s.site_id) {
                sites.push(s.site_id.clone());
            }
        }
        sites
    }

    pub fn keys(&self) -> Vec<SubjectKey> {
        self.subjects.iter().map(SubjectFeatures::key).collect()
    }

    pub fn site_subjects<'a>(&'a self, site: &'a str) -> impl Iterator<Item = &'a SubjectFeatures> + 'a {
        self.subjects.iter().filter(move |s| s.site_id == site)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pipeline_shapes_and_finiteness() {
        let mut r = crate::rng::stream(3, "pipe");
        let series = RoiTimeSeries {
            subject_id: "s".into(),
            site_id: "a".into(),
            series: Array2::from_shape_fn((40, 12), |_| r.random_range(-1.0..1.0)),
            label: ASD,
        };
        let f = featurize(&series, 32, 1).unwrap();
        assert_eq!(f.windows.dim(), (9, 66));
        assert!(f.windows.iter().all(|v| v.is_finite()));
        assert_eq!(f.to_features().len(), 9);
    }
}
