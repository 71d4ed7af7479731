//! Turning a featurized dataset and a fold split into per-site training
//! matrices and normalized test subjects.

use ndarray::{concatenate, Array2, Axis};

use crate::data::{zscore_fit, FeatureDataset, FoldSplit, NormStats, SubjectFeatures};
use crate::nn::Batch;
use crate::{Error, Result};

/// Stacked window features with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindows {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LabeledWindows {
    pub fn from_subjects<'a>(subjects: impl IntoIterator<Item = &'a SubjectFeatures>) -> Result<Self> {
        let subjects: Vec<&SubjectFeatures> = subjects.into_iter().collect();
        if subjects.is_empty() {
            return Err(Error::Empty("no subjects to stack".into()));
        }
        let views: Vec<_> = subjects.iter().map(|s| s.windows.view()).collect();
        let inputs = concatenate(Axis(0), &views).map_err(|_| Error::Dimension {
            context: "stacking subject windows",
            expected: subjects[0].windows.ncols(),
            actual: subjects.iter().map(|s| s.windows.ncols()).max().unwrap_or(0),
        })?;
        let labels = subjects
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.label, s.windows.nrows()))
            .collect();
        Ok(Self { inputs, labels })
    }

    /// Row-wise concatenation, in argument order.
    pub fn concat(parts: &[&LabeledWindows]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Empty("nothing to concatenate".into()))?;
        let views: Vec<_> = parts.iter().map(|p| p.inputs.view()).collect();
        let inputs = concatenate(Axis(0), &views).map_err(|_| Error::Dimension {
            context: "concatenating site windows",
            expected: first.inputs.ncols(),
            actual: parts.iter().map(|p| p.inputs.ncols()).max().unwrap_or(0),
        })?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        Batch::new(
            self.inputs.select(Axis(0), rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }
}

/// One site's share of a fold: normalized training windows and test subjects.
#[derive(Debug, Clone)]
pub struct SiteFold {
    pub site_id: String,
    pub train: LabeledWindows,
    pub test: Vec<SubjectFeatures>,
}

/// Per-site z-score statistics of the fold's training subjects.
pub fn fold_stats(dataset: &FeatureDataset, split: &FoldSplit, fold: usize) -> Result<NormStats> {
    zscore_fit(
        dataset
            .subjects
            .iter()
            .filter(|s| !split.is_test(&s.subject_id, fold))
            .map(|s| (s.site_id.as_str(), s.windows.view())),
    )
}

fn normalized(subject: &SubjectFeatures, stats: &NormStats) -> Result<SubjectFeatures> {
    let mut out = subject.clone();
    stats.apply(&subject.site_id, &mut out.windows)?;
    Ok(out)
}

/// Splits every site into training windows and test subjects for `fold`.
/// Both sides are normalized with the site's training-split statistics.
pub fn prepare_fold(dataset: &FeatureDataset, split: &FoldSplit, fold: usize) -> Result<Vec<SiteFold>> {
    if fold >= split.k {
        return Err(Error::InvalidArgument(format!("fold {fold} out of range for k = {}", split.k)));
    }
    let stats = fold_stats(dataset, split, fold)?;
    dataset
        .sites()
        .into_iter()
        .map(|site| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for s in dataset.site_subjects(&site) {
                let n = normalized(s, &stats)?;
                if split.is_test(&s.subject_id, fold) {
                    test.push(n);
                } else {
                    train.push(n);
                }
            }
            if test.is_empty() {
                return Err(Error::Empty(format!("site {site} has no test subjects in fold {fold}")));
            }
            Ok(SiteFold {
                train: LabeledWindows::from_subjects(&train)?,
                site_id: site,
                test,
            })
        })
        .collect()
}

/// All of one site's windows, normalized with that site's full-data statistics.
pub fn prepare_full_site(dataset: &FeatureDataset, site: &str) -> Result<LabeledWindows> {
    let stats = zscore_fit(dataset.site_subjects(site).map(|s| (s.site_id.as_str(), s.windows.view())))?;
    let subjects = dataset
        .site_subjects(site)
        .map(|s| normalized(s, &stats))
        .collect::<Result<Vec<_>>>()?;
    if subjects.is_empty() {
        return Err(Error::InvalidArgument(format!("unknown site `{site}`")));
    }
    LabeledWindows::from_subjects(&subjects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{subject_kfold, synth_generate, SynthConfig};

    fn dataset() -> FeatureDataset {
        let cfg = SynthConfig {
            n_sites: 2,
            subjects_per_class: 5,
            n_rois: 6,
            n_frames: 36,
            informative_roi_count: 2,
            ..Default::default()
        };
        let d = synth_generate(&cfg).unwrap();
        FeatureDataset::from_series(&d.series, 32, 1).unwrap()
    }

    #[test]
    fn fold_partitions_subjects_and_windows() {
        let ds = dataset();
        let split = subject_kfold(&ds.keys(), 5, 1).unwrap();
        let sites = prepare_fold(&ds, &split, 0).unwrap();
        assert_eq!(sites.len(), 2);
        for s in &sites {
            assert_eq!(s.test.len(), 2);
            assert_eq!(s.train.len(), 8 * 5);
            assert_eq!(s.train.feature_dim(), 15);
            // training columns are standardized with their own statistics
            for col in s.train.inputs.columns() {
                assert!(col.mean().unwrap().abs() < 1e-9);
            }
        }
        assert!(prepare_fold(&ds, &split, 5).is_err());
    }

    #[test]
    fn full_site_and_unknown_site() {
        let ds = dataset();
        assert_eq!(prepare_full_site(&ds, "site1").unwrap().len(), 10 * 5);
        assert!(prepare_full_site(&ds, "nowhere").is_err());
    }
}
