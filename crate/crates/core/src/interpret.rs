//! Gradient saliency over connectivity features, folded back to ROI scores.
//!
//! For a window `x` and class `c`, the saliency is `ReLU(∂y^c/∂x)` where
//! `y^c` is the pre-softmax score and ReLU layers use the guided rule. Edge
//! saliencies are unflattened to a symmetric ROI × ROI matrix whose column
//! sums, divided by their maximum, give per-ROI importance scores.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{feature_len, unflatten_upper};
use crate::nn::{BackwardFrom, Mlp, ReluRule};
use crate::{Error, Result};

/// Backward rule used for saliency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaliencyMode {
    #[default]
    Guided,
    /// The exact input gradient.
    Plain,
}

impl SaliencyMode {
    fn rule(self) -> ReluRule {
        match self {
            SaliencyMode::Guided => ReluRule::Guided,
            SaliencyMode::Plain => ReluRule::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyVector {
    pub values: Vec<f64>,
    pub class_id: usize,
    pub subject_id: String,
    pub site_id: String,
}

/// Backward signal of the pre-softmax score of `classes[i]` with respect to
/// row `i` of `inputs`, before the final ReLU. Eval mode throughout.
pub fn input_gradient(model: &Mlp, inputs: &Array2<f64>, classes: &[usize], mode: SaliencyMode) -> Result<Array2<f64>> {
    if classes.len() != inputs.nrows() {
        return Err(Error::Dimension {
            context: "saliency classes",
            expected: inputs.nrows(),
            actual: classes.len(),
        });
    }
    let out = model.output_dim();
    if let Some(&c) = classes.iter().find(|&&c| c >= out) {
        return Err(Error::LabelOutOfRange { label: c, classes: out });
    }
    let (_, cache) = model.forward_eval_cached(inputs)?;
    let mut seed = Array2::zeros((inputs.nrows(), out));
    for (i, &c) in classes.iter().enumerate() {
        seed[[i, c]] = 1.0;
    }
    Ok(model.backward(&cache, &seed, BackwardFrom::Logits, mode.rule())?.input_grad)
}

/// Row-wise saliency, `ReLU` of [`input_gradient`].
pub fn saliency_rows(model: &Mlp, inputs: &Array2<f64>, classes: &[usize], mode: SaliencyMode) -> Result<Array2<f64>> {
    Ok(input_gradient(model, inputs, classes, mode)?.mapv(|v| v.max(0.0)))
}

/// Guided saliency of one window toward class `class`.
pub fn guided_gradient(model: &Mlp, x: &[f64], class: usize) -> Result<Vec<f64>> {
    let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("one row");
    Ok(saliency_rows(model, &row, &[class], SaliencyMode::Guided)?.into_raw_vec_and_offset().0)
}

/// Symmetric matrix with zero diagonal whose upper triangle is `g`.
pub fn build_grad_matrix(g: &[f64], rois: usize) -> Result<Array2<f64>> {
    if g.len() != feature_len(rois) {
        return Err(Error::Dimension {
            context: "saliency length",
            expected: feature_len(rois),
            actual: g.len(),
        });
    }
    let mut m = unflatten_upper(g, rois)?;
    m.diag_mut().fill(0.0);
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiScoreVector {
    pub scores: Vec<f64>,
    /// False only when every column sum is zero.
    pub normalized: bool,
}

/// Column sums divided by their maximum.
pub fn roi_scores(mat: &Array2<f64>) -> RoiScoreVector {
    let sums: Array1<f64> = mat.sum_axis(ndarray::Axis(0));
    let max = sums.iter().copied().fold(0.0_f64, f64::max);
    if max > 0.0 {
        RoiScoreVector {
            scores: sums.iter().map(|s| s / max).collect(),
            normalized: true,
        }
    } else {
        RoiScoreVector {
            scores: vec![0.0; sums.len()],
            normalized: false,
        }
    }
}

/// Indices of the `k` largest scores, descending; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `|A ∩ B| / |A ∪ B|`; two empty sets count as identical.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let sa: std::collections::BTreeSet<_> = a.iter().collect();
    let sb: std::collections::BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        1.0
    } else {
        sa.intersection(&sb).count() as f64 / union as f64
    }
}

/// Mean pairwise Jaccard overlap of a family of sets (1 for fewer than two).
pub fn mean_pairwise_jaccard(sets: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            total += jaccard(&sets[i], &sets[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        1.0
    } else {
        total / pairs as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteClassBiomarkers {
    pub site: String,
    pub class: usize,
    /// Windows averaged into the saliency.
    pub points: usize,
    pub scores: RoiScoreVector,
    pub top_k: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiomarkerReport {
    pub k: usize,
    pub entries: Vec<SiteClassBiomarkers>,
    /// Mean pairwise Jaccard of top-k sets across sites, per class.
    pub consistency: BTreeMap<usize, f64>,
}

impl BiomarkerReport {
    /// Consistency averaged over classes.
    pub fn mean_consistency(&self) -> f64 {
        if self.consistency.is_empty() {
            return 0.0;
        }
        self.consistency.values().sum::<f64>() / self.consistency.len() as f64
    }

    /// Top-k of the scores averaged over every (site, class) entry.
    pub fn pooled_top_k(&self) -> Vec<usize> {
        let Some(first) = self.entries.first() else {
            return Vec::new();
        };
        let mut pooled = vec![0.0; first.scores.scores.len()];
        for e in &self.entries {
            for (p, s) in pooled.iter_mut().zip(&e.scores.scores) {
                *p += s;
            }
        }
        top_k(&pooled, self.k)
    }
}

/// Running sums of saliency per (site, class), so points from several
/// models (e.g. one per fold) can be averaged together.
#[derive(Debug, Clone)]
pub struct SaliencyAccumulator {
    rois: usize,
    mode: SaliencyMode,
    sums: BTreeMap<(String, usize), (Vec<f64>, usize)>,
    site_order: Vec<String>,
}

impl SaliencyAccumulator {
    pub fn new(rois: usize, mode: SaliencyMode) -> Self {
        Self {
            rois,
            mode,
            sums: BTreeMap::new(),
            site_order: Vec::new(),
        }
    }

    /// Adds the saliency of every row of `windows` toward its true label.
    pub fn add(&mut self, site: &str, model: &Mlp, windows: &Array2<f64>, labels: &[usize]) -> Result<()> {
        if windows.ncols() != feature_len(self.rois) {
            return Err(Error::Dimension {
                context: "saliency input width",
                expected: feature_len(self.rois),
                actual: windows.ncols(),
            });
        }
        if !self.site_order.iter().any(|s| s == site) {
            self.site_order.push(site.to_string());
        }
        if windows.nrows() == 0 {
            return Ok(());
        }
        let sal = saliency_rows(model, windows, labels, self.mode)?;
        for (row, &c) in sal.rows().into_iter().zip(labels) {
            let (sum, n) = self
                .sums
                .entry((site.to_string(), c))
                .or_insert_with(|| (vec![0.0; row.len()], 0));
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            *n += 1;
        }
        Ok(())
    }

    pub fn finish(&self, k: usize) -> Result<BiomarkerReport> {
        let mut entries = Vec::new();
        for site in &self.site_order {
            let classes: Vec<usize> = self.sums.keys().filter(|(s, _)| s == site).map(|&(_, c)| c).collect();
            if classes.is_empty() {
                return Err(Error::Empty(format!("no test points for site `{site}`")));
            }
            for c in classes {
                let (sum, n) = &self.sums[&(site.clone(), c)];
                let mean: Vec<f64> = sum.iter().map(|v| v / *n as f64).collect();
                let scores = roi_scores(&build_grad_matrix(&mean, self.rois)?);
                entries.push(SiteClassBiomarkers {
                    site: site.clone(),
                    class: c,
                    points: *n,
                    top_k: top_k(&scores.scores, k),
                    scores,
                });
            }
        }
        let mut consistency = BTreeMap::new();
        let classes: std::collections::BTreeSet<usize> = entries.iter().map(|e| e.class).collect();
        for c in classes {
            let sets: Vec<Vec<usize>> = entries.iter().filter(|e| e.class == c).map(|e| e.top_k.clone()).collect();
            consistency.insert(c, mean_pairwise_jaccard(&sets));
        }
        Ok(BiomarkerReport { k, entries, consistency })
    }
}

/// One test set per site: windows and their labels.
pub struct SiteTestSet<'a> {
    pub site: &'a str,
    pub windows: &'a Array2<f64>,
    pub labels: &'a [usize],
}

/// Saliency of one model on every site's test windows.
pub fn biomarker_report(model: &Mlp, sites: &[SiteTestSet<'_>], rois: usize, k: usize, mode: SaliencyMode) -> Result<BiomarkerReport> {
    let mut acc = SaliencyAccumulator::new(rois, mode);
    for s in sites {
        if s.windows.nrows() == 0 {
            return Err(Error::Empty(format!("no test points for site `{}`", s.site)));
        }
        acc.add(s.site, model, s.windows, s.labels)?;
    }
    acc.finish(k)
}

/// CSV with one row per (site, class, ROI), ordered by rank, followed by one
/// consistency row per class (`site` = `consistency`, score = Jaccard).
pub fn write_biomarker_csv(report: &BiomarkerReport, labels: Option<&BTreeMap<usize, String>>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["site", "class", "roi_index", "roi_name", "score", "rank"])?;
    for e in &report.entries {
        let order = top_k(&e.scores.scores, e.scores.scores.len());
        for (rank, roi) in order.into_iter().enumerate() {
            let name = labels.and_then(|l| l.get(&roi)).cloned().unwrap_or_default();
            w.write_record([
                e.site.clone(),
                crate::data::io::label_name(e.class).to_string(),
                roi.to_string(),
                name,
                format!("{:.12e}", e.scores.scores[roi]),
                (rank + 1).to_string(),
            ])?;
        }
    }
    for (c, v) in &report.consistency {
        w.write_record([
            "consistency".to_string(),
            crate::data::io::label_name(*c).to_string(),
            String::new(),
            String::new(),
            format!("{v:.12e}"),
            String::new(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
