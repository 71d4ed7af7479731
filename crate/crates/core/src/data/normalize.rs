use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Feature-wise mean and (population) standard deviation for one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl SiteStats {
    pub fn apply(&self, rows: &mut Array2<f64>) {
        *rows -= &self.mean;
        *rows /= &self.std;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormStats {
    pub per_site: BTreeMap<String, SiteStats>,
}

impl NormStats {
    pub fn site(&self, site: &str) -> Result<&SiteStats> {
        self.per_site.get(site).ok_or_else(|| Error::MissingSiteStats(site.to_string()))
    }

    /// Normalizes `rows` in place with the statistics of `site`.
    pub fn apply(&self, site: &str, rows: &mut Array2<f64>) -> Result<()> {
        let stats = self.site(site)?;
        if rows.ncols() != stats.mean.len() {
            return Err(Error::Dimension {
                context: "zscore_apply width",
                expected: stats.mean.len(),
                actual: rows.ncols(),
            });
        }
        stats.apply(rows);
        Ok(())
    }

    pub fn applied(&self, site: &str, rows: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = rows.clone();
        self.apply(site, &mut out)?;
        Ok(out)
    }
}

/// Fits per-site statistics from training rows only. `train` yields
/// `(site, rows)` blocks; blocks of the same site are pooled.
pub fn zscore_fit<'a>(train: impl IntoIterator<Item = (&'a str, ArrayView2<'a, f64>)>) -> Result<NormStats> {
    let mut sums: BTreeMap<String, (Array1<f64>, usize)> = BTreeMap::new();
    let mut blocks: Vec<(&str, ArrayView2<'a, f64>)> = Vec::new();
    for (site, rows) in train {
        let entry = sums
            .entry(site.to_string())
            .or_insert_with(|| (Array1::zeros(rows.ncols()), 0));
        if entry.0.len() != rows.ncols() {
            return Err(Error::Dimension {
                context: "zscore_fit width",
                expected: entry.0.len(),
                actual: rows.ncols(),
            });
        }
        entry.0 += &rows.sum_axis(Axis(0));
        entry.1 += rows.nrows();
        blocks.push((site, rows));
    }
    let mut means = BTreeMap::new();
    for (site, (sum, n)) in &sums {
        if *n < 2 {
            return Err(Error::NotEnoughSubjects(format!(
                "site `{site}` has {n} training vectors; normalization needs >= 2"
            )));
        }
        means.insert(site.clone(), sum / *n as f64);
    }
    // second pass for the variance
    let mut sq: BTreeMap<&str, Array1<f64>> = BTreeMap::new();
    for (site, rows) in &blocks {
        let mean = &means[*site];
        let dev = (rows - mean).mapv(|v| v * v).sum_axis(Axis(0));
        *sq.entry(site).or_insert_with(|| Array1::zeros(mean.len())) += &dev;
    }
    let per_site = means
        .into_iter()
        .map(|(site, mean)| {
            let n = sums[&site].1 as f64;
            let std = sq[site.as_str()].mapv(|v| (v / n).sqrt().max(STD_FLOOR));
            (site, SiteStats { mean, std })
        })
        .collect();
    Ok(NormStats { per_site })
}
