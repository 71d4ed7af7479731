use ndarray::{s, Array2, ArrayView2, Axis};

use crate::{Error, Result};

/// Correlations are clamped to ±(1 − 1e-7) before atanh.
pub const FISHER_CLAMP: f64 = 1.0 - 1e-7;

pub fn feature_len(rois: usize) -> usize {
    rois * rois.saturating_sub(1) / 2
}

/// Inverse of [`feature_len`], if `len` is triangular.
pub fn roi_count_for_len(len: usize) -> Option<usize> {
    let r = ((1.0 + (1.0 + 8.0 * len as f64).sqrt()) / 2.0).round() as usize;
    (feature_len(r) == len).then_some(r)
}

/// Position of ROI pair `(i, j)`, `i != j`, in the row-major strict upper
/// triangle of an `rois × rois` matrix.
pub fn upper_index(i: usize, j: usize, rois: usize) -> usize {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    debug_assert!(i != j && j < rois);
    i * rois - i * (i + 1) / 2 + (j - i - 1)
}

/// Contiguous `window`-frame slices of a frames × ROIs matrix, advancing by
/// `stride`: `(T - window) / stride + 1` of them.
pub fn sliding_windows(series: &Array2<f64>, window: usize, stride: usize) -> Result<Vec<ArrayView2<'_, f64>>> {
    let frames = series.nrows();
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("window and stride must be positive".into()));
    }
    if window > frames {
        return Err(Error::WindowTooLong { window, frames });
    }
    Ok((0..=(frames - window))
        .step_by(stride)
        .map(|start| series.slice(s![start..start + window, ..]))
        .collect())
}

/// Pearson correlation between the columns of a frames × ROIs window.
///
/// The result is symmetric with an exact unit diagonal; a column without
/// variance correlates 0 with every other column.
pub fn pearson_correlation(window: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (frames, rois) = window.dim();
    if frames < 2 {
        return Err(Error::InvalidArgument(format!("correlation needs >= 2 frames, got {frames}")));
    }
    let mean = window.mean_axis(Axis(0)).expect("frames >= 2");
    let centered = &window - &mean;
    let cov = centered.t().dot(&centered);
    let scale = window
        .axis_iter(Axis(1))
        .map(|c| c.fold(0.0_f64, |m, v| m.max(v.abs())))
        .collect::<Vec<_>>();
    let std: Vec<f64> = (0..rois)
        .map(|i| {
            let s = cov[[i, i]].sqrt();
            // numerically constant column
            if s <= 1e-12 * (1.0 + scale[i]) * (frames as f64).sqrt() {
                0.0
            } else {
                s
            }
        })
        .collect();
    let mut corr = Array2::zeros((rois, rois));
    for i in 0..rois {
        corr[[i, i]] = 1.0;
        for j in (i + 1)..rois {
            let r = if std[i] == 0.0 || std[j] == 0.0 {
                0.0
            } else {
                (cov[[i, j]] / (std[i] * std[j])).clamp(-1.0, 1.0)
            };
            corr[[i, j]] = r;
            corr[[j, i]] = r;
        }
    }
    Ok(corr)
}

/// Elementwise atanh after clamping to ±[`FISHER_CLAMP`].
pub fn fisher_z(corr: &Array2<f64>) -> Array2<f64> {
    // atanh is odd; evaluate on |r| so the result is exactly antisymmetric
    corr.mapv(|r| r.signum() * r.abs().min(FISHER_CLAMP).atanh())
}

/// Strict upper triangle, row-major (`i` outer, `j > i` inner).
pub fn flatten_upper(mat: &Array2<f64>) -> Result<Vec<f64>> {
    let (r, c) = mat.dim();
    if r != c {
        return Err(Error::Dimension {
            context: "flatten_upper square input",
            expected: r,
            actual: c,
        });
    }
    let mut out = Vec::with_capacity(feature_len(r));
    for i in 0..r {
        out.extend(mat.slice(s![i, i + 1..]).iter().copied());
    }
    Ok(out)
}

/// Symmetric matrix with zero diagonal whose strict upper triangle is `values`.
pub fn unflatten_upper(values: &[f64], rois: usize) -> Result<Array2<f64>> {
    if values.len() != feature_len(rois) {
        return Err(Error::Dimension {
            context: "unflatten_upper length",
            expected: feature_len(rois),
            actual: values.len(),
        });
    }
    let mut mat = Array2::zeros((rois, rois));
    let mut k = 0;
    for i in 0..rois {
        for j in (i + 1)..rois {
            mat[[i, j]] = values[k];
            mat[[j, i]] = values[k];
            k += 1;
        }
    }
    Ok(mat)
}

pub fn connectivity_vector(window: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    flatten_upper(&fisher_z(&pearson_correlation(window)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn window_counts_match_site_frame_lengths() {
        for (frames, expected) in [(176, 145), (296, 265), (236, 205), (116, 85), (32, 1)] {
            let series = Array2::<f64>::zeros((frames, 3));
            assert_eq!(sliding_windows(&series, 32, 1).unwrap().len(), expected);
        }
        let series = Array2::<f64>::zeros((40, 2));
        assert_eq!(sliding_windows(&series, 32, 3).unwrap().len(), 3);
        assert!(matches!(
            sliding_windows(&Array2::<f64>::zeros((31, 2)), 32, 1),
            Err(Error::WindowTooLong { window: 32, frames: 31 })
        ));
    }

    #[test]
    fn windows_are_contiguous_slices() {
        let series = Array2::from_shape_fn((10, 2), |(t, r)| (t * 10 + r) as f64);
        let w = sliding_windows(&series, 4, 2).unwrap();
        assert_eq!(w[1], series.slice(s![2..6, ..]));
    }

    #[test]
    fn identical_and_negated_columns() {
        let x = array![[1.0, 1.0, -1.0], [2.0, 2.0, -2.0], [4.0, 4.0, -4.0], [3.0, 3.0, -3.0]];
        let c = pearson_correlation(x.view()).unwrap();
        assert!((c[[0, 1]] - 1.0).abs() < 1e-15);
        assert!((c[[0, 2]] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_column_correlates_zero() {
        let x = array![[1.0, 0.3], [2.0, 0.3], [0.5, 0.3]];
        let c = pearson_correlation(x.view()).unwrap();
        assert_eq!(c[[0, 1]], 0.0);
        assert_eq!(c[[1, 1]], 1.0);
        assert!(pearson_correlation(array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn matches_definitional_oracle() {
        let mut r = crate::rng::stream(5, "pearson");
        let x = Array2::from_shape_fn((40, 5), |_| r.random_range(-3.0..3.0));
        let c = pearson_correlation(x.view()).unwrap();
        let n = 40.0;
        for i in 0..5 {
            for j in 0..5 {
                let (xi, xj) = (x.column(i), x.column(j));
                let (mi, mj) = (xi.sum() / n, xj.sum() / n);
                let mut sxy = 0.0;
                let mut sxx = 0.0;
                let mut syy = 0.0;
                for t in 0..40 {
                    sxy += (xi[t] - mi) * (xj[t] - mj);
                    sxx += (xi[t] - mi).powi(2);
                    syy += (xj[t] - mj).powi(2);
                }
                assert!((c[[i, j]] - sxy / (sxx * syy).sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fisher_values() {
        let z = fisher_z(&array![[0.0, 0.5, 1.0, -1.0]]);
        assert_eq!(z[[0, 0]], 0.0);
        // atanh(0.5) = ln(3)/2
        assert!((z[[0, 1]] - 0.549_306_144_334_054_8).abs() < 1e-15);
        let clamped = 0.5 * ((2.0 - 1e-7) / 1e-7f64).ln();
        assert!((z[[0, 2]] - clamped).abs() < 1e-7);
        assert!((z[[0, 2]] - 8.406).abs() < 1e-3);
        assert_eq!(z[[0, 3]], -z[[0, 2]]);
    }

    #[test]
    fn flatten_order_and_lengths() {
        let m = array![[0.0, 1.0, 2.0], [1.0, 0.0, 3.0], [2.0, 3.0, 0.0]];
        assert_eq!(flatten_upper(&m).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(feature_len(111), 6105);
        assert_eq!(roi_count_for_len(6105), Some(111));
        assert_eq!(roi_count_for_len(6106), None);
        assert!(flatten_upper(&Array2::zeros((2, 3))).is_err());
        for (i, j, k) in [(0, 1, 0), (0, 2, 1), (1, 2, 2), (2, 1, 2)] {
            assert_eq!(upper_index(i, j, 3), k);
        }
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(rois in 2usize..12, seed in 0u64..1000) {
            let mut r = crate::rng::stream(seed, "flat");
            let values: Vec<f64> = (0..feature_len(rois)).map(|_| r.random_range(-5.0..5.0)).collect();
            let m = unflatten_upper(&values, rois).unwrap();
            prop_assert_eq!(&flatten_upper(&m).unwrap(), &values);
            for i in 0..rois {
                prop_assert_eq!(m[[i, i]], 0.0);
                for j in 0..rois {
                    prop_assert_eq!(m[[i, j]], m[[j, i]]);
                    if i != j {
                        prop_assert_eq!(values[upper_index(i, j, rois)], m[[i, j]]);
                    }
                }
            }
        }

        #[test]
        fn correlation_is_symmetric_and_bounded(frames in 2usize..20, rois in 1usize..6, seed in 0u64..500) {
            let mut r = crate::rng::stream(seed, "corr");
            let x = Array2::from_shape_fn((frames, rois), |_| r.random_range(-1.0..1.0));
            let c = pearson_correlation(x.view()).unwrap();
            let v = connectivity_vector(x.view()).unwrap();
            prop_assert_eq!(v.len(), feature_len(rois));
            prop_assert!(v.iter().all(|z| z.is_finite()));
            for i in 0..rois {
                prop_assert_eq!(c[[i, i]], 1.0);
                for j in 0..rois {
                    prop_assert_eq!(c[[i, j]], c[[j, i]]);
                    prop_assert!(c[[i, j]].abs() <= 1.0);
                }
            }
        }
    }
}
