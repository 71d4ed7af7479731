//! Connectivity featurization, normalization and round-trips.

use fedconn::data::{featurize, feature_len, flatten_upper, unflatten_upper, zscore_fit, RoiTimeSeries};
use fedconn::rng;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn series(frames: usize, rois: usize, seed: u64) -> RoiTimeSeries {
    let mut r = rng::stream(seed, "pipeline/series");
    RoiTimeSeries {
        subject_id: format!("sub{seed}"),
        site_id: "A".into(),
        series: Array2::from_shape_fn((frames, rois), |_| StandardNormal.sample(&mut r)),
        label: 0,
    }
}

#[test]
fn window_counts_and_feature_length_for_full_atlas() {
    // (frames, windows) for the four acquisition lengths with window 32, stride 1
    let cases = [(176, 145), (296, 265), (236, 205), (116, 85)];
    let mut total = 0;
    for (i, (frames, windows)) in cases.into_iter().enumerate() {
        let f = featurize(&series(frames, 111, i as u64), 32, 1).unwrap();
        assert_eq!(f.windows.dim(), (windows, 6105));
        assert!(f.windows.iter().all(|v| v.is_finite()));
        total += f.windows.nrows();
    }
    assert_eq!(total, 145 + 265 + 205 + 85);
    assert_eq!(feature_len(111), 6105);
}

#[test]
fn test_rows_use_training_statistics_two_pass_oracle() {
    let mut r = rng::stream(5, "pipeline/z");
    let train = Array2::from_shape_fn((40, 6), |(_, j)| j as f64 + r.random_range(-1.0..1.0) * (j + 1) as f64);
    let test = Array2::from_shape_fn((9, 6), |_| r.random_range(-5.0..5.0));
    let stats = zscore_fit([("A", train.view())]).unwrap();
    let got = stats.applied("A", &test).unwrap();
    for j in 0..6 {
        let col: Vec<f64> = train.column(j).to_vec();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64).sqrt();
        for i in 0..9 {
            assert!((got[[i, j]] - (test[[i, j]] - m) / sd).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_unflatten_round_trip(rois in 2usize..20, seed in 0u64..1000) {
        let mut r = rng::stream(seed, "pipeline/sym");
        let mut m = Array2::<f64>::zeros((rois, rois));
        for i in 0..rois {
            for j in i + 1..rois {
                let v = r.random_range(-3.0..3.0);
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
        }
        let flat = flatten_upper(&m).unwrap();
        prop_assert_eq!(flat.len(), feature_len(rois));
        let back = unflatten_upper(&flat, rois).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(flatten_upper(&back).unwrap(), flat);
    }

    #[test]
    fn features_are_invariant_to_per_roi_affine_changes(seed in 0u64..500, gain in 0.1f64..10.0, offset in -50.0f64..50.0) {
        let s = series(40, 6, seed);
        let mut scaled = s.clone();
        scaled.series.mapv_inplace(|v| v * gain + offset);
        let (a, b) = (featurize(&s, 32, 4).unwrap(), featurize(&scaled, 32, 4).unwrap());
        for (x, y) in a.windows.iter().zip(b.windows.iter()) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }
}
