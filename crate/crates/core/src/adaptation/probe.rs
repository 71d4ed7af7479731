//! Site-identifiability probe: how well a small classifier tells two sites
//! apart from generator features. Aligned features push this towards 0.5.

use ndarray::{concatenate, Array2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::nn::{init_model, AdamConfig, AdamState, Arch, BackwardFrom, Mlp, ReluRule};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub arch: String,
    pub lr: f64,
    /// Full-batch Adam steps.
    pub steps: usize,
    /// Cap on training rows per pair, split evenly between the two sites.
    pub max_rows: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            arch: "discriminator".into(),
            lr: 1e-2,
            steps: 200,
            max_rows: 400,
        }
    }
}

/// Raw (pre-generator) windows of one site.
#[derive(Debug, Clone)]
pub struct ProbeSite {
    pub site_id: String,
    pub train: Array2<f64>,
    pub test: Array2<f64>,
}

/// Mean of sensitivity and specificity at threshold 0.5; label 1 is positive.
pub fn balanced_accuracy(probs: &[f64], labels: &[bool]) -> f64 {
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in probs.iter().zip(labels) {
        if y {
            pos += 1;
            tp += usize::from(p >= 0.5);
        } else {
            neg += 1;
            tn += usize::from(p < 0.5);
        }
    }
    let rate = |hit: usize, n: usize| if n == 0 { 0.5 } else { hit as f64 / n as f64 };
    0.5 * (rate(tp, pos) + rate(tn, neg))
}

fn subsample(x: &Array2<f64>, n: usize, rng: &mut rng::StreamRng) -> Array2<f64> {
    if n >= x.nrows() {
        return x.clone();
    }
    let mut rows = sample(rng, x.nrows(), n).into_vec();
    rows.sort_unstable();
    x.select(Axis(0), &rows)
}

/// Trains a probe separating `a` (label 0) from `b` (label 1) and returns
/// its balanced accuracy on `(test_a, test_b)`.
pub fn pair_probe(
    a: &Array2<f64>,
    b: &Array2<f64>,
    test_a: &Array2<f64>,
    test_b: &Array2<f64>,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 || test_a.nrows() == 0 || test_b.nrows() == 0 {
        return Err(Error::Empty("probe site without windows".into()));
    }
    let mut r = rng::stream(seed, "probe/rows");
    let per = (cfg.max_rows / 2).max(1).min(a.nrows()).min(b.nrows());
    let (sa, sb) = (subsample(a, per, &mut r), subsample(b, per, &mut r));
    let x = concatenate(Axis(0), &[sa.view(), sb.view()]).map_err(|_| Error::Dimension {
        context: "probe feature width",
        expected: a.ncols(),
        actual: b.ncols(),
    })?;
    let mut probe = init_model(&Arch::resolve(&cfg.arch, x.ncols())?, seed)?;
    if probe.output_dim() != 1 {
        return Err(Error::Config("probe architecture must have one sigmoid output".into()));
    }
    let mut opt = AdamState::new(&probe, AdamConfig { lr: cfg.lr, ..Default::default() });
    let n = x.nrows() as f64;
    for _ in 0..cfg.steps {
        let (p, cache) = probe.forward_train(&x, &mut r)?;
        let grad = Array2::from_shape_fn(p.raw_dim(), |(i, _)| {
            let y = if i < per { 0.0 } else { 1.0 };
            (p[[i, 0]] - y) / n
        });
        let back = probe.backward(&cache, &grad, BackwardFrom::Logits, ReluRule::Exact)?;
        opt.step(probe.params_mut(), &back.grads)?;
    }
    let score = |m: &Mlp, t: &Array2<f64>| -> Result<Vec<f64>> { Ok(m.forward_eval(t)?.column(0).to_vec()) };
    let mut probs = score(&probe, test_a)?;
    probs.extend(score(&probe, test_b)?);
    let labels: Vec<bool> = (0..probs.len()).map(|i| i >= test_a.nrows()).collect();
    Ok(balanced_accuracy(&probs, &labels))
}

/// Mean pairwise probe accuracy over all site pairs on `generator` features.
pub fn site_probe_accuracy(generator: &Mlp, sites: &[ProbeSite], cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    if sites.len() < 2 {
        return Err(Error::InvalidArgument("site probe needs at least two sites".into()));
    }
    let feats = sites
        .iter()
        .map(|s| Ok((generator.forward_eval(&s.train)?, generator.forward_eval(&s.test)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..sites.len() {
        for j in i + 1..sites.len() {
            let s = rng::stable_hash(&format!("probe/{}/{}", sites[i].site_id, sites[j].site_id));
            total += pair_probe(&feats[i].0, &feats[j].0, &feats[i].1, &feats[j].1, cfg, seed ^ s)?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn balanced_accuracy_weights_classes_equally() {
        let probs = [0.9, 0.1, 0.1, 0.1];
        let labels = [true, false, false, false];
        assert_eq!(balanced_accuracy(&probs, &labels), 1.0);
        // predicting the majority everywhere is chance
        assert_eq!(balanced_accuracy(&[0.0; 4], &labels), 0.5);
    }

    fn cloud(n: usize, shift: f64, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, "cloud");
        Array2::from_shape_fn((n, 3), |(_, j)| r.random_range(-1.0..1.0) + if j == 0 { shift } else { 0.0 })
    }

    #[test]
    fn separates_shifted_sites_and_not_identical_ones() {
        let cfg = ProbeConfig::default();
        let far = pair_probe(&cloud(100, 0.0, 1), &cloud(100, 4.0, 2), &cloud(50, 0.0, 3), &cloud(50, 4.0, 4), &cfg, 0).unwrap();
        assert!(far > 0.95, "{far}");
        let same = pair_probe(&cloud(100, 0.0, 1), &cloud(100, 0.0, 2), &cloud(200, 0.0, 3), &cloud(200, 0.0, 4), &cfg, 0).unwrap();
        assert!((same - 0.5).abs() < 0.15, "{same}");
    }
}
