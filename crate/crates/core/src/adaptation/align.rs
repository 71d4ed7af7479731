//! Federated adversarial feature alignment.
//!
//! The shared network is split into a feature generator `G` and a classifier
//! `C`; both are federated. Every site also owns a discriminator `D` that is
//! never shared. After a warm-up of classification-only epochs, each
//! synchronized step runs, for every site `i` in turn, one alignment round
//! against the next target site `j` (round-robin over the other sites):
//!
//! 1. `D_i` is updated to separate `G_i(x_i)` (source) from the noised
//!    features `M(G_j(x_j))` (target).
//! 2. With `D_i` frozen, `G_i` and `G_j` are updated so that both look like
//!    source features to `D_i`. Gradients pass straight through the noise.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::probe::ProbeConfig;
use crate::federation::{DataIter, FedConfig, FedParticipant, FedRun, FedTelemetry, LabeledWindows};
use crate::nn::{
    cross_entropy, cross_entropy_logit_grad, init_model, AdamState, Arch, BackwardFrom, Gradients, Mlp, ReluRule,
    PROB_FLOOR,
};
use crate::privacy::{perturb_in_place, NoiseSpec};
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Classification-only epochs before adversarial updates start.
    pub warmup_epochs: usize,
    /// Discriminator architecture; its input width is the generator output.
    pub disc_arch: String,
    /// Mechanism applied to features before they leave their site.
    pub feature_noise: NoiseSpec,
    /// Layer index splitting the shared network into `G` and `C`.
    pub split_index: usize,
    /// Discriminator updates per generator update.
    pub disc_steps: usize,
    /// Weight of the generator's adversarial loss.
    pub adv_weight: f64,
    /// Multiplier on the scheduled learning rate for adversarial updates.
    pub adv_lr_scale: f64,
    pub probe: ProbeConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 5,
            disc_arch: "discriminator".into(),
            feature_noise: NoiseSpec::gaussian(0.01),
            split_index: 4,
            disc_steps: 1,
            adv_weight: 1.0,
            adv_lr_scale: 1.0,
            probe: ProbeConfig::default(),
        }
    }
}

/// Features on their way to another site. `tainted` records that they went
/// through the randomization mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub values: Array2<f64>,
    pub tainted: bool,
}

/// The only way features leave a site: `f + M(f)` with the per-batch
/// feature spread as `σ`.
pub fn share_features<R: Rng + ?Sized>(features: &Array2<f64>, noise: &NoiseSpec, rng: &mut R) -> FeatureBatch {
    let mut values = features.as_standard_layout().into_owned();
    let slice = values.as_slice_mut().expect("standard layout");
    perturb_in_place(slice, noise, rng);
    FeatureBatch {
        values,
        tainted: noise.is_active(),
    }
}

fn d_forward(d: &Mlp, source: &Array2<f64>, target: &Array2<f64>) -> Result<(Array2<f64>, crate::nn::ForwardCache)> {
    if source.ncols() != target.ncols() {
        return Err(Error::Dimension {
            context: "source/target feature width",
            expected: source.ncols(),
            actual: target.ncols(),
        });
    }
    let both = concatenate(Axis(0), &[source.view(), target.view()]).expect("equal widths");
    d.forward_eval_cached(&both)
}

fn neg_log(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// `L_advD = −E log D(source) − E log(1 − D(target))`.
pub fn disc_loss(d: &Mlp, source: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    disc_loss_grads(d, source, target).map(|(l, _)| l)
}

/// `L_advG = −E log D(source) − E log D(target)`.
pub fn gen_align_loss(d: &Mlp, source: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    gen_align_grads(d, source, target).map(|(l, _, _)| l)
}

/// Discriminator loss and its gradient with respect to `D`'s parameters.
pub fn disc_loss_grads(d: &Mlp, source: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Gradients)> {
    let (probs, cache) = d_forward(d, source, target)?;
    let (ns, nt) = (source.nrows() as f64, target.nrows() as f64);
    let mut loss = 0.0;
    // derivative w.r.t. the logit z, with D = σ(z); the floor passes no gradient
    let grad = Array2::from_shape_fn(probs.raw_dim(), |(i, _)| {
        let p = probs[[i, 0]];
        if i < source.nrows() {
            loss += neg_log(p) / ns;
            if p > PROB_FLOOR {
                -(1.0 - p) / ns
            } else {
                0.0
            }
        } else {
            loss += neg_log(1.0 - p) / nt;
            if 1.0 - p > PROB_FLOOR {
                p / nt
            } else {
                0.0
            }
        }
    });
    let back = d.backward(&cache, &grad, BackwardFrom::Logits, ReluRule::Exact)?;
    Ok((loss, back.grads))
}

/// Generator loss and its gradients with respect to the source and target
/// features (the discriminator is held fixed).
pub fn gen_align_grads(d: &Mlp, source: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (probs, cache) = d_forward(d, source, target)?;
    let ns = source.nrows();
    let (fs, ft) = (ns as f64, target.nrows() as f64);
    let mut loss = 0.0;
    let grad = Array2::from_shape_fn(probs.raw_dim(), |(i, _)| {
        let p = probs[[i, 0]];
        let n = if i < ns { fs } else { ft };
        loss += neg_log(p) / n;
        if p > PROB_FLOOR {
            -(1.0 - p) / n
        } else {
            0.0
        }
    });
    let back = d.backward(&cache, &grad, BackwardFrom::Logits, ReluRule::Exact)?;
    let g = back.input_grad;
    Ok((loss, g.slice(s![..ns, ..]).to_owned(), g.slice(s![ns.., ..]).to_owned()))
}

/// One alignment round as logged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignRecord {
    pub epoch: usize,
    pub step: usize,
    pub source: String,
    pub target: String,
    pub disc_loss: f64,
    pub gen_loss: f64,
    pub tainted: bool,
}

#[derive(Debug, Clone)]
pub struct AlignNode {
    pub site_id: String,
    pub generator: Mlp,
    pub classifier: Mlp,
    pub discriminator: Mlp,
    opt_g: AdamState,
    opt_c: AdamState,
    opt_adv: AdamState,
    opt_d: AdamState,
    data: LabeledWindows,
    iter: DataIter,
    rng: StreamRng,
    align_rng: StreamRng,
    rounds: usize,
}

impl AlignNode {
    fn sample_rows(&mut self, n: usize) -> Array2<f64> {
        let len = self.data.len();
        let rows: Vec<usize> = (0..n).map(|_| self.align_rng.random_range(0..len)).collect();
        self.data.inputs.select(Axis(0), &rows)
    }
}

impl FedParticipant for AlignNode {
    fn site_id(&self) -> &str {
        &self.site_id
    }

    fn start_epoch(&mut self, _epoch: usize, lr: f64) {
        self.iter.reshuffle(&mut self.rng);
        self.opt_g.set_lr(lr);
        self.opt_c.set_lr(lr);
    }

    fn local_step(&mut self, _epoch: usize) -> Result<f64> {
        let rows = self.iter.next_rows();
        let batch = self.data.batch(&rows)?;
        let (feats, cache_g) = self.generator.forward_train(&batch.inputs, &mut self.rng)?;
        let (probs, cache_c) = self.classifier.forward_train(&feats, &mut self.rng)?;
        let loss = cross_entropy(&probs, &batch.labels)?;
        let grad = cross_entropy_logit_grad(&probs, &batch.labels)?;
        let back_c = self.classifier.backward(&cache_c, &grad, BackwardFrom::Logits, ReluRule::Exact)?;
        let back_g = self
            .generator
            .backward(&cache_g, &back_c.input_grad, BackwardFrom::Output, ReluRule::Exact)?;
        self.opt_c.step(self.classifier.params_mut(), &back_c.grads)?;
        self.opt_g.step(self.generator.params_mut(), &back_g.grads)?;
        Ok(loss)
    }

    fn shared(&self) -> Vec<(&'static str, &Mlp)> {
        vec![("G", &self.generator), ("C", &self.classifier)]
    }

    fn shared_mut(&mut self) -> Vec<&mut Mlp> {
        vec![&mut self.generator, &mut self.classifier]
    }
}

/// One alignment round for every site, sources in site order.
fn align_round(
    nodes: &mut [AlignNode],
    cfg: &AlignConfig,
    lr: f64,
    seed: u64,
    epoch: usize,
    step: usize,
    log: &mut Vec<AlignRecord>,
) -> Result<()> {
    let n = nodes.len();
    let adv_lr = lr * cfg.adv_lr_scale;
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let j = others[nodes[i].rounds % others.len()];
        nodes[i].rounds += 1;
        let batch = nodes[i].iter.batch_size();

        let src = &mut nodes[i];
        let xs = src.sample_rows(batch);
        let (fs, cache_s) = src.generator.forward_train(&xs, &mut src.align_rng)?;
        let tgt = &mut nodes[j];
        let xt = tgt.sample_rows(batch);
        let (ft, cache_t) = tgt.generator.forward_train(&xt, &mut tgt.align_rng)?;
        let mut noise_rng = rng::stream(seed, &format!("align-noise/{i}/{j}/{epoch}/{step}"));
        let shared = share_features(&ft, &cfg.feature_noise, &mut noise_rng);
        if cfg.feature_noise.is_active() && !shared.tainted {
            return Err(Error::InvalidArgument("untainted features crossed a site boundary".into()));
        }

        let src = &mut nodes[i];
        src.opt_d.set_lr(adv_lr);
        let mut d_loss = 0.0;
        for _ in 0..cfg.disc_steps {
            let (l, grads) = disc_loss_grads(&src.discriminator, &fs, &shared.values)?;
            src.opt_d.step(src.discriminator.params_mut(), &grads)?;
            d_loss = l;
        }
        let (gen_loss, g_src, g_tgt) = gen_align_grads(&src.discriminator, &fs, &shared.values)?;
        let back_s = src
            .generator
            .backward(&cache_s, &(g_src * cfg.adv_weight), BackwardFrom::Output, ReluRule::Exact)?;
        src.opt_adv.set_lr(adv_lr);
        src.opt_adv.step(src.generator.params_mut(), &back_s.grads)?;

        let tgt = &mut nodes[j];
        let back_t = tgt
            .generator
            .backward(&cache_t, &(g_tgt * cfg.adv_weight), BackwardFrom::Output, ReluRule::Exact)?;
        tgt.opt_adv.set_lr(adv_lr);
        tgt.opt_adv.step(tgt.generator.params_mut(), &back_t.grads)?;

        log.push(AlignRecord {
            epoch,
            step,
            source: nodes[i].site_id.clone(),
            target: nodes[j].site_id.clone(),
            disc_loss: d_loss,
            gen_loss,
            tainted: shared.tainted,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AlignOutcome {
    /// `Ḡ` followed by `C̄`.
    pub global: Mlp,
    /// The global network at the end of warm-up (before any alignment).
    pub warmup_global: Mlp,
    pub telemetry: FedTelemetry,
    pub align_log: Vec<AlignRecord>,
    /// Discriminators as left at the sites (never shared).
    pub discriminators: Vec<(String, Mlp)>,
    /// Filled in by callers that evaluate the site probe.
    pub probe_accuracy: Option<(f64, f64)>,
}

/// Federated training of `G`/`C` with per-site discriminators after warm-up.
pub fn run_fed_align(fed: &FedConfig, cfg: &AlignConfig, sites: &[(String, LabeledWindows)]) -> Result<AlignOutcome> {
    if sites.len() < 2 {
        return Err(Error::InvalidArgument("fed-align needs at least two sites".into()));
    }
    if cfg.disc_steps == 0 || !(cfg.adv_lr_scale > 0.0) || !(cfg.adv_weight >= 0.0) {
        return Err(Error::Config("align: disc_steps >= 1, adv_lr_scale > 0 and adv_weight >= 0 required".into()));
    }
    cfg.feature_noise.validate()?;
    let dim = sites[0].1.feature_dim();
    let full = init_model(&Arch::resolve(&fed.arch, dim)?, fed.seed)?;
    let (generator, classifier) = full.split_at(cfg.split_index)?;
    let disc = init_model(&Arch::resolve(&cfg.disc_arch, generator.output_dim())?, fed.seed)?;
    let mut nodes = sites
        .iter()
        .map(|(id, data)| {
            if data.feature_dim() != dim {
                return Err(Error::Dimension {
                    context: "site data width",
                    expected: dim,
                    actual: data.feature_dim(),
                });
            }
            Ok(AlignNode {
                site_id: id.clone(),
                opt_g: AdamState::new(&generator, fed.adam),
                opt_c: AdamState::new(&classifier, fed.adam),
                opt_adv: AdamState::new(&generator, fed.adam),
                opt_d: AdamState::new(&disc, fed.adam),
                generator: generator.clone(),
                classifier: classifier.clone(),
                discriminator: disc.clone(),
                iter: DataIter::new(data.len(), fed.steps_per_epoch)?,
                data: data.clone(),
                rng: rng::stream(fed.seed, &format!("site/{id}")),
                align_rng: rng::stream(fed.seed, &format!("align/{id}")),
                rounds: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut log = Vec::new();
    let (server, telemetry, warmup_global) = {
        let mut run = FedRun::new(fed, &mut nodes)?;
        run.run_until(cfg.warmup_epochs, None)?;
        let warm = Mlp::concat(&run.server.models[0], &run.server.models[1])?;
        let mut hook = |nodes: &mut [AlignNode], epoch: usize, step: usize| {
            align_round(nodes, cfg, fed.lr.lr(epoch), fed.seed, epoch, step, &mut log)
        };
        run.run_until(fed.epochs, Some(&mut hook))?;
        let (server, telemetry) = run.finish()?;
        (server, telemetry, warm)
    };
    Ok(AlignOutcome {
        global: Mlp::concat(&server.models[0], &server.models[1])?,
        warmup_global,
        telemetry,
        align_log: log,
        discriminators: nodes.into_iter().map(|n| (n.site_id, n.discriminator)).collect(),
        probe_accuracy: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc() -> Mlp {
        init_model(&Arch::parse("discriminator:4").unwrap(), 3).unwrap()
    }

    fn feats(rows: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, "feats");
        Array2::from_shape_fn((rows, 4), |_| r.random_range(-1.0..1.0))
    }

    /// A discriminator whose output is the constant `σ(b)`.
    fn constant_disc(b: f64) -> Mlp {
        let mut d = disc();
        for p in d.params_mut() {
            p.fill(0.0);
        }
        let last = d.params_mut().len() - 1;
        d.params_mut()[last][0] = b;
        d
    }

    #[test]
    fn half_discriminator_gives_two_ln_two() {
        let d = constant_disc(0.0);
        let (s, t) = (feats(5, 1), feats(7, 2));
        let two_ln2 = 2.0 * std::f64::consts::LN_2;
        assert!((disc_loss(&d, &s, &t).unwrap() - two_ln2).abs() < 1e-12);
        assert!((gen_align_loss(&d, &s, &t).unwrap() - two_ln2).abs() < 1e-12);
    }

    #[test]
    fn saturated_discriminators() {
        let (s, t) = (feats(5, 1), feats(7, 2));
        // D ≡ 1: generator loss vanishes
        assert!(gen_align_loss(&constant_disc(60.0), &s, &t).unwrap() < 1e-10);
        // D ≡ 0: discriminator loss vanishes, generator loss hits the floor
        let d0 = constant_disc(-60.0);
        assert!((disc_loss(&d0, &s, &t).unwrap() + PROB_FLOOR.ln()).abs() < 1e-9);
        let floor = -2.0 * PROB_FLOOR.ln();
        assert!((gen_align_loss(&d0, &s, &t).unwrap() - floor).abs() < 1e-9);
        let (_, gs, gt) = gen_align_grads(&d0, &s, &t).unwrap();
        assert!(gs.iter().chain(gt.iter()).all(|&g| g == 0.0));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn disc_gradients_match_finite_differences() {
        let d = disc();
        let (s, t) = (feats(6, 4), feats(5, 5));
        let (_, grads) = disc_loss_grads(&d, &s, &t).unwrap();
        let h = 1e-5;
        for (ti, tensor) in grads.tensors.iter().enumerate() {
            for k in 0..tensor.len() {
                let mut plus = d.clone();
                plus.params_mut()[ti][k] += h;
                let mut minus = d.clone();
                minus.params_mut()[ti][k] -= h;
                let fd = (disc_loss(&plus, &s, &t).unwrap() - disc_loss(&minus, &s, &t).unwrap()) / (2.0 * h);
                assert!(rel_err(fd, tensor[k]) < 1e-4, "tensor {ti}[{k}]: {fd} vs {}", tensor[k]);
            }
        }
    }

    #[test]
    fn generator_gradients_match_finite_differences_through_frozen_d() {
        // a zero bias would put all-zero feature rows exactly on D's ReLU kink
        let mut d = disc();
        d.params_mut()[1].fill(0.1);
        let g = init_model(&Arch::parse("mlp:6-4-2").unwrap(), 2).unwrap().split_at(3).unwrap().0;
        assert_eq!(g.output_dim(), 4);
        let mut r = rng::stream(9, "x");
        let xs = Array2::from_shape_fn((6, 6), |_| r.random_range(-1.0..1.0));
        let xt = Array2::from_shape_fn((5, 6), |_| r.random_range(-1.0..1.0));
        let loss = |g: &Mlp| {
            let fs = g.forward_eval(&xs).unwrap();
            let ft = g.forward_eval(&xt).unwrap();
            gen_align_loss(&d, &fs, &ft).unwrap()
        };
        let (fs, cs) = g.forward_eval_cached(&xs).unwrap();
        let (ft, ct) = g.forward_eval_cached(&xt).unwrap();
        let (_, gs, gt) = gen_align_grads(&d, &fs, &ft).unwrap();
        let mut grads = g.backward(&cs, &gs, BackwardFrom::Output, ReluRule::Exact).unwrap().grads;
        grads.add_assign(&g.backward(&ct, &gt, BackwardFrom::Output, ReluRule::Exact).unwrap().grads);
        let h = 1e-5;
        for (ti, tensor) in grads.tensors.iter().enumerate() {
            for k in 0..tensor.len() {
                let mut plus = g.clone();
                plus.params_mut()[ti][k] += h;
                let mut minus = g.clone();
                minus.params_mut()[ti][k] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!(rel_err(fd, tensor[k]) < 1e-4, "tensor {ti}[{k}]: {fd} vs {}", tensor[k]);
            }
        }
    }

    #[test]
    fn shared_features_are_tainted_when_noised() {
        let f = feats(4, 1);
        let mut r = rng::stream(0, "n");
        let noised = share_features(&f, &NoiseSpec::gaussian(0.01), &mut r);
        assert!(noised.tainted);
        assert_ne!(noised.values, f);
        let clean = share_features(&f, &NoiseSpec::none(), &mut r);
        assert!(!clean.tainted);
        assert_eq!(clean.values, f);
    }
}
