//! Federated training with pace-gated, noised weight averaging, and the
//! non-federated baselines.
//!
//! Each epoch every site takes `steps_per_epoch` local Adam steps. A pace
//! counter that restarts every epoch triggers a communication round after
//! every `tau` steps: each site perturbs every shared tensor with the
//! configured mechanism, the server averages the perturbed tensors with equal
//! site weights, and the average is broadcast back. Optimizer moments stay
//! with the sites.

mod node;
mod prepare;
mod strategy;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use node::{train_local, DataIter, SiteNode};
pub use prepare::{fold_stats, prepare_fold, prepare_full_site, LabeledWindows, SiteFold};
pub use strategy::{run_strategy, run_strategy_fold, FoldArtifacts, FoldRun, SiteFoldScore, StrategyConfig, StrategyKind};

use crate::nn::{AdamConfig, LrSchedule, Mlp};
use crate::privacy::{perturb_in_place, NoiseSpec};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Communication pace: local steps between aggregations.
    pub tau: usize,
    pub noise: NoiseSpec,
    /// Architecture id of the shared model; the input width comes from the data.
    pub arch: String,
    pub lr: LrSchedule,
    /// Adam betas and epsilon; the learning rate comes from `lr`.
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            steps_per_epoch: 60,
            tau: 20,
            noise: NoiseSpec::gaussian(0.01),
            arch: "fed-mlp".into(),
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.tau == 0 {
            return Err(Error::Config("epochs, steps_per_epoch and tau must be >= 1".into()));
        }
        if !(self.lr.base > 0.0 && self.lr.factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        self.noise.validate()
    }

    /// Communication rounds triggered by the pace counter in one epoch.
    pub fn comms_per_epoch(&self) -> usize {
        self.steps_per_epoch / self.tau
    }
}

/// A site taking part in federated rounds. The shared models are what gets
/// noised, averaged and broadcast; anything else the participant holds stays
/// local.
pub trait FedParticipant: Send {
    fn site_id(&self) -> &str;
    /// Called at the start of every epoch with that epoch's learning rate.
    fn start_epoch(&mut self, epoch: usize, lr: f64);
    /// One local optimization step; returns the training loss.
    fn local_step(&mut self, epoch: usize) -> Result<f64>;
    /// Names and models included in the communication payload.
    fn shared(&self) -> Vec<(&'static str, &Mlp)>;
    fn shared_mut(&mut self) -> Vec<&mut Mlp>;
}

/// The server's copy of the averaged shared models.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalServer {
    pub models: Vec<Mlp>,
    pub names: Vec<&'static str>,
    pub round: u64,
}

impl GlobalServer {
    /// Starts from the first participant's shared models.
    pub fn from_participant<P: FedParticipant + ?Sized>(node: &P) -> Self {
        let shared = node.shared();
        Self {
            names: shared.iter().map(|(n, _)| *n).collect(),
            models: shared.into_iter().map(|(_, m)| m.clone()).collect(),
            round: 0,
        }
    }

    /// Fully qualified names of every tensor in the payload.
    pub fn tensor_names(&self) -> Vec<String> {
        self.models
            .iter()
            .zip(&self.names)
            .flat_map(|(m, name)| m.param_names().into_iter().map(move |p| format!("{name}.{p}")))
            .collect()
    }

    /// The single shared model, for participants that share exactly one.
    pub fn model(&self) -> &Mlp {
        &self.models[0]
    }
}

/// Noise streams are keyed by run seed, site, round, model and tensor, so the
/// draws do not depend on scheduling.
fn noise_stream(seed: u64, noise: &NoiseSpec, site: &str, round: u64, model: usize, tensor: usize) -> rng::StreamRng {
    rng::stream(
        seed.wrapping_add(noise.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        &format!("noise/{site}/{round}/{model}/{tensor}"),
    )
}

/// `w̄ ← (1/N) Σ_n (w_n + M(w_n))`, tensor by tensor. BatchNorm running
/// statistics are averaged without noise.
pub fn aggregate<P: FedParticipant>(server: &mut GlobalServer, nodes: &[P], noise: &NoiseSpec, seed: u64) -> Result<()> {
    if nodes.is_empty() {
        return Err(Error::Empty("aggregate over zero sites".into()));
    }
    let n = nodes.len() as f64;
    let round = server.round;
    for (mi, global) in server.models.iter_mut().enumerate() {
        let expected: Vec<usize> = global.params().iter().map(|p| p.len()).collect();
        let mut sums: Option<Vec<Vec<f64>>> = None;
        let mut buf_sums: Option<Vec<Vec<f64>>> = None;
        for node in nodes {
            let shared = node.shared();
            let (_, model) = shared.get(mi).ok_or(Error::Dimension {
                context: "shared model count",
                expected: mi + 1,
                actual: shared.len(),
            })?;
            let params = model.params();
            if params.len() != expected.len() || params.iter().zip(&expected).any(|(p, &e)| p.len() != e) {
                return Err(Error::Dimension {
                    context: "aggregate tensor shapes",
                    expected: expected.iter().sum(),
                    actual: params.iter().map(|p| p.len()).sum(),
                });
            }
            let noised: Vec<Vec<f64>> = params
                .iter()
                .enumerate()
                .map(|(ti, p)| {
                    let mut v = p.to_vec();
                    let mut r = noise_stream(seed, noise, node.site_id(), round, mi, ti);
                    perturb_in_place(&mut v, noise, &mut r);
                    v
                })
                .collect();
            accumulate(&mut sums, noised);
            accumulate(&mut buf_sums, model.buffers().iter().map(|b| b.to_vec()).collect());
        }
        for (dst, sum) in global.params_mut().into_iter().zip(sums.unwrap_or_default()) {
            for (d, s) in dst.iter_mut().zip(sum) {
                *d = s / n;
            }
        }
        for (dst, sum) in global.buffers_mut().into_iter().zip(buf_sums.unwrap_or_default()) {
            for (d, s) in dst.iter_mut().zip(sum) {
                *d = s / n;
            }
        }
    }
    server.round += 1;
    Ok(())
}

fn accumulate(acc: &mut Option<Vec<Vec<f64>>>, next: Vec<Vec<f64>>) {
    match acc {
        None => *acc = Some(next),
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(next) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
    }
}

/// Copies the global weights into every site; optimizer state is untouched.
pub fn broadcast<P: FedParticipant>(server: &GlobalServer, nodes: &mut [P]) -> Result<()> {
    for node in nodes {
        for (local, global) in node.shared_mut().into_iter().zip(&server.models) {
            local.copy_state_from(global)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CommKind {
    /// Triggered by the pace counter.
    Pace,
    /// Closing aggregation when training ends between pace events.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// 1-based step within the epoch (the pace counter `t`).
    pub step: usize,
    pub site: String,
    pub loss: f64,
    pub comm_event: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommRecord {
    pub epoch: usize,
    pub step: usize,
    pub round: u64,
    pub kind: CommKind,
    pub shared: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FedTelemetry {
    pub steps: Vec<StepRecord>,
    pub comms: Vec<CommRecord>,
}

impl FedTelemetry {
    pub fn pace_comms_in_epoch(&self, epoch: usize) -> usize {
        self.comms
            .iter()
            .filter(|c| c.epoch == epoch && c.kind == CommKind::Pace)
            .count()
    }

    /// Loss sequence of one site in step order.
    pub fn site_losses(&self, site: &str) -> Vec<f64> {
        self.steps.iter().filter(|s| s.site == site).map(|s| s.loss).collect()
    }
}

/// Called after every synchronous step of all sites (before a possible
/// communication round) with `(nodes, epoch, step)`.
pub type StepHook<'a, P> = dyn FnMut(&mut [P], usize, usize) -> Result<()> + 'a;

/// An in-progress federated run. Epoch ranges may be run piecewise (with
/// different hooks) as long as they are contiguous.
pub struct FedRun<'a, P: FedParticipant> {
    config: &'a FedConfig,
    nodes: &'a mut [P],
    pub server: GlobalServer,
    pub telemetry: FedTelemetry,
    names: Vec<String>,
    next_epoch: usize,
    synced: bool,
}

impl<'a, P: FedParticipant> FedRun<'a, P> {
    /// Participants must start from identical shared weights.
    pub fn new(config: &'a FedConfig, nodes: &'a mut [P]) -> Result<Self> {
        config.validate()?;
        let first = nodes.first().ok_or_else(|| Error::Empty("federation needs at least one site".into()))?;
        let server = GlobalServer::from_participant(first);
        Ok(Self {
            config,
            names: server.tensor_names(),
            server,
            telemetry: FedTelemetry::default(),
            nodes,
            next_epoch: 0,
            synced: true,
        })
    }

    pub fn nodes(&self) -> &[P] {
        self.nodes
    }

    /// Runs epochs `next..until` (clamped to the configured epoch count).
    pub fn run_until(&mut self, until: usize, mut hook: Option<&mut StepHook<'_, P>>) -> Result<()> {
        let config = self.config;
        for epoch in self.next_epoch..until.min(config.epochs) {
            let lr = config.lr.lr(epoch);
            for node in self.nodes.iter_mut() {
                node.start_epoch(epoch, lr);
            }
            for t in 1..=config.steps_per_epoch {
                let losses = self
                    .nodes
                    .par_iter_mut()
                    .map(|n| n.local_step(epoch))
                    .collect::<Result<Vec<f64>>>()?;
                if let Some(h) = hook.as_deref_mut() {
                    h(self.nodes, epoch, t)?;
                }
                let comm = t % config.tau == 0;
                for (node, loss) in self.nodes.iter().zip(losses) {
                    self.telemetry.steps.push(StepRecord {
                        epoch,
                        step: t,
                        site: node.site_id().to_string(),
                        loss,
                        comm_event: comm,
                    });
                }
                self.synced = comm;
                if comm {
                    self.communicate(epoch, t, CommKind::Pace)?;
                    broadcast(&self.server, self.nodes)?;
                }
            }
            self.next_epoch = epoch + 1;
        }
        Ok(())
    }

    fn communicate(&mut self, epoch: usize, step: usize, kind: CommKind) -> Result<()> {
        self.telemetry.comms.push(CommRecord {
            epoch,
            step,
            round: self.server.round,
            kind,
            shared: self.names.clone(),
        });
        aggregate(&mut self.server, self.nodes, &self.config.noise, self.config.seed)
    }

    /// Runs any remaining epochs and, if training ended between pace events,
    /// performs one closing aggregation.
    pub fn finish(mut self) -> Result<(GlobalServer, FedTelemetry)> {
        self.run_until(self.config.epochs, None)?;
        if !self.synced {
            self.communicate(self.config.epochs - 1, self.config.steps_per_epoch, CommKind::Final)?;
            self.synced = true;
        }
        Ok((self.server, self.telemetry))
    }
}

/// Runs the full federated schedule over prepared participants, which must
/// start from identical shared weights. Returns the final global state.
pub fn run_federated<P: FedParticipant>(
    config: &FedConfig,
    nodes: &mut [P],
    hook: Option<&mut StepHook<'_, P>>,
) -> Result<(GlobalServer, FedTelemetry)> {
    let mut run = FedRun::new(config, nodes)?;
    run.run_until(config.epochs, hook)?;
    run.finish()
}

/// Plain federated training of one shared architecture (no adaptation).
#[derive(Debug, Clone)]
pub struct FedOutcome {
    pub global: Mlp,
    pub telemetry: FedTelemetry,
}

/// Algorithm entry point: builds one node per site from a common
/// initialization and runs the federated schedule.
pub fn run_fed(config: &FedConfig, sites: &[(String, LabeledWindows)]) -> Result<FedOutcome> {
    let first = sites.first().ok_or_else(|| Error::Empty("run_fed needs at least one site".into()))?;
    let arch = crate::nn::Arch::resolve(&config.arch, first.1.feature_dim())?;
    let init = crate::nn::init_model(&arch, config.seed)?;
    let mut nodes = sites
        .iter()
        .map(|(id, data)| SiteNode::new(id, init.clone(), config.adam, data.clone(), config.steps_per_epoch, config.seed))
        .collect::<Result<Vec<_>>>()?;
    let (server, telemetry) = run_federated(config, &mut nodes, None)?;
    Ok(FedOutcome {
        global: server.models.into_iter().next().expect("one shared model"),
        telemetry,
    })
}
