use rand::seq::SliceRandom;

use super::{FedParticipant, LabeledWindows};
use crate::nn::{cross_entropy, cross_entropy_logit_grad, AdamConfig, AdamState, BackwardFrom, LrSchedule, Mlp, ReluRule};
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

/// Epoch-wise shuffled mini-batches of fixed size
/// `ceil(len / steps_per_epoch)`. Batches wrap around the shuffled order, so
/// every step of an epoch sees a full batch and every row is visited at least
/// once per epoch.
#[derive(Debug, Clone)]
pub struct DataIter {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl DataIter {
    pub fn new(len: usize, steps_per_epoch: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Empty("site has no training windows".into()));
        }
        if steps_per_epoch == 0 {
            return Err(Error::InvalidArgument("steps_per_epoch must be >= 1".into()));
        }
        Ok(Self {
            order: (0..len).collect(),
            cursor: 0,
            batch_size: len.div_ceil(steps_per_epoch),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn reshuffle(&mut self, rng: &mut StreamRng) {
        self.order.sort_unstable();
        self.order.shuffle(rng);
        self.cursor = 0;
    }

    pub fn next_rows(&mut self) -> Vec<usize> {
        let n = self.order.len();
        let rows = (0..self.batch_size).map(|i| self.order[(self.cursor + i) % n]).collect();
        self.cursor = (self.cursor + self.batch_size) % n;
        rows
    }
}

/// A site: its model, optimizer, private data and random stream.
#[derive(Debug, Clone)]
pub struct SiteNode {
    pub site_id: String,
    pub model: Mlp,
    pub optimizer: AdamState,
    pub(crate) data: LabeledWindows,
    pub(crate) iter: DataIter,
    pub(crate) rng: StreamRng,
}

impl SiteNode {
    pub fn new(
        site_id: &str,
        model: Mlp,
        adam: AdamConfig,
        data: LabeledWindows,
        steps_per_epoch: usize,
        seed: u64,
    ) -> Result<Self> {
        if data.feature_dim() != model.input_dim() {
            return Err(Error::Dimension {
                context: "site data width",
                expected: model.input_dim(),
                actual: data.feature_dim(),
            });
        }
        Ok(Self {
            site_id: site_id.to_string(),
            optimizer: AdamState::new(&model, adam),
            iter: DataIter::new(data.len(), steps_per_epoch)?,
            rng: rng::stream(seed, &format!("site/{site_id}")),
            model,
            data,
        })
    }

    pub fn data(&self) -> &LabeledWindows {
        &self.data
    }

    pub fn batch_size(&self) -> usize {
        self.iter.batch_size()
    }

    /// Draws the next mini-batch rows (advancing the iterator).
    pub fn next_rows(&mut self) -> Vec<usize> {
        self.iter.next_rows()
    }

    pub fn rng_mut(&mut self) -> &mut StreamRng {
        &mut self.rng
    }

    /// Reshuffles the data and sets this epoch's learning rate.
    pub fn begin_epoch(&mut self, lr: f64) {
        self.iter.reshuffle(&mut self.rng);
        self.optimizer.set_lr(lr);
    }

    /// One forward/backward/Adam step on the next mini-batch. Returns the
    /// batch loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let rows = self.iter.next_rows();
        let batch = self.data.batch(&rows)?;
        let (probs, cache) = self.model.forward_train(&batch.inputs, &mut self.rng)?;
        let loss = cross_entropy(&probs, &batch.labels)?;
        let grad = cross_entropy_logit_grad(&probs, &batch.labels)?;
        let back = self.model.backward(&cache, &grad, BackwardFrom::Logits, ReluRule::Exact)?;
        self.optimizer.step(self.model.params_mut(), &back.grads)?;
        Ok(loss)
    }
}

impl FedParticipant for SiteNode {
    fn site_id(&self) -> &str {
        &self.site_id
    }

    fn start_epoch(&mut self, _epoch: usize, lr: f64) {
        self.begin_epoch(lr);
    }

    fn local_step(&mut self, _epoch: usize) -> Result<f64> {
        self.step()
    }

    fn shared(&self) -> Vec<(&'static str, &Mlp)> {
        vec![("global", &self.model)]
    }

    fn shared_mut(&mut self) -> Vec<&mut Mlp> {
        vec![&mut self.model]
    }
}

/// Centralized training of one node for `epochs × steps_per_epoch` steps
/// with the same schedule as federated training. Returns the loss sequence.
pub fn train_local(node: &mut SiteNode, epochs: usize, steps_per_epoch: usize, lr: &LrSchedule) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(epochs * steps_per_epoch);
    for epoch in 0..epochs {
        node.begin_epoch(lr.lr(epoch));
        for _ in 0..steps_per_epoch {
            losses.push(node.step()?);
        }
    }
    Ok(losses)
}
