//! Mixture of experts over the federated global model and a site-private
//! model: `ŷ = a(x)·y_G + (1 − a(x))·y_P`.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::federation::{run_federated, FedConfig, FedParticipant, FedTelemetry, LabeledWindows, SiteNode};
use crate::nn::{init_model, AdamState, Arch, Batch, BackwardFrom, Gradients, Layer, Mlp, ReluRule, PROB_FLOOR};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeConfig {
    pub private_arch: String,
    /// `gate` gates on the input features; `output-gate` gates on the two
    /// experts' positive-class probabilities; any other sigmoid-headed
    /// architecture with one output (e.g. `discriminator`) gates on the input.
    pub gate_arch: String,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            private_arch: "single-mlp".into(),
            gate_arch: "gate".into(),
        }
    }
}

/// The site-local part of the mixture: private expert and gate.
#[derive(Debug, Clone, PartialEq)]
pub struct MoEHead {
    pub private: Mlp,
    pub gate: Mlp,
}

/// Convex combination of two class-probability matrices with per-row weight
/// `a` (a column vector).
pub fn mix(a: &Array2<f64>, y_global: &Array2<f64>, y_private: &Array2<f64>) -> Array2<f64> {
    y_global * a + y_private * &a.mapv(|v| 1.0 - v)
}

impl MoEHead {
    pub fn new(private: Mlp, gate: Mlp) -> Result<Self> {
        if gate.output_dim() != 1 || !matches!(gate.layers().last(), Some(Layer::Sigmoid)) {
            return Err(Error::InvalidArgument("gate must end in a single sigmoid unit".into()));
        }
        Ok(Self { private, gate })
    }

    /// Whether the gate reads the experts' outputs rather than the features.
    pub fn gates_on_outputs(&self) -> bool {
        self.gate.arch() == Arch::OutputGate.to_string()
    }

    fn gate_input(&self, x: &Array2<f64>, y_global: &Array2<f64>, y_private: &Array2<f64>) -> Array2<f64> {
        if self.gates_on_outputs() {
            ndarray::concatenate![Axis(1), y_global.slice(ndarray::s![.., 1..2]), y_private.slice(ndarray::s![.., 1..2])]
        } else {
            x.clone()
        }
    }

    /// Eval-mode mixed class probabilities.
    pub fn forward(&self, global: &Mlp, x: &Array2<f64>) -> Result<Array2<f64>> {
        let y_g = global.forward_eval(x)?;
        let y_p = self.private.forward_eval(x)?;
        let a = self.gate.forward_eval(&self.gate_input(x, &y_g, &y_p))?;
        Ok(mix(&a, &y_g, &y_p))
    }

    /// Eval-mode gate weight on the global model, one per row of `x`.
    pub fn gate_values(&self, global: &Mlp, x: &Array2<f64>) -> Result<Vec<f64>> {
        let y_g = global.forward_eval(x)?;
        let y_p = self.private.forward_eval(x)?;
        Ok(self.gate.forward_eval(&self.gate_input(x, &y_g, &y_p))?.column(0).to_vec())
    }
}

/// `moe_forward(head, global, x)`: eval-mode mixture output.
pub fn moe_forward(head: &MoEHead, global: &Mlp, x: &Array2<f64>) -> Result<Array2<f64>> {
    head.forward(global, x)
}

/// Loss and gradients of the mixed cross-entropy for all three components.
#[derive(Debug, Clone)]
pub struct MoeGrads {
    pub loss: f64,
    pub global: Gradients,
    pub private: Gradients,
    pub gate: Gradients,
}

/// Train-mode forward and joint backward of `CE(ŷ)` through the global
/// model, the private model and the gate.
pub fn moe_train_grads<R: Rng + ?Sized>(global: &mut Mlp, head: &mut MoEHead, batch: &Batch, rng: &mut R) -> Result<MoeGrads> {
    let x = &batch.inputs;
    let (y_g, cache_g) = global.forward_train(x, rng)?;
    let (y_p, cache_p) = head.private.forward_train(x, rng)?;
    let gate_in = head.gate_input(x, &y_g, &y_p);
    let (a, cache_a) = head.gate.forward_train(&gate_in, rng)?;
    let y = mix(&a, &y_g, &y_p);

    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut d_y = Array2::zeros(y.raw_dim());
    for (i, &label) in batch.labels.iter().enumerate() {
        if label >= y.ncols() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: y.ncols(),
            });
        }
        let p = y[[i, label]];
        loss -= p.max(PROB_FLOOR).ln() / b;
        // the floor is flat, so it passes no gradient
        if p > PROB_FLOOR {
            d_y[[i, label]] = -1.0 / (b * p);
        }
    }
    let mut d_g = &d_y * &a;
    let mut d_p = &d_y * &a.mapv(|v| 1.0 - v);
    let d_a = (&d_y * &(&y_g - &y_p)).sum_axis(Axis(1)).insert_axis(Axis(1));
    let gate_back = head.gate.backward(&cache_a, &d_a, BackwardFrom::Output, ReluRule::Exact)?;
    if head.gates_on_outputs() {
        let gi = &gate_back.input_grad;
        for i in 0..d_g.nrows() {
            d_g[[i, 1]] += gi[[i, 0]];
            d_p[[i, 1]] += gi[[i, 1]];
        }
    }
    let back_g = global.backward(&cache_g, &d_g, BackwardFrom::Output, ReluRule::Exact)?;
    let back_p = head.private.backward(&cache_p, &d_p, BackwardFrom::Output, ReluRule::Exact)?;
    Ok(MoeGrads {
        loss,
        global: back_g.grads,
        private: back_p.grads,
        gate: gate_back.grads,
    })
}

/// A federated site carrying a local mixture head. Only the global model is
/// shared.
#[derive(Debug, Clone)]
pub struct MoeNode {
    pub base: SiteNode,
    pub head: MoEHead,
    private_opt: AdamState,
    gate_opt: AdamState,
}

impl MoeNode {
    pub fn new(base: SiteNode, head: MoEHead) -> Self {
        let cfg = base.optimizer.config;
        Self {
            private_opt: AdamState::new(&head.private, cfg),
            gate_opt: AdamState::new(&head.gate, cfg),
            base,
            head,
        }
    }
}

impl FedParticipant for MoeNode {
    fn site_id(&self) -> &str {
        &self.base.site_id
    }

    fn start_epoch(&mut self, _epoch: usize, lr: f64) {
        self.base.begin_epoch(lr);
        self.private_opt.set_lr(lr);
        self.gate_opt.set_lr(lr);
    }

    fn local_step(&mut self, _epoch: usize) -> Result<f64> {
        let rows = self.base.iter.next_rows();
        let batch = self.base.data.batch(&rows)?;
        let g = moe_train_grads(&mut self.base.model, &mut self.head, &batch, &mut self.base.rng)?;
        self.base.optimizer.step(self.base.model.params_mut(), &g.global)?;
        self.private_opt.step(self.head.private.params_mut(), &g.private)?;
        self.gate_opt.step(self.head.gate.params_mut(), &g.gate)?;
        Ok(g.loss)
    }

    fn shared(&self) -> Vec<(&'static str, &Mlp)> {
        vec![("global", &self.base.model)]
    }

    fn shared_mut(&mut self) -> Vec<&mut Mlp> {
        vec![&mut self.base.model]
    }
}

#[derive(Debug, Clone)]
pub struct MoeOutcome {
    pub global: Mlp,
    /// One head per site, in input order.
    pub heads: Vec<(String, MoEHead)>,
    pub telemetry: FedTelemetry,
}

/// Federated training of the global model with noise, jointly with local,
/// never-shared private experts and gates.
pub fn train_fed_moe(fed: &FedConfig, moe: &MoeConfig, sites: &[(String, LabeledWindows)]) -> Result<MoeOutcome> {
    let dim = sites
        .first()
        .ok_or_else(|| Error::Empty("fed-moe needs at least one site".into()))?
        .1
        .feature_dim();
    let global = init_model(&Arch::resolve(&fed.arch, dim)?, fed.seed)?;
    let private = init_model(&Arch::resolve(&moe.private_arch, dim)?, fed.seed)?;
    let gate = init_model(&Arch::resolve(&moe.gate_arch, dim)?, fed.seed)?;
    let head = MoEHead::new(private, gate)?;
    let mut nodes = sites
        .iter()
        .map(|(id, data)| {
            let base = SiteNode::new(id, global.clone(), fed.adam, data.clone(), fed.steps_per_epoch, fed.seed)?;
            Ok(MoeNode::new(base, head.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (server, telemetry) = run_federated(fed, &mut nodes, None)?;
    Ok(MoeOutcome {
        global: server.models.into_iter().next().expect("one shared model"),
        heads: nodes.into_iter().map(|n| (n.base.site_id, n.head)).collect(),
        telemetry,
    })
}

/// Counts of gate values in `bins` equal-width bins over [0, 1].
pub fn gate_histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        let i = ((v * bins as f64) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn parts(seed: u64) -> (Mlp, MoEHead) {
        let global = init_model(&Arch::parse("mlp:6-4-2").unwrap(), seed).unwrap();
        let private = init_model(&Arch::parse("mlp:6-3-2").unwrap(), seed + 1).unwrap();
        let gate = init_model(&Arch::parse("gate:6").unwrap(), seed + 2).unwrap();
        (global, MoEHead::new(private, gate).unwrap())
    }

    fn inputs(rows: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, "moe-x");
        Array2::from_shape_fn((rows, 6), |_| r.random_range(-1.5..1.5))
    }

    fn set_gate_bias(head: &mut MoEHead, b: f64) {
        let mut p = head.gate.params_mut();
        p[0].fill(0.0);
        p[1][0] = b;
    }

    #[test]
    fn gate_saturation_selects_an_expert() {
        let (global, mut head) = parts(1);
        let x = inputs(7, 2);
        set_gate_bias(&mut head, 30.0);
        let y = head.forward(&global, &x).unwrap();
        let diff = (&y - &global.forward_eval(&x).unwrap()).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-9));
        set_gate_bias(&mut head, -30.0);
        let y = head.forward(&global, &x).unwrap();
        let diff = (&y - &head.private.forward_eval(&x).unwrap()).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-9));
    }

    #[test]
    fn equal_experts_pass_through_and_rows_sum_to_one() {
        let (global, mut head) = parts(3);
        let x = inputs(9, 4);
        let y = head.forward(&global, &x).unwrap();
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(head.gate_values(&global, &x).unwrap().iter().all(|&a| a > 0.0 && a < 1.0));

        let twin = init_model(&Arch::parse("mlp:6-4-2").unwrap(), 1).unwrap();
        head.private = twin.clone();
        let y = head.forward(&twin, &x).unwrap();
        let diff = (&y - &twin.forward_eval(&x).unwrap()).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-15));
    }

    fn eval_loss(global: &Mlp, head: &MoEHead, batch: &Batch) -> f64 {
        // dropout-free parts: a train-mode pass without rng use
        let mut g = global.clone();
        let mut h = head.clone();
        moe_train_grads(&mut g, &mut h, batch, &mut rng::stream(0, "unused"))
            .unwrap()
            .loss
    }

    #[derive(Clone, Copy)]
    enum Part {
        Global,
        Private,
        Gate,
    }

    fn nudge(global: &Mlp, head: &MoEHead, part: Part, tensor: usize, k: usize, by: f64) -> (Mlp, MoEHead) {
        let (mut g, mut h) = (global.clone(), head.clone());
        let model = match part {
            Part::Global => &mut g,
            Part::Private => &mut h.private,
            Part::Gate => &mut h.gate,
        };
        model.params_mut()[tensor][k] += by;
        (g, h)
    }

    fn check_fd(part: Part, tensor: usize, analytic: &[f64], global: &Mlp, head: &MoEHead, batch: &Batch) {
        let h = 1e-5;
        for k in 0..analytic.len() {
            let (gp, hp) = nudge(global, head, part, tensor, k, h);
            let (gm, hm) = nudge(global, head, part, tensor, k, -h);
            let fd = (eval_loss(&gp, &hp, batch) - eval_loss(&gm, &hm, batch)) / (2.0 * h);
            let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-6);
            assert!(err < 1e-4, "component {k}: fd {fd} analytic {}", analytic[k]);
        }
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        for gate_arch in ["gate:6", "output-gate"] {
            let (global, mut head) = parts(5);
            head.gate = init_model(&Arch::parse(gate_arch).unwrap(), 8).unwrap();
            let batch = Batch::new(inputs(8, 6), vec![0, 1, 1, 0, 1, 0, 0, 1]).unwrap();
            let g = moe_train_grads(&mut global.clone(), &mut head.clone(), &batch, &mut rng::stream(0, "unused")).unwrap();
            check_fd(Part::Global, 0, &g.global.tensors[0], &global, &head, &batch);
            check_fd(Part::Private, 0, &g.private.tensors[0], &global, &head, &batch);
            check_fd(Part::Gate, 0, &g.gate.tensors[0], &global, &head, &batch);
            check_fd(Part::Gate, 1, &g.gate.tensors[1], &global, &head, &batch);
        }
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(gate_histogram(&[0.0, 0.05, 0.5, 0.99, 1.0], 10), vec![2, 0, 0, 0, 0, 1, 0, 0, 0, 2]);
    }

    #[test]
    fn rejects_non_sigmoid_gate() {
        let private = init_model(&Arch::parse("mlp:6-3-2").unwrap(), 0).unwrap();
        let bad = init_model(&Arch::parse("dense:6-1").unwrap(), 0).unwrap();
        assert!(MoEHead::new(private, bad).is_err());
    }
}
