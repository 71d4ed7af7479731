use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

use super::layer::{BatchNorm, Layer};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Where the incoming gradient of [`Mlp::backward`] is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFrom {
    /// Gradient w.r.t. the network output (after softmax/sigmoid).
    Output,
    /// Gradient w.r.t. the pre-activation scores; the final softmax/sigmoid
    /// layer is skipped. Identical to `Output` when there is no final activation.
    Logits,
}

/// How ReLU layers route the backward signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluRule {
    Exact,
    /// Guided backpropagation: additionally zero negative incoming signals.
    Guided,
}

/// One gradient tensor per trainable parameter tensor, in
/// [`Mlp::param_names`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            tensors: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

pub struct Backward {
    pub grads: Gradients,
    pub input_grad: Array2<f64>,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Dense { input: Array2<f64> },
    Relu { output: Array2<f64> },
    BatchNorm { x_hat: Array2<f64>, inv_std: Array1<f64>, train: bool },
    Dropout { mask: Option<Array2<f64>> },
    Softmax { output: Array2<f64> },
    Sigmoid { output: Array2<f64> },
}

/// Activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    batch: usize,
    pub mode: Mode,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// A feed-forward network: an ordered list of layers plus the architecture
/// id it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: String,
    layers: Vec<Layer>,
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Mlp {
    /// Builds a network, checking that dimensions chain, that output
    /// activations only appear last, and that layer hyper-parameters are valid.
    pub fn new(arch: impl Into<String>, layers: Vec<Layer>) -> Result<Self> {
        let mut width: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    if d.bias.len() != d.out_dim() {
                        return Err(Error::Dimension {
                            context: "dense bias",
                            expected: d.out_dim(),
                            actual: d.bias.len(),
                        });
                    }
                    if let Some(w) = width {
                        if w != d.in_dim() {
                            return Err(Error::Dimension {
                                context: "layer chaining",
                                expected: w,
                                actual: d.in_dim(),
                            });
                        }
                    }
                    width = Some(d.out_dim());
                }
                Layer::BatchNorm(bn) => {
                    if !(bn.eps > 0.0) {
                        return Err(Error::InvalidArgument("BatchNorm eps must be > 0".into()));
                    }
                    let dim = bn.dim();
                    if [bn.beta.len(), bn.running_mean.len(), bn.running_var.len()]
                        .iter()
                        .any(|&l| l != dim)
                    {
                        return Err(Error::InvalidArgument("BatchNorm vectors differ in length".into()));
                    }
                    if let Some(w) = width {
                        if w != dim {
                            return Err(Error::Dimension {
                                context: "layer chaining",
                                expected: w,
                                actual: dim,
                            });
                        }
                    }
                    width = Some(dim);
                }
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
                    }
                }
                Layer::Softmax | Layer::Sigmoid => {
                    if i + 1 != layers.len() {
                        return Err(Error::InvalidArgument(
                            "softmax/sigmoid may only be the final layer".into(),
                        ));
                    }
                }
                Layer::Relu => {}
            }
        }
        if width.is_none() {
            return Err(Error::InvalidArgument("network has no sized layer".into()));
        }
        Ok(Self {
            arch: arch.into(),
            layers,
        })
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d.in_dim()),
                Layer::BatchNorm(bn) => Some(bn.dim()),
                _ => None,
            })
            .expect("validated in Mlp::new")
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d.out_dim()),
                Layer::BatchNorm(bn) => Some(bn.dim()),
                _ => None,
            })
            .expect("validated in Mlp::new")
    }

    /// Splits the network before layer `index`, e.g. into a feature
    /// generator and a classifier head.
    pub fn split_at(&self, index: usize) -> Result<(Mlp, Mlp)> {
        if index == 0 || index >= self.layers.len() {
            return Err(Error::InvalidArgument(format!("cannot split {} layers at {index}", self.layers.len())));
        }
        let head = Mlp::new(format!("{}[..{index}]", self.arch), self.layers[..index].to_vec())?;
        let tail = Mlp::new(format!("{}[{index}..]", self.arch), self.layers[index..].to_vec())?;
        Ok((head, tail))
    }

    /// Inverse of [`Mlp::split_at`]: `head` followed by `tail`.
    pub fn concat(head: &Mlp, tail: &Mlp) -> Result<Mlp> {
        let arch = match (head.arch.rsplit_once("[.."), tail.arch.rsplit_once('[')) {
            (Some((a, _)), Some((b, _))) if a == b => a.to_string(),
            _ => format!("{}+{}", head.arch, tail.arch),
        };
        let layers = head.layers.iter().chain(&tail.layers).cloned().collect();
        Mlp::new(arch, layers)
    }

    /// Copies of trainable tensors in canonical order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weight.as_slice().expect("standard layout"));
                    out.push(d.bias.as_slice().expect("standard layout"));
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice().expect("standard layout"));
                    out.push(bn.beta.as_slice().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weight.as_slice_mut().expect("standard layout"));
                    out.push(d.bias.as_slice_mut().expect("standard layout"));
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                    out.push(bn.beta.as_slice_mut().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    /// Stable names such as `1.dense.weight` or `3.bn.gamma`, aligned with
    /// [`Mlp::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(_) => {
                    out.push(format!("{i}.dense.weight"));
                    out.push(format!("{i}.dense.bias"));
                }
                Layer::BatchNorm(_) => {
                    out.push(format!("{i}.bn.gamma"));
                    out.push(format!("{i}.bn.beta"));
                }
                _ => {}
            }
        }
        out
    }

    /// Non-trainable state (BatchNorm running statistics).
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::BatchNorm(bn) = layer {
                out.push(bn.running_mean.as_slice().expect("standard layout"));
                out.push(bn.running_var.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                out.push(bn.running_mean.as_slice_mut().expect("standard layout"));
                out.push(bn.running_var.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Overwrites trainable tensors and buffers with those of `other`.
    pub fn copy_state_from(&mut self, other: &Mlp) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Dimension {
                context: "copy_state_from layers",
                expected: self.layers.len(),
                actual: other.layers.len(),
            });
        }
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            if dst.len() != src.len() {
                return Err(Error::Dimension {
                    context: "copy_state_from tensor",
                    expected: dst.len(),
                    actual: src.len(),
                });
            }
            dst.copy_from_slice(src);
        }
        for (dst, src) in self.buffers_mut().into_iter().zip(other.buffers()) {
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    fn check_input(&self, inputs: &Array2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                context: "forward input",
                expected: self.input_dim(),
                actual: inputs.ncols(),
            });
        }
        if inputs.nrows() == 0 {
            return Err(Error::Empty("forward batch".into()));
        }
        Ok(())
    }

    /// Train-mode forward pass: dropout masks come from `rng` and BatchNorm
    /// uses batch statistics, updating its running averages.
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        inputs: &Array2<f64>,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(inputs)?;
        let batch = inputs.nrows();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = inputs.clone();
        for layer in &mut self.layers {
            x = match layer {
                Layer::Dense(d) => {
                    let out = x.dot(&d.weight) + &d.bias;
                    caches.push(LayerCache::Dense { input: x });
                    out
                }
                Layer::Relu => {
                    x.mapv_inplace(|v| v.max(0.0));
                    caches.push(LayerCache::Relu { output: x.clone() });
                    x
                }
                Layer::BatchNorm(bn) => {
                    let (out, x_hat, inv_std) = batchnorm_train(bn, &x);
                    caches.push(LayerCache::BatchNorm {
                        x_hat,
                        inv_std,
                        train: true,
                    });
                    out
                }
                Layer::Dropout { rate } => {
                    if *rate == 0.0 {
                        caches.push(LayerCache::Dropout { mask: None });
                        x
                    } else {
                        let scale = 1.0 / (1.0 - *rate);
                        // drop when a uniform 32-bit draw falls below rate·2³²
                        let cut = (*rate * 4_294_967_296.0).min(u32::MAX as f64) as u32;
                        let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
                            if rng.random::<u32>() >= cut {
                                scale
                            } else {
                                0.0
                            }
                        });
                        let out = &x * &mask;
                        caches.push(LayerCache::Dropout { mask: Some(mask) });
                        out
                    }
                }
                Layer::Softmax => {
                    let out = softmax_rows(&x);
                    caches.push(LayerCache::Softmax { output: out.clone() });
                    out
                }
                Layer::Sigmoid => {
                    let out = x.mapv(sigmoid);
                    caches.push(LayerCache::Sigmoid { output: out.clone() });
                    out
                }
            };
        }
        Ok((
            x,
            ForwardCache {
                layers: caches,
                batch,
                mode: Mode::Train,
            },
        ))
    }

    /// Eval-mode forward pass with an activation record (for saliency).
    pub fn forward_eval_cached(&self, inputs: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.eval_impl(inputs, self.layers.len(), true)
            .map(|(out, cache)| (out, cache.expect("requested")))
    }

    /// Eval-mode forward pass: dropout is the identity and BatchNorm uses its
    /// running statistics. Pure in `self` and `inputs`.
    pub fn forward_eval(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        self.eval_impl(inputs, self.layers.len(), false).map(|(out, _)| out)
    }

    /// Eval-mode pre-activation scores (everything but a final softmax/sigmoid).
    pub fn logits_eval(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        let end = match self.layers.last() {
            Some(l) if l.is_output_activation() => self.layers.len() - 1,
            _ => self.layers.len(),
        };
        self.eval_impl(inputs, end, false).map(|(out, _)| out)
    }

    fn eval_impl(
        &self,
        inputs: &Array2<f64>,
        end: usize,
        record: bool,
    ) -> Result<(Array2<f64>, Option<ForwardCache>)> {
        self.check_input(inputs)?;
        let batch = inputs.nrows();
        let mut caches = Vec::new();
        let mut x = inputs.clone();
        for layer in &self.layers[..end] {
            x = match layer {
                Layer::Dense(d) => {
                    let out = x.dot(&d.weight) + &d.bias;
                    if record {
                        caches.push(LayerCache::Dense { input: x });
                    }
                    out
                }
                Layer::Relu => {
                    x.mapv_inplace(|v| v.max(0.0));
                    if record {
                        caches.push(LayerCache::Relu { output: x.clone() });
                    }
                    x
                }
                Layer::BatchNorm(bn) => {
                    let inv_std = bn.running_var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                    let x_hat = (&x - &bn.running_mean) * &inv_std;
                    let out = &x_hat * &bn.gamma + &bn.beta;
                    if record {
                        caches.push(LayerCache::BatchNorm {
                            x_hat,
                            inv_std,
                            train: false,
                        });
                    }
                    out
                }
                Layer::Dropout { .. } => {
                    if record {
                        caches.push(LayerCache::Dropout { mask: None });
                    }
                    x
                }
                Layer::Softmax => {
                    let out = softmax_rows(&x);
                    if record {
                        caches.push(LayerCache::Softmax { output: out.clone() });
                    }
                    out
                }
                Layer::Sigmoid => {
                    let out = x.mapv(sigmoid);
                    if record {
                        caches.push(LayerCache::Sigmoid { output: out.clone() });
                    }
                    out
                }
            };
        }
        let cache = record.then(|| ForwardCache {
            layers: caches,
            batch,
            mode: Mode::Eval,
        });
        Ok((x, cache))
    }

    /// Backpropagates `grad` through the recorded forward pass.
    ///
    /// Parameter gradients are exact for the loss whose derivative is `grad`
    /// (w.r.t. the output or the logits, per `from`). With `ReluRule::Guided`
    /// the result is the guided-backprop signal rather than a true gradient.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad: &Array2<f64>,
        from: BackwardFrom,
        rule: ReluRule,
    ) -> Result<Backward> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache("layer count differs from model"));
        }
        let mut end = self.layers.len();
        if from == BackwardFrom::Logits && self.layers.last().is_some_and(Layer::is_output_activation) {
            end -= 1;
        }
        // output activations preserve width, so logits and outputs share it
        if grad.nrows() != cache.batch || grad.ncols() != self.output_dim() {
            return Err(Error::StaleCache("gradient shape does not match cached batch"));
        }

        let names = self.param_names();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        // index of the first parameter tensor of each layer
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut next = 0;
        for layer in &self.layers {
            offsets.push(next);
            if matches!(layer, Layer::Dense(_) | Layer::BatchNorm(_)) {
                next += 2;
            }
        }

        let mut g = grad.clone();
        for idx in (0..end).rev() {
            let layer = &self.layers[idx];
            g = match (layer, &cache.layers[idx]) {
                (Layer::Dense(d), LayerCache::Dense { input }) => {
                    if input.ncols() != d.in_dim() || input.nrows() != g.nrows() {
                        return Err(Error::StaleCache("dense input shape"));
                    }
                    let dw = input.t().dot(&g);
                    let db = g.sum_axis(Axis(0));
                    grads[offsets[idx]] = if dw.is_standard_layout() {
                        dw.into_raw_vec_and_offset().0
                    } else {
                        dw.iter().copied().collect()
                    };
                    grads[offsets[idx] + 1] = db.to_vec();
                    g.dot(&d.weight.t())
                }
                (Layer::Relu, LayerCache::Relu { output }) => {
                    if output.raw_dim() != g.raw_dim() {
                        return Err(Error::StaleCache("relu shape"));
                    }
                    let mut out = g;
                    match rule {
                        ReluRule::Exact => Zip::from(&mut out).and(output).for_each(|gv, &o| {
                            if o <= 0.0 {
                                *gv = 0.0;
                            }
                        }),
                        ReluRule::Guided => Zip::from(&mut out).and(output).for_each(|gv, &o| {
                            if o <= 0.0 || *gv < 0.0 {
                                *gv = 0.0;
                            }
                        }),
                    }
                    out
                }
                (Layer::BatchNorm(bn), LayerCache::BatchNorm { x_hat, inv_std, train }) => {
                    if x_hat.raw_dim() != g.raw_dim() {
                        return Err(Error::StaleCache("batchnorm shape"));
                    }
                    let dgamma = (&g * x_hat).sum_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0));
                    let dx_hat = &g * &bn.gamma;
                    let dx = if *train {
                        let n = g.nrows() as f64;
                        let sum_dx_hat = dx_hat.sum_axis(Axis(0));
                        let sum_dx_hat_xhat = (&dx_hat * x_hat).sum_axis(Axis(0));
                        let mut dx = &dx_hat * n - &sum_dx_hat - &(x_hat * &sum_dx_hat_xhat);
                        dx *= &(inv_std / n);
                        dx
                    } else {
                        dx_hat * inv_std
                    };
                    grads[offsets[idx]] = dgamma.to_vec();
                    grads[offsets[idx] + 1] = dbeta.to_vec();
                    dx
                }
                (Layer::Dropout { .. }, LayerCache::Dropout { mask }) => match mask {
                    Some(m) => {
                        if m.raw_dim() != g.raw_dim() {
                            return Err(Error::StaleCache("dropout shape"));
                        }
                        g * m
                    }
                    None => g,
                },
                (Layer::Softmax, LayerCache::Softmax { output }) => {
                    if output.raw_dim() != g.raw_dim() {
                        return Err(Error::StaleCache("softmax shape"));
                    }
                    let dot = (&g * output).sum_axis(Axis(1)).insert_axis(Axis(1));
                    (g - &dot) * output
                }
                (Layer::Sigmoid, LayerCache::Sigmoid { output }) => {
                    if output.raw_dim() != g.raw_dim() {
                        return Err(Error::StaleCache("sigmoid shape"));
                    }
                    g * &output.mapv(|s| s * (1.0 - s))
                }
                _ => return Err(Error::StaleCache("layer kind differs from cache")),
            };
        }
        // layers skipped by `Logits` contribute no parameters
        for (i, t) in grads.iter_mut().enumerate() {
            if t.is_empty() {
                *t = vec![0.0; self.params()[i].len()];
            }
        }
        Ok(Backward {
            grads: Gradients { tensors: grads },
            input_grad: g,
        })
    }
}

fn batchnorm_train(bn: &mut BatchNorm, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
    let x_hat = &centered * &inv_std;
    let out = &x_hat * &bn.gamma + &bn.beta;

    let m = bn.momentum;
    let unbiased = if x.nrows() > 1 { &var * (n / (n - 1.0)) } else { var.clone() };
    bn.running_mean = &bn.running_mean * (1.0 - m) + &mean * m;
    bn.running_var = &bn.running_var * (1.0 - m) + &unbiased * m;
    (out, x_hat, inv_std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{cross_entropy, cross_entropy_logit_grad, init_model, Arch, Dense};
    use crate::rng;
    use ndarray::array;
    use rand::Rng;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, "batch");
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-2.0..2.0))
    }

    #[test]
    fn gradients_ignore_input_memory_layout() {
        let model = init_model(&Arch::parse("discriminator:4").unwrap(), 3).unwrap();
        let x = random_batch(7, 4, 2);
        let x_f = x.t().as_standard_layout().into_owned().reversed_axes();
        assert_eq!(x, x_f);
        let grad = Array2::from_elem((7, 1), 0.1);
        let (_, c) = model.forward_eval_cached(&x).unwrap();
        let (_, c_f) = model.forward_eval_cached(&x_f).unwrap();
        let a = model.backward(&c, &grad, BackwardFrom::Logits, ReluRule::Exact).unwrap();
        let b = model.backward(&c_f, &grad, BackwardFrom::Logits, ReluRule::Exact).unwrap();
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn rejects_bad_layer_orders() {
        let d = Dense::init(3, 2, &mut rng::stream(0, "x"));
        assert!(Mlp::new("bad", vec![Layer::Softmax, Layer::Dense(d.clone())]).is_err());
        let d2 = Dense::init(4, 2, &mut rng::stream(0, "x"));
        assert!(Mlp::new("bad", vec![Layer::Dense(d.clone()), Layer::Dense(d2)]).is_err());
        assert!(Mlp::new("bad", vec![Layer::Dropout { rate: 1.0 }, Layer::Dense(d)]).is_err());
    }

    #[test]
    fn eval_rows_are_distributions() {
        let model = init_model(&Arch::parse("mlp:20-5-3").unwrap(), 3).unwrap();
        let x = random_batch(16, 20, 1);
        let p = model.forward_eval(&x).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_input_with_zero_bias_gives_uniform_probs() {
        // ReLU(0)=0 and zero biases leave every logit at beta=0.
        let model = init_model(&Arch::parse("mlp:10-4-2").unwrap(), 9).unwrap();
        let p = model.forward_eval(&Array2::zeros((3, 10))).unwrap();
        for v in p.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_ignores_dropout() {
        let with = init_model(&Arch::parse("fed-mlp:30").unwrap(), 5).unwrap();
        let layers: Vec<Layer> = with
            .layers()
            .iter()
            .filter(|l| !matches!(l, Layer::Dropout { .. }))
            .cloned()
            .collect();
        let without = Mlp::new("no-dropout", layers).unwrap();
        let x = random_batch(7, 30, 2);
        assert_eq!(with.forward_eval(&x).unwrap(), without.forward_eval(&x).unwrap());
        assert_eq!(with.forward_eval(&x).unwrap(), with.forward_eval(&x).unwrap());
    }

    #[test]
    fn batchnorm_normalizes_in_train_mode() {
        let mut bn = BatchNorm::new(4);
        let x = random_batch(12, 4, 3) * 5.0 + 3.0;
        let (_, x_hat, _) = batchnorm_train(&mut bn, &x);
        for col in x_hat.columns() {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut model = Mlp::new(
            "dropout-only",
            vec![
                Layer::Dropout { rate: 0.5 },
                Layer::Dense(Dense {
                    weight: Array2::eye(4),
                    bias: Array1::zeros(4),
                }),
            ],
        )
        .unwrap();
        let x = Array2::ones((50, 4));
        let (out, _) = model.forward_train(&x, &mut rng::stream(1, "d")).unwrap();
        assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(out.iter().any(|&v| v == 0.0) && out.iter().any(|&v| v == 2.0));
    }

    #[test]
    fn zero_weight_layer_bias_gradient_is_mean_residual() {
        let mut model = Mlp::new(
            "frozen",
            vec![
                Layer::Dense(Dense {
                    weight: Array2::zeros((3, 2)),
                    bias: Array1::zeros(2),
                }),
                Layer::Softmax,
            ],
        )
        .unwrap();
        let x = Array2::zeros((4, 3));
        let labels = vec![0, 1, 1, 1];
        let (p, cache) = model.forward_train(&x, &mut rng::stream(0, "z")).unwrap();
        let g = cross_entropy_logit_grad(&p, &labels).unwrap();
        let back = model.backward(&cache, &g, BackwardFrom::Logits, ReluRule::Exact).unwrap();
        // softmax = (0.5, 0.5); mean(p - onehot) = (0.5 - 0.25, 0.5 - 0.75)
        assert!((back.grads.tensors[1][0] - 0.25).abs() < 1e-15);
        assert!((back.grads.tensors[1][1] + 0.25).abs() < 1e-15);
        assert!(back.grads.tensors[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let mut model = init_model(&Arch::parse("mlp:6-4-2").unwrap(), 11).unwrap();
        let x = random_batch(5, 6, 4);
        let labels = vec![0, 1, 0, 1, 1];
        let mut x2 = Array2::zeros((10, 6));
        x2.slice_mut(ndarray::s![..5, ..]).assign(&x);
        x2.slice_mut(ndarray::s![5.., ..]).assign(&x);
        let labels2: Vec<usize> = labels.iter().chain(&labels).copied().collect();

        let grad_of = |m: &mut Mlp, x: &Array2<f64>, y: &[usize]| {
            let (p, cache) = m.forward_train(x, &mut rng::stream(0, "dup")).unwrap();
            let g = cross_entropy_logit_grad(&p, y).unwrap();
            m.backward(&cache, &g, BackwardFrom::Logits, ReluRule::Exact).unwrap().grads
        };
        let a = grad_of(&mut model.clone(), &x, &labels);
        let b = grad_of(&mut model, &x2, &labels2);
        for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
            for (va, vb) in ta.iter().zip(tb) {
                assert!((va - vb).abs() < 1e-12, "{va} vs {vb}");
            }
        }
    }

    #[test]
    fn output_and_logit_backward_agree_for_cross_entropy() {
        let mut model = init_model(&Arch::parse("mlp:8-5-3").unwrap(), 2).unwrap();
        let x = random_batch(6, 8, 5);
        let labels = vec![0, 1, 2, 0, 1, 2];
        let (p, cache) = model.forward_train(&x, &mut rng::stream(0, "o")).unwrap();
        let logit = model
            .backward(&cache, &cross_entropy_logit_grad(&p, &labels).unwrap(), BackwardFrom::Logits, ReluRule::Exact)
            .unwrap();
        let mut dp = Array2::zeros(p.raw_dim());
        for (i, &y) in labels.iter().enumerate() {
            dp[[i, y]] = -1.0 / (6.0 * p[[i, y]]);
        }
        let out = model.backward(&cache, &dp, BackwardFrom::Output, ReluRule::Exact).unwrap();
        for (ta, tb) in logit.grads.tensors.iter().zip(&out.grads.tensors) {
            for (va, vb) in ta.iter().zip(tb) {
                assert!((va - vb).abs() < 1e-12);
            }
        }
        assert!(cross_entropy(&p, &labels).unwrap() >= 0.0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut model = init_model(&Arch::parse("mlp:8-5-2").unwrap(), 2).unwrap();
        let (_, cache) = model.forward_train(&random_batch(4, 8, 1), &mut rng::stream(0, "s")).unwrap();
        let wrong = Array2::zeros((3, 2));
        assert!(matches!(
            model.backward(&cache, &wrong, BackwardFrom::Logits, ReluRule::Exact),
            Err(Error::StaleCache(_))
        ));
        let other = init_model(&Arch::parse("dense:8-2").unwrap(), 2).unwrap();
        assert!(other
            .backward(&cache, &array![[0.0, 0.0]], BackwardFrom::Logits, ReluRule::Exact)
            .is_err());
    }

    #[test]
    fn split_then_concat_is_identity() {
        let model = init_model(&Arch::parse("fed-mlp:12").unwrap(), 4).unwrap();
        let (g, c) = model.split_at(4).unwrap();
        assert_eq!(g.output_dim(), 16);
        assert_eq!(c.input_dim(), 16);
        let joined = Mlp::concat(&g, &c).unwrap();
        assert_eq!(joined, model);
        let x = random_batch(5, 12, 9);
        let feats = g.forward_eval(&x).unwrap();
        assert_eq!(c.forward_eval(&feats).unwrap(), model.forward_eval(&x).unwrap());
    }
}
