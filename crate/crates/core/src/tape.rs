//! Reverse-mode differentiation over a closed set of primitive operations.
//!
//! Every primitive appends one [`Node`] to the [`Tape`]. [`Tape::backward`]
//! walks the nodes in strict reverse order and applies the hand-derived
//! backward rule of each op. Spike nonlinearities use the triangular
//! surrogate derivative instead of their true (almost-everywhere zero)
//! derivative, and the LIF reset factor is treated as a constant.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, ConvGeometry};
use crate::snn::{surrogate, NeuronConfig};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn at(index: usize) -> Self {
        Var(index)
    }
}

/// What a signal carries: real-valued synaptic currents or binary spikes.
///
/// `PooledSpike` marks 2x2-averaged spikes; the pooling folds into the
/// following convolution, which then still consumes spikes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalKind {
    Current,
    Spike,
    PooledSpike,
}

impl SignalKind {
    pub fn is_spike_like(self) -> bool {
        matches!(self, SignalKind::Spike | SignalKind::PooledSpike)
    }
}

/// One recorded primitive, with the inputs and saved activations its
/// backward rule needs.
#[derive(Clone, Debug)]
pub enum Op<F> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    AvgPool2x2(Var),
    Upsample2x(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Concat(Vec<Var>),
    /// `(B, C, S) -> (B, H, W, C, S)`.
    BroadcastSpatial(Var),
    /// Appends a time axis: `(..) -> (.., S)`.
    RepeatTime(Var),
    /// Averages out the time axis: `(.., S) -> (..)`.
    MeanTime(Var),
    Mean(Var),
    /// `(1/B) sum_b w_b sum_i x[b, i]^2`.
    WeightedSumSq {
        input: Var,
        weights: Vec<F>,
    },
    Reshape(Var),
    SpikeThreshold {
        input: Var,
        neuron: NeuronConfig,
    },
    Lif {
        input: Var,
        neuron: NeuronConfig,
        membrane: Vec<F>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        gain: F,
        normalized: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
}

impl<F> Op<F> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::AvgPool2x2(_) => "avgpool2x2",
            Op::Upsample2x(_) => "upsample2x",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Concat(_) => "concat",
            Op::BroadcastSpatial(_) => "broadcast_spatial",
            Op::RepeatTime(_) => "repeat_time",
            Op::MeanTime(_) => "mean_time",
            Op::Mean(_) => "mean",
            Op::WeightedSumSq { .. } => "weighted_sum_sq",
            Op::Reshape(_) => "reshape",
            Op::SpikeThreshold { .. } => "spike_threshold",
            Op::Lif { .. } => "lif",
            Op::BatchNorm { .. } => "batch_norm",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node<F> {
    pub value: Tensor<F>,
    pub op: Op<F>,
    pub kind: SignalKind,
    pub requires_grad: bool,
    pub label: Option<String>,
}

/// Per-channel batch moments measured by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of values per channel the moments were taken over.
    pub count: usize,
}

/// Ordered record of primitive operations.
#[derive(Debug)]
pub struct Tape<F = f32> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values but no gradient information.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn nodes(&self) -> &[Node<F>] {
        &self.nodes
    }

    pub fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> SignalKind {
        self.nodes[v.0].kind
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, kind: SignalKind, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad || matches!(op, Op::Leaf) {
            op
        } else {
            strip_saved(op)
        };
        self.nodes.push(Node {
            value,
            op,
            kind,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<F>, kind: SignalKind, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            kind,
            requires_grad: requires_grad && self.grad_enabled,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, SignalKind::Current, true)
    }

    /// A constant leaf carrying real-valued data.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, SignalKind::Current, false)
    }

    /// A constant leaf carrying spikes. Rejects non-binary data.
    pub fn spikes(&mut self, value: Tensor<F>) -> Result<Var> {
        if !value.is_binary() {
            return Err(Error::Invalid("spike input contains non-binary values".into()));
        }
        Ok(self.leaf(value, SignalKind::Spike, false))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let d = ConvDims::resolve(self.shape(input), self.shape(weight), geom)?;
        if let Some(b) = bias {
            if self.shape(b) != [d.cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), d.cout),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &d,
        );
        let value = Tensor::new(d.out_shape(), out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            SignalKind::Current,
            &inputs,
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 3 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                "linear",
                format!("input {:?} (N,Din,S) vs weight {:?} (Dout,Din)", xs, ws),
            ));
        }
        let (rows, din, steps, dout) = (xs[0], xs[1], xs[2], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear", format!("bias {:?} for {} outputs", self.shape(b), dout)));
            }
        }
        let out = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            rows,
            din,
            dout,
            steps,
        );
        let value = Tensor::new(vec![rows, dout, steps], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::Linear { input, weight, bias }, SignalKind::Current, &inputs))
    }

    fn require_rank5(&self, op: &'static str, v: Var) -> Result<()> {
        if self.shape(v).len() != 5 {
            return Err(Error::shape(op, format!("expected (B,H,W,C,S), got {:?}", self.shape(v))));
        }
        Ok(())
    }

    pub fn avgpool2x2(&mut self, input: Var) -> Result<Var> {
        self.require_rank5("avgpool2x2", input)?;
        let s = self.shape(input).to_vec();
        if !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::shape("avgpool2x2", format!("odd spatial extent {}x{}", s[1], s[2])));
        }
        let out = kernels::avgpool2x2_forward(self.value(input).data(), &s);
        let value = Tensor::new(vec![s[0], s[1] / 2, s[2] / 2, s[3], s[4]], out)?;
        let kind = if self.kind(input).is_spike_like() {
            SignalKind::PooledSpike
        } else {
            SignalKind::Current
        };
        Ok(self.push(value, Op::AvgPool2x2(input), kind, &[input]))
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        self.require_rank5("upsample2x", input)?;
        let s = self.shape(input).to_vec();
        let out = kernels::upsample2x_forward(self.value(input).data(), &s);
        let value = Tensor::new(vec![s[0], 2 * s[1], 2 * s[2], s[3], s[4]], out)?;
        let kind = self.kind(input);
        Ok(self.push(value, Op::Upsample2x(input), kind, &[input]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), SignalKind::Current, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), SignalKind::Current, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), SignalKind::Current, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Result<Var> {
        let value = self.value(a).scale(k);
        Ok(self.push(value, Op::Scale(a, k), SignalKind::Current, &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| if v > F::zero() { v } else { F::zero() });
        Ok(self.push(value, Op::Relu(a), SignalKind::Current, &[a]))
    }

    /// Concatenates along the channel axis (second to last).
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        let (outer, _, steps) = kernels::channel_split(&base)?;
        let r = base.len();
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != r || s[..r - 2] != base[..r - 2] || s[r - 1] != steps {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, base)));
            }
            channels.push(s[r - 2]);
        }
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(outer * total * steps);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&channels) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * c * steps..(o + 1) * c * steps]);
            }
        }
        let mut shape = base;
        shape[r - 2] = total;
        let kinds: Vec<SignalKind> = inputs.iter().map(|&v| self.kind(v)).collect();
        let kind = if kinds.iter().all(|&k| k == SignalKind::Spike) {
            SignalKind::Spike
        } else if kinds.iter().all(|k| k.is_spike_like()) {
            SignalKind::PooledSpike
        } else {
            SignalKind::Current
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec()), kind, inputs))
    }

    pub fn broadcast_spatial(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("broadcast_spatial", format!("expected (B,C,S), got {:?}", s)));
        }
        let blk = s[1] * s[2];
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(s[0] * h * w * blk);
        for b in 0..s[0] {
            for _ in 0..h * w {
                data.extend_from_slice(&src[b * blk..(b + 1) * blk]);
            }
        }
        let value = Tensor::new(vec![s[0], h, w, s[1], s[2]], data)?;
        let kind = self.kind(input);
        Ok(self.push(value, Op::BroadcastSpatial(input), kind, &[input]))
    }

    pub fn repeat_time(&mut self, input: Var, steps: usize) -> Result<Var> {
        if steps == 0 {
            return Err(Error::shape("repeat_time", "zero time steps"));
        }
        let value = repeat_last(self.value(input), steps);
        let kind = self.kind(input);
        Ok(self.push(value, Op::RepeatTime(input), kind, &[input]))
    }

    pub fn mean_time(&mut self, input: Var) -> Result<Var> {
        if self.shape(input).is_empty() {
            return Err(Error::shape("mean_time", "rank 0"));
        }
        let value = mean_last(self.value(input));
        Ok(self.push(value, Op::MeanTime(input), SignalKind::Current, &[input]))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = t.sum() / F::from_f64(t.numel() as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mean(input), SignalKind::Current, &[input]))
    }

    /// `(1/B) sum_b weights[b] * ||x[b]||^2` over the leading (batch) axis.
    pub fn weighted_sum_sq(&mut self, input: Var, weights: &[F]) -> Result<Var> {
        let t = self.value(input);
        let b = *t.shape().first().ok_or_else(|| Error::shape("weighted_sum_sq", "rank 0"))?;
        if weights.len() != b || b == 0 {
            return Err(Error::shape(
                "weighted_sum_sq",
                format!("{} weights for batch of {}", weights.len(), b),
            ));
        }
        let per = t.numel() / b;
        let mut total = F::zero();
        for (i, &w) in weights.iter().enumerate() {
            let s: F = t.data()[i * per..(i + 1) * per].iter().map(|&v| v * v).sum();
            total = total + w * s;
        }
        let value = Tensor::scalar(total / F::from_f64(b as f64));
        Ok(self.push(
            value,
            Op::WeightedSumSq {
                input,
                weights: weights.to_vec(),
            },
            SignalKind::Current,
            &[input],
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        let kind = self.kind(input);
        Ok(self.push(value, Op::Reshape(input), kind, &[input]))
    }

    /// Heaviside spike at `u >= V_th`.
    pub fn spike_threshold(&mut self, input: Var, neuron: NeuronConfig) -> Result<Var> {
        let vth = F::from_f64(neuron.v_threshold);
        let value = self
            .value(input)
            .map(|u| if u >= vth { F::one() } else { F::zero() });
        Ok(self.push(value, Op::SpikeThreshold { input, neuron }, SignalKind::Spike, &[input]))
    }

    /// LIF layer unrolled over the trailing time axis of `input` currents.
    pub fn lif(&mut self, input: Var, neuron: NeuronConfig) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let steps = *shape.last().ok_or_else(|| Error::shape("lif", "rank 0"))?;
        if steps == 0 {
            return Err(Error::shape("lif", "zero time steps"));
        }
        let (membrane, spikes) = crate::snn::lif_unroll(self.value(input).data(), steps, &neuron);
        let value = Tensor::new(shape, spikes)?;
        Ok(self.push(
            value,
            Op::Lif {
                input,
                neuron,
                membrane,
            },
            SignalKind::Spike,
            &[input],
        ))
    }

    /// Channel normalization: `gain * gamma_c * (x - mu_c) / sqrt(var_c + eps) + beta_c`.
    ///
    /// With `stats = None` the moments are measured over every non-channel
    /// axis of the batch and returned; otherwise the given running moments
    /// are used.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        gain: f64,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let shape = self.shape(input).to_vec();
        let (outer, c, steps) = kernels::channel_split(&shape)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("scale/shift {:?}/{:?} for {} channels", self.shape(gamma), self.shape(beta), c),
            ));
        }
        if outer * steps == 0 {
            return Err(Error::shape("batch_norm", "zero-size batch"));
        }
        let x = self.value(input).data();
        let (mean, var, moments) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let (m, v) = kernels::channel_moments(x, outer, c, steps);
                let moments = BatchMoments {
                    mean: m.clone(),
                    var: v.clone(),
                    count: outer * steps,
                };
                (m, v, Some(moments))
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mean_f: Vec<F> = mean.iter().map(|&m| F::from_f64(m)).collect();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let gain_f = F::from_f64(gain);
        let mut normalized = vec![F::zero(); x.len()];
        let mut out = vec![F::zero(); x.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * steps;
                let k = gain_f * g[ch];
                for i in base..base + steps {
                    let n = (x[i] - mean_f[ch]) * inv_std[ch];
                    normalized[i] = n;
                    out[i] = k * n + bta[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                gain: gain_f,
                normalized,
                inv_std,
                batch_stats: stats.is_none(),
            },
            SignalKind::Current,
            &[input, gamma, beta],
        );
        Ok((v, moments))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| matches!(n.op, Op::Leaf))
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let d = ConvDims::resolve(self.shape(*input), self.shape(*weight), *geom)?;
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    &d,
                    self.wants(*input),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *weight, dw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { input, weight, bias } => {
                let s = self.shape(*input);
                let (rows, din, steps) = (s[0], s[1], s[2]);
                let dout = self.shape(*weight)[0];
                let (dx, dw, db) = kernels::linear_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    rows,
                    din,
                    dout,
                    steps,
                );
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *weight, dw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AvgPool2x2(x) => {
                let dx = kernels::avgpool2x2_backward(g, self.shape(*x));
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2x(x) => {
                let dx = kernels::upsample2x_backward(g, self.shape(*x));
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, g.iter().map(|&v| v * *k).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let dx = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Concat(inputs) => {
                let out_shape = node.value.shape();
                let (outer, total, steps) = kernels::channel_split(out_shape)?;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[self.shape(v).len() - 2];
                    if self.wants(v) {
                        let mut dx = Vec::with_capacity(outer * c * steps);
                        for o in 0..outer {
                            let start = (o * total + offset) * steps;
                            dx.extend_from_slice(&g[start..start + c * steps]);
                        }
                        self.accumulate(grads, v, dx);
                    }
                    offset += c;
                }
            }
            Op::BroadcastSpatial(x) => {
                let s = self.shape(*x);
                let blk = s[1] * s[2];
                let hw = node.value.shape()[1] * node.value.shape()[2];
                let mut dx = vec![F::zero(); s[0] * blk];
                for b in 0..s[0] {
                    for p in 0..hw {
                        let src = (b * hw + p) * blk;
                        for i in 0..blk {
                            dx[b * blk + i] = dx[b * blk + i] + g[src + i];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RepeatTime(x) => {
                let steps = *node.value.shape().last().unwrap_or(&1);
                let dx = g.chunks(steps).map(|c| c.iter().copied().sum()).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::MeanTime(x) => {
                let steps = *self.shape(*x).last().unwrap_or(&1);
                let inv = F::one() / F::from_f64(steps as f64);
                let dx = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, steps))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = g[0] / F::from_f64(n as f64);
                self.accumulate(grads, *x, vec![v; n]);
            }
            Op::WeightedSumSq { input, weights } => {
                let x = self.value(*input).data();
                let b = weights.len();
                let per = x.len() / b;
                let two_over_b = F::from_f64(2.0 / b as f64);
                let mut dx = vec![F::zero(); x.len()];
                for (i, &w) in weights.iter().enumerate() {
                    let k = g[0] * two_over_b * w;
                    for j in i * per..(i + 1) * per {
                        dx[j] = k * x[j];
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::SpikeThreshold { input, neuron } => {
                let u = self.value(*input).data();
                let dx = g
                    .iter()
                    .zip(u)
                    .map(|(&g, &u)| g * F::from_f64(surrogate(u.to_f64(), neuron)))
                    .collect();
                self.accumulate(grads, *input, dx);
            }
            Op::Lif {
                input,
                neuron,
                membrane,
            } => {
                let steps = *node.value.shape().last().unwrap_or(&1);
                let dx = crate::snn::lif_unroll_backward(membrane, node.value.data(), g, steps, neuron);
                self.accumulate(grads, *input, dx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                gain,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let (outer, c, steps) = kernels::channel_split(node.value.shape())?;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * steps;
                        for i in base..base + steps {
                            dbeta[ch] = dbeta[ch] + g[i];
                            dgamma[ch] = dgamma[ch] + g[i] * normalized[i];
                        }
                    }
                }
                if self.wants(*input) {
                    let n = F::from_f64((outer * steps) as f64);
                    let mut dx = vec![F::zero(); g.len()];
                    for ch in 0..c {
                        let k = *gain * gm[ch];
                        // sum of dxhat and of dxhat * xhat over the channel
                        let sum_d = dbeta[ch] * k;
                        let sum_dn = dgamma[ch] * k;
                        for o in 0..outer {
                            let base = (o * c + ch) * steps;
                            for i in base..base + steps {
                                let dn = g[i] * k;
                                dx[i] = if *batch_stats {
                                    inv_std[ch] * (dn - (sum_d + normalized[i] * sum_dn) / n)
                                } else {
                                    inv_std[ch] * dn
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *gamma, dgamma.iter().map(|&v| v * *gain).collect());
                self.accumulate(grads, *beta, dbeta);
            }
        }
        Ok(())
    }
}

/// Drops saved activations from ops that will never be differentiated.
fn strip_saved<F>(op: Op<F>) -> Op<F> {
    match op {
        Op::Lif { input, neuron, .. } => Op::Lif {
            input,
            neuron,
            membrane: Vec::new(),
        },
        Op::BatchNorm {
            input,
            gamma,
            beta,
            gain,
            batch_stats,
            ..
        } => Op::BatchNorm {
            input,
            gamma,
            beta,
            gain,
            normalized: Vec::new(),
            inv_std: Vec::new(),
            batch_stats,
        },
        other => other,
    }
}

pub(crate) fn repeat_last<F: Element>(t: &Tensor<F>, steps: usize) -> Tensor<F> {
    let mut shape = t.shape().to_vec();
    shape.push(steps);
    let data = t
        .data()
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, steps))
        .collect();
    Tensor::new(shape, data).expect("repeat keeps element count consistent")
}

/// Mean over the trailing axis, written as `x_0 + sum_s (x_s - x_0) / S` so
/// a temporally constant sequence decodes to its value exactly.
pub(crate) fn mean_last<F: Element>(t: &Tensor<F>) -> Tensor<F> {
    let mut shape = t.shape().to_vec();
    let steps = shape.pop().unwrap_or(1).max(1);
    let inv = F::one() / F::from_f64(steps as f64);
    let data = t
        .data()
        .chunks(steps)
        .map(|c| {
            let x0 = c[0];
            let dev: F = c.iter().map(|&v| v - x0).sum();
            if dev == F::zero() {
                x0
            } else {
                x0 + dev * inv
            }
        })
        .collect();
    Tensor::new(shape, data).expect("mean keeps element count consistent")
}

/// Gradients of a scalar loss with respect to the tape's leaves.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    /// Gradient of `v`, or `None` if the loss does not depend on it (or it is
    /// not a leaf of the tape that produced these gradients).
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, with zeros for leaves the loss never touched.
    pub fn get_or_zero(&self, v: Var, tape: &Tape<F>) -> Tensor<F> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))
    }
}
