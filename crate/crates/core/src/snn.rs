//! LIF neurons, the surrogate spike derivative, tdBN and the direct
//! encoder / averaging decoder between image space and signal space.

use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::tape::{SignalKind, Tape, Var};
use crate::tensor::{Element, Tensor};

pub const TDBN_EPS: f64 = 1e-5;
pub const TDBN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronConfig {
    pub v_threshold: f64,
    pub tau_decay: f64,
    /// Half-width `a` of the triangular surrogate derivative.
    pub surrogate_width: f64,
    /// Number of SNN time steps `S`.
    pub num_steps: usize,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        NeuronConfig {
            v_threshold: 1.0,
            tau_decay: 0.8,
            surrogate_width: 1.0,
            num_steps: 4,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_threshold > 0.0) {
            return Err(Error::Config(format!("v_threshold must be > 0, got {}", self.v_threshold)));
        }
        if !(0.0..1.0).contains(&self.tau_decay) {
            return Err(Error::Config(format!("tau_decay must be in [0, 1), got {}", self.tau_decay)));
        }
        if !(self.surrogate_width > 0.0) {
            return Err(Error::Config(format!(
                "surrogate_width must be > 0, got {}",
                self.surrogate_width
            )));
        }
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// `max(1 - |u - V_th| / a, 0)`.
pub fn surrogate(u: f64, cfg: &NeuronConfig) -> f64 {
    (1.0 - (u - cfg.v_threshold).abs() / cfg.surrogate_width).max(0.0)
}

pub fn surrogate_grad<F: Element>(u: &Tensor<F>, cfg: &NeuronConfig) -> Tensor<F> {
    u.map(|v| F::from_f64(surrogate(v.to_f64(), cfg)))
}

/// Membrane potential (before reset) and spikes from the previous update.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState<F = f32> {
    pub membrane: Tensor<F>,
    pub last_spike: Tensor<F>,
}

impl<F: Element> LifState<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        LifState {
            membrane: Tensor::zeros(shape.to_vec()),
            last_spike: Tensor::zeros(shape.to_vec()),
        }
    }
}

#[inline]
fn lif_update<F: Element>(u_prev: F, o_prev: F, current: F, tau: F) -> F {
    tau * u_prev * (F::one() - o_prev) + current
}

/// One LIF update: `u = tau * u_prev * (1 - o_prev) + I`, spike iff `u >= V_th`.
pub fn lif_step<F: Element>(
    state: &LifState<F>,
    current: &Tensor<F>,
    cfg: &NeuronConfig,
) -> Result<(LifState<F>, Tensor<F>)> {
    if state.membrane.shape() != current.shape() || state.last_spike.shape() != current.shape() {
        return Err(Error::shape(
            "lif_step",
            format!("state {:?} vs current {:?}", state.membrane.shape(), current.shape()),
        ));
    }
    let tau = F::from_f64(cfg.tau_decay);
    let vth = F::from_f64(cfg.v_threshold);
    let u = Tensor::new(
        current.shape().to_vec(),
        state
            .membrane
            .data()
            .iter()
            .zip(state.last_spike.data())
            .zip(current.data())
            .map(|((&u, &o), &i)| lif_update(u, o, i, tau))
            .collect(),
    )?;
    let spikes = u.map(|v| if v >= vth { F::one() } else { F::zero() });
    Ok((
        LifState {
            membrane: u,
            last_spike: spikes.clone(),
        },
        spikes,
    ))
}

/// Runs the LIF recurrence along the trailing time axis of `currents`
/// (`steps` innermost), starting from rest. Returns `(membrane, spikes)`.
pub(crate) fn lif_unroll<F: Element>(currents: &[F], steps: usize, cfg: &NeuronConfig) -> (Vec<F>, Vec<F>) {
    let tau = F::from_f64(cfg.tau_decay);
    let vth = F::from_f64(cfg.v_threshold);
    let mut membrane = vec![F::zero(); currents.len()];
    let mut spikes = vec![F::zero(); currents.len()];
    for ((i, u), o) in currents
        .chunks(steps)
        .zip(membrane.chunks_mut(steps))
        .zip(spikes.chunks_mut(steps))
    {
        let (mut u_prev, mut o_prev) = (F::zero(), F::zero());
        for s in 0..steps {
            let v = lif_update(u_prev, o_prev, i[s], tau);
            let spike = if v >= vth { F::one() } else { F::zero() };
            u[s] = v;
            o[s] = spike;
            u_prev = v;
            o_prev = spike;
        }
    }
    (membrane, spikes)
}

/// Backpropagation through time for [`lif_unroll`] with a detached reset:
/// `du_s = g_s * sg(u_s) + du_{s+1} * tau * (1 - o_s)`, `dI_s = du_s`.
pub(crate) fn lif_unroll_backward<F: Element>(
    membrane: &[F],
    spikes: &[F],
    grad: &[F],
    steps: usize,
    cfg: &NeuronConfig,
) -> Vec<F> {
    let tau = F::from_f64(cfg.tau_decay);
    let mut dx = vec![F::zero(); grad.len()];
    for (((u, o), g), d) in membrane
        .chunks(steps)
        .zip(spikes.chunks(steps))
        .zip(grad.chunks(steps))
        .zip(dx.chunks_mut(steps))
    {
        let mut carry = F::zero();
        for s in (0..steps).rev() {
            let du = g[s] * F::from_f64(surrogate(u[s].to_f64(), cfg)) + carry;
            d[s] = du;
            carry = du * tau * (F::one() - o[s]);
        }
    }
    dx
}

/// A signal-space tensor `(B, H, W, C, S)` tagged with what it carries.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalTensor<F = f32> {
    pub values: Tensor<F>,
    pub kind: SignalKind,
}

impl<F: Element> SignalTensor<F> {
    pub fn current(values: Tensor<F>) -> Self {
        SignalTensor {
            values,
            kind: SignalKind::Current,
        }
    }

    pub fn spikes(values: Tensor<F>) -> Result<Self> {
        if !values.is_binary() {
            return Err(Error::Invalid("spike tensor contains non-binary values".into()));
        }
        Ok(SignalTensor {
            values,
            kind: SignalKind::Spike,
        })
    }

    pub fn steps(&self) -> usize {
        self.values.shape().last().copied().unwrap_or(0)
    }
}

/// Where a synaptic current layer gets its weights.
#[derive(Clone, Copy, Debug)]
pub enum Synapse {
    Conv { weight: Var, bias: Option<Var>, geom: ConvGeometry },
    Linear { weight: Var, bias: Option<Var> },
}

/// Weighted sum of incoming spikes, applied independently at each time step.
pub fn synaptic_current<F: Element>(tape: &mut Tape<F>, spikes: Var, synapse: Synapse) -> Result<Var> {
    if !tape.kind(spikes).is_spike_like() {
        return Err(Error::Invalid(
            "synaptic_current expects spikes; currents feed LIF neurons".into(),
        ));
    }
    match synapse {
        Synapse::Conv { weight, bias, geom } => tape.conv2d(spikes, weight, bias, geom),
        Synapse::Linear { weight, bias } => tape.linear(spikes, weight, bias),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running per-channel moments of a tdBN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Threshold-dependent batch norm: normalizes each channel jointly over
/// every other axis (batch, space, time) and scales by `V_th`.
///
/// Train mode uses batch moments and folds them into `stats` (unbiased
/// variance, momentum 0.1); eval mode normalizes with `stats`.
pub fn tdbn<F: Element>(
    tape: &mut Tape<F>,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut RunningStats,
    cfg: &NeuronConfig,
    mode: BnMode,
) -> Result<Var> {
    tdbn_with_momentum(tape, x, gamma, beta, stats, cfg, mode, TDBN_MOMENTUM)
}

/// [`tdbn`] with an explicit running-statistics momentum. Momentum 1
/// replaces the running moments with the batch moments.
#[allow(clippy::too_many_arguments)]
pub fn tdbn_with_momentum<F: Element>(
    tape: &mut Tape<F>,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut RunningStats,
    cfg: &NeuronConfig,
    mode: BnMode,
    momentum: f64,
) -> Result<Var> {
    match mode {
        BnMode::Eval => {
            let (y, _) = tape.batch_norm(
                x,
                gamma,
                beta,
                cfg.v_threshold,
                TDBN_EPS,
                Some((&stats.mean, &stats.var)),
            )?;
            Ok(y)
        }
        BnMode::Train => {
            let (y, moments) = tape.batch_norm(x, gamma, beta, cfg.v_threshold, TDBN_EPS, None)?;
            let m = moments.expect("train-mode batch norm reports moments");
            let n = m.count as f64;
            let correction = if m.count > 1 { n / (n - 1.0) } else { 1.0 };
            for c in 0..stats.mean.len() {
                stats.mean[c] = (1.0 - momentum) * stats.mean[c] + momentum * m.mean[c];
                stats.var[c] = (1.0 - momentum) * stats.var[c] + momentum * m.var[c] * correction;
            }
            Ok(y)
        }
    }
}

/// Replicates every value `S` times along a new trailing time axis.
pub fn encode_direct<F: Element>(x: &Tensor<F>, steps: usize) -> Tensor<F> {
    crate::tape::repeat_last(x, steps)
}

/// Averages the trailing time axis. Exact on temporally constant signals.
pub fn decode_average<F: Element>(x: &Tensor<F>) -> Tensor<F> {
    crate::tape::mean_last(x)
}
