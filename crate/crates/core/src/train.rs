//! Monte Carlo training of the weighted velocity loss plus the spiking
//! consistency (SCL) term, optimized with Adam.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::snn::encode_direct;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::unet::{Mode, UNet};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, overriding `epochs`.
    pub max_steps: Option<usize>,
    pub scl: bool,
    pub signal_loss: bool,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub log_every: usize,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 1,
            max_steps: None,
            scl: true,
            signal_loss: false,
            seed: 0,
            grad_clip: None,
            log_every: 50,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam eps must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("gradient clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss parts of one batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleLoss {
    pub t: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub l_ddpm: f64,
    pub l_scl: f64,
    pub l_signal: Option<f64>,
}

impl SampleLoss {
    pub fn weighted(&self, scl: bool) -> f64 {
        let mut v = self.gamma * self.l_ddpm;
        if scl {
            v += self.lambda * self.l_scl;
        }
        if let Some(s) = self.l_signal {
            v += self.lambda * s;
        }
        v
    }
}

/// Batch-mean loss parts and the weighted objective.
///
/// `l_scl` is always measured; it enters `total` only when SCL is enabled.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_ddpm: f64,
    pub l_scl: f64,
    pub l_signal: Option<f64>,
    pub total: f64,
    pub samples: Vec<SampleLoss>,
}

impl LossBreakdown {
    pub fn mean_t(&self) -> f64 {
        self.samples.iter().map(|s| s.t as f64).sum::<f64>() / self.samples.len().max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.l_ddpm.is_finite() && self.l_scl.is_finite()
    }

    pub fn log_line(&self, step: usize) -> String {
        format!(
            "step={} t={:.1} l_ddpm={:.6} l_scl={:.6} total={:.6}",
            step,
            self.mean_t(),
            self.l_ddpm,
            self.l_scl,
            self.total
        )
    }
}

fn per_sample_sum_sq(t: &Tensor<f32>) -> Vec<f64> {
    let b = t.shape()[0];
    let per = t.numel() / b.max(1);
    t.data()
        .chunks(per.max(1))
        .map(|c| c.iter().map(|&v| (v as f64) * (v as f64)).sum())
        .collect()
}

/// Loss terms for network output `y` (signal space) against velocity
/// targets `v` (image space) at per-sample steps `t`. Returns the scalar
/// objective on the tape.
pub fn loss_on_tape(
    tape: &mut Tape<f32>,
    y: Var,
    v: &Tensor<f32>,
    t: &[usize],
    sched: &NoiseSchedule,
    scl: bool,
    signal: bool,
) -> Result<(Var, LossBreakdown)> {
    let ys = tape.shape(y).to_vec();
    if ys.len() != v.rank() + 1 || ys[..ys.len() - 1] != *v.shape() {
        return Err(Error::shape("loss", format!("output {:?} vs target {:?}", ys, v.shape())));
    }
    if t.len() != ys[0] {
        return Err(Error::shape("loss", format!("{} steps for batch of {}", t.len(), ys[0])));
    }
    for &ti in t {
        sched.check_step(ti)?;
    }
    let steps = *ys.last().expect("rank checked");
    let gamma: Vec<f64> = t.iter().map(|&ti| sched.gamma[ti]).collect();
    let lambda: Vec<f64> = t.iter().map(|&ti| sched.lambda[ti]).collect();
    let as_f32 = |w: &[f64]| w.iter().map(|&x| x as f32).collect::<Vec<f32>>();

    let target = tape.constant(v.clone());
    let dec = tape.mean_time(y)?;
    let r_ddpm = tape.sub(target, dec)?;
    let mut total = tape.weighted_sum_sq(r_ddpm, &as_f32(&gamma))?;

    let re = tape.repeat_time(dec, steps)?;
    let r_scl = tape.sub(y, re)?;
    if scl {
        let term = tape.weighted_sum_sq(r_scl, &as_f32(&lambda))?;
        total = tape.add(total, term)?;
    }
    let mut l_signal = None;
    if signal {
        let enc = tape.constant(encode_direct(v, steps));
        let r_sig = tape.sub(enc, y)?;
        let term = tape.weighted_sum_sq(r_sig, &as_f32(&lambda))?;
        total = tape.add(total, term)?;
        l_signal = Some(per_sample_sum_sq(tape.value(r_sig)));
    }

    let ddpm = per_sample_sum_sq(tape.value(r_ddpm));
    let scl_parts = per_sample_sum_sq(tape.value(r_scl));
    let samples: Vec<SampleLoss> = (0..t.len())
        .map(|i| SampleLoss {
            t: t[i],
            gamma: gamma[i],
            lambda: lambda[i],
            l_ddpm: ddpm[i],
            l_scl: scl_parts[i],
            l_signal: l_signal.as_ref().map(|s: &Vec<f64>| s[i]),
        })
        .collect();
    let n = t.len() as f64;
    let breakdown = LossBreakdown {
        l_ddpm: ddpm.iter().sum::<f64>() / n,
        l_scl: scl_parts.iter().sum::<f64>() / n,
        l_signal: l_signal.map(|s| s.iter().sum::<f64>() / n),
        total: tape.value(total).item().expect("scalar loss") as f64,
        samples,
    };
    Ok((total, breakdown))
}

/// `lambda_t * ||enc(z) - y||^2` for one sample.
pub fn signal_loss(y: &Tensor<f64>, z: &Tensor<f64>, t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_step(t)?;
    let steps = *y.shape().last().ok_or_else(|| Error::shape("signal_loss", "rank 0"))?;
    let enc = encode_direct(z, steps);
    let r = enc
        .sub(y)
        .map_err(|_| Error::shape("signal_loss", format!("{:?} vs {:?}", y.shape(), enc.shape())))?;
    Ok(sched.lambda[t] * r.sum_sq())
}

/// The random draws of one training step.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub t: Vec<usize>,
    /// Encoded noisy images `(B, H, W, C, S)`.
    pub x_signal: Tensor<f32>,
    /// Velocity targets `(B, H, W, C)`.
    pub v: Tensor<f32>,
}

/// Draws one step `t ~ U{1..T}` and Gaussian noise per batch element and
/// forms the encoded `x_t` and the velocity target.
pub fn prepare_batch(x0: &Tensor<f32>, rng: &mut impl Rng, sched: &NoiseSchedule, steps: usize) -> Result<PreparedBatch> {
    let b = *x0.shape().first().ok_or_else(|| Error::shape("training_step", "rank 0 batch"))?;
    if b == 0 {
        return Err(Error::shape("training_step", "empty batch"));
    }
    let per = x0.numel() / b;
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.t_max())).collect();
    let mut xt = Vec::with_capacity(x0.numel());
    let mut v = Vec::with_capacity(x0.numel());
    for (i, chunk) in x0.data().chunks(per).enumerate() {
        let (s, n) = sched.signal_noise(t[i])?;
        for &x in chunk {
            let e: f64 = rng.sample(StandardNormal);
            let x = x as f64;
            xt.push((s * x + n * e) as f32);
            v.push((s * e - n * x) as f32);
        }
    }
    let xt = Tensor::new(x0.shape().to_vec(), xt)?;
    Ok(PreparedBatch {
        t,
        x_signal: encode_direct(&xt, steps),
        v: Tensor::new(x0.shape().to_vec(), v)?,
    })
}

/// Gradients by parameter name, the loss parts and post-step tdBN statistics.
#[derive(Debug)]
pub struct StepOutput {
    pub grads: BTreeMap<String, Tensor<f32>>,
    pub loss: LossBreakdown,
    pub stats: BTreeMap<String, crate::snn::RunningStats>,
}

/// Forward and backward for a prepared batch.
pub fn loss_and_grads(unet: &UNet, batch: &PreparedBatch, sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.x_signal.clone());
    let fwd = unet.forward(&mut tape, x, &batch.t, Mode::train())?;
    let (total, loss) = loss_on_tape(&mut tape, fwd.output, &batch.v, &batch.t, sched, cfg.scl, cfg.signal_loss)?;
    let g = tape.backward(total)?;
    let grads = fwd
        .params
        .iter()
        .map(|(name, &var)| (name.clone(), g.get_or_zero(var, &tape)))
        .collect();
    Ok(StepOutput {
        grads,
        loss,
        stats: fwd.stats,
    })
}

pub fn training_step(
    unet: &UNet,
    x0: &Tensor<f32>,
    rng: &mut impl Rng,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<StepOutput> {
    let batch = prepare_batch(x0, rng, sched, unet.config.neuron.num_steps)?;
    loss_and_grads(unet, &batch, sched, cfg)
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

/// Bias-corrected Adam: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_update(
    params: &mut BTreeMap<String, Tensor<f32>>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::shape("adam", format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape())));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape("adam", format!("{name}: moment shape mismatch")));
        }
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi as f64 / bc1;
            let v_hat = *vi as f64 / bc2;
            *pi -= (cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps)) as f32;
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.sum_sq() as f64).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Receives progress and checkpoint events from [`train_loop`].
pub trait TrainSink {
    fn on_step(&mut self, _step: usize, _loss: &LossBreakdown) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` steps and once at the end.
    fn checkpoint(&mut self, _step: usize, _unet: &UNet, _adam: &AdamState) -> Result<()> {
        Ok(())
    }
}

/// A sink that ignores every event.
pub struct NullSink;

impl TrainSink for NullSink {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<LossBreakdown>,
    pub adam: AdamState,
}

/// Noise and step draws for optimizer step `step` depend only on the seed
/// and the step index, so resumed runs follow the same trajectory.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(2) + 1);
    rng
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(2));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn gather(images: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let per: usize = images.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// Number of optimizer steps the configuration asks for on `n` images.
pub fn planned_steps(n: usize, cfg: &TrainConfig) -> usize {
    let per_epoch = (n / cfg.batch_size.min(n).max(1)).max(1);
    cfg.max_steps.unwrap_or(cfg.epochs * per_epoch)
}

/// Shuffled minibatch training over `images` `(N, H, W, C)` in `[-1, 1]`.
///
/// Starts from `adam.step` so a resumed run continues its trajectory.
pub fn train_loop(
    unet: &mut UNet,
    images: &Tensor<f32>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    adam: AdamState,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = *images.shape().first().unwrap_or(&0);
    if n == 0 {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    let c = &unet.config;
    if images.shape()[1..] != [c.image_size, c.image_size, c.channels] {
        return Err(Error::shape(
            "train_loop",
            format!("images {:?} vs model {}x{}x{}", images.shape(), c.image_size, c.image_size, c.channels),
        ));
    }
    let batch = cfg.batch_size.min(n);
    let per_epoch = (n / batch).max(1);
    let total_steps = planned_steps(n, cfg);
    let mut adam = adam;
    let mut history = Vec::new();
    let mut order = Vec::new();
    let mut order_epoch = u64::MAX;
    while (adam.step as usize) < total_steps {
        let step = adam.step as usize;
        let epoch = (step / per_epoch) as u64;
        if epoch != order_epoch {
            order = epoch_order(n, cfg.seed, epoch);
            order_epoch = epoch;
        }
        let k = step % per_epoch;
        let x0 = gather(images, &order[k * batch..(k + 1) * batch])?;
        let mut rng = step_rng(cfg.seed, adam.step);
        let mut out = training_step(unet, &x0, &mut rng, sched, cfg)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                t: out.loss.samples.iter().map(|s| s.t).collect(),
                l_ddpm: out.loss.l_ddpm,
                l_scl: out.loss.l_scl,
                total: out.loss.total,
            });
        }
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut out.grads, c);
        }
        adam_update(&mut unet.params.tensors, &out.grads, &mut adam, cfg)?;
        unet.params.stats = out.stats;
        let done = adam.step as usize;
        if cfg.log_every > 0 && (done.is_multiple_of(cfg.log_every) || done == 1) {
            log::info!("{}", out.loss.log_line(done));
        }
        sink.on_step(done, &out.loss)?;
        history.push(out.loss);
        if cfg.checkpoint_every.is_some_and(|e| e > 0 && done.is_multiple_of(e)) && done < total_steps {
            sink.checkpoint(done, unet, &adam)?;
        }
    }
    sink.checkpoint(adam.step as usize, unet, &adam)?;
    Ok(TrainOutcome { history, adam })
}
