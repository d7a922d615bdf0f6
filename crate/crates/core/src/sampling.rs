//! DDIM generation in three forms.
//!
//! * reference: decode the network output to image space every step.
//! * signal: keep the state in signal space and decode once at the end.
//! * fused: carry only spike trains between steps; the stem conv of step
//!   `i` reads the Gaussian seed, a constant-one channel and every earlier
//!   step's head-input spikes through a single precomposed 3x3 conv.
//!
//! With `x'_0 = enc(x_T)` and `x'_{i+1} = a_i x'_i + b_i (K_L h_i + beta_L)`
//! the state unrolls to `A_i enc(x_T) + sum_j c_ij (K_L h_j + beta_L)` where
//! `A_{i+1} = a_i A_i`, `c_{i+1,j} = a_i c_ij` and `c_{i+1,i} = b_i`. The
//! stem conv of that is linear in the seed, the ones channel and each
//! history, which is what [`FusedStepConv`] stores.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{step_plan, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, ConvGeometry};
use crate::snn::{decode_average, encode_direct};
use crate::tensor::Tensor;
use crate::unet::{UNet, HEAD, STEM};

/// End-to-end tolerance between the fused and signal-space pipelines.
pub const FUSION_TOLERANCE: f64 = 1e-4;

const CHUNK: usize = 50;
const FUSED_CHUNK: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pipeline {
    Reference,
    #[default]
    Signal,
    Fused,
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Pipeline::Reference),
            "signal" => Ok(Pipeline::Signal),
            "fused" => Ok(Pipeline::Fused),
            other => Err(Error::Config(format!(
                "unknown pipeline '{other}' (expected reference, signal or fused)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub num_inference_steps: usize,
    pub seed: u64,
    pub pipeline: Pipeline,
    /// Fused only: rerun the signal-space pipeline and fail if the images
    /// differ by more than [`FUSION_TOLERANCE`].
    pub verify_fusion: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_inference_steps: 10,
            seed: 0,
            pipeline: Pipeline::Signal,
            verify_fusion: false,
        }
    }
}

/// A network in signal space: `(B, H, W, C, S)` currents in and out.
pub trait Denoiser {
    /// `(H, W, C, S)`.
    fn signal_dims(&self) -> [usize; 4];
    fn predict(&self, x: &Tensor<f64>, t: &[usize]) -> Result<Tensor<f64>>;
}

impl Denoiser for UNet {
    fn signal_dims(&self) -> [usize; 4] {
        let c = &self.config;
        [c.image_size, c.image_size, c.channels, c.neuron.num_steps]
    }

    fn predict(&self, x: &Tensor<f64>, t: &[usize]) -> Result<Tensor<f64>> {
        UNet::predict(self, x, t)
    }
}

/// `x_T ~ N(0, I)` of shape `(count, H, W, C)`.
pub fn seed_noise(count: usize, dims: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![count, dims[0], dims[1], dims[2]], |_| StandardNormal.sample(&mut rng))
}

fn affine(x: &Tensor<f64>, a: f64, y: &Tensor<f64>, b: f64) -> Result<Tensor<f64>> {
    x.zip_map(y, |p, q| a * p + b * q)
}

/// Reference loop starting from `x_T` (`(B, H, W, C)`).
pub fn reference_from(net: &impl Denoiser, x_t: &Tensor<f64>, plan: &[(usize, f64, f64)]) -> Result<Tensor<f64>> {
    let steps = net.signal_dims()[3];
    let mut x = x_t.clone();
    for &(t, a, b) in plan {
        let ts = vec![t; x.shape()[0]];
        let y = decode_average(&net.predict(&encode_direct(&x, steps), &ts)?);
        x = affine(&x, a, &y, b)?;
    }
    Ok(x)
}

/// Signal-space loop starting from `x_T`; one decode at the end.
pub fn signal_from(net: &impl Denoiser, x_t: &Tensor<f64>, plan: &[(usize, f64, f64)]) -> Result<Tensor<f64>> {
    let mut x = encode_direct(x_t, net.signal_dims()[3]);
    for &(t, a, b) in plan {
        let ts = vec![t; x.shape()[0]];
        let y = net.predict(&x, &ts)?;
        x = affine(&x, a, &y, b)?;
    }
    Ok(decode_average(&x))
}

fn chunked(
    count: usize,
    chunk: usize,
    dims: [usize; 4],
    seed: u64,
    mut run: impl FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<Tensor<f64>> {
    if count == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let noise = seed_noise(count, dims, seed);
    let mut parts = Vec::new();
    for start in (0..count).step_by(chunk) {
        parts.push(run(&noise.slice_outer(start, (start + chunk).min(count))?)?);
    }
    Tensor::stack_outer(&parts)
}

pub fn sample_reference(
    net: &impl Denoiser,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    count: usize,
) -> Result<Tensor<f64>> {
    let plan = step_plan(sched, cfg.num_inference_steps)?;
    chunked(count, CHUNK, net.signal_dims(), cfg.seed, |x| reference_from(net, x, &plan))
}

pub fn sample_signal_space(
    net: &impl Denoiser,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    count: usize,
) -> Result<Tensor<f64>> {
    let plan = step_plan(sched, cfg.num_inference_steps)?;
    chunked(count, CHUNK, net.signal_dims(), cfg.seed, |x| signal_from(net, x, &plan))
}

/// Dispatches on `cfg.pipeline`. Images are `(count, H, W, C)`, unclamped.
pub fn sample(unet: &UNet, sched: &NoiseSchedule, cfg: &SamplerConfig, count: usize) -> Result<Tensor<f64>> {
    match cfg.pipeline {
        Pipeline::Reference => sample_reference(unet, sched, cfg, count),
        Pipeline::Signal => sample_signal_space(unet, sched, cfg, count),
        Pipeline::Fused => {
            let fused = FusedSampler::new(unet, sched, cfg.num_inference_steps)?;
            sample_fused(&fused, cfg, count)
        }
    }
}

/// Stem conv of one fused step. Input channels, in order: the `C` seed
/// channels, one constant-one channel, then the head-input spikes of each
/// earlier step.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedStepConv {
    /// Position in the inference plan, 0 for the step at `tau_K`.
    pub index: usize,
    pub t: usize,
    /// `(C_stem, 3, 3, C + 1 + index * C_hidden)`.
    pub weight: Tensor<f64>,
    pub bias: Vec<f64>,
}

impl FusedStepConv {
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[3]
    }

    /// Stem currents for `input = concat(enc(seed), ones, h_0, .., h_{i-1})`.
    pub fn apply(&self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        let d = ConvDims::resolve(input.shape(), self.weight.shape(), ConvGeometry::SAME3)?;
        Tensor::new(d.out_shape(), kernels::conv2d_forward(input.data(), self.weight.data(), Some(&self.bias), &d))
    }
}

/// Weights on the seed and on each history in the unrolled state at every
/// plan position: `(A_i, [c_i0, .., c_i(i-1)])` for `i = 0..=K`.
pub fn unrolled_coefficients(plan: &[(usize, f64, f64)]) -> Vec<(f64, Vec<f64>)> {
    let mut out = vec![(1.0, Vec::new())];
    for &(_, a, b) in plan {
        let (seed, hist) = out.last().expect("starts non-empty");
        let mut next: Vec<f64> = hist.iter().map(|c| a * c).collect();
        next.push(b);
        out.push((a * seed, next));
    }
    out
}

struct Boundary {
    stem_w: Vec<f64>,
    stem_b: Vec<f64>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
    c_stem: usize,
    c_img: usize,
    c_hidden: usize,
}

impl Boundary {
    fn of(unet: &UNet) -> Result<Self> {
        let p = &unet.params;
        let stem = p.get(&format!("{STEM}.weight"))?;
        let head = p.get(&format!("{HEAD}.weight"))?;
        let (ss, hs) = (stem.shape(), head.shape());
        if ss.len() != 4 || ss[1] != 3 || ss[2] != 3 {
            return Err(Error::Fusion(format!("stem conv must be 3x3, got weight {ss:?}")));
        }
        if hs.len() != 4 || hs[1] != 1 || hs[2] != 1 {
            return Err(Error::Fusion(format!("final conv must be 1x1, got weight {hs:?}")));
        }
        if hs[0] != ss[3] {
            return Err(Error::Fusion(format!(
                "final conv emits {} channels, stem conv reads {}",
                hs[0], ss[3]
            )));
        }
        let f = |name: String| -> Result<Vec<f64>> { Ok(p.get(&name)?.data().iter().map(|&v| v as f64).collect()) };
        Ok(Boundary {
            stem_w: f(format!("{STEM}.weight"))?,
            stem_b: f(format!("{STEM}.bias"))?,
            head_w: f(format!("{HEAD}.weight"))?,
            head_b: f(format!("{HEAD}.bias"))?,
            c_stem: ss[0],
            c_img: ss[3],
            c_hidden: hs[3],
        })
    }

    /// Stem kernel tap `(o, tap, i)` with `tap = ky * 3 + kx`.
    fn k_f(&self, o: usize, tap: usize, i: usize) -> f64 {
        self.stem_w[(o * 9 + tap) * self.c_img + i]
    }

    fn fuse(&self, index: usize, t: usize, seed_coef: f64, hist: &[f64]) -> Result<FusedStepConv> {
        let (co, ci, ch) = (self.c_stem, self.c_img, self.c_hidden);
        let cin = ci + 1 + hist.len() * ch;
        let hist_sum: f64 = hist.iter().sum();
        let mut w = vec![0.0; co * 9 * cin];
        for o in 0..co {
            for tap in 0..9 {
                let row = &mut w[(o * 9 + tap) * cin..(o * 9 + tap + 1) * cin];
                let mut ones = 0.0;
                for i in 0..ci {
                    row[i] = seed_coef * self.k_f(o, tap, i);
                    ones += self.k_f(o, tap, i) * self.head_b[i];
                }
                row[ci] = hist_sum * ones;
                for k in 0..ch {
                    let composed: f64 = (0..ci).map(|i| self.k_f(o, tap, i) * self.head_w[i * ch + k]).sum();
                    for (j, c) in hist.iter().enumerate() {
                        row[ci + 1 + j * ch + k] = c * composed;
                    }
                }
            }
        }
        Ok(FusedStepConv {
            index,
            t,
            weight: Tensor::new(vec![co, 3, 3, cin], w)?,
            bias: self.stem_b.clone(),
        })
    }

    /// 1x1 conv over the final concatenation that yields the state `x'_K`.
    fn readout(&self, seed_coef: f64, hist: &[f64]) -> Result<FusedStepConv> {
        let (ci, ch) = (self.c_img, self.c_hidden);
        let cin = ci + 1 + hist.len() * ch;
        let hist_sum: f64 = hist.iter().sum();
        let mut w = vec![0.0; ci * cin];
        for o in 0..ci {
            let row = &mut w[o * cin..(o + 1) * cin];
            row[o] = seed_coef;
            row[ci] = hist_sum * self.head_b[o];
            for (j, c) in hist.iter().enumerate() {
                for k in 0..ch {
                    row[ci + 1 + j * ch + k] = c * self.head_w[o * ch + k];
                }
            }
        }
        Ok(FusedStepConv {
            index: hist.len(),
            t: 0,
            weight: Tensor::new(vec![ci, 1, 1, cin], w)?,
            bias: vec![0.0; ci],
        })
    }
}

/// Fused stem conv for plan position `index`.
pub fn fuse_step_conv(unet: &UNet, plan: &[(usize, f64, f64)], index: usize) -> Result<FusedStepConv> {
    if index >= plan.len() {
        return Err(Error::Config(format!("plan has {} steps, no position {index}", plan.len())));
    }
    let coefs = unrolled_coefficients(plan);
    let (seed, hist) = &coefs[index];
    Boundary::of(unet)?.fuse(index, plan[index].0, *seed, hist)
}

/// A UNet with every step's fused stem conv and the final readout
/// precomputed for one inference plan.
#[derive(Clone, Debug)]
pub struct FusedSampler<'a> {
    pub unet: &'a UNet,
    pub plan: Vec<(usize, f64, f64)>,
    pub steps: Vec<FusedStepConv>,
    pub readout: FusedStepConv,
}

impl<'a> FusedSampler<'a> {
    pub fn new(unet: &'a UNet, sched: &NoiseSchedule, num_inference_steps: usize) -> Result<Self> {
        let plan = step_plan(sched, num_inference_steps)?;
        let coefs = unrolled_coefficients(&plan);
        let b = Boundary::of(unet)?;
        let steps = plan
            .iter()
            .enumerate()
            .map(|(i, &(t, _, _))| b.fuse(i, t, coefs[i].0, &coefs[i].1))
            .collect::<Result<Vec<_>>>()?;
        let (seed, hist) = coefs.last().expect("plan has K + 1 entries");
        let readout = b.readout(*seed, hist)?;
        Ok(FusedSampler { unet, plan, steps, readout })
    }

    /// Rebuilds from stored kernels, checking them against a fresh fusion.
    pub fn from_parts(
        unet: &'a UNet,
        sched: &NoiseSchedule,
        steps: Vec<FusedStepConv>,
        readout: FusedStepConv,
    ) -> Result<Self> {
        let fresh = FusedSampler::new(unet, sched, steps.len())?;
        let close = |a: &FusedStepConv, b: &FusedStepConv| {
            a.t == b.t
                && a.weight.shape() == b.weight.shape()
                && a.weight.max_abs_diff(&b.weight).is_some_and(|d| d <= 1e-12)
                && a.bias.iter().zip(&b.bias).all(|(x, y)| (x - y).abs() <= 1e-12)
        };
        if !steps.iter().zip(&fresh.steps).all(|(a, b)| close(a, b)) || !close(&readout, &fresh.readout) {
            return Err(Error::Fusion("stored fused kernels do not match the model weights".into()));
        }
        Ok(FusedSampler { steps, readout, ..fresh })
    }

    /// Runs the fused loop from `x_T`.
    pub fn run(&self, x_t: &Tensor<f64>) -> Result<Tensor<f64>> {
        let s = self.unet.config.neuron.num_steps;
        let seed = encode_direct(x_t, s);
        let mut sh = seed.shape().to_vec();
        sh[3] = 1;
        let mut input = concat_channels(&seed, &Tensor::full(sh, 1.0))?;
        for conv in &self.steps {
            if input.shape()[3] != conv.in_channels() {
                return Err(Error::Fusion(format!(
                    "step {} expects {} input channels, carried state has {}",
                    conv.index,
                    conv.in_channels(),
                    input.shape()[3]
                )));
            }
            let stem = conv.apply(&input)?;
            let ts = vec![conv.t; x_t.shape()[0]];
            let spikes = self.unet.hidden_from_stem(&stem, &ts)?;
            if !spikes.is_binary() {
                return Err(Error::Fusion(format!("inter-step state after t={} is not binary", conv.t)));
            }
            input = concat_channels(&input, &spikes.cast())?;
        }
        let d = ConvDims::resolve(input.shape(), self.readout.weight.shape(), ConvGeometry::POINTWISE)?;
        let state = kernels::conv2d_forward(input.data(), self.readout.weight.data(), None, &d);
        Ok(decode_average(&Tensor::new(d.out_shape(), state)?))
    }
}

fn concat_channels(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 5 || sb.len() != 5 || sa[..3] != sb[..3] || sa[4] != sb[4] {
        return Err(Error::shape("concat", format!("{sa:?} with {sb:?}")));
    }
    let (ca, cb, s) = (sa[3], sb[3], sa[4]);
    let rows = sa[0] * sa[1] * sa[2];
    let mut out = Vec::with_capacity(rows * (ca + cb) * s);
    for r in 0..rows {
        out.extend_from_slice(&a.data()[r * ca * s..(r + 1) * ca * s]);
        out.extend_from_slice(&b.data()[r * cb * s..(r + 1) * cb * s]);
    }
    Tensor::new(vec![sa[0], sa[1], sa[2], ca + cb, s], out)
}

pub fn sample_fused(fused: &FusedSampler, cfg: &SamplerConfig, count: usize) -> Result<Tensor<f64>> {
    let unet = fused.unet;
    let images = chunked(count, FUSED_CHUNK, unet.signal_dims(), cfg.seed, |x| fused.run(x))?;
    if cfg.verify_fusion {
        let reference = chunked(count, CHUNK, unet.signal_dims(), cfg.seed, |x| signal_from(unet, x, &fused.plan))?;
        let diff = images.max_abs_diff(&reference).unwrap_or(f64::INFINITY);
        if !(diff <= FUSION_TOLERANCE) {
            return Err(Error::Fusion(format!(
                "fused images differ from signal-space images by {diff:e} (tolerance {FUSION_TOLERANCE:e})"
            )));
        }
    }
    Ok(images)
}
