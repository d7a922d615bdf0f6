//! Fréchet autoencoder distance and dynamic operation counts.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{step_plan, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kernels::{ConvDims, ConvGeometry};
use crate::sampling::{seed_noise, Denoiser};
use crate::snn::{decode_average, encode_direct};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;
use crate::train::{adam_update, AdamState, TrainConfig};
use crate::unet::{Mode, UNet};

/// Ridge added to a rank-deficient covariance.
pub const COV_RIDGE: f64 = 1e-6;
const EIG_CLIP: f64 = -1e-8;

// ---------------------------------------------------------------- FAD

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AutoencoderConfig {
    pub latent_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            latent_dim: 128,
            steps: 1500,
            batch_size: 64,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Three stride-2 3x3 convs with ReLU, then a linear map to the latent.
/// The decoder mirrors it with nearest upsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub params: BTreeMap<String, Tensor<f32>>,
    pub latent_dim: usize,
    pub image_size: usize,
    pub channels: usize,
}

const AE_WIDTHS: [usize; 3] = [16, 32, 32];
const DOWN: ConvGeometry = ConvGeometry { stride: 2, padding: 1 };

impl Autoencoder {
    pub fn new(image_size: usize, channels: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if image_size == 0 || !image_size.is_multiple_of(8) {
            return Err(Error::Config(format!("autoencoder needs a side divisible by 8, got {image_size}")));
        }
        if latent_dim == 0 || channels == 0 {
            return Err(Error::Config("latent and channel counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut add = |name: &str, shape: Vec<usize>, fan_in: usize| {
            let bound = (1.0 / fan_in as f32).sqrt();
            params.insert(format!("{name}.weight"), Tensor::from_fn(shape.clone(), |_| rng.random_range(-bound..bound)));
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![shape[0]]));
        };
        let flat = (image_size / 8).pow(2) * AE_WIDTHS[2];
        let mut cin = channels;
        for (i, &w) in AE_WIDTHS.iter().enumerate() {
            add(&format!("enc.conv{i}"), vec![w, 3, 3, cin], 9 * cin);
            cin = w;
        }
        add("enc.fc", vec![latent_dim, flat], flat);
        add("dec.fc", vec![flat, latent_dim], latent_dim);
        let outs = [AE_WIDTHS[1], AE_WIDTHS[0], channels];
        let mut cin = AE_WIDTHS[2];
        for (i, &w) in outs.iter().enumerate() {
            add(&format!("dec.conv{i}"), vec![w, 3, 3, cin], 9 * cin);
            cin = w;
        }
        Ok(Autoencoder {
            params,
            latent_dim,
            image_size,
            channels,
        })
    }

    fn vars(&self, tape: &mut Tape<f32>) -> BTreeMap<String, Var> {
        self.params.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect()
    }

    fn check(&self, images: &Tensor<f32>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != [self.image_size, self.image_size, self.channels] || s[0] == 0 {
            return Err(Error::shape(
                "autoencoder",
                format!("images {s:?}, expected (N, {0}, {0}, {1})", self.image_size, self.channels),
            ));
        }
        Ok(())
    }

    fn encode_on(&self, tape: &mut Tape<f32>, v: &BTreeMap<String, Var>, images: &Tensor<f32>) -> Result<Var> {
        let mut shape = images.shape().to_vec();
        shape.push(1);
        let mut h = tape.constant(images.clone().reshape(shape)?);
        for i in 0..AE_WIDTHS.len() {
            let n = format!("enc.conv{i}");
            h = tape.conv2d(h, v[&format!("{n}.weight")], Some(v[&format!("{n}.bias")]), DOWN)?;
            h = tape.relu(h)?;
        }
        let n = images.shape()[0];
        let flat = tape.value(h).numel() / n;
        let h = tape.reshape(h, &[n, flat, 1])?;
        tape.linear(h, v["enc.fc.weight"], Some(v["enc.fc.bias"]))
    }

    fn decode_on(&self, tape: &mut Tape<f32>, v: &BTreeMap<String, Var>, z: Var) -> Result<Var> {
        let n = tape.shape(z)[0];
        let side = self.image_size / 8;
        let h = tape.linear(z, v["dec.fc.weight"], Some(v["dec.fc.bias"]))?;
        let h = tape.relu(h)?;
        let mut h = tape.reshape(h, &[n, side, side, AE_WIDTHS[2], 1])?;
        for i in 0..3 {
            let name = format!("dec.conv{i}");
            h = tape.upsample2x(h)?;
            h = tape.conv2d(h, v[&format!("{name}.weight")], Some(v[&format!("{name}.bias")]), ConvGeometry::SAME3)?;
            if i < 2 {
                h = tape.relu(h)?;
            }
        }
        tape.reshape(h, &[n, self.image_size, self.image_size, self.channels])
    }

    /// Latents `(N, latent_dim)`.
    pub fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check(images)?;
        let mut out = Vec::new();
        for start in (0..images.shape()[0]).step_by(256) {
            let chunk = images.slice_outer(start, (start + 256).min(images.shape()[0]))?;
            let mut tape = Tape::inference();
            let v = self.vars(&mut tape);
            let z = self.encode_on(&mut tape, &v, &chunk)?;
            out.extend_from_slice(tape.value(z).data());
        }
        Tensor::new(vec![images.shape()[0], self.latent_dim], out)
    }

    pub fn reconstruction_mse(&self, images: &Tensor<f32>) -> Result<f64> {
        self.check(images)?;
        let mut tape = Tape::inference();
        let v = self.vars(&mut tape);
        let z = self.encode_on(&mut tape, &v, images)?;
        let y = self.decode_on(&mut tape, &v, z)?;
        Ok(tape
            .value(y)
            .data()
            .iter()
            .zip(images.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / images.numel() as f64)
    }
}

/// Trains the autoencoder on `images` `(N, H, W, C)` with MSE and Adam.
pub fn train_autoencoder(images: &Tensor<f32>, cfg: &AutoencoderConfig) -> Result<Autoencoder> {
    let s = images.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::Invalid("autoencoder training needs a non-empty (N, H, W, C) set".into()));
    }
    if s[1] != s[2] {
        return Err(Error::shape("train_autoencoder", format!("square images required, got {s:?}")));
    }
    let mut ae = Autoencoder::new(s[1], s[3], cfg.latent_dim, cfg.seed)?;
    let opt = TrainConfig {
        lr: cfg.lr,
        ..TrainConfig::default()
    };
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let n = s[0];
    let batch = cfg.batch_size.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let per: usize = s[1..].iter().product();
    for step in 0..cfg.steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let mut data = Vec::with_capacity(batch * per);
        for &i in &order[cursor..cursor + batch] {
            data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
        }
        cursor += batch;
        let x = Tensor::new(vec![batch, s[1], s[2], s[3]], data)?;
        let mut tape = Tape::new();
        let v = ae.vars(&mut tape);
        let z = ae.encode_on(&mut tape, &v, &x)?;
        let y = ae.decode_on(&mut tape, &v, z)?;
        let target = tape.constant(x);
        let d = tape.sub(y, target)?;
        let sq = tape.mul(d, d)?;
        let loss = tape.mean(sq)?;
        let l = tape.value(loss).item().unwrap_or(f32::NAN);
        if !l.is_finite() {
            return Err(Error::Invalid(format!("autoencoder training diverged at step {step}")));
        }
        let g = tape.backward(loss)?;
        let grads: BTreeMap<String, Tensor<f32>> = v.iter().map(|(k, &var)| (k.clone(), g.get_or_zero(var, &tape))).collect();
        adam_update(&mut ae.params, &grads, &mut adam, &opt)?;
    }
    Ok(ae)
}

/// Gaussian fit of a latent set.
#[derive(Clone, Debug, PartialEq)]
pub struct FadStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FadStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mean and unbiased covariance of the rows of `latents` `(N, d)`. A
    /// rank-deficient covariance gets [`COV_RIDGE`] on its diagonal.
    pub fn fit(latents: &Tensor<f32>) -> Result<Self> {
        let s = latents.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::shape("fad_stats", format!("expected non-empty (N, d), got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let x = DMatrix::from_row_iterator(n, d, latents.data().iter().map(|&v| v as f64));
        let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let denom = (n.max(2) - 1) as f64;
        let mut cov = centered.transpose() * &centered / denom;
        cov = (&cov + cov.transpose()) * 0.5;
        let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
        if n <= d || min_eig <= 0.0 {
            log::warn!("latent covariance is degenerate ({n} samples, dim {d}); adding ridge {COV_RIDGE:e}");
            for i in 0..d {
                cov[(i, i)] += COV_RIDGE;
            }
        }
        Ok(FadStats { mean, cov })
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    if e.eigenvalues.min() < EIG_CLIP {
        log::warn!("clipping eigenvalue {:e} of a covariance product", e.eigenvalues.min());
    }
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, with the root
/// taken as `(S_a^{1/2} S_b S_a^{1/2})^{1/2}`.
pub fn frechet_distance(a: &FadStats, b: &FadStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != (a.dim(), a.dim()) || b.cov.shape() != (b.dim(), b.dim()) {
        return Err(Error::shape("frechet_distance", format!("dimensions {} vs {}", a.dim(), b.dim())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov);
    let cross = psd_sqrt(&(&ra * &b.cov * &ra)).trace();
    Ok(diff + a.cov.trace() + b.cov.trace() - 2.0 * cross)
}

pub fn compute_fad(ae: &Autoencoder, real: &Tensor<f32>, generated: &Tensor<f32>) -> Result<f64> {
    let a = FadStats::fit(&ae.encode(real)?)?;
    let b = FadStats::fit(&ae.encode(generated)?)?;
    frechet_distance(&a, &b)
}

// ---------------------------------------------------------- op counts

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    /// Spiking network: binary synaptic inputs cost one add per spike.
    Snn,
    /// Same layers with `S = 1` and every activation treated as real.
    Ann,
}

impl std::str::FromStr for CountMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snn" => Ok(CountMode::Snn),
            "ann" => Ok(CountMode::Ann),
            other => Err(Error::Config(format!("unknown count mode '{other}' (expected snn or ann)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// One denoising step of one image.
    PerStep,
    /// The whole trajectory of one image.
    PerImage,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerOps {
    pub name: String,
    pub adds: f64,
    pub muls: f64,
    /// Included in `adds`.
    pub bias_adds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCountReport {
    pub mode: CountMode,
    pub scope: Scope,
    pub steps: usize,
    pub layers: Vec<LayerOps>,
}

impl OpCountReport {
    pub fn additions(&self) -> f64 {
        self.layers.iter().map(|l| l.adds).sum()
    }

    pub fn multiplications(&self) -> f64 {
        self.layers.iter().map(|l| l.muls).sum()
    }

    fn scaled(&self, k: f64, scope: Scope) -> Self {
        OpCountReport {
            scope,
            layers: self
                .layers
                .iter()
                .map(|l| LayerOps {
                    name: l.name.clone(),
                    adds: l.adds * k,
                    muls: l.muls * k,
                    bias_adds: l.bias_adds * k,
                })
                .collect(),
            ..self.clone()
        }
    }

    /// Machine-readable `key=value` lines.
    pub fn key_values(&self) -> String {
        let scope = match self.scope {
            Scope::PerStep => "per_step",
            Scope::PerImage => "per_image",
        };
        let mode = match self.mode {
            CountMode::Snn => "snn",
            CountMode::Ann => "ann",
        };
        let mut s = format!(
            "mode={mode}\nscope={scope}\nsnn_steps={}\nadditions={:.0}\nmultiplications={:.0}\n",
            self.steps,
            self.additions(),
            self.multiplications()
        );
        for l in &self.layers {
            s.push_str(&format!("layer.{}.adds={:.0}\nlayer.{}.muls={:.0}\n", l.name, l.adds, l.name, l.muls));
        }
        s
    }
}

impl fmt::Display for OpCountReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<w$}  {:>16}  {:>16}  {:>14}", "layer", "adds", "muls", "of which bias")?;
        for l in &self.layers {
            writeln!(f, "{:<w$}  {:>16.0}  {:>16.0}  {:>14.0}", l.name, l.adds, l.muls, l.bias_adds)?;
        }
        writeln!(
            f,
            "{:<w$}  {:>16.0}  {:>16.0}",
            "total",
            self.additions(),
            self.multiplications()
        )
    }
}

/// Number of `(output position, kernel tap)` pairs reading each input
/// pixel, row-major over `(H, W)`.
fn coverage(d: &ConvDims) -> Vec<f64> {
    let (h, w, kh, kw) = (d.h, d.w, d.kh, d.kw);
    let mut cov = vec![0.0; h * w];
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy * d.geom.stride + ky).checked_sub(d.geom.padding);
                    let ix = (ox * d.geom.stride + kx).checked_sub(d.geom.padding);
                    if let (Some(iy), Some(ix)) = (iy, ix) {
                        if iy < h && ix < w {
                            cov[iy * w + ix] += 1.0;
                        }
                    }
                }
            }
        }
    }
    cov
}

/// Synaptic cost of a conv: `(adds, muls)` excluding bias. With `spiking`
/// each input value counts as that many spikes, each costing `cout` adds;
/// otherwise every valid multiply-accumulate costs one of each.
pub fn conv_ops(input: &Tensor<f32>, d: &ConvDims, spiking: bool) -> (f64, f64) {
    let cov = coverage(d);
    let per_pixel = d.cin * d.steps;
    let mut weighted = 0.0;
    for (p, chunk) in input.data().chunks(per_pixel).enumerate() {
        let c = cov[p % (d.h * d.w)];
        weighted += if spiking {
            c * chunk.iter().map(|&v| v as f64).sum::<f64>()
        } else {
            c * per_pixel as f64
        };
    }
    let total = weighted * d.cout as f64;
    if spiking {
        (total, 0.0)
    } else {
        (total, total)
    }
}

/// Underlying spikes per unit of value: pooled spikes are averages.
fn spike_scale(tape: &Tape<f32>, v: Var) -> f64 {
    match &tape.node(v).op {
        Op::AvgPool2x2(x) => 4.0 * spike_scale(tape, *x),
        Op::Upsample2x(x) | Op::Reshape(x) => spike_scale(tape, *x),
        _ => 1.0,
    }
}

fn node_ops(tape: &Tape<f32>, v: Var, mode: CountMode) -> Result<Option<LayerOps>> {
    let node = tape.node(v);
    let name = node.label.clone().unwrap_or_else(|| format!("{}#{}", node.op.name(), v.index()));
    let numel = node.value.numel() as f64;
    let spiking = |x: Var| mode == CountMode::Snn && tape.kind(x).is_spike_like();
    let ops = match &node.op {
        Op::Conv2d { input, weight, bias, geom } => {
            let d = ConvDims::resolve(tape.shape(*input), tape.shape(*weight), *geom)?;
            let scaled;
            let x = if spiking(*input) {
                let k = spike_scale(tape, *input) as f32;
                scaled = tape.value(*input).map(|s| s * k);
                &scaled
            } else {
                tape.value(*input)
            };
            let (adds, muls) = conv_ops(x, &d, spiking(*input));
            let bias_adds = if bias.is_some() { numel } else { 0.0 };
            LayerOps { name, adds: adds + bias_adds, muls, bias_adds }
        }
        Op::Linear { input, weight, bias } => {
            let dout = tape.shape(*weight)[0] as f64;
            let x = tape.value(*input);
            let (adds, muls) = if spiking(*input) {
                let k = spike_scale(tape, *input);
                (dout * k * x.data().iter().map(|&v| v as f64).sum::<f64>(), 0.0)
            } else {
                let m = dout * x.numel() as f64;
                (m, m)
            };
            let bias_adds = if bias.is_some() { numel } else { 0.0 };
            LayerOps { name, adds: adds + bias_adds, muls, bias_adds }
        }
        Op::BatchNorm { .. } => LayerOps { name, adds: numel, muls: numel, bias_adds: 0.0 },
        Op::Lif { .. } => match mode {
            CountMode::Snn => LayerOps { name, adds: numel, muls: numel, bias_adds: 0.0 },
            CountMode::Ann => return Ok(None),
        },
        Op::Add(..) => LayerOps { name, adds: numel, muls: 0.0, bias_adds: 0.0 },
        Op::AvgPool2x2(x) if !spiking(*x) => LayerOps { name, adds: 3.0 * numel, muls: numel, bias_adds: 0.0 },
        _ => return Ok(None),
    };
    Ok(Some(ops))
}

/// Counts one eval-mode forward of `unet` on `x` `(B, H, W, C, S)` at
/// steps `t`, plus the DDIM affine update, averaged over the batch.
///
/// In ANN mode the network runs with `S = 1` on `dec(x)`.
pub fn count_ops(unet: &UNet, x: &Tensor<f32>, t: &[usize], mode: CountMode) -> Result<OpCountReport> {
    let (net, input) = match mode {
        CountMode::Snn => (unet.clone(), x.clone()),
        CountMode::Ann => {
            let mut ann = unet.clone();
            ann.config.neuron.num_steps = 1;
            (ann, encode_direct(&decode_average(x), 1))
        }
    };
    let mut tape = Tape::inference();
    let xv = tape.constant(input.clone());
    net.forward(&mut tape, xv, t, Mode::Eval)?;
    let mut layers = Vec::new();
    for i in 0..tape.nodes().len() {
        if let Some(l) = node_ops(&tape, Var::at(i), mode)? {
            layers.push(l);
        }
    }
    let n = input.numel() as f64;
    layers.push(LayerOps {
        name: "ddim_step".into(),
        adds: n,
        muls: 2.0 * n,
        bias_adds: 0.0,
    });
    let b = x.shape()[0] as f64;
    let report = OpCountReport {
        mode,
        scope: Scope::PerStep,
        steps: net.config.neuron.num_steps,
        layers,
    };
    Ok(report.scaled(1.0 / b, Scope::PerStep))
}

/// Counts along a signal-space trajectory of `count` images. Returns the
/// mean per-step report and the per-image trajectory total.
pub fn count_trajectory(
    unet: &UNet,
    sched: &NoiseSchedule,
    num_inference_steps: usize,
    count: usize,
    seed: u64,
    mode: CountMode,
) -> Result<(OpCountReport, OpCountReport)> {
    let plan = step_plan(sched, num_inference_steps)?;
    let dims = unet.signal_dims();
    let mut x = encode_direct(&seed_noise(count, dims, seed), dims[3]);
    let mut total: Option<OpCountReport> = None;
    for &(t, a, b) in &plan {
        let ts = vec![t; count];
        let r = count_ops(unet, &x.cast(), &ts, mode)?;
        total = Some(match total {
            None => r,
            Some(mut acc) => {
                for (l, m) in acc.layers.iter_mut().zip(&r.layers) {
                    l.adds += m.adds;
                    l.muls += m.muls;
                    l.bias_adds += m.bias_adds;
                }
                acc
            }
        });
        let y = unet.predict(&x, &ts)?;
        x = x.zip_map(&y, |p, q| a * p + b * q)?;
    }
    let total = total.expect("plan is non-empty").scaled(1.0, Scope::PerImage);
    let per_step = total.scaled(1.0 / plan.len() as f64, Scope::PerStep);
    Ok((per_step, total))
}
