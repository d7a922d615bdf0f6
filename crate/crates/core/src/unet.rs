//! The spiking UNet: synaptic currents in, synaptic currents out.
//!
//! Layer order inside a ResBlock:
//! conv3x3 -> tdBN -> (+ time projection) -> LIF -> conv3x3 -> tdBN ->
//! (+ skip) -> LIF. The skip is the block input when channel counts match,
//! otherwise a 1x1 conv of it.
//!
//! The stem conv is the only layer fed real-valued signal; the final 1x1
//! conv reads the concatenated spikes of every full-resolution up-path
//! ResBlock and emits currents without a LIF after it. The sampling
//! pipelines evaluate those two boundary convs in `f64`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, ConvGeometry};
use crate::snn::{tdbn_with_momentum, BnMode, NeuronConfig, RunningStats, TDBN_MOMENTUM};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub const STEM: &str = "conv_in";
pub const HEAD: &str = "conv_out";
pub const TIME_FC1: &str = "time.fc1";

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    /// Image channels, both in and out.
    pub channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks: usize,
    pub time_embed_dim: usize,
    pub neuron: NeuronConfig,
}

impl UNetConfig {
    /// 16x16 single-channel model used for desk experiments.
    pub fn desk() -> Self {
        UNetConfig {
            channels: 1,
            image_size: 16,
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            num_res_blocks: 1,
            time_embed_dim: 128,
            neuron: NeuronConfig::default(),
        }
    }

    /// Four-level 32x32 RGB model with 128/256/384/512 channels.
    pub fn full_scale() -> Self {
        UNetConfig {
            channels: 3,
            image_size: 32,
            base_channels: 128,
            channel_multipliers: vec![1, 2, 3, 4],
            num_res_blocks: 1,
            time_embed_dim: 512,
            neuron: NeuronConfig::default(),
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.neuron.validate()?;
        let levels = self.levels();
        if levels == 0 {
            return Err(Error::Config("at least one resolution level is required".into()));
        }
        if self.channels == 0 || self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.num_res_blocks == 0 {
            return Err(Error::Config("num_res_blocks must be >= 1".into()));
        }
        let div = 1usize << (levels - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "image size {} not divisible by 2^(levels-1) = {}",
                self.image_size, div
            )));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    name: String,
    cin: usize,
    cout: usize,
}

#[derive(Clone, Debug)]
enum Stage {
    Res(Block),
    /// avgpool 2x2 -> 1x1 conv -> tdBN -> LIF.
    Down(Block),
    /// nearest 2x -> 3x3 conv -> tdBN -> LIF.
    Up(Block),
}

/// Static layer layout shared by initialization and the forward pass.
#[derive(Clone, Debug)]
struct Plan {
    stem_out: usize,
    down: Vec<Stage>,
    /// Two ResBlocks at the lowest resolution.
    mid: Vec<Block>,
    /// Up-path stages; every `Res` consumes one skip.
    up: Vec<(Stage, bool)>,
    head_in: usize,
}

impl Plan {
    fn new(cfg: &UNetConfig) -> Plan {
        let ch = |l: usize| cfg.base_channels * cfg.channel_multipliers[l];
        let levels = cfg.levels();
        let mut skips = vec![ch(0)];
        let mut down = Vec::new();
        let mut cur = ch(0);
        for l in 0..levels {
            for r in 0..cfg.num_res_blocks {
                down.push(Stage::Res(Block {
                    name: format!("down.{l}.res.{r}"),
                    cin: cur,
                    cout: ch(l),
                }));
                cur = ch(l);
                skips.push(cur);
            }
            if l + 1 < levels {
                down.push(Stage::Down(Block {
                    name: format!("down.{l}.pool"),
                    cin: cur,
                    cout: cur,
                }));
                skips.push(cur);
            }
        }
        let mid = (0..2)
            .map(|i| Block {
                name: format!("mid.{i}"),
                cin: cur,
                cout: cur,
            })
            .collect();
        let mut up = Vec::new();
        let mut head_in = 0;
        for l in (0..levels).rev() {
            for r in 0..=cfg.num_res_blocks {
                let skip = skips.pop().expect("one skip per up-path block");
                up.push((
                    Stage::Res(Block {
                        name: format!("up.{l}.res.{r}"),
                        cin: cur + skip,
                        cout: ch(l),
                    }),
                    l == 0,
                ));
                cur = ch(l);
                if l == 0 {
                    head_in += cur;
                }
            }
            if l > 0 {
                up.push((
                    Stage::Up(Block {
                        name: format!("up.{l}.upsample"),
                        cin: cur,
                        cout: cur,
                    }),
                    false,
                ));
            }
        }
        Plan {
            stem_out: ch(0),
            down,
            mid,
            up,
            head_in,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    FanIn,
    Zero,
    One,
}

/// Every trainable tensor with its initializer and fan-in, plus the tdBN
/// layers that carry running statistics.
#[derive(Default)]
struct Layout {
    tensors: Vec<(String, Vec<usize>, Init, usize)>,
    bns: Vec<(String, usize)>,
}

impl Layout {
    fn conv(&mut self, name: &str, cout: usize, k: usize, cin: usize, init: Init) {
        let fan = k * k * cin;
        self.tensors.push((format!("{name}.weight"), vec![cout, k, k, cin], init, fan));
        self.tensors.push((format!("{name}.bias"), vec![cout], init, fan));
    }

    fn linear(&mut self, name: &str, dout: usize, din: usize) {
        self.tensors.push((format!("{name}.weight"), vec![dout, din], Init::FanIn, din));
        self.tensors.push((format!("{name}.bias"), vec![dout], Init::FanIn, din));
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.tensors.push((format!("{name}.gamma"), vec![c], Init::One, 0));
        self.tensors.push((format!("{name}.beta"), vec![c], Init::Zero, 0));
        self.bns.push((name.to_string(), c));
    }

    fn res(&mut self, b: &Block, temb: usize) {
        self.conv(&format!("{}.conv1", b.name), b.cout, 3, b.cin, Init::FanIn);
        self.bn(&format!("{}.bn1", b.name), b.cout);
        self.linear(&format!("{}.temb", b.name), b.cout, temb);
        self.conv(&format!("{}.conv2", b.name), b.cout, 3, b.cout, Init::FanIn);
        self.bn(&format!("{}.bn2", b.name), b.cout);
        if b.cin != b.cout {
            self.conv(&format!("{}.skip", b.name), b.cout, 1, b.cin, Init::FanIn);
        }
    }

    fn stage(&mut self, s: &Stage, temb: usize) {
        match s {
            Stage::Res(b) => self.res(b, temb),
            Stage::Down(b) => {
                self.conv(&format!("{}.conv", b.name), b.cout, 1, b.cin, Init::FanIn);
                self.bn(&format!("{}.bn", b.name), b.cout);
            }
            Stage::Up(b) => {
                self.conv(&format!("{}.conv", b.name), b.cout, 3, b.cin, Init::FanIn);
                self.bn(&format!("{}.bn", b.name), b.cout);
            }
        }
    }

    fn of(cfg: &UNetConfig) -> Layout {
        let plan = Plan::new(cfg);
        let d = cfg.time_embed_dim;
        let mut l = Layout::default();
        l.linear(TIME_FC1, d, d);
        l.bn("time.bn1", d);
        l.linear("time.fc2", d, d);
        l.bn("time.bn2", d);
        l.conv(STEM, plan.stem_out, 3, cfg.channels, Init::FanIn);
        l.bn("stem.bn", plan.stem_out);
        for s in &plan.down {
            l.stage(s, d);
        }
        for b in &plan.mid {
            l.res(b, d);
        }
        for (s, _) in &plan.up {
            l.stage(s, d);
        }
        l.conv(HEAD, cfg.channels, 1, plan.head_in, Init::Zero);
        l
    }
}

/// Number of trainable scalars a configuration implies.
pub fn param_count(cfg: &UNetConfig) -> usize {
    Layout::of(cfg).tensors.iter().map(|(_, s, _, _)| s.iter().product::<usize>()).sum()
}

/// Named trainable tensors and tdBN running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub stats: BTreeMap<String, RunningStats>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter tensor '{name}'")))
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks names and shapes against what `cfg` requires.
    pub fn check_against(&self, cfg: &UNetConfig) -> Result<()> {
        let Layout { tensors, bns } = Layout::of(cfg);
        if tensors.len() != self.tensors.len() || bns.len() != self.stats.len() {
            return Err(Error::Invalid(format!(
                "parameter set has {} tensors / {} tdBN layers, configuration needs {} / {}",
                self.tensors.len(),
                self.stats.len(),
                tensors.len(),
                bns.len()
            )));
        }
        for (name, shape, _, _) in &tensors {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("params", format!("{name}: {:?} vs {:?}", t.shape(), shape)));
            }
        }
        for (name, c) in &bns {
            match self.stats.get(name) {
                Some(s) if s.mean.len() == *c && s.var.len() == *c => {}
                _ => return Err(Error::Invalid(format!("running statistics for '{name}' missing or mis-sized"))),
            }
        }
        Ok(())
    }
}

/// Seeded initialization: fan-in uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// for weights and biases, tdBN scale 1 and shift 0, zero final conv.
pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let Layout { tensors: layout, bns } = Layout::of(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, init, fan_in) in layout {
        let t = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::full(shape, 1.0),
            Init::FanIn => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
            }
        };
        tensors.insert(name, t);
    }
    let stats = bns.into_iter().map(|(n, c)| (n, RunningStats::new(c))).collect();
    Ok(ModelParams { tensors, stats })
}

/// Sinusoidal embedding: `sin(t w_i)` for the first half, `cos(t w_i)` for
/// the second, `w_i = 10000^(-i / (half - 1))`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("time embedding dimension must be even, got {dim}")));
    }
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / denom).exp()).collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (t as f64 * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (t as f64 * w).cos()));
    Ok(out)
}

/// How a forward pass treats tdBN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Batch statistics; running statistics updated with `momentum`.
    Train { momentum: f64 },
    /// Running statistics.
    Eval,
}

impl Mode {
    pub fn train() -> Self {
        Mode::Train { momentum: TDBN_MOMENTUM }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// Output currents `(B, H, W, C, S)`.
    pub output: Var,
    /// Spikes entering the final conv.
    pub head_input: Var,
    /// Trainable leaves by name.
    pub params: BTreeMap<String, Var>,
    /// Running statistics after the pass (updated in train mode).
    pub stats: BTreeMap<String, RunningStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub config: UNetConfig,
    pub params: ModelParams,
}

struct Ctx<'a> {
    tape: &'a mut Tape<f32>,
    vars: BTreeMap<String, Var>,
    stats: BTreeMap<String, RunningStats>,
    neuron: NeuronConfig,
    mode: Mode,
}

impl Ctx<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("missing parameter tensor '{name}'")))
    }

    fn conv(&mut self, x: Var, name: &str, geom: ConvGeometry) -> Result<Var> {
        let (w, b) = (self.var(&format!("{name}.weight"))?, self.var(&format!("{name}.bias"))?);
        let y = self.tape.conv2d(x, w, Some(b), geom)?;
        self.tape.set_label(y, name);
        Ok(y)
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let (w, b) = (self.var(&format!("{name}.weight"))?, self.var(&format!("{name}.bias"))?);
        let y = self.tape.linear(x, w, Some(b))?;
        self.tape.set_label(y, name);
        Ok(y)
    }

    fn bn(&mut self, x: Var, name: &str) -> Result<Var> {
        let (g, b) = (self.var(&format!("{name}.gamma"))?, self.var(&format!("{name}.beta"))?);
        let stats = self
            .stats
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("missing running statistics '{name}'")))?;
        let (mode, momentum) = match self.mode {
            Mode::Train { momentum } => (BnMode::Train, momentum),
            Mode::Eval => (BnMode::Eval, 0.0),
        };
        let y = tdbn_with_momentum(self.tape, x, g, b, stats, &self.neuron, mode, momentum)?;
        self.tape.set_label(y, name);
        Ok(y)
    }

    fn lif(&mut self, x: Var, name: &str) -> Result<Var> {
        let y = self.tape.lif(x, self.neuron)?;
        self.tape.set_label(y, name);
        Ok(y)
    }

    fn add(&mut self, a: Var, b: Var, name: &str) -> Result<Var> {
        let y = self.tape.add(a, b)?;
        self.tape.set_label(y, name);
        Ok(y)
    }

    fn res_block(&mut self, x: Var, temb: Var, b: &Block) -> Result<Var> {
        let n = &b.name;
        let s = self.tape.shape(x).to_vec();
        let c1 = self.conv(x, &format!("{n}.conv1"), ConvGeometry::SAME3)?;
        let c1 = self.bn(c1, &format!("{n}.bn1"))?;
        let p = self.linear(temb, &format!("{n}.temb"))?;
        let p = self.tape.broadcast_spatial(p, s[1], s[2])?;
        let c1 = self.add(c1, p, &format!("{n}.temb_add"))?;
        let s1 = self.lif(c1, &format!("{n}.lif1"))?;
        let c2 = self.conv(s1, &format!("{n}.conv2"), ConvGeometry::SAME3)?;
        let c2 = self.bn(c2, &format!("{n}.bn2"))?;
        let skip = if b.cin == b.cout {
            x
        } else {
            self.conv(x, &format!("{n}.skip"), ConvGeometry::POINTWISE)?
        };
        let sum = self.add(c2, skip, &format!("{n}.residual"))?;
        self.lif(sum, &format!("{n}.lif2"))
    }

    fn time_path(&mut self, t: &[usize], dim: usize, steps: usize) -> Result<Var> {
        let mut data = Vec::with_capacity(t.len() * dim);
        for &ti in t {
            data.extend(time_embedding(ti, dim)?.into_iter().map(|v| v as f32));
        }
        let e = self.tape.constant(Tensor::new(vec![t.len(), dim], data)?);
        let e = self.tape.repeat_time(e, steps)?;
        let h = self.linear(e, TIME_FC1)?;
        let h = self.bn(h, "time.bn1")?;
        let h = self.lif(h, "time.lif1")?;
        let h = self.linear(h, "time.fc2")?;
        let h = self.bn(h, "time.bn2")?;
        self.lif(h, "time.lif2")
    }
}

impl UNet {
    pub fn new(config: UNetConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(UNet { config, params })
    }

    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        let params = build_unet(&config, seed)?;
        Ok(UNet { config, params })
    }

    /// Signal shape `(batch, H, W, C, S)` this model consumes and emits.
    pub fn signal_shape(&self, batch: usize) -> Vec<usize> {
        let c = &self.config;
        vec![batch, c.image_size, c.image_size, c.channels, c.neuron.num_steps]
    }

    fn check_input(&self, shape: &[usize], t: &[usize]) -> Result<()> {
        let expect = self.signal_shape(shape.first().copied().unwrap_or(0));
        if shape != expect.as_slice() || shape[0] == 0 {
            return Err(Error::shape(
                "unet_forward",
                format!("input {:?}, model expects {:?}", shape, expect),
            ));
        }
        if t.len() != shape[0] {
            return Err(Error::shape(
                "unet_forward",
                format!("{} time steps for batch of {}", t.len(), shape[0]),
            ));
        }
        Ok(())
    }

    fn register(&self, tape: &mut Tape<f32>) -> BTreeMap<String, Var> {
        self.params
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect()
    }

    fn ctx<'a>(&self, tape: &'a mut Tape<f32>, mode: Mode) -> Ctx<'a> {
        let vars = self.register(tape);
        Ctx {
            tape,
            vars,
            stats: self.params.stats.clone(),
            neuron: self.config.neuron,
            mode,
        }
    }

    /// Everything between the stem conv and the final conv. `stem` holds
    /// the stem conv's output currents.
    fn body(&self, ctx: &mut Ctx, stem: Var, t: &[usize]) -> Result<Var> {
        let plan = Plan::new(&self.config);
        let temb = ctx.time_path(t, self.config.time_embed_dim, self.config.neuron.num_steps)?;
        let h = ctx.bn(stem, "stem.bn")?;
        let mut h = ctx.lif(h, "stem.lif")?;
        let mut skips = vec![h];
        for stage in &plan.down {
            h = match stage {
                Stage::Res(b) => ctx.res_block(h, temb, b)?,
                Stage::Down(b) => {
                    let p = ctx.tape.avgpool2x2(h)?;
                    let c = ctx.conv(p, &format!("{}.conv", b.name), ConvGeometry::POINTWISE)?;
                    let c = ctx.bn(c, &format!("{}.bn", b.name))?;
                    ctx.lif(c, &format!("{}.lif", b.name))?
                }
                Stage::Up(_) => unreachable!("down path has no upsampling"),
            };
            skips.push(h);
        }
        for b in &plan.mid {
            h = ctx.res_block(h, temb, b)?;
        }
        let mut head = Vec::new();
        for (stage, full_res) in &plan.up {
            h = match stage {
                Stage::Res(b) => {
                    let skip = skips.pop().expect("plan balances skips");
                    let cat = ctx.tape.concat(&[h, skip])?;
                    ctx.res_block(cat, temb, b)?
                }
                Stage::Up(b) => {
                    let u = ctx.tape.upsample2x(h)?;
                    let c = ctx.conv(u, &format!("{}.conv", b.name), ConvGeometry::SAME3)?;
                    let c = ctx.bn(c, &format!("{}.bn", b.name))?;
                    ctx.lif(c, &format!("{}.lif", b.name))?
                }
                Stage::Down(_) => unreachable!("up path has no pooling"),
            };
            if *full_res {
                head.push(h);
            }
        }
        ctx.tape.concat(&head)
    }

    /// Full forward on `tape` with `x` holding input currents.
    pub fn forward(&self, tape: &mut Tape<f32>, x: Var, t: &[usize], mode: Mode) -> Result<Forward> {
        self.check_input(tape.shape(x), t)?;
        let mut ctx = self.ctx(tape, mode);
        let stem = ctx.conv(x, STEM, ConvGeometry::SAME3)?;
        let head_input = self.body(&mut ctx, stem, t)?;
        let output = ctx.conv(head_input, HEAD, ConvGeometry::POINTWISE)?;
        Ok(Forward {
            output,
            head_input,
            params: ctx.vars,
            stats: ctx.stats,
        })
    }

    /// Runs the body from precomputed stem currents and returns the spikes
    /// that feed the final conv. Eval mode, no gradients.
    pub fn hidden_from_stem(&self, stem: &Tensor<f64>, t: &[usize]) -> Result<Tensor<f32>> {
        let mut tape = Tape::inference();
        self.hidden_on_tape(&mut tape, stem, t)?;
        Ok(tape.nodes().last().expect("body records nodes").value.clone())
    }

    /// Like [`UNet::hidden_from_stem`] but leaves the recorded graph on
    /// `tape` for inspection; returns the spike handle.
    pub fn hidden_on_tape(&self, tape: &mut Tape<f32>, stem: &Tensor<f64>, t: &[usize]) -> Result<Var> {
        let mut shape = stem.shape().to_vec();
        if shape.len() == 5 {
            shape[3] = self.config.channels;
        }
        self.check_input(&shape, t)?;
        let mut ctx = self.ctx(tape, Mode::Eval);
        let stem = ctx.tape.constant(stem.cast());
        ctx.tape.set_label(stem, STEM);
        self.body(&mut ctx, stem, t)
    }

    /// Stem conv in double precision.
    pub fn stem_f64(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        conv_f64(x, self.params.get(&format!("{STEM}.weight"))?, self.params.get(&format!("{STEM}.bias"))?, ConvGeometry::SAME3)
    }

    /// Final conv in double precision.
    pub fn head_f64(&self, spikes: &Tensor<f32>) -> Result<Tensor<f64>> {
        conv_f64(
            &spikes.cast(),
            self.params.get(&format!("{HEAD}.weight"))?,
            self.params.get(&format!("{HEAD}.bias"))?,
            ConvGeometry::POINTWISE,
        )
    }

    /// Eval-mode prediction in signal space with `f64` boundary convs.
    pub fn predict(&self, x: &Tensor<f64>, t: &[usize]) -> Result<Tensor<f64>> {
        self.check_input(x.shape(), t)?;
        let stem = self.stem_f64(x)?;
        let hidden = self.hidden_from_stem(&stem, t)?;
        self.head_f64(&hidden)
    }

    /// Sets every tdBN layer's running statistics to the batch moments of
    /// one train-mode pass over `x` at steps `t`.
    pub fn calibrate(&mut self, x: &Tensor<f32>, t: &[usize]) -> Result<()> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, xv, t, Mode::Train { momentum: 1.0 })?;
        self.params.stats = f.stats;
        Ok(())
    }
}

/// Checks that every synaptic layer other than the stem conv and the first
/// time-embedding linear reads spikes.
pub fn check_spike_traffic(tape: &Tape<f32>) -> Result<()> {
    for node in tape.nodes() {
        let input = match &node.op {
            Op::Conv2d { input, .. } | Op::Linear { input, .. } => *input,
            _ => continue,
        };
        let label = node.label.as_deref().unwrap_or("?");
        if label == STEM || label == TIME_FC1 {
            continue;
        }
        if !tape.kind(input).is_spike_like() {
            return Err(Error::Invalid(format!("layer '{label}' consumes real-valued input")));
        }
    }
    Ok(())
}

/// `f64` convolution with `f32` parameters.
pub fn conv_f64(x: &Tensor<f64>, weight: &Tensor<f32>, bias: &Tensor<f32>, geom: ConvGeometry) -> Result<Tensor<f64>> {
    let d = ConvDims::resolve(x.shape(), weight.shape(), geom)?;
    let w = weight.cast::<f64>();
    let b = bias.cast::<f64>();
    let out = kernels::conv2d_forward(x.data(), w.data(), Some(b.data()), &d);
    Tensor::new(d.out_shape(), out)
}
