//! Plain-text run configuration: `key = value` lines, `#` comments.
//!
//! Absent keys keep the desk defaults of [`RunConfig::default`].

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DatasetFormat, DatasetSpec};
use crate::diffusion::{make_cosine_schedule_with, LambdaSign, NoiseSchedule};
use crate::error::{Error, Result};
use crate::train::TrainConfig;
use crate::unet::UNetConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: UNetConfig,
    /// Diffusion step count `T`.
    pub t_max: usize,
    pub lambda_sign: LambdaSign,
    pub train: TrainConfig,
    pub sample_steps: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::default(),
            model: UNetConfig::desk(),
            t_max: 100,
            lambda_sign: LambdaSign::Magnitude,
            train: TrainConfig::default(),
            sample_steps: 10,
            seed: 0,
        }
    }
}

/// Every key [`RunConfig::set`] accepts.
pub const KEYS: &[&str] = &[
    "dataset.path",
    "dataset.format",
    "dataset.count",
    "dataset.crop",
    "image.size",
    "image.channels",
    "model.base_channels",
    "model.levels",
    "model.res_blocks",
    "model.time_dim",
    "snn.steps",
    "snn.v_threshold",
    "snn.tau_decay",
    "snn.surrogate_width",
    "diffusion.T",
    "train.lr",
    "train.batch",
    "train.epochs",
    "train.steps",
    "train.grad_clip",
    "train.log_every",
    "train.checkpoint_every",
    "loss.scl",
    "loss.signal",
    "loss.lambda_sign",
    "sample.steps",
    "seed",
];

fn parse<T: FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, got '{v}'"))
}

fn count(v: &str) -> std::result::Result<usize, String> {
    match parse::<usize>(v, "a positive integer")? {
        0 => Err("expected a positive integer, got 0".into()),
        n => Ok(n),
    }
}

fn positive(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse(v, "a number")?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("expected a positive number, got '{v}'"))
    }
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value;
        match key {
            "dataset.path" => self.dataset.path = PathBuf::from(v),
            "dataset.format" => self.dataset.format = DatasetFormat::from_str(v).map_err(|e| e.to_string())?,
            "dataset.count" => self.dataset.count = count(v)?,
            "dataset.crop" => self.dataset.center_crop = Some(count(v)?),
            "image.size" => {
                let s = count(v)?;
                self.model.image_size = s;
                self.dataset.image_size = s;
            }
            "image.channels" => {
                let c = count(v)?;
                self.model.channels = c;
                self.dataset.channels = c;
            }
            "model.base_channels" => self.model.base_channels = count(v)?,
            "model.levels" => self.model.channel_multipliers = (1..=count(v)?).collect(),
            "model.res_blocks" => self.model.num_res_blocks = count(v)?,
            "model.time_dim" => self.model.time_embed_dim = count(v)?,
            "snn.steps" => self.model.neuron.num_steps = count(v)?,
            "snn.v_threshold" => self.model.neuron.v_threshold = positive(v)?,
            "snn.tau_decay" => {
                let t: f64 = parse(v, "a number")?;
                if !(0.0..1.0).contains(&t) {
                    return Err(format!("expected a decay in [0, 1), got '{v}'"));
                }
                self.model.neuron.tau_decay = t;
            }
            "snn.surrogate_width" => self.model.neuron.surrogate_width = positive(v)?,
            "diffusion.T" => self.t_max = count(v)?,
            "train.lr" => self.train.lr = positive(v)?,
            "train.batch" => self.train.batch_size = count(v)?,
            "train.epochs" => self.train.epochs = count(v)?,
            "train.steps" => self.train.max_steps = Some(count(v)?),
            "train.grad_clip" => self.train.grad_clip = Some(positive(v)?),
            "train.log_every" => self.train.log_every = count(v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = Some(count(v)?),
            "loss.scl" => self.train.scl = boolean(v)?,
            "loss.signal" => self.train.signal_loss = boolean(v)?,
            "loss.lambda_sign" => {
                self.lambda_sign = match v {
                    "magnitude" => LambdaSign::Magnitude,
                    "literal" => LambdaSign::Literal,
                    _ => return Err(format!("expected magnitude or literal, got '{v}'")),
                }
            }
            "sample.steps" => self.sample_steps = count(v)?,
            "seed" => {
                let s = parse(v, "an unsigned integer")?;
                self.seed = s;
                self.train.seed = s;
                self.dataset.seed = s;
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Parses config text; `origin` names the source in errors.
    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_lines(text, origin)?;
        Ok(cfg)
    }

    pub fn apply_lines(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |detail: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                detail,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected 'key = value', got '{line}'")))?;
            self.set(k.trim(), v.trim()).map_err(|d| fail(format!("{}: {d}", k.trim())))?;
        }
        Ok(())
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.sample_steps > self.t_max {
            return Err(Error::Config(format!(
                "sample.steps = {} exceeds diffusion.T = {}",
                self.sample_steps, self.t_max
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_cosine_schedule_with(self.t_max, self.model.neuron.num_steps, self.lambda_sign)
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = RunConfig::parse_str(&text, path)?;
    cfg.validate()?;
    Ok(cfg)
}
