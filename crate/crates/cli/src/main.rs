//! `spikediff`: train, sample, fuse, evaluate and profile spiking
//! diffusion models.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spikediff_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FusedKernels};
use spikediff_core::config::parse_config;
use spikediff_core::data::{load_dataset, save_png_grid, DatasetFormat, DatasetSpec};
use spikediff_core::diffusion::NoiseSchedule;
use spikediff_core::metrics::{compute_fad, count_trajectory, train_autoencoder, AutoencoderConfig, CountMode};
use spikediff_core::sampling::{sample, sample_fused, FusedSampler, Pipeline, SamplerConfig};
use spikediff_core::train::{train_loop, AdamState, TrainSink};
use spikediff_core::unet::UNet;
use spikediff_core::{Error, Result, Tensor};

#[derive(Parser, Debug)]
#[command(name = "spikediff", version, about = "Fully spiking DDIM diffusion")]
struct Cli {
    /// Seed for every random draw; overrides the config file and `--set seed=`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model. Precedence: flags, then --set, then the config file,
    /// then built-in defaults.
    Train(TrainArgs),
    /// Generate images into a PNG grid.
    Sample(SampleArgs),
    /// Precompute fused step convolutions into a new checkpoint.
    Fuse(FuseArgs),
    /// Score generated images against a dataset.
    Eval(EvalArgs),
    /// Count additions and multiplications.
    CountOps(CountArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Checkpoint path; a sample grid is written next to it.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// `key=value` config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "signal")]
    pipeline: Pipeline,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value = "samples.png")]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    columns: usize,
    /// Also write the unquantized images as little-endian f64.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Fused pipeline: fail unless it matches the signal-space pipeline.
    #[arg(long)]
    verify: bool,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Inference steps the fused kernels are built for.
    #[arg(long, default_value_t = 10)]
    steps: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// IDX file, PNG directory, or `synthetic`.
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value = "fad")]
    metric: String,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value = "signal")]
    pipeline: Pipeline,
    #[arg(long, default_value_t = 1500)]
    ae_steps: usize,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "snn")]
    mode: CountMode,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Images the dynamic counts are averaged over.
    #[arg(long, default_value_t = 8)]
    count: usize,
}

fn load(path: &Path) -> Result<(Checkpoint, UNet, NoiseSchedule)> {
    let ck = load_checkpoint(path)?;
    let unet = ck.unet()?;
    let sched = ck.schedule()?;
    Ok((ck, unet, sched))
}

struct CliSink {
    out: PathBuf,
    t_max: usize,
    lambda_sign: spikediff_core::diffusion::LambdaSign,
    sample_steps: usize,
    seed: u64,
}

impl TrainSink for CliSink {
    fn checkpoint(&mut self, step: usize, unet: &UNet, adam: &AdamState) -> Result<()> {
        let ck = Checkpoint {
            model: unet.config.clone(),
            t_max: self.t_max,
            lambda_sign: self.lambda_sign,
            params: unet.params.clone(),
            adam: Some(adam.clone()),
            step: step as u64,
            fused: None,
        };
        save_checkpoint(&ck, &self.out)?;
        let sched = ck.schedule()?;
        let cfg = SamplerConfig {
            num_inference_steps: self.sample_steps.min(self.t_max),
            seed: self.seed,
            ..SamplerConfig::default()
        };
        let images = sample(unet, &sched, &cfg, 16)?;
        let grid = self.out.with_extension("png");
        save_png_grid(&images, 4, &grid)?;
        log::info!("checkpoint step={step} path={} grid={}", self.out.display(), grid.display());
        Ok(())
    }
}

fn train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = parse_config(&args.config)?;
    for (i, kv) in args.set.iter().enumerate() {
        let line = kv.replacen('=', " = ", 1);
        cfg.apply_lines(&line, Path::new(&format!("--set #{}", i + 1)))?;
    }
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string()).map_err(Error::Config)?;
    }
    cfg.validate()?;
    let images = load_dataset(&cfg.dataset)?;
    let sched = cfg.schedule()?;
    let (mut unet, adam) = match &args.resume {
        Some(path) => {
            let (ck, unet, _) = load(path)?;
            if ck.model != cfg.model || ck.t_max != cfg.t_max {
                return Err(Error::Config(format!(
                    "{} was trained with a different model or diffusion.T than the config",
                    path.display()
                )));
            }
            let adam = ck
                .adam
                .ok_or_else(|| Error::Config(format!("{} has no optimizer state to resume from", path.display())))?;
            (unet, adam)
        }
        None => (UNet::build(cfg.model.clone(), cfg.seed)?, AdamState::default()),
    };
    log::info!(
        "train images={} params={} steps_done={}",
        images.shape()[0],
        unet.params.num_params(),
        adam.step
    );
    let mut sink = CliSink {
        out: args.out,
        t_max: cfg.t_max,
        lambda_sign: cfg.lambda_sign,
        sample_steps: cfg.sample_steps,
        seed: cfg.seed,
    };
    let outcome = train_loop(&mut unet, &images, &sched, &cfg.train, adam, &mut sink)?;
    if let Some(last) = outcome.history.last() {
        println!("{}", last.log_line(outcome.adam.step as usize));
    }
    Ok(())
}

fn generate(
    ck: &Checkpoint,
    unet: &UNet,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    count: usize,
) -> Result<Tensor<f64>> {
    match (&ck.fused, cfg.pipeline) {
        (Some(f), Pipeline::Fused) if f.steps.len() == cfg.num_inference_steps => {
            let fused = FusedSampler::from_parts(unet, sched, f.steps.clone(), f.readout.clone())?;
            sample_fused(&fused, cfg, count)
        }
        _ => sample(unet, sched, cfg, count),
    }
}

fn write_raw(images: &Tensor<f64>, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = images.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn sample_cmd(args: SampleArgs, seed: Option<u64>) -> Result<()> {
    let (ck, unet, sched) = load(&args.ckpt)?;
    let cfg = SamplerConfig {
        num_inference_steps: args.steps,
        seed: seed.unwrap_or(0),
        pipeline: args.pipeline,
        verify_fusion: args.verify,
    };
    let images = generate(&ck, &unet, &sched, &cfg, args.count)?;
    save_png_grid(&images, args.columns, &args.out)?;
    if let Some(raw) = &args.raw {
        write_raw(&images, raw)?;
    }
    println!("wrote={} count={} pipeline={:?}", args.out.display(), args.count, args.pipeline);
    Ok(())
}

fn fuse(args: FuseArgs) -> Result<()> {
    let (mut ck, unet, sched) = load(&args.ckpt)?;
    let fused = FusedSampler::new(&unet, &sched, args.steps)?;
    let widest = fused.steps.last().map_or(0, |s| s.in_channels());
    ck.fused = Some(FusedKernels {
        steps: fused.steps.clone(),
        readout: fused.readout.clone(),
    });
    save_checkpoint(&ck, &args.out)?;
    println!("wrote={} fused_steps={} max_in_channels={widest}", args.out.display(), args.steps);
    Ok(())
}

fn eval(args: EvalArgs, seed: Option<u64>) -> Result<()> {
    if args.metric != "fad" {
        return Err(Error::Config(format!("unknown metric '{}' (expected fad)", args.metric)));
    }
    let (ck, unet, sched) = load(&args.ckpt)?;
    let seed = seed.unwrap_or(0);
    let path = PathBuf::from(&args.dataset);
    let format = if args.dataset == "synthetic" {
        DatasetFormat::Synthetic
    } else if path.is_dir() {
        DatasetFormat::RawDir
    } else {
        DatasetFormat::IdxImages
    };
    let spec = DatasetSpec {
        path,
        format,
        image_size: unet.config.image_size,
        channels: unet.config.channels,
        count: args.count * 2,
        seed: seed.wrapping_add(1),
        ..DatasetSpec::default()
    };
    let real = load_dataset(&spec)?;
    let ae = train_autoencoder(
        &real,
        &AutoencoderConfig {
            steps: args.ae_steps,
            seed,
            ..AutoencoderConfig::default()
        },
    )?;
    let cfg = SamplerConfig {
        num_inference_steps: args.steps,
        seed,
        pipeline: args.pipeline,
        verify_fusion: false,
    };
    let generated = generate(&ck, &unet, &sched, &cfg, args.count)?.map(|v| v.clamp(-1.0, 1.0)).cast::<f32>();
    let n = real.shape()[0].min(args.count);
    let fad = compute_fad(&ae, &real.slice_outer(0, n)?, &generated)?;
    println!("metric=fad value={fad:.6} real={n} generated={}", args.count);
    Ok(())
}

fn count_ops(args: CountArgs, seed: Option<u64>) -> Result<()> {
    let (_, unet, sched) = load(&args.ckpt)?;
    let (per_step, per_image) = count_trajectory(&unet, &sched, args.steps, args.count, seed.unwrap_or(0), args.mode)?;
    println!("# per denoising step, per image\n{per_step}");
    println!("# whole trajectory ({} steps), per image\n{per_image}", args.steps);
    print!("{}", per_step.key_values());
    print!("{}", per_image.key_values());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a, cli.seed),
        Command::Sample(a) => sample_cmd(a, cli.seed),
        Command::Fuse(a) => fuse(a),
        Command::Eval(a) => eval(a, cli.seed),
        Command::CountOps(a) => count_ops(a, cli.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
