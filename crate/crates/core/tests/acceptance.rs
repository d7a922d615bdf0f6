//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion; exits non-zero if any fails.
//!
//! Criteria 5 to 9 share two desk training runs (about 100 minutes on one core).

mod oracles;

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikediff_core::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
use spikediff_core::data::synthetic_shapes;
use spikediff_core::diffusion::{ddim_coefficients_between, make_cosine_schedule, step_plan, NoiseSchedule};
use spikediff_core::metrics::{
    compute_fad, count_ops, frechet_distance, train_autoencoder, AutoencoderConfig, CountMode, FadStats,
};
use spikediff_core::sampling::{
    sample, sample_reference, sample_signal_space, seed_noise, signal_from, Denoiser, FusedSampler, Pipeline,
    SamplerConfig,
};
use spikediff_core::snn::{decode_average, encode_direct, lif_step, LifState, NeuronConfig};
use spikediff_core::train::{train_loop, AdamState, LossBreakdown, TrainConfig, TrainSink};
use spikediff_core::unet::{Mode, UNet, UNetConfig, HEAD};
use spikediff_core::{Result, Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ------------------------------------------------------------ criterion 1

fn gradient_oracle() -> Result<Outcome> {
    let mut worst = (0.0f64, "");
    for (i, p) in oracles::primitives().iter().enumerate() {
        let e = oracles::check_primitive(p, 100 + i as u64)?;
        if e > worst.0 {
            worst = (e, p.name);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..oracles::INSTANCES {
        let cfg = NeuronConfig {
            v_threshold: rng.random_range(0.2..2.0),
            surrogate_width: rng.random_range(0.1..2.0),
            ..NeuronConfig::default()
        };
        mismatches += oracles::spike_threshold_mismatches(&mut rng, cfg)?;
    }
    Ok(outcome(
        worst.0 < oracles::FD_REL_TOL && mismatches == 0,
        format!(
            "{} primitives x {} instances, worst rel err {:.2e} ({}); threshold backward mismatches {}",
            oracles::primitives().len(),
            oracles::INSTANCES,
            worst.0,
            worst.1,
            mismatches
        ),
    ))
}

// ------------------------------------------------------------ criterion 2

fn lif_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0usize;
    for _ in 0..100 {
        let tau = rng.random_range(0.0..0.99);
        let vth = rng.random_range(0.2..2.0);
        let cfg = NeuronConfig {
            v_threshold: vth,
            tau_decay: tau,
            ..NeuronConfig::default()
        };
        let len = rng.random_range(1..=32);
        let currents: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..2.5)).collect();
        let (u_ref, o_ref) = oracles::lif_direct(&currents, tau, vth);
        let mut state = LifState::<f64>::zeros(&[1]);
        for s in 0..len {
            let (next, o) = lif_step(&state, &Tensor::new(vec![1], vec![currents[s]])?, &cfg)?;
            if next.membrane.data()[0] != u_ref[s] || o.data()[0] != o_ref[s] {
                bad += 1;
            }
            state = next;
        }
    }
    Ok(outcome(bad == 0, format!("100 random sequences, {bad} mismatching steps")))
}

// ------------------------------------------------------------ criterion 3

fn schedule_identities() -> Result<Outcome> {
    let sched = make_cosine_schedule(100, 4)?;
    let ab = &sched.alpha_bar;
    let decreasing = ab.windows(2).all(|w| w[1] < w[0]);
    let mut unit = 0.0f64;
    for t in 1..=sched.t_max() {
        let (s, n) = sched.signal_noise(t)?;
        unit = unit.max((s * s + n * n - 1.0).abs());
    }
    // One DDIM jump composed from its parts: estimate x0 and eps from the
    // velocity, then re-noise to the earlier level.
    let compose = |prev: f64, cur: f64, x: f64, v: f64| {
        let x0 = cur.sqrt() * x - (1.0 - cur).sqrt() * v;
        let eps = (1.0 - cur).sqrt() * x + cur.sqrt() * v;
        prev.sqrt() * x0 + (1.0 - prev).sqrt() * eps
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut coef = 0.0f64;
    for _ in 0..1000 {
        let cur: f64 = rng.random_range(1e-4..1.0);
        let prev: f64 = rng.random_range(cur..1.0);
        let (a, b) = ddim_coefficients_between(prev, cur);
        coef = coef.max((a - compose(prev, cur, 1.0, 0.0)).abs()).max((b - compose(prev, cur, 0.0, 1.0)).abs());
    }
    for t in 1..=sched.t_max() {
        let (p, c) = (ab[t - 1], ab[t]);
        coef = coef
            .max((sched.a_coef[t] - compose(p, c, 1.0, 0.0)).abs())
            .max((sched.b_coef[t] - compose(p, c, 0.0, 1.0)).abs());
    }
    Ok(outcome(
        decreasing && unit <= 1e-10 && coef <= 1e-10,
        format!("alpha_bar strictly decreasing: {decreasing}; max |a^2+b^2-1| {unit:.1e}; max coefficient error {coef:.1e}"),
    ))
}

// ------------------------------------------------------------ criterion 4

/// Per-pixel affine map of the decoded input, emitted constant over time.
struct LinearStub {
    dims: [usize; 4],
}

impl Denoiser for LinearStub {
    fn signal_dims(&self) -> [usize; 4] {
        self.dims
    }

    fn predict(&self, x: &Tensor<f64>, t: &[usize]) -> Result<Tensor<f64>> {
        let d = decode_average(x);
        let per = d.numel() / t.len();
        let y = Tensor::from_fn(d.shape().to_vec(), |i| {
            let w = 0.3 + t[i / per] as f64 / 250.0;
            w * d.data()[i] - 0.1 * (i % 5) as f64
        });
        Ok(encode_direct(&y, self.dims[3]))
    }
}

fn random_head(unet: &mut UNet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in [format!("{HEAD}.weight"), format!("{HEAD}.bias")] {
        let t = unet.params.tensors.get_mut(&name).expect("head exists");
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

fn sampler_equivalence() -> Result<Outcome> {
    let sched = make_cosine_schedule(100, 4)?;
    let stub = LinearStub { dims: [16, 16, 1, 4] };
    let cfg = SamplerConfig {
        num_inference_steps: 10,
        seed: 4,
        ..SamplerConfig::default()
    };
    let r = sample_reference(&stub, &sched, &cfg, 8)?;
    let s = sample_signal_space(&stub, &sched, &cfg, 8)?;
    let exact = r == s;

    let mut unet = UNet::build(UNetConfig::desk(), 4)?;
    random_head(&mut unet, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let calib = encode_direct(&Tensor::from_fn(vec![16, 16, 16, 1], |_| rng.random_range(-1.0f32..1.0)), 4);
    unet.calibrate(&calib, &[50; 16])?;
    let fused = FusedSampler::new(&unet, &sched, 10)?;
    let x_t = seed_noise(8, unet.signal_dims(), 7);
    let plan = step_plan(&sched, 10)?;
    let signal = signal_from(&unet, &x_t, &plan)?;
    let diff = signal.max_abs_diff(&fused.run(&x_t)?).unwrap_or(f64::INFINITY);
    Ok(outcome(
        exact && diff < 1e-4,
        format!("linear stub reference == signal-space: {exact}; random desk UNet signal vs fused max abs {diff:.2e} over 10 steps"),
    ))
}

// ------------------------------------------------------- desk experiments

const DESK_STEPS: usize = 2000;
const DESK_BATCH: usize = 16;
const DESK_IMAGES: usize = 1000;
const DESK_SEED: u64 = 1;

struct Progress {
    label: &'static str,
    start: Instant,
}

impl TrainSink for Progress {
    fn on_step(&mut self, step: usize, loss: &LossBreakdown) -> Result<()> {
        if step.is_multiple_of(250) {
            println!(
                "  [{}] {} ({:.0}s)",
                self.label,
                loss.log_line(step),
                self.start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    }
}

struct DeskRun {
    unet: UNet,
    adam: AdamState,
    history: Vec<LossBreakdown>,
    residual: f64,
    fad: f64,
}

fn desk_schedule() -> Result<NoiseSchedule> {
    make_cosine_schedule(100, 4)
}

/// Mean `||y - enc(dec(y))||^2` per image over a fixed held-out batch at
/// fixed noise levels, eval-mode statistics.
fn enc_dec_residual(unet: &UNet, held_out: &Tensor<f32>, sched: &NoiseSchedule) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 256.min(held_out.shape()[0]);
    let mut total = 0.0;
    for start in (0..n).step_by(32) {
        let x0 = held_out.slice_outer(start, (start + 32).min(n))?;
        let b = x0.shape()[0];
        let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.t_max())).collect();
        let per = x0.numel() / b;
        let xt = Tensor::from_fn(x0.shape().to_vec(), |i| {
            let (s, m) = sched.signal_noise(t[i / per]).expect("t in range");
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            (s * x0.data()[i] as f64 + m * e) as f32
        });
        let mut tape = Tape::inference();
        let xv = tape.constant(encode_direct(&xt, 4));
        let out = unet.forward(&mut tape, xv, &t, Mode::Eval)?.output;
        let y = tape.value(out);
        let steps = *y.shape().last().expect("rank 5");
        for chunk in y.data().chunks(steps) {
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / steps as f64;
            total += chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
        }
    }
    Ok(total / n as f64)
}

fn desk_run(
    label: &'static str,
    scl: bool,
    train: &Tensor<f32>,
    held_out: &Tensor<f32>,
    ae: &spikediff_core::metrics::Autoencoder,
) -> Result<DeskRun> {
    let sched = desk_schedule()?;
    let mut unet = UNet::build(UNetConfig::desk(), DESK_SEED)?;
    let cfg = TrainConfig {
        batch_size: DESK_BATCH,
        max_steps: Some(DESK_STEPS),
        scl,
        seed: DESK_SEED,
        ..TrainConfig::default()
    };
    let mut sink = Progress {
        label,
        start: Instant::now(),
    };
    let out = train_loop(&mut unet, train, &sched, &cfg, AdamState::default(), &mut sink)?;
    let residual = enc_dec_residual(&unet, held_out, &sched)?;
    let generated = sample(
        &unet,
        &sched,
        &SamplerConfig {
            num_inference_steps: 10,
            seed: 1234,
            pipeline: Pipeline::Signal,
            verify_fusion: false,
        },
        DESK_IMAGES,
    )?;
    let fad = compute_fad(ae, held_out, &generated.map(|v| v.clamp(-1.0, 1.0)).cast())?;
    println!(
        "  [{label}] done in {:.0}s: residual {residual:.5}, FAD {fad:.4}",
        sink.start.elapsed().as_secs_f64()
    );
    Ok(DeskRun {
        unet,
        adam: out.adam,
        history: out.history,
        residual,
        fad,
    })
}

fn scl_ablation(with: &DeskRun, without: &DeskRun) -> Outcome {
    outcome(
        with.residual < without.residual && with.fad < without.fad,
        format!(
            "enc-dec residual {:.5} (SCL) vs {:.5} (no SCL); FAD {:.4} vs {:.4}",
            with.residual, without.residual, with.fad, without.fad
        ),
    )
}

fn training_sanity(run: &DeskRun) -> Outcome {
    let totals: Vec<f64> = run.history.iter().map(|l| l.total).collect();
    let finite = run.history.iter().all(|l| l.is_finite());
    let window = 100.min(totals.len());
    let first = totals[..window].iter().sum::<f64>() / window as f64;
    let last = totals[totals.len() - window..].iter().sum::<f64>() / window as f64;
    let drop = 1.0 - last / first;
    outcome(
        finite && totals.len() <= DESK_STEPS && drop >= 0.5,
        format!(
            "{} steps, first-100 mean {first:.4}, last-100 mean {last:.4}, decrease {:.1}%, all finite: {finite}",
            totals.len(),
            100.0 * drop
        ),
    )
}

fn op_counts(trained: &UNet) -> Result<Outcome> {
    let sched = desk_schedule()?;
    let x = seed_noise(8, trained.signal_dims(), 21);
    let (t, a, b) = step_plan(&sched, 10)?[3];
    // Count on a mid-trajectory input.
    let mut xs = encode_direct(&x, 4);
    let y = trained.predict(&xs, &[sched.t_max(); 8])?;
    xs = xs.zip_map(&y, |p, q| a * p + b * q)?;
    let x4 = xs.cast::<f32>();
    let ts = vec![t; 8];
    let snn = count_ops(trained, &x4, &ts, CountMode::Snn)?;
    let ann = count_ops(trained, &x4, &ts, CountMode::Ann)?;
    let mut s8 = trained.clone();
    s8.config.neuron.num_steps = 8;
    let x8 = encode_direct(&decode_average(&x4), 8);
    let snn8 = count_ops(&s8, &x8, &ts, CountMode::Snn)?;
    let ratio = snn8.additions() / snn.additions();
    let reduction = 1.0 - snn.multiplications() / ann.multiplications();
    Ok(outcome(
        snn.multiplications() < ann.multiplications() && (1.6..=2.4).contains(&ratio),
        format!(
            "muls SNN(S=4) {:.3e} vs ANN {:.3e} ({:.1}% fewer); adds S=8/S=4 = {ratio:.3}",
            snn.multiplications(),
            ann.multiplications(),
            100.0 * reduction
        ),
    ))
}

fn fad_sanity(ae: &spikediff_core::metrics::Autoencoder, real: &Tensor<f32>) -> Result<Outcome> {
    let n = real.shape()[0];
    let (a, b) = (real.slice_outer(0, n / 2)?, real.slice_outer(n / 2, n)?);
    let same = compute_fad(ae, &a, &b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = Tensor::from_fn(real.shape().to_vec(), |_| rng.random_range(-1.0f32..1.0));
    let far = compute_fad(ae, real, &noise)?;

    let stats = |mean: &[f64], cov: &[f64]| {
        let d = mean.len();
        FadStats {
            mean: nalgebra::DVector::from_column_slice(mean),
            cov: nalgebra::DMatrix::from_row_slice(d, d, cov),
        }
    };
    let p = stats(&[0.5, -1.0, 2.0], &[1.0, 0.2, 0.0, 0.2, 2.0, 0.3, 0.0, 0.3, 1.5]);
    let zero = frechet_distance(&p, &p)?.abs();
    let delta = [1.5, 0.25, -2.0];
    let shifted_mean: Vec<f64> = p.mean.iter().zip(delta).map(|(m, d)| m + d).collect();
    let shifted = stats(&shifted_mean, p.cov.as_slice());
    let norm2: f64 = delta.iter().map(|d| d * d).sum();
    let shift_err = (frechet_distance(&p, &shifted)? - norm2).abs();
    let (sa, sb) = (0.7f64, 1.9f64);
    let ga = stats(&[0.0], &[sa * sa]);
    let gb = stats(&[0.0], &[sb * sb]);
    let scale_err = (frechet_distance(&ga, &gb)? - (sa - sb).powi(2)).abs();
    Ok(outcome(
        same < 0.1 * far && zero < 1e-8 && shift_err < 1e-8 && scale_err < 1e-8,
        format!(
            "FAD(real half, real half) {same:.4} vs FAD(real, noise) {far:.4}; unit-case errors {zero:.1e} / {shift_err:.1e} / {scale_err:.1e}"
        ),
    ))
}

fn persistence(run: &DeskRun) -> Result<Outcome> {
    let sched = desk_schedule()?;
    let mut ck = Checkpoint::new(&run.unet, &sched);
    ck.adam = Some(run.adam.clone());
    ck.step = run.adam.step;
    let dir = tempfile::tempdir().map_err(|e| io_error(std::env::temp_dir(), e))?;
    let path = dir.path().join("desk.ckpt");
    save_checkpoint(&ck, &path)?;
    let loaded = load_checkpoint(&path)?;
    let bytes = encode_checkpoint(&ck);
    let round_trip = loaded == ck
        && encode_checkpoint(&loaded) == bytes
        && decode_checkpoint(&bytes, &path)? == ck
        && std::fs::read(&path).map_err(|e| io_error(path.clone(), e))? == bytes;
    let cfg = SamplerConfig {
        num_inference_steps: 10,
        seed: 77,
        ..SamplerConfig::default()
    };
    let before = sample(&run.unet, &sched, &cfg, 16)?;
    let after = sample(&loaded.unet()?, &loaded.schedule()?, &cfg, 16)?;
    let identical = before.shape() == after.shape()
        && before.data().iter().zip(after.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    Ok(outcome(
        round_trip && identical,
        format!("checkpoint round trip bit-identical: {round_trip}; regenerated samples bit-identical: {identical}"),
    ))
}

fn io_error(path: std::path::PathBuf, source: std::io::Error) -> spikediff_core::Error {
    spikediff_core::Error::Io { path, source }
}

fn again(e: &spikediff_core::Error) -> spikediff_core::Error {
    spikediff_core::Error::Invalid(e.to_string())
}

fn report(n: usize, name: &str, start: Instant, r: Result<Outcome>, failures: &mut usize) {
    report_secs(n, name, start.elapsed().as_secs_f64(), r, failures)
}

fn report_secs(n: usize, name: &str, secs: f64, r: Result<Outcome>, failures: &mut usize) {
    match r {
        Ok(o) => {
            if !o.pass {
                *failures += 1;
            }
            let tag = if o.pass { "PASS" } else { "FAIL" };
            println!("{tag} criterion {n} ({name}, {secs:.1}s): {}", o.detail);
        }
        Err(e) => {
            *failures += 1;
            println!("FAIL criterion {n} ({name}, {secs:.1}s): error: {e}");
        }
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    let t = Instant::now();
    report(1, "gradient oracle", t, gradient_oracle(), &mut failures);
    let t = Instant::now();
    report(2, "LIF oracle", t, lif_oracle(), &mut failures);
    let t = Instant::now();
    report(3, "schedule identities", t, schedule_identities(), &mut failures);
    let t = Instant::now();
    report(4, "sampler equivalence", t, sampler_equivalence(), &mut failures);

    let t = Instant::now();
    let train = synthetic_shapes(DESK_IMAGES, 16, 10);
    let held_out = synthetic_shapes(DESK_IMAGES, 16, 11);
    let ae = train_autoencoder(&train, &AutoencoderConfig::default());
    let ae = match ae {
        Ok(ae) => ae,
        Err(e) => {
            for (n, name) in [(5, "SCL ablation"), (6, "training sanity"), (7, "op counts"), (8, "FAD sanity"), (9, "persistence")] {
                report(n, name, t, Err(again(&e)), &mut failures);
            }
            return ExitCode::FAILURE;
        }
    };
    println!("  autoencoder trained in {:.0}s", t.elapsed().as_secs_f64());
    let t8 = Instant::now();
    let fad = fad_sanity(&ae, &held_out);
    let fad_secs = t8.elapsed().as_secs_f64();

    let t = Instant::now();
    let with = desk_run("scl", true, &train, &held_out, &ae);
    let without = desk_run("no-scl", false, &train, &held_out, &ae);
    match (&with, &without) {
        (Ok(w), Ok(wo)) => report(5, "SCL ablation", t, Ok(scl_ablation(w, wo)), &mut failures),
        (Err(e), _) | (_, Err(e)) => report(5, "SCL ablation", t, Err(again(e)), &mut failures),
    }
    let t = Instant::now();
    match &with {
        Ok(w) => {
            report(6, "training sanity", t, Ok(training_sanity(w)), &mut failures);
            let t = Instant::now();
            report(7, "op-count direction", t, op_counts(&w.unet), &mut failures);
        }
        Err(e) => {
            report(6, "training sanity", t, Err(again(e)), &mut failures);
            report(7, "op-count direction", t, Err(again(e)), &mut failures);
        }
    }
    report_secs(8, "FAD sanity", fad_secs, fad, &mut failures);
    let t = Instant::now();
    match &with {
        Ok(w) => report(9, "persistence", t, persistence(w), &mut failures),
        Err(e) => report(9, "persistence", t, Err(again(e)), &mut failures),
    }

    println!("{} of 9 criteria passed", 9 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
