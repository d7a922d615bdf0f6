//! Independent reference implementations shared by the gradient tests and
//! the acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikediff_core::kernels::ConvGeometry;
use spikediff_core::snn::NeuronConfig;
use spikediff_core::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so coordinates whose true
/// derivative is zero are judged on absolute error instead.
pub const FD_FLOOR: f64 = 1e-6;
pub const INSTANCES: usize = 20;

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `mean(f(leaves) * r)` for a fixed random `r`, so every output element
/// feeds the scalar with a distinct weight.
fn projected(build: &Build, leaves: &[Tensor<f64>], r: &Tensor<f64>, grad: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut tape = if grad { Tape::new() } else { Tape::inference() };
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    let loss = tape.mean(prod)?;
    let value = tape.value(loss).data()[0];
    if !grad {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| g.get_or_zero(v, &tape)).collect()))
}

fn output_shape(build: &Build, leaves: &[Tensor<f64>]) -> Result<Vec<usize>> {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.shape(out).to_vec())
}

/// Worst relative error between the tape gradient and central differences
/// over every coordinate of every leaf.
pub fn fd_check(build: &Build, leaves: &[Tensor<f64>], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = uniform(&mut rng, output_shape(build, leaves)?, -1.0, 1.0);
    let (_, analytic) = projected(build, leaves, &r, true)?;
    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        for k in 0..leaf.numel() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[k] += FD_STEP;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[k] -= FD_STEP;
            let numeric = (projected(build, &plus, &r, false)?.0 - projected(build, &minus, &r, false)?.0) / (2.0 * FD_STEP);
            let a = analytic[li].data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// One differentiable primitive: a name and a generator of random
/// `(graph, leaves)` instances.
pub struct Primitive {
    pub name: &'static str,
    pub instance: fn(&mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>),
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize) {
    (
        rng.random_range(1..=2),
        rng.random_range(2..=4),
        rng.random_range(2..=4),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
    )
}

fn signal(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let (b, h, w, c, s) = dims(rng);
    uniform(rng, vec![b, h, w, c, s], -1.0, 1.0)
}

fn conv_instance(rng: &mut ChaCha8Rng, geom: ConvGeometry, k: usize) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (b, h, w, cin, s) = dims(rng);
    let (h, w) = (h + 1, w + 1);
    let cout = rng.random_range(1..=3);
    let x = uniform(rng, vec![b, h, w, cin, s], -1.0, 1.0);
    let wt = uniform(rng, vec![cout, k, k, cin], -0.5, 0.5);
    let bias = uniform(rng, vec![cout], -0.5, 0.5);
    (
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], Some(v[2]), geom)),
        vec![x, wt, bias],
    )
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

pub fn primitives() -> Vec<Primitive> {
    vec![
        Primitive {
            name: "conv2d 3x3",
            instance: |rng| conv_instance(rng, ConvGeometry::SAME3, 3),
        },
        Primitive {
            name: "conv2d 3x3 stride 2",
            instance: |rng| conv_instance(rng, ConvGeometry { stride: 2, padding: 1 }, 3),
        },
        Primitive {
            name: "conv2d 1x1",
            instance: |rng| conv_instance(rng, ConvGeometry::POINTWISE, 1),
        },
        Primitive {
            name: "linear",
            instance: |rng| {
                let (n, din, dout, s) = (
                    rng.random_range(1..=3),
                    rng.random_range(1..=4),
                    rng.random_range(1..=4),
                    rng.random_range(1..=3),
                );
                let x = uniform(rng, vec![n, din, s], -1.0, 1.0);
                let w = uniform(rng, vec![dout, din], -1.0, 1.0);
                let b = uniform(rng, vec![dout], -1.0, 1.0);
                (Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))), vec![x, w, b])
            },
        },
        Primitive {
            name: "avgpool2x2",
            instance: |rng| {
                let (b, h, w, c, s) = dims(rng);
                let x = uniform(rng, vec![b, 2 * h, 2 * w, c, s], -1.0, 1.0);
                (Box::new(|t, v| t.avgpool2x2(v[0])), vec![x])
            },
        },
        Primitive {
            name: "upsample2x",
            instance: |rng| (Box::new(|t, v| t.upsample2x(v[0])), vec![signal(rng)]),
        },
        Primitive {
            name: "add",
            instance: |rng| {
                let a = signal(rng);
                let b = uniform(rng, a.shape().to_vec(), -1.0, 1.0);
                (Box::new(|t, v| t.add(v[0], v[1])), vec![a, b])
            },
        },
        Primitive {
            name: "sub",
            instance: |rng| {
                let a = signal(rng);
                let b = uniform(rng, a.shape().to_vec(), -1.0, 1.0);
                (Box::new(|t, v| t.sub(v[0], v[1])), vec![a, b])
            },
        },
        Primitive {
            name: "mul",
            instance: |rng| {
                let a = signal(rng);
                let b = uniform(rng, a.shape().to_vec(), -1.0, 1.0);
                (Box::new(|t, v| t.mul(v[0], v[1])), vec![a, b])
            },
        },
        Primitive {
            name: "scale",
            instance: |rng| {
                let k = rng.random_range(-2.0..2.0);
                (Box::new(move |t, v| t.scale(v[0], k)), vec![signal(rng)])
            },
        },
        Primitive {
            name: "relu",
            instance: |rng| {
                let (b, h, w, c, s) = dims(rng);
                (Box::new(|t, v| t.relu(v[0])), vec![away_from_zero(rng, vec![b, h, w, c, s])])
            },
        },
        Primitive {
            name: "concat",
            instance: |rng| {
                let (b, h, w, _, s) = dims(rng);
                let n = rng.random_range(2..=3);
                let parts: Vec<Tensor<f64>> = (0..n)
                    .map(|_| {
                        let c = rng.random_range(1..=3);
                        uniform(rng, vec![b, h, w, c, s], -1.0, 1.0)
                    })
                    .collect();
                (Box::new(|t, v| t.concat(v)), parts)
            },
        },
        Primitive {
            name: "broadcast_spatial",
            instance: |rng| {
                let (b, h, w, c, s) = dims(rng);
                let x = uniform(rng, vec![b, c, s], -1.0, 1.0);
                (Box::new(move |t, v| t.broadcast_spatial(v[0], h, w)), vec![x])
            },
        },
        Primitive {
            name: "repeat_time",
            instance: |rng| {
                let (b, h, w, c, s) = dims(rng);
                let x = uniform(rng, vec![b, h, w, c], -1.0, 1.0);
                (Box::new(move |t, v| t.repeat_time(v[0], s + 1)), vec![x])
            },
        },
        Primitive {
            name: "mean_time",
            instance: |rng| (Box::new(|t, v| t.mean_time(v[0])), vec![signal(rng)]),
        },
        Primitive {
            name: "mean",
            instance: |rng| (Box::new(|t, v| t.mean(v[0])), vec![signal(rng)]),
        },
        Primitive {
            name: "weighted_sum_sq",
            instance: |rng| {
                let x = signal(rng);
                let w: Vec<f64> = (0..x.shape()[0]).map(|_| rng.random_range(0.1..2.0)).collect();
                (Box::new(move |t, v| t.weighted_sum_sq(v[0], &w)), vec![x])
            },
        },
        Primitive {
            name: "reshape",
            instance: |rng| {
                let x = signal(rng);
                let n = x.numel();
                (Box::new(move |t, v| t.reshape(v[0], &[n])), vec![x])
            },
        },
        Primitive {
            name: "batch_norm (batch statistics)",
            instance: |rng| {
                let (b, h, w, c, s) = dims(rng);
                let x = uniform(rng, vec![b, h, w, c, s + 1], -1.0, 1.0);
                let g = uniform(rng, vec![c], 0.5, 1.5);
                let beta = uniform(rng, vec![c], -0.5, 0.5);
                let gain = rng.random_range(0.5..2.0);
                (
                    Box::new(move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], gain, 1e-5, None)?.0)),
                    vec![x, g, beta],
                )
            },
        },
        Primitive {
            name: "batch_norm (running statistics)",
            instance: |rng| {
                let (b, h, w, c, s) = dims(rng);
                let x = uniform(rng, vec![b, h, w, c, s], -1.0, 1.0);
                let g = uniform(rng, vec![c], 0.5, 1.5);
                let beta = uniform(rng, vec![c], -0.5, 0.5);
                let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
                let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
                (
                    Box::new(move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1.0, 1e-5, Some((&mean, &var)))?.0)),
                    vec![x, g, beta],
                )
            },
        },
    ]
}

/// Worst finite-difference error of `p` over [`INSTANCES`] random draws.
pub fn check_primitive(p: &Primitive, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let (build, leaves) = (p.instance)(&mut rng);
        worst = worst.max(fd_check(build.as_ref(), &leaves, seed.wrapping_add(i as u64))?);
    }
    Ok(worst)
}

pub fn triangle(u: f64, vth: f64, width: f64) -> f64 {
    let d = 1.0 - (u - vth).abs() / width;
    if d > 0.0 { d } else { 0.0 }
}

/// Direct membrane iteration for one neuron: pre-reset potentials and spikes.
pub fn lif_direct(currents: &[f64], tau: f64, vth: f64) -> (Vec<f64>, Vec<f64>) {
    let mut u = Vec::with_capacity(currents.len());
    let mut o = Vec::with_capacity(currents.len());
    let (mut u_prev, mut o_prev) = (0.0, 0.0);
    for &i in currents {
        let v = tau * u_prev * (1.0 - o_prev) + i;
        let spike = if v >= vth { 1.0 } else { 0.0 };
        u.push(v);
        o.push(spike);
        u_prev = v;
        o_prev = spike;
    }
    (u, o)
}

/// Reverse-time accumulation with the reset factor held constant.
pub fn lif_bptt(u: &[f64], o: &[f64], g: &[f64], cfg: &NeuronConfig) -> Vec<f64> {
    let mut d = vec![0.0; u.len()];
    let mut carry = 0.0;
    for s in (0..u.len()).rev() {
        let du = g[s] * triangle(u[s], cfg.v_threshold, cfg.surrogate_width) + carry;
        d[s] = du;
        carry = du * cfg.tau_decay * (1.0 - o[s]);
    }
    d
}

/// Spike-threshold backward against `g * max(1 - |u - V_th| / a, 0)`;
/// returns the number of mismatching elements.
pub fn spike_threshold_mismatches(rng: &mut ChaCha8Rng, cfg: NeuronConfig) -> Result<usize> {
    let (b, h, w, c, s) = dims(rng);
    let u = uniform(rng, vec![b, h, w, c, s], cfg.v_threshold - 2.0, cfg.v_threshold + 2.0);
    let g = uniform(rng, u.shape().to_vec(), -1.0, 1.0);
    // Upstream gradient reaching the threshold output, measured on the same
    // graph with the threshold removed.
    let upstream = {
        let mut tape = Tape::<f64>::new();
        let ov = tape.param(u.clone());
        let gv = tape.constant(g.clone());
        let prod = tape.mul(ov, gv)?;
        let loss = tape.mean(prod)?;
        tape.backward(loss)?.get_or_zero(ov, &tape)
    };
    let mut tape = Tape::<f64>::new();
    let uv = tape.param(u.clone());
    let o = tape.spike_threshold(uv, cfg)?;
    let gv = tape.constant(g);
    let prod = tape.mul(o, gv)?;
    let loss = tape.mean(prod)?;
    let got = tape.backward(loss)?.get_or_zero(uv, &tape);
    Ok(u.data()
        .iter()
        .zip(upstream.data())
        .zip(got.data())
        .filter(|((&u, &up), &d)| d != up * triangle(u, cfg.v_threshold, cfg.surrogate_width))
        .count())
}
