//! Cosine noise schedule, forward diffusion, velocity targets and the
//! deterministic DDIM update `x_{t-1} = a_t x_t + b_t v`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const COSINE_OFFSET: f64 = 0.008;
const MIN_ALPHA_BAR: f64 = 1e-8;

/// How the SCL weight `lambda_t` is derived from `b_t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LambdaSign {
    /// `|b_t| / S`.
    #[default]
    Magnitude,
    /// `b_t / S`, negative under velocity prediction.
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    steps: usize,
    lambda_sign: LambdaSign,
    /// Indexed by `t = 0..=T`; entry 0 is 1.
    pub alpha_bar: Vec<f64>,
    /// Indexed by `t`; entry 0 is the identity step `(1, 0)`.
    pub a_coef: Vec<f64>,
    pub b_coef: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
}

fn cosine_f(t: usize, t_max: usize) -> f64 {
    let x = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
}

pub fn make_cosine_schedule(t_max: usize, steps: usize) -> Result<NoiseSchedule> {
    make_cosine_schedule_with(t_max, steps, LambdaSign::Magnitude)
}

pub fn make_cosine_schedule_with(t_max: usize, steps: usize, lambda_sign: LambdaSign) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::Config("diffusion step count T must be >= 1".into()));
    }
    if steps == 0 {
        return Err(Error::Config("SNN step count S must be >= 1".into()));
    }
    let f0 = cosine_f(0, t_max);
    let alpha_bar: Vec<f64> = (0..=t_max)
        .map(|t| if t == 0 { 1.0 } else { (cosine_f(t, t_max) / f0).max(MIN_ALPHA_BAR) })
        .collect();
    let mut a_coef = vec![1.0];
    let mut b_coef = vec![0.0];
    for t in 1..=t_max {
        let (a, b) = ddim_coefficients_between(alpha_bar[t - 1], alpha_bar[t]);
        a_coef.push(a);
        b_coef.push(b);
    }
    let gamma = alpha_bar.clone();
    let lambda = b_coef
        .iter()
        .map(|&b| match lambda_sign {
            LambdaSign::Magnitude => b.abs() / steps as f64,
            LambdaSign::Literal => b / steps as f64,
        })
        .collect();
    Ok(NoiseSchedule {
        t_max,
        steps,
        lambda_sign,
        alpha_bar,
        a_coef,
        b_coef,
        gamma,
        lambda,
    })
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// SNN time steps `S` the SCL weight was divided by.
    pub fn snn_steps(&self) -> usize {
        self.steps
    }

    pub fn lambda_sign(&self) -> LambdaSign {
        self.lambda_sign
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::StepOutOfRange { t, max: self.t_max });
        }
        Ok(())
    }

    /// `(sqrt(abar_t), sqrt(1 - abar_t))`.
    pub fn signal_noise(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let ab = self.alpha_bar[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

/// DDIM coefficients for one jump from `abar_cur` down to `abar_prev`
/// under velocity prediction.
pub fn ddim_coefficients_between(abar_prev: f64, abar_cur: f64) -> (f64, f64) {
    let a = (abar_prev * abar_cur).sqrt() + ((1.0 - abar_prev) * (1.0 - abar_cur)).sqrt();
    let b = (abar_cur * (1.0 - abar_prev)).sqrt() - (abar_prev * (1.0 - abar_cur)).sqrt();
    (a, b)
}

pub fn ddim_coefficients(t: usize, sched: &NoiseSchedule) -> Result<(f64, f64)> {
    sched.check_step(t)?;
    Ok((sched.a_coef[t], sched.b_coef[t]))
}

fn affine<F: Element>(x: &Tensor<F>, p: f64, y: &Tensor<F>, q: f64, op: &'static str) -> Result<Tensor<F>> {
    if x.shape() != y.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let (p, q) = (F::from_f64(p), F::from_f64(q));
    x.zip_map(y, |a, b| p * a + q * b)
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<F: Element>(x0: &Tensor<F>, t: usize, eps: &Tensor<F>, sched: &NoiseSchedule) -> Result<Tensor<F>> {
    let (s, n) = sched.signal_noise(t)?;
    affine(x0, s, eps, n, "q_sample")
}

/// `sqrt(abar_t) eps - sqrt(1 - abar_t) x0`.
pub fn velocity_target<F: Element>(
    x0: &Tensor<F>,
    eps: &Tensor<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    let (s, n) = sched.signal_noise(t)?;
    affine(eps, s, x0, -n, "velocity_target")
}

/// Recovers `x0 = sqrt(abar) x_t - sqrt(1 - abar) v`.
pub fn x0_from_velocity<F: Element>(
    x_t: &Tensor<F>,
    v: &Tensor<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    let (s, n) = sched.signal_noise(t)?;
    affine(x_t, s, v, -n, "x0_from_velocity")
}

/// Recovers `eps = sqrt(1 - abar) x_t + sqrt(abar) v`.
pub fn eps_from_velocity<F: Element>(
    x_t: &Tensor<F>,
    v: &Tensor<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    let (s, n) = sched.signal_noise(t)?;
    affine(x_t, n, v, s, "eps_from_velocity")
}

pub fn ddim_step<F: Element>(
    x_t: &Tensor<F>,
    net_out: &Tensor<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    let (a, b) = ddim_coefficients(t, sched)?;
    affine(x_t, a, net_out, b, "ddim_step")
}

/// Uniform-stride inference steps `[0, tau_1, .., tau_K = T]`, with
/// `tau_k = k * T / K` (integer division).
pub fn inference_steps(t_max: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > t_max {
        return Err(Error::Config(format!(
            "inference step count must be in 1..={t_max}, got {k}"
        )));
    }
    Ok((0..=k).map(|i| i * t_max / k).collect())
}

/// Coefficients for every jump of an inference sub-sequence, ordered from
/// `tau_K` down to `tau_1`: `(t, a, b)` where the network is evaluated at `t`.
pub fn step_plan(sched: &NoiseSchedule, k: usize) -> Result<Vec<(usize, f64, f64)>> {
    let taus = inference_steps(sched.t_max, k)?;
    Ok((1..taus.len())
        .rev()
        .map(|i| {
            let (cur, prev) = (taus[i], taus[i - 1]);
            let (a, b) = ddim_coefficients_between(sched.alpha_bar[prev], sched.alpha_bar[cur]);
            (cur, a, b)
        })
        .collect())
}
