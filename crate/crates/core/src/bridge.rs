//! Conditional Brownian-bridge diffusion between a clean image `x0` (t = 0)
//! and its condition `y` (t = T).
//!
//! Forward marginal: `x_t = (1 − m_t)·x0 + m_t·y + √δ_t·ε` with `m_t = t/T`
//! and `δ_t = 2·s_max·m_t(1 − m_t)`. A reverse step from `t` to any `s < t`
//! uses
//!
//! ```text
//! x_s = c_x·x_t + c_y·y − c_ε·(x_t − x̂0) + √δ̃·z
//! ```
//!
//! where, with `a = δ_s/δ_t`, `r = (1 − m_t)/(1 − m_s)` and `b = 1 − a·r²`:
//! `c_x = a·r + b·(1 − m_s)`, `c_y = m_s − m_t·a·r`, `c_ε = b·(1 − m_s)` and
//! `δ̃ = b·δ_s`. At `t = T` the ratios are replaced by their limits
//! `a·r = m_s/m_t` and `a·r² = 0`.

use gradkit::Tensor;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PadmError, Result};

/// Serialisable parameters from which a [`Schedule`] is rebuilt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    pub t_max: usize,
    pub s_max: f64,
}

impl ScheduleDescriptor {
    pub fn build(&self) -> Result<Schedule> {
        build_schedule(self.t_max, self.s_max)
    }
}

/// Coefficients of one reverse transition `t → s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    pub c_x: f64,
    pub c_y: f64,
    pub c_eps: f64,
    pub var: f64,
}

/// Precomputed bridge quantities for `t = 0..=T`. The per-step arrays
/// describe `t → t − 1`; their index 0 is unused and holds 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    t_max: usize,
    s_max: f64,
    m: Vec<f64>,
    delta: Vec<f64>,
    delta_cond: Vec<f64>,
    delta_tilde: Vec<f64>,
    c_x: Vec<f64>,
    c_y: Vec<f64>,
    c_eps: Vec<f64>,
}

pub fn build_schedule(t_max: usize, s_max: f64) -> Result<Schedule> {
    if t_max < 2 {
        return Err(PadmError::Schedule(format!("T must be at least 2, got {t_max}")));
    }
    if !(s_max > 0.0 && s_max.is_finite()) {
        return Err(PadmError::Schedule(format!("s_max must be positive, got {s_max}")));
    }
    let tf = t_max as f64;
    let m: Vec<f64> = (0..=t_max).map(|t| t as f64 / tf).collect();
    let delta: Vec<f64> = m.iter().map(|&m| 2.0 * s_max * m * (1.0 - m)).collect();
    let mut sched = Schedule {
        t_max,
        s_max,
        delta_cond: vec![0.0; t_max + 1],
        delta_tilde: vec![0.0; t_max + 1],
        c_x: vec![0.0; t_max + 1],
        c_y: vec![0.0; t_max + 1],
        c_eps: vec![0.0; t_max + 1],
        m,
        delta,
    };
    for t in 1..=t_max {
        let r = (1.0 - sched.m[t]) / (1.0 - sched.m[t - 1]);
        sched.delta_cond[t] = sched.delta[t] - sched.delta[t - 1] * r * r;
        let c = sched.coefficients(t, t - 1)?;
        sched.c_x[t] = c.c_x;
        sched.c_y[t] = c.c_y;
        sched.c_eps[t] = c.c_eps;
        sched.delta_tilde[t] = c.var;
    }
    Ok(sched)
}

impl Schedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn descriptor(&self) -> ScheduleDescriptor {
        ScheduleDescriptor {
            t_max: self.t_max,
            s_max: self.s_max,
        }
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn delta_cond(&self) -> &[f64] {
        &self.delta_cond
    }

    pub fn delta_tilde(&self) -> &[f64] {
        &self.delta_tilde
    }

    pub fn c_x(&self) -> &[f64] {
        &self.c_x
    }

    pub fn c_y(&self) -> &[f64] {
        &self.c_y
    }

    pub fn c_eps(&self) -> &[f64] {
        &self.c_eps
    }

    /// Coefficients of the reverse transition from `t` to `s`, `0 ≤ s < t ≤ T`.
    pub fn coefficients(&self, t: usize, s: usize) -> Result<StepCoefficients> {
        if !(s < t && t <= self.t_max) {
            return Err(PadmError::Schedule(format!(
                "reverse transition {t} → {s} outside 0 ≤ s < t ≤ {}",
                self.t_max
            )));
        }
        let (mt, ms) = (self.m[t], self.m[s]);
        let (dt, ds) = (self.delta[t], self.delta[s]);
        let (ar, ar2) = if dt > 0.0 {
            let a = ds / dt;
            let r = (1.0 - mt) / (1.0 - ms);
            (a * r, a * r * r)
        } else {
            (ms / mt, 0.0)
        };
        let b = 1.0 - ar2;
        Ok(StepCoefficients {
            c_x: ar + b * (1.0 - ms),
            c_y: ms - mt * ar,
            c_eps: b * (1.0 - ms),
            var: b * ds,
        })
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(PadmError::Schedule(format!("t = {t} exceeds T = {}", self.t_max)));
        }
        Ok(())
    }
}

fn same_shape(what: &str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(PadmError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `x_t = (1 − m_t)·x0 + m_t·y + √δ_t·ε`, evaluated in f64 per element.
pub fn forward_sample(
    x0: &Tensor<f32>,
    y: &Tensor<f32>,
    t: usize,
    eps: &Tensor<f32>,
    sched: &Schedule,
) -> Result<Tensor<f32>> {
    same_shape("forward_sample x0/y", x0, y)?;
    same_shape("forward_sample x0/ε", x0, eps)?;
    sched.check_t(t)?;
    let mut out = Tensor::zeros(x0.shape());
    forward_sample_into(x0.data(), y.data(), eps.data(), t, sched, out.data_mut());
    Ok(out)
}

pub(crate) fn forward_sample_into(
    x0: &[f32],
    y: &[f32],
    eps: &[f32],
    t: usize,
    sched: &Schedule,
    out: &mut [f32],
) {
    let m = sched.m[t];
    let sd = sched.delta[t].sqrt();
    for (((o, &a), &b), &e) in out.iter_mut().zip(x0).zip(y).zip(eps) {
        *o = ((1.0 - m) * a as f64 + m * b as f64 + sd * e as f64) as f32;
    }
}

/// One reverse transition `t → s` with optional noise `z`.
pub fn reverse_step_to(
    x_t: &Tensor<f32>,
    pred_x0: &Tensor<f32>,
    y: &Tensor<f32>,
    t: usize,
    s: usize,
    z: Option<&Tensor<f32>>,
    sched: &Schedule,
) -> Result<Tensor<f32>> {
    same_shape("reverse_step x_t/x̂0", x_t, pred_x0)?;
    same_shape("reverse_step x_t/y", x_t, y)?;
    if let Some(z) = z {
        same_shape("reverse_step x_t/z", x_t, z)?;
    }
    let c = sched.coefficients(t, s)?;
    let sd = c.var.sqrt();
    let data = (0..x_t.numel())
        .map(|i| {
            let xt = x_t.data()[i] as f64;
            let noise = z.map_or(0.0, |z| sd * z.data()[i] as f64);
            let v = c.c_x * xt + c.c_y * y.data()[i] as f64
                - c.c_eps * (xt - pred_x0.data()[i] as f64)
                + noise;
            v as f32
        })
        .collect();
    Ok(Tensor::from_vec(x_t.shape().to_vec(), data)?)
}

/// One reverse transition `t → t − 1`.
pub fn reverse_step(
    x_t: &Tensor<f32>,
    pred_x0: &Tensor<f32>,
    y: &Tensor<f32>,
    t: usize,
    z: Option<&Tensor<f32>>,
    sched: &Schedule,
) -> Result<Tensor<f32>> {
    if t == 0 {
        return Err(PadmError::Schedule("reverse_step needs t ≥ 1".into()));
    }
    reverse_step_to(x_t, pred_x0, y, t, t - 1, z, sched)
}

/// Strictly decreasing visit order with `steps` entries from `T` down to 1,
/// uniformly strided. A single step visits `T` only.
pub fn timestep_subsequence(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(PadmError::Schedule(format!(
            "steps must lie in 1..={t_max}, got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![t_max]);
    }
    let span = (t_max - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| t_max - (i as f64 * span).round() as usize)
        .collect())
}

pub enum NoiseMode<'a> {
    Deterministic,
    /// Adds `√δ̃·z`; only honoured when every timestep is visited.
    Stochastic(&'a mut dyn RngCore),
}

/// Reverse trajectory from `x_T = y` to `t = 0` over `steps` timesteps.
pub fn sample<C, F>(
    mut denoiser: F,
    y: &Tensor<f32>,
    cond: &C,
    sched: &Schedule,
    steps: usize,
    mut noise: NoiseMode<'_>,
) -> Result<Tensor<f32>>
where
    F: FnMut(&Tensor<f32>, &C, usize) -> Result<Tensor<f32>>,
{
    let mut visits = timestep_subsequence(sched.t_max(), steps)?;
    visits.push(0);
    let stochastic = steps == sched.t_max();
    let mut x = y.clone();
    for pair in visits.windows(2) {
        let (t, s) = (pair[0], pair[1]);
        let pred = denoiser(&x, cond, t)?;
        if pred.shape() != x.shape() {
            return Err(PadmError::Shape(format!(
                "denoiser returned {:?} for input {:?}",
                pred.shape(),
                x.shape()
            )));
        }
        let z = match &mut noise {
            NoiseMode::Stochastic(rng) if stochastic && s > 0 => Some(Tensor::from_fn(
                x.shape(),
                |_| StandardNormal.sample(&mut **rng),
            )),
            _ => None,
        };
        x = reverse_step_to(&x, &pred, y, t, s, z.as_ref(), sched)?;
    }
    Ok(x)
}
