//! Fixed-step classical Runge-Kutta integration.

use super::systems::VectorField;
use crate::error::{Result, SpeError};

/// Default step, matching the time resolution used for all simulations.
pub const DEFAULT_DT: f64 = 1e-2;

/// States sampled every `dt` from `t = 0` to `t_end`, inclusive.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Reusable scratch space for RK4 stages.
pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
    clip_negative: bool,
}

impl Rk4 {
    pub(crate) fn new(dim: usize) -> Self {
        Rk4 {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
            clip_negative: false,
        }
    }

    /// Clamp tiny negative excursions to zero for models whose state is
    /// non-negative by construction.
    pub(crate) fn clip_negative(mut self, on: bool) -> Self {
        self.clip_negative = on;
        self
    }

    pub(crate) fn step<F: VectorField + ?Sized>(&mut self, f: &F, x: &mut [f64], h: f64) {
        let n = x.len();
        f.eval_into(x, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        f.eval_into(&self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        f.eval_into(&self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        f.eval_into(&self.tmp, &mut self.k4);
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        if self.clip_negative {
            for v in x.iter_mut() {
                if *v < 0.0 {
                    if *v < -1e-9 {
                        log::warn!("clipping negative state {v} to 0");
                    }
                    *v = 0.0;
                }
            }
        }
    }
}

/// Splits `[0, t_end]` into `n` full steps of `dt` plus a trailing partial step.
fn step_plan(t_end: f64, dt: f64) -> (usize, f64) {
    let n = (t_end / dt + 1e-9).floor() as usize;
    let rem = t_end - n as f64 * dt;
    (n, if rem > 1e-12 * dt.max(1.0) { rem } else { 0.0 })
}

fn check_args(t_end: f64, dt: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(SpeError::InvalidConfig(format!("dt must be > 0, got {dt}")));
    }
    if !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(SpeError::InvalidConfig(format!("t_end must be >= 0, got {t_end}")));
    }
    Ok(())
}

/// Full RK4 trajectory of `field` from `x0`, sampled every `dt`.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    integrate_with(field, x0, t_end, dt, false)
}

pub(crate) fn integrate_with<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t_end: f64,
    dt: f64,
    clip_negative: bool,
) -> Result<Trajectory> {
    check_args(t_end, dt)?;
    if x0.len() != field.dim() {
        return Err(SpeError::DimensionMismatch {
            expected: field.dim(),
            got: x0.len(),
        });
    }
    let (n, rem) = step_plan(t_end, dt);
    let mut rk = Rk4::new(x0.len()).clip_negative(clip_negative);
    let mut x = x0.to_vec();
    let mut times = Vec::with_capacity(n + 2);
    let mut states = Vec::with_capacity(n + 2);
    times.push(0.0);
    states.push(x.clone());
    for i in 1..=n {
        rk.step(field, &mut x, dt);
        let t = i as f64 * dt;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SpeError::BlowUp { time: t });
        }
        times.push(t);
        states.push(x.clone());
    }
    if rem > 0.0 {
        rk.step(field, &mut x, rem);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SpeError::BlowUp { time: t_end });
        }
        times.push(t_end);
        states.push(x);
    }
    Ok(Trajectory {
        dim: x0.len(),
        times,
        states,
    })
}

/// Endpoint of the RK4 flow without storing the path.
pub(crate) fn flow_to<F: VectorField + ?Sized>(
    field: &F,
    x: &mut [f64],
    t_end: f64,
    dt: f64,
    rk: &mut Rk4,
) -> Result<()> {
    check_args(t_end, dt)?;
    let (n, rem) = step_plan(t_end, dt);
    for i in 1..=n {
        rk.step(field, x, dt);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SpeError::BlowUp { time: i as f64 * dt });
        }
    }
    if rem > 0.0 {
        rk.step(field, x, rem);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SpeError::BlowUp { time: t_end });
        }
    }
    Ok(())
}
