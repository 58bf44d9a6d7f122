use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::integrate::{flow_to, Rk4, DEFAULT_DT};
use super::systems::{System, SystemSpec, VectorField};
use crate::error::{Result, SpeError};
use crate::rng::rng_from_seed;

/// Maximum number of redraws per sample index after an integration blow-up.
pub const MAX_RETRIES: usize = 100;

/// Settings for the random-trajectory sampling protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_samples: usize,
    #[serde(default)]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_t_max() -> f64 {
    3.0
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

impl SamplingConfig {
    /// 2D defaults: `t in [0, 3]`, `dt = 0.01`.
    pub fn planar(n_samples: usize, noise_sigma: f64, seed: u64) -> Self {
        SamplingConfig {
            n_samples,
            t_min: 0.0,
            t_max: 3.0,
            dt: DEFAULT_DT,
            noise_sigma,
            seed,
        }
    }

    /// Repressilator defaults: `t in [3, 10]`.
    pub fn repressilator(n_samples: usize, noise_sigma: f64, seed: u64) -> Self {
        SamplingConfig {
            t_min: 3.0,
            t_max: 10.0,
            ..Self::planar(n_samples, noise_sigma, seed)
        }
    }

    /// Protocol defaults for `system`.
    pub fn for_system(system: &System, n_samples: usize, noise_sigma: f64, seed: u64) -> Self {
        match system {
            System::Repressilator { .. } => Self::repressilator(n_samples, noise_sigma, seed),
            _ => Self::planar(n_samples, noise_sigma, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(SpeError::InvalidConfig("n_samples must be >= 1".into()));
        }
        if !(0.0 <= self.t_min && self.t_min <= self.t_max && self.t_max.is_finite()) {
            return Err(SpeError::InvalidConfig(format!(
                "need 0 <= t_min <= t_max, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if !(self.dt > 0.0) {
            return Err(SpeError::InvalidConfig("dt must be > 0".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(SpeError::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// How a sample set was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum Protocol {
    Sparse(SamplingConfig),
    Grid { side: usize, noise_sigma: f64, seed: u64 },
    External,
}

/// Provenance record carried alongside the samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub system: Option<SystemSpec>,
    pub protocol: Protocol,
    /// Coordinates kept by `project_dims`, relative to the original system.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    /// Total number of redraws after blow-ups.
    #[serde(default)]
    pub retries: usize,
}

impl SampleMeta {
    pub fn external() -> Self {
        SampleMeta {
            system: None,
            protocol: Protocol::External,
            dims: None,
            retries: 0,
        }
    }
}

/// `N` position/velocity pairs in `d` dimensions, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    dim: usize,
    positions: Vec<f64>,
    velocities: Vec<f64>,
    pub meta: SampleMeta,
}

impl SampleSet {
    pub fn new(dim: usize, positions: Vec<f64>, velocities: Vec<f64>, meta: SampleMeta) -> Result<Self> {
        if dim == 0 {
            return Err(SpeError::InvalidConfig("sample dimension must be >= 1".into()));
        }
        if positions.len() != velocities.len() || !positions.len().is_multiple_of(dim) {
            return Err(SpeError::InvalidConfig(format!(
                "positions ({}) and velocities ({}) must both be N x {dim}",
                positions.len(),
                velocities.len()
            )));
        }
        if positions.is_empty() {
            return Err(SpeError::EmptySamples);
        }
        if positions.iter().chain(&velocities).any(|v| !v.is_finite()) {
            return Err(SpeError::InvalidConfig("non-finite sample entry".into()));
        }
        Ok(SampleSet {
            dim,
            positions,
            velocities,
            meta,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocities[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn velocities(&self) -> &[f64] {
        &self.velocities
    }

    /// Per-coordinate mean of the positions.
    pub fn position_mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (m, x) in mean.iter_mut().zip(self.position(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Per-coordinate population standard deviation of the positions.
    pub fn position_std(&self) -> Vec<f64> {
        let mean = self.position_mean();
        let n = self.len() as f64;
        let mut var = vec![0.0; self.dim];
        for i in 0..self.len() {
            for ((v, x), m) in var.iter_mut().zip(self.position(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter().map(|v| (v / n).sqrt()).collect()
    }

    /// Copy with every velocity multiplied by `factor`.
    pub fn scale_velocities(&self, factor: f64) -> SampleSet {
        let mut out = self.clone();
        out.velocities.iter_mut().for_each(|v| *v *= factor);
        out
    }
}

fn uniform_in_box(rng: &mut impl rand::Rng, bounds: &[[f64; 2]], out: &mut [f64]) {
    for (x, [lo, hi]) in out.iter_mut().zip(bounds) {
        let u: f64 = rng.random();
        *x = lo + (hi - lo) * u;
    }
}

/// Random-trajectory sampling: uniform initial conditions in the box, each
/// flowed for a uniform random time in `[t_min, t_max]`, with Gaussian noise
/// added to the velocities only.
pub fn sample_sparse(spec: &SystemSpec, cfg: &SamplingConfig) -> Result<SampleSet> {
    cfg.validate()?;
    let d = spec.dim();
    let mut rng = rng_from_seed(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| SpeError::InvalidConfig(e.to_string()))?;
    let clip = matches!(spec.system, System::Repressilator { .. });
    let mut rk = Rk4::new(d).clip_negative(clip);
    let mut positions = Vec::with_capacity(cfg.n_samples * d);
    let mut velocities = Vec::with_capacity(cfg.n_samples * d);
    let mut x = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut total_retries = 0;
    for index in 0..cfg.n_samples {
        let mut attempts = 0;
        loop {
            uniform_in_box(&mut rng, &spec.bounds, &mut x);
            let t = if cfg.t_max > cfg.t_min {
                rng.random_range(cfg.t_min..cfg.t_max)
            } else {
                cfg.t_min
            };
            let ok = flow_to(spec, &mut x, t, cfg.dt, &mut rk).is_ok() && {
                spec.eval_into(&x, &mut v);
                v.iter().all(|c| c.is_finite())
            };
            if ok {
                break;
            }
            attempts += 1;
            if attempts >= MAX_RETRIES {
                return Err(SpeError::SamplingFailed {
                    index,
                    retries: attempts,
                });
            }
        }
        total_retries += attempts;
        if cfg.noise_sigma > 0.0 {
            for c in v.iter_mut() {
                *c += noise.sample(&mut rng);
            }
        }
        positions.extend_from_slice(&x);
        velocities.extend_from_slice(&v);
    }
    if total_retries > 0 {
        log::warn!("{}: {total_retries} samples redrawn after blow-up", spec.name());
    }
    SampleSet::new(
        d,
        positions,
        velocities,
        SampleMeta {
            system: Some(spec.clone()),
            protocol: Protocol::Sparse(cfg.clone()),
            dims: None,
            retries: total_retries,
        },
    )
}

/// Regular `side x side` grid over a planar system's box.
pub fn sample_grid(spec: &SystemSpec, side: usize, noise_sigma: f64, seed: u64) -> Result<SampleSet> {
    if spec.dim() != 2 {
        return Err(SpeError::InvalidConfig(format!(
            "grid sampling needs a 2D system, {} is {}D",
            spec.name(),
            spec.dim()
        )));
    }
    if side < 2 {
        return Err(SpeError::InvalidConfig("grid side must be >= 2".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(SpeError::InvalidConfig("noise_sigma must be >= 0".into()));
    }
    let mut rng = rng_from_seed(seed);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| SpeError::InvalidConfig(e.to_string()))?;
    let [[lo0, hi0], [lo1, hi1]] = [spec.bounds[0], spec.bounds[1]];
    let step = |lo: f64, hi: f64, k: usize| lo + (hi - lo) * k as f64 / (side - 1) as f64;
    let mut positions = Vec::with_capacity(side * side * 2);
    let mut velocities = Vec::with_capacity(side * side * 2);
    let mut v = [0.0; 2];
    for i in 0..side {
        for j in 0..side {
            let x = [step(lo0, hi0, i), step(lo1, hi1, j)];
            spec.eval_into(&x, &mut v);
            if noise_sigma > 0.0 {
                v[0] += noise.sample(&mut rng);
                v[1] += noise.sample(&mut rng);
            }
            positions.extend_from_slice(&x);
            velocities.extend_from_slice(&v);
        }
    }
    SampleSet::new(
        2,
        positions,
        velocities,
        SampleMeta {
            system: Some(spec.clone()),
            protocol: Protocol::Grid {
                side,
                noise_sigma,
                seed,
            },
            dims: None,
            retries: 0,
        },
    )
}

/// Restricts positions and velocities to the listed coordinates, in order.
pub fn project_dims(s: &SampleSet, dims: &[usize]) -> Result<SampleSet> {
    if dims.is_empty() {
        return Err(SpeError::InvalidConfig("projection needs at least one dim".into()));
    }
    for (k, &d) in dims.iter().enumerate() {
        if d >= s.dim() {
            return Err(SpeError::InvalidConfig(format!(
                "projection index {d} out of range for {}D samples",
                s.dim()
            )));
        }
        if dims[..k].contains(&d) {
            return Err(SpeError::InvalidConfig(format!("duplicate projection index {d}")));
        }
    }
    let mut positions = Vec::with_capacity(s.len() * dims.len());
    let mut velocities = Vec::with_capacity(s.len() * dims.len());
    for i in 0..s.len() {
        let (x, v) = (s.position(i), s.velocity(i));
        positions.extend(dims.iter().map(|&d| x[d]));
        velocities.extend(dims.iter().map(|&d| v[d]));
    }
    let mut meta = s.meta.clone();
    meta.dims = Some(match &s.meta.dims {
        Some(prev) => dims.iter().map(|&d| prev[d]).collect(),
        None => dims.to_vec(),
    });
    SampleSet::new(dims.len(), positions, velocities, meta)
}
