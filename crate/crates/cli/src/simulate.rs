use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use spe::dynsys::{ground_truth_label, project_dims, sample_grid, sample_sparse, SamplingConfig, System, SystemSpec};
use spe::io;

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON config `{"system": {...}, "sampling": {...}, "grid": side?, "project_dims": [..]?}`;
    /// replaces the system and sampling flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// so, augmented_so, lienard_poly, lienard_sigmoid, van_der_pol, bz, selkov, repressilator
    #[arg(long)]
    system: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    a: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    b: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    c: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    omega: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Hill coefficient of the repressilator.
    #[arg(long)]
    hill: Option<u32>,
    /// Seed of the random warp (augmented_so).
    #[arg(long)]
    warp_seed: Option<u64>,
    /// Number of samples.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Velocity noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the protocol's minimum integration time.
    #[arg(long)]
    t_min: Option<f64>,
    /// Override the protocol's maximum integration time.
    #[arg(long)]
    t_max: Option<f64>,
    /// Sample a `side x side` grid instead of random trajectories.
    #[arg(long)]
    grid: Option<usize>,
    /// Keep only these coordinates, e.g. `0,1`.
    #[arg(long, value_delimiter = ',')]
    project_dims: Option<Vec<usize>>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

/// Resolved simulation request.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub system: SystemSpec,
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub grid: Option<usize>,
    #[serde(default)]
    pub project_dims: Option<Vec<usize>>,
}

fn system_from_flags(a: &SimulateArgs) -> Result<System> {
    let name = a.system.as_deref().context("--system (or --config) is required")?;
    let mut obj = Map::new();
    obj.insert("system".into(), json!(name));
    let floats = [
        ("a", a.a),
        ("b", a.b),
        ("c", a.c),
        ("omega", a.omega),
        ("mu", a.mu),
        ("alpha", a.alpha),
        ("alpha0", a.alpha0),
        ("beta", a.beta),
    ];
    for (k, v) in floats {
        if let Some(v) = v {
            obj.insert(k.into(), json!(v));
        }
    }
    if let Some(n) = a.hill {
        obj.insert("n".into(), json!(n));
    }
    if let Some(s) = a.warp_seed {
        obj.insert("seed".into(), json!(s));
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| spe::SpeError::InvalidConfig(format!("system `{name}`: {e}")).into())
}

fn resolve(a: &SimulateArgs) -> Result<SimulateConfig> {
    if let Some(path) = &a.config {
        if a.system.is_some() {
            bail!(spe::SpeError::InvalidConfig("give either --config or --system, not both".into()));
        }
        let cfg: SimulateConfig = io::read_json(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(cfg);
    }
    let system = system_from_flags(a)?;
    let mut sampling = SamplingConfig::for_system(&system, a.n, a.sigma, a.seed);
    if let Some(t) = a.t_min {
        sampling.t_min = t;
    }
    if let Some(t) = a.t_max {
        sampling.t_max = t;
    }
    Ok(SimulateConfig {
        system: SystemSpec::new(system)?,
        sampling,
        grid: a.grid,
        project_dims: a.project_dims.clone(),
    })
}

pub fn run(a: SimulateArgs) -> Result<()> {
    let cfg = resolve(&a)?;
    cfg.sampling.validate()?;
    let mut samples = match cfg.grid {
        Some(side) => sample_grid(&cfg.system, side, cfg.sampling.noise_sigma, cfg.sampling.seed)?,
        None => sample_sparse(&cfg.system, &cfg.sampling)?,
    };
    if let Some(dims) = &cfg.project_dims {
        samples = project_dims(&samples, dims)?;
    }
    io::write_samples(&a.out, &samples).with_context(|| format!("writing {}", a.out.display()))?;
    let label = ground_truth_label(&cfg.system)
        .map(|t| t.behavior.to_string())
        .unwrap_or_else(|_| "unknown".into());
    println!(
        "n={} d={} sigma={} label={}",
        samples.len(),
        samples.dim(),
        cfg.sampling.noise_sigma,
        label
    );
    Ok(())
}
