use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use spe::dynsys::{SamplingConfig, System, SystemSpec, VectorField};
use spe::spe::{eval_sweep, instances_csv, random_instances, PrototypeSet, SweepOptions, SweepReport, SystemAccuracy};
use spe::train::{LossConfig, OptimConfig};
use spe::{io, SpeError};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Sweep config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out_dir: PathBuf,
}

/// `count` instances drawn uniformly from the parameter ranges of `template`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomInstances {
    pub template: System,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Cartesian product of per-parameter value lists, in `param_ranges` order.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridInstances {
    pub template: System,
    pub values: Vec<Vec<f64>>,
}

fn default_n_points() -> Vec<usize> {
    vec![1000]
}

fn default_noise() -> Vec<f64> {
    vec![0.1]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub systems: Vec<SystemSpec>,
    #[serde(default)]
    pub random: Vec<RandomInstances>,
    #[serde(default)]
    pub grids: Vec<GridInstances>,
    #[serde(default = "default_n_points")]
    pub n_points: Vec<usize>,
    #[serde(default = "default_noise")]
    pub noise: Vec<f64>,
    /// Overrides of the per-system sampling time window.
    #[serde(default)]
    pub t_min: Option<f64>,
    #[serde(default)]
    pub t_max: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optim: Option<OptimConfig>,
    #[serde(default)]
    pub prototypes: Option<PrototypeSet>,
    #[serde(default)]
    pub project_dims: Option<Vec<usize>>,
    #[serde(default)]
    pub cycle_error: bool,
}

fn grid_systems(g: &GridInstances) -> Result<Vec<System>> {
    let mut combos: Vec<Vec<f64>> = vec![vec![]];
    for axis in &g.values {
        combos = combos
            .iter()
            .flat_map(|c| {
                axis.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(*v);
                    c
                })
            })
            .collect();
    }
    Ok(combos.iter().map(|c| g.template.with_params(c)).collect::<spe::Result<_>>()?)
}

impl SweepConfig {
    fn instances(&self) -> Result<Vec<SystemSpec>> {
        let mut out = self.systems.clone();
        for r in &self.random {
            for s in random_instances(&r.template, r.count, r.seed)? {
                out.push(SystemSpec::new(s)?);
            }
        }
        for g in &self.grids {
            for s in grid_systems(g)? {
                out.push(SystemSpec::new(s)?);
            }
        }
        if out.is_empty() {
            return Err(SpeError::InvalidConfig("sweep has no systems".into()).into());
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    n_samples: usize,
    noise_sigma: f64,
    accuracy: Option<f64>,
    per_system: &'a [SystemAccuracy],
}

#[derive(Debug, Serialize)]
struct Aggregate<'a> {
    dim: usize,
    runs: Vec<RunSummary<'a>>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, io::fmt_f64)
}

pub fn run(a: EvalArgs) -> Result<()> {
    let mut cfg: SweepConfig = io::read_json(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let specs = cfg.instances()?;
    let dims = |s: &SystemSpec| cfg.project_dims.as_ref().map_or(s.dim(), Vec::len);
    let d = dims(&specs[0]);
    if let Some(bad) = specs.iter().find(|s| dims(s) != d) {
        return Err(SpeError::DimensionMismatch { expected: d, got: dims(bad) }).context("all sweep systems must share a dimension");
    }
    if cfg.n_points.is_empty() || cfg.noise.is_empty() {
        return Err(SpeError::InvalidConfig("n_points and noise must be nonempty".into()).into());
    }
    cfg.optim.get_or_insert_with(|| OptimConfig::for_dim(d));
    cfg.prototypes.get_or_insert_with(|| PrototypeSet::for_dim(d));
    let optim = cfg.optim.clone().unwrap();
    let protos = cfg.prototypes.clone().unwrap();
    let opts = SweepOptions {
        project_dims: cfg.project_dims.clone(),
        cycle_error: cfg.cycle_error,
    };
    std::fs::create_dir_all(&a.out_dir)?;
    io::write_json(&a.out_dir.join("sweep.config.json"), &cfg)?;

    // instances sharing a system share the sampling protocol
    let mut groups: Vec<(&'static str, Vec<SystemSpec>)> = Vec::new();
    for s in &specs {
        match groups.iter_mut().find(|(n, _)| *n == s.name()) {
            Some((_, v)) => v.push(s.clone()),
            None => groups.push((s.name(), vec![s.clone()])),
        }
    }
    let mut reports: Vec<(usize, f64, SweepReport)> = Vec::new();
    for &n in &cfg.n_points {
        for &sigma in &cfg.noise {
            let mut merged: Option<SweepReport> = None;
            for (_, members) in &groups {
                let mut sampling = SamplingConfig::for_system(&members[0].system, n, sigma, cfg.seed);
                if let Some(t) = cfg.t_min {
                    sampling.t_min = t;
                }
                if let Some(t) = cfg.t_max {
                    sampling.t_max = t;
                }
                let r = eval_sweep(members, &protos, &sampling, &cfg.loss, &optim, &opts)?;
                match &mut merged {
                    None => merged = Some(r),
                    Some(m) => {
                        let offset = m.records.len();
                        m.records.extend(r.records.into_iter().map(|mut rec| {
                            rec.index += offset;
                            rec
                        }));
                        m.per_system.extend(r.per_system);
                    }
                }
            }
            let mut m = merged.expect("at least one group");
            let evaluated: Vec<_> = m.records.iter().filter(|r| r.counts()).collect();
            m.accuracy = (!evaluated.is_empty())
                .then(|| evaluated.iter().filter(|r| r.correct).count() as f64 / evaluated.len() as f64);
            log::info!("n={n} sigma={sigma}: accuracy {:?}", m.accuracy);
            reports.push((n, sigma, m));
        }
    }

    let mut instances = String::new();
    for (i, (_, _, r)) in reports.iter().enumerate() {
        let csv = instances_csv(r, protos.len());
        let skip = if i == 0 { 0 } else { 1 };
        for line in csv.lines().skip(skip) {
            instances.push_str(line);
            instances.push('\n');
        }
    }
    std::fs::write(a.out_dir.join("instances.csv"), instances)?;

    let aggregate = Aggregate {
        dim: d,
        runs: reports
            .iter()
            .map(|(n, s, r)| RunSummary {
                n_samples: *n,
                noise_sigma: *s,
                accuracy: r.accuracy,
                per_system: &r.per_system,
            })
            .collect(),
    };
    io::write_json(&a.out_dir.join("aggregate.json"), &aggregate)?;

    let mut by_n = String::from("system,noise_sigma,n_samples,accuracy,evaluated,correct\n");
    let mut by_sigma = String::from("system,n_samples,noise_sigma,accuracy,evaluated,correct\n");
    let mut order: Vec<usize> = (0..reports.len()).collect();
    for (g, _) in &groups {
        order.sort_by(|&i, &j| reports[i].1.total_cmp(&reports[j].1).then(reports[i].0.cmp(&reports[j].0)));
        for &i in &order {
            let (n, s, r) = &reports[i];
            if let Some(sa) = r.per_system.iter().find(|p| p.system == *g) {
                writeln!(by_n, "{g},{},{n},{},{},{}", io::fmt_f64(*s), fmt_opt(sa.accuracy), sa.evaluated, sa.correct)?;
            }
        }
        order.sort_by(|&i, &j| reports[i].0.cmp(&reports[j].0).then(reports[i].1.total_cmp(&reports[j].1)));
        for &i in &order {
            let (n, s, r) = &reports[i];
            if let Some(sa) = r.per_system.iter().find(|p| p.system == *g) {
                writeln!(by_sigma, "{g},{n},{},{},{},{}", io::fmt_f64(*s), fmt_opt(sa.accuracy), sa.evaluated, sa.correct)?;
            }
        }
    }
    std::fs::write(a.out_dir.join("accuracy_vs_n.csv"), by_n)?;
    std::fs::write(a.out_dir.join("accuracy_vs_sigma.csv"), by_sigma)?;

    if cfg.cycle_error {
        let mut ce = String::from("system,n_samples,noise_sigma,mean_cycle_error,count\n");
        for (g, _) in &groups {
            for (n, s, r) in &reports {
                let vals: Vec<f64> = r
                    .records
                    .iter()
                    .filter(|rec| rec.system.name() == *g)
                    .filter_map(|rec| rec.cycle_error)
                    .collect();
                let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                writeln!(ce, "{g},{n},{},{},{}", io::fmt_f64(*s), fmt_opt(mean), vals.len())?;
            }
        }
        std::fs::write(a.out_dir.join("cycle_error.csv"), ce)?;
    }

    for (n, s, r) in &reports {
        let acc = r.accuracy.map_or_else(|| "n/a".into(), |a| format!("{a:.4}"));
        println!("n={n} sigma={s} accuracy={acc}");
    }
    Ok(())
}
