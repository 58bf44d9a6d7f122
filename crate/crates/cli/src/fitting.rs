use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use spe::dynsys::{Behavior, Prototype, SampleSet};
use spe::spe::{classify, localize, PrototypeSet, DEFAULT_CYCLE_POINTS};
use spe::train::{fit, loss_trace_csv, FitResult, LossConfig, OptimConfig};
use spe::{io, SpeError};

use crate::sibling;

#[derive(Debug, Args)]
pub struct TrainOpts {
    /// JSON `{"loss": {...}, "optim": {...}, "prototypes": [...]}`; every
    /// field optional, unknown fields rejected. Flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optimizer iterations (default 2000 in 2D, 1000 above).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Mini-batch size, 0 for full batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Freeze coupling layers for the first half of training.
    #[arg(long)]
    curriculum: bool,
    /// Fraction of samples kept per iteration (closest to the invariant set).
    #[arg(long)]
    trim: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub loss: Option<LossConfig>,
    #[serde(default)]
    pub optim: Option<OptimConfig>,
    #[serde(default)]
    pub prototypes: Option<PrototypeSet>,
}

/// Everything needed to rerun a fit or classification.
#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    samples: String,
    loss: &'a LossConfig,
    optim: &'a OptimConfig,
    prototypes: &'a [Prototype],
}

impl TrainOpts {
    fn resolve(&self, dim: usize) -> Result<(LossConfig, OptimConfig, Option<PrototypeSet>)> {
        let file: TrainConfig = match &self.config {
            Some(p) => io::read_json(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        let loss = file.loss.unwrap_or_default();
        let mut optim = file.optim.unwrap_or_else(|| OptimConfig::for_dim(dim));
        if let Some(v) = self.iters {
            optim.iters = v;
        }
        if let Some(v) = self.lr {
            optim.lr = v;
        }
        if let Some(v) = self.weight_decay {
            optim.weight_decay = v;
        }
        if let Some(v) = self.batch {
            optim.batch = v;
        }
        if self.curriculum {
            optim.curriculum = true;
        }
        if let Some(v) = self.trim {
            optim.trim_fraction = v;
        }
        if let Some(v) = self.seed {
            optim.seed = v;
        }
        loss.validate()?;
        optim.validate()?;
        Ok((loss, optim, file.prototypes))
    }
}

fn read_samples(path: &Path) -> Result<SampleSet> {
    io::read_samples(path, None).with_context(|| format!("reading {}", path.display()))
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Sample CSV.
    #[arg(long)]
    samples: PathBuf,
    /// Prototype `a` (> 0 cycle of radius sqrt(a), < 0 node).
    #[arg(long, allow_hyphen_values = true)]
    a: f64,
    /// Prototype angular speed; its sign sets the orientation.
    #[arg(long, allow_hyphen_values = true)]
    omega: f64,
    /// Decay rate of the extra coordinates when d > 2.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[command(flatten)]
    train: TrainOpts,
    /// Fit result JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write the loss trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

pub fn run_fit(a: FitArgs) -> Result<()> {
    let samples = read_samples(&a.samples)?;
    let proto = Prototype::new(a.a, a.omega, samples.dim(), a.tau)?;
    let (loss, optim, _) = a.train.resolve(samples.dim())?;
    let r = fit(&samples, &proto, &loss, &optim)?;
    io::write_json(&a.out, &r)?;
    io::write_json(
        &io::sidecar_path(&a.out),
        &RunRecord {
            command: "fit",
            samples: a.samples.display().to_string(),
            loss: &loss,
            optim: &optim,
            prototypes: &[proto],
        },
    )?;
    if let Some(t) = &a.trace {
        std::fs::write(t, loss_trace_csv(&r.loss_trace))?;
    }
    println!("L_E={} total={}", io::fmt_f64(r.final_equiv_loss), io::fmt_f64(r.final_total_loss));
    Ok(())
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Sample CSV.
    #[arg(long)]
    samples: PathBuf,
    /// Expected dimension of the samples.
    #[arg(long)]
    dim: Option<usize>,
    #[command(flatten)]
    train: TrainOpts,
    /// Classification JSON; per-prototype fits go to `<stem>.fit<k>.json`.
    #[arg(long)]
    out: PathBuf,
    /// Write the winner's invariant set (`idx,x0,...`) here.
    #[arg(long)]
    localize: Option<PathBuf>,
    /// Points along a localized cycle.
    #[arg(long, default_value_t = DEFAULT_CYCLE_POINTS)]
    points: usize,
}

#[derive(Debug, Serialize)]
struct ClassificationFile<'a> {
    label: Behavior,
    winner: usize,
    losses: Vec<Option<f64>>,
    prototypes: &'a [Prototype],
    fits: Vec<Option<String>>,
    warnings: &'a [String],
}

pub fn run_classify(a: ClassifyArgs) -> Result<()> {
    let samples = io::read_samples(&a.samples, a.dim).with_context(|| format!("reading {}", a.samples.display()))?;
    let d = samples.dim();
    let (loss, optim, protos) = a.train.resolve(d)?;
    let protos = protos.unwrap_or_else(|| PrototypeSet::for_dim(d));
    let c = classify(&samples, &protos, &loss, &optim)?;
    let mut refs = Vec::new();
    for (k, f) in c.fits.iter().enumerate() {
        refs.push(match f {
            Some(f) => {
                let p = sibling(&a.out, &format!(".fit{k}.json"));
                io::write_json(&p, f)?;
                Some(p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            }
            None => None,
        });
    }
    let file = ClassificationFile {
        label: c.label,
        winner: c.winner,
        losses: c.losses.iter().map(|l| l.is_finite().then_some(*l)).collect(),
        prototypes: &c.prototypes,
        fits: refs,
        warnings: &c.warnings,
    };
    io::write_json(&a.out, &file)?;
    io::write_json(
        &io::sidecar_path(&a.out),
        &RunRecord {
            command: "classify",
            samples: a.samples.display().to_string(),
            loss: &loss,
            optim: &optim,
            prototypes: protos.prototypes(),
        },
    )?;
    println!("label={} winner={}", c.label, c.winner);
    let losses: Vec<String> = c
        .losses
        .iter()
        .map(|l| if l.is_finite() { io::fmt_f64(*l) } else { "inf".into() })
        .collect();
    println!("losses={}", losses.join(","));
    if let Some(path) = &a.localize {
        let winner = c.winning_fit().ok_or(SpeError::NonFinite { layer: 0 }).context("every prototype fit failed")?;
        write_localized(winner, a.points, path)?;
    }
    Ok(())
}

fn write_localized(f: &FitResult, points: usize, path: &Path) -> Result<()> {
    let est = localize(f, points)?;
    std::fs::write(path, est.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    /// Fit result JSON from `spe fit` or `spe classify`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CYCLE_POINTS)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn run_localize(a: LocalizeArgs) -> Result<()> {
    let f: FitResult = io::read_json(&a.fit).with_context(|| format!("reading {}", a.fit.display()))?;
    write_localized(&f, a.points, &a.out)?;
    println!("points={}", if f.prototype.is_cycle() { a.points } else { 1 });
    Ok(())
}
