use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{classify, cycle_error, PrototypeSet};
use crate::dynsys::{
    ground_truth_label, project_dims, reference_orbit, sample_sparse, Behavior, SamplingConfig, System, SystemSpec, VectorField,
};
use crate::error::{Result, SpeError};
use crate::rng::{derive_seed, rng_from_seed};
use crate::train::{LossConfig, OptimConfig};

/// Draws `count` parameter settings uniformly from the declared ranges of
/// `template`'s system.
pub fn random_instances(template: &System, count: usize, seed: u64) -> Result<Vec<System>> {
    let mut rng = rng_from_seed(seed);
    let ranges = template.param_ranges();
    (0..count)
        .map(|_| {
            let values: Vec<f64> = ranges.iter().map(|&(_, _, lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect();
            template.with_params(&values)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOptions {
    /// Keep only these coordinates of every sample set.
    #[serde(default)]
    pub project_dims: Option<Vec<usize>>,
    /// Also measure the cycle error of the best cycle fit on instances whose
    /// true behavior is a cycle.
    #[serde(default)]
    pub cycle_error: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceStatus {
    Ok,
    /// Some prototype fits failed; the rest decided.
    PartialDivergence,
    /// Every prototype fit failed; counted as a miss.
    Diverged,
    /// The instance could not be set up (sampling or labeling failed);
    /// excluded from accuracy.
    SamplingFailed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub system: System,
    pub n_samples: usize,
    pub noise_sigma: f64,
    pub truth: Option<Behavior>,
    pub status: InstanceStatus,
    pub winner: Option<usize>,
    pub predicted: Option<Behavior>,
    pub correct: bool,
    #[serde(with = "super::losses_serde")]
    pub losses: Vec<f64>,
    pub cycle_error: Option<f64>,
    pub message: Option<String>,
}

impl InstanceRecord {
    pub fn counts(&self) -> bool {
        self.status != InstanceStatus::SamplingFailed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemAccuracy {
    pub system: String,
    pub instances: usize,
    pub evaluated: usize,
    pub correct: usize,
    pub diverged: usize,
    pub sampling_failed: usize,
    /// `correct / evaluated`; `None` when nothing could be evaluated.
    pub accuracy: Option<f64>,
    pub mean_cycle_error: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub dim: usize,
    pub records: Vec<InstanceRecord>,
    pub per_system: Vec<SystemAccuracy>,
    pub accuracy: Option<f64>,
}

fn run_instance(
    index: usize,
    spec: &SystemSpec,
    protos: &PrototypeSet,
    sampling: &SamplingConfig,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimConfig,
    opts: &SweepOptions,
) -> InstanceRecord {
    let mut rec = InstanceRecord {
        index,
        system: spec.system.clone(),
        n_samples: sampling.n_samples,
        noise_sigma: sampling.noise_sigma,
        truth: None,
        status: InstanceStatus::SamplingFailed,
        winner: None,
        predicted: None,
        correct: false,
        losses: Vec::new(),
        cycle_error: None,
        message: None,
    };
    let truth = match ground_truth_label(spec) {
        Ok(t) => t.behavior,
        Err(e) => {
            rec.message = Some(format!("labeling failed: {e}"));
            return rec;
        }
    };
    rec.truth = Some(truth);
    let cfg = SamplingConfig {
        seed: derive_seed(sampling.seed, index as u64),
        ..sampling.clone()
    };
    let raw = match sample_sparse(spec, &cfg) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("instance {index}: sampling failed: {e}");
            rec.message = Some(format!("sampling failed: {e}"));
            return rec;
        }
    };
    let samples = match &opts.project_dims {
        Some(dims) => match project_dims(&raw, dims) {
            Ok(s) => s,
            Err(e) => {
                rec.message = Some(format!("projection failed: {e}"));
                return rec;
            }
        },
        None => raw.clone(),
    };
    let opt = OptimConfig {
        seed: derive_seed(opt_cfg.seed, index as u64),
        ..opt_cfg.clone()
    };
    let c = match classify(&samples, protos, loss_cfg, &opt) {
        Ok(c) => c,
        Err(e) => {
            rec.status = InstanceStatus::Diverged;
            rec.message = Some(e.to_string());
            return rec;
        }
    };
    rec.losses = c.losses.clone();
    let failed = c.failed_fits();
    if failed == c.fits.len() {
        rec.status = InstanceStatus::Diverged;
        rec.message = Some(c.warnings.join("; "));
        return rec;
    }
    rec.status = if failed > 0 { InstanceStatus::PartialDivergence } else { InstanceStatus::Ok };
    if failed > 0 {
        rec.message = Some(c.warnings.join("; "));
    }
    rec.winner = Some(c.winner);
    rec.predicted = Some(c.label);
    rec.correct = c.label == truth;
    if opts.cycle_error && truth == Behavior::Cycle {
        if let Some(best) = c.best_cycle_fit() {
            let orbit = reference_orbit(spec, raw.position(0), 100.0, 50.0, 10).map(|o| match &opts.project_dims {
                Some(dims) => o.iter().map(|x| dims.iter().map(|&j| x[j]).collect()).collect(),
                None => o,
            });
            match orbit.and_then(|o| cycle_error(best, &o)) {
                Ok(ce) => rec.cycle_error = Some(ce.error),
                Err(e) => log::warn!("instance {index}: cycle error unavailable: {e}"),
            }
        }
    }
    rec
}

/// Samples, labels and classifies every system instance.
///
/// Instance `i` samples with seed `derive_seed(sampling.seed, i)` and fits
/// with base seed `derive_seed(opt_cfg.seed, i)`. Records come back in
/// input order.
pub fn eval_sweep(
    systems: &[SystemSpec],
    protos: &PrototypeSet,
    sampling: &SamplingConfig,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimConfig,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    sampling.validate()?;
    loss_cfg.validate()?;
    opt_cfg.validate()?;
    for spec in systems {
        let d = opts.project_dims.as_ref().map_or(spec.dim(), Vec::len);
        if d != protos.dim() {
            return Err(SpeError::DimensionMismatch {
                expected: protos.dim(),
                got: d,
            });
        }
    }
    let records: Vec<InstanceRecord> = systems
        .par_iter()
        .enumerate()
        .map(|(i, spec)| run_instance(i, spec, protos, sampling, loss_cfg, opt_cfg, opts))
        .collect();
    let mut names: Vec<&str> = Vec::new();
    for r in &records {
        if !names.contains(&r.system.name()) {
            names.push(r.system.name());
        }
    }
    let per_system = names
        .iter()
        .map(|name| summarize(name, records.iter().filter(|r| r.system.name() == *name)))
        .collect();
    let all = summarize("all", records.iter());
    Ok(SweepReport {
        dim: protos.dim(),
        records,
        per_system,
        accuracy: all.accuracy,
    })
}

pub(crate) fn summarize<'a>(name: &str, records: impl Iterator<Item = &'a InstanceRecord>) -> SystemAccuracy {
    let mut s = SystemAccuracy {
        system: name.to_string(),
        instances: 0,
        evaluated: 0,
        correct: 0,
        diverged: 0,
        sampling_failed: 0,
        accuracy: None,
        mean_cycle_error: None,
    };
    let mut ce = Vec::new();
    for r in records {
        s.instances += 1;
        match r.status {
            InstanceStatus::SamplingFailed => s.sampling_failed += 1,
            InstanceStatus::Diverged => s.diverged += 1,
            _ => {}
        }
        if r.counts() {
            s.evaluated += 1;
            s.correct += usize::from(r.correct);
        }
        ce.extend(r.cycle_error);
    }
    if s.evaluated > 0 {
        s.accuracy = Some(s.correct as f64 / s.evaluated as f64);
    }
    if !ce.is_empty() {
        s.mean_cycle_error = Some(ce.iter().sum::<f64>() / ce.len() as f64);
    }
    s
}

fn behavior_str(b: Option<Behavior>) -> String {
    b.map_or_else(String::new, |b| b.to_string())
}

/// One row per instance: identifiers, parameters (`name=value` joined by
/// `;`), labels, status and per-prototype losses.
pub fn instances_csv(report: &SweepReport, n_protos: usize) -> String {
    let mut out = String::from("index,system,params,n_samples,noise_sigma,truth,predicted,winner,correct,status,cycle_error");
    for k in 0..n_protos {
        write!(out, ",loss{k}").unwrap();
    }
    out.push('\n');
    for r in &report.records {
        let params: Vec<String> = r
            .system
            .param_ranges()
            .iter()
            .map(|(name, v, _, _)| format!("{name}={v:.16e}"))
            .collect();
        let status = serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        write!(
            out,
            "{},{},{},{},{:.16e},{},{},{},{},{},{}",
            r.index,
            r.system.name(),
            params.join(";"),
            r.n_samples,
            r.noise_sigma,
            behavior_str(r.truth),
            behavior_str(r.predicted),
            r.winner.map_or_else(String::new, |w| w.to_string()),
            r.correct,
            status,
            r.cycle_error.map_or_else(String::new, |e| format!("{e:.16e}")),
        )
        .unwrap();
        for k in 0..n_protos {
            match r.losses.get(k) {
                Some(l) if l.is_finite() => write!(out, ",{l:.16e}").unwrap(),
                Some(_) => out.push_str(",inf"),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
