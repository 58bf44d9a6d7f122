//! Loss functions, exact gradients and the fitting loop.

mod loss;
mod optim;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use loss::{
    equivalence_loss, full_loss, grad, projection, projection_loss, DetPenalty, LossComponents, LossConfig,
};
pub use optim::AdamW;

use crate::dynsys::{Prototype, SampleSet};
use crate::error::{Result, SpeError};
use crate::flow::{FlowConfig, FlowMap};
use crate::rng::{derive_seed, rng_from_seed};
use loss::{check_grad, Evaluator};

/// Total loss above which a fit is declared diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub iters: usize,
    /// Mini-batch size; 0 means full batch.
    pub batch: usize,
    /// Freeze coupling parameters for the first half of training.
    pub curriculum: bool,
    /// Fraction of samples (closest to the prototype's invariant set) kept
    /// each iteration; 1 disables trimming.
    pub trim_fraction: f64,
    pub seed: u64,
    pub flow: FlowConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            weight_decay: 1e-3,
            iters: 2000,
            batch: 0,
            curriculum: false,
            trim_fraction: 1.0,
            seed: 0,
            flow: FlowConfig::default(),
        }
    }
}

impl OptimConfig {
    /// Defaults with the iteration count used for `dim`-dimensional data:
    /// 2000 in the plane, 1000 above.
    pub fn for_dim(dim: usize) -> Self {
        OptimConfig {
            iters: if dim > 2 { 1000 } else { 2000 },
            ..OptimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SpeError::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if !(self.trim_fraction > 0.0 && self.trim_fraction <= 1.0) {
            return bad("trim_fraction must lie in (0, 1]");
        }
        self.flow.validate()
    }
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    #[serde(rename = "L_E")]
    pub equiv: f64,
    #[serde(rename = "L_det")]
    pub det: f64,
    #[serde(rename = "L_cent")]
    pub cent: f64,
    #[serde(rename = "L_proj")]
    pub proj: f64,
    pub total: f64,
}

impl LossRecord {
    fn new(iter: usize, c: &LossComponents) -> Self {
        LossRecord {
            iter,
            equiv: c.equiv,
            det: c.det,
            cent: c.cent,
            proj: c.proj,
            total: c.total,
        }
    }
}

/// Renders a loss trace as CSV with header `iter,L_E,L_det,L_cent,L_proj,total`.
pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from("iter,L_E,L_det,L_cent,L_proj,total\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.iter, r.equiv, r.det, r.cent, r.proj, r.total
        );
    }
    out
}

/// Outcome of fitting one prototype.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub flow: FlowMap,
    pub prototype: Prototype,
    /// Equivalence loss at the final parameters.
    pub final_equiv_loss: f64,
    pub final_total_loss: f64,
    pub final_components: LossComponents,
    /// Learned projection log-precision (unused in two dimensions).
    pub lambda_proj: f64,
    pub loss_trace: Vec<LossRecord>,
    pub loss_config: LossConfig,
    pub optim_config: OptimConfig,
    pub seed: u64,
}

/// Indices of the `ceil(fraction * len)` candidates whose images lie
/// closest to the prototype's invariant set, ties broken by index, returned
/// in increasing index order.
pub fn trimmed_indices(proto: &Prototype, candidates: &[usize], image: impl Fn(usize) -> Vec<f64>, fraction: f64) -> Vec<usize> {
    if fraction >= 1.0 {
        return candidates.to_vec();
    }
    let keep = keep_count(candidates.len(), fraction);
    let mut ranked: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| (proto.distance_to_invariant_set(&image(i)), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = ranked[..keep].iter().map(|r| r.1).collect();
    kept.sort_unstable();
    kept
}

/// `ceil(fraction * n)`, at least one.
pub fn keep_count(n: usize, fraction: f64) -> usize {
    // guard against 0.4 * 1000 rounding up past an integer
    (((fraction * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

/// Fits a flow carrying `samples` onto `proto`.
pub fn fit(samples: &SampleSet, proto: &Prototype, loss_cfg: &LossConfig, opt_cfg: &OptimConfig) -> Result<FitResult> {
    fit_observed(samples, proto, loss_cfg, opt_cfg, &mut |_, _| {})
}

/// [`fit`] calling `observe(iter, flow)` after every parameter update.
pub(crate) fn fit_observed(
    samples: &SampleSet,
    proto: &Prototype,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimConfig,
    observe: &mut dyn FnMut(usize, &FlowMap),
) -> Result<FitResult> {
    loss_cfg.validate()?;
    opt_cfg.validate()?;
    proto.validate()?;
    if samples.is_empty() {
        return Err(SpeError::EmptySamples);
    }
    if proto.dim != samples.dim() {
        return Err(SpeError::DimensionMismatch {
            expected: samples.dim(),
            got: proto.dim,
        });
    }
    let d = samples.dim();
    let n = samples.len();
    let high_dim = d > 2;
    let mut flow = FlowMap::init(samples, &opt_cfg.flow, opt_cfg.seed)?;
    let np = flow.num_params();

    let mut params = flow.params();
    if high_dim {
        params.push(loss_cfg.lambda_proj);
    }
    let mut decay = vec![true; params.len()];
    if high_dim {
        decay[np] = false;
    }
    let all_active = vec![true; params.len()];
    let mut warmup_active = all_active.clone();
    for b in flow.param_blocks().into_iter().filter(|b| b.coupling) {
        warmup_active[b.range].iter_mut().for_each(|a| *a = false);
    }
    let mut opt = AdamW::new(opt_cfg.lr, opt_cfg.weight_decay, decay);

    let batch = if opt_cfg.batch == 0 || opt_cfg.batch >= n { n } else { opt_cfg.batch };
    let mut batch_rng = rng_from_seed(derive_seed(opt_cfg.seed, 1));
    let all: Vec<usize> = (0..n).collect();

    let mut ev = Evaluator::new(&flow, n);
    let mut g = vec![0.0; params.len()];
    let mut trace = Vec::with_capacity(opt_cfg.iters);
    let mut lambda = loss_cfg.lambda_proj;

    for it in 0..opt_cfg.iters {
        let idx = if batch == n {
            all.clone()
        } else {
            let mut b = rand::seq::index::sample(&mut batch_rng, n, batch).into_vec();
            b.sort_unstable();
            b
        };
        ev.forward_subset(&flow, samples, &idx);
        let kept = trimmed_indices(proto, &idx, |i| ev.image(i).to_vec(), opt_cfg.trim_fraction);
        let comps = ev.loss(&flow, proto, samples, &kept, loss_cfg, lambda, Some(&mut g));
        let record = LossRecord::new(it, &comps);
        trace.push(record);
        if !comps.total.is_finite() || comps.total > DIVERGENCE_LIMIT {
            log::warn!("fit diverged at iteration {it}: total loss {}", comps.total);
            return Err(SpeError::Divergence {
                iter: it,
                loss: comps.total,
                trace,
            });
        }
        check_grad(&flow, &g)?;
        let active = if opt_cfg.curriculum && it < opt_cfg.iters / 2 {
            &warmup_active
        } else {
            &all_active
        };
        opt.step(&mut params, &g, active);
        flow.set_params(&params[..np]);
        if high_dim {
            lambda = params[np];
        }
        observe(it, &flow);
    }

    ev.forward_subset(&flow, samples, &all);
    let kept = trimmed_indices(proto, &all, |i| ev.image(i).to_vec(), opt_cfg.trim_fraction);
    let comps = ev.loss(&flow, proto, samples, &kept, loss_cfg, lambda, None);
    if !comps.total.is_finite() || comps.total > DIVERGENCE_LIMIT {
        return Err(SpeError::Divergence {
            iter: opt_cfg.iters,
            loss: comps.total,
            trace,
        });
    }
    Ok(FitResult {
        flow,
        prototype: *proto,
        final_equiv_loss: comps.equiv,
        final_total_loss: comps.total,
        final_components: comps,
        lambda_proj: lambda,
        loss_trace: trace,
        loss_config: loss_cfg.clone(),
        optim_config: opt_cfg.clone(),
        seed: opt_cfg.seed,
    })
}

#[cfg(test)]
mod tests;
