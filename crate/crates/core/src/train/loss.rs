use serde::{Deserialize, Serialize};

use crate::dynsys::{Prototype, SampleSet, VectorField};
use crate::error::{Result, SpeError};
use crate::flow::{FlowGrad, FlowMap, Tape, Workspace};

/// Which determinant statistic the volume regularizer penalizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetPenalty {
    /// `|mean log det dH(x)|`: pressure toward volume preservation.
    #[default]
    LogDet,
    /// `|mean det dH(x)|`.
    Det,
}

/// Loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_det: f64,
    pub lambda_cent: f64,
    /// Initial projection log-precision (learned; only used when `d > 2`).
    pub lambda_proj: f64,
    pub eps_norm: f64,
    pub det_penalty: DetPenalty,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_det: 1e-3,
            lambda_cent: 1e-6,
            lambda_proj: -1.0,
            eps_norm: 1e-8,
            det_penalty: DetPenalty::LogDet,
        }
    }
}

impl LossConfig {
    /// Pure equivalence loss: both regularizers off.
    pub fn unregularized() -> Self {
        LossConfig {
            lambda_det: 0.0,
            lambda_cent: 0.0,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SpeError::InvalidConfig(m.into()));
        if !(self.lambda_det >= 0.0 && self.lambda_det.is_finite()) {
            return bad("lambda_det must be finite and >= 0");
        }
        if !(self.lambda_cent >= 0.0 && self.lambda_cent.is_finite()) {
            return bad("lambda_cent must be finite and >= 0");
        }
        if !self.lambda_proj.is_finite() {
            return bad("lambda_proj must be finite");
        }
        if !(self.eps_norm > 0.0) {
            return bad("eps_norm must be > 0");
        }
        Ok(())
    }
}

/// Individual loss terms; `det`, `cent` and `proj` are unweighted except
/// that `proj` is the complete projection term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub equiv: f64,
    pub det: f64,
    pub cent: f64,
    pub proj: f64,
    pub total: f64,
}

/// Per-sample equivalence term and its adjoints wrt `u` and `g`.
#[inline]
fn pair_loss(u: &[f64], g: &[f64], eps: f64, u_bar: Option<(&mut [f64], &mut [f64], f64)>) -> f64 {
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ng = g.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < eps || ng < eps {
        let loss = u.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
        if let Some((ub, gb, scale)) = u_bar {
            for i in 0..u.len() {
                let r = 2.0 * scale * (u[i] - g[i]);
                ub[i] = r;
                gb[i] = -r;
            }
        }
        return loss;
    }
    let mut dot = 0.0;
    let mut loss = 0.0;
    for i in 0..u.len() {
        let (a, b) = (u[i] / nu, g[i] / ng);
        dot += a * b;
        loss += (a - b) * (a - b);
    }
    if let Some((ub, gb, scale)) = u_bar {
        for i in 0..u.len() {
            let (a, b) = (u[i] / nu, g[i] / ng);
            ub[i] = 2.0 * scale * (a * dot - b) / nu;
            gb[i] = 2.0 * scale * (b * dot - a) / ng;
        }
    }
    loss
}

fn check_dims(flow: &FlowMap, proto: &Prototype, samples: &SampleSet) -> Result<()> {
    if samples.is_empty() {
        return Err(SpeError::EmptySamples);
    }
    for got in [proto.dim, samples.dim()] {
        if got != flow.dim() {
            return Err(SpeError::DimensionMismatch {
                expected: flow.dim(),
                got,
            });
        }
    }
    Ok(())
}

/// Mean squared distance between unit-normalized pushed-forward data
/// velocities and unit-normalized prototype velocities. Lies in `[0, 4]`
/// whenever no vector falls below the `eps_norm` floor.
pub fn equivalence_loss(flow: &FlowMap, proto: &Prototype, samples: &SampleSet) -> Result<f64> {
    check_dims(flow, proto, samples)?;
    let eps = LossConfig::default().eps_norm;
    let d = flow.dim();
    let mut ws = flow.workspace();
    let (mut y, mut u, mut g) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut sum = 0.0;
    for i in 0..samples.len() {
        flow.jvp_with(samples.position(i), samples.velocity(i), &mut y, &mut u, &mut ws);
        proto.eval_into(&y, &mut g);
        sum += pair_loss(&u, &g, eps, None);
    }
    Ok(sum / samples.len() as f64)
}

/// `P(x) = H^{-1}(H(x)_1, H(x)_2, 0, ..., 0)`.
pub fn projection(flow: &FlowMap, x: &[f64]) -> Result<Vec<f64>> {
    if flow.dim() <= 2 {
        return Err(SpeError::InvalidConfig("projection needs dimension > 2".into()));
    }
    let mut z = flow.forward(x)?;
    z[2..].iter_mut().for_each(|v| *v = 0.0);
    flow.inverse(&z)
}

/// `e^lambda * mean ||x - P(x)||^2 - lambda / N`.
pub fn projection_loss(flow: &FlowMap, samples: &SampleSet, lambda_proj: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(SpeError::EmptySamples);
    }
    let mut mse = 0.0;
    for i in 0..samples.len() {
        let x = samples.position(i);
        let p = projection(flow, x)?;
        mse += x.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let n = samples.len() as f64;
    Ok(lambda_proj.exp() * mse / n - lambda_proj / n)
}

/// Full regularized loss over all samples. `lambda_proj` is the current
/// value of the learned log-precision (ignored in two dimensions).
pub fn full_loss(
    flow: &FlowMap,
    proto: &Prototype,
    samples: &SampleSet,
    cfg: &LossConfig,
    lambda_proj: f64,
) -> Result<LossComponents> {
    check_dims(flow, proto, samples)?;
    cfg.validate()?;
    let mut ev = Evaluator::new(flow, samples.len());
    ev.forward_all(flow, samples);
    let idx: Vec<usize> = (0..samples.len()).collect();
    Ok(ev.loss(flow, proto, samples, &idx, cfg, lambda_proj, None))
}

/// Exact gradient of [`full_loss`] in the layout of [`FlowMap::params`],
/// followed by the derivative wrt `lambda_proj` when `d > 2`.
pub fn grad(
    flow: &FlowMap,
    proto: &Prototype,
    samples: &SampleSet,
    cfg: &LossConfig,
    lambda_proj: f64,
) -> Result<(LossComponents, Vec<f64>)> {
    check_dims(flow, proto, samples)?;
    cfg.validate()?;
    let mut ev = Evaluator::new(flow, samples.len());
    ev.forward_all(flow, samples);
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut out = vec![0.0; flow.num_params() + usize::from(flow.dim() > 2)];
    let comps = ev.loss(flow, proto, samples, &idx, cfg, lambda_proj, Some(&mut out));
    check_grad(flow, &out)?;
    Ok((comps, out))
}

/// Reports the first parameter block holding a non-finite gradient entry.
pub(crate) fn check_grad(flow: &FlowMap, g: &[f64]) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    for b in flow.param_blocks() {
        if g[b.range.clone()].iter().any(|v| !v.is_finite()) {
            return Err(SpeError::NonFiniteGradient { block: b.name });
        }
    }
    Err(SpeError::NonFiniteGradient {
        block: "lambda_proj".into(),
    })
}

/// Reusable buffers for repeated loss/gradient evaluation of one flow
/// architecture on a fixed sample count.
pub(crate) struct Evaluator {
    dim: usize,
    tapes: Vec<Tape>,
    log_dets: Vec<f64>,
    ws: Workspace,
    inv_tape: Tape,
    grad: FlowGrad,
    buf: [Vec<f64>; 6],
}

impl Evaluator {
    pub(crate) fn new(flow: &FlowMap, n: usize) -> Self {
        let d = flow.dim();
        Evaluator {
            dim: d,
            tapes: (0..n).map(|_| flow.new_tape()).collect(),
            log_dets: vec![0.0; n],
            ws: flow.workspace(),
            inv_tape: flow.new_tape(),
            grad: flow.zero_grad(),
            buf: std::array::from_fn(|_| vec![0.0; d]),
        }
    }

    /// Pushes every sample through the flow, recording tapes.
    pub(crate) fn forward_all(&mut self, flow: &FlowMap, samples: &SampleSet) {
        for i in 0..samples.len() {
            self.forward_one(flow, samples, i);
        }
    }

    pub(crate) fn forward_subset(&mut self, flow: &FlowMap, samples: &SampleSet, idx: &[usize]) {
        for &i in idx {
            self.forward_one(flow, samples, i);
        }
    }

    fn forward_one(&mut self, flow: &FlowMap, samples: &SampleSet, i: usize) {
        self.log_dets[i] = flow.record_jvp(samples.position(i), samples.velocity(i), &mut self.tapes[i], &mut self.ws);
    }

    /// Image `H(x_i)` of sample `i` from the last [`Evaluator::forward_all`].
    pub(crate) fn image(&self, i: usize) -> &[f64] {
        self.tapes[i].output()
    }

    /// Loss over the samples in `idx` (tapes must be current). When `out`
    /// is given, the gradient is written there.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn loss(
        &mut self,
        flow: &FlowMap,
        proto: &Prototype,
        samples: &SampleSet,
        idx: &[usize],
        cfg: &LossConfig,
        lambda_proj: f64,
        out: Option<&mut [f64]>,
    ) -> LossComponents {
        let d = self.dim;
        let n = idx.len() as f64;
        let want = out.is_some();
        let high_dim = d > 2;
        if want {
            self.grad = flow.zero_grad();
        }
        let [g, u_bar, g_bar, y_bar, x_bar, v_bar] = &mut self.buf;

        // determinant statistic first: its adjoint is shared by all samples
        let (det, ld_bar_of): (f64, Box<dyn Fn(f64) -> f64>) = match cfg.det_penalty {
            DetPenalty::LogDet => {
                let mean = idx.iter().map(|&i| self.log_dets[i]).sum::<f64>() / n;
                let w = cfg.lambda_det * mean.signum() * f64::from(mean != 0.0) / n;
                (mean.abs(), Box::new(move |_| w))
            }
            DetPenalty::Det => {
                let mean = idx.iter().map(|&i| self.log_dets[i].exp()).sum::<f64>() / n;
                let w = cfg.lambda_det / n;
                (mean.abs(), Box::new(move |ld: f64| w * ld.exp()))
            }
        };

        // projection residuals need their own inverse tape per sample
        let proj_scale = lambda_proj.exp();
        let mut proj_sse = 0.0;
        let mut equiv = 0.0;
        for &i in idx {
            let tape = &self.tapes[i];
            let y = tape.output();
            let u = tape.tangent_output();
            proto.eval_into(y, g);
            let scale = 1.0 / n;
            let l = if want {
                pair_loss(u, g, cfg.eps_norm, Some((u_bar, g_bar, scale)))
            } else {
                pair_loss(u, g, cfg.eps_norm, None)
            };
            equiv += l;
            if want {
                proto.vjp(y, g_bar, y_bar);
            }
            if high_dim {
                let x = samples.position(i);
                x_bar.copy_from_slice(y);
                x_bar[2..].iter_mut().for_each(|v| *v = 0.0);
                flow.record_inverse(x_bar, &mut self.inv_tape, &mut self.ws);
                let p = self.inv_tape.input();
                let mut sse = 0.0;
                for k in 0..d {
                    let r = x[k] - p[k];
                    sse += r * r;
                    v_bar[k] = -2.0 * proj_scale / n * r;
                }
                proj_sse += sse;
                if want {
                    // adjoint of P(x) flows back through H^{-1} into H(x)_{1,2}
                    flow.backprop_inverse(&self.inv_tape, v_bar, &mut self.grad, &mut self.ws, x_bar);
                    y_bar[0] += x_bar[0];
                    y_bar[1] += x_bar[1];
                }
            }
            if want {
                let ld_bar = ld_bar_of(self.log_dets[i]);
                flow.backprop_jvp(tape, y_bar, u_bar, ld_bar, &mut self.grad, &mut self.ws, x_bar, v_bar);
            }
        }
        equiv /= n;

        // centering: keep the data mean at the preimage of the prototype focus
        let mut cent = 0.0;
        {
            let mean = &mut self.buf[0];
            mean.iter_mut().for_each(|v| *v = 0.0);
            for &i in idx {
                for (m, x) in mean.iter_mut().zip(samples.position(i)) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let zero = vec![0.0; d];
            flow.record_inverse(&zero, &mut self.inv_tape, &mut self.ws);
            let c = self.inv_tape.input();
            let mut diff = vec![0.0; d];
            for k in 0..d {
                diff[k] = self.buf[0][k] - c[k];
                cent += diff[k] * diff[k];
            }
            if want && cfg.lambda_cent > 0.0 {
                let c_bar: Vec<f64> = diff.iter().map(|v| -2.0 * cfg.lambda_cent * v).collect();
                let mut sink = vec![0.0; d];
                flow.backprop_inverse(&self.inv_tape, &c_bar, &mut self.grad, &mut self.ws, &mut sink);
            }
        }

        let proj = if high_dim {
            proj_scale * proj_sse / n - lambda_proj / n
        } else {
            0.0
        };
        let total = equiv + cfg.lambda_det * det + cfg.lambda_cent * cent + proj;

        if let Some(out) = out {
            let np = flow.num_params();
            out[..np].copy_from_slice(&flow.flatten_grad(&self.grad));
            if high_dim {
                out[np] = proj_scale * proj_sse / n - 1.0 / n;
            }
        }
        LossComponents {
            equiv,
            det,
            cent,
            proj,
            total,
        }
    }
}
