use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dynsys::Prototype;
use crate::error::{Result, SpeError};
use crate::flow::FlowMap;
use crate::train::FitResult;

/// Default number of points along a localized cycle.
pub const DEFAULT_CYCLE_POINTS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    CyclePolyline,
    FixedPoint,
}

/// The prototype's attracting set pulled back into data space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantSetEstimate {
    pub kind: SetKind,
    /// Ordered polyline for a cycle, a single point for a fixed point.
    pub points: Vec<Vec<f64>>,
}

impl InvariantSetEstimate {
    /// `idx,x0,...` CSV.
    pub fn to_csv(&self) -> String {
        crate::io::points_to_csv(&self.points)
    }
}

pub fn localize(fit: &FitResult, m: usize) -> Result<InvariantSetEstimate> {
    localize_with(&fit.flow, &fit.prototype, m)
}

/// Maps `m` equally spaced points of the prototype cycle (or its fixed
/// point) through the inverse flow.
pub fn localize_with(flow: &FlowMap, proto: &Prototype, m: usize) -> Result<InvariantSetEstimate> {
    if flow.dim() != proto.dim {
        return Err(SpeError::DimensionMismatch {
            expected: proto.dim,
            got: flow.dim(),
        });
    }
    let d = proto.dim;
    match proto.cycle_radius() {
        Some(r) => {
            if m < 3 {
                return Err(SpeError::InvalidConfig(format!("a cycle needs at least 3 points, got {m}")));
            }
            let points = (0..m)
                .map(|j| {
                    let theta = 2.0 * PI * j as f64 / m as f64;
                    let mut y = vec![0.0; d];
                    y[0] = r * theta.cos();
                    y[1] = r * theta.sin();
                    flow.inverse(&y)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(InvariantSetEstimate {
                kind: SetKind::CyclePolyline,
                points,
            })
        }
        None => Ok(InvariantSetEstimate {
            kind: SetKind::FixedPoint,
            points: vec![flow.inverse(&vec![0.0; d])?],
        }),
    }
}

/// Normalized distance between a trajectory and its projection onto the
/// localized cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleError {
    pub error: f64,
    /// Mean per-coordinate variance of the trajectory.
    pub variance: f64,
    /// Points whose image sat at the prototype's center, where the radial
    /// projection is undefined; they were projected at angle 0.
    pub flagged: Vec<usize>,
}

pub fn cycle_error(fit: &FitResult, truth: &[Vec<f64>]) -> Result<CycleError> {
    cycle_error_with(&fit.flow, &fit.prototype, truth)
}

/// `(1 / (|T| sigma^2)) sum_x |x - H^-1(proj(H(x)))|^2`, where `proj` scales
/// the first two coordinates onto the cycle radius and zeroes the rest.
pub fn cycle_error_with(flow: &FlowMap, proto: &Prototype, truth: &[Vec<f64>]) -> Result<CycleError> {
    let r = proto
        .cycle_radius()
        .ok_or_else(|| SpeError::InvalidConfig("cycle error needs a cycle prototype (a > 0)".into()))?;
    if truth.is_empty() {
        return Err(SpeError::EmptySamples);
    }
    let d = flow.dim();
    if let Some(bad) = truth.iter().find(|x| x.len() != d) {
        return Err(SpeError::DimensionMismatch { expected: d, got: bad.len() });
    }
    let n = truth.len() as f64;
    let mut variance = 0.0;
    for j in 0..d {
        let mean = truth.iter().map(|x| x[j]).sum::<f64>() / n;
        variance += truth.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
    }
    variance /= d as f64;
    if !(variance > 0.0) {
        return Err(SpeError::InvalidConfig("trajectory has zero variance".into()));
    }
    let mut ws = flow.workspace();
    let mut y = vec![0.0; d];
    let mut back = vec![0.0; d];
    let mut flagged = Vec::new();
    let mut sse = 0.0;
    for (i, x) in truth.iter().enumerate() {
        flow.forward_with(x, &mut y, &mut ws);
        let rho = y[0].hypot(y[1]);
        let (c, s) = if rho < 1e-12 {
            flagged.push(i);
            (1.0, 0.0)
        } else {
            (y[0] / rho, y[1] / rho)
        };
        y.fill(0.0);
        y[0] = r * c;
        y[1] = r * s;
        flow.inverse_with(&y, &mut back, &mut ws);
        sse += x.iter().zip(&back).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    if !flagged.is_empty() {
        log::warn!("{} trajectory point(s) mapped to the prototype center", flagged.len());
    }
    let error = sse / (n * variance);
    if !error.is_finite() {
        return Err(SpeError::NonFinite { layer: flow.layers().len() });
    }
    Ok(CycleError {
        error,
        variance,
        flagged,
    })
}
