//! Ground-truth behavior labels: closed forms where known, long-integration
//! oracle otherwise.

use serde::{Deserialize, Serialize};

use super::integrate::{flow_to, Rk4, DEFAULT_DT};
use super::systems::{System, SystemSpec, VectorField};
use crate::error::{Result, SpeError};
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Cycle,
    Node,
}

impl std::fmt::Display for Behavior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Behavior::Cycle => "cycle",
            Behavior::Node => "node",
        })
    }
}

/// A label plus whether the parameters sit exactly on the bifurcation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthLabel {
    pub behavior: Behavior,
    pub on_boundary: bool,
}

impl TruthLabel {
    fn strict(cycle: bool, boundary: bool) -> Self {
        TruthLabel {
            behavior: if cycle && !boundary { Behavior::Cycle } else { Behavior::Node },
            on_boundary: boundary,
        }
    }
}

/// Hopf bifurcation values of the symmetric repressilator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopfBoundary {
    /// Fixed point `p = alpha / (1 + p^n) + alpha0`.
    pub p_hat: f64,
    /// `A = -alpha n p^(n-1) / (1 + p^n)^2`.
    pub a_coef: f64,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
}

impl HopfBoundary {
    /// Open interval of `beta` with oscillations, if any.
    pub fn cycle_interval(&self) -> Option<(f64, f64)> {
        match (self.beta1, self.beta2) {
            (Some(b1), Some(b2)) => Some((b1.min(b2), b1.max(b2))),
            _ => None,
        }
    }
}

/// Symmetric repressilator fixed point by bisection on `[0, alpha + alpha0]`.
pub fn repressilator_fixed_point(alpha: f64, alpha0: f64, n: u32) -> Result<f64> {
    if !(alpha > 0.0) || alpha0 < 0.0 {
        return Err(SpeError::InvalidConfig("need alpha > 0, alpha0 >= 0".into()));
    }
    let residual = |p: f64| p - alpha / (1.0 + p.powi(n as i32)) - alpha0;
    let (mut lo, mut hi) = (0.0_f64, alpha + alpha0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if residual(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 {
            break;
        }
    }
    let p = 0.5 * (lo + hi);
    if hi - lo > 1e-12 || residual(p).abs() > 1e-10 {
        return Err(SpeError::RootFinding(format!(
            "repressilator fixed point: bracket {lo}..{hi}, residual {}",
            residual(p)
        )));
    }
    Ok(p)
}

/// Closed-form Hopf values of `beta` for the repressilator.
pub fn hopf_boundary(alpha: f64, alpha0: f64, n: u32) -> Result<HopfBoundary> {
    let p = repressilator_fixed_point(alpha, alpha0, n)?;
    let nf = n as f64;
    let pn = p.powi(n as i32);
    let a = -alpha * nf * p.powi(n as i32 - 1) / ((1.0 + pn) * (1.0 + pn));
    let disc = 9.0 * a * a - 24.0 * a - 48.0;
    let (beta1, beta2) = if disc < 0.0 {
        (None, None)
    } else {
        let denom = 4.0 * a + 8.0;
        let base = (3.0 * a * a - 4.0 * a - 8.0) / denom;
        let spread = a * disc.sqrt() / denom;
        (Some(base + spread), Some(base - spread))
    };
    Ok(HopfBoundary {
        p_hat: p,
        a_coef: a,
        beta1,
        beta2,
    })
}

/// Long-integration behavior summary.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub behavior: Behavior,
    /// Per-trajectory spread (max pairwise distance) over the final window.
    pub spreads: Vec<f64>,
    /// Per-trajectory ratio of the final window's spread to the preceding one.
    pub ratios: Vec<f64>,
}

/// Settings of the numeric behavior oracle.
#[derive(Clone, Copy, Debug)]
pub struct OracleConfig {
    pub trajectories: usize,
    pub burn_in: f64,
    pub horizon: f64,
    pub window: f64,
    pub recurrence_radius: f64,
    pub min_spread: f64,
    /// A final-window spread below this fraction of the previous window's
    /// counts as contracting.
    pub contraction_ratio: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            trajectories: 5,
            burn_in: 100.0,
            horizon: 300.0,
            window: 50.0,
            recurrence_radius: 1e-3,
            min_spread: 1e-2,
            contraction_ratio: 0.99,
            seed: 0x5EED,
        }
    }
}

fn max_pairwise(points: &[Vec<f64>]) -> f64 {
    let mut best = 0.0_f64;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.max(d);
        }
    }
    best.sqrt()
}

fn max_radius(points: &[Vec<f64>]) -> f64 {
    let d = points[0].len();
    let n = points.len() as f64;
    let mut c = vec![0.0; d];
    for p in points {
        c.iter_mut().zip(p).for_each(|(c, v)| *c += v / n);
    }
    points
        .iter()
        .map(|p| p.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Classifies a system by integrating trajectories well past their transients.
///
/// A trajectory counts as periodic when, over the final window, it stays
/// spread out (recurrence radius and max pairwise distance above threshold)
/// and its spread is not shrinking relative to the window before.
pub fn numeric_behavior(spec: &SystemSpec, cfg: &OracleConfig) -> OracleReport {
    let d = spec.dim();
    let mut rng = rng_from_seed(cfg.seed);
    let clip = matches!(spec.system, System::Repressilator { .. });
    let mut rk = Rk4::new(d).clip_negative(clip);
    let dt = DEFAULT_DT;
    let stride = 10;
    let steps_per_window = (cfg.window / dt).round() as usize;
    let lead = (cfg.horizon - 2.0 * cfg.window).max(0.0);
    let mut spreads = Vec::new();
    let mut ratios = Vec::new();
    let mut any_cycle = false;
    for _ in 0..cfg.trajectories {
        let mut x: Vec<f64> = spec
            .bounds
            .iter()
            .map(|[lo, hi]| lo + (hi - lo) * rand::Rng::random::<f64>(&mut rng))
            .collect();
        if flow_to(spec, &mut x, cfg.burn_in + lead, dt, &mut rk).is_err() {
            continue;
        }
        let mut windows: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        let mut blew_up = false;
        'outer: for window in windows.iter_mut() {
            for k in 0..steps_per_window {
                rk.step(spec, &mut x, dt);
                if x.iter().any(|v| !v.is_finite()) {
                    blew_up = true;
                    break 'outer;
                }
                if k % stride == 0 {
                    window.push(x.clone());
                }
            }
        }
        if blew_up {
            continue;
        }
        let prev = max_pairwise(&windows[0]);
        let last = max_pairwise(&windows[1]);
        let radius = max_radius(&windows[1]);
        let ratio = if prev > 0.0 { last / prev } else { 0.0 };
        spreads.push(last);
        ratios.push(ratio);
        if radius > cfg.recurrence_radius && last > cfg.min_spread && ratio >= cfg.contraction_ratio {
            any_cycle = true;
        }
    }
    if spreads.is_empty() {
        log::warn!("{}: every oracle trajectory blew up; labeling node", spec.name());
    }
    OracleReport {
        behavior: if any_cycle { Behavior::Cycle } else { Behavior::Node },
        spreads,
        ratios,
    }
}

/// Ground-truth long-term behavior of a benchmark system.
pub fn ground_truth_label(spec: &SystemSpec) -> Result<TruthLabel> {
    Ok(match spec.system {
        System::So { a, .. } | System::AugmentedSo { a, .. } => TruthLabel::strict(a > 0.0, a == 0.0),
        System::VanDerPol { mu } => TruthLabel::strict(mu > 0.0, mu == 0.0),
        System::Repressilator {
            alpha,
            alpha0,
            beta,
            n,
        } => {
            let hb = hopf_boundary(alpha, alpha0, n)?;
            match hb.cycle_interval() {
                Some((lo, hi)) => TruthLabel::strict(lo < beta && beta < hi, beta == lo || beta == hi),
                None => TruthLabel::strict(false, false),
            }
        }
        System::LienardPoly { .. } | System::LienardSigmoid { .. } | System::Bz { .. } | System::Selkov { .. } => {
            TruthLabel::strict(numeric_behavior(spec, &OracleConfig::default()).behavior == Behavior::Cycle, false)
        }
    })
}

/// Samples a reference orbit after a burn-in, for cycle-error evaluation.
pub fn reference_orbit(spec: &SystemSpec, x0: &[f64], burn_in: f64, duration: f64, stride: usize) -> Result<Vec<Vec<f64>>> {
    let clip = matches!(spec.system, System::Repressilator { .. });
    let mut rk = Rk4::new(spec.dim()).clip_negative(clip);
    let mut x = x0.to_vec();
    flow_to(spec, &mut x, burn_in, DEFAULT_DT, &mut rk)?;
    let steps = (duration / DEFAULT_DT).round() as usize;
    let mut out = Vec::with_capacity(steps / stride.max(1) + 1);
    for k in 0..steps {
        if k % stride.max(1) == 0 {
            out.push(x.clone());
        }
        rk.step(spec, &mut x, DEFAULT_DT);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SpeError::BlowUp { time: burn_in + k as f64 * DEFAULT_DT });
        }
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn rep(alpha: f64, beta: f64) -> SystemSpec {
        SystemSpec::new(System::Repressilator {
            alpha,
            alpha0: 0.2,
            beta,
            n: 2,
        })
        .unwrap()
    }

    #[test]
    fn closed_form_labels() {
        let so = |a| SystemSpec::new(System::So { a, omega: 0.5 }).unwrap();
        assert_eq!(ground_truth_label(&so(0.3)).unwrap().behavior, Behavior::Cycle);
        assert_eq!(ground_truth_label(&so(-0.3)).unwrap().behavior, Behavior::Node);
        let b = ground_truth_label(&so(0.0)).unwrap();
        assert_eq!(b, TruthLabel { behavior: Behavior::Node, on_boundary: true });
        let vdp = SystemSpec::new(System::VanDerPol { mu: -0.5 }).unwrap();
        assert_eq!(ground_truth_label(&vdp).unwrap().behavior, Behavior::Node);
    }

    #[test]
    fn van_der_pol_oracle_agrees() {
        for (mu, want) in [(-0.5, Behavior::Node), (1.0, Behavior::Cycle), (0.5, Behavior::Cycle)] {
            let spec = SystemSpec::new(System::VanDerPol { mu }).unwrap();
            assert_eq!(numeric_behavior(&spec, &OracleConfig::default()).behavior, want, "mu={mu}");
        }
    }

    #[test]
    fn lienard_oracle_follows_damping_sign() {
        for (c, want) in [(-0.5, Behavior::Cycle), (0.5, Behavior::Node)] {
            let spec = SystemSpec::new(System::LienardPoly { a: 0.5, c }).unwrap();
            assert_eq!(ground_truth_label(&spec).unwrap().behavior, want, "c={c}");
            let spec = SystemSpec::new(System::LienardSigmoid { a: 0.5, b: c }).unwrap();
            assert_eq!(ground_truth_label(&spec).unwrap().behavior, want, "b={c}");
        }
    }

    #[test]
    fn fixed_point_residual() {
        for alpha in [0.5, 2.0, 10.0, 29.0] {
            let hb = hopf_boundary(alpha, 0.2, 2).unwrap();
            let p = hb.p_hat;
            assert!((p - alpha / (1.0 + p * p) - 0.2).abs() <= 1e-10);
        }
    }

    #[test]
    fn small_alpha_has_no_bifurcation() {
        let hb = hopf_boundary(2.0, 0.2, 2).unwrap();
        assert!(hb.beta1.is_none() && hb.beta2.is_none());
        assert_eq!(ground_truth_label(&rep(2.0, 1.0)).unwrap().behavior, Behavior::Node);
    }

    #[test]
    fn repressilator_fixed_point_is_stationary() {
        let spec = rep(10.0, 2.0);
        let p = repressilator_fixed_point(10.0, 0.2, 2).unwrap();
        let f = spec.eval_field(&[p; 6]).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-10), "{f:?}");
    }

    #[test]
    fn alpha_ten_boundary() {
        let hb = hopf_boundary(10.0, 0.2, 2).unwrap();
        let (b1, b2) = (hb.beta1.unwrap(), hb.beta2.unwrap());
        assert!(b1 > 0.0 && b2 > 0.0);
        // roots of beta^2 - S beta + 1: product is exactly one
        assert!((b1 * b2 - 1.0).abs() < 1e-12);
        assert_eq!(ground_truth_label(&rep(10.0, 2.0)).unwrap().behavior, Behavior::Cycle);
        assert_eq!(ground_truth_label(&rep(10.0, 6.0)).unwrap().behavior, Behavior::Node);
    }

    #[test]
    fn reference_orbit_shape() {
        let spec = SystemSpec::new(System::VanDerPol { mu: 1.0 }).unwrap();
        let orbit = reference_orbit(&spec, &[2.0, 0.0], 10.0, 5.0, 10).unwrap();
        assert_eq!(orbit.len(), 50);
    }
}
