use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpeError};
use crate::flow::FlowMap;

/// Something that maps a state to its velocity.
pub trait VectorField {
    fn dim(&self) -> usize;

    /// Writes `f(x)` into `out`. Both slices have length `self.dim()`.
    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        out
    }
}

/// Benchmark systems with their governing parameters.
///
/// Field names follow the usual symbols of each system, so the JSON form reads
/// e.g. `{"system": "van_der_pol", "mu": 1.0}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case", deny_unknown_fields)]
pub enum System {
    So {
        a: f64,
        omega: f64,
    },
    /// A simple oscillator seen through a random diffeomorphism.
    AugmentedSo {
        a: f64,
        omega: f64,
        seed: u64,
    },
    LienardPoly {
        a: f64,
        c: f64,
    },
    LienardSigmoid {
        a: f64,
        b: f64,
    },
    VanDerPol {
        mu: f64,
    },
    Bz {
        a: f64,
        b: f64,
    },
    Selkov {
        a: f64,
        b: f64,
    },
    Repressilator {
        alpha: f64,
        #[serde(default = "default_alpha0")]
        alpha0: f64,
        beta: f64,
        #[serde(default = "default_hill")]
        n: u32,
    },
}

fn default_alpha0() -> f64 {
    0.2
}

fn default_hill() -> u32 {
    2
}

impl System {
    pub fn name(&self) -> &'static str {
        match self {
            System::So { .. } => "so",
            System::AugmentedSo { .. } => "augmented_so",
            System::LienardPoly { .. } => "lienard_poly",
            System::LienardSigmoid { .. } => "lienard_sigmoid",
            System::VanDerPol { .. } => "van_der_pol",
            System::Bz { .. } => "bz",
            System::Selkov { .. } => "selkov",
            System::Repressilator { .. } => "repressilator",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            System::Repressilator { .. } => 6,
            _ => 2,
        }
    }

    /// Default phase-space box for initial conditions.
    pub fn default_box(&self) -> Vec<[f64; 2]> {
        let square = |lo: f64, hi: f64| vec![[lo, hi]; 2];
        match self {
            System::So { .. } | System::AugmentedSo { .. } => square(-1.0, 1.0),
            System::LienardPoly { .. } => square(-4.2, 4.2),
            System::LienardSigmoid { .. } => square(-1.5, 1.5),
            System::VanDerPol { .. } => square(-3.0, 3.0),
            System::Bz { .. } => square(0.0, 20.0),
            System::Selkov { .. } => square(0.0, 3.0),
            System::Repressilator { .. } => vec![[0.0, 10.0]; 6],
        }
    }

    /// Named parameters and their declared ranges, `(name, value, lo, hi)`.
    pub fn param_ranges(&self) -> Vec<(&'static str, f64, f64, f64)> {
        match *self {
            System::So { a, omega } | System::AugmentedSo { a, omega, .. } => {
                vec![("a", a, -0.5, 0.5), ("omega", omega, -1.0, 1.0)]
            }
            System::LienardPoly { a, c } => vec![("a", a, 0.0, 1.0), ("c", c, -1.0, 1.0)],
            System::LienardSigmoid { a, b } => vec![("a", a, 0.0, 1.0), ("b", b, -1.0, 1.0)],
            System::VanDerPol { mu } => vec![("mu", mu, -1.0, 1.0)],
            System::Bz { a, b } => vec![("a", a, 2.0, 19.0), ("b", b, 2.0, 6.0)],
            System::Selkov { a, b } => vec![("a", a, 0.01, 0.11), ("b", b, 0.02, 1.2)],
            System::Repressilator { alpha, beta, .. } => {
                vec![("alpha", alpha, 0.0, 30.0), ("beta", beta, 0.0, 10.0)]
            }
        }
    }
}

impl System {
    /// Copy with the parameters listed by [`System::param_ranges`] replaced,
    /// in the same order.
    pub fn with_params(&self, values: &[f64]) -> Result<System> {
        let n = self.param_ranges().len();
        if values.len() != n {
            return Err(SpeError::DimensionMismatch { expected: n, got: values.len() });
        }
        let v = values;
        let mut out = self.clone();
        match &mut out {
            System::So { a, omega } | System::AugmentedSo { a, omega, .. } => (*a, *omega) = (v[0], v[1]),
            System::LienardPoly { a, c } => (*a, *c) = (v[0], v[1]),
            System::LienardSigmoid { a, b } | System::Bz { a, b } | System::Selkov { a, b } => (*a, *b) = (v[0], v[1]),
            System::VanDerPol { mu } => *mu = v[0],
            System::Repressilator { alpha, beta, .. } => (*alpha, *beta) = (v[0], v[1]),
        }
        Ok(out)
    }
}

/// A benchmark system together with the box its initial conditions are drawn from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "SystemSpecRepr", into = "SystemSpecRepr")]
pub struct SystemSpec {
    pub system: System,
    pub bounds: Vec<[f64; 2]>,
    warp: Option<Arc<FlowMap>>,
}

#[derive(Serialize, Deserialize)]
struct SystemSpecRepr {
    #[serde(flatten)]
    system: System,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    bounds: Option<Vec<[f64; 2]>>,
}

impl TryFrom<SystemSpecRepr> for SystemSpec {
    type Error = SpeError;

    fn try_from(repr: SystemSpecRepr) -> Result<Self> {
        match repr.bounds {
            Some(b) => SystemSpec::with_box(repr.system, b),
            None => SystemSpec::new(repr.system),
        }
    }
}

impl From<SystemSpec> for SystemSpecRepr {
    fn from(spec: SystemSpec) -> Self {
        SystemSpecRepr {
            system: spec.system,
            bounds: Some(spec.bounds),
        }
    }
}

impl PartialEq for SystemSpec {
    fn eq(&self, other: &Self) -> bool {
        self.system == other.system && self.bounds == other.bounds
    }
}

impl SystemSpec {
    pub fn new(system: System) -> Result<Self> {
        let bounds = system.default_box();
        Self::with_box(system, bounds)
    }

    pub fn with_box(system: System, bounds: Vec<[f64; 2]>) -> Result<Self> {
        if bounds.len() != system.dim() {
            return Err(SpeError::DimensionMismatch {
                expected: system.dim(),
                got: bounds.len(),
            });
        }
        if bounds.iter().any(|[lo, hi]| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
            return Err(SpeError::InvalidConfig(format!("invalid box {bounds:?}")));
        }
        for (name, value, lo, hi) in system.param_ranges() {
            if !value.is_finite() {
                return Err(SpeError::InvalidConfig(format!("parameter {name} is not finite")));
            }
            if value < lo || value > hi {
                log::warn!(
                    "{}: parameter {name}={value} outside declared range [{lo}, {hi}]",
                    system.name()
                );
            }
        }
        if let System::Repressilator { alpha, n, .. } = system {
            if alpha <= 0.0 || n == 0 {
                return Err(SpeError::InvalidConfig(
                    "repressilator needs alpha > 0 and n >= 1".into(),
                ));
            }
        }
        let warp = match system {
            System::AugmentedSo { seed, .. } => Some(Arc::new(super::augment::random_warp(seed))),
            _ => None,
        };
        Ok(SystemSpec {
            system,
            bounds,
            warp,
        })
    }

    pub fn name(&self) -> &'static str {
        self.system.name()
    }

    /// The diffeomorphism behind an augmented system, if any.
    pub fn warp(&self) -> Option<&FlowMap> {
        self.warp.as_deref()
    }

    pub(crate) fn set_warp(&mut self, warp: FlowMap) {
        self.warp = Some(Arc::new(warp));
    }

    /// Evaluates the governing equations at `x`.
    pub fn eval_field(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(SpeError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.eval(x))
    }
}

impl VectorField for SystemSpec {
    fn dim(&self) -> usize {
        self.system.dim()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match self.system {
            System::So { a, omega } => so_field(a, omega, x, out),
            System::AugmentedSo { a, omega, .. } => {
                let warp = self.warp.as_ref().expect("augmented system without warp");
                super::augment::warped_field(warp, a, omega, x, out);
            }
            System::LienardPoly { a, c } => {
                let (x1, x2) = (x[0], x[1]);
                out[0] = x2;
                out[1] = -(a * x1 + x1 * x1 * x1) - (c + x1 * x1) * x2;
            }
            System::LienardSigmoid { a, b } => {
                let (x1, x2) = (x[0], x[1]);
                out[0] = x2;
                out[1] = -(1.0 / (1.0 + (-a * x1).exp()) - 0.5) - (b + x1 * x1) * x2;
            }
            System::VanDerPol { mu } => {
                let (x1, x2) = (x[0], x[1]);
                out[0] = x2;
                out[1] = mu * x2 - x1 - x1 * x1 * x2;
            }
            System::Bz { a, b } => {
                let (x1, x2) = (x[0], x[1]);
                let q = 1.0 + x1 * x1;
                out[0] = a - x1 - 4.0 * x1 * x2 / q;
                out[1] = b * x1 * (1.0 - x2 / q);
            }
            System::Selkov { a, b } => {
                let (x1, x2) = (x[0], x[1]);
                out[0] = -x1 + a * x2 + x1 * x1 * x2;
                out[1] = b - a * x2 - x1 * x1 * x2;
            }
            System::Repressilator {
                alpha,
                alpha0,
                beta,
                n,
            } => {
                // state = (m_LacI, p_LacI, m_TetR, p_TetR, m_cI, p_cI);
                // cI represses LacI, LacI represses TetR, TetR represses cI.
                const REPRESSOR: [usize; 3] = [2, 0, 1];
                for gene in 0..3 {
                    let m = x[2 * gene];
                    let p = x[2 * gene + 1];
                    let rep = x[2 * REPRESSOR[gene] + 1];
                    out[2 * gene] = -m + alpha / (1.0 + rep.powi(n as i32)) + alpha0;
                    out[2 * gene + 1] = -beta * (p - m);
                }
            }
        }
    }
}

/// Cartesian form of `r' = r(a - r^2), theta' = omega`.
pub(crate) fn so_field(a: f64, omega: f64, y: &[f64], out: &mut [f64]) {
    let (y1, y2) = (y[0], y[1]);
    let radial = a - (y1 * y1 + y2 * y2);
    out[0] = y1 * radial - omega * y2;
    out[1] = y2 * radial + omega * y1;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn with_params_replaces_in_order() {
        let s = System::Bz { a: 3.0, b: 4.0 }.with_params(&[10.0, 5.0]).unwrap();
        assert_eq!(s, System::Bz { a: 10.0, b: 5.0 });
        let r = System::Repressilator { alpha: 1.0, alpha0: 0.2, beta: 1.0, n: 2 };
        let r2 = r.with_params(&[20.0, 3.0]).unwrap();
        assert_eq!(r2.param_ranges()[1].1, 3.0);
        assert!(r.with_params(&[1.0]).is_err());
    }

    fn spec(system: System) -> SystemSpec {
        SystemSpec::new(system).unwrap()
    }

    #[test]
    fn van_der_pol_origin_is_fixed() {
        let f = spec(System::VanDerPol { mu: 1.0 }).eval_field(&[0.0, 0.0]).unwrap();
        assert_eq!(f, vec![0.0, 0.0]);
    }

    #[test]
    fn bz_at_origin() {
        let f = spec(System::Bz { a: 2.0, b: 3.0 }).eval_field(&[0.0, 0.0]).unwrap();
        assert_eq!(f, vec![2.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let s = spec(System::VanDerPol { mu: 1.0 });
        assert!(matches!(
            s.eval_field(&[0.0, 0.0, 0.0]),
            Err(SpeError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn out_of_range_params_still_construct() {
        assert!(SystemSpec::new(System::VanDerPol { mu: 3.0 }).is_ok());
        assert!(SystemSpec::new(System::VanDerPol { mu: f64::NAN }).is_err());
    }

    #[test]
    fn json_uses_symbol_names() {
        let s = spec(System::Bz { a: 2.0, b: 3.0 });
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["system"], "bz");
        assert_eq!(json["a"], 2.0);
        assert_eq!(json["box"][0][1], 20.0);
        let back: SystemSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, s);

        let parsed: SystemSpec =
            serde_json::from_str(r#"{"system":"repressilator","alpha":10,"beta":2}"#).unwrap();
        assert_eq!(
            parsed.system,
            System::Repressilator { alpha: 10.0, alpha0: 0.2, beta: 2.0, n: 2 }
        );
        assert_eq!(parsed.bounds.len(), 6);
    }

    #[test]
    fn unknown_fields_rejected() {
        let r: std::result::Result<SystemSpec, _> =
            serde_json::from_str(r#"{"system":"van_der_pol","mu":1,"nu":2}"#);
        assert!(r.is_err());
    }
}
