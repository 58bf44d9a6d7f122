use serde::{Deserialize, Serialize};

use super::systems::{so_field, VectorField};
use crate::error::{Result, SpeError};

/// Normal-form prototype: a radial oscillator in the first two coordinates,
/// exponential decay at rate `tau` in the remaining ones.
///
/// `a > 0` gives a stable limit cycle of radius `sqrt(a)`, `a < 0` a stable
/// focus at the origin. The sign of `omega` fixes the orientation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prototype {
    pub a: f64,
    pub omega: f64,
    pub dim: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    0.5
}

impl Prototype {
    pub fn new(a: f64, omega: f64, dim: usize, tau: f64) -> Result<Self> {
        let p = Prototype { a, omega, dim, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn planar(a: f64, omega: f64) -> Self {
        Prototype {
            a,
            omega,
            dim: 2,
            tau: default_tau(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(SpeError::InvalidConfig(format!(
                "prototype dimension {} < 2",
                self.dim
            )));
        }
        if self.a == 0.0 || self.omega == 0.0 || !self.a.is_finite() || !self.omega.is_finite() {
            return Err(SpeError::InvalidConfig(
                "prototype needs nonzero finite a and omega".into(),
            ));
        }
        if !(self.tau > 0.0) {
            return Err(SpeError::InvalidConfig("prototype tau must be > 0".into()));
        }
        Ok(())
    }

    pub fn is_cycle(&self) -> bool {
        self.a > 0.0
    }

    /// Radius of the limit cycle, `None` for node prototypes.
    pub fn cycle_radius(&self) -> Option<f64> {
        self.is_cycle().then(|| self.a.sqrt())
    }

    /// Checked evaluation of the prototype field.
    pub fn field(&self, y: &[f64]) -> Result<Vec<f64>> {
        if self.dim < 2 {
            return Err(SpeError::InvalidConfig("prototype dimension < 2".into()));
        }
        if y.len() != self.dim {
            return Err(SpeError::DimensionMismatch {
                expected: self.dim,
                got: y.len(),
            });
        }
        Ok(self.eval(y))
    }

    /// `out = (dg/dy)^T * g_bar`.
    pub fn vjp(&self, y: &[f64], g_bar: &[f64], out: &mut [f64]) {
        let (y1, y2) = (y[0], y[1]);
        let radial = self.a - (y1 * y1 + y2 * y2);
        let j11 = radial - 2.0 * y1 * y1;
        let j12 = -2.0 * y1 * y2 - self.omega;
        let j21 = -2.0 * y1 * y2 + self.omega;
        let j22 = radial - 2.0 * y2 * y2;
        out[0] = j11 * g_bar[0] + j21 * g_bar[1];
        out[1] = j12 * g_bar[0] + j22 * g_bar[1];
        for j in 2..self.dim {
            out[j] = -self.tau * g_bar[j];
        }
    }

    /// Distance from `y` to the prototype's attracting invariant set.
    pub fn distance_to_invariant_set(&self, y: &[f64]) -> f64 {
        let transient: f64 = y[2..].iter().map(|v| v * v).sum::<f64>();
        match self.cycle_radius() {
            Some(r) => ((y[0] * y[0] + y[1] * y[1]).sqrt() - r).abs() + transient.sqrt(),
            None => (y[0] * y[0] + y[1] * y[1] + transient).sqrt(),
        }
    }
}

impl VectorField for Prototype {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, y: &[f64], out: &mut [f64]) {
        so_field(self.a, self.omega, y, out);
        for j in 2..self.dim {
            out[j] = -self.tau * y[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn on_cycle_motion_is_tangential() {
        let p = Prototype::planar(0.25, 0.5);
        assert_eq!(p.field(&[0.5, 0.0]).unwrap(), vec![0.0, 0.25]);
        assert_eq!(p.field(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn transient_coordinates_decay() {
        let p = Prototype::new(0.25, 0.5, 4, 0.5).unwrap();
        assert_eq!(p.field(&[0.0, 0.0, 1.0, -2.0]).unwrap(), vec![0.0, 0.0, -0.5, 1.0]);
    }

    #[test]
    fn rejects_bad_dims() {
        let p = Prototype { a: 0.25, omega: 0.5, dim: 1, tau: 0.5 };
        assert!(p.field(&[0.0]).is_err());
        assert!(Prototype::new(0.25, 0.5, 1, 0.5).is_err());
        assert!(Prototype::new(0.0, 0.5, 2, 0.5).is_err());
        let q = Prototype::planar(0.25, 0.5);
        assert!(q.field(&[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let p = Prototype::new(-0.25, 0.5, 3, 0.5).unwrap();
        let y = [0.3, -0.7, 1.1];
        let g_bar = [0.2, -1.3, 0.4];
        let mut analytic = [0.0; 3];
        p.vjp(&y, &g_bar, &mut analytic);
        let h = 1e-6;
        for j in 0..3 {
            let mut yp = y;
            let mut ym = y;
            yp[j] += h;
            ym[j] -= h;
            let fp = p.eval(&yp);
            let fm = p.eval(&ym);
            let fd: f64 = (0..3).map(|i| g_bar[i] * (fp[i] - fm[i]) / (2.0 * h)).sum();
            assert!((fd - analytic[j]).abs() < 1e-8, "{j}: {fd} vs {}", analytic[j]);
        }
    }
}
