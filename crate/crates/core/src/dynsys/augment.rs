//! Simple oscillators warped through a random flow.
//!
//! If `H` is a diffeomorphism and `g` the oscillator field, the warped field
//! `f(x) = dH(x)^{-1} g(H(x))` is smoothly equivalent to `g`, so it keeps
//! the same invariant sets up to `H^{-1}`.

use nalgebra::{DMatrix, DVector};

use super::systems::{so_field, System, SystemSpec};
use crate::error::{Result, SpeError};
use crate::flow::{ActNorm, FlowConfig, FlowMap};

/// Perturbation scale of the random warp; large enough to visibly bend the
/// cycle while keeping it inside the `[-1, 1]^2` box.
const WARP_W_STD: f64 = 0.2;
const WARP_THETA_STD: f64 = 0.05;

/// Random planar flow used for augmented oscillators.
pub fn random_warp(seed: u64) -> FlowMap {
    let cfg = FlowConfig {
        init_w_std: WARP_W_STD,
        init_theta_std: WARP_THETA_STD,
        scale_clamp: None,
        ..FlowConfig::default()
    };
    FlowMap::random(ActNorm::identity(2), &cfg, seed).expect("default flow config is valid")
}

/// Warped oscillator field at `x`.
pub(crate) fn warped_field(warp: &FlowMap, a: f64, omega: f64, x: &[f64], out: &mut [f64]) {
    let d = warp.dim();
    let y = match warp.forward(x) {
        Ok(y) => y,
        Err(_) => {
            out.iter_mut().for_each(|v| *v = f64::NAN);
            return;
        }
    };
    let mut g = vec![0.0; d];
    so_field(a, omega, &y, &mut g);
    let jac = warp.jacobian(x).unwrap_or_else(|_| vec![f64::NAN; d * d]);
    let jac = DMatrix::from_row_slice(d, d, &jac);
    match jac.lu().solve(&DVector::from_vec(g)) {
        Some(f) => out.copy_from_slice(f.as_slice()),
        None => out.iter_mut().for_each(|v| *v = f64::NAN),
    }
}

/// Wraps a simple oscillator through a random flow drawn from `seed`.
pub fn augment_system(base: &SystemSpec, seed: u64) -> Result<SystemSpec> {
    match base.system {
        System::So { a, omega } => SystemSpec::with_box(System::AugmentedSo { a, omega, seed }, base.bounds.clone()),
        _ => Err(SpeError::InvalidConfig(format!(
            "only simple oscillators can be augmented, got {}",
            base.name()
        ))),
    }
}

/// Augmented system with an explicit warp (e.g. the identity).
pub fn warp_with(base: &SystemSpec, warp: FlowMap) -> Result<SystemSpec> {
    if warp.dim() != 2 {
        return Err(SpeError::DimensionMismatch { expected: 2, got: warp.dim() });
    }
    let mut spec = augment_system(base, 0)?;
    spec.set_warp(warp);
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{ground_truth_label, VectorField};

    fn so() -> SystemSpec {
        SystemSpec::new(System::So { a: 0.25, omega: 0.5 }).unwrap()
    }

    #[test]
    fn identity_warp_is_base_field() {
        let id = FlowMap::identity(ActNorm::identity(2), &FlowConfig::default()).unwrap();
        let aug = warp_with(&so(), id).unwrap();
        for x in [[0.3, -0.4], [0.9, 0.1], [-0.5, 0.5]] {
            let f = aug.eval(&x);
            let g = so().eval(&x);
            for i in 0..2 {
                assert!((f[i] - g[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn warp_preserves_label_and_is_deterministic() {
        for seed in 0..5 {
            let aug = augment_system(&so(), seed).unwrap();
            assert_eq!(ground_truth_label(&aug).unwrap(), ground_truth_label(&so()).unwrap());
            let again = augment_system(&so(), seed).unwrap();
            assert_eq!(aug.eval(&[0.2, 0.3]), again.eval(&[0.2, 0.3]));
        }
        let a = augment_system(&so(), 1).unwrap().eval(&[0.2, 0.3]);
        let b = augment_system(&so(), 2).unwrap().eval(&[0.2, 0.3]);
        assert_ne!(a, b);
    }

    #[test]
    fn warped_cycle_is_invariant() {
        // H^{-1} of the prototype circle is a periodic orbit of the warped field.
        let aug = augment_system(&so(), 7).unwrap();
        let warp = aug.warp().unwrap();
        let x0 = warp.inverse(&[0.5, 0.0]).unwrap();
        let traj = crate::dynsys::integrate(&aug, &x0, 5.0, 0.01).unwrap();
        for x in &traj.states {
            let y = warp.forward(x).unwrap();
            let r = (y[0] * y[0] + y[1] * y[1]).sqrt();
            assert!((r - 0.5).abs() < 1e-6, "r = {r}");
        }
    }

    #[test]
    fn only_so_can_be_augmented() {
        let vdp = SystemSpec::new(System::VanDerPol { mu: 1.0 }).unwrap();
        assert!(augment_system(&vdp, 0).is_err());
    }
}
