use super::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

/// Flow with deliberately large random parameters.
fn rough_flow(dim: usize, seed: u64, clamp: Option<f64>) -> FlowMap {
    let mut rng = rng_from_seed(seed ^ 0xABCD);
    let mean = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let std = (0..dim).map(|_| rng.random_range(0.5..2.0)).collect();
    let cfg = FlowConfig {
        init_w_std: 0.2,
        init_theta_std: 0.04,
        scale_clamp: clamp,
        ..FlowConfig::default()
    };
    let mut flow = FlowMap::random(ActNorm::new(mean, std), &cfg, seed).unwrap();
    // random varphi and mu too
    let mut p = flow.params();
    for b in flow.param_blocks() {
        if b.name.ends_with("varphi") || b.name.ends_with(".mu") {
            for v in &mut p[b.range] {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    flow.set_params(&p);
    flow
}

fn random_point(dim: usize, rng: &mut impl Rng, half: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-half..half)).collect()
}

fn fd_jacobian(flow: &FlowMap, x: &[f64], h: f64) -> Vec<f64> {
    let d = flow.dim();
    let mut jac = vec![0.0; d * d];
    for j in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let fp = flow.forward(&xp).unwrap();
        let fm = flow.forward(&xm).unwrap();
        for i in 0..d {
            jac[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn zero_params_leave_only_actnorm() {
    let act = ActNorm::new(vec![1.0, -2.0, 0.5], vec![2.0, 0.5, 4.0]);
    let flow = FlowMap::identity(act.clone(), &FlowConfig::default()).unwrap();
    let mut rng = rng_from_seed(1);
    for _ in 0..50 {
        let x = random_point(3, &mut rng, 5.0);
        let y = flow.forward(&x).unwrap();
        for i in 0..3 {
            assert_eq!(y[i], (x[i] - act.mean()[i]) / act.std()[i]);
        }
    }
    let unit = FlowMap::identity(ActNorm::identity(2), &FlowConfig::default()).unwrap();
    assert_eq!(unit.forward(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
    assert_eq!(unit.inverse(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
    assert_eq!(unit.log_det(&[0.3, -0.7]).unwrap(), 0.0);
}

#[test]
fn architecture_layout() {
    let flow = FlowMap::identity(ActNorm::identity(6), &FlowConfig::default()).unwrap();
    assert_eq!(flow.layers().len(), 2 + 4 * 3);
    assert!(matches!(flow.layers()[1], Layer::Affine(ref a) if a.rank() == 6));
    assert!(matches!(flow.layers()[2], Layer::Affine(ref a) if a.rank() == 2));
    assert!(matches!(flow.layers()[3], Layer::Coupling(ref c) if !c.reversed()));
    assert!(matches!(flow.layers()[4], Layer::Coupling(ref c) if c.reversed()));
    // the frozen ActNorm owns no parameters
    assert!(flow.param_blocks().iter().all(|b| b.layer != 0));
    let total: usize = flow.param_blocks().iter().map(|b| b.range.len()).sum();
    assert_eq!(total, flow.num_params());
}

#[test]
fn fresh_init_round_trip() {
    let spec = crate::dynsys::SystemSpec::new(crate::dynsys::System::VanDerPol { mu: 1.0 }).unwrap();
    let data = crate::dynsys::sample_sparse(&spec, &crate::dynsys::SamplingConfig::planar(200, 0.0, 3)).unwrap();
    let flow = FlowMap::init(&data, &FlowConfig::default(), 9).unwrap();
    assert_eq!(flow.actnorm().mean(), data.position_mean().as_slice());
    let mut rng = rng_from_seed(2);
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let x = random_point(2, &mut rng, 3.0);
        let back = flow.inverse(&flow.forward(&x).unwrap()).unwrap();
        worst = worst.max(back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    assert!(worst <= 1e-8, "{worst}");
    let again = FlowMap::init(&data, &FlowConfig::default(), 9).unwrap();
    assert_eq!(flow.params(), again.params());
}

#[test]
fn degenerate_coordinate_is_floored() {
    use crate::dynsys::{SampleMeta, SampleSet};
    let data = SampleSet::new(2, vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0], vec![0.0; 6], SampleMeta::external()).unwrap();
    let flow = FlowMap::init(&data, &FlowConfig::default(), 0).unwrap();
    assert_eq!(flow.actnorm().std()[0], STD_FLOOR);
}

#[test]
fn inverse_is_exact_across_dims() {
    for dim in [2, 3, 6, 10] {
        for seed in 0..3 {
            let flow = rough_flow(dim, seed, Some(5.0));
            let mut rng = rng_from_seed(seed + 100);
            let mut ws = flow.workspace();
            let mut y = vec![0.0; dim];
            let mut back = vec![0.0; dim];
            for _ in 0..500 {
                let x = random_point(dim, &mut rng, 5.0);
                flow.forward_with(&x, &mut y, &mut ws);
                flow.inverse_with(&y, &mut back, &mut ws);
                let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err <= 1e-6, "dim {dim}: {err}");
            }
        }
    }
}

#[test]
fn jvp_matches_finite_differences() {
    for dim in [2, 5, 6] {
        for clamp in [None, Some(5.0)] {
            let flow = rough_flow(dim, 11 + dim as u64, clamp);
            let mut rng = rng_from_seed(dim as u64);
            for _ in 0..20 {
                let x = random_point(dim, &mut rng, 3.0);
                let v = random_point(dim, &mut rng, 1.0);
                let (_, jv) = flow.jvp(&x, &v).unwrap();
                let jac = fd_jacobian(&flow, &x, 1e-5);
                let fd: Vec<f64> = (0..dim).map(|i| (0..dim).map(|j| jac[i * dim + j] * v[j]).sum()).collect();
                let diff: Vec<f64> = jv.iter().zip(&fd).map(|(a, b)| a - b).collect();
                assert!(norm(&diff) <= 1e-5 * norm(&jv), "dim {dim}: {jv:?} vs {fd:?}");
            }
        }
    }
}

#[test]
fn zero_tangent_and_pure_affine() {
    let flow = rough_flow(3, 4, Some(5.0));
    let (_, jv) = flow.jvp(&[0.1, 0.2, 0.3], &[0.0; 3]).unwrap();
    assert!(jv.iter().all(|v| *v == 0.0));

    let mut rng = rng_from_seed(8);
    let w = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let affine = FlowMap::from_layers(
        3,
        vec![
            Layer::ActNorm(ActNorm::identity(3)),
            Layer::Affine(AffineLayer::new(3, 2, w, 0.3, vec![0.1, 0.2, 0.3])),
        ],
    )
    .unwrap();
    let v = [0.5, -1.0, 2.0];
    let (_, a) = affine.jvp(&[0.0, 0.0, 0.0], &v).unwrap();
    let (_, b) = affine.jvp(&[4.0, -3.0, 1.0], &v).unwrap();
    for i in 0..3 {
        assert!((a[i] - b[i]).abs() < 1e-14);
    }
}

#[test]
fn log_det_matches_numeric_jacobian() {
    for dim in [2, 4, 6] {
        let flow = rough_flow(dim, 21 + dim as u64, Some(5.0));
        let mut rng = rng_from_seed(5);
        for _ in 0..10 {
            let x = random_point(dim, &mut rng, 3.0);
            let jac = DMatrix::from_row_slice(dim, dim, &fd_jacobian(&flow, &x, 1e-5));
            let det = jac.determinant();
            assert!(det > 0.0);
            let numeric = det.ln();
            let ld = flow.log_det(&x).unwrap();
            assert!((ld - numeric).abs() <= 1e-4 * ld.abs().max(1.0), "{ld} vs {numeric}");
            let layers = flow.layer_log_dets(&x).unwrap();
            assert_eq!(layers.iter().sum::<f64>(), ld);
        }
    }
}

#[test]
fn serialization_is_bit_exact() {
    let flow = rough_flow(5, 3, Some(5.0));
    let json = serde_json::to_string(&flow).unwrap();
    let back: FlowMap = serde_json::from_str(&json).unwrap();
    assert_eq!(back.params(), flow.params());
    assert_eq!(back.actnorm(), flow.actnorm());
    assert_eq!(serde_json::to_string(&back).unwrap(), json);
    let x = [0.1, -0.2, 0.3, 1.5, -2.0];
    assert_eq!(back.forward(&x).unwrap(), flow.forward(&x).unwrap());
}

#[test]
fn malformed_json_is_rejected() {
    let flow = rough_flow(2, 3, None);
    let mut value = serde_json::to_value(&flow).unwrap();
    value["layers"][1]["rank"] = serde_json::json!(5);
    assert!(serde_json::from_value::<FlowMap>(value).is_err());
}

/// Scalar test functional of a recorded JVP:
/// `a . H(x) + b . dH(x) v + c * logdet dH(x)`.
fn functional(flow: &FlowMap, x: &[f64], v: &[f64], a: &[f64], b: &[f64], c: f64) -> f64 {
    let (y, jv) = flow.jvp(x, v).unwrap();
    let ld = flow.log_det(x).unwrap();
    y.iter().zip(a).map(|(p, q)| p * q).sum::<f64>() + jv.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() + c * ld
}

fn close(analytic: f64, fd: f64) -> bool {
    (analytic - fd).abs() <= 1e-3 * analytic.abs().max(fd.abs()) + 1e-8
}

#[test]
fn jvp_backprop_matches_finite_differences() {
    for (dim, clamp) in [(2, None), (2, Some(1.0)), (3, Some(5.0)), (4, None), (6, Some(0.5))] {
        let flow = rough_flow(dim, 40 + dim as u64, clamp);
        let mut rng = rng_from_seed(77);
        let x = random_point(dim, &mut rng, 2.0);
        let v = random_point(dim, &mut rng, 1.0);
        let a = random_point(dim, &mut rng, 1.0);
        let b = random_point(dim, &mut rng, 1.0);
        let c = 0.7;

        let mut ws = flow.workspace();
        let mut tape = flow.new_tape();
        flow.record_jvp(&x, &v, &mut tape, &mut ws);
        let mut grad = flow.zero_grad();
        let mut x_bar = vec![0.0; dim];
        let mut v_bar = vec![0.0; dim];
        flow.backprop_jvp(&tape, &a, &b, c, &mut grad, &mut ws, &mut x_bar, &mut v_bar);
        let g = flow.flatten_grad(&grad);

        let h = 1e-5;
        let params = flow.params();
        for (k, gk) in g.iter().enumerate() {
            let mut fp = flow.clone();
            let mut p = params.clone();
            p[k] += h;
            fp.set_params(&p);
            let up = functional(&fp, &x, &v, &a, &b, c);
            p[k] -= 2.0 * h;
            fp.set_params(&p);
            let down = functional(&fp, &x, &v, &a, &b, c);
            let fd = (up - down) / (2.0 * h);
            assert!(close(*gk, fd), "dim {dim} clamp {clamp:?} param {k}: {gk} vs {fd}");
        }
        for j in 0..dim {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fd = (functional(&flow, &xp, &v, &a, &b, c) - functional(&flow, &xm, &v, &a, &b, c)) / (2.0 * h);
            assert!(close(x_bar[j], fd), "x_bar[{j}]: {} vs {fd}", x_bar[j]);
            let mut vp = v.clone();
            vp[j] += h;
            let mut vm = v.clone();
            vm[j] -= h;
            let fd = (functional(&flow, &x, &vp, &a, &b, c) - functional(&flow, &x, &vm, &a, &b, c)) / (2.0 * h);
            assert!(close(v_bar[j], fd), "v_bar[{j}]: {} vs {fd}", v_bar[j]);
        }
    }
}

#[test]
fn inverse_and_forward_backprop_match_finite_differences() {
    for (dim, clamp) in [(2, Some(5.0)), (5, None), (6, Some(1.0))] {
        let flow = rough_flow(dim, 60 + dim as u64, clamp);
        let mut rng = rng_from_seed(3);
        let y = random_point(dim, &mut rng, 2.0);
        let a = random_point(dim, &mut rng, 1.0);
        let dot = |f: &FlowMap, inverse: bool| {
            let out = if inverse { f.inverse(&y).unwrap() } else { f.forward(&y).unwrap() };
            out.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>()
        };
        for inverse in [false, true] {
            let mut ws = flow.workspace();
            let mut tape = flow.new_tape();
            let mut grad = flow.zero_grad();
            let mut in_bar = vec![0.0; dim];
            if inverse {
                flow.record_inverse(&y, &mut tape, &mut ws);
                flow.backprop_inverse(&tape, &a, &mut grad, &mut ws, &mut in_bar);
            } else {
                flow.record_forward(&y, &mut tape, &mut ws);
                flow.backprop_forward(&tape, &a, &mut grad, &mut ws, &mut in_bar);
            }
            let g = flow.flatten_grad(&grad);
            let params = flow.params();
            let h = 1e-5;
            for (k, gk) in g.iter().enumerate() {
                let mut fp = flow.clone();
                let mut p = params.clone();
                p[k] += h;
                fp.set_params(&p);
                let up = dot(&fp, inverse);
                p[k] -= 2.0 * h;
                fp.set_params(&p);
                let down = dot(&fp, inverse);
                let fd = (up - down) / (2.0 * h);
                assert!(close(*gk, fd), "inverse={inverse} dim {dim} param {k}: {gk} vs {fd}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn determinant_is_positive(seed in 0u64..10_000, dim in 2usize..7) {
        let flow = rough_flow(dim, seed, Some(5.0));
        let mut rng = rng_from_seed(seed);
        let x = random_point(dim, &mut rng, 5.0);
        let jac = DMatrix::from_row_slice(dim, dim, &flow.jacobian(&x).unwrap());
        prop_assert!(jac.determinant() > 0.0);
    }

    #[test]
    fn jvp_is_linear(seed in 0u64..10_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let flow = rough_flow(4, seed, Some(5.0));
        let mut rng = rng_from_seed(seed + 1);
        let x = random_point(4, &mut rng, 3.0);
        let u = random_point(4, &mut rng, 1.0);
        let v = random_point(4, &mut rng, 1.0);
        let mix: Vec<f64> = u.iter().zip(&v).map(|(p, q)| alpha * p + beta * q).collect();
        let (_, ju) = flow.jvp(&x, &u).unwrap();
        let (_, jv) = flow.jvp(&x, &v).unwrap();
        let (_, jm) = flow.jvp(&x, &mix).unwrap();
        for i in 0..4 {
            prop_assert!((jm[i] - (alpha * ju[i] + beta * jv[i])).abs() <= 1e-10 * (1.0 + jm[i].abs()));
        }
    }
}
