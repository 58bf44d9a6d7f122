use super::*;
use crate::dynsys::{sample_sparse, SampleMeta, SamplingConfig, System, SystemSpec, VectorField};
use crate::flow::ActNorm;
use proptest::prelude::*;
use rand::Rng;

fn so_samples(n: usize, seed: u64) -> SampleSet {
    let spec = SystemSpec::new(System::So { a: 0.25, omega: 0.5 }).unwrap();
    sample_sparse(&spec, &SamplingConfig::planar(n, 0.0, seed)).unwrap()
}

/// Samples drawn directly from a prototype's field at random points.
fn proto_samples(p: &Prototype, n: usize, seed: u64, half: f64) -> SampleSet {
    let mut rng = crate::rng::rng_from_seed(seed);
    let mut xs = Vec::new();
    let mut vs = Vec::new();
    for _ in 0..n {
        let x: Vec<f64> = (0..p.dim).map(|_| rng.random_range(-half..half)).collect();
        vs.extend(p.eval(&x));
        xs.extend(x);
    }
    SampleSet::new(p.dim, xs, vs, SampleMeta::external()).unwrap()
}

fn unit_flow(dim: usize) -> FlowMap {
    FlowMap::identity(ActNorm::identity(dim), &FlowConfig::default()).unwrap()
}

fn rough_flow(dim: usize, seed: u64) -> FlowMap {
    let mut rng = crate::rng::rng_from_seed(seed ^ 0x77);
    let mean = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    let std = (0..dim).map(|_| rng.random_range(0.5..1.5)).collect();
    let cfg = FlowConfig {
        init_w_std: 0.2,
        init_theta_std: 0.04,
        ..FlowConfig::default()
    };
    let mut flow = FlowMap::random(ActNorm::new(mean, std), &cfg, seed).unwrap();
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

#[test]
fn matched_identity_loss_is_zero() {
    let p = Prototype::planar(0.25, 0.5);
    let s = proto_samples(&p, 300, 1, 1.0);
    let loss = equivalence_loss(&unit_flow(2), &p, &s).unwrap();
    assert!(loss <= 1e-12, "{loss}");
}

#[test]
fn negated_velocities_give_four() {
    let p = Prototype::planar(0.25, 0.5);
    let s = proto_samples(&p, 300, 1, 1.0).scale_velocities(-1.0);
    let loss = equivalence_loss(&unit_flow(2), &p, &s).unwrap();
    assert!((loss - 4.0).abs() <= 1e-12, "{loss}");
}

#[test]
fn opposite_orientation_scores_worse() {
    let s = so_samples(500, 4);
    let flow = unit_flow(2);
    let matched = equivalence_loss(&flow, &Prototype::planar(0.25, 0.5), &s).unwrap();
    let opposite = Prototype::planar(0.25, -0.5);
    let worse = equivalence_loss(&flow, &opposite, &s).unwrap();
    // direct evaluation of the same average
    let mut direct = 0.0;
    for i in 0..s.len() {
        let u = s.velocity(i);
        let g = opposite.eval(s.position(i));
        let (nu, ng) = (u[0].hypot(u[1]), g[0].hypot(g[1]));
        direct += (u[0] / nu - g[0] / ng).powi(2) + (u[1] / nu - g[1] / ng).powi(2);
    }
    direct /= s.len() as f64;
    assert!((worse - direct).abs() < 1e-12);
    assert!(worse > matched);
}

#[test]
fn zero_velocity_uses_raw_difference() {
    let p = Prototype::planar(0.25, 0.5);
    let s = SampleSet::new(2, vec![0.3, 0.1], vec![0.0, 0.0], SampleMeta::external()).unwrap();
    let g = p.eval(&[0.3, 0.1]);
    let loss = equivalence_loss(&unit_flow(2), &p, &s).unwrap();
    assert!((loss - (g[0] * g[0] + g[1] * g[1])).abs() < 1e-15);
}

#[test]
fn loss_errors() {
    let p = Prototype::planar(0.25, 0.5);
    assert!(matches!(
        SampleSet::new(2, vec![], vec![], SampleMeta::external()),
        Err(SpeError::EmptySamples)
    ));
    let s = so_samples(10, 0);
    assert!(matches!(
        equivalence_loss(&unit_flow(3), &p, &s),
        Err(SpeError::DimensionMismatch { .. })
    ));
}

#[test]
fn full_loss_reduces_to_equivalence() {
    let s = so_samples(200, 2);
    let flow = rough_flow(2, 3);
    let p = Prototype::planar(0.25, 0.5);
    let c = full_loss(&flow, &p, &s, &LossConfig::unregularized(), -1.0).unwrap();
    assert_eq!(c.total, c.equiv);
    assert!((c.equiv - equivalence_loss(&flow, &p, &s).unwrap()).abs() < 1e-14);
    assert_eq!(c.proj, 0.0);
}

#[test]
fn volume_preserving_and_centered_terms_vanish() {
    // identity flow: log-det 0 and H^{-1}(0) = 0
    let p = Prototype::planar(0.25, 0.5);
    let mut xs = Vec::new();
    let mut vs = Vec::new();
    for k in 0..8 {
        let t = k as f64 * std::f64::consts::TAU / 8.0;
        let x = [t.cos(), t.sin()];
        vs.extend(p.eval(&x));
        xs.extend(x);
    }
    let s = SampleSet::new(2, xs, vs, SampleMeta::external()).unwrap();
    let c = full_loss(&unit_flow(2), &p, &s, &LossConfig::default(), -1.0).unwrap();
    assert_eq!(c.det, 0.0);
    assert!(c.cent < 1e-30);
    assert!(c.total < 1e-12);
}

#[test]
fn projection_examples() {
    let flow = unit_flow(4);
    assert_eq!(projection(&flow, &[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 2.0, 0.0, 0.0]);
    assert!(projection(&unit_flow(2), &[1.0, 2.0]).is_err());

    let flow = rough_flow(4, 5);
    let mut rng = crate::rng::rng_from_seed(6);
    for _ in 0..20 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = projection(&flow, &x).unwrap();
        let pp = projection(&flow, &p).unwrap();
        for k in 0..4 {
            assert!((p[k] - pp[k]).abs() <= 1e-8);
        }
        // the image of the plane is fixed
        let on_plane = flow.inverse(&[x[0], x[1], 0.0, 0.0]).unwrap();
        let fixed = projection(&flow, &on_plane).unwrap();
        for k in 0..4 {
            assert!((fixed[k] - on_plane[k]).abs() <= 1e-8);
        }
    }
}

#[test]
fn projection_loss_examples() {
    let flow = unit_flow(3);
    let n = 40;
    let planar = SampleSet::new(
        3,
        (0..n).flat_map(|i| [i as f64 * 0.1, 1.0, 0.0]).collect(),
        vec![0.0; 3 * n],
        SampleMeta::external(),
    )
    .unwrap();
    let l = projection_loss(&flow, &planar, -1.0).unwrap();
    assert!((l - 1.0 / n as f64).abs() < 1e-15);

    let off = |z: f64| {
        SampleSet::new(
            3,
            (0..n).flat_map(|i| [i as f64 * 0.1, 1.0, z]).collect(),
            vec![0.0; 3 * n],
            SampleMeta::external(),
        )
        .unwrap()
    };
    let lam = 0.3;
    let base = lam / n as f64;
    let a = projection_loss(&flow, &off(0.5), lam).unwrap() + base;
    let b = projection_loss(&flow, &off(1.0), lam).unwrap() + base;
    assert!((b - 4.0 * a).abs() < 1e-12);

    // d/dlambda = e^lambda * mse - 1/N, zero at lambda = -ln(N * mse)
    let s = off(0.5);
    let mse = 0.25;
    let h = 1e-5;
    for lam in [-2.0, -1.0, 0.5] {
        let fd = (projection_loss(&flow, &s, lam + h).unwrap() - projection_loss(&flow, &s, lam - h).unwrap()) / (2.0 * h);
        let exact = f64::exp(lam) * mse - 1.0 / n as f64;
        assert!((fd - exact).abs() <= 1e-3 * exact.abs() + 1e-8);
    }
    let stationary = -(n as f64 * mse).ln();
    let fd = (projection_loss(&flow, &s, stationary + h).unwrap() - projection_loss(&flow, &s, stationary - h).unwrap()) / (2.0 * h);
    assert!(fd.abs() < 1e-8);
}

/// Random positions/velocities for gradient checks.
fn random_set(dim: usize, n: usize, seed: u64) -> SampleSet {
    let mut rng = crate::rng::rng_from_seed(seed);
    let xs = (0..dim * n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let vs = (0..dim * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    SampleSet::new(dim, xs, vs, SampleMeta::external()).unwrap()
}

/// Keeps samples whose pushed-forward and prototype velocities are well away
/// from zero, where unit normalization has large curvature and central
/// differences at h = 1e-5 stop being a reliable oracle.
fn well_conditioned(flow: &FlowMap, proto: &Prototype, s: &SampleSet, n: usize) -> SampleSet {
    let mut xs = Vec::new();
    let mut vs = Vec::new();
    for i in 0..s.len() {
        let (y, u) = flow.jvp(s.position(i), s.velocity(i)).unwrap();
        let g = proto.eval(&y);
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm(&u) > 0.3 && norm(&g) > 0.3 && xs.len() < n * s.dim() {
            xs.extend_from_slice(s.position(i));
            vs.extend_from_slice(s.velocity(i));
        }
    }
    SampleSet::new(s.dim(), xs, vs, SampleMeta::external()).unwrap()
}

fn check_gradient(dim: usize, seed: u64, cfg: &LossConfig, proto: Prototype) {
    let flow = rough_flow(dim, seed);
    let s = well_conditioned(&flow, &proto, &random_set(dim, 200, seed + 1), 12);
    assert!(s.len() >= 6, "too few usable samples");
    let lam = -0.7;
    let (_, g) = grad(&flow, &proto, &s, cfg, lam).unwrap();
    assert_eq!(g.len(), flow.num_params() + usize::from(dim > 2));
    let params = flow.params();
    let h = 1e-5;
    let eval = |p: &[f64], lam: f64| {
        let mut f = flow.clone();
        f.set_params(p);
        full_loss(&f, &proto, &s, cfg, lam).unwrap().total
    };
    for k in 0..params.len() {
        let mut p = params.clone();
        p[k] += h;
        let up = eval(&p, lam);
        p[k] -= 2.0 * h;
        let down = eval(&p, lam);
        let fd = (up - down) / (2.0 * h);
        assert!(
            (g[k] - fd).abs() <= 1e-3 * g[k].abs().max(fd.abs()) + 1e-8,
            "dim {dim} seed {seed} param {k}: {} vs {fd}",
            g[k]
        );
    }
    if dim > 2 {
        let fd = (eval(&params, lam + h) - eval(&params, lam - h)) / (2.0 * h);
        let gl = g[params.len()];
        assert!((gl - fd).abs() <= 1e-3 * gl.abs().max(fd.abs()) + 1e-8, "lambda: {gl} vs {fd}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    // heavier regularization than the defaults so every term is visible
    let cfg = LossConfig {
        lambda_det: 0.3,
        lambda_cent: 0.2,
        ..LossConfig::default()
    };
    let det_cfg = LossConfig {
        det_penalty: DetPenalty::Det,
        ..cfg.clone()
    };
    let mut runs = 0;
    for dim in [2, 4, 6] {
        for seed in 0..4 {
            let a = if seed % 2 == 0 { 0.25 } else { -0.25 };
            let omega = if seed < 2 { 0.5 } else { -0.5 };
            let proto = Prototype::new(a, omega, dim, 0.5).unwrap();
            check_gradient(dim, seed, &cfg, proto);
            runs += 1;
        }
        check_gradient(dim, 50, &det_cfg, Prototype::new(0.25, 0.5, dim, 0.5).unwrap());
        check_gradient(dim, 51, &LossConfig::default(), Prototype::new(-0.25, 0.5, dim, 0.5).unwrap());
        runs += 2;
    }
    assert!(runs >= 18);
}

#[test]
fn gradient_with_zero_velocity_sample() {
    let flow = rough_flow(2, 9);
    let proto = Prototype::planar(0.25, 0.5);
    let s = SampleSet::new(2, vec![0.2, 0.3, 1.0, -0.5], vec![0.0, 0.0, 0.4, 0.1], SampleMeta::external()).unwrap();
    let cfg = LossConfig::unregularized();
    let (_, g) = grad(&flow, &proto, &s, &cfg, 0.0).unwrap();
    let params = flow.params();
    let h = 1e-6;
    for k in (0..params.len()).step_by(7) {
        let mut f = flow.clone();
        let mut p = params.clone();
        p[k] += h;
        f.set_params(&p);
        let up = full_loss(&f, &proto, &s, &cfg, 0.0).unwrap().total;
        p[k] -= 2.0 * h;
        f.set_params(&p);
        let down = full_loss(&f, &proto, &s, &cfg, 0.0).unwrap().total;
        let fd = (up - down) / (2.0 * h);
        assert!((g[k] - fd).abs() <= 1e-3 * g[k].abs().max(fd.abs()) + 1e-8);
    }
}

#[test]
fn stationary_at_exact_fit() {
    let p = Prototype::planar(0.25, 0.5);
    let s = proto_samples(&p, 400, 3, 1.0);
    let (c, g) = grad(&unit_flow(2), &p, &s, &LossConfig::default(), -1.0).unwrap();
    assert!(c.equiv < 1e-12);
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm <= 1e-6, "{norm}");
}

#[test]
fn frozen_actnorm_has_no_gradient_slot() {
    let flow = rough_flow(2, 1);
    assert!(flow.param_blocks().iter().all(|b| !b.name.starts_with("layer0")));
    let (_, g) = grad(&flow, &Prototype::planar(0.25, 0.5), &so_samples(20, 1), &LossConfig::default(), 0.0).unwrap();
    assert_eq!(g.len(), flow.num_params());
}

#[test]
fn trimming_keeps_ceil_fraction_with_index_ties() {
    assert_eq!(keep_count(1000, 0.4), 400);
    assert_eq!(keep_count(10, 0.25), 3);
    assert_eq!(keep_count(3, 0.01), 1);
    let p = Prototype::planar(-0.25, 0.5);
    // equal distances everywhere: lowest indices win
    let images = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [0.1, 0.0]];
    let idx: Vec<usize> = (0..5).collect();
    let kept = trimmed_indices(&p, &idx, |i| images[i].to_vec(), 0.5);
    assert_eq!(kept, vec![0, 1, 4]);
}

#[test]
fn fit_is_deterministic_and_improves() {
    let s = so_samples(200, 5);
    let p = Prototype::planar(0.25, 0.5);
    let opt = OptimConfig {
        iters: 150,
        seed: 3,
        ..OptimConfig::default()
    };
    let a = fit(&s, &p, &LossConfig::default(), &opt).unwrap();
    let b = fit(&s, &p, &LossConfig::default(), &opt).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.loss_trace.len(), 150);
    assert!(a.final_equiv_loss < a.loss_trace[0].equiv);
    assert!(a.final_equiv_loss.is_finite());
}

#[test]
fn fit_options_run() {
    let spec = SystemSpec::new(System::Repressilator {
        alpha: 10.0,
        alpha0: 0.2,
        beta: 2.0,
        n: 2,
    })
    .unwrap();
    let s = sample_sparse(&spec, &SamplingConfig::repressilator(120, 0.0, 1)).unwrap();
    let p = Prototype::new(0.25, 0.5, 6, 0.5).unwrap();
    let opt = OptimConfig {
        iters: 20,
        curriculum: true,
        trim_fraction: 0.4,
        batch: 64,
        ..OptimConfig::for_dim(6)
    };
    let r = fit(&s, &p, &LossConfig::default(), &opt).unwrap();
    assert_eq!(r.loss_trace.len(), 20);
    assert!(r.loss_trace.iter().all(|t| t.proj != 0.0));
    // curriculum: couplings stay at their initial values for the first half
    let init = FlowMap::init(&s, &opt.flow, opt.seed).unwrap();
    let coupling: Vec<_> = init.param_blocks().into_iter().filter(|b| b.coupling).collect();
    let mut moved = Vec::new();
    fit_observed(&s, &p, &LossConfig::default(), &opt, &mut |it, flow| {
        let changed = coupling
            .iter()
            .any(|b| flow.params()[b.range.clone()] != init.params()[b.range.clone()]);
        moved.push((it, changed));
    })
    .unwrap();
    for (it, changed) in moved {
        assert_eq!(changed, it >= 10, "iteration {it}");
    }
    assert_eq!(OptimConfig::for_dim(6).iters, 1000);
}

#[test]
fn divergence_is_reported_with_trace() {
    let s = so_samples(50, 5);
    let p = Prototype::planar(0.25, 0.5);
    let opt = OptimConfig {
        iters: 30,
        lr: 5.0,
        ..OptimConfig::default()
    };
    let cfg = LossConfig {
        lambda_cent: 1e3,
        ..LossConfig::default()
    };
    match fit(&s, &p, &cfg, &opt) {
        Err(SpeError::Divergence { trace, iter, .. }) => assert_eq!(trace.len(), iter + 1),
        Err(e) => panic!("unexpected error {e}"),
        Ok(r) => assert!(r.final_total_loss <= DIVERGENCE_LIMIT),
    }
}

#[test]
fn trace_csv_header() {
    let csv = loss_trace_csv(&[LossRecord {
        iter: 0,
        equiv: 0.5,
        det: 0.0,
        cent: 0.0,
        proj: 0.0,
        total: 0.5,
    }]);
    assert!(csv.starts_with("iter,L_E,L_det,L_cent,L_proj,total\n0,5.0000000000000000e-1,"));
}

#[test]
fn invalid_configs_rejected() {
    let bad = OptimConfig {
        trim_fraction: 0.0,
        ..OptimConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = LossConfig {
        eps_norm: 0.0,
        ..LossConfig::default()
    };
    assert!(bad.validate().is_err());
    let json = r#"{"lr": 0.01, "bogus": 1}"#;
    assert!(serde_json::from_str::<OptimConfig>(json).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_invariant_to_velocity_scale(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let s = so_samples(60, seed);
        let flow = rough_flow(2, seed);
        let p = Prototype::planar(0.25, -0.5);
        let a = equivalence_loss(&flow, &p, &s).unwrap();
        let b = equivalence_loss(&flow, &p, &s.scale_velocities(scale)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..=4.0 + 1e-12).contains(&a));
    }
}

