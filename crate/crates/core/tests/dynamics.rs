//! Oracles for the sampler layers: hand evaluations, finite-difference
//! Jacobians and dense eigendecompositions.

use ade_core::diffcore::{Activation, Mat, MlpPotential, Potential, QuadraticPotential, Tape};
use ade_core::dynamics::{
    det_langevin_step, hamiltonian, langevin_step, leapfrog_step, logdet_estimate, DynamicsSpec,
    DynamicsStack, Field, LayerKind, LogdetConfig, LogdetMethod, PhaseState, ProbeDesign, StepControl,
};
use ade_core::rng::Stream;
use ade_core::Error;
use nalgebra::DMatrix;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

fn start(tape: &mut Tape, x: &Mat, v: &Mat) -> PhaseState {
    let rows = x.nrows();
    PhaseState {
        x: tape.constant(x.clone()),
        v: tape.constant(v.clone()),
        log_q: tape.constant(Array2::zeros((rows, 1))),
        step_index: 0,
    }
}

fn leapfrog_once(p: &Potential, x: &Mat, v: &Mat, eta: &[f64], control: StepControl) -> (Mat, Mat, Mat) {
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let field = Field::new(p, &b);
    let s = start(&mut tape, x, v);
    let e = tape.constant(Array2::from_shape_vec((1, eta.len()), eta.to_vec()).unwrap());
    let n = leapfrog_step(&mut tape, &field, &s, e, &control).unwrap();
    (tape.value(n.x).clone(), tape.value(n.v).clone(), tape.value(n.log_q).clone())
}

fn no_clip() -> StepControl {
    StepControl::default()
}

/// Central-difference Jacobian of a map on the stacked vector `(x, v)`.
fn fd_jacobian(map: &dyn Fn(&[f64]) -> Vec<f64>, z: &[f64], h: f64) -> DMatrix<f64> {
    let n = z.len();
    let mut j = DMatrix::zeros(n, n);
    for c in 0..n {
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[c] += h;
        zm[c] -= h;
        let fp = map(&zp);
        let fm = map(&zm);
        for r in 0..n {
            j[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    j
}

fn split(z: &[f64], d: usize) -> (Mat, Mat) {
    (
        Array2::from_shape_vec((1, d), z[..d].to_vec()).unwrap(),
        Array2::from_shape_vec((1, d), z[d..].to_vec()).unwrap(),
    )
}

#[test]
fn leapfrog_hand_example() {
    let p = Potential::Quadratic(QuadraticPotential::standard(1));
    let (x, v, _) = leapfrog_once(&p, &array![[1.0]], &array![[0.5]], &[0.2], no_clip());
    assert!((x[[0, 0]] - 1.08).abs() < 1e-14);
    assert!((v[[0, 0]] - 0.292).abs() < 1e-14);
}

#[test]
fn leapfrog_reverses_under_momentum_negation() {
    let p = Potential::Quadratic(QuadraticPotential::standard(1));
    let (x, v, _) = leapfrog_once(&p, &array![[1.08]], &array![[-0.292]], &[0.2], no_clip());
    assert!((x[[0, 0]] - 1.0).abs() < 1e-12);
    assert!((v[[0, 0]] + 0.5).abs() < 1e-12);
}

#[test]
fn zero_step_is_identity() {
    let mut rng = Stream::new(3);
    let p = Potential::Mlp(MlpPotential::new(3, &[8], Activation::Tanh, &mut rng).unwrap());
    let x = rng.normal_matrix(4, 3);
    let v = rng.normal_matrix(4, 3);
    let (x1, v1, lq) = leapfrog_once(&p, &x, &v, &[0.0; 3], no_clip());
    assert_eq!(x1, x);
    assert_eq!(v1, v);
    assert!(lq.iter().all(|&a| a == 0.0));
}

#[test]
fn leapfrog_jacobian_has_unit_determinant() {
    let mut rng = Stream::new(5);
    for k in 0..30 {
        let d = 1 + k % 3;
        let p = Potential::Mlp(MlpPotential::new(d, &[8, 8], Activation::Softplus, &mut rng).unwrap());
        let eta: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.05, 0.3)).collect();
        let z: Vec<f64> = (0..2 * d).map(|_| rng.normal()).collect();
        let map = |z: &[f64]| -> Vec<f64> {
            let (x, v) = split(z, d);
            let (x1, v1, _) = leapfrog_once(&p, &x, &v, &eta, no_clip());
            x1.iter().chain(v1.iter()).copied().collect()
        };
        let det = fd_jacobian(&map, &z, 1e-5).determinant();
        assert!((det - 1.0).abs() < 1e-6, "case {k}: det {det}");
    }
}

#[test]
fn leapfrog_keeps_log_q() {
    let mut rng = Stream::new(6);
    let p = Potential::Mlp(MlpPotential::new(2, &[8], Activation::Relu, &mut rng).unwrap());
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let field = Field::new(&p, &b);
    let lq0 = rng.normal_matrix(5, 1);
    let s = PhaseState {
        x: tape.constant(rng.normal_matrix(5, 2)),
        v: tape.constant(rng.normal_matrix(5, 2)),
        log_q: tape.constant(lq0.clone()),
        step_index: 0,
    };
    let spec = DynamicsSpec {
        steps: 7,
        ..DynamicsSpec::default()
    };
    let stack = DynamicsStack::new(spec, 2, 1.0, &mut rng).unwrap();
    let sb = stack.params().bind(&mut tape, true);
    let out = stack.run(&mut tape, &sb, &field, &s, &mut rng).unwrap();
    assert_eq!(tape.value(out.state.log_q), &lq0);
    assert_eq!(out.state.step_index, 7);
}

#[test]
fn energy_drift_scales_with_step_size_squared() {
    let p = Potential::Quadratic(QuadraticPotential::new(&[0.0, 0.0], &[1.0, 2.0]).unwrap());
    let x0 = array![[1.0, -0.5]];
    let v0 = array![[0.3, 0.8]];
    let h0 = hamiltonian(&p, &x0, &v0, 1.0).unwrap()[0];
    let mut ratios = Vec::new();
    let mut drifts = Vec::new();
    for eta in [0.1, 0.05, 0.025] {
        let (mut x, mut v) = (x0.clone(), v0.clone());
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (x1, v1, _) = leapfrog_once(&p, &x, &v, &[eta, eta], no_clip());
            x = x1;
            v = v1;
            let h = hamiltonian(&p, &x, &v, 1.0).unwrap()[0];
            worst = worst.max((h - h0).abs());
        }
        drifts.push(worst);
        ratios.push(worst / (eta * eta));
    }
    assert!(drifts[0] > drifts[1] && drifts[1] > drifts[2], "{drifts:?}");
    for r in &ratios {
        assert!(*r < 1.0, "drift constant {r}");
    }
}

fn generalized_stack(rng: &mut Stream, d: usize, perturb: f64) -> DynamicsStack {
    let spec = DynamicsSpec {
        kind: LayerKind::Generalized,
        steps: 1,
        eta_init: 0.15,
        grad_clip: None,
        generalized_hidden: 5,
        ..DynamicsSpec::default()
    };
    let mut stack = DynamicsStack::new(spec, d, 1.0, rng).unwrap();
    if perturb > 0.0 {
        for (name, value) in stack.params_mut().names().to_vec().iter().zip(0..) {
            if name == "log_eta" {
                continue;
            }
            let m = &mut stack.params_mut().values_mut()[value];
            m.mapv_inplace(|a| a + perturb * (rng.uniform() - 0.5));
        }
    }
    stack
}

fn generalized_once(p: &Potential, stack: &DynamicsStack, x: &Mat, v: &Mat) -> (Mat, Mat, Mat) {
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let field = Field::new(p, &b);
    let s = start(&mut tape, x, v);
    let sb = stack.params().bind(&mut tape, false);
    let mut rng = Stream::new(0);
    let out = stack.run(&mut tape, &sb, &field, &s, &mut rng).unwrap();
    (
        tape.value(out.state.x).clone(),
        tape.value(out.state.v).clone(),
        tape.value(out.state.log_q).clone(),
    )
}

#[test]
fn generalized_log_det_matches_finite_differences() {
    let mut rng = Stream::new(21);
    let d = 2;
    for k in 0..20 {
        let p = Potential::Mlp(MlpPotential::new(d, &[6], Activation::Tanh, &mut rng).unwrap());
        let stack = generalized_stack(&mut rng, d, 0.6);
        let z: Vec<f64> = (0..2 * d).map(|_| rng.normal()).collect();
        let map = |z: &[f64]| -> Vec<f64> {
            let (x, v) = split(z, d);
            let (x1, v1, _) = generalized_once(&p, &stack, &x, &v);
            x1.iter().chain(v1.iter()).copied().collect()
        };
        let fd = fd_jacobian(&map, &z, 1e-5).determinant().abs().ln();
        let (x, v) = split(&z, d);
        let (_, _, lq) = generalized_once(&p, &stack, &x, &v);
        let tracked = -lq[[0, 0]];
        assert!((fd - tracked).abs() < 1e-4, "case {k}: fd {fd} tracked {tracked}");
    }
}

#[test]
fn degenerate_generalized_step_is_bitwise_leapfrog() {
    let mut rng = Stream::new(22);
    let p = Potential::Mlp(MlpPotential::new(3, &[8], Activation::Softplus, &mut rng).unwrap());
    let stack = generalized_stack(&mut rng, 3, 0.0);
    let x = rng.normal_matrix(6, 3);
    let v = rng.normal_matrix(6, 3);
    let (gx, gv, glq) = generalized_once(&p, &stack, &x, &v);
    let (lx, lv, _) = leapfrog_once(&p, &x, &v, &[0.15; 3], no_clip());
    assert_eq!(gx, lx);
    assert_eq!(gv, lv);
    assert!(glq.iter().all(|&a| a == 0.0));
}

#[test]
fn constant_position_scale_lowers_log_q_by_c() {
    let mut rng = Stream::new(23);
    let p = Potential::Quadratic(QuadraticPotential::standard(1));
    let mut stack = generalized_stack(&mut rng, 1, 0.0);
    let c = 0.37;
    let i = stack.params().position("s_x.layer1.bias").unwrap();
    stack.params_mut().values_mut()[i].fill(c);
    let (_, _, lq) = generalized_once(&p, &stack, &array![[0.4]], &array![[-0.2]]);
    assert!((lq[[0, 0]] + c).abs() < 1e-14);
}

#[test]
fn generalized_rejects_projected_momentum() {
    let mut rng = Stream::new(24);
    let p = Potential::Quadratic(QuadraticPotential::standard(2));
    let stack = generalized_stack(&mut rng, 2, 0.0);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let field = Field::new(&p, &b);
    let s = start(&mut tape, &array![[0.0, 0.0]], &array![[0.0, 0.0, 0.0]]);
    let sb = stack.params().bind(&mut tape, false);
    let err = stack.run(&mut tape, &sb, &field, &s, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn langevin_hand_example() {
    let p = Potential::Quadratic(QuadraticPotential::standard(1));
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let field = Field::new(&p, &b);
    let s = start(&mut tape, &array![[0.0]], &array![[0.0]]);
    let eta = tape.constant(array![[0.2]]);
    let xi = tape.constant(array![[1.0]]);
    let n = langevin_step(&mut tape, &field, &s, eta, &no_clip(), xi, None, false).unwrap();
    assert_eq!(tape.value(n.v)[[0, 0]], 1.0);
    assert_eq!(tape.value(n.x)[[0, 0]], 1.0);
}

#[test]
fn langevin_stack_accumulates_noise_densities() {
    let mut rng = Stream::new(31);
    let p = Potential::Mlp(MlpPotential::new(2, &[8], Activation::Tanh, &mut rng).unwrap());
    let spec = DynamicsSpec {
        kind: LayerKind::Langevin,
        steps: 4,
        ..DynamicsSpec::default()
    };
    let stack = DynamicsStack::new(spec, 2, 1.0, &mut rng).unwrap();
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let field = Field::new(&p, &b);
    let s = start(&mut tape, &rng.normal_matrix(3, 2), &rng.normal_matrix(3, 2));
    let sb = stack.params().bind(&mut tape, false);
    let mut noise_rng = Stream::new(99);
    let out = stack.run(&mut tape, &sb, &field, &s, &mut noise_rng).unwrap();

    // Replay the same noise stream: steps 1..T draw one 3×2 block each.
    let mut replay = Stream::new(99);
    let mut expected = Array1::<f64>::zeros(3);
    for _ in 1..4 {
        let xi = replay.normal_matrix(3, 2);
        for (i, row) in xi.rows().into_iter().enumerate() {
            expected[i] += -0.5 * row.dot(&row) - (2.0 * std::f64::consts::PI).ln();
        }
    }
    let lq = tape.value(out.state.log_q);
    for i in 0..3 {
        assert!((lq[[i, 0]] - expected[i]).abs() < 1e-12);
    }
}

#[test]
fn langevin_without_noise_or_force_is_identity() {
    let p = Potential::Quadratic(QuadraticPotential::standard(2));
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let field = Field::new(&p, &b);
    let s = start(&mut tape, &array![[0.0, 0.0]], &array![[0.0, 0.0]]);
    let eta = tape.constant(array![[0.3, 0.3]]);
    let xi = tape.constant(array![[0.0, 0.0]]);
    let n = langevin_step(&mut tape, &field, &s, eta, &no_clip(), xi, None, true).unwrap();
    assert!(tape.value(n.x).iter().all(|&a| a == 0.0));
}

fn det_langevin_log_q(prec: &[f64], eta: f64, cfg: LogdetConfig) -> ade_core::Result<f64> {
    let d = prec.len();
    let p = Potential::Quadratic(QuadraticPotential::new(&vec![0.0; d], prec).unwrap());
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let field = Field::new(&p, &b);
    let s = start(&mut tape, &Array2::from_elem((1, d), 0.3), &Array2::zeros((1, d)));
    let e = tape.constant(Array2::from_elem((1, d), eta));
    let mut rng = Stream::new(4);
    let n = det_langevin_step(&mut tape, &field, &s, e, &cfg, &mut rng)?;
    Ok(tape.value(n.log_q)[[0, 0]])
}

#[test]
fn det_langevin_closed_form_quadratic() {
    let exact = (0.8f64).ln() + (0.7f64).ln();
    assert!((exact + 0.57982).abs() < 1e-5);
    let taylor1 = LogdetConfig {
        method: LogdetMethod::Taylor { order: 1 },
        probes: 1,
        design: ProbeDesign::Iid,
    };
    let lq = det_langevin_log_q(&[2.0, 3.0], 0.1, taylor1).unwrap();
    assert!((lq - 0.5).abs() < 1e-12, "log_q {lq}");
    let deep = LogdetConfig {
        method: LogdetMethod::Taylor { order: 60 },
        probes: 2,
        design: ProbeDesign::Orthogonal,
    };
    let lq = det_langevin_log_q(&[2.0, 3.0], 0.1, deep).unwrap();
    assert!((lq + exact).abs() < 1e-12, "log_q {lq}");
}

#[test]
fn det_langevin_zero_step_is_identity() {
    let lq = det_langevin_log_q(&[2.0, 3.0], 0.0, LogdetConfig::default()).unwrap();
    assert_eq!(lq, 0.0);
}

#[test]
fn det_langevin_falls_back_to_exact_determinant() {
    // ηH = diag(-2, -3): det(I + ηH) = 2.
    let lq = det_langevin_log_q(&[2.0, 3.0], 1.0, LogdetConfig::default()).unwrap();
    assert!((lq + 2f64.ln()).abs() < 1e-12, "log_q {lq}");
    let err = det_langevin_log_q(&[2.0; 5], 1.0, LogdetConfig::default()).unwrap_err();
    assert!(matches!(err, Error::SpectralBound { dim: 5, .. }));
}

#[test]
fn det_langevin_rejects_relu() {
    let mut rng = Stream::new(8);
    let p = Potential::Mlp(MlpPotential::new(2, &[4], Activation::Relu, &mut rng).unwrap());
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let field = Field::new(&p, &b);
    let s = start(&mut tape, &array![[0.0, 0.0]], &array![[0.0, 0.0]]);
    let e = tape.constant(array![[0.1, 0.1]]);
    let err = det_langevin_step(&mut tape, &field, &s, e, &LogdetConfig::default(), &mut rng).unwrap_err();
    assert!(matches!(err, Error::UnsupportedActivation("relu")));
}

#[test]
fn divergence_reports_step_index() {
    let p = Potential::Quadratic(QuadraticPotential::new(&[0.0], &[1e300]).unwrap());
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let field = Field::new(&p, &b);
    let mut s = start(&mut tape, &array![[1e10]], &array![[0.0]]);
    s.step_index = 4;
    let e = tape.constant(array![[0.5]]);
    let err = leapfrog_step(&mut tape, &field, &s, e, &no_clip()).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 4 }), "{err:?}");
}

fn random_symmetric(rng: &mut Stream, d: usize, radius: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.normal());
    let q = a.qr().q();
    let eig = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(d, |_, _| rng.uniform_in(-radius, radius)));
    &q * eig * q.transpose()
}

fn exact_logdet(c: &DMatrix<f64>) -> f64 {
    c.clone().symmetric_eigen().eigenvalues.iter().map(|l| (1.0 - l).ln()).sum()
}

fn apply_of(c: &DMatrix<f64>) -> impl Fn(&Array1<f64>) -> Array1<f64> + '_ {
    move |z: &Array1<f64>| {
        let zv = nalgebra::DVector::from_iterator(z.len(), z.iter().copied());
        Array1::from_iter((c * zv).iter().copied())
    }
}

#[test]
fn taylor_error_shrinks_with_order() {
    let mut rng = Stream::new(41);
    for _ in 0..20 {
        let c = random_symmetric(&mut rng, 5, 0.5);
        let exact = exact_logdet(&c);
        let mut prev = f64::INFINITY;
        for k in [1, 2, 4, 6, 8, 10] {
            let est = logdet_estimate(apply_of(&c), 5, LogdetMethod::Taylor { order: k }, 64, 1).unwrap();
            let err = (est - exact).abs();
            assert!(err <= prev + 1e-12, "order {k}: {err} after {prev}");
            prev = err;
        }
        assert!(prev < 1e-2);
    }
}

#[test]
fn chebyshev_converges_on_random_symmetric() {
    let mut rng = Stream::new(42);
    for _ in 0..20 {
        let c = random_symmetric(&mut rng, 5, 0.5);
        let exact = exact_logdet(&c);
        let est = logdet_estimate(apply_of(&c), 5, LogdetMethod::Chebyshev { degree: 10, bound: None }, 64, 2).unwrap();
        assert!((est - exact).abs() < 1e-2, "{est} vs {exact}");
    }
}

#[test]
fn stack_params_round_trip_under_prefix() {
    let mut rng = Stream::new(50);
    let spec = DynamicsSpec {
        kind: LayerKind::Generalized,
        ..DynamicsSpec::default()
    };
    let stack = DynamicsStack::new(spec.clone(), 2, 1.0, &mut rng).unwrap();
    let entries = stack.params().to_entries("dynamics.");
    assert!(entries.contains_key("dynamics.log_eta"));
    assert!(entries.contains_key("dynamics.g_x.layer1.weight"));
    let mut other = DynamicsStack::new(spec, 2, 1.0, &mut Stream::new(51)).unwrap();
    other.params_mut().load_entries("dynamics.", &entries).unwrap();
    assert_eq!(other.params(), stack.params());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn leapfrog_is_reversible(x in -2.0f64..2.0, y in -2.0f64..2.0, u in -2.0f64..2.0, w in -2.0f64..2.0,
                              e1 in 0.01f64..0.3, e2 in 0.01f64..0.3, seed in 0u64..1000) {
        let mut rng = Stream::new(seed);
        let p = Potential::Mlp(MlpPotential::new(2, &[6], Activation::Softplus, &mut rng).unwrap());
        let eta = [e1, e2];
        let (x1, v1, _) = leapfrog_once(&p, &array![[x, y]], &array![[u, w]], &eta, no_clip());
        let (x2, v2, _) = leapfrog_once(&p, &x1, &(-&v1), &eta, no_clip());
        prop_assert!((x2[[0, 0]] - x).abs() < 1e-10 && (x2[[0, 1]] - y).abs() < 1e-10);
        prop_assert!((v2[[0, 0]] + u).abs() < 1e-10 && (v2[[0, 1]] + w).abs() < 1e-10);
    }

    #[test]
    fn clipped_gradient_respects_bound(x in -50.0f64..50.0, clip in 0.1f64..5.0) {
        let p = Potential::Quadratic(QuadraticPotential::standard(1));
        let control = StepControl { grad_clip: Some(clip), v_clip: None };
        let (_, v1, _) = leapfrog_once(&p, &array![[x]], &array![[0.0]], &[0.0], control);
        prop_assert_eq!(v1[[0, 0]], 0.0);
        let (_, v1, _) = leapfrog_once(&p, &array![[x]], &array![[0.0]], &[1e-3], control);
        prop_assert!(v1[[0, 0]].abs() <= 1e-3 * clip + 1e-12);
    }
}
