//! Objective and gradient checks against finite differences, closed forms
//! and degenerate configurations.

use ade_core::diffcore::{Activation, Mat, MlpPotential, Potential, QuadraticPotential, Tape};
use ade_core::dynamics::{DynamicsSpec, DynamicsStack, LayerKind};
use ade_core::estimators::{
    ade_grad_f, ade_grad_sampler, ade_loss, cd_grad, mpf_loss, nce_loss, nce_objective, pcd_grad, sm_loss,
    AdeBindings, AdeConfig, CdConfig, GradientMode, MpfConfig, NoiseModel, ReplayBuffer, Sampler,
};
use ade_core::init::{DiagonalGaussianInit, EmpiricalInit, EmpiricalMode, InitModel, Initializer};
use ade_core::rng::Stream;
use ndarray::{array, Array2};

fn mlp(d: usize, hidden: &[usize], act: Activation, seed: u64) -> Potential {
    Potential::Mlp(MlpPotential::new(d, hidden, act, &mut Stream::new(seed)).unwrap())
}

fn dynamics(kind: LayerKind, steps: usize, d: usize, eta: f64) -> DynamicsStack {
    let spec = DynamicsSpec {
        kind,
        steps,
        eta_init: eta,
        grad_clip: None,
        ..DynamicsSpec::default()
    };
    DynamicsStack::new(spec, d, 1.0, &mut Stream::new(99)).unwrap()
}

fn gaussian_sampler(mean: &[f64], std: &[f64], dyn_: DynamicsStack) -> Sampler {
    Sampler {
        init: Initializer::new(InitModel::Gaussian(DiagonalGaussianInit::new(mean, std).unwrap()), 1.0),
        dynamics: dyn_,
    }
}

fn loss_value(p: &Potential, s: &Sampler, data: &Mat, cfg: &AdeConfig, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let b = s.bind(&mut tape, p, false);
    let t = ade_loss(&mut tape, data, p, s, &b, cfg, &mut Stream::new(seed)).unwrap();
    tape.scalar(t.loss)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `f` over every entry of `params`.
fn fd<F: FnMut(&[Mat]) -> f64>(params: &[Mat], h: f64, mut f: F) -> Vec<Mat> {
    let mut out = Vec::new();
    for i in 0..params.len() {
        let mut g = Array2::zeros(params[i].raw_dim());
        for idx in 0..params[i].len() {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            plus[i].as_slice_mut().unwrap()[idx] += h;
            minus[i].as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

fn assert_close(analytic: &[Mat], numeric: &[Mat], tol: f64) {
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.iter().zip(n.iter()) {
            assert!(rel_err(*x, *y) < tol || (x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }
}

#[test]
fn bptt_potential_gradient_matches_finite_differences() {
    let data = Stream::new(1).normal_matrix(16, 2) * 0.8 + 0.3;
    let p = Potential::Quadratic(QuadraticPotential::new(&[0.2, -0.1], &[1.5, 0.7]).unwrap());
    let s = gaussian_sampler(&[0.1, 0.0], &[1.0, 1.2], dynamics(LayerKind::Leapfrog, 2, 2, 0.3));
    let cfg = AdeConfig::default();
    let mut tape = Tape::new();
    let b = s.bind(&mut tape, &p, true);
    let t = ade_loss(&mut tape, &data, &p, &s, &b, &cfg, &mut Stream::new(5)).unwrap();
    let g = ade_grad_f(&mut tape, &t, &b).unwrap();
    let num = fd(p.params().values(), 1e-5, |vals| {
        let mut q = p.clone();
        q.params_mut().values_mut().clone_from_slice(vals);
        loss_value(&q, &s, &data, &cfg, 5)
    });
    assert_close(&g, &num, 1e-4);
}

#[test]
fn step_size_and_init_gradients_match_finite_differences() {
    let data = Stream::new(2).normal_matrix(8, 2);
    let p = mlp(2, &[6], Activation::Softplus, 3);
    for kind in [LayerKind::Leapfrog, LayerKind::Langevin] {
        let s = gaussian_sampler(&[0.3, -0.2], &[0.9, 1.1], dynamics(kind, 3, 2, 0.2));
        let cfg = AdeConfig::default();
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, &p, true);
        let t = ade_loss(&mut tape, &data, &p, &s, &b, &cfg, &mut Stream::new(6)).unwrap();
        let g = ade_grad_sampler(&mut tape, &t, &b).unwrap();
        let mut theta: Vec<Mat> = s.init.params().values().to_vec();
        theta.extend(s.dynamics.params().values().iter().cloned());
        let num = fd(&theta, 1e-5, |vals| {
            let mut q = s.clone();
            q.init.params_mut().values_mut().clone_from_slice(&vals[..2]);
            q.dynamics.params_mut().values_mut().clone_from_slice(&vals[2..]);
            loss_value(&p, &q, &data, &cfg, 6)
        });
        assert_close(&g, &num, 1e-3);
    }
}

#[test]
fn mode_difference_is_the_through_sampler_term() {
    let data = Stream::new(3).normal_matrix(10, 2);
    let p = mlp(2, &[5], Activation::Tanh, 4);
    let s = gaussian_sampler(&[0.0, 0.0], &[1.0, 1.0], dynamics(LayerKind::Leapfrog, 3, 2, 0.25));
    let grads = |mode| {
        let cfg = AdeConfig {
            gradient_mode: mode,
            ..AdeConfig::default()
        };
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, &p, true);
        let t = ade_loss(&mut tape, &data, &p, &s, &b, &cfg, &mut Stream::new(7)).unwrap();
        ade_grad_f(&mut tape, &t, &b).unwrap()
    };
    let bptt = grads(GradientMode::Bptt);
    let trunc = grads(GradientMode::Truncated);
    // Only the dynamics see trainable potential parameters here.
    let mut tape = Tape::new();
    let b0 = s.bind(&mut tape, &p, false);
    let b = AdeBindings {
        f_dyn: p.bind(&mut tape, true),
        ..b0
    };
    let t = ade_loss(&mut tape, &data, &p, &s, &b, &AdeConfig::default(), &mut Stream::new(7)).unwrap();
    let third = b.f_dyn.gradients(&mut tape, t.loss).unwrap();
    let mut nonzero = false;
    for ((a, c), e) in bptt.iter().zip(&trunc).zip(&third) {
        for ((x, y), z) in a.iter().zip(c.iter()).zip(e.iter()) {
            assert!((x - y - z).abs() < 1e-12, "{} vs {z}", x - y);
            nonzero |= z.abs() > 1e-6;
        }
    }
    assert!(nonzero);
}

#[test]
fn zero_steps_make_modes_coincide_exactly() {
    let data = Stream::new(4).normal_matrix(12, 2);
    let p = mlp(2, &[4], Activation::Relu, 5);
    let s = gaussian_sampler(&[0.0, 0.0], &[1.0, 1.0], dynamics(LayerKind::Leapfrog, 0, 2, 0.1));
    let g = |mode| {
        let cfg = AdeConfig {
            gradient_mode: mode,
            ..AdeConfig::default()
        };
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, &p, true);
        let t = ade_loss(&mut tape, &data, &p, &s, &b, &cfg, &mut Stream::new(8)).unwrap();
        ade_grad_f(&mut tape, &t, &b).unwrap()
    };
    assert_eq!(g(GradientMode::Bptt), g(GradientMode::Truncated));
}

#[test]
fn zero_steps_reduce_to_the_plain_dual_objective() {
    let data = Stream::new(5).normal_matrix(20, 2);
    let p = Potential::Quadratic(QuadraticPotential::new(&[0.5, 0.0], &[1.0, 2.0]).unwrap());
    let g = DiagonalGaussianInit::new(&[0.1, 0.2], &[1.3, 0.6]).unwrap();
    let s = gaussian_sampler(&[0.1, 0.2], &[1.3, 0.6], dynamics(LayerKind::Leapfrog, 0, 2, 0.1));
    let cfg = AdeConfig::default();
    let got = loss_value(&p, &s, &data, &cfg, 9);
    let (x, v, _) = s.init.sample_values(20, &mut Stream::new(9)).unwrap();
    let fd_ = p.values(&data).unwrap().mean().unwrap();
    let fx = p.values(&x).unwrap().mean().unwrap();
    let kin = v.mapv(|a| a * a).sum() / 20.0;
    // Momentum terms of q⁰ cancel in the entropy difference.
    let expected = fd_ - fx + 0.5 * kin - g.entropy();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn matched_gaussian_has_no_mean_gradient() {
    let (mu, sd) = (0.7, 1.4);
    let mut rng = Stream::new(6);
    let data = rng.normal_matrix(100_000, 1) * sd + mu;
    let p = Potential::Quadratic(QuadraticPotential::new(&[mu], &[1.0 / (sd * sd)]).unwrap());
    let s = gaussian_sampler(&[mu], &[sd], dynamics(LayerKind::Leapfrog, 0, 1, 0.1));
    let mut tape = Tape::new();
    let b = s.bind(&mut tape, &p, true);
    let t = ade_loss(&mut tape, &data, &p, &s, &b, &AdeConfig::default(), &mut rng).unwrap();
    let g = ade_grad_f(&mut tape, &t, &b).unwrap();
    // d f / d mu = prec (x - mu): a difference of two means with sd prec*sd each.
    let se = (2.0 / 100_000.0f64).sqrt() / sd;
    assert!(g[0][[0, 0]].abs() < 4.0 * se, "{}", g[0][[0, 0]]);
}

#[test]
fn frozen_init_with_leapfrog_exposes_only_step_sizes() {
    let data = array![[0.0, 1.0], [1.0, 0.0]];
    let s = Sampler {
        init: Initializer::new(InitModel::Empirical(EmpiricalInit::new(data.clone(), EmpiricalMode::Minibatch).unwrap()), 1.0),
        dynamics: dynamics(LayerKind::Leapfrog, 2, 2, 0.1),
    };
    assert!(s.init.params().is_empty());
    assert_eq!(s.dynamics.params().names(), ["log_eta"]);
    let p = mlp(2, &[3], Activation::Tanh, 1);
    let mut tape = Tape::new();
    let b = s.bind(&mut tape, &p, true);
    let t = ade_loss(&mut tape, &data, &p, &s, &b, &AdeConfig::default(), &mut Stream::new(1)).unwrap();
    assert_eq!(ade_grad_sampler(&mut tape, &t, &b).unwrap().len(), 1);
}

fn cd_equivalence_case(seed: u64, mh_free_steps: usize) -> f64 {
    let mut rng = Stream::new(seed);
    let data = rng.normal_matrix(32, 2) * 1.5;
    let p = mlp(2, &[16, 16], Activation::Relu, seed + 1);
    let stack = DynamicsStack::new(
        DynamicsSpec {
            kind: LayerKind::Leapfrog,
            steps: mh_free_steps,
            eta_init: 0.1,
            learn_eta: false,
            ..DynamicsSpec::default()
        },
        2,
        1.0,
        &mut Stream::new(0),
    )
    .unwrap();
    let eta = stack.eta()[0];
    let s = Sampler {
        init: Initializer::new(InitModel::Empirical(EmpiricalInit::new(data.clone(), EmpiricalMode::Minibatch).unwrap()), 1.0),
        dynamics: stack,
    };
    let cfg = AdeConfig {
        gradient_mode: GradientMode::Truncated,
        ..AdeConfig::default()
    };
    let mut tape = Tape::new();
    let b = s.bind(&mut tape, &p, true);
    let t = ade_loss(&mut tape, &data, &p, &s, &b, &cfg, &mut Stream::new(seed + 2)).unwrap();
    let ga = ade_grad_f(&mut tape, &t, &b).unwrap();

    let cd = CdConfig {
        steps: mh_free_steps,
        step_size: eta,
        ..CdConfig::default()
    };
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, true);
    let tr = cd_grad(&mut tape, &data, &p, &bound, &cd, eta, &mut Stream::new(seed + 2)).unwrap();
    let gc = bound.gradients(&mut tape, tr.objective).unwrap();
    ga.iter()
        .zip(&gc)
        .flat_map(|(a, c)| a.iter().zip(c.iter()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn truncated_ade_with_empirical_init_is_cd() {
    for seed in 0..5 {
        for k in [1, 5, 15] {
            let diff = cd_equivalence_case(seed * 10, k);
            assert!(diff <= 1e-12, "seed {seed} k {k}: {diff}");
        }
    }
}

#[test]
fn cd_with_zero_step_size_has_zero_gradient() {
    let data = Stream::new(7).normal_matrix(20, 2);
    let p = mlp(2, &[8], Activation::Relu, 2);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, true);
    let cfg = CdConfig::default();
    let t = cd_grad(&mut tape, &data, &p, &bound, &cfg, 0.0, &mut Stream::new(1)).unwrap();
    assert_eq!(t.negatives, data);
    for g in bound.gradients(&mut tape, t.objective).unwrap() {
        assert!(g.iter().all(|a| a.abs() < 1e-14));
    }
}

#[test]
fn cd_mean_gradient_points_toward_data() {
    // Model N(0, 1); data centred at 2. The negatives stay near the model.
    let data = Stream::new(8).normal_matrix(500, 1) + 2.0;
    let p = Potential::Quadratic(QuadraticPotential::standard(1));
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, true);
    let cfg = CdConfig {
        steps: 30,
        step_size: 0.3,
        mh: true,
        ..CdConfig::default()
    };
    let t = cd_grad(&mut tape, &data, &p, &bound, &cfg, 0.3, &mut Stream::new(2)).unwrap();
    assert!(t.acceptance.unwrap() > 0.5);
    let g = bound.gradients(&mut tape, t.objective).unwrap();
    // Ascending moves the model mean toward the data mean.
    assert!(g[0][[0, 0]] > 0.0);
}

#[test]
fn pcd_from_data_buffer_with_zero_step_is_cd() {
    let data = Stream::new(9).normal_matrix(24, 2);
    let p = mlp(2, &[8], Activation::Tanh, 3);
    let cfg = CdConfig::default();
    let mut buf = ReplayBuffer::seeded(24, &data, &mut Stream::new(0));
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, true);
    let t = pcd_grad(&mut tape, &data, &p, &bound, &cfg, 0.0, &mut buf, &mut Stream::new(3)).unwrap();
    let gp = bound.gradients(&mut tape, t.objective).unwrap();
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, true);
    let t = cd_grad(&mut tape, &data, &p, &bound, &cfg, 0.0, &mut Stream::new(3)).unwrap();
    let gc = bound.gradients(&mut tape, t.objective).unwrap();
    for (a, c) in gp.iter().zip(&gc) {
        for (x, y) in a.iter().zip(c.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn buffer_never_exceeds_capacity() {
    let mut rng = Stream::new(10);
    let mut buf = ReplayBuffer::new(50);
    for _ in 0..10_000 {
        buf.push(&rng.normal_matrix(3, 2), &mut rng);
        assert!(buf.len() <= buf.capacity());
    }
    assert_eq!(buf.len(), 50);
    let slots = buf.draw_slots(50, &mut rng).unwrap();
    let mut sorted = slots.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), 50);
    assert!(buf.draw_slots(51, &mut rng).is_err());
}

#[test]
fn score_matching_closed_forms() {
    let data = Stream::new(11).normal_matrix(100_000, 2);
    let p = Potential::Quadratic(QuadraticPotential::standard(2));
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let l = sm_loss(&mut tape, &data, &p, &b).unwrap();
    assert!((tape.scalar(l) - 1.0).abs() < 0.02, "{}", tape.scalar(l));

    let mut lin = mlp(3, &[], Activation::Softplus, 4);
    let w = lin.params().values()[0].clone();
    let x = Stream::new(12).normal_matrix(40, 3) * 3.0;
    let mut tape = Tape::new();
    let b = lin.bind(&mut tape, false);
    let l = sm_loss(&mut tape, &x, &lin, &b).unwrap();
    let expected = -0.5 * w.iter().map(|a| a * a).sum::<f64>();
    assert!((tape.scalar(l) - expected).abs() < 1e-12);

    lin.params_mut().values_mut()[0].fill(0.0);
    let mut tape = Tape::new();
    let b = lin.bind(&mut tape, false);
    let l = sm_loss(&mut tape, &x, &lin, &b).unwrap();
    assert_eq!(tape.scalar(l), 0.0);

    let relu = mlp(2, &[4], Activation::Relu, 5);
    let mut tape = Tape::new();
    let b = relu.bind(&mut tape, false);
    assert!(sm_loss(&mut tape, &data, &relu, &b).is_err());
}

#[test]
fn score_matching_parameter_gradient_matches_finite_differences() {
    let data = Stream::new(13).normal_matrix(12, 2);
    let p = mlp(2, &[5], Activation::Softplus, 6);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, true);
    let l = sm_loss(&mut tape, &data, &p, &b).unwrap();
    let g = b.gradients(&mut tape, l).unwrap();
    let num = fd(p.params().values(), 1e-5, |vals| {
        let mut q = p.clone();
        q.params_mut().values_mut().clone_from_slice(vals);
        let mut t = Tape::new();
        let b = q.bind(&mut t, false);
        let l = sm_loss(&mut t, &data, &q, &b).unwrap();
        t.scalar(l)
    });
    assert_close(&g, &num, 1e-4);
}

#[test]
fn nce_closed_forms_and_limits() {
    let mut tape = Tape::new();
    let lp = tape.constant(array![[-1.3], [0.2], [-40.0]]);
    let l = nce_objective(&mut tape, lp, lp, lp, lp);
    assert!((tape.scalar(l) + 2.0 * 2f64.ln()).abs() < 1e-12);

    let data = Stream::new(14).normal_matrix(50, 2);
    let noise = NoiseModel::fit(&data, 1.0).unwrap();
    let mut p = mlp(2, &[4], Activation::Tanh, 7);
    for v in p.params_mut().values_mut() {
        v.fill(0.0);
    }
    p.params_mut().values_mut()[3].fill(-1e4);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let l = nce_loss(&mut tape, &data, &p, &b, &noise, &mut Stream::new(1)).unwrap();
    assert!(tape.scalar(l) < -10.0 && tape.scalar(l).is_finite());
}

#[test]
fn nce_gradient_matches_finite_differences_and_reweighted_form() {
    let data = Stream::new(15).normal_matrix(30, 2) * 0.7 + 0.4;
    let noise = NoiseModel::fit(&data, 1.2).unwrap();
    let p = mlp(2, &[5], Activation::Tanh, 8);
    let eval = |q: &Potential| {
        let mut t = Tape::new();
        let b = q.bind(&mut t, false);
        let l = nce_loss(&mut t, &data, q, &b, &noise, &mut Stream::new(2)).unwrap();
        t.scalar(l)
    };
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, true);
    let l = nce_loss(&mut tape, &data, &p, &b, &noise, &mut Stream::new(2)).unwrap();
    let g = b.gradients(&mut tape, l).unwrap();
    let num = fd(p.params().values(), 1e-5, |vals| {
        let mut q = p.clone();
        q.params_mut().values_mut().clone_from_slice(vals);
        eval(&q)
    });
    assert_close(&g, &num, 1e-4);

    // Reweighted form for the output bias: E_D[1 − h] − E_n[h].
    let y = noise.sample(30, &mut Stream::new(2));
    let h = |x: &Mat| {
        let f = p.values(x).unwrap();
        let lp = noise.log_density(x);
        f.iter().zip(lp.iter()).map(|(f, l)| 1.0 / (1.0 + (l - f).exp())).collect::<Vec<_>>()
    };
    let hd = h(&data);
    let hn = h(&y);
    let expected = hd.iter().map(|a| 1.0 - a).sum::<f64>() / 30.0 - hn.iter().sum::<f64>() / 30.0;
    assert!((g[3][[0, 0]] - expected).abs() < 1e-12);
}

#[test]
fn mpf_degenerate_cases_and_gradient() {
    let data = Stream::new(16).normal_matrix(20, 2);
    let mut c = mlp(2, &[4], Activation::Tanh, 9);
    for v in c.params_mut().values_mut() {
        v.fill(0.0);
    }
    c.params_mut().values_mut()[3].fill(2.5);
    let run = |p: &Potential, cfg: &MpfConfig| {
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let l = mpf_loss(&mut t, &data, p, &b, cfg, &mut Stream::new(3)).unwrap();
        t.scalar(l)
    };
    assert_eq!(run(&c, &MpfConfig::default()), -1.0);
    let p = mlp(2, &[5], Activation::Softplus, 10);
    let frozen = MpfConfig {
        step_size: 0.0,
        ..MpfConfig::default()
    };
    assert_eq!(run(&p, &frozen), -1.0);

    let cfg = MpfConfig {
        step_size: 0.4,
        ..MpfConfig::default()
    };
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, true);
    let l = mpf_loss(&mut tape, &data, &p, &b, &cfg, &mut Stream::new(3)).unwrap();
    let g = b.gradients(&mut tape, l).unwrap();
    let num = fd(p.params().values(), 1e-5, |vals| {
        let mut q = p.clone();
        q.params_mut().values_mut().clone_from_slice(vals);
        run(&q, &cfg)
    });
    assert_close(&g, &num, 1e-3);
}

#[test]
fn mpf_exponent_is_clamped() {
    let data = array![[0.0], [0.1]];
    let mut p = mlp(1, &[], Activation::Tanh, 0);
    p.params_mut().values_mut()[0].fill(1e6);
    let cfg = MpfConfig {
        step_size: 0.5,
        exponent_bound: 3.0,
    };
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let l = mpf_loss(&mut tape, &data, &p, &b, &cfg, &mut Stream::new(4)).unwrap();
    assert!(tape.scalar(l) >= -(3f64.exp()) - 1e-12);
}
