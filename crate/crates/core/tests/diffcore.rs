//! Finite-difference oracles for the differentiation engine.

use ade_core::diffcore::{
    eval_f, grad_params, grad_x, hessian_diag, Activation, Mat, MlpPotential, Potential,
    QuadraticPotential, Tape,
};
use ade_core::rng::Stream;
use ndarray::{array, Array2};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_mlp(rng: &mut Stream, d: usize, act: Activation) -> Potential {
    Potential::Mlp(MlpPotential::new(d, &[16, 16], act, rng).unwrap())
}

fn central_grad_x(p: &Potential, x: &Mat, h: f64) -> Mat {
    let mut g = Array2::zeros(x.raw_dim());
    for j in 0..x.ncols() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.column_mut(j).mapv_inplace(|a| a + h);
        xm.column_mut(j).mapv_inplace(|a| a - h);
        let fp = p.values(&xp).unwrap();
        let fm = p.values(&xm).unwrap();
        for i in 0..x.nrows() {
            g[[i, j]] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    g
}

#[test]
fn grad_x_matches_central_differences_on_100_pairs() {
    let mut rng = Stream::new(11);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let act = if k % 2 == 0 { Activation::Softplus } else { Activation::Tanh };
        let d = 1 + k % 4;
        let p = random_mlp(&mut rng, d, act);
        let x = rng.normal_matrix(1, d);
        let g = p.gradients(&x).unwrap();
        let fd = central_grad_x(&p, &x, 1e-4);
        for (a, b) in g.iter().zip(fd.iter()) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn gradient_norm_loss_differentiates_through_grad_x() {
    let mut rng = Stream::new(12);
    let p = Potential::Mlp(MlpPotential::new(2, &[6], Activation::Softplus, &mut rng).unwrap());
    let x = rng.normal_matrix(3, 2);

    let loss_of = |p: &Potential| -> f64 {
        let g = p.gradients(&x).unwrap();
        g.iter().map(|a| a * a).sum()
    };

    let mut tape = Tape::new();
    let b = p.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let g = grad_x(&mut tape, &p, &b, xv).unwrap();
    let sq = tape.square(g);
    let loss = tape.sum(sq);
    let grads = grad_params(&mut tape, loss, &b).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|m| m.iter().copied()).collect();

    let flat = p.params().flatten();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut plus = p.clone();
        let mut f = flat.clone();
        f[i] += h;
        plus.params_mut().assign_flat(&f);
        let mut minus = p.clone();
        f[i] -= 2.0 * h;
        minus.params_mut().assign_flat(&f);
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        if fd.abs() > 1e-8 || analytic[i].abs() > 1e-8 {
            worst = worst.max(rel_err(analytic[i], fd));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn value_at_gradient_step_matches_analytic_and_differences() {
    let p = Potential::Quadratic(QuadraticPotential::new(&[0.0], &[1.0]).unwrap());
    let x = array![[1.0]];
    let run = |p: &Potential| -> (f64, f64) {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let g = grad_x(&mut tape, p, &b, xv).unwrap();
        let step = tape.scale(g, 0.1);
        let moved = tape.add(xv, step);
        let f = eval_f(&mut tape, p, &b, moved).unwrap();
        let s = tape.sum(f);
        let grads = grad_params(&mut tape, s, &b).unwrap();
        (tape.scalar(s), grads[0][[0, 0]])
    };
    let (value, dmu) = run(&p);
    assert!((value + 0.405).abs() < 1e-12);
    // f(0.9x + 0.1μ) = -0.405 (x - μ)², so d/dμ = 0.81 (x - μ).
    assert!((dmu - 0.81).abs() < 1e-12);

    let h = 1e-4;
    let shifted = |mu: f64| {
        let q = Potential::Quadratic(QuadraticPotential::new(&[mu], &[1.0]).unwrap());
        run(&q).0
    };
    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
    assert!(rel_err(dmu, fd) < 1e-8);
}

#[test]
fn hessian_diag_matches_second_differences() {
    let mut rng = Stream::new(13);
    for _ in 0..10 {
        let p = random_mlp(&mut rng, 2, Activation::Tanh);
        let x = rng.normal_matrix(2, 2);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let h = hessian_diag(&mut tape, &p, &b, xv).unwrap();
        let h = tape.value(h).clone();
        let step = 1e-3;
        let f0 = p.values(&x).unwrap();
        for j in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.column_mut(j).mapv_inplace(|a| a + step);
            xm.column_mut(j).mapv_inplace(|a| a - step);
            let fp = p.values(&xp).unwrap();
            let fm = p.values(&xm).unwrap();
            for i in 0..2 {
                let fd = (fp[i] - 2.0 * f0[i] + fm[i]) / (step * step);
                let err = (h[[i, j]] - fd).abs() / h[[i, j]].abs().max(1e-2);
                assert!(err < 1e-3, "hessian {} vs {}", h[[i, j]], fd);
            }
        }
    }
}

#[test]
fn identical_seeds_give_identical_gradients() {
    let run = || {
        let mut rng = Stream::new(99);
        let p = random_mlp(&mut rng, 3, Activation::Softplus);
        let x = rng.normal_matrix(5, 3);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true);
        let xv = tape.constant(x);
        let g = grad_x(&mut tape, &p, &b, xv).unwrap();
        let sq = tape.square(g);
        let loss = tape.sum(sq);
        let grads = grad_params(&mut tape, loss, &b).unwrap();
        (tape.len(), grads)
    };
    let (n1, g1) = run();
    let (n2, g2) = run();
    assert_eq!(n1, n2);
    for (a, b) in g1.iter().zip(g2.iter()) {
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
