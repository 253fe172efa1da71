use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tonelli_torus::action::{discrete_action, evaluate, Detail, DiscreteLoop};
use tonelli_torus::fixtures::{
    catalog, counterexample_model, random_loop, reference_orbits, CounterexampleParams,
};
use tonelli_torus::flow::{integrate_with, linearized_flow_with, FlowOptions};
use tonelli_torus::model::{
    build_model, Kinetic, Lagrangian, Mechanical, TangentState, TorusConfig, TrigSeries, Vec2,
};
use tonelli_torus::search::refine_critical;
use tonelli_torus::shoot::fixed_time_minimizer;

fn shifted(torus: &TorusConfig, lp: &DiscreteLoop, u: &DVector<f64>, eps: f64) -> DiscreteLoop {
    let h = lp.h();
    let lifted = lp.lifted(torus);
    let pts = (0..h)
        .map(|i| lifted[i] + Vec2::new(u[2 * i], u[2 * i + 1]) * eps)
        .collect();
    DiscreteLoop::new(torus, pts, lp.tau + eps * u[2 * h]).unwrap()
}

fn sample_loop(model: &dyn Lagrangian, rng: &mut ChaCha8Rng, h: usize) -> DiscreteLoop {
    let torus = model.torus();
    let s = torus.min_side();
    let winding: [i64; 2] = [rng.random_range(-1..=1), 0];
    let step = 0.08 * s;
    let h = h.max((s / step * 1.5).ceil() as usize * winding[0].unsigned_abs() as usize);
    random_loop(
        &torus,
        rng,
        h,
        winding,
        step,
        (0.3 * s / TAU, 0.8 * s / TAU),
    )
    .unwrap()
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, spec) in catalog() {
        let model = build_model(&spec).unwrap();
        let torus = model.torus();
        for _ in 0..20 {
            let lp = sample_loop(model.as_ref(), &mut rng, 8);
            let k = rng.random_range(0.1..2.0);
            let g = evaluate(model.as_ref(), k, &lp, Detail::Gradient)
                .unwrap()
                .gradient
                .differential();
            let u = DVector::from_fn(g.len(), |_, _| rng.random_range(-1.0..1.0));
            let eps = 1e-5;
            let fd = (discrete_action(model.as_ref(), k, &shifted(&torus, &lp, &u, eps)).unwrap()
                - discrete_action(model.as_ref(), k, &shifted(&torus, &lp, &u, -eps)).unwrap())
                / (2.0 * eps);
            let an = g.dot(&u);
            let scale = g.norm() * u.norm();
            assert!(
                (fd - an).abs() <= 1e-6 * scale.max(1.0),
                "{name}: fd {fd} analytic {an}"
            );
        }
    }
}

fn fd_hessian(model: &dyn Lagrangian, k: f64, lp: &DiscreteLoop) -> DMatrix<f64> {
    let torus = model.torus();
    let n = 2 * lp.h() + 1;
    let eps = 1e-6;
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut u = DVector::zeros(n);
        u[j] = 1.0;
        let gp = evaluate(model, k, &shifted(&torus, lp, &u, eps), Detail::Gradient).unwrap();
        let gm = evaluate(model, k, &shifted(&torus, lp, &u, -eps), Detail::Gradient).unwrap();
        out.set_column(
            j,
            &((gp.gradient.differential() - gm.gradient.differential()) / (2.0 * eps)),
        );
    }
    out
}

fn check_hessian(model: &dyn Lagrangian, k: f64, lp: &DiscreteLoop) {
    let eval = evaluate(model, k, lp, Detail::Hessian).unwrap();
    let an = eval.hessian.unwrap();
    assert!(eval.asymmetry < 1e-9, "asymmetry {}", eval.asymmetry);
    let fd = fd_hessian(model, k, lp);
    let err = (&an - &fd).abs().max();
    assert!(err < 1e-4, "{}: hessian error {err}", model.name());
}

#[test]
fn hessian_matches_fd_at_critical_points() {
    let flat = Kinetic::new(TorusConfig::square(1.0).unwrap());
    let h = 8;
    let tau = 1.0 / h as f64;
    let geodesic = DiscreteLoop::from_curve(&flat.torus, h, tau, |s| Vec2::new(s, 0.3)).unwrap();
    check_hessian(&flat, 0.5, &geodesic);

    let params = CounterexampleParams::default();
    let model = counterexample_model(&params).unwrap();
    for orbit in reference_orbits(&params, 0.25).unwrap() {
        let rec =
            refine_critical(&model, 0.25, &orbit.discrete_loop(&params, 16).unwrap()).unwrap();
        check_hessian(&model, 0.25, &rec.lp);
    }
}

#[test]
fn hessian_matches_fd_off_critical_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (_, spec) in catalog() {
        let model = build_model(&spec).unwrap();
        let lp = sample_loop(model.as_ref(), &mut rng, 6);
        check_hessian(model.as_ref(), 0.7, &lp);
    }
}

#[test]
fn segment_derivatives_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (name, spec) in catalog() {
        let model = build_model(&spec).unwrap();
        let s = model.torus().min_side();
        for _ in 0..5 {
            let q0 = Vec2::new(rng.random::<f64>() * s, rng.random::<f64>() * s);
            let d = Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 0.06 * s;
            let tau = rng.random_range(0.3..0.8) * s / TAU;
            let seg = fixed_time_minimizer(model.as_ref(), q0, q0 + d, tau).unwrap();
            let eps = 1e-6;
            let solve =
                |a: Vec2, b: Vec2, t: f64| fixed_time_minimizer(model.as_ref(), a, b, t).unwrap();
            let tol = 1e-5 * (1.0 + seg.nu_minus.norm());
            for axis in 0..2 {
                let e = if axis == 0 { Vec2::x() } else { Vec2::y() };
                let p = solve(q0 + e * eps, q0 + d, tau);
                let m = solve(q0 - e * eps, q0 + d, tau);
                let col = (p.nu_minus - m.nu_minus) / (2.0 * eps);
                assert!(
                    (col - seg.derivatives.dnu_minus_dq0.column(axis)).norm() < tol,
                    "{name}"
                );
                let col = (p.nu_plus - m.nu_plus) / (2.0 * eps);
                assert!(
                    (col - seg.derivatives.dnu_plus_dq0.column(axis)).norm() < tol,
                    "{name}"
                );
                let p = solve(q0, q0 + d + e * eps, tau);
                let m = solve(q0, q0 + d - e * eps, tau);
                let col = (p.nu_minus - m.nu_minus) / (2.0 * eps);
                assert!(
                    (col - seg.derivatives.dnu_minus_dq1.column(axis)).norm() < tol,
                    "{name}"
                );
                let col = (p.nu_plus - m.nu_plus) / (2.0 * eps);
                assert!(
                    (col - seg.derivatives.dnu_plus_dq1.column(axis)).norm() < tol,
                    "{name}"
                );
            }
            let p = solve(q0, q0 + d, tau + eps);
            let m = solve(q0, q0 + d, tau - eps);
            assert!(
                ((p.nu_minus - m.nu_minus) / (2.0 * eps) - seg.derivatives.dnu_minus_dtau).norm()
                    < tol
            );
            assert!(
                ((p.nu_plus - m.nu_plus) / (2.0 * eps) - seg.derivatives.dnu_plus_dtau).norm()
                    < tol
            );
        }
    }
}

#[test]
fn propagator_matches_fd_of_flow() {
    let opts = FlowOptions::tight();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (name, spec) in catalog() {
        let model = build_model(&spec).unwrap();
        let s0 = TangentState {
            q: Vec2::new(rng.random::<f64>(), rng.random::<f64>()),
            v: Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        };
        let t = 1.3;
        let p = linearized_flow_with(model.as_ref(), &s0, t, &opts).unwrap();
        let end = |s: TangentState| {
            let tr = integrate_with(model.as_ref(), &s, t, &opts).unwrap();
            let e = tr.end();
            [tr.end_lifted.x, tr.end_lifted.y, e.v.x, e.v.y]
        };
        let eps = 1e-6;
        for j in 0..4 {
            let mut a = s0;
            let mut b = s0;
            match j {
                0 | 1 => {
                    a.q[j] += eps;
                    b.q[j] -= eps;
                }
                _ => {
                    a.v[j - 2] += eps;
                    b.v[j - 2] -= eps;
                }
            }
            let (ea, eb) = (end(a), end(b));
            for i in 0..4 {
                let fd = (ea[i] - eb[i]) / (2.0 * eps);
                assert!(
                    (fd - p.matrix[(i, j)]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "{name} ({i},{j})"
                );
            }
        }
    }
}

/// Minimizes the trapezoid-rule action of a 64-node polygon from `q0` to `q1`
/// by Newton's method on the interior nodes.
fn brute_force_action(model: &dyn Lagrangian, q0: Vec2, q1: Vec2, tau: f64) -> f64 {
    let n = 64;
    let dt = tau / n as f64;
    let pot = |q: Vec2| -model.jet(q, Vec2::zeros()).l;
    let mut x: Vec<Vec2> = (0..=n)
        .map(|i| q0 + (q1 - q0) * (i as f64 / n as f64))
        .collect();
    let action = |x: &[Vec2]| -> f64 {
        (0..n)
            .map(|i| {
                let v = (x[i + 1] - x[i]) / dt;
                (0.5 * v.norm_squared() - 0.5 * (pot(x[i]) + pot(x[i + 1]))) * dt
            })
            .sum()
    };
    for _ in 0..20 {
        let m = 2 * (n - 1);
        let mut g = DVector::zeros(m);
        let mut hs = DMatrix::zeros(m, m);
        for i in 1..n {
            let jet = model.jet(x[i], Vec2::zeros());
            let grad = (2.0 * x[i] - x[i - 1] - x[i + 1]) / dt + jet.lq * dt;
            let r = 2 * (i - 1);
            g[r] = grad.x;
            g[r + 1] = grad.y;
            let hess = nalgebra::Matrix2::identity() * (2.0 / dt) + jet.lqq * dt;
            hs.fixed_view_mut::<2, 2>(r, r).copy_from(&hess);
            if i > 1 {
                hs.fixed_view_mut::<2, 2>(r, r - 2)
                    .copy_from(&(-nalgebra::Matrix2::identity() / dt));
                hs.fixed_view_mut::<2, 2>(r - 2, r)
                    .copy_from(&(-nalgebra::Matrix2::identity() / dt));
            }
        }
        let step = hs.lu().solve(&g).unwrap();
        for i in 1..n {
            x[i] -= Vec2::new(step[2 * (i - 1)], step[2 * (i - 1) + 1]);
        }
        if step.norm() < 1e-13 {
            break;
        }
    }
    action(&x)
}

#[test]
fn mechanical_segment_matches_brute_force() {
    let torus = TorusConfig::square(TAU).unwrap();
    let model = Mechanical::new(torus, TrigSeries::single(0.7, [1, 1], 0.3));
    for (q0, d, tau) in [
        (Vec2::new(0.3, 1.1), Vec2::new(0.4, -0.2), 0.5),
        (Vec2::new(2.0, PI), Vec2::new(-0.3, 0.5), 0.8),
        (Vec2::new(5.0, 0.1), Vec2::new(0.0, 0.6), 0.3),
    ] {
        let seg = fixed_time_minimizer(&model, q0, q0 + d, tau).unwrap();
        let brute = brute_force_action(&model, q0, q0 + d, tau);
        assert!(
            (seg.action - brute).abs() < 1e-3 * (1.0 + seg.action.abs()),
            "{} vs {brute}",
            seg.action
        );
    }
}
