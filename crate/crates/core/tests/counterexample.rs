use std::f64::consts::PI;

use tonelli_torus::action::{
    discrete_hessian, growth_witness, iterate_indices, nullity_partition, nullity_via_monodromy,
    time_shift, verify_kernel, DiscreteLoop,
};
use tonelli_torus::fixtures::{
    closed_form_propagator, counterexample_model, maslov_indices, reference_orbits,
    CounterexampleModel, CounterexampleParams, PhasePoint,
};
use tonelli_torus::flow::{integrate_with, linearized_flow_with, FlowOptions};
use tonelli_torus::mane::e0;
use tonelli_torus::model::{Kinetic, Lagrangian, TorusConfig, Vec2};
use tonelli_torus::search::{refine_critical, OrbitRecord};

const K: f64 = 0.25;

fn setup() -> (CounterexampleParams, CounterexampleModel) {
    let p = CounterexampleParams::default();
    let m = counterexample_model(&p).unwrap();
    (p, m)
}

fn critical(h: usize) -> Vec<OrbitRecord> {
    let (p, m) = setup();
    reference_orbits(&p, K)
        .unwrap()
        .iter()
        .map(|o| refine_critical(&m, K, &o.discrete_loop(&p, h).unwrap()).unwrap())
        .collect()
}

#[test]
fn integrator_follows_the_rotation() {
    let (p, m) = setup();
    let torus = m.torus();
    let z0 = PhasePoint {
        q: Vec2::new(0.3, -0.4),
        p: Vec2::new(0.2, 0.5),
    };
    let s0 = z0.tangent(&p);
    for t in [0.5, 2.0, 2.0 * PI] {
        let exact = tonelli_torus::fixtures::closed_form_flow(&p, t, &z0)
            .unwrap()
            .tangent(&p);
        let tr = integrate_with(&m, &s0, t, &FlowOptions::tight()).unwrap();
        let end = tr.end();
        assert!(torus.distance(end.q, exact.q) < 1e-9);
        assert!((end.v - exact.v).norm() < 1e-9);
        let prop = linearized_flow_with(&m, &s0, t, &FlowOptions::tight()).unwrap();
        assert!((prop.matrix - closed_form_propagator(&p, t)).abs().max() < 1e-8);
    }
}

#[test]
fn reference_orbits_are_critical_with_known_periods() {
    let recs = critical(32);
    let expected = [2.0 * PI, 2.0 * PI * 2f64.sqrt()];
    for (rec, period) in recs.iter().zip(expected) {
        assert!((rec.period - period).abs() < 1e-8 * period);
        assert!(rec.energy_error < 1e-9);
        assert!(rec.gradient_norm < 1e-8);
    }
}

#[test]
fn restricted_indices_match_maslov_indices() {
    let (p, _) = setup();
    let recs = critical(64);
    let (mg, mp) = maslov_indices(&p);
    assert_eq!((mg, mp), (2, 4));
    assert_eq!(recs[0].spectral.ind_restricted, mg);
    assert_eq!(recs[1].spectral.ind_restricted, mp);
    for r in &recs {
        assert_eq!(r.spectral.nul_restricted, 2);
        assert!(!r.is_local_min);
    }
}

#[test]
fn e0_is_closed_form() {
    let (p, m) = setup();
    assert!((e0(&m) - p.e0()).abs() < 1e-8);
}

#[test]
fn monodromy_nullity_matches_hessian_for_iterates() {
    let (_, m) = setup();
    for rec in critical(16) {
        let rows = iterate_indices(&m, K, &rec.lp, 8).unwrap();
        let gap = rows[0].nul_full as i64 - rows[0].nul_restricted as i64;
        assert!((-1..=1).contains(&gap));
        for r in &rows {
            assert_eq!(r.nul_restricted, r.nul_monodromy, "m = {}", r.m);
            assert_eq!(r.nul_restricted, 2);
            assert_eq!(r.nul_full as i64 - r.nul_restricted as i64, gap);
        }
        let report = rec.report.as_ref().unwrap();
        let classes = nullity_partition(&report.monodromy, 8);
        assert_eq!(classes.len(), 1);
        assert_eq!(classes[0].nullity, 2);
    }
}

#[test]
fn restricted_index_grows_linearly() {
    let (_, m) = setup();
    let rec = &critical(16)[0];
    let w = growth_witness(&m, K, &rec.lp, 4)
        .unwrap()
        .expect("positive index");
    assert_eq!(w.m0, 1);
    assert!(w.delta1 < 0.0);
    for r in iterate_indices(&m, K, &rec.lp, 8).unwrap() {
        assert!(r.ind_restricted >= w.floor(r.m), "m = {}", r.m);
    }
}

#[test]
fn kernel_vectors_are_jacobi_fields() {
    let (_, m) = setup();
    for rec in critical(16) {
        let checks = verify_kernel(&m, K, &rec.lp, 32).unwrap();
        assert!(!checks.is_empty());
        for c in checks {
            assert!(c.jacobi_residual < 1e-5, "{c:?}");
            assert!(c.sigma_residual.abs() < 1e-5, "{c:?}");
        }
    }
}

#[test]
fn indices_do_not_depend_on_the_time_origin() {
    let (_, m) = setup();
    for rec in critical(16) {
        let base = rec.spectral.clone();
        for j in 1..8 {
            let shifted = time_shift(&m, &rec.lp, rec.lp.tau * j as f64 / 8.0).unwrap();
            let r = discrete_hessian(&m, K, &shifted).unwrap();
            assert_eq!(
                (
                    r.ind_full(),
                    r.nul_full(),
                    r.ind_restricted(),
                    r.nul_restricted()
                ),
                (
                    base.ind_full,
                    base.nul_full,
                    base.ind_restricted,
                    base.nul_restricted
                )
            );
        }
    }
}

#[test]
fn flat_geodesic_has_shear_monodromy() {
    let flat = Kinetic::new(TorusConfig::square(1.0).unwrap());
    let h = 8;
    let k: f64 = 0.5;
    let tau = (1.0 / h as f64) / (2.0 * k).sqrt();
    let lp = DiscreteLoop::from_curve(&flat.torus, h, tau, |s| Vec2::new(s, 0.25)).unwrap();
    let r = discrete_hessian(&flat, k, &lp).unwrap();
    assert_eq!((r.ind_restricted(), r.nul_restricted()), (0, 2));
    for mm in 1..=8 {
        assert_eq!(nullity_via_monodromy(&r.monodromy, mm), 2);
    }
    let rows = iterate_indices(&flat, k, &lp, 8).unwrap();
    assert!(rows
        .iter()
        .all(|r| r.nul_restricted == r.nul_monodromy && r.ind_restricted == 0));
}
