//! Short two-point boundary problems.
//!
//! A segment joins `q0` to the minimal-image translate of `q1`. Fixed-time
//! segments solve `π∘φ^τ(q0, v) = q1` for `v`; free-time segments also solve
//! for `τ` under the energy constraint `E(q0, v) = k`. Both use damped Newton
//! with the propagator supplying the Jacobian.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{flow_end, flow_uniform, FlowOptions, Propagator};
use crate::model::{
    energy_from_jet, max_speed_on_level, ray_energy_crossing, solve2, Lagrangian, Mat2,
    TangentState, Vec2,
};

/// Newton settings for the boundary problems.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShootOptions {
    pub flow: FlowOptions,
    pub max_iterations: usize,
    /// Endpoint residual tolerance, relative to `1 + |q1 − q0|`.
    pub tolerance: f64,
    /// Smallest accepted `σ_min(B) / ‖B‖` for the `∂q(τ)/∂v(0)` block.
    pub degeneracy_ratio: f64,
}

impl Default for ShootOptions {
    fn default() -> Self {
        Self {
            flow: FlowOptions::tight(),
            max_iterations: 50,
            tolerance: 1e-11,
            degeneracy_ratio: 1e-8,
        }
    }
}

/// First derivatives of the boundary velocities with respect to `(q0, q1, τ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentDerivatives {
    pub dnu_minus_dq0: Mat2,
    pub dnu_minus_dq1: Mat2,
    pub dnu_minus_dtau: Vec2,
    pub dnu_plus_dq0: Mat2,
    pub dnu_plus_dq1: Mat2,
    pub dnu_plus_dtau: Vec2,
}

/// An Euler–Lagrange arc from `q0` to `q1` in time `tau`.
#[derive(Clone, Debug)]
pub struct SegmentSolution {
    pub q0: Vec2,
    /// Lifted endpoint, `q0` plus the minimal-image displacement.
    pub q1: Vec2,
    pub tau: f64,
    pub nu_minus: Vec2,
    pub nu_plus: Vec2,
    pub action: f64,
    pub propagator: Propagator,
    pub derivatives: SegmentDerivatives,
    pub newton_iterations: usize,
}

impl SegmentSolution {
    pub fn displacement(&self) -> Vec2 {
        self.q1 - self.q0
    }

    /// `E(q0, ν⁻)`, equal to the energy along the whole arc.
    pub fn energy<M: Lagrangian + ?Sized>(&self, model: &M) -> f64 {
        energy_from_jet(&model.jet(self.q0, self.nu_minus), &self.nu_minus)
    }

    /// `n + 1` uniformly spaced states along the arc (lifted positions).
    pub fn samples<M: Lagrangian + ?Sized>(
        &self,
        model: &M,
        n: usize,
    ) -> Result<Vec<(f64, TangentState)>> {
        let pts = flow_uniform(
            model,
            self.q0,
            self.nu_minus,
            self.tau,
            n,
            false,
            &FlowOptions::tight(),
        )?;
        Ok(pts
            .into_iter()
            .map(|p| (p.t, TangentState { q: p.q, v: p.v }))
            .collect())
    }
}

fn singular_ratio(b: &Mat2) -> f64 {
    let sv = b.singular_values();
    let (lo, hi) = (sv.min(), sv.max());
    if hi == 0.0 {
        0.0
    } else {
        lo / hi
    }
}

fn derivatives<M: Lagrangian + ?Sized>(
    model: &M,
    q1: Vec2,
    nu_plus: Vec2,
    p: &Propagator,
) -> Result<SegmentDerivatives> {
    let a = p.qq();
    let b = p.qv();
    let c = p.vq();
    let d = p.vv();
    let binv = b.try_inverse().ok_or(Error::Degenerate { ratio: 0.0 })?;
    let acc = model.jet(q1, nu_plus).acceleration(&nu_plus);
    Ok(SegmentDerivatives {
        dnu_minus_dq0: -binv * a,
        dnu_minus_dq1: binv,
        dnu_minus_dtau: -binv * nu_plus,
        dnu_plus_dq0: c - d * binv * a,
        dnu_plus_dq1: d * binv,
        dnu_plus_dtau: -d * binv * nu_plus + acc,
    })
}

/// Fixed-time minimizer to the minimal-image translate of `q1`.
pub fn fixed_time_minimizer<M: Lagrangian + ?Sized>(
    model: &M,
    q0: Vec2,
    q1: Vec2,
    tau: f64,
) -> Result<SegmentSolution> {
    let target = q0 + model.torus().displacement(q0, q1);
    fixed_time_lifted(model, q0, target, tau, None, &ShootOptions::default())
}

/// Fixed-time minimizer to an explicit lifted endpoint, optionally warm-started
/// from an initial velocity.
pub fn fixed_time_lifted<M: Lagrangian + ?Sized>(
    model: &M,
    q0: Vec2,
    q1: Vec2,
    tau: f64,
    guess: Option<Vec2>,
    opts: &ShootOptions,
) -> Result<SegmentSolution> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "segment time must be positive, got {tau}"
        )));
    }
    let d = q1 - q0;
    let tol = opts.tolerance * (1.0 + d.norm());
    let mut v = guess.unwrap_or(d / tau);
    let mut end = flow_end(model, q0, v, tau, true, &opts.flow)?;
    let mut r = end.q - q1;
    let mut best_ok = r.norm() <= tol;
    let mut it = 0;
    while !best_ok && it < opts.max_iterations {
        it += 1;
        let p = end.propagator.expect("variational flow");
        let b = p.qv();
        let step = solve2(&b, &r);
        if !step.iter().all(|x| x.is_finite()) {
            return Err(Error::Degenerate {
                ratio: singular_ratio(&b),
            });
        }
        let r0 = r.norm();
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = v - step * alpha;
            if let Ok(e) = flow_end(model, q0, trial, tau, true, &opts.flow) {
                let rn = (e.q - q1).norm();
                if rn <= (1.0 - 1e-4 * alpha) * r0 || rn <= tol {
                    v = trial;
                    end = e;
                    r = e.q - q1;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            // Stagnation at the integrator's noise floor still counts if close enough.
            if r0 <= 1e2 * tol {
                break;
            }
            return Err(Error::NoConvergence(format!(
                "fixed-time line search failed with residual {r0:e}"
            )));
        }
        best_ok = r.norm() <= tol;
    }
    if r.norm() > 1e2 * tol {
        return Err(Error::NoConvergence(format!(
            "fixed-time residual {:e} after {it} iterations",
            r.norm()
        )));
    }
    let p = end.propagator.expect("variational flow");
    let ratio = singular_ratio(&p.qv());
    if ratio <= opts.degeneracy_ratio {
        return Err(Error::Degenerate { ratio });
    }
    Ok(SegmentSolution {
        q0,
        q1,
        tau,
        nu_minus: v,
        nu_plus: end.v,
        action: end.action,
        propagator: p,
        derivatives: derivatives(model, end.q, end.v, &p)?,
        newton_iterations: it,
    })
}

/// Free-time local minimizer with energy `k` from `q0` to the minimal-image
/// translate of `q1`.
pub fn free_time_minimizer<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    q0: Vec2,
    q1: Vec2,
) -> Result<SegmentSolution> {
    let target = q0 + model.torus().displacement(q0, q1);
    free_time_lifted(model, k, q0, target, &ShootOptions::default())
}

pub fn free_time_lifted<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    q0: Vec2,
    q1: Vec2,
    opts: &ShootOptions,
) -> Result<SegmentSolution> {
    for q in [q0, q1] {
        let e_rest = -model.value(q, Vec2::zeros());
        if e_rest >= k {
            return Err(Error::BelowE0 { k, e_rest });
        }
    }
    let d = q1 - q0;
    if d.norm() == 0.0 {
        return Err(Error::InvalidParameter(
            "free-time segment needs distinct endpoints".into(),
        ));
    }
    let dir = d / d.norm();
    let speed = ray_energy_crossing(model, q0, dir, k)
        .ok_or_else(|| Error::NoConvergence("no velocity with the requested energy".into()))?;
    let mut v = dir * speed;
    let mut tau = d.norm() / speed;
    let tol = opts.tolerance * (1.0 + d.norm());
    let etol = opts.tolerance * (1.0 + k.abs());
    let residual = |v: Vec2, tau: f64| -> Result<(Vector3<f64>, crate::flow::FlowPoint)> {
        let end = flow_end(model, q0, v, tau, true, &opts.flow)?;
        let e = energy_from_jet(&model.jet(q0, v), &v) - k;
        Ok((Vector3::new(end.q.x - q1.x, end.q.y - q1.y, e), end))
    };
    let (mut r, mut end) = residual(v, tau)?;
    let done = |r: &Vector3<f64>| Vec2::new(r.x, r.y).norm() <= tol && r.z.abs() <= etol;
    let mut it = 0;
    while !done(&r) && it < opts.max_iterations {
        it += 1;
        let p = end.propagator.expect("variational flow");
        let b = p.qv();
        let ev = model.jet(q0, v).lvv * v;
        let jac = Matrix3::new(
            b[(0, 0)],
            b[(0, 1)],
            end.v.x,
            b[(1, 0)],
            b[(1, 1)],
            end.v.y,
            ev.x,
            ev.y,
            0.0,
        );
        let step = jac.lu().solve(&r).ok_or_else(|| Error::Degenerate {
            ratio: singular_ratio(&b),
        })?;
        let r0 = r.norm();
        let mut alpha = 1.0;
        // Keep τ positive.
        while tau - alpha * step.z <= 0.25 * tau {
            alpha *= 0.5;
        }
        let mut accepted = false;
        for _ in 0..30 {
            let tv = v - Vec2::new(step.x, step.y) * alpha;
            let tt = tau - step.z * alpha;
            if let Ok((rn, e)) = residual(tv, tt) {
                if rn.norm() <= (1.0 - 1e-4 * alpha) * r0 || done(&rn) {
                    v = tv;
                    tau = tt;
                    r = rn;
                    end = e;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            if r0 <= 1e2 * tol.max(etol) {
                break;
            }
            return Err(Error::NoConvergence(format!(
                "free-time line search failed with residual {r0:e}"
            )));
        }
    }
    if Vec2::new(r.x, r.y).norm() > 1e2 * tol || r.z.abs() > 1e2 * etol {
        return Err(Error::NoConvergence(format!(
            "free-time residual {:e} after {it} iterations",
            r.norm()
        )));
    }
    let p = end.propagator.expect("variational flow");
    let ratio = singular_ratio(&p.qv());
    if ratio <= opts.degeneracy_ratio {
        return Err(Error::Degenerate { ratio });
    }
    Ok(SegmentSolution {
        q0,
        q1,
        tau,
        nu_minus: v,
        nu_plus: end.v,
        action: end.action,
        propagator: p,
        derivatives: derivatives(model, end.q, end.v, &p)?,
        newton_iterations: it,
    })
}

/// A vector field along a segment sampled at uniform times, together with
/// the underlying curve.
#[derive(Clone, Debug)]
pub struct SegmentField {
    pub times: Vec<f64>,
    pub values: Vec<Vec2>,
    pub derivatives: Vec<Vec2>,
    pub curve: Vec<TangentState>,
}

impl SegmentField {
    /// Sup-norm of `J_γ(field) − forcing(t)` at interior samples, with the
    /// time derivative of the linearized momentum taken by fourth-order
    /// central differences.
    pub fn jacobi_residual<M, F>(&self, model: &M, forcing: F) -> f64
    where
        M: Lagrangian + ?Sized,
        F: Fn(usize) -> Vec2,
    {
        let n = self.times.len();
        let dt = self.times[1] - self.times[0];
        let jets: Vec<_> = self.curve.iter().map(|s| model.jet(s.q, s.v)).collect();
        let mom: Vec<Vec2> = (0..n)
            .map(|i| jets[i].lvq() * self.values[i] + jets[i].lvv * self.derivatives[i])
            .collect();
        let mut worst: f64 = 0.0;
        for i in 2..n.saturating_sub(2) {
            let dmom =
                (mom[i - 2] - mom[i - 1] * 8.0 + mom[i + 1] * 8.0 - mom[i + 2]) / (12.0 * dt);
            let j = &jets[i];
            let res = dmom - j.lqq * self.values[i] - j.lqv * self.derivatives[i] - forcing(i);
            worst = worst.max(res.norm());
        }
        worst
    }

    /// The forcing `(d/dt E_v + E_q)/τ` of the inhomogeneous Jacobi equation
    /// along this field's curve, at every sample.
    pub fn energy_forcing<M: Lagrangian + ?Sized>(&self, model: &M, tau: f64) -> Vec<Vec2> {
        let n = self.times.len();
        let dt = self.times[1] - self.times[0];
        let jets: Vec<_> = self.curve.iter().map(|s| model.jet(s.q, s.v)).collect();
        let ev: Vec<Vec2> = (0..n).map(|i| jets[i].lvv * self.curve[i].v).collect();
        (0..n)
            .map(|i| {
                let dev = if i >= 2 && i + 2 < n {
                    (ev[i - 2] - ev[i - 1] * 8.0 + ev[i + 1] * 8.0 - ev[i + 2]) / (12.0 * dt)
                } else {
                    Vec2::zeros()
                };
                let eq = jets[i].lqv * self.curve[i].v - jets[i].lq;
                (dev + eq) / tau
            })
            .collect()
    }
}

/// The Jacobi field `θ` along `seg` with `θ(0) = v0`, `θ(τ) = v1`, sampled at `n + 1` times.
pub fn boundary_jacobi_field<M: Lagrangian + ?Sized>(
    model: &M,
    seg: &SegmentSolution,
    v0: Vec2,
    v1: Vec2,
    n: usize,
) -> Result<SegmentField> {
    let p = &seg.propagator;
    let ratio = singular_ratio(&p.qv());
    if ratio <= 1e-12 {
        return Err(Error::Degenerate { ratio });
    }
    let w0 = solve2(&p.qv(), &(v1 - p.qq() * v0));
    linear_field(model, seg, v0, w0, n, |_, _| (Vec2::zeros(), Vec2::zeros()))
}

/// `ψ = ∂_τγ + γ̇·t/τ` along `seg`, sampled at `n + 1` times.
pub fn psi_field<M: Lagrangian + ?Sized>(
    model: &M,
    seg: &SegmentSolution,
    n: usize,
) -> Result<SegmentField> {
    let ratio = singular_ratio(&seg.propagator.qv());
    if ratio <= 1e-12 {
        return Err(Error::Degenerate { ratio });
    }
    let tau = seg.tau;
    linear_field(
        model,
        seg,
        Vec2::zeros(),
        seg.derivatives.dnu_minus_dtau,
        n,
        |t, s| {
            let acc = model.jet(s.q, s.v).acceleration(&s.v);
            (s.v * (t / tau), acc * (t / tau) + s.v / tau)
        },
    )
}

fn linear_field<M, F>(
    model: &M,
    seg: &SegmentSolution,
    dq0: Vec2,
    dv0: Vec2,
    n: usize,
    extra: F,
) -> Result<SegmentField>
where
    M: Lagrangian + ?Sized,
    F: Fn(f64, &TangentState) -> (Vec2, Vec2),
{
    let n = n.max(4);
    let pts = flow_uniform(
        model,
        seg.q0,
        seg.nu_minus,
        seg.tau,
        n,
        true,
        &FlowOptions::tight(),
    )?;
    let mut field = SegmentField {
        times: Vec::with_capacity(n + 1),
        values: Vec::with_capacity(n + 1),
        derivatives: Vec::with_capacity(n + 1),
        curve: Vec::with_capacity(n + 1),
    };
    for p in pts {
        let (a, b) = p.propagator.expect("variational flow").apply(dq0, dv0);
        let s = TangentState { q: p.q, v: p.v };
        let (ea, eb) = extra(p.t, &s);
        field.times.push(p.t);
        field.values.push(a + ea);
        field.derivatives.push(b + eb);
        field.curve.push(s);
    }
    Ok(field)
}

/// Empirical scales below which short boundary problems are well posed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectivityScales {
    pub rho_inj: f64,
    pub tau_inj: f64,
    pub epsilon: f64,
    /// Number of random problems each accepted scale passed.
    pub samples: usize,
}

/// Certifies `(ρ, τ)` on a shrinking grid by solving random fixed-time
/// problems with `dist < ρ` and `τ ∈ [τ/10, τ]`, requiring convergence,
/// non-degeneracy and no conjugate point along each arc.
pub fn estimate_scales<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    seed: u64,
) -> Result<InjectivityScales> {
    estimate_scales_with(model, k, seed, 200)
}

pub fn estimate_scales_with<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    seed: u64,
    samples: usize,
) -> Result<InjectivityScales> {
    let torus = model.torus();
    let speed = max_speed_on_level(model, k, 16, 16).max(0.1);
    let rho0 = 0.45 * torus.min_side();
    let tau0 = 2.0 * rho0 / speed;
    let opts = ShootOptions {
        flow: FlowOptions {
            rtol: 1e-8,
            atol: 1e-8,
            ..FlowOptions::default()
        },
        max_iterations: 20,
        tolerance: 1e-9,
        ..ShootOptions::default()
    };
    for j in 0..40 {
        let shrink = 0.8f64.powi(j);
        let (rho, tau_max) = (rho0 * shrink, tau0 * shrink);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ok = (0..samples).all(|_| {
            let q0 = Vec2::new(
                rng.random::<f64>() * torus.sides[0],
                rng.random::<f64>() * torus.sides[1],
            );
            let r = rho * rng.random::<f64>().sqrt();
            let th = rng.random::<f64>() * std::f64::consts::TAU;
            let q1 = q0 + Vec2::new(th.cos(), th.sin()) * r;
            let tau = tau_max * (0.1 + 0.9 * rng.random::<f64>());
            sample_passes(model, q0, q1, tau, &opts)
        });
        if ok {
            return Ok(InjectivityScales {
                rho_inj: rho,
                tau_inj: tau_max,
                epsilon: tau_max,
                samples,
            });
        }
    }
    Err(Error::ScaleNotFound)
}

fn sample_passes<M: Lagrangian + ?Sized>(
    model: &M,
    q0: Vec2,
    q1: Vec2,
    tau: f64,
    opts: &ShootOptions,
) -> bool {
    let Ok(seg) = fixed_time_lifted(model, q0, q1, tau, None, opts) else {
        return false;
    };
    let Ok(pts) = flow_uniform(model, q0, seg.nu_minus, tau, 8, true, &opts.flow) else {
        return false;
    };
    pts.iter()
        .skip(1)
        .all(|p| p.propagator.expect("variational flow").qv().determinant() > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Kinetic, TorusConfig};

    fn kin() -> Kinetic {
        Kinetic::new(TorusConfig::square(1.0).unwrap())
    }

    #[test]
    fn kinetic_fixed_time() {
        let s = fixed_time_minimizer(&kin(), Vec2::zeros(), Vec2::new(0.2, 0.0), 0.1).unwrap();
        assert!((s.nu_minus - Vec2::new(2.0, 0.0)).norm() < 1e-10);
        assert!((s.nu_plus - Vec2::new(2.0, 0.0)).norm() < 1e-10);
        assert!((s.action - 0.2).abs() < 1e-10);
    }

    #[test]
    fn kinetic_constant_arc() {
        let s =
            fixed_time_minimizer(&kin(), Vec2::new(0.3, 0.3), Vec2::new(0.3, 0.3), 0.1).unwrap();
        assert!(s.nu_minus.norm() < 1e-12 && s.action.abs() < 1e-14);
    }

    #[test]
    fn wraps_to_nearest_translate() {
        let s =
            fixed_time_minimizer(&kin(), Vec2::new(0.95, 0.5), Vec2::new(0.05, 0.5), 0.1).unwrap();
        assert!((s.nu_minus - Vec2::new(1.0, 0.0)).norm() < 1e-10);
    }

    #[test]
    fn kinetic_free_time() {
        let s = free_time_minimizer(&kin(), 0.5, Vec2::zeros(), Vec2::new(0.2, 0.0)).unwrap();
        assert!((s.tau - 0.2).abs() < 1e-10);
        assert!((s.nu_minus - Vec2::new(1.0, 0.0)).norm() < 1e-10);
        assert!((s.energy(&kin()) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn free_time_rejects_low_energy() {
        use crate::model::{Mechanical, TrigSeries};
        let m = Mechanical::new(
            TorusConfig::square(1.0).unwrap(),
            TrigSeries::single(1.0, [1, 0], 0.0),
        );
        let r = free_time_minimizer(&m, 0.5, Vec2::zeros(), Vec2::new(0.1, 0.0));
        assert!(matches!(r, Err(Error::BelowE0 { .. })));
    }

    #[test]
    fn kinetic_jacobi_field_is_affine() {
        let m = kin();
        let s = fixed_time_minimizer(&m, Vec2::zeros(), Vec2::new(0.1, 0.05), 0.2).unwrap();
        let (v0, v1) = (Vec2::new(0.3, -0.1), Vec2::new(-0.2, 0.4));
        let f = boundary_jacobi_field(&m, &s, v0, v1, 10).unwrap();
        for (t, val) in f.times.iter().zip(&f.values) {
            let expect = v0 * (1.0 - t / 0.2) + v1 * (t / 0.2);
            assert!((val - expect).norm() < 1e-10);
        }
        let z = boundary_jacobi_field(&m, &s, Vec2::zeros(), Vec2::zeros(), 10).unwrap();
        assert!(z.values.iter().all(|v| v.norm() < 1e-14));
        let p = psi_field(&m, &s, 10).unwrap();
        assert!(p.values.iter().all(|v| v.norm() < 1e-10));
    }

    #[test]
    fn kinetic_scales_below_half_side() {
        let sc = estimate_scales_with(&kin(), 0.5, 1, 50).unwrap();
        assert!(sc.rho_inj <= 0.5 && sc.rho_inj > 0.0);
    }
}
