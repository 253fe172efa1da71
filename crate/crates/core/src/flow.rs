//! Euler–Lagrange flow, its linearization and monodromy matrices.
//!
//! The base system is integrated as a first-order system in `(q, v)` with an
//! embedded Runge–Kutta 5(4) pair. The variational equations are carried along
//! in the linearized momentum coordinates `(δq, δp)`, `δp = L_vq δq + L_vv δv`,
//! which only need second derivatives of `L`; the result is converted back to
//! `(δq, δv)` at the end.

use std::io::{self, Write};

use nalgebra::{Matrix4, Vector4};

use crate::action::DiscreteLoop;
use crate::error::{Error, Result};
use crate::model::{energy_from_jet, solve2, Lagrangian, Mat2, TangentState, Vec2};

/// Integrator tolerances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Allowed energy drift, relative to `1 + |E(0)|`.
    pub energy_tolerance: f64,
    pub max_steps: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-10,
            energy_tolerance: 1e-6,
            max_steps: 2_000_000,
        }
    }
}

impl FlowOptions {
    pub fn tight() -> Self {
        Self {
            rtol: 1e-12,
            atol: 1e-13,
            ..Self::default()
        }
    }
}

/// Sampled solution of the Euler–Lagrange flow.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub samples: Vec<(f64, TangentState)>,
    pub energy_drift: f64,
    /// Final position without wrapping, continuous from the lifted start.
    pub end_lifted: Vec2,
    /// `∫ L dt` along the trajectory.
    pub action: f64,
}

impl Trajectory {
    pub fn end(&self) -> TangentState {
        self.samples.last().expect("trajectory has samples").1
    }

    /// Writes whitespace-separated columns `t q1 q2 v1 v2`.
    pub fn write_columns<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# t q1 q2 v1 v2")?;
        for (t, s) in &self.samples {
            writeln!(
                w,
                "{:.12e} {:.12e} {:.12e} {:.12e} {:.12e}",
                t, s.q.x, s.q.y, s.v.x, s.v.y
            )?;
        }
        Ok(())
    }
}

/// Linearized flow `dφ^t` acting on `(δq, δv)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Propagator {
    pub t: f64,
    pub matrix: Matrix4<f64>,
}

impl Propagator {
    pub fn identity() -> Self {
        Self {
            t: 0.0,
            matrix: Matrix4::identity(),
        }
    }

    fn block(&self, r: usize, c: usize) -> Mat2 {
        self.matrix.fixed_view::<2, 2>(r, c).into_owned()
    }

    /// `∂q(t)/∂q(0)`.
    pub fn qq(&self) -> Mat2 {
        self.block(0, 0)
    }

    /// `∂q(t)/∂v(0)`.
    pub fn qv(&self) -> Mat2 {
        self.block(0, 2)
    }

    /// `∂v(t)/∂q(0)`.
    pub fn vq(&self) -> Mat2 {
        self.block(2, 0)
    }

    /// `∂v(t)/∂v(0)`.
    pub fn vv(&self) -> Mat2 {
        self.block(2, 2)
    }

    pub fn determinant(&self) -> f64 {
        self.matrix.determinant()
    }

    pub fn apply(&self, dq: Vec2, dv: Vec2) -> (Vec2, Vec2) {
        let r = self.matrix * Vector4::new(dq.x, dq.y, dv.x, dv.y);
        (Vec2::new(r[0], r[1]), Vec2::new(r[2], r[3]))
    }

    /// `self` after `first`: the propagator of the concatenated flow.
    pub fn compose(&self, first: &Propagator) -> Propagator {
        Propagator {
            t: self.t + first.t,
            matrix: self.matrix * first.matrix,
        }
    }
}

/// State of the flow at one time, with lifted position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FlowPoint {
    pub t: f64,
    pub q: Vec2,
    pub v: Vec2,
    pub action: f64,
    pub propagator: Option<Propagator>,
}

const BASE: usize = 5;
const FULL: usize = 21;

// Dormand–Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn axpy<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        let hc = h * c;
        for i in 0..N {
            out[i] += hc * k[i];
        }
    }
    out
}

/// Integrates the autonomous system `y' = f(y)` from `0` to `t_end`,
/// calling `on_step(t, y)` after each accepted step.
fn dopri5<const N: usize>(
    f: &dyn Fn(&[f64; N]) -> [f64; N],
    y0: [f64; N],
    t_end: f64,
    opts: &FlowOptions,
    on_step: &mut dyn FnMut(f64, &[f64; N]) -> Result<()>,
) -> Result<[f64; N]> {
    if t_end == 0.0 {
        return Ok(y0);
    }
    let mut y = y0;
    let mut k1 = f(&y);
    let scale =
        |y: &[f64; N], yn: &[f64; N], i: usize| opts.atol + opts.rtol * y[i].abs().max(yn[i].abs());
    // Initial step from the size of the derivative.
    let d0 = (0..N)
        .map(|i| (y[i] / scale(&y, &y, i)).powi(2))
        .sum::<f64>()
        / N as f64;
    let d1 = (0..N)
        .map(|i| (k1[i] / scale(&y, &y, i)).powi(2))
        .sum::<f64>()
        / N as f64;
    let mut h = if d0.sqrt() < 1e-5 || d1.sqrt() < 1e-5 {
        1e-6
    } else {
        0.01 * (d0 / d1).sqrt()
    };
    h = h.min(t_end).max(1e-12 * t_end);
    let mut t = 0.0;
    let mut steps = 0usize;
    let mut rejected_last = false;
    while t < t_end {
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::StepFailure { t });
        }
        let last = t + h >= t_end * (1.0 - 1e-15);
        if last {
            h = t_end - t;
        }
        let k2 = f(&axpy(&y, h, &[(A21, &k1)]));
        let k3 = f(&axpy(&y, h, &[(A31, &k1), (A32, &k2)]));
        let k4 = f(&axpy(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
        let k5 = f(&axpy(
            &y,
            h,
            &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)],
        ));
        let k6 = f(&axpy(
            &y,
            h,
            &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
        ));
        let yn = axpy(
            &y,
            h,
            &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
        );
        let k7 = f(&yn);
        let mut err = 0.0;
        for i in 0..N {
            let e =
                h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            err += (e / scale(&y, &yn, i)).powi(2);
        }
        let err = (err / N as f64).sqrt();
        if !err.is_finite() {
            h *= 0.2;
            rejected_last = true;
            if h < 1e-14 * t_end.max(1.0) {
                return Err(Error::StepFailure { t });
            }
            continue;
        }
        if err <= 1.0 {
            t = if last { t_end } else { t + h };
            y = yn;
            k1 = k7;
            on_step(t, &y)?;
            let mut fac = if err == 0.0 {
                10.0
            } else {
                0.9 * err.powf(-0.2)
            };
            fac = fac.clamp(0.2, 10.0);
            if rejected_last {
                fac = fac.min(1.0);
            }
            h *= fac;
            rejected_last = false;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            rejected_last = true;
        }
        if h < 1e-14 * t_end.max(1.0) && t < t_end {
            return Err(Error::StepFailure { t });
        }
    }
    Ok(y)
}

fn base_rhs<M: Lagrangian + ?Sized>(model: &M, y: &[f64; BASE]) -> [f64; BASE] {
    let q = Vec2::new(y[0], y[1]);
    let v = Vec2::new(y[2], y[3]);
    let j = model.jet(q, v);
    let a = j.acceleration(&v);
    [v.x, v.y, a.x, a.y, j.l]
}

fn full_rhs<M: Lagrangian + ?Sized>(model: &M, y: &[f64; FULL]) -> [f64; FULL] {
    let q = Vec2::new(y[0], y[1]);
    let v = Vec2::new(y[2], y[3]);
    let j = model.jet(q, v);
    let a = j.acceleration(&v);
    let lvq = j.lvq();
    let mut out = [0.0; FULL];
    out[..5].copy_from_slice(&[v.x, v.y, a.x, a.y, j.l]);
    for c in 0..4 {
        let o = 5 + 4 * c;
        let dq = Vec2::new(y[o], y[o + 1]);
        let dp = Vec2::new(y[o + 2], y[o + 3]);
        let dqdot = solve2(&j.lvv, &(dp - lvq * dq));
        let dpdot = j.lqq * dq + j.lqv * dqdot;
        out[o..o + 4].copy_from_slice(&[dqdot.x, dqdot.y, dpdot.x, dpdot.y]);
    }
    out
}

// Change of variables (δq, δv) ↦ (δq, δp) at a point.
fn momentum_transform(lvq: &Mat2, lvv: &Mat2) -> Matrix4<f64> {
    let mut t = Matrix4::identity();
    t.fixed_view_mut::<2, 2>(2, 0).copy_from(lvq);
    t.fixed_view_mut::<2, 2>(2, 2).copy_from(lvv);
    t
}

fn momentum_transform_inverse(lvq: &Mat2, lvv: &Mat2) -> Matrix4<f64> {
    let inv = lvv.try_inverse().expect("L_vv is positive definite");
    let mut t = Matrix4::identity();
    t.fixed_view_mut::<2, 2>(2, 0).copy_from(&(-inv * lvq));
    t.fixed_view_mut::<2, 2>(2, 2).copy_from(&inv);
    t
}

fn propagator_from_state<M: Lagrangian + ?Sized>(model: &M, t: f64, y: &[f64; FULL]) -> Propagator {
    let q = Vec2::new(y[0], y[1]);
    let v = Vec2::new(y[2], y[3]);
    let j = model.jet(q, v);
    let mut ym = Matrix4::zeros();
    for c in 0..4 {
        for r in 0..4 {
            ym[(r, c)] = y[5 + 4 * c + r];
        }
    }
    Propagator {
        t,
        matrix: momentum_transform_inverse(&j.lvq(), &j.lvv) * ym,
    }
}

fn check_inputs(t: f64, s: &[f64]) -> Result<()> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "flow time must be finite and non-negative, got {t}"
        )));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter(
            "initial state is not finite".into(),
        ));
    }
    Ok(())
}

/// Runs the flow from the lifted point `(q, v)` and returns states at the
/// `n + 1` uniform times `j·t/n`. With `variational`, each point carries the
/// propagator from time 0.
pub(crate) fn flow_uniform<M: Lagrangian + ?Sized>(
    model: &M,
    q: Vec2,
    v: Vec2,
    t: f64,
    n: usize,
    variational: bool,
    opts: &FlowOptions,
) -> Result<Vec<FlowPoint>> {
    check_inputs(t, &[q.x, q.y, v.x, v.y])?;
    let n = n.max(1);
    let dt = t / n as f64;
    let e0 = energy_from_jet(&model.jet(q, v), &v);
    let etol = opts.energy_tolerance * (1.0 + e0.abs());
    let check = |_: f64, y: &[f64]| -> Result<()> {
        let (q, v) = (Vec2::new(y[0], y[1]), Vec2::new(y[2], y[3]));
        let drift = (energy_from_jet(&model.jet(q, v), &v) - e0).abs();
        if drift > etol {
            return Err(Error::EnergyDriftExceeded {
                drift,
                tolerance: etol,
            });
        }
        Ok(())
    };
    let mut out = Vec::with_capacity(n + 1);
    if variational {
        let j0 = model.jet(q, v);
        let t0 = momentum_transform(&j0.lvq(), &j0.lvv);
        let mut y = [0.0; FULL];
        y[..5].copy_from_slice(&[q.x, q.y, v.x, v.y, 0.0]);
        for c in 0..4 {
            for r in 0..4 {
                y[5 + 4 * c + r] = t0[(r, c)];
            }
        }
        let f = |y: &[f64; FULL]| full_rhs(model, y);
        for i in 0..=n {
            if i > 0 {
                y = dopri5(&f, y, dt, opts, &mut |s, y| check(s, &y[..]))?;
            }
            let ti = dt * i as f64;
            out.push(FlowPoint {
                t: ti,
                q: Vec2::new(y[0], y[1]),
                v: Vec2::new(y[2], y[3]),
                action: y[4],
                propagator: Some(if i == 0 {
                    Propagator::identity()
                } else {
                    propagator_from_state(model, ti, &y)
                }),
            });
        }
    } else {
        let mut y = [q.x, q.y, v.x, v.y, 0.0];
        let f = |y: &[f64; BASE]| base_rhs(model, y);
        for i in 0..=n {
            if i > 0 {
                y = dopri5(&f, y, dt, opts, &mut |s, y| check(s, &y[..]))?;
            }
            out.push(FlowPoint {
                t: dt * i as f64,
                q: Vec2::new(y[0], y[1]),
                v: Vec2::new(y[2], y[3]),
                action: y[4],
                propagator: None,
            });
        }
    }
    Ok(out)
}

/// Final state (lifted) and propagator of the flow over time `t`.
pub(crate) fn flow_end<M: Lagrangian + ?Sized>(
    model: &M,
    q: Vec2,
    v: Vec2,
    t: f64,
    variational: bool,
    opts: &FlowOptions,
) -> Result<FlowPoint> {
    Ok(*flow_uniform(model, q, v, t, 1, variational, opts)?
        .last()
        .expect("at least two points"))
}

/// Integrates the Euler–Lagrange flow with default tolerances.
pub fn integrate<M: Lagrangian + ?Sized>(
    model: &M,
    s0: &TangentState,
    t: f64,
) -> Result<Trajectory> {
    integrate_with(model, s0, t, &FlowOptions::default())
}

/// Integrates the Euler–Lagrange flow, recording every accepted step.
pub fn integrate_with<M: Lagrangian + ?Sized>(
    model: &M,
    s0: &TangentState,
    t: f64,
    opts: &FlowOptions,
) -> Result<Trajectory> {
    check_inputs(t, &[s0.q.x, s0.q.y, s0.v.x, s0.v.y])?;
    let torus = model.torus();
    let e0 = energy_from_jet(&model.jet(s0.q, s0.v), &s0.v);
    let etol = opts.energy_tolerance * (1.0 + e0.abs());
    let mut samples = vec![(0.0, TangentState::new(&torus, s0.q, s0.v))];
    let mut drift: f64 = 0.0;
    let f = |y: &[f64; BASE]| base_rhs(model, y);
    let y = dopri5(
        &f,
        [s0.q.x, s0.q.y, s0.v.x, s0.v.y, 0.0],
        t,
        opts,
        &mut |s, y| {
            let (q, v) = (Vec2::new(y[0], y[1]), Vec2::new(y[2], y[3]));
            let d = (energy_from_jet(&model.jet(q, v), &v) - e0).abs();
            drift = drift.max(d);
            if d > etol {
                return Err(Error::EnergyDriftExceeded {
                    drift: d,
                    tolerance: etol,
                });
            }
            samples.push((s, TangentState::new(&torus, q, v)));
            Ok(())
        },
    )?;
    Ok(Trajectory {
        samples,
        energy_drift: drift,
        end_lifted: Vec2::new(y[0], y[1]),
        action: y[4],
    })
}

/// `dφ^t` at `s0`, from the variational equations.
pub fn linearized_flow<M: Lagrangian + ?Sized>(
    model: &M,
    s0: &TangentState,
    t: f64,
) -> Result<Propagator> {
    linearized_flow_with(model, s0, t, &FlowOptions::default())
}

pub fn linearized_flow_with<M: Lagrangian + ?Sized>(
    model: &M,
    s0: &TangentState,
    t: f64,
    opts: &FlowOptions,
) -> Result<Propagator> {
    let end = flow_end(model, s0.q, s0.v, t, true, opts)?;
    Ok(end.propagator.expect("variational flow"))
}

/// Linearized flow over one full period `hτ` of a critical broken orbit,
/// as the product of the segment propagators.
pub fn monodromy<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    lp: &DiscreteLoop,
) -> Result<Propagator> {
    let eval = crate::action::evaluate(model, k, lp, crate::action::Detail::Hessian)?;
    let g = eval.gradient.norm();
    let tol = crate::action::critical_tolerance(lp);
    if g > tol {
        return Err(Error::NotCritical {
            gradient_norm: g,
            tolerance: tol,
        });
    }
    Ok(eval.monodromy.expect("hessian detail carries propagators"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Kinetic, Mechanical, TorusConfig, TrigSeries};
    use std::f64::consts::PI;

    #[test]
    fn kinetic_straight_line() {
        let m = Kinetic::new(TorusConfig::square(1.0).unwrap());
        let s = TangentState::new(&m.torus, Vec2::zeros(), Vec2::new(1.0, 0.0));
        let tr = integrate(&m, &s, 0.5).unwrap();
        let e = tr.end();
        assert!((e.q - Vec2::new(0.5, 0.0)).norm() < 1e-12);
        assert!((e.v - Vec2::new(1.0, 0.0)).norm() < 1e-12);
        assert!((tr.action - 0.25).abs() < 1e-12);
    }

    #[test]
    fn kinetic_shear() {
        let m = Kinetic::new(TorusConfig::square(1.0).unwrap());
        let s = TangentState::new(&m.torus, Vec2::new(0.1, 0.2), Vec2::new(0.3, -0.7));
        let p = linearized_flow(&m, &s, 1.5).unwrap();
        let mut expect = Matrix4::identity();
        expect[(0, 2)] = 1.5;
        expect[(1, 3)] = 1.5;
        assert!((p.matrix - expect).norm() < 1e-10);
        let p0 = linearized_flow(&m, &s, 0.0).unwrap();
        assert_eq!(p0.matrix, Matrix4::identity());
    }

    #[test]
    fn pendulum_energy_conserved() {
        let t = TorusConfig::square(2.0 * PI).unwrap();
        let m = Mechanical::new(t, TrigSeries::single(1.0, [1, 0], 0.0));
        let s = TangentState::new(&t, Vec2::new(0.3, 0.0), Vec2::new(0.4, 0.2));
        let tr = integrate(&m, &s, 10.0).unwrap();
        assert!(tr.energy_drift < 1e-8, "drift {}", tr.energy_drift);
    }

    #[test]
    fn rejects_negative_time() {
        let m = Kinetic::new(TorusConfig::square(1.0).unwrap());
        let s = TangentState::new(&m.torus, Vec2::zeros(), Vec2::zeros());
        assert!(matches!(
            integrate(&m, &s, -1.0),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn columns_export() {
        let m = Kinetic::new(TorusConfig::square(1.0).unwrap());
        let s = TangentState::new(&m.torus, Vec2::zeros(), Vec2::new(1.0, 0.0));
        let tr = integrate(&m, &s, 0.1).unwrap();
        let mut buf = Vec::new();
        tr.write_columns(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# t q1 q2 v1 v2"));
        assert_eq!(text.lines().count(), tr.samples.len() + 1);
    }
}
