//! Configuration space and Lagrangian models.
//!
//! The configuration space is the flat torus `R² / (s₁Z × s₂Z)`. A model is
//! anything implementing [`Lagrangian`]: it returns the value of `L(q, v)` and
//! all of its first and second partial derivatives in one [`Jet`]. Every
//! algorithm in the crate (flows, shooting, Hessians) only needs second
//! derivatives of `L`.

use std::f64::consts::PI;
use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// Flat torus with side lengths `sides[0] × sides[1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusConfig {
    pub sides: [f64; 2],
}

impl TorusConfig {
    pub fn new(s1: f64, s2: f64) -> Result<Self> {
        if !(s1.is_finite() && s2.is_finite() && s1 > 0.0 && s2 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "torus side lengths must be positive, got ({s1}, {s2})"
            )));
        }
        Ok(Self { sides: [s1, s2] })
    }

    pub fn square(side: f64) -> Result<Self> {
        Self::new(side, side)
    }

    /// Wraps a lifted point into the fundamental domain `[0, s₁) × [0, s₂)`.
    pub fn wrap(&self, q: Vec2) -> Vec2 {
        Vec2::new(
            wrap_coord(q.x, self.sides[0]),
            wrap_coord(q.y, self.sides[1]),
        )
    }

    /// Minimal-image displacement from `q0` to `q1`, components in `[-s/2, s/2)`.
    pub fn displacement(&self, q0: Vec2, q1: Vec2) -> Vec2 {
        let d = q1 - q0;
        Vec2::new(
            d.x - self.sides[0] * (d.x / self.sides[0]).round(),
            d.y - self.sides[1] * (d.y / self.sides[1]).round(),
        )
    }

    pub fn distance(&self, q0: Vec2, q1: Vec2) -> f64 {
        self.displacement(q0, q1).norm()
    }

    /// Largest possible distance between two points (half the diagonal).
    pub fn diameter(&self) -> f64 {
        0.5 * (self.sides[0].powi(2) + self.sides[1].powi(2)).sqrt()
    }

    pub fn area(&self) -> f64 {
        self.sides[0] * self.sides[1]
    }

    pub fn min_side(&self) -> f64 {
        self.sides[0].min(self.sides[1])
    }
}

fn wrap_coord(x: f64, s: f64) -> f64 {
    let w = x - s * (x / s).floor();
    if w >= s || w < 0.0 {
        0.0
    } else {
        w
    }
}

/// Distance on the torus: minimum over lattice translates of the Euclidean distance.
pub fn torus_distance(cfg: &TorusConfig, q0: Vec2, q1: Vec2) -> f64 {
    cfg.distance(q0, q1)
}

/// A point of the tangent bundle. `q` is always stored wrapped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentState {
    pub q: Vec2,
    pub v: Vec2,
}

impl TangentState {
    pub fn new(torus: &TorusConfig, q: Vec2, v: Vec2) -> Self {
        Self {
            q: torus.wrap(q),
            v,
        }
    }
}

/// Value and derivatives of `L` at one point.
///
/// `lqv[(a, b)]` is `∂²L/∂q_a∂v_b`; its transpose is the `∂²L/∂v_a∂q_b` block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    pub l: f64,
    pub lq: Vec2,
    pub lv: Vec2,
    pub lqq: Mat2,
    pub lqv: Mat2,
    pub lvv: Mat2,
}

impl Jet {
    /// `∂²L/∂v∂q`, the block that multiplies `δq` in the linearized momentum.
    pub fn lvq(&self) -> Mat2 {
        self.lqv.transpose()
    }

    /// Acceleration of the Euler–Lagrange flow: `L_vv⁻¹ (L_q − L_vq v)`.
    pub fn acceleration(&self, v: &Vec2) -> Vec2 {
        solve2(&self.lvv, &(self.lq - self.lvq() * v))
    }
}

pub(crate) fn solve2(m: &Mat2, b: &Vec2) -> Vec2 {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    Vec2::new(
        (m[(1, 1)] * b.x - m[(0, 1)] * b.y) / det,
        (m[(0, 0)] * b.y - m[(1, 0)] * b.x) / det,
    )
}

/// A Tonelli Lagrangian on the flat torus.
///
/// Implementations must be periodic in `q` with the periods of [`Lagrangian::torus`]
/// (they receive lifted coordinates during integration).
pub trait Lagrangian: Send + Sync + Debug {
    fn name(&self) -> &str;

    fn torus(&self) -> TorusConfig;

    fn jet(&self, q: Vec2, v: Vec2) -> Jet;

    fn value(&self, q: Vec2, v: Vec2) -> f64 {
        self.jet(q, v).l
    }

    /// Named scalar parameters, for output metadata.
    fn parameters(&self) -> Vec<(String, f64)> {
        Vec::new()
    }

    /// The dual Hamiltonian `H(q, p)`. The default inverts `p = L_v(q, v)` numerically.
    fn hamiltonian(&self, q: Vec2, p: Vec2) -> Result<f64> {
        legendre(self, q, p).map(|l| l.h)
    }
}

/// `E(q, v) = L_v(q, v)·v − L(q, v)`.
pub fn energy<M: Lagrangian + ?Sized>(model: &M, s: &TangentState) -> f64 {
    let j = model.jet(s.q, s.v);
    j.lv.dot(&s.v) - j.l
}

/// `(E_q, E_v) = (L_qv v − L_q, L_vv v)`.
pub fn energy_gradients<M: Lagrangian + ?Sized>(model: &M, s: &TangentState) -> (Vec2, Vec2) {
    let j = model.jet(s.q, s.v);
    (j.lqv * s.v - j.lq, j.lvv * s.v)
}

pub(crate) fn energy_from_jet(j: &Jet, v: &Vec2) -> f64 {
    j.lv.dot(v) - j.l
}

/// Result of the fiberwise Legendre transform at a covector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Legendre {
    pub v: Vec2,
    pub h: f64,
}

/// Solves `p = L_v(q, v)` by damped Newton on the convex function `L(q,·) − p·v`
/// and returns `v` together with `H(q, p) = p·v − L(q, v)`.
pub fn legendre<M: Lagrangian + ?Sized>(model: &M, q: Vec2, p: Vec2) -> Result<Legendre> {
    let j0 = model.jet(q, Vec2::zeros());
    let mut v = solve2(&j0.lvv, &(p - j0.lv));
    let objective = |v: &Vec2| model.value(q, *v) - p.dot(v);
    let scale = 1.0 + p.norm();
    for _ in 0..100 {
        let j = model.jet(q, v);
        let g = j.lv - p;
        if g.norm() <= 1e-13 * scale {
            return Ok(Legendre {
                v,
                h: p.dot(&v) - j.l,
            });
        }
        let step = solve2(&j.lvv, &g);
        let f0 = j.l - p.dot(&v);
        let slope = -g.dot(&step);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = v - step * alpha;
            if objective(&trial) <= f0 + 1e-4 * alpha * slope {
                v = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // Objective is flat to rounding; take the full step and let the
            // gradient test decide.
            v -= step;
        }
    }
    let j = model.jet(q, v);
    if (j.lv - p).norm() <= 1e-9 * scale {
        return Ok(Legendre {
            v,
            h: p.dot(&v) - j.l,
        });
    }
    Err(Error::NonConvergence(format!(
        "Legendre inversion at q = ({}, {}), p = ({}, {})",
        q.x, q.y, p.x, p.y
    )))
}

/// One term `amplitude · cos(ω·q + phase)` with `ω = 2π (n₁/s₁, n₂/s₂)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub amplitude: f64,
    pub modes: [i32; 2],
    #[serde(default)]
    pub phase: f64,
}

/// A finite trigonometric series on the torus, evaluated with exact derivatives.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrigSeries {
    pub terms: Vec<TrigTerm>,
}

impl TrigSeries {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn single(amplitude: f64, modes: [i32; 2], phase: f64) -> Self {
        Self {
            terms: vec![TrigTerm {
                amplitude,
                modes,
                phase,
            }],
        }
    }

    /// Value, gradient and Hessian at `q`.
    pub fn eval(&self, torus: &TorusConfig, q: Vec2) -> (f64, Vec2, Mat2) {
        let mut f = 0.0;
        let mut g = Vec2::zeros();
        let mut hss = Mat2::zeros();
        for t in &self.terms {
            let w = Vec2::new(
                2.0 * PI * t.modes[0] as f64 / torus.sides[0],
                2.0 * PI * t.modes[1] as f64 / torus.sides[1],
            );
            let arg = w.dot(&q) + t.phase;
            let (s, c) = arg.sin_cos();
            f += t.amplitude * c;
            g -= w * (t.amplitude * s);
            hss -= w * w.transpose() * (t.amplitude * c);
        }
        (f, g, hss)
    }

    /// Upper bound on `max |f|` from the coefficients.
    pub fn sup_bound(&self) -> f64 {
        self.terms.iter().map(|t| t.amplitude.abs()).sum()
    }
}

/// `L = ½|v|²`.
#[derive(Clone, Debug)]
pub struct Kinetic {
    pub torus: TorusConfig,
}

impl Kinetic {
    pub fn new(torus: TorusConfig) -> Self {
        Self { torus }
    }
}

impl Lagrangian for Kinetic {
    fn name(&self) -> &str {
        "kinetic"
    }

    fn torus(&self) -> TorusConfig {
        self.torus
    }

    fn jet(&self, _q: Vec2, v: Vec2) -> Jet {
        Jet {
            l: 0.5 * v.norm_squared(),
            lq: Vec2::zeros(),
            lv: v,
            lqq: Mat2::zeros(),
            lqv: Mat2::zeros(),
            lvv: Mat2::identity(),
        }
    }

    fn hamiltonian(&self, _q: Vec2, p: Vec2) -> Result<f64> {
        Ok(0.5 * p.norm_squared())
    }
}

/// Natural mechanical system `L = ½|v|² − V(q)`.
#[derive(Clone, Debug)]
pub struct Mechanical {
    pub torus: TorusConfig,
    pub potential: TrigSeries,
}

impl Mechanical {
    pub fn new(torus: TorusConfig, potential: TrigSeries) -> Self {
        Self { torus, potential }
    }
}

impl Lagrangian for Mechanical {
    fn name(&self) -> &str {
        "mechanical"
    }

    fn torus(&self) -> TorusConfig {
        self.torus
    }

    fn jet(&self, q: Vec2, v: Vec2) -> Jet {
        let (pot, dpot, hpot) = self.potential.eval(&self.torus, q);
        Jet {
            l: 0.5 * v.norm_squared() - pot,
            lq: -dpot,
            lv: v,
            lqq: -hpot,
            lqv: Mat2::zeros(),
            lvv: Mat2::identity(),
        }
    }

    fn parameters(&self) -> Vec<(String, f64)> {
        series_parameters("V", &self.potential)
    }

    fn hamiltonian(&self, q: Vec2, p: Vec2) -> Result<f64> {
        Ok(0.5 * p.norm_squared() + self.potential.eval(&self.torus, q).0)
    }
}

/// Electromagnetic Lagrangian with an exact magnetic term,
/// `L = ½|v|² + A(q)·v − V(q)`, magnetic field `B = ∂₁A₂ − ∂₂A₁`.
#[derive(Clone, Debug)]
pub struct ExactMagnetic {
    pub torus: TorusConfig,
    pub vector_potential: [TrigSeries; 2],
    pub potential: TrigSeries,
}

impl ExactMagnetic {
    pub fn new(
        torus: TorusConfig,
        vector_potential: [TrigSeries; 2],
        potential: TrigSeries,
    ) -> Self {
        Self {
            torus,
            vector_potential,
            potential,
        }
    }

    /// Stripe field on the `2π × 2π` torus: `A = (0, s·sin q₁)`, `B = s·cos q₁`.
    pub fn stripe(strength: f64) -> Self {
        let torus = TorusConfig::square(2.0 * PI).expect("positive side");
        Self::new(
            torus,
            [
                TrigSeries::zero(),
                TrigSeries::single(strength, [1, 0], -0.5 * PI),
            ],
            TrigSeries::zero(),
        )
    }

    /// Two unequal ridges of `A₂` on the `2π × 2π` torus:
    /// `A = (0, s·sin q₁ + b·cos 2q₁ + c·cos q₁)`.
    pub fn ridges(strength: f64, second: f64, tilt: f64) -> Self {
        let torus = TorusConfig::square(2.0 * PI).expect("positive side");
        let a2 = TrigSeries {
            terms: vec![
                TrigTerm {
                    amplitude: strength,
                    modes: [1, 0],
                    phase: -0.5 * PI,
                },
                TrigTerm {
                    amplitude: second,
                    modes: [2, 0],
                    phase: 0.0,
                },
                TrigTerm {
                    amplitude: tilt,
                    modes: [1, 0],
                    phase: 0.0,
                },
            ],
        };
        Self::new(torus, [TrigSeries::zero(), a2], TrigSeries::zero())
    }

    pub fn magnetic_field(&self, q: Vec2) -> f64 {
        let (_, g1, _) = self.vector_potential[0].eval(&self.torus, q);
        let (_, g2, _) = self.vector_potential[1].eval(&self.torus, q);
        g2.x - g1.y
    }
}

impl Lagrangian for ExactMagnetic {
    fn name(&self) -> &str {
        "magnetic"
    }

    fn torus(&self) -> TorusConfig {
        self.torus
    }

    fn jet(&self, q: Vec2, v: Vec2) -> Jet {
        let (a1, ga1, ha1) = self.vector_potential[0].eval(&self.torus, q);
        let (a2, ga2, ha2) = self.vector_potential[1].eval(&self.torus, q);
        let (pot, dpot, hpot) = self.potential.eval(&self.torus, q);
        let a = Vec2::new(a1, a2);
        // lqv[(a, b)] = ∂_a A_b
        let lqv = Mat2::new(ga1.x, ga2.x, ga1.y, ga2.y);
        Jet {
            l: 0.5 * v.norm_squared() + a.dot(&v) - pot,
            lq: ga1 * v.x + ga2 * v.y - dpot,
            lv: v + a,
            lqq: ha1 * v.x + ha2 * v.y - hpot,
            lqv,
            lvv: Mat2::identity(),
        }
    }

    fn parameters(&self) -> Vec<(String, f64)> {
        let mut out = series_parameters("A1", &self.vector_potential[0]);
        out.extend(series_parameters("A2", &self.vector_potential[1]));
        out.extend(series_parameters("V", &self.potential));
        out
    }

    fn hamiltonian(&self, q: Vec2, p: Vec2) -> Result<f64> {
        let a = Vec2::new(
            self.vector_potential[0].eval(&self.torus, q).0,
            self.vector_potential[1].eval(&self.torus, q).0,
        );
        Ok(0.5 * (p - a).norm_squared() + self.potential.eval(&self.torus, q).0)
    }
}

fn series_parameters(prefix: &str, s: &TrigSeries) -> Vec<(String, f64)> {
    s.terms
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            [
                (format!("{prefix}[{i}].amplitude"), t.amplitude),
                (format!("{prefix}[{i}].n1"), t.modes[0] as f64),
                (format!("{prefix}[{i}].n2"), t.modes[1] as f64),
                (format!("{prefix}[{i}].phase"), t.phase),
            ]
        })
        .collect()
}

// C² step in [0, 1]: 0 below, 1 above, zero first and second derivatives at both ends.
pub(crate) fn smoothstep5(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if s >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let s2 = s * s;
        let s3 = s2 * s;
        (
            s3 * (10.0 - 15.0 * s + 6.0 * s2),
            30.0 * s2 * (1.0 - s) * (1.0 - s),
            60.0 * s * (1.0 - s) * (1.0 - 2.0 * s),
        )
    }
}

/// `L` blended into `½|v|²` for `R ≤ |v| ≤ 2R`, with a C² weight in `|v|²`.
#[derive(Clone, Debug)]
pub struct ClampedModel {
    pub inner: Arc<dyn Lagrangian>,
    pub radius: f64,
    name: String,
}

impl ClampedModel {
    fn weight(&self, v: &Vec2) -> (f64, f64, f64) {
        let r2 = self.radius * self.radius;
        let span = 3.0 * r2;
        let (b, db, d2b) = smoothstep5((v.norm_squared() - r2) / span);
        (b, db / span, d2b / (span * span))
    }
}

impl Lagrangian for ClampedModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn torus(&self) -> TorusConfig {
        self.inner.torus()
    }

    fn jet(&self, q: Vec2, v: Vec2) -> Jet {
        let j = self.inner.jet(q, v);
        let (b, db, d2b) = self.weight(&v);
        if b == 0.0 && db == 0.0 {
            return j;
        }
        // L_c = L + β(|v|²)·D with D = ½|v|² − L.
        let d = 0.5 * v.norm_squared() - j.l;
        let dv = v - j.lv;
        let id = Mat2::identity();
        Jet {
            l: j.l + b * d,
            lq: j.lq * (1.0 - b),
            lv: j.lv + v * (2.0 * db * d) + dv * b,
            lqq: j.lqq * (1.0 - b),
            lqv: j.lqv * (1.0 - b) - j.lq * v.transpose() * (2.0 * db),
            lvv: j.lvv * (1.0 - b)
                + id * b
                + v * v.transpose() * (4.0 * d2b * d)
                + id * (2.0 * db * d)
                + (v * dv.transpose() + dv * v.transpose()) * (2.0 * db),
        }
    }

    fn parameters(&self) -> Vec<(String, f64)> {
        let mut p = self.inner.parameters();
        p.push(("clamp_radius".into(), self.radius));
        p
    }
}

/// Largest speed on the energy level `E⁻¹(k)`, sampled on a `grid × grid`
/// mesh of base points and `directions` rays per point.
pub fn max_speed_on_level<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    grid: usize,
    directions: usize,
) -> f64 {
    let torus = model.torus();
    let mut best: f64 = 0.0;
    for i in 0..grid {
        for j in 0..grid {
            let q = Vec2::new(
                (i as f64 + 0.5) * torus.sides[0] / grid as f64,
                (j as f64 + 0.5) * torus.sides[1] / grid as f64,
            );
            for d in 0..directions {
                let th = 2.0 * PI * d as f64 / directions as f64;
                let u = Vec2::new(th.cos(), th.sin());
                if let Some(lam) = ray_energy_crossing(model, q, u, k) {
                    best = best.max(lam);
                }
            }
        }
    }
    best
}

/// Finds `λ ≥ 0` with `E(q, λu) = k` (unique, since `E` increases along rays).
pub(crate) fn ray_energy_crossing<M: Lagrangian + ?Sized>(
    model: &M,
    q: Vec2,
    u: Vec2,
    k: f64,
) -> Option<f64> {
    let e = |lam: f64| energy(model, &TangentState { q, v: u * lam });
    if e(0.0) > k {
        return None;
    }
    let mut hi = 1.0;
    let mut n = 0;
    while e(hi) < k {
        hi *= 2.0;
        n += 1;
        if n > 60 {
            return None;
        }
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if e(mid) < k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn min_eigenvalue_sym2(m: &Mat2) -> f64 {
    let a = m[(0, 0)];
    let d = m[(1, 1)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    0.5 * (a + d) - (0.25 * (a - d) * (a - d) + b * b).sqrt()
}

/// Replaces `L` by `½|v|²` outside a velocity ball, keeping it unchanged on the
/// energy sublevel `{E ≤ k}`. The inner radius is twice the largest sampled
/// speed on `E⁻¹(k)`; it is doubled until the blend stays fiberwise convex.
pub fn clamp_quadratic_at_infinity(
    model: Arc<dyn Lagrangian>,
    k: f64,
) -> Result<Arc<dyn Lagrangian>> {
    if !k.is_finite() {
        return Err(Error::InvalidParameter("energy must be finite".into()));
    }
    let vmax = max_speed_on_level(model.as_ref(), k, 24, 24);
    let mut radius = (2.0 * vmax).max(1.0);
    let torus = model.torus();
    for _ in 0..12 {
        let clamped = ClampedModel {
            inner: model.clone(),
            radius,
            name: format!("{}+clamp", model.name()),
        };
        let mut convex = true;
        'scan: for i in 0..12 {
            for j in 0..12 {
                let q = Vec2::new(
                    (i as f64 + 0.5) * torus.sides[0] / 12.0,
                    (j as f64 + 0.5) * torus.sides[1] / 12.0,
                );
                for r in 0..16 {
                    let speed = radius * (1.0 + r as f64 / 15.0);
                    for d in 0..16 {
                        let th = 2.0 * PI * d as f64 / 16.0;
                        let v = Vec2::new(th.cos(), th.sin()) * speed;
                        if min_eigenvalue_sym2(&clamped.jet(q, v).lvv) <= 0.0 {
                            convex = false;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if convex {
            return Ok(Arc::new(clamped));
        }
        radius *= 2.0;
    }
    Err(Error::ClampTooTight { radius })
}

/// Declarative model description used by configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Kinetic {
        sides: [f64; 2],
    },
    Mechanical {
        sides: [f64; 2],
        potential: Vec<TrigTerm>,
    },
    Magnetic {
        sides: [f64; 2],
        #[serde(default)]
        a1: Vec<TrigTerm>,
        #[serde(default)]
        a2: Vec<TrigTerm>,
        #[serde(default)]
        potential: Vec<TrigTerm>,
    },
    /// Stripe field `A = (0, s·sin q₁)` on the `2π` torus.
    Stripe {
        strength: f64,
    },
    /// `A = (0, s·sin q₁ + b·cos 2q₁ + c·cos q₁)` on the `2π` torus.
    Ridges {
        strength: f64,
        second: f64,
        tilt: f64,
    },
    Counterexample {
        r1: f64,
        r2: f64,
        big_r: f64,
    },
}

/// Builds a registered model from its description.
pub fn build_model(spec: &ModelSpec) -> Result<Arc<dyn Lagrangian>> {
    Ok(match spec {
        ModelSpec::Kinetic { sides } => {
            Arc::new(Kinetic::new(TorusConfig::new(sides[0], sides[1])?))
        }
        ModelSpec::Mechanical { sides, potential } => Arc::new(Mechanical::new(
            TorusConfig::new(sides[0], sides[1])?,
            TrigSeries {
                terms: potential.clone(),
            },
        )),
        ModelSpec::Magnetic {
            sides,
            a1,
            a2,
            potential,
        } => Arc::new(ExactMagnetic::new(
            TorusConfig::new(sides[0], sides[1])?,
            [
                TrigSeries { terms: a1.clone() },
                TrigSeries { terms: a2.clone() },
            ],
            TrigSeries {
                terms: potential.clone(),
            },
        )),
        ModelSpec::Stripe { strength } => {
            if !strength.is_finite() {
                return Err(Error::InvalidParameter(
                    "stripe strength must be finite".into(),
                ));
            }
            Arc::new(ExactMagnetic::stripe(*strength))
        }
        ModelSpec::Ridges {
            strength,
            second,
            tilt,
        } => {
            if ![strength, second, tilt].iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidParameter(
                    "ridge coefficients must be finite".into(),
                ));
            }
            Arc::new(ExactMagnetic::ridges(*strength, *second, *tilt))
        }
        ModelSpec::Counterexample { r1, r2, big_r } => {
            let p = crate::fixtures::CounterexampleParams::new(*r1, *r2, *big_r)?;
            Arc::new(crate::fixtures::counterexample_model(&p)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::*;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
        }
    }

    fn unit() -> TorusConfig {
        TorusConfig::square(1.0).unwrap()
    }

    #[test]
    fn distance_wraps_around() {
        let t = unit();
        assert!(close(
            torus_distance(&t, Vec2::new(0.0, 0.0), Vec2::new(0.9, 0.0)),
            0.1,
            1e-14
        ));
        assert_eq!(
            torus_distance(&t, Vec2::new(0.3, 0.7), Vec2::new(0.3, 0.7)),
            0.0
        );
        let t2 = TorusConfig::square(2.0 * PI).unwrap();
        let d = torus_distance(&t2, Vec2::zeros(), Vec2::new(PI, PI));
        assert!(close(d, PI * 2f64.sqrt(), 1e-14));
    }

    #[test]
    fn rejects_bad_sides() {
        assert!(TorusConfig::new(0.0, 1.0).is_err());
        assert!(TorusConfig::new(1.0, f64::NAN).is_err());
    }

    #[test]
    fn wrap_lands_in_fundamental_domain() {
        let t = TorusConfig::new(2.0, 3.0).unwrap();
        for &(x, y) in &[(-0.1, 7.5), (2.0, -3.0), (-1e-18, 1e9 + 0.25)] {
            let w = t.wrap(Vec2::new(x, y));
            assert!(w.x >= 0.0 && w.x < 2.0 && w.y >= 0.0 && w.y < 3.0, "{w:?}");
        }
    }

    #[test]
    fn kinetic_energy_and_gradients() {
        let m = Kinetic::new(unit());
        let s = TangentState::new(&unit(), Vec2::zeros(), Vec2::new(1.0, 0.0));
        assert_eq!(energy(&m, &s), 0.5);
        let s = TangentState::new(&unit(), Vec2::zeros(), Vec2::new(2.0, 0.0));
        let (eq, ev) = energy_gradients(&m, &s);
        assert_eq!(eq, Vec2::zeros());
        assert_eq!(ev, Vec2::new(2.0, 0.0));
    }

    #[test]
    fn mechanical_energy_is_kinetic_plus_potential() {
        let t = TorusConfig::square(2.0 * PI).unwrap();
        let m = Mechanical::new(t, TrigSeries::single(1.0, [1, 0], 0.0));
        let s = TangentState::new(&t, Vec2::new(0.4, 1.0), Vec2::new(0.3, -0.2));
        assert!(close(energy(&m, &s), 0.5 * 0.13 + 0.4f64.cos(), 1e-14));
        let s0 = TangentState::new(&t, Vec2::zeros(), Vec2::zeros());
        let (eq, ev) = energy_gradients(&m, &s0);
        assert!(eq.norm() < 1e-15 && ev.norm() == 0.0);
    }

    #[test]
    fn kinetic_legendre() {
        let m = Kinetic::new(unit());
        let l = legendre(&m, Vec2::zeros(), Vec2::new(1.0, 0.0)).unwrap();
        assert!((l.v - Vec2::new(1.0, 0.0)).norm() < 1e-14);
        assert!(close(l.h, 0.5, 1e-14));
    }

    #[test]
    fn clamp_leaves_kinetic_untouched() {
        let m: Arc<dyn Lagrangian> = Arc::new(Kinetic::new(unit()));
        let c = clamp_quadratic_at_infinity(m.clone(), 1.0).unwrap();
        for &(x, y, a, b) in &[
            (0.1, 0.2, 0.3, 0.4),
            (0.5, 0.5, 30.0, -2.0),
            (0.9, 0.1, 300.0, 1.0),
        ] {
            let q = Vec2::new(x, y);
            let v = Vec2::new(a, b);
            let (j0, j1) = (m.jet(q, v), c.jet(q, v));
            assert!((j0.l - j1.l).abs() < 1e-9 * (1.0 + j0.l.abs()));
            assert!((j0.lv - j1.lv).norm() < 1e-9 * (1.0 + j0.lv.norm()));
            assert!((j0.lvv - j1.lvv).norm() < 1e-9);
        }
    }

    #[test]
    fn smoothstep_is_c2_at_ends() {
        let (b0, d0, dd0) = smoothstep5(0.0);
        let (b1, d1, dd1) = smoothstep5(1.0);
        assert_eq!((b0, d0, dd0, b1, d1, dd1), (0.0, 0.0, 0.0, 1.0, 0.0, 0.0));
        let (_, d, dd) = smoothstep5(1e-7);
        assert!(d < 1e-12 && dd < 1e-4);
    }
}
