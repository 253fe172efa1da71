//! A closed-form reference system with exactly two periodic orbits per low energy level.
//!
//! The Hamiltonian is
//!
//! ```text
//! H(q, p) = ½ ( (χ(q₁²) + p₁²)/r₁ + (χ(q₂²) + p₂²)/r₂ )
//! ```
//!
//! on the torus `[−R, R)²`, with `χ` the identity on `[0, r₂]` and constant
//! `R` on `[R, ∞)`. Its dual Lagrangian is
//! `L = ½(r₁v₁² + r₂v₂²) − ½(χ(q₁²)/r₁ + χ(q₂²)/r₂)`. On the polydisk
//! `|z₁|² < r₁, |z₂|² < r₂` (with `z = q + ip`) the flow is the rotation
//! `z_j ↦ e^{−it/r_j} z_j`.

use std::f64::consts::PI;

use nalgebra::Matrix4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::DiscreteLoop;
use crate::error::{Error, Result};
use crate::model::{Jet, Lagrangian, Mat2, ModelSpec, TangentState, TorusConfig, TrigTerm, Vec2};

/// Parameters `r₁ < r₂ < R` with `r₁/r₂` away from low-denominator rationals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleParams {
    pub r1: f64,
    pub r2: f64,
    pub big_r: f64,
}

impl Default for CounterexampleParams {
    fn default() -> Self {
        Self {
            r1: 1.0,
            r2: 2f64.sqrt(),
            big_r: 2.0,
        }
    }
}

/// Whether `x` is within `tol` of some `p/q` with `q ≤ q_max`.
pub fn near_rational(x: f64, q_max: u32, tol: f64) -> bool {
    (1..=q_max).any(|q| {
        let y = x * q as f64;
        (x - y.round() / q as f64).abs() < tol
    })
}

impl CounterexampleParams {
    pub fn new(r1: f64, r2: f64, big_r: f64) -> Result<Self> {
        if !(r1.is_finite() && r2.is_finite() && big_r.is_finite()) {
            return Err(Error::InvalidParameter("parameters must be finite".into()));
        }
        if !(0.0 < r1 && r1 < r2 && r2 < big_r) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < r1 < r2 < R, got r1 = {r1}, r2 = {r2}, R = {big_r}"
            )));
        }
        if big_r <= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "need R > 1 so the profile is constant near the torus boundary, got {big_r}"
            )));
        }
        if near_rational(r1 / r2, 64, 1e-9) {
            return Err(Error::InvalidParameter(format!(
                "r1/r2 = {} is within 1e-9 of a rational with denominator ≤ 64",
                r1 / r2
            )));
        }
        Ok(Self { r1, r2, big_r })
    }

    pub fn torus(&self) -> TorusConfig {
        TorusConfig::square(2.0 * self.big_r).expect("R > 0")
    }

    pub fn radii(&self) -> [f64; 2] {
        [self.r1, self.r2]
    }

    /// `χ(x)`, `χ'(x)`, `χ''(x)`.
    pub fn chi(&self, x: f64) -> (f64, f64, f64) {
        chi_profile(x, self.r2, self.big_r)
    }

    /// `½(R/r₁ + R/r₂)`.
    pub fn e0(&self) -> f64 {
        0.5 * (self.big_r / self.r1 + self.big_r / self.r2)
    }
}

/// C² monotone clamp: identity on `[0, a]`, constant `b` on `[b, ∞)`, and
/// `a + (b − a) f(s)` in between with `s = (x − a)/(b − a)` and
/// `f(s) = s + 4s³ − 7s⁴ + 3s⁵`, whose derivative `(1 − s)²(15s² + 2s + 1)` is positive.
pub fn chi_profile(x: f64, a: f64, b: f64) -> (f64, f64, f64) {
    if x <= a {
        return (x, 1.0, 0.0);
    }
    if x >= b {
        return (b, 0.0, 0.0);
    }
    let w = b - a;
    let s = (x - a) / w;
    let s2 = s * s;
    let f = s + 4.0 * s2 * s - 7.0 * s2 * s2 + 3.0 * s2 * s2 * s;
    let df = 1.0 + 12.0 * s2 - 28.0 * s2 * s + 15.0 * s2 * s2;
    let ddf = 24.0 * s - 84.0 * s2 + 60.0 * s2 * s;
    (a + w * f, df, ddf / w)
}

/// The Lagrangian dual to the reference Hamiltonian.
#[derive(Clone, Debug)]
pub struct CounterexampleModel {
    pub params: CounterexampleParams,
}

impl CounterexampleModel {
    /// Centered representative of `q` in `[−R, R)²`.
    pub fn centered(&self, q: Vec2) -> Vec2 {
        let s = 2.0 * self.params.big_r;
        Vec2::new(q.x - s * (q.x / s).round(), q.y - s * (q.y / s).round())
    }
}

pub fn counterexample_model(p: &CounterexampleParams) -> Result<CounterexampleModel> {
    let p = CounterexampleParams::new(p.r1, p.r2, p.big_r)?;
    Ok(CounterexampleModel { params: p })
}

impl Lagrangian for CounterexampleModel {
    fn name(&self) -> &str {
        "counterexample"
    }

    fn torus(&self) -> TorusConfig {
        self.params.torus()
    }

    fn jet(&self, q: Vec2, v: Vec2) -> Jet {
        let qc = self.centered(q);
        let r = self.params.radii();
        let mut pot = 0.0;
        let mut dpot = Vec2::zeros();
        let mut hpot = Mat2::zeros();
        for i in 0..2 {
            let (c, dc, ddc) = self.params.chi(qc[i] * qc[i]);
            pot += 0.5 * c / r[i];
            dpot[i] = dc * qc[i] / r[i];
            hpot[(i, i)] = (2.0 * ddc * qc[i] * qc[i] + dc) / r[i];
        }
        let lvv = Mat2::new(r[0], 0.0, 0.0, r[1]);
        Jet {
            l: 0.5 * (r[0] * v.x * v.x + r[1] * v.y * v.y) - pot,
            lq: -dpot,
            lv: lvv * v,
            lqq: -hpot,
            lqv: Mat2::zeros(),
            lvv,
        }
    }

    fn parameters(&self) -> Vec<(String, f64)> {
        vec![
            ("r1".into(), self.params.r1),
            ("r2".into(), self.params.r2),
            ("R".into(), self.params.big_r),
        ]
    }

    fn hamiltonian(&self, q: Vec2, p: Vec2) -> Result<f64> {
        let qc = self.centered(q);
        let r = self.params.radii();
        Ok((0..2)
            .map(|i| 0.5 * (self.params.chi(qc[i] * qc[i]).0 + p[i] * p[i]) / r[i])
            .sum())
    }
}

/// A point of the cotangent bundle in centered coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub q: Vec2,
    pub p: Vec2,
}

impl PhasePoint {
    pub fn in_polydisk(&self, params: &CounterexampleParams) -> bool {
        let r = params.radii();
        (0..2).all(|i| self.q[i] * self.q[i] + self.p[i] * self.p[i] < r[i])
    }

    /// The tangent state `(q, p/r)`.
    pub fn tangent(&self, params: &CounterexampleParams) -> TangentState {
        TangentState {
            q: self.q,
            v: Vec2::new(self.p.x / params.r1, self.p.y / params.r2),
        }
    }

    pub fn from_tangent(params: &CounterexampleParams, s: &TangentState) -> Self {
        Self {
            q: s.q,
            p: Vec2::new(s.v.x * params.r1, s.v.y * params.r2),
        }
    }
}

/// Exact flow on the polydisk: `z_j ↦ e^{−it/r_j} z_j` with `z = q + ip`.
pub fn closed_form_flow(
    params: &CounterexampleParams,
    t: f64,
    z0: &PhasePoint,
) -> Result<PhasePoint> {
    if !z0.in_polydisk(params) {
        return Err(Error::LeavesPolydisk);
    }
    let r = params.radii();
    let mut out = *z0;
    for (i, ri) in r.iter().enumerate() {
        let (s, c) = (t / ri).sin_cos();
        out.q[i] = z0.q[i] * c + z0.p[i] * s;
        out.p[i] = z0.p[i] * c - z0.q[i] * s;
    }
    Ok(out)
}

/// `dφ^t` in `(δq₁, δq₂, δv₁, δv₂)` coordinates on the polydisk; the same for every base point.
pub fn closed_form_propagator(params: &CounterexampleParams, t: f64) -> Matrix4<f64> {
    let r = params.radii();
    let mut m = Matrix4::zeros();
    for i in 0..2 {
        let (s, c) = (t / r[i]).sin_cos();
        m[(i, i)] = c;
        m[(i, i + 2)] = r[i] * s;
        m[(i + 2, i)] = -s / r[i];
        m[(i + 2, i + 2)] = c;
    }
    m
}

/// One of the two periodic orbits at energy `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOrbit {
    pub label: char,
    pub k: f64,
    pub period: f64,
    pub start: PhasePoint,
}

impl ReferenceOrbit {
    pub fn phase(&self, params: &CounterexampleParams, t: f64) -> PhasePoint {
        closed_form_flow(params, t, &self.start).expect("reference orbits stay in the polydisk")
    }

    pub fn state(&self, params: &CounterexampleParams, t: f64) -> TangentState {
        self.phase(params, t).tangent(params)
    }

    /// Broken orbit through `h` equally spaced points, `τ = period/h`.
    pub fn discrete_loop(&self, params: &CounterexampleParams, h: usize) -> Result<DiscreteLoop> {
        let tau = self.period / h as f64;
        DiscreteLoop::from_curve(&params.torus(), h, tau, |s| {
            self.state(params, s * self.period).q
        })
    }
}

/// `Γ_k` (period `2πr₁`) and `Ψ_k` (period `2πr₂`), for `0 < k < ½`.
pub fn reference_orbits(params: &CounterexampleParams, k: f64) -> Result<[ReferenceOrbit; 2]> {
    if !(k > 0.0 && k < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "reference orbits need 0 < k < 1/2, got {k}"
        )));
    }
    Ok([
        ReferenceOrbit {
            label: 'Γ',
            k,
            period: 2.0 * PI * params.r1,
            start: PhasePoint {
                q: Vec2::new((2.0 * params.r1 * k).sqrt(), 0.0),
                p: Vec2::zeros(),
            },
        },
        ReferenceOrbit {
            label: 'Ψ',
            k,
            period: 2.0 * PI * params.r2,
            start: PhasePoint {
                q: Vec2::new(0.0, (2.0 * params.r2 * k).sqrt()),
                p: Vec2::zeros(),
            },
        },
    ])
}

/// `(2(⌊r₁/r₂⌋ + 1), 2(⌊r₂/r₁⌋ + 1))`.
pub fn maslov_pair(r1: f64, r2: f64) -> (usize, usize) {
    (
        2 * ((r1 / r2).floor() as usize + 1),
        2 * ((r2 / r1).floor() as usize + 1),
    )
}

/// Maslov indices of `(Γ_k, Ψ_k)`.
pub fn maslov_indices(params: &CounterexampleParams) -> (usize, usize) {
    maslov_pair(params.r1, params.r2)
}

/// The registered test models, by name.
pub fn catalog() -> Vec<(&'static str, ModelSpec)> {
    let tau = 2.0 * PI;
    vec![
        ("kinetic", ModelSpec::Kinetic { sides: [1.0, 1.0] }),
        (
            "mechanical",
            ModelSpec::Mechanical {
                sides: [tau, tau],
                potential: vec![TrigTerm {
                    amplitude: 0.7,
                    modes: [1, 1],
                    phase: 0.3,
                }],
            },
        ),
        ("stripe", ModelSpec::Stripe { strength: 2.0 }),
        (
            "ridges",
            ModelSpec::Ridges {
                strength: 2.0,
                second: 1.0,
                tilt: 0.2,
            },
        ),
        (
            "counterexample",
            ModelSpec::Counterexample {
                r1: 1.0,
                r2: 2f64.sqrt(),
                big_r: 2.0,
            },
        ),
    ]
}

/// A random closed loop of `h` points: a random walk with steps of norm at
/// most `max_step`, closed up in the homotopy class `winding`, with
/// `τ` uniform in `tau_range`.
pub fn random_loop<R: Rng + ?Sized>(
    torus: &TorusConfig,
    rng: &mut R,
    h: usize,
    winding: [i64; 2],
    max_step: f64,
    tau_range: (f64, f64),
) -> Result<DiscreteLoop> {
    let shift = Vec2::new(
        winding[0] as f64 * torus.sides[0],
        winding[1] as f64 * torus.sides[1],
    ) / h as f64;
    let noise = (max_step - shift.norm()).max(0.0) * 0.5;
    let mut steps: Vec<Vec2> = (0..h)
        .map(|_| {
            let r = noise * rng.random::<f64>().sqrt();
            let a = rng.random::<f64>() * 2.0 * PI;
            Vec2::new(r * a.cos(), r * a.sin())
        })
        .collect();
    let mean: Vec2 = steps.iter().sum::<Vec2>() / h as f64;
    for s in &mut steps {
        *s += shift - mean;
    }
    let mut q = Vec2::new(
        rng.random::<f64>() * torus.sides[0],
        rng.random::<f64>() * torus.sides[1],
    );
    let mut points = Vec::with_capacity(h);
    for s in &steps {
        points.push(q);
        q += s;
    }
    let tau = tau_range.0 + (tau_range.1 - tau_range.0) * rng.random::<f64>();
    DiscreteLoop::new(torus, points, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::energy;

    #[test]
    fn chi_is_c2_and_monotone() {
        let (a, b) = (2f64.sqrt(), 2.0);
        let h = 1e-6;
        for &x in &[a, b] {
            let (l, dl, ddl) = chi_profile(x - h, a, b);
            let (r, dr, ddr) = chi_profile(x + h, a, b);
            assert!((l - r).abs() < 1e-5 && (dl - dr).abs() < 1e-5 && (ddl - ddr).abs() < 1e-3);
        }
        let mut prev = 0.0;
        for i in 0..=1000 {
            let (c, dc, _) = chi_profile(3.0 * i as f64 / 1000.0, a, b);
            assert!(c >= prev && dc >= 0.0);
            prev = c;
        }
    }

    #[test]
    fn rejects_rational_ratio() {
        assert!(CounterexampleParams::new(1.0, 2.0, 3.0).is_err());
        assert!(CounterexampleParams::new(1.0, 2f64.sqrt(), 1.0).is_err());
        assert!(CounterexampleParams::new(2.0, 1.0, 3.0).is_err());
        assert!(CounterexampleParams::new(1.0, 2f64.sqrt(), 2.0).is_ok());
    }

    #[test]
    fn maslov_examples() {
        assert_eq!(maslov_pair(1.0, 2f64.sqrt()), (2, 4));
        assert_eq!(maslov_pair(1.0, 10.5), (2, 22));
        let (a, b) = maslov_pair(1.0, 10.5);
        assert_eq!(maslov_pair(10.5, 1.0), (b, a));
    }

    #[test]
    fn flow_identity_at_zero_and_period() {
        let p = CounterexampleParams::default();
        let [g, _] = reference_orbits(&p, 0.25).unwrap();
        let z = closed_form_flow(&p, 0.0, &g.start).unwrap();
        assert_eq!(z, g.start);
        let z = closed_form_flow(&p, g.period, &g.start).unwrap();
        assert!((z.q - g.start.q).norm() < 1e-14 && (z.p - g.start.p).norm() < 1e-14);
    }

    #[test]
    fn energy_on_reference_orbits() {
        let p = CounterexampleParams::default();
        let m = counterexample_model(&p).unwrap();
        for o in reference_orbits(&p, 0.25).unwrap() {
            for i in 0..10 {
                let s = o.state(&p, o.period * i as f64 / 10.0);
                assert!((energy(&m, &s) - 0.25).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn leaves_polydisk() {
        let p = CounterexampleParams::default();
        let z = PhasePoint {
            q: Vec2::new(1.5, 0.0),
            p: Vec2::zeros(),
        };
        assert_eq!(closed_form_flow(&p, 1.0, &z), Err(Error::LeavesPolydisk));
    }
}
