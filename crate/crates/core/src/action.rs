//! The discrete free-period action on broken orbits.
//!
//! A [`DiscreteLoop`] is `h` torus points and a common segment time `τ`.
//! Consecutive points are joined by fixed-time minimizers along the
//! minimal-image displacement, and
//!
//! ```text
//! S_k(q, τ) = h τ k + Σ_i F(q_i, q_{i+1}, τ)
//! ```
//!
//! where `F` is the action of the segment. Gradients are taken with respect to
//! the metric `⟨⟨(v,σ),(w,μ)⟩⟩ = hσμ + Σ v_i·w_i`.

use nalgebra::{DMatrix, DVector, Matrix4, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{flow_end, FlowOptions, Propagator};
use crate::model::{energy_from_jet, Lagrangian, TorusConfig, Vec2};
use crate::shoot::{
    boundary_jacobi_field, fixed_time_lifted, psi_field, SegmentSolution, ShootOptions,
};

/// `h` torus points with a common segment time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLoop {
    pub points: Vec<Vec2>,
    pub tau: f64,
}

impl DiscreteLoop {
    pub fn new(torus: &TorusConfig, points: Vec<Vec2>, tau: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "a loop needs at least 2 points, got {}",
                points.len()
            )));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "segment time must be positive, got {tau}"
            )));
        }
        if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::InvalidParameter("loop points must be finite".into()));
        }
        Ok(Self {
            points: points.into_iter().map(|p| torus.wrap(p)).collect(),
            tau,
        })
    }

    /// Samples the closed curve `c: [0, 1] → R²` (lifted, `c(1) − c(0)` a
    /// lattice vector) at `h` equally spaced parameters.
    pub fn from_curve<F: Fn(f64) -> Vec2>(
        torus: &TorusConfig,
        h: usize,
        tau: f64,
        c: F,
    ) -> Result<Self> {
        Self::new(torus, (0..h).map(|i| c(i as f64 / h as f64)).collect(), tau)
    }

    pub fn h(&self) -> usize {
        self.points.len()
    }

    pub fn period(&self) -> f64 {
        self.h() as f64 * self.tau
    }

    /// Minimal-image displacement of segment `i` (from point `i` to `i + 1`).
    pub fn displacements(&self, torus: &TorusConfig) -> Vec<Vec2> {
        let h = self.h();
        (0..h)
            .map(|i| torus.displacement(self.points[i], self.points[(i + 1) % h]))
            .collect()
    }

    /// Continuous lift starting at the first point; `h + 1` entries.
    pub fn lifted(&self, torus: &TorusConfig) -> Vec<Vec2> {
        let mut out = Vec::with_capacity(self.h() + 1);
        let mut p = self.points[0];
        out.push(p);
        for d in self.displacements(torus) {
            p += d;
            out.push(p);
        }
        out
    }

    /// Homotopy class as integer multiples of the side lengths.
    pub fn winding(&self, torus: &TorusConfig) -> [i64; 2] {
        let total: Vec2 = self.displacements(torus).iter().sum();
        [
            (total.x / torus.sides[0]).round() as i64,
            (total.y / torus.sides[1]).round() as i64,
        ]
    }

    pub fn max_step(&self, torus: &TorusConfig) -> f64 {
        self.displacements(torus)
            .iter()
            .map(|d| d.norm())
            .fold(0.0, f64::max)
    }

    /// Euclidean length of the polygon.
    pub fn polygon_length(&self, torus: &TorusConfig) -> f64 {
        self.displacements(torus).iter().map(|d| d.norm()).sum()
    }

    /// Cyclic relabelling so that point `s` comes first.
    pub fn rotated(&self, s: usize) -> Self {
        let mut points = self.points.clone();
        points.rotate_left(s % self.h());
        Self {
            points,
            tau: self.tau,
        }
    }
}

/// The `m`-fold cover: points repeated `m` times, same `τ`.
pub fn iterate(lp: &DiscreteLoop, m: usize) -> DiscreteLoop {
    assert!(m >= 1, "iterate needs m ≥ 1");
    let mut points = Vec::with_capacity(lp.h() * m);
    for _ in 0..m {
        points.extend_from_slice(&lp.points);
    }
    DiscreteLoop {
        points,
        tau: lp.tau,
    }
}

/// `∇S_k` in the discrete metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub w: Vec<Vec2>,
    pub mu: f64,
}

impl GradientVector {
    /// Norm in the discrete metric.
    pub fn norm(&self) -> f64 {
        let h = self.w.len() as f64;
        (h * self.mu * self.mu + self.w.iter().map(|w| w.norm_squared()).sum::<f64>()).sqrt()
    }

    /// `⟨⟨self, (v, σ)⟩⟩`, i.e. the differential applied to `(v, σ)`.
    pub fn pair(&self, v: &[Vec2], sigma: f64) -> f64 {
        self.w.len() as f64 * self.mu * sigma
            + self.w.iter().zip(v).map(|(a, b)| a.dot(b)).sum::<f64>()
    }

    /// Coordinate differential `(∂S/∂q_0, …, ∂S/∂q_{h−1}, ∂S/∂τ)` as a flat vector.
    pub fn differential(&self) -> DVector<f64> {
        let h = self.w.len();
        let mut out = DVector::zeros(2 * h + 1);
        for (i, w) in self.w.iter().enumerate() {
            out[2 * i] = w.x;
            out[2 * i + 1] = w.y;
        }
        out[2 * h] = h as f64 * self.mu;
        out
    }
}

/// How much to compute in [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Detail {
    Gradient,
    Hessian,
}

/// Action, gradient and optionally the raw Hessian at a loop.
#[derive(Clone, Debug)]
pub struct LoopEvaluation {
    pub action: f64,
    pub gradient: GradientVector,
    pub segments: Vec<SegmentSolution>,
    /// Symmetrized `(2h+1)²` coordinate Hessian; the last index is `τ`.
    pub hessian: Option<DMatrix<f64>>,
    /// Largest entry of the antisymmetric part before symmetrizing.
    pub asymmetry: f64,
    /// Product of the segment propagators, first point to first point.
    pub monodromy: Option<Propagator>,
}

impl LoopEvaluation {
    pub fn nu_minus(&self) -> Vec<Vec2> {
        self.segments.iter().map(|s| s.nu_minus).collect()
    }
}

/// Shooting configuration for loop evaluation.
#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub shoot: ShootOptions,
    /// Initial velocities per segment, e.g. from a previous evaluation.
    pub warm_start: Option<Vec<Vec2>>,
}

/// Gradient threshold for declaring a loop critical.
pub fn critical_tolerance(_lp: &DiscreteLoop) -> f64 {
    1e-6
}

/// `S_k(loop)`.
pub fn discrete_action<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    lp: &DiscreteLoop,
) -> Result<f64> {
    Ok(evaluate(model, k, lp, Detail::Gradient)?.action)
}

/// `∇S_k(loop)`.
pub fn discrete_gradient<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    lp: &DiscreteLoop,
) -> Result<GradientVector> {
    Ok(evaluate(model, k, lp, Detail::Gradient)?.gradient)
}

pub fn evaluate<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    lp: &DiscreteLoop,
    detail: Detail,
) -> Result<LoopEvaluation> {
    evaluate_with(model, k, lp, detail, &EvalOptions::default())
}

/// Shoots every segment in parallel and assembles the requested derivatives.
/// Results do not depend on the number of worker threads.
pub fn evaluate_with<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    lp: &DiscreteLoop,
    detail: Detail,
    opts: &EvalOptions,
) -> Result<LoopEvaluation> {
    if !k.is_finite() {
        return Err(Error::InvalidParameter("energy must be finite".into()));
    }
    let torus = model.torus();
    let h = lp.h();
    if h < 2 {
        return Err(Error::InvalidParameter(
            "a loop needs at least 2 points".into(),
        ));
    }
    let disp = lp.displacements(&torus);
    let shot: Vec<Result<SegmentSolution>> = (0..h)
        .into_par_iter()
        .map(|i| {
            let q0 = lp.points[i];
            let guess = opts.warm_start.as_ref().and_then(|g| g.get(i).copied());
            fixed_time_lifted(model, q0, q0 + disp[i], lp.tau, guess, &opts.shoot)
        })
        .collect();
    let mut segments = Vec::with_capacity(h);
    for (i, s) in shot.into_iter().enumerate() {
        segments.push(s.map_err(|e| Error::SegmentFailure {
            index: i,
            reason: e.to_string(),
        })?);
    }
    let mut action = h as f64 * lp.tau * k;
    let mut w = Vec::with_capacity(h);
    let mut mu = 0.0;
    for i in 0..h {
        action += segments[i].action;
        let prev = &segments[(i + h - 1) % h];
        let cur = &segments[i];
        let jp = model.jet(prev.q1, prev.nu_plus);
        let jm = model.jet(cur.q0, cur.nu_minus);
        w.push(jp.lv - jm.lv);
        mu += k - energy_from_jet(&jm, &cur.nu_minus);
    }
    let gradient = GradientVector {
        w,
        mu: mu / h as f64,
    };
    let (hessian, asymmetry, monodromy) = if detail == Detail::Hessian {
        let (hs, asym) = assemble_hessian(model, &segments);
        let mut p = Propagator::identity();
        for s in &segments {
            p = s.propagator.compose(&p);
        }
        (Some(hs), asym, Some(p))
    } else {
        (None, 0.0, None)
    };
    Ok(LoopEvaluation {
        action,
        gradient,
        segments,
        hessian,
        asymmetry,
        monodromy,
    })
}

/// Local `5×5` Hessian of the segment action in `(q0, q1, τ)`.
fn segment_hessian<M: Lagrangian + ?Sized>(
    model: &M,
    s: &SegmentSolution,
) -> nalgebra::SMatrix<f64, 5, 5> {
    let d = &s.derivatives;
    let jm = model.jet(s.q0, s.nu_minus);
    let jp = model.jet(s.q1, s.nu_plus);
    let eq = jm.lqv * s.nu_minus - jm.lq;
    let ev = jm.lvv * s.nu_minus;
    let mut out = nalgebra::SMatrix::<f64, 5, 5>::zeros();
    let put =
        |out: &mut nalgebra::SMatrix<f64, 5, 5>, r: usize, c: usize, m: &crate::model::Mat2| {
            out.fixed_view_mut::<2, 2>(r, c).copy_from(m);
        };
    // Rows of ∂F/∂q0 = −L_v(q0, ν⁻).
    put(&mut out, 0, 0, &(-jm.lvq() - jm.lvv * d.dnu_minus_dq0));
    put(&mut out, 0, 2, &(-jm.lvv * d.dnu_minus_dq1));
    let t = -jm.lvv * d.dnu_minus_dtau;
    out[(0, 4)] = t.x;
    out[(1, 4)] = t.y;
    // Rows of ∂F/∂q1 = L_v(q1, ν⁺).
    put(&mut out, 2, 0, &(jp.lvv * d.dnu_plus_dq0));
    put(&mut out, 2, 2, &(jp.lvq() + jp.lvv * d.dnu_plus_dq1));
    let t = jp.lvv * d.dnu_plus_dtau;
    out[(2, 4)] = t.x;
    out[(3, 4)] = t.y;
    // Row of ∂F/∂τ = −E(q0, ν⁻).
    let r0 = -eq.transpose() - ev.transpose() * d.dnu_minus_dq0;
    let r1 = -ev.transpose() * d.dnu_minus_dq1;
    out[(4, 0)] = r0[0];
    out[(4, 1)] = r0[1];
    out[(4, 2)] = r1[0];
    out[(4, 3)] = r1[1];
    out[(4, 4)] = -ev.dot(&d.dnu_minus_dtau);
    out
}

fn assemble_hessian<M: Lagrangian + ?Sized>(
    model: &M,
    segments: &[SegmentSolution],
) -> (DMatrix<f64>, f64) {
    let h = segments.len();
    let n = 2 * h + 1;
    let locals: Vec<_> = segments
        .par_iter()
        .map(|s| segment_hessian(model, s))
        .collect();
    let mut raw = DMatrix::zeros(n, n);
    for (i, loc) in locals.iter().enumerate() {
        let idx = [
            2 * i,
            2 * i + 1,
            2 * ((i + 1) % h),
            2 * ((i + 1) % h) + 1,
            2 * h,
        ];
        for a in 0..5 {
            for b in 0..5 {
                raw[(idx[a], idx[b])] += loc[(a, b)];
            }
        }
    }
    let asym = (&raw - raw.transpose()).abs().max() * 0.5;
    let sym = (&raw + raw.transpose()) * 0.5;
    (sym, asym)
}

/// Index, nullity and the spectral gap around the rank threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexReport {
    pub index: usize,
    pub nullity: usize,
    pub tol_rank: f64,
    /// Largest `|λ|` counted as zero (0 if none).
    pub null_max: f64,
    /// Smallest `|λ|` counted as nonzero (∞ if none).
    pub nonnull_min: f64,
}

/// `(index, nullity)` of a symmetric matrix with an absolute rank threshold.
pub fn index_nullity(matrix: &DMatrix<f64>, tol_rank: f64) -> (usize, usize) {
    let r = index_report_abs(&sorted_eigenvalues(matrix), tol_rank);
    (r.index, r.nullity)
}

pub(crate) fn sorted_eigenvalues(matrix: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(matrix.clone())
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    ev
}

fn index_report_abs(eigenvalues: &[f64], tol: f64) -> IndexReport {
    let mut r = IndexReport {
        index: 0,
        nullity: 0,
        tol_rank: tol,
        null_max: 0.0,
        nonnull_min: f64::INFINITY,
    };
    for &l in eigenvalues {
        if l.abs() < tol {
            r.nullity += 1;
            r.null_max = r.null_max.max(l.abs());
        } else {
            if l < 0.0 {
                r.index += 1;
            }
            r.nonnull_min = r.nonnull_min.min(l.abs());
        }
    }
    r
}

/// Index report with `tol_rank = rel · max|λ|`.
pub fn index_report(eigenvalues: &[f64], rel: f64) -> IndexReport {
    let scale = eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    index_report_abs(eigenvalues, rel * scale)
}

/// Default relative rank tolerance.
pub const TOL_RANK: f64 = 1e-6;

/// Second-order information at a critical loop.
#[derive(Clone, Debug)]
pub struct SpectralReport {
    pub hessian_full: DMatrix<f64>,
    pub hessian_restricted: DMatrix<f64>,
    pub eigenvalues_full: Vec<f64>,
    pub eigenvalues_restricted: Vec<f64>,
    pub full: IndexReport,
    pub restricted: IndexReport,
    pub monodromy: Propagator,
    pub monodromy_eigenvalues: Vec<Complex64>,
    pub asymmetry: f64,
    pub gradient_norm: f64,
}

impl SpectralReport {
    pub fn ind_full(&self) -> usize {
        self.full.index
    }
    pub fn nul_full(&self) -> usize {
        self.full.nullity
    }
    pub fn ind_restricted(&self) -> usize {
        self.restricted.index
    }
    pub fn nul_restricted(&self) -> usize {
        self.restricted.nullity
    }

    pub fn summary(&self) -> SpectralSummary {
        SpectralSummary {
            ind_full: self.full.index,
            nul_full: self.full.nullity,
            ind_restricted: self.restricted.index,
            nul_restricted: self.restricted.nullity,
            full: self.full,
            restricted: self.restricted,
            monodromy_eigenvalues: self
                .monodromy_eigenvalues
                .iter()
                .map(|z| [z.re, z.im])
                .collect(),
            monodromy_determinant: self.monodromy.determinant(),
            asymmetry: self.asymmetry,
            gradient_norm: self.gradient_norm,
        }
    }
}

/// Serializable part of a [`SpectralReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub ind_full: usize,
    pub nul_full: usize,
    pub ind_restricted: usize,
    pub nul_restricted: usize,
    pub full: IndexReport,
    pub restricted: IndexReport,
    pub monodromy_eigenvalues: Vec<[f64; 2]>,
    pub monodromy_determinant: f64,
    pub asymmetry: f64,
    pub gradient_norm: f64,
}

pub fn monodromy_eigenvalues(p: &Matrix4<f64>) -> Vec<Complex64> {
    let mut ev: Vec<Complex64> = p
        .complex_eigenvalues()
        .iter()
        .map(|z| Complex64::new(z.re, z.im))
        .collect();
    ev.sort_by(|a, b| {
        (a.arg(), a.norm())
            .partial_cmp(&(b.arg(), b.norm()))
            .expect("finite eigenvalues")
    });
    ev
}

/// Full and restricted Hessians with their indices and nullities.
pub fn discrete_hessian<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    lp: &DiscreteLoop,
) -> Result<SpectralReport> {
    let eval = evaluate(model, k, lp, Detail::Hessian)?;
    spectral_report(&eval, critical_tolerance(lp))
}

/// Builds the report from an evaluation that carries the Hessian.
pub fn spectral_report(eval: &LoopEvaluation, tol_crit: f64) -> Result<SpectralReport> {
    let g = eval.gradient.norm();
    if g > tol_crit {
        return Err(Error::NotCritical {
            gradient_norm: g,
            tolerance: tol_crit,
        });
    }
    let full = eval
        .hessian
        .clone()
        .expect("evaluation with Hessian detail");
    let n = full.nrows();
    let restricted = full.view((0, 0), (n - 1, n - 1)).into_owned();
    let ef = sorted_eigenvalues(&full);
    let er = sorted_eigenvalues(&restricted);
    let monodromy = eval.monodromy.expect("evaluation with Hessian detail");
    Ok(SpectralReport {
        full: index_report(&ef, TOL_RANK),
        restricted: index_report(&er, TOL_RANK),
        hessian_full: full,
        hessian_restricted: restricted,
        eigenvalues_full: ef,
        eigenvalues_restricted: er,
        monodromy_eigenvalues: monodromy_eigenvalues(&monodromy.matrix),
        monodromy,
        asymmetry: eval.asymmetry,
        gradient_norm: g,
    })
}

/// Relative singular-value threshold for complex kernel dimensions.
pub const TOL_KERNEL: f64 = 1e-6;

/// `dim_C ker(P − λI)` by singular values below `tol · max(1, ‖P‖)`.
pub fn complex_kernel_dimension(p: &Matrix4<f64>, lambda: Complex64, tol: f64) -> usize {
    let mut a: Matrix4<Complex64> = p.map(|x| Complex64::new(x, 0.0));
    for i in 0..4 {
        a[(i, i)] -= lambda;
    }
    let thresh = tol * p.norm().max(1.0);
    a.singular_values().iter().filter(|&&s| s < thresh).count()
}

/// `Σ_{λ^m = 1} dim_C ker(P − λI)`, the nullity of the `m`-th iterate.
pub fn nullity_via_monodromy(p: &Propagator, m: usize) -> usize {
    nullity_via_monodromy_tol(p, m, TOL_KERNEL)
}

pub fn nullity_via_monodromy_tol(p: &Propagator, m: usize, tol: f64) -> usize {
    assert!(m >= 1, "m must be positive");
    (0..m)
        .map(|j| {
            let th = std::f64::consts::TAU * j as f64 / m as f64;
            complex_kernel_dimension(&p.matrix, Complex64::from_polar(1.0, th), tol)
        })
        .sum()
}

/// One class of iterates sharing the same set of unit-circle eigenvalues that are roots of unity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullityClass {
    pub representative: usize,
    pub nullity: usize,
    pub members: Vec<usize>,
    /// Orders `q` of the roots of unity in the class's eigenvalue set.
    pub root_orders: Vec<usize>,
}

/// Order of `λ` as a root of unity, if it is one of order `≤ q_max` (to `tol`).
pub fn root_of_unity_order(lambda: Complex64, q_max: usize, tol: f64) -> Option<usize> {
    if (lambda.norm() - 1.0).abs() > tol {
        return None;
    }
    let x = lambda.arg() / std::f64::consts::TAU;
    (1..=q_max).find(|&q| {
        let y = x * q as f64;
        (y - y.round()).abs() < tol * q as f64
    })
}

/// Partition of `{1, …, m_max}` by the set of eigenvalues of `P` that are `m`-th roots of unity.
pub fn nullity_partition(p: &Propagator, m_max: usize) -> Vec<NullityClass> {
    let ev = monodromy_eigenvalues(&p.matrix);
    let orders: Vec<Option<usize>> = ev
        .iter()
        .map(|&l| root_of_unity_order(l, m_max, 1e-7))
        .collect();
    let sigma = |m: usize| -> Vec<usize> {
        orders
            .iter()
            .enumerate()
            .filter_map(|(j, o)| o.filter(|q| m.is_multiple_of(*q)).map(|_| j))
            .collect()
    };
    let mut classes: Vec<(Vec<usize>, NullityClass)> = Vec::new();
    for m in 1..=m_max {
        let s = sigma(m);
        if let Some((_, c)) = classes.iter_mut().find(|(key, _)| *key == s) {
            c.members.push(m);
        } else {
            let mut root_orders: Vec<usize> = s.iter().filter_map(|&j| orders[j]).collect();
            root_orders.sort_unstable();
            root_orders.dedup();
            classes.push((
                s,
                NullityClass {
                    representative: m,
                    nullity: nullity_via_monodromy(p, m),
                    members: vec![m],
                    root_orders,
                },
            ));
        }
    }
    classes.into_iter().map(|(_, c)| c).collect()
}

/// Positions at time `s ∈ [0, τ)` along each segment of a critical loop: the
/// same orbit sampled with a shifted origin.
pub fn time_shift<M: Lagrangian + ?Sized>(
    model: &M,
    lp: &DiscreteLoop,
    s: f64,
) -> Result<DiscreteLoop> {
    if s == 0.0 {
        return Ok(lp.clone());
    }
    let eval = evaluate(model, 0.0, lp, Detail::Gradient)?;
    let pts: Vec<Result<Vec2>> = eval
        .segments
        .par_iter()
        .map(|seg| {
            flow_end(model, seg.q0, seg.nu_minus, s, false, &FlowOptions::tight()).map(|p| p.q)
        })
        .collect();
    let points = pts.into_iter().collect::<Result<Vec<_>>>()?;
    DiscreteLoop::new(&model.torus(), points, lp.tau)
}

/// Residuals of the kernel characterization for one kernel vector `(v, σ)`
/// of the full Hessian: the field `ξ = θ_v + σψ` along the broken orbit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelCheck {
    pub sigma: f64,
    /// Sup-norm of `J ξ − (d/dt E_v + E_q) σ/τ`.
    pub jacobi_residual: f64,
    /// `σ ∫⟨L_vv γ̇, γ̇⟩ − τ ∫ dE[(ξ, ξ̇)]`.
    pub sigma_residual: f64,
    /// Largest jump of `ξ̇` at the break points.
    pub derivative_jump: f64,
}

/// Checks every kernel vector of `H` at a critical loop.
pub fn verify_kernel<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    lp: &DiscreteLoop,
    samples_per_segment: usize,
) -> Result<Vec<KernelCheck>> {
    let eval = evaluate(model, k, lp, Detail::Hessian)?;
    let report = spectral_report(&eval, critical_tolerance(lp))?;
    let h = lp.h();
    let eig = SymmetricEigen::new(report.hessian_full.clone());
    let tol = report.full.tol_rank;
    let mut out = Vec::new();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() >= tol {
            continue;
        }
        let vec = eig.eigenvectors.column(j);
        let v: Vec<Vec2> = (0..h)
            .map(|i| Vec2::new(vec[2 * i], vec[2 * i + 1]))
            .collect();
        let sigma = vec[2 * h];
        let mut jac: f64 = 0.0;
        let mut kin = 0.0;
        let mut de = 0.0;
        let mut starts = Vec::with_capacity(h);
        let mut ends = Vec::with_capacity(h);
        for (i, seg) in eval.segments.iter().enumerate() {
            let th = boundary_jacobi_field(model, seg, v[i], v[(i + 1) % h], samples_per_segment)?;
            let ps = psi_field(model, seg, samples_per_segment)?;
            let n = th.times.len();
            let mut xi = th.clone();
            for t in 0..n {
                xi.values[t] += ps.values[t] * sigma;
                xi.derivatives[t] += ps.derivatives[t] * sigma;
            }
            let forcing = ps.energy_forcing(model, seg.tau);
            jac = jac.max(xi.jacobi_residual(model, |t| forcing[t] * sigma));
            // Simpson-free trapezoid is enough at this sampling density.
            let dt = xi.times[1] - xi.times[0];
            for t in 0..n {
                let wgt = if t == 0 || t == n - 1 { 0.5 * dt } else { dt };
                let s = &xi.curve[t];
                let jt = model.jet(s.q, s.v);
                kin += wgt * (jt.lvv * s.v).dot(&s.v);
                let eq = jt.lqv * s.v - jt.lq;
                let ev = jt.lvv * s.v;
                de += wgt * (eq.dot(&xi.values[t]) + ev.dot(&xi.derivatives[t]));
            }
            starts.push(xi.derivatives[0]);
            ends.push(xi.derivatives[n - 1]);
        }
        let jump = (0..h)
            .map(|i| (ends[(i + h - 1) % h] - starts[i]).norm())
            .fold(0.0, f64::max);
        out.push(KernelCheck {
            sigma,
            jacobi_residual: jac,
            sigma_residual: sigma * kin - lp.tau * de,
            derivative_jump: jump,
        });
    }
    Ok(out)
}

/// Index and nullity of `H_m` and `h_m` for the iterates `m = 1..=m_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateIndices {
    pub m: usize,
    pub ind_full: usize,
    pub nul_full: usize,
    pub ind_restricted: usize,
    pub nul_restricted: usize,
    pub nul_monodromy: usize,
}

pub fn iterate_indices<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    lp: &DiscreteLoop,
    m_max: usize,
) -> Result<Vec<IterateIndices>> {
    let base = discrete_hessian(model, k, lp)?;
    (1..=m_max)
        .map(|m| {
            let r = if m == 1 {
                base.clone()
            } else {
                discrete_hessian(model, k, &iterate(lp, m))?
            };
            Ok(IterateIndices {
                m,
                ind_full: r.full.index,
                nul_full: r.full.nullity,
                ind_restricted: r.restricted.index,
                nul_restricted: r.restricted.nullity,
                nul_monodromy: nullity_via_monodromy(&base.monodromy, m),
            })
        })
        .collect()
}

/// Data of the linear-growth construction for the restricted index of iterates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthWitness {
    /// Smallest iterate with positive restricted index.
    pub m0: usize,
    pub m1: usize,
    /// `h_{m0}(v, v) < 0` for the most negative eigenvector `v`.
    pub delta1: f64,
    /// Gluing correction: `h_{m0+1}((v, 0), (v, 0)) − δ₁`.
    pub delta2: f64,
}

impl GrowthWitness {
    /// Lower bound `⌊m / (m₀m₁ + 1)⌋` on `ind(h_m)`.
    pub fn floor(&self, m: usize) -> usize {
        m / (self.m0 * self.m1 + 1)
    }
}

/// Builds the witness from the restricted Hessians of the iterates.
/// Returns `None` if the restricted index vanishes for `m ≤ m_search`.
pub fn growth_witness<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    lp: &DiscreteLoop,
    m_search: usize,
) -> Result<Option<GrowthWitness>> {
    for m0 in 1..=m_search {
        let r = discrete_hessian(model, k, &iterate(lp, m0))?;
        if r.restricted.index == 0 {
            continue;
        }
        let eig = SymmetricEigen::new(r.hessian_restricted.clone());
        let (j, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .expect("nonempty");
        let v = eig.eigenvectors.column(j).into_owned();
        let delta1 = (v.transpose() * &r.hessian_restricted * &v)[(0, 0)];
        let big = discrete_hessian(model, k, &iterate(lp, m0 + 1))?;
        let n = big.hessian_restricted.nrows();
        let mut w = DVector::zeros(n);
        w.rows_mut(0, v.len()).copy_from(&v);
        let glued = (w.transpose() * &big.hessian_restricted * &w)[(0, 0)];
        let delta2 = glued - delta1;
        let m1 = ((delta2 / delta1).abs().ceil() as usize).max(1);
        return Ok(Some(GrowthWitness {
            m0,
            m1,
            delta1,
            delta2,
        }));
    }
    Ok(None)
}

/// Default number of points for a loop of the given period:
/// `max(16, ⌈period · v_max / (ρ/2)⌉)`.
pub fn default_h(period: f64, v_max: f64, rho: f64) -> usize {
    ((period * v_max / (0.5 * rho)).ceil() as usize).max(16)
}
