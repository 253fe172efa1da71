//! Critical points of the discrete action: descent to local minimizers,
//! mountain-pass values along paths of loops, multiplicity scans and the
//! a-priori period and length bounds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{
    evaluate_with, iterate, spectral_report, Detail, DiscreteLoop, EvalOptions, LoopEvaluation,
    SpectralReport, SpectralSummary,
};
use crate::error::{Error, Result};
use crate::flow::{flow_end, FlowOptions};
use crate::mane::{e0, optimize_tau, smooth_curve_action};
use crate::model::{energy_from_jet, max_speed_on_level, Lagrangian, TorusConfig, Vec2};
use crate::shoot::{estimate_scales_with, ShootOptions};

/// Which critical points a descent is after.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Saddle-free Newton with an Armijo line search on `S_k`.
    Minimize,
    /// Levenberg–Marquardt on `½‖∇S_k‖²`; converges to saddles as well.
    Critical,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchOptions {
    pub mode: SearchMode,
    pub tol_crit: f64,
    pub max_iterations: usize,
    pub tau_floor: f64,
    /// Candidate loops with a longer step or segment time are rejected.
    pub max_step: f64,
    pub max_tau: f64,
    pub shoot: ShootOptions,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            mode: SearchMode::Minimize,
            tol_crit: 1e-8,
            max_iterations: 200,
            tau_floor: 1e-5,
            max_step: f64::INFINITY,
            max_tau: f64::INFINITY,
            shoot: ShootOptions::default(),
        }
    }
}

impl SearchOptions {
    pub fn critical() -> Self {
        Self {
            mode: SearchMode::Critical,
            ..Self::default()
        }
    }
}

/// A critical loop with its second-order data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrbitRecord {
    #[serde(rename = "loop")]
    pub lp: DiscreteLoop,
    pub action: f64,
    pub period: f64,
    pub gradient_norm: f64,
    /// `max |E − k|` over the segment endpoints.
    pub energy_error: f64,
    pub winding: [i64; 2],
    pub is_local_min: bool,
    pub spectral: SpectralSummary,
    pub iterations: usize,
    pub self_intersections: usize,
    /// `∫|γ̇| dt` along the broken orbit.
    pub length: f64,
    /// Positions along the broken orbit, 16 per segment, wrapped to the torus.
    #[serde(skip)]
    pub trace: Vec<Vec2>,
    #[serde(skip)]
    pub report: Option<SpectralReport>,
}

fn coords(torus: &TorusConfig, lp: &DiscreteLoop) -> DVector<f64> {
    let lifted = lp.lifted(torus);
    let h = lp.h();
    let mut x = DVector::zeros(2 * h + 1);
    for i in 0..h {
        x[2 * i] = lifted[i].x;
        x[2 * i + 1] = lifted[i].y;
    }
    x[2 * h] = lp.tau;
    x
}

fn from_coords(torus: &TorusConfig, x: &DVector<f64>) -> Result<DiscreteLoop> {
    let h = (x.len() - 1) / 2;
    let pts = (0..h).map(|i| Vec2::new(x[2 * i], x[2 * i + 1])).collect();
    DiscreteLoop::new(torus, pts, x[2 * h])
}

fn eval<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    lp: &DiscreteLoop,
    detail: Detail,
    shoot: &ShootOptions,
    warm: Option<&LoopEvaluation>,
) -> Result<LoopEvaluation> {
    let opts = EvalOptions {
        shoot: *shoot,
        warm_start: warm
            .filter(|w| w.segments.len() == lp.h())
            .map(|w| w.nu_minus()),
    };
    evaluate_with(model, k, lp, detail, &opts)
}

/// Length, energy error and self-intersections of a critical evaluation.
fn orbit_record<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    lp: &DiscreteLoop,
    ev: &LoopEvaluation,
    iterations: usize,
    tol_crit: f64,
) -> Result<OrbitRecord> {
    let torus = model.torus();
    let report = spectral_report(ev, tol_crit)?;
    let mut energy_error: f64 = 0.0;
    for s in &ev.segments {
        let em = energy_from_jet(&model.jet(s.q0, s.nu_minus), &s.nu_minus);
        let ep = energy_from_jet(&model.jet(s.q1, s.nu_plus), &s.nu_plus);
        energy_error = energy_error.max((em - k).abs()).max((ep - k).abs());
    }
    let sampled: Vec<Result<(f64, Vec<Vec2>)>> = ev
        .segments
        .par_iter()
        .map(|s| {
            let pts = s.samples(model, 16)?;
            let dt = s.tau / 16.0;
            let len = pts
                .iter()
                .enumerate()
                .map(|(i, (_, st))| if i == 0 || i == 16 { 0.5 * dt } else { dt } * st.v.norm())
                .sum();
            Ok((
                len,
                pts[..16].iter().map(|(_, st)| torus.wrap(st.q)).collect(),
            ))
        })
        .collect();
    let mut length = 0.0;
    let mut trace = Vec::with_capacity(16 * ev.segments.len());
    for r in sampled {
        let (l, pts) = r?;
        length += l;
        trace.extend(pts);
    }
    Ok(OrbitRecord {
        lp: lp.clone(),
        action: ev.action,
        period: lp.period(),
        gradient_norm: ev.gradient.norm(),
        energy_error,
        winding: lp.winding(&torus),
        is_local_min: report.full.index == 0,
        spectral: report.summary(),
        iterations,
        self_intersections: self_intersections(&torus, lp),
        length,
        trace,
        report: Some(report),
    })
}

/// Metric-scaled Hessian `G^{-1/2} H G^{-1/2}` and differential `G^{-1/2} dS`,
/// with `G = diag(1, …, 1, h)`.
fn scaled(ev: &LoopEvaluation) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let h = ev.segments.len();
    let n = 2 * h + 1;
    let mut s = DVector::from_element(n, 1.0);
    s[n - 1] = 1.0 / (h as f64).sqrt();
    let hs = ev.hessian.as_ref().expect("evaluation with Hessian detail");
    let mut m = hs.clone();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] *= s[i] * s[j];
        }
    }
    let g = ev.gradient.differential().component_mul(&s);
    (m, g, s)
}

fn newton_direction(ev: &LoopEvaluation, mode: SearchMode, damping: f64) -> DVector<f64> {
    let (m, g, s) = scaled(ev);
    let eig = SymmetricEigen::new(m);
    let lmax = eig.eigenvalues.amax().max(1e-300);
    let mut d = DVector::zeros(g.len());
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let u = eig.eigenvectors.column(j);
        let c = u.dot(&g);
        let f = match mode {
            SearchMode::Minimize => 1.0 / l.abs().max(1e-8 * lmax),
            SearchMode::Critical => l / (l * l + damping),
        };
        d -= u * (c * f);
    }
    d.component_mul(&s)
}

/// Scales `d` so that no point moves more than `move_cap` and `|dτ| ≤ τ/2`.
fn cap_step(d: &DVector<f64>, tau: f64, move_cap: f64) -> DVector<f64> {
    let h = (d.len() - 1) / 2;
    let mut worst: f64 = 0.0;
    for i in 0..h {
        worst = worst.max((d[2 * i].powi(2) + d[2 * i + 1].powi(2)).sqrt());
    }
    let mut f: f64 = 1.0;
    if worst > move_cap {
        f = f.min(move_cap / worst);
    }
    if d[2 * h].abs() > 0.5 * tau {
        f = f.min(0.5 * tau / d[2 * h].abs());
    }
    d * f
}

/// Descends `S_k` from `seed` until `‖∇S_k‖ ≤ tol_crit`.
pub fn descend<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    seed: &DiscreteLoop,
) -> Result<OrbitRecord> {
    descend_with(model, k, seed, &SearchOptions::default()).map(|(r, _)| r)
}

/// Descent with explicit options; also returns the action after every
/// accepted step (the first entry is the seed).
pub fn descend_with<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    seed: &DiscreteLoop,
    opts: &SearchOptions,
) -> Result<(OrbitRecord, Vec<f64>)> {
    let torus = model.torus();
    let mut lp = seed.clone();
    let mut ev = eval(model, k, &lp, Detail::Hessian, &opts.shoot, None)?;
    let mut history = vec![ev.action];
    let mut damping = 1e-6;
    let mut iterations = 0;
    while ev.gradient.norm() > opts.tol_crit {
        if iterations >= opts.max_iterations {
            return Err(Error::NoConvergence(format!(
                "gradient norm {:.3e} after {} iterations",
                ev.gradient.norm(),
                iterations
            )));
        }
        iterations += 1;
        let x = coords(&torus, &lp);
        let cap = 0.5 * lp.max_step(&torus).max(1e-3 * torus.min_side());
        let accepted = match opts.mode {
            SearchMode::Minimize => minimize_step(model, k, &torus, &x, &ev, cap, opts)?,
            SearchMode::Critical => {
                critical_step(model, k, &torus, &x, &ev, cap, opts, &mut damping)?
            }
        };
        let Some((next, _)) = accepted else {
            return Err(Error::NoConvergence(format!(
                "no acceptable step at gradient norm {:.3e}",
                ev.gradient.norm()
            )));
        };
        if next.tau < opts.tau_floor {
            return Err(Error::PeriodCollapse {
                floor: opts.tau_floor,
            });
        }
        ev = eval(model, k, &next, Detail::Hessian, &opts.shoot, Some(&ev))?;
        lp = next;
        history.push(ev.action);
    }
    let rec = orbit_record(model, k, &lp, &ev, iterations, opts.tol_crit.max(1e-6))?;
    Ok((rec, history))
}

fn admissible(torus: &TorusConfig, x: &DVector<f64>, opts: &SearchOptions) -> Option<DiscreteLoop> {
    let lp = from_coords(torus, x).ok()?;
    (lp.tau <= opts.max_tau && lp.max_step(torus) <= opts.max_step).then_some(lp)
}

fn minimize_step<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    torus: &TorusConfig,
    x: &DVector<f64>,
    ev: &LoopEvaluation,
    cap: f64,
    opts: &SearchOptions,
) -> Result<Option<(DiscreteLoop, LoopEvaluation)>> {
    let df = ev.gradient.differential();
    let h = ev.segments.len();
    let mut steepest = -ev.gradient.differential();
    steepest[2 * h] /= h as f64;
    let g0 = ev.gradient.norm();
    for dir in [newton_direction(ev, SearchMode::Minimize, 0.0), steepest] {
        let d = cap_step(&dir, x[2 * h], cap);
        let slope = df.dot(&d);
        if slope >= 0.0 {
            continue;
        }
        let mut alpha = 1.0;
        for _ in 0..16 {
            let cand = x + &d * alpha;
            if cand[2 * h] > 0.0 {
                if let Some(lp) = admissible(torus, &cand, opts) {
                    if let Ok(e) = eval(model, k, &lp, Detail::Gradient, &opts.shoot, Some(ev)) {
                        let armijo = e.action <= ev.action + 1e-4 * alpha * slope;
                        // Steps within round-off of S that shrink the gradient.
                        let flat = e.action <= ev.action + 1e-13 * (1.0 + ev.action.abs())
                            && e.gradient.norm() < 0.5 * g0;
                        if armijo || flat {
                            return Ok(Some((lp, e)));
                        }
                    }
                }
            }
            alpha *= 0.5;
        }
    }
    Ok(None)
}

#[allow(clippy::too_many_arguments)]
fn critical_step<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    torus: &TorusConfig,
    x: &DVector<f64>,
    ev: &LoopEvaluation,
    cap: f64,
    opts: &SearchOptions,
    damping: &mut f64,
) -> Result<Option<(DiscreteLoop, LoopEvaluation)>> {
    let h = ev.segments.len();
    let g0 = ev.gradient.norm();
    for _ in 0..40 {
        let d = cap_step(
            &newton_direction(ev, SearchMode::Critical, *damping),
            x[2 * h],
            cap,
        );
        let cand = x + &d;
        if cand[2 * h] > 0.0 {
            if let Some(lp) = admissible(torus, &cand, opts) {
                if let Ok(e) = eval(model, k, &lp, Detail::Gradient, &opts.shoot, Some(ev)) {
                    if e.gradient.norm() < g0 {
                        *damping = (*damping / 3.0).max(1e-16);
                        return Ok(Some((lp, e)));
                    }
                }
            }
        }
        *damping *= 4.0;
    }
    Ok(None)
}

/// Levenberg–Marquardt refinement to the nearest critical loop of any index.
pub fn refine_critical<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    seed: &DiscreteLoop,
) -> Result<OrbitRecord> {
    descend_with(model, k, seed, &SearchOptions::critical()).map(|(r, _)| r)
}

fn segments_cross(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> bool {
    let cross = |o: Vec2, p: Vec2, q: Vec2| (p - o).perp(&(q - o));
    let d1 = cross(b0, b1, a0);
    let d2 = cross(b0, b1, a1);
    let d3 = cross(a0, a1, b0);
    let d4 = cross(a0, a1, b1);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Proper crossings between the polygon's edges, counted on the torus
/// (edges are compared under the 9 nearest lattice translations).
pub fn self_intersections(torus: &TorusConfig, lp: &DiscreteLoop) -> usize {
    let h = lp.h();
    let disp = lp.displacements(torus);
    let edges: Vec<(Vec2, Vec2)> = (0..h)
        .map(|i| (lp.points[i], lp.points[i] + disp[i]))
        .collect();
    let mut count = 0;
    for i in 0..h {
        for j in i..h {
            for a in -1..=1 {
                for b in -1..=1 {
                    let adjacent = j == i || j == i + 1 || (i == 0 && j == h - 1);
                    if adjacent && a == 0 && b == 0 {
                        continue;
                    }
                    if j == i && (a, b) <= (0, 0) {
                        continue;
                    }
                    let s = Vec2::new(a as f64 * torus.sides[0], b as f64 * torus.sides[1]);
                    if segments_cross(edges[i].0, edges[i].1, edges[j].0 + s, edges[j].1 + s) {
                        count += 1;
                    }
                }
            }
        }
    }
    count
}

/// `∫_T |dθ|` for `θ = L_v(q, 0)`, midpoint rule on an `n²` grid.
pub fn exterior_derivative_mass<M: Lagrangian + ?Sized>(model: &M, n: usize) -> f64 {
    let t = model.torus();
    let cell = t.area() / (n * n) as f64;
    (0..n * n)
        .into_par_iter()
        .map(|ij| {
            let q = Vec2::new(
                (((ij / n) as f64) + 0.5) * t.sides[0] / n as f64,
                (((ij % n) as f64) + 0.5) * t.sides[1] / n as f64,
            );
            let j = model.jet(q, Vec2::zeros());
            (j.lqv[(0, 1)] - j.lqv[(1, 0)]).abs() * cell
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

/// Upper bound on the period of a loop with the given action:
/// `(S + ∫|dθ|) / (k − e₀)`.
pub fn period_bound<M: Lagrangian + ?Sized>(model: &M, k: f64, action_value: f64) -> Result<f64> {
    let e = e0(model);
    if k <= e {
        return Err(Error::InvalidParameter(format!(
            "period bound needs k > e0 = {e}"
        )));
    }
    Ok((action_value + exterior_derivative_mass(model, 256)) / (k - e))
}

/// `period_bound` times the largest speed on `E⁻¹(k)`.
pub fn length_bound<M: Lagrangian + ?Sized>(model: &M, k: f64, action_value: f64) -> Result<f64> {
    Ok(period_bound(model, k, action_value)? * max_speed_on_level(model, k, 32, 32))
}

/// Closed-curve seeds for the multi-start search: circles on a grid of centers
/// and straight closed lines in the four primitive classes, each with its
/// analytically optimized speed. Curves are parametrized on `[0, 1]`.
type Curve = Box<dyn Fn(f64) -> Vec2 + Send + Sync>;

fn seed_curves(torus: &TorusConfig, rho: f64) -> Vec<(bool, Curve)> {
    let mut out: Vec<(bool, Curve)> = Vec::new();
    let centers = 8;
    let r_max = 0.45 * torus.min_side();
    let r_min = (0.5 * rho).min(r_max);
    let radii: Vec<f64> = (0..6)
        .map(|i| r_min * (r_max / r_min).powf(i as f64 / 5.0))
        .collect();
    for i in 0..centers {
        for j in 0..centers {
            let c = Vec2::new(
                torus.sides[0] * i as f64 / centers as f64,
                torus.sides[1] * j as f64 / centers as f64,
            );
            for &r in &radii {
                for orient in [1.0, -1.0] {
                    out.push((
                        false,
                        Box::new(move |s: f64| {
                            let th = orient * std::f64::consts::TAU * s;
                            c + Vec2::new(r * th.cos(), r * th.sin())
                        }),
                    ));
                }
            }
        }
    }
    let offsets = 16;
    for axis in 0..2 {
        for o in 0..offsets {
            for dir in [1.0, -1.0] {
                let (s0, s1) = (torus.sides[0], torus.sides[1]);
                let off = o as f64 / offsets as f64;
                out.push((
                    true,
                    Box::new(move |s: f64| {
                        if axis == 0 {
                            Vec2::new(dir * s * s0, off * s1)
                        } else {
                            Vec2::new(off * s0, dir * s * s1)
                        }
                    }),
                ));
            }
        }
    }
    out
}

fn curve_length<F: Fn(f64) -> Vec2 + ?Sized>(c: &F, n: usize) -> f64 {
    (0..n)
        .map(|i| (c((i + 1) as f64 / n as f64) - c(i as f64 / n as f64)).norm())
        .sum()
}

/// Number of points for a loop whose steps stay below `step`.
fn points_for(length: f64, step: f64) -> usize {
    ((length / step).ceil() as usize).max(16)
}

/// Multi-start descent from negative-action seeds: every closed straight line
/// with negative action and the `n_seeds` most negative circles. Returns the
/// lowest-action local minimizer, or `NotFound`.
pub fn find_local_minimizer<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    n_seeds: usize,
) -> Result<OrbitRecord> {
    let mins = local_minimizers(model, k, n_seeds)?;
    mins.into_iter().next().ok_or_else(|| {
        Error::NotFound(format!(
            "no negative-action local minimizer from {n_seeds} seeds"
        ))
    })
}

/// All distinct local minimizers with negative action reached from the seeds
/// of [`find_local_minimizer`], sorted by action.
pub fn local_minimizers<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    n_seeds: usize,
) -> Result<Vec<OrbitRecord>> {
    let torus = model.torus();
    let e = e0(model);
    if k <= e {
        return Err(Error::InvalidParameter(format!(
            "energy {k} is not above e0 = {e}"
        )));
    }
    let scales = estimate_scales_with(model, k, 0, 64)?;
    let seeds = seed_curves(&torus, scales.rho_inj);
    let mut scored: Vec<(f64, f64, usize)> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, (_, c))| {
            let (s, sigma) = smooth_curve_action(model, k, c, 128);
            (s, sigma, i)
        })
        .filter(|(s, _, _)| *s < 0.0)
        .collect();
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite actions")
            .then(a.2.cmp(&b.2))
    });
    let lines = scored.iter().filter(|x| seeds[x.2].0);
    let circles = scored.iter().filter(|x| !seeds[x.2].0).take(n_seeds);
    let chosen: Vec<(f64, f64, usize)> = lines.chain(circles).copied().collect();
    let step = (0.05 * torus.min_side()).min(0.5 * scales.rho_inj);
    let runs: Vec<Option<OrbitRecord>> = chosen
        .par_iter()
        .map(|&(_, sigma, i)| {
            let c = &seeds[i].1;
            let len = curve_length(c.as_ref(), 256);
            let h = points_for(len, step).max(points_for(len / sigma, 0.5 * scales.tau_inj));
            let tau0 = len / sigma / h as f64;
            let lp = DiscreteLoop::from_curve(&torus, h, tau0, c).ok()?;
            let (tau, _) =
                optimize_tau(model, k, &lp, 0.5 * tau0, (2.0 * tau0).min(scales.tau_inj)).ok()?;
            let lp = DiscreteLoop { tau, ..lp };
            let opts = SearchOptions {
                max_step: scales.rho_inj,
                max_tau: scales.tau_inj,
                max_iterations: 100,
                ..SearchOptions::default()
            };
            let rr = descend_with(model, k, &lp, &opts).map(|(r, _)| r);
            let rec = rr.ok()?;
            (rec.is_local_min && rec.action < 0.0).then_some(rec)
        })
        .collect();
    let mut found: Vec<OrbitRecord> = runs.into_iter().flatten().collect();
    found.sort_by(|a, b| a.action.partial_cmp(&b.action).expect("finite actions"));
    Ok(dedup_orbits(&torus, found))
}

fn point_segment_distance(torus: &TorusConfig, p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let p = a + torus.displacement(a, p);
    let b = a + torus.displacement(a, b);
    let d = b - a;
    let t = if d.norm_squared() > 0.0 {
        ((p - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + d * t)).norm()
}

/// Hausdorff distance between two closed polylines on the torus, measured
/// from the vertices of each to the edges of the other.
fn polyline_hausdorff(torus: &TorusConfig, a: &[Vec2], b: &[Vec2]) -> f64 {
    let dir = |x: &[Vec2], y: &[Vec2]| {
        x.par_iter()
            .map(|p| {
                (0..y.len())
                    .map(|i| point_segment_distance(torus, *p, y[i], y[(i + 1) % y.len()]))
                    .fold(f64::INFINITY, f64::min)
            })
            .reduce(|| 0.0, f64::max)
    };
    dir(a, b).max(dir(b, a))
}

fn orbit_points(rec: &OrbitRecord) -> &[Vec2] {
    if rec.trace.is_empty() {
        &rec.lp.points
    } else {
        &rec.trace
    }
}

/// Thresholds used by [`same_orbit`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DedupThresholds {
    /// Hausdorff distance of the traces, relative to the torus diameter.
    pub hausdorff: f64,
    /// Tolerance on the period ratio being an integer `m`, relative to `m`.
    pub period_ratio: f64,
    /// Tolerance on `S(longer) = m·S(shorter)`, relative to `1 + |S|`.
    pub action: f64,
}

pub const DEDUP: DedupThresholds = DedupThresholds {
    hausdorff: 1e-3,
    period_ratio: 1e-4,
    action: 1e-4,
};

/// Whether two records describe the same closed orbit, possibly iterated.
pub fn same_orbit(torus: &TorusConfig, a: &OrbitRecord, b: &OrbitRecord) -> bool {
    let (lo, hi) = if a.period <= b.period { (a, b) } else { (b, a) };
    let ratio = hi.period / lo.period;
    let m = ratio.round();
    if m < 1.0 || (ratio - m).abs() > DEDUP.period_ratio * m {
        return false;
    }
    polyline_hausdorff(torus, orbit_points(a), orbit_points(b)) < DEDUP.hausdorff * torus.diameter()
        && (hi.action - m * lo.action).abs() <= DEDUP.action * (1.0 + hi.action.abs())
}

/// Keeps the first record of every orbit; iterates are merged into the
/// shortest representative.
pub fn dedup_orbits(torus: &TorusConfig, records: Vec<OrbitRecord>) -> Vec<OrbitRecord> {
    let mut out: Vec<OrbitRecord> = Vec::new();
    for r in records {
        match out.iter_mut().find(|o| same_orbit(torus, o, &r)) {
            Some(o) => {
                if r.period < o.period * (1.0 - 1e-4) {
                    *o = r;
                }
            }
            None => out.push(r),
        }
    }
    out
}

/// Moves the points of a critical loop along the orbit to `new_h` equally
/// timed samples.
pub fn resample<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    lp: &DiscreteLoop,
    new_h: usize,
) -> Result<DiscreteLoop> {
    let torus = model.torus();
    let ev = eval(
        model,
        k,
        lp,
        Detail::Gradient,
        &ShootOptions::default(),
        None,
    )?;
    let period = lp.period();
    let tau = period / new_h as f64;
    let pts: Vec<Result<Vec2>> = (0..new_h)
        .into_par_iter()
        .map(|j| {
            let t = j as f64 * tau;
            let i = ((t / lp.tau).floor() as usize).min(lp.h() - 1);
            let s = t - i as f64 * lp.tau;
            let seg = &ev.segments[i];
            if s <= 0.0 {
                return Ok(seg.q0);
            }
            flow_end(model, seg.q0, seg.nu_minus, s, false, &FlowOptions::tight()).map(|p| p.q)
        })
        .collect();
    DiscreteLoop::new(&torus, pts.into_iter().collect::<Result<Vec<_>>>()?, tau)
}

/// A path of loops and its mountain-pass value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinimaxResult {
    pub n: usize,
    pub value: f64,
    pub path: Vec<DiscreteLoop>,
    pub path_actions: Vec<f64>,
    pub max_node: usize,
    pub sweeps: usize,
    /// Critical loop refined from the max node, if the refinement converged.
    pub near_critical: Option<OrbitRecord>,
    pub refine_error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinimaxOptions {
    pub nodes: usize,
    pub max_sweeps: usize,
    /// Largest point displacement per node update.
    pub step: f64,
    /// Stop once the max-node action stayed within this (relative) band
    /// over the last `window` sweeps.
    pub tolerance: f64,
    pub window: usize,
    /// Let the highest node climb along the path tangent.
    pub climbing: bool,
    pub refine: bool,
}

impl Default for MinimaxOptions {
    fn default() -> Self {
        Self {
            nodes: 32,
            max_sweeps: 400,
            step: 0.1,
            tolerance: 5e-4,
            window: 10,
            climbing: false,
            refine: true,
        }
    }
}

/// Lifted coordinates of a loop starting at its first point.
fn lifted_coords(torus: &TorusConfig, lp: &DiscreteLoop) -> DVector<f64> {
    coords(torus, lp)
}

/// Natural cubic spline through `(s_i, y_i)` evaluated at `t`, per coordinate.
fn spline_resample(s: &[f64], ys: &[DVector<f64>], targets: &[f64]) -> Vec<DVector<f64>> {
    let n = s.len();
    let dim = ys[0].len();
    if n < 3 {
        return targets
            .iter()
            .map(|&t| {
                let w = (t - s[0]) / (s[n - 1] - s[0]);
                &ys[0] * (1.0 - w) + &ys[n - 1] * w
            })
            .collect();
    }
    // Second derivatives by the tridiagonal system with natural ends.
    let mut m2 = vec![DVector::zeros(dim); n];
    let mut c = vec![0.0; n];
    let mut d = vec![DVector::zeros(dim); n];
    for i in 1..n - 1 {
        let h0 = s[i] - s[i - 1];
        let h1 = s[i + 1] - s[i];
        let a = h0;
        let b = 2.0 * (h0 + h1);
        let cc = h1;
        let rhs = ((&ys[i + 1] - &ys[i]) / h1 - (&ys[i] - &ys[i - 1]) / h0) * 6.0;
        let denom = b - a * c[i - 1];
        c[i] = cc / denom;
        d[i] = (rhs - &d[i - 1] * a) / denom;
    }
    for i in (1..n - 1).rev() {
        m2[i] = &d[i] - &m2[i + 1] * c[i];
    }
    targets
        .iter()
        .map(|&t| {
            let mut i = s.partition_point(|&x| x <= t).saturating_sub(1);
            if i >= n - 1 {
                i = n - 2;
            }
            let h = s[i + 1] - s[i];
            let a = (s[i + 1] - t) / h;
            let b = (t - s[i]) / h;
            &ys[i] * a
                + &ys[i + 1] * b
                + (&m2[i] * (a * a * a - a) + &m2[i + 1] * (b * b * b - b)) * (h * h / 6.0)
        })
        .collect()
}

fn metric_distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let n = a.len();
    let h = ((n - 1) / 2) as f64;
    let d = a - b;
    (d.rows(0, n - 1).norm_squared() + h * d[n - 1] * d[n - 1]).sqrt()
}

/// String method between two loops with the same number of points and the
/// same first point, in the lifted coordinates. Endpoints never move.
pub fn string_method<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    start: &DiscreteLoop,
    end: &DiscreteLoop,
    opts: &MinimaxOptions,
) -> Result<MinimaxResult> {
    let torus = model.torus();
    if start.h() != end.h() {
        return Err(Error::InvalidParameter(
            "path endpoints need the same number of points".into(),
        ));
    }
    let a = lifted_coords(&torus, start);
    let mut b = lifted_coords(&torus, end);
    // Align the lift of the end loop with the start loop.
    let shift =
        torus.displacement(start.points[0], end.points[0]) + start.points[0] - end.points[0];
    for i in 0..end.h() {
        b[2 * i] += shift.x;
        b[2 * i + 1] += shift.y;
    }
    let n = opts.nodes.max(3);
    let nodes: Vec<DVector<f64>> = (0..n)
        .map(|j| {
            let w = j as f64 / (n - 1) as f64;
            &a * (1.0 - w) + &b * w
        })
        .collect();
    string_from_nodes(model, k, nodes, opts, 1)
}

fn string_from_nodes<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    mut nodes: Vec<DVector<f64>>,
    opts: &MinimaxOptions,
    n_iter: usize,
) -> Result<MinimaxResult> {
    let torus = model.torus();
    let shoot = ShootOptions::default();
    let n = nodes.len();
    let eval_node = |x: &DVector<f64>, warm: Option<&LoopEvaluation>| -> Result<LoopEvaluation> {
        let lp = from_coords(&torus, x)?;
        eval(model, k, &lp, Detail::Gradient, &shoot, warm)
    };
    let mut evals: Vec<LoopEvaluation> = nodes
        .par_iter()
        .map(|x| eval_node(x, None))
        .collect::<Result<Vec<_>>>()?;
    let mut history: Vec<f64> = Vec::new();
    let mut sweeps = 0;
    let converged = loop {
        let value = evals
            .iter()
            .map(|e| e.action)
            .fold(f64::NEG_INFINITY, f64::max);
        history.push(value);
        let l = history.len();
        if l > opts.window {
            let recent = &history[l - 1 - opts.window..];
            let hi = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = recent.iter().copied().fold(f64::INFINITY, f64::min);
            if hi - lo <= opts.tolerance * (1.0 + value.abs()) {
                break true;
            }
        }
        if sweeps >= opts.max_sweeps {
            break false;
        }
        sweeps += 1;
        let imax = (0..n)
            .max_by(|&i, &j| {
                evals[i]
                    .action
                    .partial_cmp(&evals[j].action)
                    .expect("finite")
            })
            .expect("nonempty");
        let updated: Vec<Result<(DVector<f64>, LoopEvaluation)>> = (1..n - 1)
            .into_par_iter()
            .map(|j| {
                let tangent = {
                    let t = &nodes[j + 1] - &nodes[j - 1];
                    let nn = metric_distance(&t, &DVector::zeros(t.len()));
                    t / nn.max(1e-300)
                };
                let h = evals[j].segments.len();
                let mut g = evals[j].gradient.differential();
                g[2 * h] /= h as f64;
                let hm = h as f64;
                let dot = |u: &DVector<f64>, v: &DVector<f64>| {
                    u.rows(0, 2 * h).dot(&v.rows(0, 2 * h)) + hm * u[2 * h] * v[2 * h]
                };
                let along = dot(&g, &tangent);
                let mut dir = -(&g - &tangent * along);
                if opts.climbing && j == imax {
                    dir += &tangent * along;
                }
                let x = &nodes[j];
                let d = cap_step(&dir, x[2 * h], opts.step);
                let mut alpha = 1.0;
                for _ in 0..20 {
                    let cand = x + &d * alpha;
                    if cand[2 * h] > 0.0 {
                        if let Ok(e) = eval_node(&cand, Some(&evals[j])) {
                            let ok = if opts.climbing && j == imax {
                                true
                            } else {
                                e.action <= evals[j].action
                            };
                            if ok {
                                return Ok((cand, e));
                            }
                        }
                    }
                    alpha *= 0.5;
                }
                Ok((x.clone(), evals[j].clone()))
            })
            .collect();
        for (j, u) in (1..n - 1).zip(updated) {
            let (x, e) = u?;
            nodes[j] = x;
            evals[j] = e;
        }
        // Equal-arclength reparametrization in the metric.
        let mut s = vec![0.0; n];
        for j in 1..n {
            s[j] = s[j - 1] + metric_distance(&nodes[j], &nodes[j - 1]);
        }
        let total = s[n - 1];
        if total > 0.0 {
            let targets: Vec<f64> = (0..n).map(|j| total * j as f64 / (n - 1) as f64).collect();
            let mut fresh = spline_resample(&s, &nodes, &targets);
            fresh[0] = nodes[0].clone();
            fresh[n - 1] = nodes[n - 1].clone();
            let re: Vec<Result<LoopEvaluation>> = (1..n - 1)
                .into_par_iter()
                .map(|j| eval_node(&fresh[j], Some(&evals[j])))
                .collect();
            let mut ok = true;
            let mut new_evals = evals.clone();
            for (j, r) in (1..n - 1).zip(re) {
                match r {
                    Ok(e) => new_evals[j] = e,
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                nodes = fresh;
                evals = new_evals;
            }
        }
    };
    if !converged {
        return Err(Error::PathBudgetExceeded { sweeps });
    }
    let actions: Vec<f64> = evals.iter().map(|e| e.action).collect();
    let max_node = (0..n)
        .max_by(|&i, &j| actions[i].partial_cmp(&actions[j]).expect("finite"))
        .expect("nonempty");
    let path = nodes
        .iter()
        .map(|x| from_coords(&torus, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(MinimaxResult {
        n: n_iter,
        value: actions[max_node],
        path,
        path_actions: actions,
        max_node,
        sweeps,
        near_critical: None,
        refine_error: None,
    })
}

/// `lp` with the same number of points as `like` (resampled along the orbit
/// if needed) and relabelled so that its first point is the one closest to
/// the first point of `like`.
pub fn align_loop<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    lp: &DiscreteLoop,
    like: &DiscreteLoop,
) -> Result<DiscreteLoop> {
    let torus = model.torus();
    let lp = if lp.h() == like.h() {
        lp.clone()
    } else {
        resample(model, k, lp, like.h())?
    };
    let start = (0..lp.h())
        .min_by(|&i, &j| {
            torus
                .distance(lp.points[i], like.points[0])
                .partial_cmp(&torus.distance(lp.points[j], like.points[0]))
                .expect("finite distances")
        })
        .expect("nonempty loop");
    Ok(lp.rotated(start))
}

/// Mountain-pass value `c(n, k)` over paths from the `n`-th iterate of `anchor`
/// to the `n`-th iterate of the minimizer loop, both critical and in the same
/// homotopy class.
pub fn minimax<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    n: usize,
    anchor: &DiscreteLoop,
    minimizer_loop: &DiscreteLoop,
    opts: &MinimaxOptions,
) -> Result<MinimaxResult> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "iterate count must be at least 1".into(),
        ));
    }
    let torus = model.torus();
    if anchor.winding(&torus) != minimizer_loop.winding(&torus) {
        return Err(Error::InvalidParameter(
            "path endpoints lie in different homotopy classes".into(),
        ));
    }
    let sa = crate::action::discrete_action(model, k, anchor)?;
    let sm = crate::action::discrete_action(model, k, minimizer_loop)?;
    if sa >= sm {
        return Err(Error::InvalidParameter(format!(
            "anchor action {sa} is not below the minimizer action {sm}"
        )));
    }
    let target = align_loop(model, k, minimizer_loop, anchor)?;
    let mut res = string_method(model, k, &iterate(anchor, n), &iterate(&target, n), opts)?;
    res.n = n;
    refine_max(model, k, &mut res, opts);
    Ok(res)
}

/// Minimax for `n` starting from the `n`-fold iterate of a converged path.
pub fn minimax_from_path<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    n: usize,
    base: &MinimaxResult,
    opts: &MinimaxOptions,
) -> Result<MinimaxResult> {
    let torus = model.torus();
    let mut nodes: Vec<DVector<f64>> = Vec::with_capacity(base.path.len());
    for lp in &base.path {
        let mut x = lifted_coords(&torus, &iterate(lp, n));
        if let Some(prev) = nodes.last() {
            // Same lift as the previous node: shift by the nearest lattice vector.
            let p = Vec2::new(prev[0], prev[1]);
            let q = Vec2::new(x[0], x[1]);
            let shift = p + torus.displacement(p, q) - q;
            let h = (x.len() - 1) / 2;
            for i in 0..h {
                x[2 * i] += shift.x;
                x[2 * i + 1] += shift.y;
            }
        }
        nodes.push(x);
    }
    let mut res = string_from_nodes(model, k, nodes, opts, n)?;
    refine_max(model, k, &mut res, opts);
    Ok(res)
}

fn refine_max<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    res: &mut MinimaxResult,
    opts: &MinimaxOptions,
) {
    if !opts.refine {
        return;
    }
    match refine_critical(model, k, &res.path[res.max_node]) {
        Ok(r) => res.near_critical = Some(r),
        Err(e) => res.refine_error = Some(e.to_string()),
    }
}

/// Result of a multiplicity scan.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiplicityScan {
    pub minimax: Vec<MinimaxResult>,
    /// Distinct orbits with negative action.
    pub orbits: Vec<OrbitRecord>,
    /// Number of negative-action orbits before deduplication.
    pub candidates: usize,
}

/// The two lowest distinct local minimizers sharing a homotopy class, lowest first.
pub fn minimizer_pair(
    torus: &TorusConfig,
    mins: &[OrbitRecord],
) -> Option<(OrbitRecord, OrbitRecord)> {
    for (i, a) in mins.iter().enumerate() {
        if let Some(b) = mins[i + 1..].iter().find(|b| b.winding == a.winding) {
            if !same_orbit(torus, a, b) {
                return Some((a.clone(), b.clone()));
            }
        }
    }
    None
}

/// Local minimizers plus the refined max nodes of the mountain-pass paths for
/// `n = 1..=n_max`, deduplicated. The paths join the lowest minimizer (anchor)
/// to the next one in its homotopy class; for `n ≥ 2` the string starts from
/// the `n`-fold iterate of the converged `n = 1` path. Without such a pair no
/// paths are computed.
pub fn multiplicity_scan<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    n_max: usize,
    n_seeds: usize,
    opts: &MinimaxOptions,
) -> Result<MultiplicityScan> {
    if n_max == 0 {
        return Err(Error::InvalidParameter("n_max must be at least 1".into()));
    }
    let torus = model.torus();
    let mins = local_minimizers(model, k, n_seeds)?;
    let mut results = Vec::new();
    if let Some((anchor, mu)) = minimizer_pair(&torus, &mins) {
        let first = minimax(model, k, 1, &anchor.lp, &mu.lp, opts)?;
        results.push(first);
        for n in 2..=n_max {
            let r = minimax_from_path(model, k, n, &results[0], opts)?;
            results.push(r);
        }
    }
    let mut all = mins;
    for r in &results {
        if let Some(o) = &r.near_critical {
            if o.action < 0.0 && o.energy_error <= 1e-6 {
                all.push(o.clone());
            }
        }
    }
    all.sort_by(|a, b| a.period.partial_cmp(&b.period).expect("finite periods"));
    Ok(MultiplicityScan {
        minimax: results,
        candidates: all.len(),
        orbits: dedup_orbits(&torus, all),
    })
}
