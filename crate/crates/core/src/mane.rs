//! Estimates of the critical energy values `e₀ ≤ c`.
//!
//! `e₀ = max_q E(q, 0)` is computed by grid search and Newton polish. On the
//! torus the critical values of the abelian and universal covers coincide, and
//! `c` is bracketed by
//!
//! * an upper bound `max_q H(q, p̄ + du(q))` for a closed 1-form `p̄ + du` with
//!   `u` a truncated Fourier series, and
//! * a lower bound: an energy `k` together with a contractible loop with
//!   negative discrete action at `k`.
//!
//! Both bounds come with certificates that can be re-checked from the model alone.

use std::f64::consts::TAU;

use nalgebra::Matrix2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{discrete_action, DiscreteLoop};
use crate::error::{Error, Result};
use crate::model::{Lagrangian, TorusConfig, Vec2};

fn grid_point(t: &TorusConfig, n: usize, i: usize, j: usize) -> Vec2 {
    Vec2::new(
        t.sides[0] * i as f64 / n as f64,
        t.sides[1] * j as f64 / n as f64,
    )
}

/// `max_q E(q, 0) = max_q −L(q, 0)` from a `128²` grid polished by Newton.
pub fn e0<M: Lagrangian + ?Sized>(model: &M) -> f64 {
    let t = model.torus();
    let n = 128;
    let f = |q: Vec2| -model.value(q, Vec2::zeros());
    let mut vals: Vec<(f64, Vec2)> = (0..n * n)
        .into_par_iter()
        .map(|ij| {
            let q = grid_point(&t, n, ij / n, ij % n);
            (f(q), q)
        })
        .collect();
    vals.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite energies"));
    let mut best = vals[0].0;
    for &(_, q0) in vals.iter().take(8) {
        let mut q = q0;
        for _ in 0..30 {
            let j = model.jet(q, Vec2::zeros());
            // ∇(−L) = −L_q, Hessian −L_qq; Newton towards a local maximum.
            let eig = (-j.lqq).symmetric_eigen();
            let grad = -j.lq;
            let cut = 1e-12 * eig.eigenvalues.amax().max(1e-300);
            let mut step = Vec2::zeros();
            for i in 0..2 {
                let l = eig.eigenvalues[i];
                if l.abs() > cut {
                    let u: Vec2 = eig.eigenvectors.column(i).into();
                    step -= u * (u.dot(&grad) / l);
                }
            }
            if step.norm() > 0.5 * t.min_side() / n as f64 * 4.0 {
                break;
            }
            q += step;
            if step.norm() < 1e-14 {
                break;
            }
        }
        best = best.max(f(q));
    }
    best
}

/// One Fourier mode `a cos(ω·q) + b sin(ω·q)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierMode {
    pub n: [i32; 2],
    pub a: f64,
    pub b: f64,
}

/// A closed 1-form `p̄ + du` and the value it certifies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsolutionCertificate {
    pub pbar: [f64; 2],
    pub modes: Vec<FourierMode>,
    pub order: usize,
    /// Side of the certification grid.
    pub grid: usize,
    /// Curvature slack added to the grid maximum.
    pub slack: f64,
    pub value: f64,
}

fn modes_of_order(order: usize) -> Vec<[i32; 2]> {
    let n = order as i32;
    let mut out = Vec::new();
    for a in 0..=n {
        for b in -n..=n {
            if (a == 0 && b <= 0) || a.max(b.abs()) == 0 {
                continue;
            }
            out.push([a, b]);
        }
    }
    out.sort_by_key(|m| (m[0].abs().max(m[1].abs()), m[0], m[1]));
    out
}

fn covector(t: &TorusConfig, pbar: [f64; 2], modes: &[FourierMode], q: Vec2) -> Vec2 {
    let mut p = Vec2::new(pbar[0], pbar[1]);
    for m in modes {
        let w = Vec2::new(
            TAU * m.n[0] as f64 / t.sides[0],
            TAU * m.n[1] as f64 / t.sides[1],
        );
        let (s, c) = w.dot(&q).sin_cos();
        p += w * (-m.a * s + m.b * c);
    }
    p
}

fn grid_max<M: Lagrangian + ?Sized>(
    model: &M,
    pbar: [f64; 2],
    modes: &[FourierMode],
    n: usize,
) -> Result<Vec<f64>> {
    let t = model.torus();
    (0..n * n)
        .into_par_iter()
        .map(|ij| {
            let q = grid_point(&t, n, ij / n, ij % n);
            model.hamiltonian(q, covector(&t, pbar, modes, q))
        })
        .collect()
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Certifies `p̄ + du` on an `n²` grid: the grid maximum plus half the largest
/// finite-difference curvature times the squared half-diagonal of a cell.
pub fn certify_subsolution<M: Lagrangian + ?Sized>(
    model: &M,
    pbar: [f64; 2],
    modes: &[FourierMode],
    order: usize,
    n: usize,
) -> Result<SubsolutionCertificate> {
    let t = model.torus();
    let g = grid_max(model, pbar, modes, n)?;
    let at = |i: usize, j: usize| g[(i % n) * n + (j % n)];
    let (dx, dy) = (t.sides[0] / n as f64, t.sides[1] / n as f64);
    let mut curv: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let c = at(i, j);
            let hxx = (at(i + 1, j) - 2.0 * c + at(i + n - 1, j)) / (dx * dx);
            let hyy = (at(i, j + 1) - 2.0 * c + at(i, j + n - 1)) / (dy * dy);
            let hxy = (at(i + 1, j + 1) - at(i + 1, j + n - 1) - at(i + n - 1, j + 1)
                + at(i + n - 1, j + n - 1))
                / (4.0 * dx * dy);
            let m = Matrix2::new(hxx, hxy, hxy, hyy);
            let ev = m.symmetric_eigenvalues();
            curv = curv.max(ev[0].abs()).max(ev[1].abs());
        }
    }
    let half_diag2 = 0.25 * (dx * dx + dy * dy);
    let slack = 1.25 * 0.5 * curv * half_diag2;
    Ok(SubsolutionCertificate {
        pbar,
        modes: modes.to_vec(),
        order,
        grid: n,
        slack,
        value: max_of(&g) + slack,
    })
}

/// Upper bound for `c` from nested Fourier families of order `0..=family_size`,
/// optimized by compass search on a `64²` grid and certified on a `256²` grid.
/// The bound is the best certificate over the nested families.
pub fn c_upper_bound<M: Lagrangian + ?Sized>(
    model: &M,
    family_size: usize,
) -> Result<SubsolutionCertificate> {
    let mut pbar = [0.0, 0.0];
    let mut modes: Vec<FourierMode> = Vec::new();
    let mut best = certify_subsolution(model, pbar, &modes, 0, 256)?;
    let scale = model.torus().min_side();
    for order in 0..=family_size {
        for n in modes_of_order(order) {
            if !modes.iter().any(|m| m.n == n) {
                modes.push(FourierMode { n, a: 0.0, b: 0.0 });
            }
        }
        compass_search(model, &mut pbar, &mut modes, scale)?;
        let cert = certify_subsolution(model, pbar, &modes, order, 256)?;
        if cert.value < best.value {
            best = cert;
        }
    }
    Ok(best)
}

fn compass_search<M: Lagrangian + ?Sized>(
    model: &M,
    pbar: &mut [f64; 2],
    modes: &mut [FourierMode],
    scale: f64,
) -> Result<()> {
    let n = 64;
    let nparam = 2 + 2 * modes.len();
    let get = |pbar: &[f64; 2], modes: &[FourierMode], i: usize| -> f64 {
        if i < 2 {
            pbar[i]
        } else {
            let m = &modes[(i - 2) / 2];
            if (i - 2).is_multiple_of(2) {
                m.a
            } else {
                m.b
            }
        }
    };
    let set = |pbar: &mut [f64; 2], modes: &mut [FourierMode], i: usize, x: f64| {
        if i < 2 {
            pbar[i] = x;
        } else {
            let m = &mut modes[(i - 2) / 2];
            if (i - 2).is_multiple_of(2) {
                m.a = x;
            } else {
                m.b = x;
            }
        }
    };
    let mut value = max_of(&grid_max(model, *pbar, modes, n)?);
    let mut step = 0.25 * TAU / scale;
    let mut sweeps = 0;
    while step > 1e-4 && sweeps < 400 {
        sweeps += 1;
        let mut improved = false;
        for i in 0..nparam {
            let x0 = get(pbar, modes, i);
            for dir in [1.0, -1.0] {
                set(pbar, modes, i, x0 + dir * step);
                let v = max_of(&grid_max(model, *pbar, modes, n)?);
                if v < value - 1e-12 {
                    value = v;
                    improved = true;
                    break;
                }
                set(pbar, modes, i, x0);
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok(())
}

/// An energy `k` and a contractible loop with `S_k < 0`, proving `k < c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopCertificate {
    pub k: f64,
    pub action: f64,
    #[serde(rename = "loop")]
    pub lp: DiscreteLoop,
}

/// Action of the closed curve `c` traversed at constant speed, optimized over
/// the speed: `min_σ (ℓ/σ) · mean[L(c, σ c') + k]` with `c'` the unit tangent.
pub fn smooth_curve_action<M, F>(model: &M, k: f64, curve: F, samples: usize) -> (f64, f64)
where
    M: Lagrangian + ?Sized,
    F: Fn(f64) -> Vec2,
{
    let pts: Vec<Vec2> = (0..=samples)
        .map(|i| curve(i as f64 / samples as f64))
        .collect();
    let segs: Vec<(Vec2, Vec2)> = pts
        .windows(2)
        .map(|w| (0.5 * (w[0] + w[1]), w[1] - w[0]))
        .collect();
    let s = |sigma: f64| -> f64 {
        // Σ over pieces of (|d|/σ)·(L(q, σ d̂) + k)
        segs.iter()
            .map(|(q, d)| {
                let n = d.norm();
                if n == 0.0 {
                    return 0.0;
                }
                (n / sigma) * (model.value(*q, *d / n * sigma) + k)
            })
            .sum()
    };
    let (mut lo, mut hi) = ((1e-3f64).ln(), (1e3f64).ln());
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if s(a.exp()) < s(b.exp()) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let sigma = (0.5 * (lo + hi)).exp();
    (s(sigma), sigma)
}

/// Minimizes the discrete action over `τ` for fixed points (golden section in `log τ`).
pub fn optimize_tau<M: Lagrangian + ?Sized>(
    model: &M,
    k: f64,
    lp: &DiscreteLoop,
    lo: f64,
    hi: f64,
) -> Result<(f64, f64)> {
    let eval = |tau: f64| -> f64 {
        let mut l = lp.clone();
        l.tau = tau;
        discrete_action(model, k, &l).unwrap_or(f64::INFINITY)
    };
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let x = b - g * (b - a);
        let y = a + g * (b - a);
        if eval(x.exp()) < eval(y.exp()) {
            b = y;
        } else {
            a = x;
        }
    }
    let tau = (0.5 * (a + b)).exp();
    let v = eval(tau);
    if !v.is_finite() {
        return Err(Error::NotFound(
            "no segment time gives a finite action".into(),
        ));
    }
    Ok((tau, v))
}

/// Candidate contractible loops: circles and axis-aligned ellipses on a grid of
/// centers, both orientations. Each is a closed curve on `[0, 1]`.
pub fn contractible_families(torus: &TorusConfig) -> Vec<Box<dyn Fn(f64) -> Vec2 + Send + Sync>> {
    let mut out: Vec<Box<dyn Fn(f64) -> Vec2 + Send + Sync>> = Vec::new();
    let half = 0.5 * torus.min_side();
    let centers = 8;
    for i in 0..centers {
        for j in 0..centers {
            let c = Vec2::new(
                torus.sides[0] * i as f64 / centers as f64,
                torus.sides[1] * j as f64 / centers as f64,
            );
            for &r in &[0.1, 0.2, 0.35, 0.5, 0.7, 0.9] {
                for &(ax, ay) in &[(1.0, 1.0), (1.0, 0.5), (0.5, 1.0)] {
                    for &orient in &[1.0, -1.0] {
                        let (rx, ry) = (r * half * ax, r * half * ay);
                        out.push(Box::new(move |s: f64| {
                            let th = orient * TAU * s;
                            c + Vec2::new(rx * th.cos(), ry * th.sin())
                        }));
                    }
                }
            }
        }
    }
    out
}

/// Largest `k` in `k_grid` certified below `c` by a contractible loop with
/// negative discrete action, or `e₀` with no certificate.
pub fn c_lower_bound<M: Lagrangian + ?Sized>(
    model: &M,
    k_grid: &[f64],
) -> Result<(f64, Option<LoopCertificate>)> {
    let e = e0(model);
    let torus = model.torus();
    let fams = contractible_families(&torus);
    let mut ks: Vec<f64> = k_grid.iter().copied().filter(|&k| k > e).collect();
    ks.sort_by(|a, b| b.partial_cmp(a).expect("finite energies"));
    for k in ks {
        let mut scored: Vec<(f64, f64, usize)> = fams
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let (s, sigma) = smooth_curve_action(model, k, c, 128);
                (s, sigma, i)
            })
            .collect();
        scored.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("finite actions")
                .then(a.2.cmp(&b.2))
        });
        for &(s, sigma, i) in scored.iter().take(4) {
            if s >= 0.0 {
                break;
            }
            let curve = &fams[i];
            let h = 64;
            let pts: Vec<Vec2> = (0..=h).map(|j| curve(j as f64 / h as f64)).collect();
            let length: f64 = pts.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
            let tau0 = length / sigma / h as f64;
            let lp = DiscreteLoop::from_curve(&torus, h, tau0, curve)?;
            let Ok((tau, v)) = optimize_tau(model, k, &lp, 0.3 * tau0, 3.0 * tau0) else {
                continue;
            };
            if v < 0.0 {
                let mut lp = lp;
                lp.tau = tau;
                return Ok((k, Some(LoopCertificate { k, action: v, lp })));
            }
        }
    }
    Ok((e, None))
}

/// `e₀`, bounds on `c`, and their certificates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManeEstimate {
    pub e0: f64,
    pub c_upper: f64,
    pub c_lower: f64,
    pub upper_certificate: SubsolutionCertificate,
    pub lower_certificate: Option<LoopCertificate>,
}

pub fn estimate<M: Lagrangian + ?Sized>(
    model: &M,
    family_size: usize,
    k_grid: &[f64],
) -> Result<ManeEstimate> {
    let e = e0(model);
    let upper = c_upper_bound(model, family_size)?;
    let (lower, cert) = c_lower_bound(model, k_grid)?;
    Ok(ManeEstimate {
        e0: e,
        c_upper: upper.value.max(e),
        c_lower: lower,
        upper_certificate: upper,
        lower_certificate: cert,
    })
}

/// Outcome of re-checking a [`ManeEstimate`] against a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateCheck {
    pub upper_recomputed: f64,
    pub upper_ok: bool,
    pub lower_action: Option<f64>,
    pub lower_ok: bool,
}

/// Recomputes both certificates from the model alone.
pub fn verify_certificates<M: Lagrangian + ?Sized>(
    model: &M,
    est: &ManeEstimate,
) -> Result<CertificateCheck> {
    let u = &est.upper_certificate;
    let re = certify_subsolution(model, u.pbar, &u.modes, u.order, u.grid)?;
    let upper_ok = (re.value - u.value).abs() <= 1e-9 * (1.0 + u.value.abs())
        && re.value.max(est.e0) <= est.c_upper + 1e-12;
    let (lower_action, lower_ok) = match &est.lower_certificate {
        Some(c) => {
            let s = discrete_action(model, c.k, &c.lp)?;
            let w = c.lp.winding(&model.torus());
            (Some(s), s < 0.0 && w == [0, 0] && c.k == est.c_lower)
        }
        None => (None, (est.c_lower - est.e0).abs() <= 1e-12),
    };
    Ok(CertificateCheck {
        upper_recomputed: re.value,
        upper_ok,
        lower_action,
        lower_ok,
    })
}
