//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::f64::consts::{PI, TAU};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tonelli_torus::action::{
    discrete_action, evaluate, growth_witness, iterate, iterate_indices, Detail, DiscreteLoop,
    IterateIndices,
};
use tonelli_torus::fixtures::{
    catalog, counterexample_model, maslov_indices, random_loop, reference_orbits,
    CounterexampleModel, CounterexampleParams,
};
use tonelli_torus::mane::{c_lower_bound, e0, estimate};
use tonelli_torus::model::{build_model, ExactMagnetic, Kinetic, Lagrangian, TorusConfig, Vec2};
use tonelli_torus::search::{
    find_local_minimizer, length_bound, multiplicity_scan, period_bound, refine_critical,
    MinimaxOptions, MultiplicityScan, OrbitRecord,
};

const K_REF: f64 = 0.25;
const K_MAG: f64 = 0.1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Results shared between criteria.
struct Shared {
    params: CounterexampleParams,
    model: CounterexampleModel,
    /// Refined Γ and Ψ at h = 64.
    reference: Vec<OrbitRecord>,
    reference_time: Duration,
    stripe: ExactMagnetic,
    stripe_min: tonelli_torus::Result<OrbitRecord>,
    stripe_time: Duration,
    ridges: ExactMagnetic,
    scan: tonelli_torus::Result<MultiplicityScan>,
}

fn perturbed(
    torus: &TorusConfig,
    lp: &DiscreteLoop,
    rng: &mut ChaCha8Rng,
    eps: f64,
) -> DiscreteLoop {
    let pts = lp
        .points
        .iter()
        .map(|p| p + Vec2::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)) * eps)
        .collect();
    DiscreteLoop::new(
        torus,
        pts,
        lp.tau * (1.0 + eps * rng.random_range(-1.0..=1.0)),
    )
    .unwrap()
}

fn shared() -> Shared {
    let params = CounterexampleParams::default();
    let model = counterexample_model(&params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let t = Instant::now();
    let reference = reference_orbits(&params, K_REF)
        .unwrap()
        .iter()
        .map(|o| {
            let seed = perturbed(
                &params.torus(),
                &o.discrete_loop(&params, 64).unwrap(),
                &mut rng,
                1e-3,
            );
            refine_critical(&model, K_REF, &seed).unwrap()
        })
        .collect();
    let reference_time = t.elapsed();
    let stripe = ExactMagnetic::stripe(2.0);
    let t = Instant::now();
    let stripe_min = find_local_minimizer(&stripe, K_MAG, 4);
    let stripe_time = t.elapsed();
    let ridges = ExactMagnetic::ridges(2.0, 1.0, 0.2);
    let scan = multiplicity_scan(&ridges, K_MAG, 3, 4, &MinimaxOptions::default());
    Shared {
        params,
        model,
        reference,
        reference_time,
        stripe,
        stripe_min,
        stripe_time,
        ridges,
        scan,
    }
}

fn criterion_1(s: &Shared) -> Outcome {
    let periods = [2.0 * PI * s.params.r1, 2.0 * PI * s.params.r2];
    let mut pass = s.reference_time < Duration::from_secs(60);
    let mut parts = Vec::new();
    for (rec, p) in s.reference.iter().zip(periods) {
        let rel = (rec.period - p).abs() / p;
        pass &= rel < 1e-5 && rec.energy_error < 1e-6;
        parts.push(format!(
            "period rel err {rel:.1e}, energy err {:.1e}",
            rec.energy_error
        ));
    }
    outcome(
        pass,
        format!("{}; {:.2?}", parts.join("; "), s.reference_time),
    )
}

fn criterion_2(s: &Shared) -> Outcome {
    let (mg, mp) = maslov_indices(&s.params);
    let got = (
        s.reference[0].spectral.ind_restricted,
        s.reference[1].spectral.ind_restricted,
    );
    let pass = got == (mg, mp) && got == (2, 4) && s.reference.iter().all(|r| !r.is_local_min);
    outcome(
        pass,
        format!("ind_h = {got:?}, expected ({mg}, {mp}) at h = 64"),
    )
}

fn flat_geodesic() -> (Kinetic, DiscreteLoop) {
    let flat = Kinetic::new(TorusConfig::square(1.0).unwrap());
    let h = 8;
    let lp =
        DiscreteLoop::from_curve(&flat.torus, h, 1.0 / h as f64, |s| Vec2::new(s, 0.25)).unwrap();
    (flat, lp)
}

fn iterate_tables(s: &Shared) -> Vec<(String, Vec<IterateIndices>)> {
    let mut out = Vec::new();
    for (name, o) in ["Γ", "Ψ"]
        .iter()
        .zip(reference_orbits(&s.params, K_REF).unwrap())
    {
        let rec =
            refine_critical(&s.model, K_REF, &o.discrete_loop(&s.params, 16).unwrap()).unwrap();
        out.push((
            name.to_string(),
            iterate_indices(&s.model, K_REF, &rec.lp, 8).unwrap(),
        ));
    }
    let (flat, lp) = flat_geodesic();
    out.push(("flat".into(), iterate_indices(&flat, 0.5, &lp, 8).unwrap()));
    out
}

fn criterion_3(tables: &[(String, Vec<IterateIndices>)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, rows) in tables {
        let ok = rows.iter().all(|r| r.nul_restricted == r.nul_monodromy);
        pass &= ok && rows.len() == 8;
        let nul: Vec<usize> = rows.iter().map(|r| r.nul_restricted).collect();
        parts.push(format!("{name}: nul(h_m) = {nul:?}"));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_4(s: &Shared, tables: &[(String, Vec<IterateIndices>)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, rows) in tables {
        let gaps: Vec<i64> = rows
            .iter()
            .map(|r| r.nul_full as i64 - r.nul_restricted as i64)
            .collect();
        let nul_ok = gaps.iter().all(|&g| g == gaps[0]) && (-1..=1).contains(&gaps[0]);
        let class: Vec<&IterateIndices> = rows
            .iter()
            .filter(|r| r.nul_restricted == rows[0].nul_restricted)
            .collect();
        let d: Vec<i64> = class
            .iter()
            .map(|r| r.ind_full as i64 - r.ind_restricted as i64)
            .collect();
        let ind_ok = d.iter().all(|&x| x == d[0]);
        pass &= nul_ok && ind_ok;
        parts.push(format!(
            "{name}: nul gap {}, ind gap {} on {} iterates",
            gaps[0],
            d[0],
            class.len()
        ));
    }
    let rec = refine_critical(
        &s.model,
        K_REF,
        &reference_orbits(&s.params, K_REF).unwrap()[0]
            .discrete_loop(&s.params, 16)
            .unwrap(),
    )
    .unwrap();
    match growth_witness(&s.model, K_REF, &rec.lp, 4).unwrap() {
        Some(w) => {
            let rows = &tables[0].1;
            let grows = rows.iter().all(|r| r.ind_restricted > w.floor(r.m));
            pass &= grows;
            let ind: Vec<usize> = rows.iter().map(|r| r.ind_restricted).collect();
            parts.push(format!(
                "Γ: m0 = {}, m1 = {}, ind(h_m) = {ind:?}",
                w.m0, w.m1
            ));
        }
        None => {
            pass = false;
            parts.push("Γ: no growth witness".into());
        }
    }
    outcome(pass, parts.join("; "))
}

fn shifted(torus: &TorusConfig, lp: &DiscreteLoop, u: &DVector<f64>, eps: f64) -> DiscreteLoop {
    let h = lp.h();
    let lifted = lp.lifted(torus);
    let pts = (0..h)
        .map(|i| lifted[i] + Vec2::new(u[2 * i], u[2 * i + 1]) * eps)
        .collect();
    DiscreteLoop::new(torus, pts, lp.tau + eps * u[2 * h]).unwrap()
}

fn sample_loop(model: &dyn Lagrangian, rng: &mut ChaCha8Rng) -> DiscreteLoop {
    let torus = model.torus();
    let s = torus.min_side();
    let winding: [i64; 2] = [rng.random_range(-1..=1), rng.random_range(-1..=1)];
    let step = 0.08 * s;
    let h = if winding == [0, 0] { 8 } else { 32 };
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

fn hessian_error(model: &dyn Lagrangian, k: f64, lp: &DiscreteLoop) -> f64 {
    let torus = model.torus();
    let an = evaluate(model, k, lp, Detail::Hessian)
        .unwrap()
        .hessian
        .unwrap();
    let n = an.nrows();
    let eps = 1e-6;
    let mut fd = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut u = DVector::zeros(n);
        u[j] = 1.0;
        let gp = evaluate(model, k, &shifted(&torus, lp, &u, eps), Detail::Gradient).unwrap();
        let gm = evaluate(model, k, &shifted(&torus, lp, &u, -eps), Detail::Gradient).unwrap();
        fd.set_column(
            j,
            &((gp.gradient.differential() - gm.gradient.differential()) / (2.0 * eps)),
        );
    }
    (an - fd).abs().max()
}

fn criterion_5(s: &Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst: f64 = 0.0;
    for (_, spec) in catalog() {
        let model = build_model(&spec).unwrap();
        let torus = model.torus();
        for _ in 0..100 {
            let lp = sample_loop(model.as_ref(), &mut rng);
            let k = rng.random_range(0.1..2.0);
            let g = evaluate(model.as_ref(), k, &lp, Detail::Gradient)
                .unwrap()
                .gradient
                .differential();
            let mut u = DVector::from_fn(g.len(), |_, _| rng.random_range(-1.0..1.0));
            u /= u.norm();
            let eps = 1e-5;
            let fd = (discrete_action(model.as_ref(), k, &shifted(&torus, &lp, &u, eps)).unwrap()
                - discrete_action(model.as_ref(), k, &shifted(&torus, &lp, &u, -eps)).unwrap())
                / (2.0 * eps);
            worst = worst.max((fd - g.dot(&u)).abs() / g.norm());
        }
    }
    let mut hess: f64 = 0.0;
    let mut count = 0;
    for r in &s.reference {
        hess = hess.max(hessian_error(&s.model, K_REF, &r.lp));
        count += 1;
    }
    let (flat, lp) = flat_geodesic();
    hess = hess.max(hessian_error(&flat, 0.5, &lp));
    count += 1;
    if let Ok(r) = &s.stripe_min {
        hess = hess.max(hessian_error(&s.stripe, K_MAG, &r.lp));
        count += 1;
    }
    if let Ok(scan) = &s.scan {
        for r in &scan.orbits {
            hess = hess.max(hessian_error(&s.ridges, K_MAG, &r.lp));
            count += 1;
        }
    }
    outcome(
        worst < 1e-6 && hess < 1e-4,
        format!("gradient rel err {worst:.1e} on 500 loops; Hessian err {hess:.1e} at {count} critical points"),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst: f64 = 0.0;
    for (_, spec) in catalog() {
        let model = build_model(&spec).unwrap();
        for _ in 0..4 {
            let lp = sample_loop(model.as_ref(), &mut rng);
            let g = evaluate(model.as_ref(), 0.6, &lp, Detail::Gradient)
                .unwrap()
                .gradient;
            for m in [2, 3, 5] {
                let gm = evaluate(model.as_ref(), 0.6, &iterate(&lp, m), Detail::Gradient)
                    .unwrap()
                    .gradient;
                for (i, w) in gm.w.iter().enumerate() {
                    worst = worst.max((w - g.w[i % lp.h()]).norm());
                }
                worst = worst.max((gm.mu - g.mu).abs());
            }
        }
    }
    outcome(worst < 1e-10, format!("max deviation {worst:.1e}"))
}

fn criterion_7(s: &Shared) -> Outcome {
    let e = e0(&s.stripe);
    let (c_lower, _) = c_lower_bound(&s.stripe, &[0.2, 0.3, 0.4, 0.5]).unwrap();
    let inside = e < K_MAG && K_MAG < c_lower;
    match &s.stripe_min {
        Ok(r) => {
            let pass = inside
                && r.action < 0.0
                && r.spectral.ind_full == 0
                && r.self_intersections == 0
                && s.stripe_time < Duration::from_secs(300);
            outcome(
                pass,
                format!(
                    "k = {K_MAG} in ({e:.3}, {c_lower:.3}); S = {:.4}, ind_H = {}, crossings = {}; {:.1?}",
                    r.action, r.spectral.ind_full, r.self_intersections, s.stripe_time
                ),
            )
        }
        Err(err) => outcome(false, format!("no minimizer: {err}")),
    }
}

fn criterion_8(s: &Shared) -> Outcome {
    match &s.scan {
        Ok(scan) => {
            let values: Vec<f64> = scan.minimax.iter().map(|r| r.value).collect();
            let decreasing = values.len() == 3 && values.windows(2).all(|w| w[1] < w[0]);
            let negative = scan.orbits.iter().filter(|o| o.action < 0.0).count();
            outcome(
                decreasing && negative >= 2,
                format!("c(n, k) = {values:.4?}; {negative} distinct negative-action orbits"),
            )
        }
        Err(err) => outcome(false, format!("scan failed: {err}")),
    }
}

fn criterion_9(s: &Shared) -> Outcome {
    let mut checked = 0;
    let mut pass = true;
    let mut worst: f64 = 0.0;
    let mut check = |model: &dyn Lagrangian, r: &OrbitRecord| {
        if r.action >= 0.0 {
            return;
        }
        let pb = period_bound(model, K_MAG, r.action).unwrap();
        let lb = length_bound(model, K_MAG, r.action).unwrap();
        pass &= r.period <= pb && r.length <= lb;
        worst = worst.max((r.period / pb).max(r.length / lb));
        checked += 1;
    };
    if let Ok(r) = &s.stripe_min {
        check(&s.stripe, r);
    }
    if let Ok(scan) = &s.scan {
        for r in &scan.orbits {
            check(&s.ridges, r);
        }
        for m in &scan.minimax {
            if let Some(r) = &m.near_critical {
                check(&s.ridges, r);
            }
        }
    }
    outcome(
        pass && checked > 0,
        format!("{checked} orbits; largest ratio to bound {worst:.3}"),
    )
}

fn criterion_10(s: &Shared) -> Outcome {
    let e_ref = e0(&s.model);
    let mech = build_model(&catalog()[1].1).unwrap();
    let e_mech = e0(mech.as_ref());
    let mut pass = (e_ref - s.params.e0()).abs() < 1e-8 && (e_mech - 0.7).abs() < 1e-8;
    let mut parts = vec![format!(
        "e0 err {:.1e} (reference), {:.1e} (mechanical)",
        (e_ref - s.params.e0()).abs(),
        (e_mech - 0.7).abs()
    )];
    for (name, spec) in catalog() {
        let model = build_model(&spec).unwrap();
        let e = e0(model.as_ref());
        let grid: Vec<f64> = (1..=6)
            .map(|i| e + 0.1 * i as f64 * (1.0 + e.abs()))
            .collect();
        let est = estimate(model.as_ref(), 1, &grid).unwrap();
        let ok = est.e0 <= est.c_lower && est.c_lower <= est.c_upper;
        pass &= ok;
        parts.push(format!(
            "{name} [{:.4}, {:.4}, {:.4}]",
            est.e0, est.c_lower, est.c_upper
        ));
    }
    outcome(pass, parts.join("; "))
}

fn cli_run(args: &[&str], out: &Path, workers: &str) -> bool {
    Command::new(env!("CARGO_BIN_EXE_tonelli"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("TONELLI_WORKERS", workers)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn criterion_11() -> Outcome {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    let runs: [(&str, &str, &[&str]); 3] = [
        (
            "orbit",
            "counterexample.toml",
            &["orbits.jsonl", "traces/orbit_0.txt", "traces/orbit_1.txt"],
        ),
        ("mane", "mechanical.toml", &["mane.jsonl"]),
        ("orbit", "kinetic.toml", &["orbits.jsonl"]),
    ];
    let mut pass = true;
    let mut files = 0;
    for (i, (cmd, cfg, outputs)) in runs.iter().enumerate() {
        let cfg = root.join(cfg);
        let args = [*cmd, "--config", cfg.to_str().unwrap()];
        let a = dir.path().join(format!("{i}a"));
        let b = dir.path().join(format!("{i}b"));
        pass &= cli_run(&args, &a, "1") && cli_run(&args, &b, "2");
        for f in outputs.iter() {
            let same = matches!((std::fs::read(a.join(f)), std::fs::read(b.join(f))), (Ok(x), Ok(y)) if x == y);
            pass &= same;
            files += 1;
        }
    }
    outcome(
        pass,
        format!("{files} output files identical across repeated runs"),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let s = shared();
    let tables = iterate_tables(&s);
    let results = [
        ("reference orbit periods and energies", criterion_1(&s)),
        (
            "restricted indices of the reference orbits",
            criterion_2(&s),
        ),
        (
            "nullity of iterates from the monodromy",
            criterion_3(&tables),
        ),
        ("index and nullity of iterates", criterion_4(&s, &tables)),
        (
            "gradient and Hessian against finite differences",
            criterion_5(&s),
        ),
        ("gradient commutes with iteration", criterion_6()),
        ("negative-action local minimizer", criterion_7(&s)),
        ("minimax levels and distinct orbits", criterion_8(&s)),
        ("period and length bounds", criterion_9(&s)),
        ("e0 and the critical value sandwich", criterion_10(&s)),
        ("CLI determinism", criterion_11()),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("{tag} {:>2} {name}: {}", i + 1, o.detail);
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1?}",
        results.len() - failed,
        start.elapsed()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
