use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tonelli_torus::action::{
    discrete_hessian, evaluate, index_report, iterate_indices, nullity_partition, Detail,
    DiscreteLoop, IndexReport, IterateIndices, NullityClass,
};
use tonelli_torus::fixtures::{reference_orbits, CounterexampleParams};
use tonelli_torus::mane::{estimate, verify_certificates, CertificateCheck, ManeEstimate};
use tonelli_torus::model::{build_model, Lagrangian, ModelSpec, Vec2};
use tonelli_torus::search::{
    descend_with, local_minimizers, multiplicity_scan, DedupThresholds, OrbitRecord, SearchOptions,
    DEDUP,
};
use tonelli_torus::Error;

use crate::config::{RunConfig, SeedKind};
use crate::output::{read_records, record, write_trace, Meta, OutDir};

#[derive(Serialize, Deserialize)]
pub struct OrbitBody {
    pub model: ModelSpec,
    pub k: f64,
    pub index: usize,
    pub label: Option<String>,
    pub orbit: OrbitRecord,
}

#[derive(Serialize)]
struct NotFoundBody<'a> {
    model: &'a ModelSpec,
    k: f64,
    message: String,
}

#[derive(Serialize, Deserialize)]
struct MinimaxBody {
    model: ModelSpec,
    k: f64,
    n: usize,
    value: f64,
    sweeps: usize,
    max_node: usize,
    path_actions: Vec<f64>,
    near_critical: Option<OrbitRecord>,
    refine_error: Option<String>,
}

#[derive(Serialize)]
struct DedupBody {
    thresholds: DedupThresholds,
    /// Negative-action orbits before merging: minimizers plus refined passes.
    candidates: usize,
    distinct: usize,
}

#[derive(Serialize)]
struct MinimaxSummary {
    values: Vec<f64>,
    strictly_decreasing: bool,
}

#[derive(Serialize, Deserialize)]
struct ManeBody {
    model: ModelSpec,
    k_grid: Vec<f64>,
    estimate: ManeEstimate,
}

#[derive(Serialize)]
struct SpectrumBody {
    model: ModelSpec,
    k: f64,
    orbit: usize,
    full: IndexReport,
    restricted: IndexReport,
    monodromy_eigenvalues: Vec<[f64; 2]>,
    iterates: Vec<IterateIndices>,
    partition: Vec<NullityClass>,
}

#[derive(Serialize)]
struct Verdict {
    line: usize,
    record_kind: String,
    ok: bool,
    checks: Vec<(String, bool)>,
    detail: Option<CertificateCheck>,
}

fn trace_points(rec: &OrbitRecord) -> Vec<[f64; 2]> {
    let pts = if rec.trace.is_empty() {
        &rec.lp.points
    } else {
        &rec.trace
    };
    pts.iter().map(|p| [p.x, p.y]).collect()
}

fn orbit_lines(
    out: &OutDir,
    meta: &Meta,
    model: &ModelSpec,
    k: f64,
    recs: &[(Option<String>, OrbitRecord)],
) -> anyhow::Result<Vec<String>> {
    let mut lines = Vec::new();
    for (i, (label, rec)) in recs.iter().enumerate() {
        write_trace(
            out.writer(&format!("traces/orbit_{i}.txt"))?,
            &trace_points(rec),
        )?;
        lines.push(record(
            "orbit",
            meta,
            &OrbitBody {
                model: model.clone(),
                k,
                index: i,
                label: label.clone(),
                orbit: rec.clone(),
            },
        )?);
    }
    Ok(lines)
}

pub fn orbit(cfg: &RunConfig, out: &OutDir) -> anyhow::Result<()> {
    let meta = Meta::new("orbit", cfg);
    let k = cfg.energy()?;
    let model = build_model(&cfg.model)?;
    let opts = SearchOptions {
        mode: cfg.orbit.mode,
        tol_crit: cfg.tolerances.tol_crit,
        max_iterations: cfg.tolerances.max_iterations,
        ..SearchOptions::default()
    };
    let recs: Vec<(Option<String>, OrbitRecord)> = match cfg.orbit.seeds {
        SeedKind::Reference => {
            let ModelSpec::Counterexample { r1, r2, big_r } = cfg.model else {
                bail!("reference seeds exist only for the counterexample model");
            };
            let params = CounterexampleParams::new(r1, r2, big_r)?;
            let h = cfg.h.unwrap_or(64);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut recs = Vec::new();
            for o in reference_orbits(&params, k)? {
                let lp = o.discrete_loop(&params, h)?;
                let eps = cfg.orbit.perturbation;
                let pts = lp
                    .points
                    .iter()
                    .map(|p| {
                        p + Vec2::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0))
                            * eps
                    })
                    .collect();
                let seed = DiscreteLoop::new(
                    &model.torus(),
                    pts,
                    lp.tau * (1.0 + eps * rng.random_range(-1.0..=1.0)),
                )?;
                let (rec, _) = descend_with(model.as_ref(), k, &seed, &opts)?;
                recs.push((Some(o.label.to_string()), rec));
            }
            recs
        }
        SeedKind::Search => local_minimizers(model.as_ref(), k, cfg.orbit.n_seeds)?
            .into_iter()
            .map(|r| (None, r))
            .collect(),
    };
    let lines = if recs.is_empty() {
        vec![record(
            "not_found",
            &meta,
            &NotFoundBody {
                model: &cfg.model,
                k,
                message: Error::NotFound(format!(
                    "no negative-action local minimizer from {} seeds",
                    cfg.orbit.n_seeds
                ))
                .to_string(),
            },
        )?]
    } else {
        orbit_lines(out, &meta, &cfg.model, k, &recs)?
    };
    out.write_lines("orbits.jsonl", &lines)?;
    eprintln!("orbit: {} record(s) in {}", recs.len(), out.root.display());
    Ok(())
}

pub fn minimax(cfg: &RunConfig, out: &OutDir) -> anyhow::Result<()> {
    let meta = Meta::new("minimax", cfg);
    let k = cfg.energy()?;
    let model = build_model(&cfg.model)?;
    let mm = &cfg.minimax;
    let scan = multiplicity_scan(model.as_ref(), k, mm.n_max, mm.n_seeds, &mm.options())?;
    let mut lines = Vec::new();
    let mut csv = out.writer("minimax.csv")?;
    writeln!(
        csv,
        "n,value,sweeps,near_critical_action,near_critical_period"
    )?;
    for r in &scan.minimax {
        let (a, p) = r
            .near_critical
            .as_ref()
            .map_or((f64::NAN, f64::NAN), |o| (o.action, o.period));
        writeln!(
            csv,
            "{},{:.12e},{},{:.12e},{:.12e}",
            r.n, r.value, r.sweeps, a, p
        )?;
        let path: Vec<[f64; 2]> = r
            .path_actions
            .iter()
            .enumerate()
            .map(|(i, s)| [i as f64, *s])
            .collect();
        write_trace(out.writer(&format!("traces/path_{}.txt", r.n))?, &path)?;
        lines.push(record(
            "minimax",
            &meta,
            &MinimaxBody {
                model: cfg.model.clone(),
                k,
                n: r.n,
                value: r.value,
                sweeps: r.sweeps,
                max_node: r.max_node,
                path_actions: r.path_actions.clone(),
                near_critical: r.near_critical.clone(),
                refine_error: r.refine_error.clone(),
            },
        )?);
    }
    csv.flush()?;
    let values: Vec<f64> = scan.minimax.iter().map(|r| r.value).collect();
    let candidates = scan.candidates;
    lines.push(record(
        "dedup",
        &meta,
        &DedupBody {
            thresholds: DEDUP,
            candidates,
            distinct: scan.orbits.len(),
        },
    )?);
    lines.push(record(
        "minimax_summary",
        &meta,
        &MinimaxSummary {
            strictly_decreasing: values.windows(2).all(|w| w[1] < w[0]),
            values,
        },
    )?);
    out.write_lines("minimax.jsonl", &lines)?;
    let recs: Vec<(Option<String>, OrbitRecord)> =
        scan.orbits.into_iter().map(|r| (None, r)).collect();
    out.write_lines(
        "orbits.jsonl",
        &orbit_lines(out, &meta, &cfg.model, k, &recs)?,
    )?;
    eprintln!(
        "minimax: {} level(s), {} distinct orbit(s)",
        scan.minimax.len(),
        recs.len()
    );
    Ok(())
}

fn default_grid(e0: f64) -> Vec<f64> {
    (1..=40)
        .map(|i| e0 + 0.05 * i as f64 * (1.0 + e0.abs()))
        .collect()
}

pub fn mane(cfg: &RunConfig, out: &OutDir, verify: bool) -> anyhow::Result<bool> {
    let meta = Meta::new("mane", cfg);
    let model = build_model(&cfg.model)?;
    let grid = if cfg.mane.k_grid.is_empty() {
        default_grid(tonelli_torus::mane::e0(model.as_ref()))
    } else {
        cfg.mane.k_grid.clone()
    };
    let est = estimate(model.as_ref(), cfg.mane.family_size, &grid)?;
    let mut lines = vec![record(
        "mane",
        &meta,
        &ManeBody {
            model: cfg.model.clone(),
            k_grid: grid,
            estimate: est.clone(),
        },
    )?];
    let mut ok = true;
    if verify {
        let check = verify_certificates(model.as_ref(), &est)?;
        ok = check.upper_ok && check.lower_ok;
        lines.push(record("mane_check", &meta, &check)?);
    }
    out.write_lines("mane.jsonl", &lines)?;
    eprintln!(
        "mane: e0 = {}, c in [{}, {}]",
        est.e0, est.c_lower, est.c_upper
    );
    Ok(ok)
}

pub fn spectrum(cfg: &RunConfig, out: &OutDir, orbits: &Path) -> anyhow::Result<()> {
    let meta = Meta::new("spectrum", cfg);
    let mut lines = Vec::new();
    let mut csv = out.writer("spectrum.csv")?;
    writeln!(csv, "orbit,matrix,position,eigenvalue")?;
    let mut count = 0;
    for v in read_records(orbits)? {
        if v.get("kind").and_then(Value::as_str) != Some("orbit") {
            continue;
        }
        let body: OrbitBody = serde_json::from_value(v)?;
        let model = build_model(&body.model)?;
        let lp = &body.orbit.lp;
        let r = discrete_hessian(model.as_ref(), body.k, lp)?;
        let full = index_report(&r.eigenvalues_full, cfg.tolerances.tol_rank);
        let restricted = index_report(&r.eigenvalues_restricted, cfg.tolerances.tol_rank);
        for (name, eig) in [
            ("full", &r.eigenvalues_full),
            ("restricted", &r.eigenvalues_restricted),
        ] {
            for (j, l) in eig.iter().enumerate() {
                writeln!(csv, "{},{name},{j},{l:.12e}", body.index)?;
            }
        }
        lines.push(record(
            "spectrum",
            &meta,
            &SpectrumBody {
                model: body.model.clone(),
                k: body.k,
                orbit: body.index,
                full,
                restricted,
                monodromy_eigenvalues: r
                    .monodromy_eigenvalues
                    .iter()
                    .map(|z| [z.re, z.im])
                    .collect(),
                iterates: iterate_indices(model.as_ref(), body.k, lp, cfg.spectrum.m_max)?,
                partition: nullity_partition(&r.monodromy, cfg.spectrum.m_max),
            },
        )?);
        count += 1;
    }
    csv.flush()?;
    out.write_lines("spectrum.jsonl", &lines)?;
    eprintln!("spectrum: {count} orbit(s)");
    Ok(())
}

fn check_orbit(
    model: &dyn Lagrangian,
    k: f64,
    rec: &OrbitRecord,
) -> anyhow::Result<Vec<(String, bool)>> {
    let eval = evaluate(model, k, &rec.lp, Detail::Hessian)?;
    let g = eval.gradient.norm();
    let energy = eval
        .segments
        .iter()
        .map(|s| (s.energy(model) - k).abs())
        .fold(0.0, f64::max);
    let r = discrete_hessian(model, k, &rec.lp)?;
    Ok(vec![
        (
            "action".into(),
            (eval.action - rec.action).abs() <= 1e-9 * (1.0 + rec.action.abs()),
        ),
        (
            "critical".into(),
            g <= tonelli_torus::action::critical_tolerance(&rec.lp),
        ),
        ("energy".into(), energy <= 1e-6),
        (
            "indices".into(),
            (
                r.ind_full(),
                r.nul_full(),
                r.ind_restricted(),
                r.nul_restricted(),
            ) == (
                rec.spectral.ind_full,
                rec.spectral.nul_full,
                rec.spectral.ind_restricted,
                rec.spectral.nul_restricted,
            ),
        ),
    ])
}

/// Re-validates every record in `path` from its own model description.
pub fn verify(cfg: &RunConfig, out: &OutDir, path: &Path) -> anyhow::Result<bool> {
    let meta = Meta::new("verify", cfg);
    let mut lines = Vec::new();
    let mut all_ok = true;
    for (i, v) in read_records(path)?.into_iter().enumerate() {
        let kind = v
            .get("kind")
            .and_then(Value::as_str)
            .unwrap_or("")
            .to_string();
        let (checks, detail) = match kind.as_str() {
            "orbit" => {
                let body: OrbitBody = serde_json::from_value(v)?;
                let model = build_model(&body.model)?;
                (check_orbit(model.as_ref(), body.k, &body.orbit)?, None)
            }
            "minimax" => {
                let body: MinimaxBody = serde_json::from_value(v)?;
                let model = build_model(&body.model)?;
                let max = body
                    .path_actions
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut checks = vec![("value".into(), max == body.value)];
                if let Some(o) = &body.near_critical {
                    checks.extend(check_orbit(model.as_ref(), body.k, o)?);
                }
                (checks, None)
            }
            "mane" => {
                let body: ManeBody = serde_json::from_value(v)?;
                let model = build_model(&body.model)?;
                let c = verify_certificates(model.as_ref(), &body.estimate)?;
                let e = &body.estimate;
                (
                    vec![
                        ("upper".into(), c.upper_ok),
                        ("lower".into(), c.lower_ok),
                        (
                            "sandwich".into(),
                            e.e0 <= e.c_lower && e.c_lower <= e.c_upper,
                        ),
                    ],
                    Some(c),
                )
            }
            _ => continue,
        };
        let ok = checks.iter().all(|(_, b)| *b);
        all_ok &= ok;
        lines.push(record(
            "verdict",
            &meta,
            &Verdict {
                line: i + 1,
                record_kind: kind,
                ok,
                checks,
                detail,
            },
        )?);
    }
    if lines.is_empty() {
        bail!("{} holds no verifiable records", path.display());
    }
    out.write_lines("verify.jsonl", &lines)
        .context("writing verdicts")?;
    eprintln!(
        "verify: {} record(s), {}",
        lines.len(),
        if all_ok { "all ok" } else { "FAILURES" }
    );
    Ok(all_ok)
}
