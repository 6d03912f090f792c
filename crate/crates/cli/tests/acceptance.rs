//! End-to-end acceptance suite. Prints one `PASS`/`FAIL` line per criterion
//! and exits non-zero if any fails.
//!
//! Positional arguments select checks by substring, e.g.
//! `cargo test --test acceptance -- square`.

use std::f64::consts::PI;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use eigenpinn::netcalc::Collocation;
use eigenpinn::oracle::{ball_spectrum, bessel_j, bessel_zero, fd_spectrum, rectangle_spectrum};
use eigenpinn::residual::{assemble_loss, loss_and_gradient, mu_schedule, p_laplacian};
use eigenpinn::{Domain, Jet2, MlpParams, OperatorSpec, Potential};
use eigenpinn_cli::commands::{self, EigenvaluesFile};
use eigenpinn_cli::config::{RunConfig, RESOLVED_CONFIG};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DISK_LIST: [f64; 4] = [5.7832, 14.6819, 26.3743, 30.4713];
const LIST_ROUNDING: f64 = 2e-3;

type Check = Result<(bool, String), String>;

fn scan(toml: &str) -> Result<(RunConfig, EigenvaluesFile), String> {
    let cfg = RunConfig::parse(toml).map_err(|e| format!("{e:#}"))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let file = commands::scan(&cfg, dir.path(), |_| {}).map_err(|e| format!("{e:#}"))?;
    Ok((cfg, file))
}

fn e_hats(file: &EigenvaluesFile) -> Vec<f64> {
    file.estimates.iter().map(|e| e.e_hat).collect()
}

fn fmt_list(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", items.join(", "))
}

fn nearest_gap(spectrum: &[f64], e: f64) -> f64 {
    spectrum
        .iter()
        .map(|k| (k - e).abs())
        .fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------- fast checks

fn rel_err(exact: &[f64], approx: &[f64]) -> f64 {
    let diff: f64 = exact.iter().zip(approx).map(|(a, b)| (a - b).powi(2)).sum();
    let norm: f64 = exact.iter().map(|a| a * a).sum();
    diff.sqrt() / norm.sqrt().max(1e-12)
}

fn random_domain(rng: &mut ChaCha8Rng) -> Domain {
    match rng.gen_range(0..3) {
        0 => Domain::Ball {
            dim: rng.gen_range(1..=3),
            radius: rng.gen_range(0.5..2.0),
        },
        1 => Domain::Rectangle {
            bounds: vec![[0.0, rng.gen_range(0.5..2.0)], [-0.5, 0.7]],
        },
        _ => Domain::Triangle {
            vertices: [[0.0, 0.0], [1.1, 0.2], [0.2, 0.8]],
        },
    }
}

fn random_params(rng: &mut ChaCha8Rng, d: usize) -> MlpParams {
    let mut p =
        MlpParams::init(&[d, rng.gen_range(2..7), rng.gen_range(2..7), 1], rng.gen()).unwrap();
    for v in p.as_mut_slice() {
        *v += rng.gen_range(-0.3..0.3);
    }
    p
}

fn derivative_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (h, mut worst_jet, mut worst_grad) = (1e-4, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let domain = random_domain(&mut rng);
        let d = domain.dim();
        let p = random_params(&mut rng, d);
        let x = domain
            .sample_interior(1, rng.gen())
            .unwrap()
            .point(0)
            .to_vec();
        let jet = p.trial_jet(&domain, &x);
        let (mut g, mut hs) = (vec![0.0; d], vec![0.0; d * d]);
        for a in 0..d {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[a] += h;
            xm[a] -= h;
            let (jp, jm) = (p.trial_jet(&domain, &xp), p.trial_jet(&domain, &xm));
            g[a] = (jp.value - jm.value) / (2.0 * h);
            for b in 0..d {
                hs[a * d + b] = (jp.gradient[b] - jm.gradient[b]) / (2.0 * h);
            }
        }
        worst_jet = worst_jet
            .max(rel_err(&jet.gradient, &g))
            .max(rel_err(&jet.hessian, &hs));
    }
    for case in 0..100 {
        let domain = random_domain(&mut rng);
        let d = domain.dim();
        let op = if d == 2 && case % 2 == 1 {
            OperatorSpec::PLaplace {
                p: rng.gen_range(1.6..3.0),
                grad_floor: 1e-8,
            }
        } else {
            OperatorSpec::Linear {
                potential: Potential::Harmonic { omega: 1.0 },
            }
        };
        let p = random_params(&mut rng, d);
        let energy = rng.gen_range(0.5..20.0);
        let colloc =
            Collocation::new(&domain, domain.sample_interior(16, rng.gen()).unwrap()).unwrap();
        let (_, grad) = loss_and_gradient(
            &p,
            &colloc,
            &op,
            energy,
            mu_schedule(100.0, energy),
            domain.volume(),
        )
        .map_err(|e| e.to_string())?;
        let mut fd = vec![0.0; p.len()];
        for k in 0..p.len() {
            let step = 1e-5 * p.as_slice()[k].abs().max(1.0);
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.as_mut_slice()[k] += step;
            pm.as_mut_slice()[k] -= step;
            let lp = assemble_loss(&pp, &colloc, &op, energy, 100.0, &domain)
                .unwrap()
                .total;
            let lm = assemble_loss(&pm, &colloc, &op, energy, 100.0, &domain)
                .unwrap()
                .total;
            fd[k] = (lp - lm) / (2.0 * step);
        }
        worst_grad = worst_grad.max(rel_err(grad.as_slice(), &fd));
    }
    Ok((
        worst_jet < 1e-5 && worst_grad < 1e-5,
        format!("100+100 cases, worst jet {worst_jet:.2e}, worst parameter gradient {worst_grad:.2e} (< 1e-5)"),
    ))
}

fn p2_reduction() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let linear = OperatorSpec::laplacian();
    let p2 = OperatorSpec::PLaplace {
        p: 2.0,
        grad_floor: 1e-8,
    };
    for _ in 0..50 {
        let domain = Domain::unit_disk();
        let params = random_params(&mut rng, 2);
        let colloc =
            Collocation::new(&domain, domain.sample_interior(128, rng.gen()).unwrap()).unwrap();
        let e = rng.gen_range(1.0..40.0);
        let a = assemble_loss(&params, &colloc, &linear, e, 100.0, &domain).unwrap();
        let b = assemble_loss(&params, &colloc, &p2, e, 100.0, &domain).unwrap();
        if a != b {
            return Ok((false, format!("breakdowns differ at E={e}: {a:?} vs {b:?}")));
        }
    }
    Ok((true, "50 random cases, identical LossBreakdown".into()))
}

fn radial_jet(x: &[f64]) -> Jet2 {
    let d = x.len();
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (f1, f2) = (1.0 + r * r, 2.0 * r);
    let mut hessian = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            let xx = x[a] * x[b] / (r * r);
            hessian[a * d + b] = f2 * xx + f1 / r * (f64::from(u8::from(a == b)) - xx);
        }
    }
    Jet2 {
        value: r + r.powi(3) / 3.0,
        gradient: x.iter().map(|v| f1 * v / r).collect(),
        hessian,
    }
}

fn plaplace_divergence() -> Check {
    let flux = |x: &[f64], p: f64, a: usize| {
        let g = radial_jet(x).gradient;
        let s = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        s.powf(p - 2.0) * g[a]
    };
    let h = 1e-3;
    let mut worst = 0.0f64;
    for p in [1.5, 2.05, 2.2, 3.0] {
        for x in [[0.3, 0.1], [-0.7, 0.5], [1.2, -0.4], [0.05, 0.2]] {
            let div: f64 = (0..2)
                .map(|a| {
                    let at = |k: f64| {
                        let mut y = x;
                        y[a] += k * h;
                        flux(&y, p, a)
                    };
                    (-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * h)
                })
                .sum();
            let exact = p_laplacian(&radial_jet(&x), p, 0.0).map_err(|e| e.to_string())?;
            worst = worst.max((exact - div).abs() / exact.abs());
        }
    }
    Ok((
        worst < 1e-4,
        format!("worst relative error {worst:.2e} (< 1e-4)"),
    ))
}

fn oracle_self_checks() -> Check {
    let exact = rectangle_spectrum(&[1.0, 1.0], 4).map_err(|e| e.to_string())?;
    let fd =
        fd_spectrum(&Domain::unit_square(), &Potential::Zero, 128, 4).map_err(|e| e.to_string())?;
    let fd_err = exact
        .iter()
        .zip(&fd.eigenvalues)
        .map(|(a, b)| (a - b).abs() / a)
        .fold(0.0, f64::max);
    let mut zero_res = 0.0f64;
    for nu in [0.0, 0.5, 1.0, 1.5, 2.0, 3.0] {
        for k in 1..=4 {
            let z = bessel_zero(nu, k).map_err(|e| e.to_string())?;
            zero_res = zero_res.max(bessel_j(nu, z).map_err(|e| e.to_string())?.abs());
        }
    }
    let disk = ball_spectrum(2, 1.0, 4).map_err(|e| e.to_string())?;
    let list_err = disk
        .eigenvalues
        .iter()
        .zip(DISK_LIST)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((
        fd_err < 5e-3 && zero_res < 1e-9 && list_err < 2e-3 && disk.eigenvalues.len() == 4,
        format!("FD square {:.3}% (< 0.5%), Bessel zero residual {zero_res:.1e} (< 1e-9), disk list {list_err:.1e} (< 2e-3)", 100.0 * fd_err),
    ))
}

// ---------------------------------------------------------------- scans

const DISK: &str =
    "[scan]\ne_lo = 3.0\ne_hi = 35.0\ngrid_count = 129\nrefine_depth = 2\nrefine_factor = 4\n";

fn disk_spectrum(file: &EigenvaluesFile) -> Check {
    let found = e_hats(file);
    let mut ok = found.len() == DISK_LIST.len();
    let mut worst = 0.0f64;
    for (i, e) in file.estimates.iter().enumerate() {
        let target = DISK_LIST.get(i).copied().unwrap_or(f64::NAN);
        let err = (e.e_hat - target).abs();
        worst = worst.max(err);
        ok &= err <= e.grid_resolution + LIST_ROUNDING;
    }
    Ok((
        ok,
        format!(
            "{} estimates {} vs {}, worst |err| {worst:.2e} (≤ resolution + 2e-3)",
            found.len(),
            fmt_list(&found),
            fmt_list(&DISK_LIST)
        ),
    ))
}

fn upper_bound(file: &EigenvaluesFile) -> Check {
    let spec = ball_spectrum(2, 1.0, 12)
        .map_err(|e| e.to_string())?
        .eigenvalues;
    let mut ok = !file.estimates.is_empty();
    let mut detail = Vec::new();
    for e in &file.estimates {
        let u = nearest_gap(&spec, e.e_hat).powi(2);
        let bound = e.grid_resolution.powi(2);
        ok &= u <= bound;
        detail.push(format!("{:.1e}", u));
    }
    Ok((
        ok,
        format!(
            "U(E_hat) = [{}] ≤ resolution² = {:.2e}",
            detail.join(", "),
            (0.25f64 / 16.0).powi(2)
        ),
    ))
}

fn square_window() -> Check {
    let (_, file) = scan(
        "[domain]\nkind = \"rectangle\"\nbounds = [[0.0, 1.0], [0.0, 1.0]]\n\
         [scan]\ne_lo = 44.0\ne_hi = 55.0\ngrid_count = 45\n",
    )?;
    let found = e_hats(&file);
    let target = 49.348;
    let ok =
        file.estimates.len() == 1 && (found[0] - target).abs() <= file.estimates[0].grid_resolution;
    Ok((ok, format!("estimates {} vs {target}", fmt_list(&found))))
}

fn ball3() -> Check {
    let (_, file) = scan(
        "[domain]\nkind = \"ball\"\ndim = 3\nradius = 1.0\n\
         [scan]\ne_lo = 6.0\ne_hi = 14.0\ngrid_count = 33\n",
    )?;
    let found = e_hats(&file);
    let ok = file
        .estimates
        .iter()
        .any(|e| (e.e_hat - PI * PI).abs() <= e.grid_resolution);
    Ok((
        ok,
        format!("estimates {} vs π² = {:.4}", fmt_list(&found), PI * PI),
    ))
}

fn plaplace_continuity() -> Check {
    let (_, file) = scan(
        "[operator]\nkind = \"plaplace\"\np = 2.05\n\
         [scan]\ne_lo = 4.0\ne_hi = 8.0\ngrid_count = 17\nrefine_depth = 0\n",
    )?;
    let first = file.candidates.first().copied();
    let ok = first.is_some_and(|e| (e - DISK_LIST[0]).abs() <= 0.5);
    Ok((
        ok,
        format!(
            "p = 2.05 minima {} vs 5.7832 ± 0.5",
            fmt_list(&file.candidates)
        ),
    ))
}

fn plaplace_two_minima() -> Check {
    let (cfg, file) = scan(
        "[operator]\nkind = \"plaplace\"\np = 2.2\n\
         [scan]\ne_lo = 4.0\ne_hi = 20.0\ngrid_count = 65\nrefine_depth = 0\n",
    )?;
    let m = &file.candidates;
    let ok = m.len() >= 2 && m[1] - m[0] > cfg.scan.spacing();
    Ok((
        ok,
        format!(
            "p = 2.2 minima below ε = {}: {}",
            cfg.scan.threshold,
            fmt_list(m)
        ),
    ))
}

fn harmonic() -> Check {
    let (cfg, file) = scan(
        "[operator]\nkind = \"linear\"\npotential = { kind = \"harmonic\", omega = 1.0 }\n\
         [scan]\ne_lo = 4.0\ne_hi = 10.0\ngrid_count = 25\nrefine_depth = 0\n",
    )?;
    let fd = fd_spectrum(
        &Domain::unit_disk(),
        &Potential::Harmonic { omega: 1.0 },
        128,
        1,
    )
    .map_err(|e| e.to_string())?
    .eigenvalues[0];
    let tol = 3.0 * cfg.scan.spacing();
    let first = file.candidates.first().copied();
    let ok = first.is_some_and(|e| (e - fd).abs() <= tol);
    Ok((
        ok,
        format!("first minimum {:?} vs FD {fd:.4} ± {tol}", first),
    ))
}

fn determinism() -> Check {
    let cfg =
        RunConfig::parse("[scan]\ne_lo = 5.0\ne_hi = 7.0\ngrid_count = 9\nrefine_depth = 1\n")
            .map_err(|e| format!("{e:#}"))?;
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    commands::scan(&cfg, a.path(), |_| {}).map_err(|e| format!("{e:#}"))?;
    let again = RunConfig::load(&a.path().join(RESOLVED_CONFIG)).map_err(|e| format!("{e:#}"))?;
    commands::scan(&again, b.path(), |_| {}).map_err(|e| format!("{e:#}"))?;
    let same = |name: &str| -> Result<bool, String> {
        let read = |dir: &Path| fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"));
        Ok(read(a.path())? == read(b.path())?)
    };
    let (curve, eig) = (same(commands::LOSS_CURVE)?, same(commands::EIGENVALUES)?);
    Ok((
        curve && eig,
        format!("loss_curve.csv identical: {curve}, eigenvalues.json identical: {eig}"),
    ))
}

// ---------------------------------------------------------------- driver

fn run(name: &str, filters: &[String], results: &mut Vec<bool>, check: impl FnOnce() -> Check) {
    if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
        return;
    }
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{} {name}: {detail} [{secs:.0} s]",
        if pass { "PASS" } else { "FAIL" }
    );
    results.push(pass);
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut results = Vec::new();
    let r = &mut results;
    run("derivative_suite", &filters, r, derivative_suite);
    run("p2_reduction", &filters, r, p2_reduction);
    run("plaplace_divergence", &filters, r, plaplace_divergence);
    run("oracle_self_checks", &filters, r, oracle_self_checks);
    run("determinism", &filters, r, determinism);
    run("square_window", &filters, r, square_window);
    run("ball3", &filters, r, ball3);
    run("harmonic", &filters, r, harmonic);
    run("plaplace_continuity", &filters, r, plaplace_continuity);
    run("plaplace_two_minima", &filters, r, plaplace_two_minima);

    let wants_disk = ["disk_spectrum", "upper_bound"]
        .iter()
        .any(|n| filters.is_empty() || filters.iter().any(|f| n.contains(f.as_str())));
    if wants_disk {
        let start = Instant::now();
        let disk = scan(DISK);
        let secs = start.elapsed().as_secs_f64();
        println!("     disk scan finished in {secs:.0} s");
        let shared = |f: fn(&EigenvaluesFile) -> Check| {
            let disk = disk.clone();
            move || disk.and_then(|(_, file)| f(&file))
        };
        run("disk_spectrum", &filters, r, shared(disk_spectrum));
        run("upper_bound", &filters, r, shared(upper_bound));
    }

    let failed = results.iter().filter(|p| !**p).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
