//! Subcommand implementations. Each reads a validated [`RunConfig`] and
//! writes its artifacts under an output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use eigenpinn::geometry::PointBatch;
use eigenpinn::netcalc::{trial_jets, Collocation};
use eigenpinn::oracle::{closed_form_spectrum, fd_spectrum, upper_bound_curve, OracleSpectrum};
use eigenpinn::scan::{detect_minima, make_grid};
use eigenpinn::{
    CurveEntry, EigenEstimate, LossBreakdown, LossCurve, MlpParams, OperatorSpec, Potential,
    Scanner, StopReason, Trainer,
};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::io::{self, fmt_f64, parse_f64, Csv, F17};

pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const CURVE_SNAPSHOTS: &str = "curve_snapshots.csv";
pub const EIGENVALUES: &str = "eigenvalues.json";
pub const ORACLE_SPECTRUM: &str = "oracle_spectrum.json";
pub const UPPER_BOUND: &str = "upper_bound.csv";

pub const LOSS_CURVE_HEADER: [&str; 8] = [
    "E",
    "total",
    "residual_term",
    "penalty_term",
    "norm_estimate",
    "mu_used",
    "steps_run",
    "stop_reason",
];
const CURVE_SNAPSHOTS_HEADER: [&str; 2] = ["E", "snapshot"];
const UPPER_BOUND_HEADER: [&str; 3] = ["E", "upper_bound", "beyond_spectrum"];

/// Largest eigenfunction lattice accepted by the exporter.
const MAX_EXPORT_NODES: usize = 4_000_000;

/// Runs `f` and leaves a `FAILED` marker in `out` if it errors.
pub fn with_failure_marker<T>(out: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let result = f();
    if let Err(e) = &result {
        io::mark_failed(out, &format!("{e:#}"));
    }
    result
}

fn write_resolved_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut echo = cfg.clone();
    echo.output_dir = None;
    io::write_atomic(&out.join(RESOLVED_CONFIG), echo.to_toml()?.as_bytes())
}

fn save_snapshot(out: &Path, params: &MlpParams) -> Result<String> {
    let id = params.content_id();
    let rel = format!("snapshots/{id}.bin");
    let path = out.join(&rel);
    if !path.exists() {
        io::write_atomic(&path, &params.to_snapshot_bytes())?;
    }
    Ok(rel)
}

pub fn load_snapshot(path: &Path) -> Result<MlpParams> {
    let bytes = fs::read(path)
        .with_context(|| format!("snapshot not found: expected {}", path.display()))?;
    MlpParams::from_snapshot_bytes(&bytes)
        .with_context(|| format!("reading snapshot {}", path.display()))
}

fn stop_reason_from_str(s: &str) -> Result<StopReason> {
    [
        StopReason::Converged,
        StopReason::MaxSteps,
        StopReason::Diverged,
    ]
    .into_iter()
    .find(|r| r.as_str() == s)
    .ok_or_else(|| anyhow!("unknown stop reason {s:?}"))
}

fn write_curve(out: &Path, curve: &LossCurve) -> Result<()> {
    let mut csv = Csv::new(&LOSS_CURVE_HEADER);
    let mut snaps = Csv::new(&CURVE_SNAPSHOTS_HEADER);
    for e in &curve.entries {
        let b = &e.breakdown;
        csv.row(&[
            fmt_f64(e.energy),
            fmt_f64(b.total),
            fmt_f64(b.residual_term),
            fmt_f64(b.penalty_term),
            fmt_f64(b.norm_estimate),
            fmt_f64(b.mu_used),
            e.steps_run.to_string(),
            e.stop_reason.as_str().to_string(),
        ]);
        snaps.row(&[fmt_f64(e.energy), save_snapshot(out, &e.params)?]);
    }
    csv.write(&out.join(LOSS_CURVE))?;
    snaps.write(&out.join(CURVE_SNAPSHOTS))
}

/// Reconstructs a loss curve from `loss_curve.csv` and its snapshots.
pub fn read_curve(out: &Path) -> Result<LossCurve> {
    let rows = io::read_csv(&out.join(LOSS_CURVE), &LOSS_CURVE_HEADER)?;
    let snaps = io::read_csv(&out.join(CURVE_SNAPSHOTS), &CURVE_SNAPSHOTS_HEADER)?;
    if rows.len() != snaps.len() {
        bail!("{LOSS_CURVE} and {CURVE_SNAPSHOTS} have different lengths");
    }
    let num = |s: &str| parse_f64(s).ok_or_else(|| anyhow!("bad number {s:?} in {LOSS_CURVE}"));
    let unknown = LossBreakdown {
        total: f64::NAN,
        residual_term: f64::NAN,
        penalty_term: f64::NAN,
        norm_estimate: f64::NAN,
        mu_used: f64::NAN,
    };
    let mut entries = Vec::with_capacity(rows.len());
    for (r, s) in rows.iter().zip(&snaps) {
        let params = load_snapshot(&out.join(&s[1]))?;
        entries.push(CurveEntry {
            energy: num(&r[0])?,
            breakdown: LossBreakdown {
                total: num(&r[1])?,
                residual_term: num(&r[2])?,
                penalty_term: num(&r[3])?,
                norm_estimate: num(&r[4])?,
                mu_used: num(&r[5])?,
            },
            validation: unknown,
            steps_run: r[6].parse().context("steps_run")?,
            stop_reason: stop_reason_from_str(&r[7])?,
            params_ref: params.content_id(),
            params,
        });
    }
    Ok(LossCurve { entries })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    #[serde(rename = "E_hat", serialize_with = "io::json_f64")]
    pub e_hat: f64,
    #[serde(serialize_with = "io::json_f64")]
    pub loss_at_min: f64,
    #[serde(serialize_with = "io::json_f64")]
    pub grid_resolution: f64,
    pub refinement_level: usize,
    pub unbracketed: bool,
    #[serde(rename = "candidate_E", serialize_with = "io::json_f64")]
    pub candidate: f64,
    pub snapshot: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenvaluesFile {
    #[serde(serialize_with = "io::json_f64")]
    pub threshold: f64,
    #[serde(rename = "candidate_E", serialize_with = "io::json_f64_vec")]
    pub candidates: Vec<f64>,
    pub estimates: Vec<EstimateRecord>,
}

fn write_estimates(
    out: &Path,
    cfg: &RunConfig,
    curve: &LossCurve,
    candidates: &[usize],
    estimates: &[EigenEstimate],
) -> Result<EigenvaluesFile> {
    let records = estimates
        .iter()
        .map(|e| {
            Ok(EstimateRecord {
                e_hat: e.e_hat,
                loss_at_min: e.loss_at_min,
                grid_resolution: e.grid_resolution,
                refinement_level: e.refinement_level,
                unbracketed: e.unbracketed,
                candidate: e.candidate,
                snapshot: save_snapshot(out, &e.params)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let file = EigenvaluesFile {
        threshold: cfg.scan.threshold,
        candidates: candidates
            .iter()
            .map(|&i| curve.entries[i].energy)
            .collect(),
        estimates: records,
    };
    io::write_json(&out.join(EIGENVALUES), &file)?;
    Ok(file)
}

pub fn read_estimates(out: &Path) -> Result<EigenvaluesFile> {
    let path = out.join(EIGENVALUES);
    let text = fs::read_to_string(&path).with_context(|| format!("missing {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn build_trainer(cfg: &RunConfig) -> Result<Trainer> {
    Ok(Trainer::new(
        &cfg.domain,
        &cfg.operator,
        &cfg.loss,
        cfg.seed,
    )?)
}

/// Full sweep, detection and refinement.
pub fn scan(cfg: &RunConfig, out: &Path, mut log: impl FnMut(&str)) -> Result<EigenvaluesFile> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    with_failure_marker(out, || {
        io::clear_failed(out)?;
        write_resolved_config(cfg, out)?;
        let trainer = build_trainer(cfg)?;
        let scanner = Scanner::new(&trainer, &cfg.widths(), cfg.seed, cfg.train, cfg.scan)?;
        let grid = make_grid(cfg.scan.e_lo, cfg.scan.e_hi, cfg.scan.grid_count)?;
        let n = grid.len();
        let mut done = 0;
        let curve = scanner.run_scan(&grid, |e| {
            done += 1;
            log(&format!(
                "[{done}/{n}] E={:.6} loss={:.4e} steps={} {}",
                e.energy,
                e.breakdown.total,
                e.steps_run,
                e.stop_reason.as_str()
            ));
        })?;
        write_curve(out, &curve)?;
        refine_curve(cfg, out, &scanner, &curve, &mut log)
    })
}

fn refine_curve(
    cfg: &RunConfig,
    out: &Path,
    scanner: &Scanner,
    curve: &LossCurve,
    log: &mut impl FnMut(&str),
) -> Result<EigenvaluesFile> {
    let candidates = detect_minima(curve, cfg.scan.threshold);
    log(&format!(
        "{} candidate(s) below threshold {}",
        candidates.len(),
        cfg.scan.threshold
    ));
    let estimates = scanner.refine_all(curve, &candidates)?;
    for e in &estimates {
        log(&format!(
            "E_hat={:.6} loss={:.3e} resolution={} level={}{}",
            e.e_hat,
            e.loss_at_min,
            e.grid_resolution,
            e.refinement_level,
            if e.unbracketed { " (unbracketed)" } else { "" }
        ));
    }
    write_estimates(out, cfg, curve, &candidates, &estimates)
}

/// Detection and refinement on a previously written curve.
pub fn refine(cfg: &RunConfig, out: &Path, mut log: impl FnMut(&str)) -> Result<EigenvaluesFile> {
    with_failure_marker(out, || {
        let curve = read_curve(out)?;
        let trainer = build_trainer(cfg)?;
        let scanner = Scanner::new(&trainer, &cfg.widths(), cfg.seed, cfg.train, cfg.scan)?;
        write_resolved_config(cfg, out)?;
        refine_curve(cfg, out, &scanner, &curve, &mut log)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFile {
    #[serde(serialize_with = "io::json_f64_vec")]
    pub eigenvalues: Vec<f64>,
    pub provenance: eigenpinn::oracle::Provenance,
    pub domain: eigenpinn::Domain,
    pub potential: Potential,
}

/// Reference spectrum for the configured problem.
pub fn oracle_spectrum(cfg: &RunConfig) -> Result<OracleSpectrum> {
    let potential = match cfg.operator {
        OperatorSpec::Linear { potential } => potential,
        OperatorSpec::PLaplace { p, .. } => {
            if p != 2.0 {
                bail!("no oracle for p ≠ 2");
            }
            Potential::Zero
        }
    };
    if potential == Potential::Zero {
        if let Some(spec) = closed_form_spectrum(&cfg.domain, cfg.oracle.count) {
            return Ok(spec?);
        }
    }
    if cfg.domain.dim() != 2 {
        bail!(
            "no oracle for this {}-dimensional problem",
            cfg.domain.dim()
        );
    }
    Ok(fd_spectrum(
        &cfg.domain,
        &potential,
        cfg.oracle.grid_n,
        cfg.oracle.count,
    )?)
}

pub fn oracle(cfg: &RunConfig, out: &Path) -> Result<OracleFile> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let spec = oracle_spectrum(cfg)?;
    let grid = make_grid(cfg.scan.e_lo, cfg.scan.e_hi, cfg.scan.grid_count)?;
    let ub = upper_bound_curve(&spec.eigenvalues, &grid)?;
    let mut csv = Csv::new(&UPPER_BOUND_HEADER);
    for &(e, u) in &ub.points {
        let beyond = ub.beyond_spectrum.contains(&e);
        csv.row(&[fmt_f64(e), fmt_f64(u), u8::from(beyond).to_string()]);
    }
    csv.write(&out.join(UPPER_BOUND))?;
    let file = OracleFile {
        eigenvalues: spec.eigenvalues,
        provenance: spec.provenance,
        domain: spec.domain,
        potential: spec.potential,
    };
    io::write_json(&out.join(ORACLE_SPECTRUM), &file)?;
    Ok(file)
}

pub fn read_oracle(out: &Path) -> Result<OracleFile> {
    let path = out.join(ORACLE_SPECTRUM);
    let text = fs::read_to_string(&path).with_context(|| format!("missing {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Which parameters to export.
#[derive(Clone, Debug)]
pub enum ExportSource {
    /// 1-based index into `eigenvalues.json`.
    Estimate(usize),
    Snapshot(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EigenfunctionMeta {
    #[serde(rename = "E_hat", serialize_with = "serialize_opt_f64")]
    pub e_hat: Option<f64>,
    pub snapshot: String,
    /// The stored network was negated to make the largest `|u|` positive.
    pub sign_flipped: bool,
    #[serde(serialize_with = "io::json_f64")]
    pub l2_norm: f64,
    pub nodes_per_axis: usize,
}

fn serialize_opt_f64<S: serde::Serializer>(
    v: &Option<f64>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    io::json_f64(&v.unwrap_or(f64::NAN), s)
}

/// Evaluates the trial function on a regular lattice over the bounding box
/// and writes `eigenfunction_<k>.csv` (coordinates, then `u`) plus a JSON
/// sidecar. Nodes outside the open domain are exactly zero; the sign is
/// fixed so that the node of largest `|u|` is positive.
pub fn export_eigenfunction(
    cfg: &RunConfig,
    out: &Path,
    source: &ExportSource,
    k: usize,
) -> Result<EigenfunctionMeta> {
    let (params, e_hat, snapshot) = match source {
        ExportSource::Estimate(i) => {
            let file = read_estimates(out)?;
            let rec = i
                .checked_sub(1)
                .and_then(|j| file.estimates.get(j))
                .ok_or_else(|| {
                    anyhow!(
                        "no estimate {i} in {EIGENVALUES} ({} present)",
                        file.estimates.len()
                    )
                })?;
            (
                load_snapshot(&out.join(&rec.snapshot))?,
                Some(rec.e_hat),
                rec.snapshot.clone(),
            )
        }
        ExportSource::Snapshot(p) => {
            let path = if p.is_absolute() || p.exists() {
                p.clone()
            } else {
                out.join(p)
            };
            (load_snapshot(&path)?, None, p.display().to_string())
        }
    };
    let d = cfg.domain.dim();
    if params.input_dim() != d {
        bail!(
            "snapshot has input dimension {}, domain has {d}",
            params.input_dim()
        );
    }
    let m = cfg.export_resolution;
    let total = m
        .checked_pow(d as u32)
        .filter(|&t| t <= MAX_EXPORT_NODES)
        .ok_or_else(|| {
            anyhow!("{m}^{d} lattice nodes exceed the export limit of {MAX_EXPORT_NODES}")
        })?;
    let bbox = cfg.domain.bounding_box();
    let coord = |axis: usize, i: usize| {
        let [a, b] = bbox[axis];
        if i == m - 1 {
            b
        } else {
            a + (b - a) * i as f64 / (m - 1) as f64
        }
    };

    let mut nodes = Vec::with_capacity(total * d);
    let mut inside = Vec::new();
    let mut idx = vec![0usize; d];
    for n in 0..total {
        let start = nodes.len();
        // Last axis varies fastest.
        let mut r = n;
        for axis in (0..d).rev() {
            idx[axis] = r % m;
            r /= m;
        }
        for (axis, &i) in idx.iter().enumerate() {
            nodes.push(coord(axis, i));
        }
        if cfg.domain.contains(&nodes[start..])? {
            inside.push(n);
        }
    }
    let mut values = vec![0.0; total];
    if !inside.is_empty() {
        let pts: Vec<f64> = inside
            .iter()
            .flat_map(|&n| nodes[n * d..(n + 1) * d].iter().copied())
            .collect();
        let colloc = Collocation::new(&cfg.domain, PointBatch::from_points(d, pts)?)?;
        let jets = trial_jets(&params, &colloc);
        for (j, &n) in inside.iter().enumerate() {
            values[n] = jets.row(j)[0];
        }
    }
    let mut peak = 0;
    for (i, v) in values.iter().enumerate() {
        if v.abs() > values[peak].abs() {
            peak = i;
        }
    }
    let sign_flipped = values[peak] < 0.0;
    if sign_flipped {
        values.iter_mut().for_each(|v| *v = -*v);
    }
    let cell: f64 = bbox.iter().map(|[a, b]| (b - a) / (m - 1) as f64).product();
    let l2_norm = (cell * values.iter().map(|v| v * v).sum::<f64>()).sqrt();

    let mut header: Vec<String> = (0..d).map(|a| format!("x{a}")).collect();
    header.push("u".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&header_refs);
    for (n, v) in values.iter().enumerate() {
        let mut row: Vec<String> = nodes[n * d..(n + 1) * d]
            .iter()
            .map(|&x| fmt_f64(x))
            .collect();
        // Keep an exact zero outside Ω (no "-0").
        row.push(fmt_f64(if *v == 0.0 { 0.0 } else { *v }));
        csv.row(&row);
    }
    csv.write(&out.join(format!("eigenfunction_{k}.csv")))?;
    let meta = EigenfunctionMeta {
        e_hat,
        snapshot,
        sign_flipped,
        l2_norm,
        nodes_per_axis: m,
    };
    io::write_json(&out.join(format!("eigenfunction_{k}.json")), &meta)?;
    Ok(meta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub label: String,
    pub detail: String,
    pub pass: bool,
}

/// Compares every estimate with the nearest oracle eigenvalue and checks
/// that no oracle eigenvalue inside the detectable window was missed.
///
/// An estimate passes when `|E_hat − E_k| ≤ grid_resolution + slack`. The
/// detectable window excludes one top-level spacing at each end of the
/// scan interval, since end points are never minima.
pub fn validate(out: &Path, slack: f64) -> Result<Vec<CheckRow>> {
    let cfg = RunConfig::load(&out.join(RESOLVED_CONFIG))?;
    let est = read_estimates(out)?;
    let oracle = read_oracle(out)?;
    if oracle.eigenvalues.is_empty() {
        bail!("{ORACLE_SPECTRUM} holds no eigenvalues");
    }
    let mut rows = Vec::new();
    for (i, e) in est.estimates.iter().enumerate() {
        let nearest = oracle
            .eigenvalues
            .iter()
            .copied()
            .min_by(|a, b| (a - e.e_hat).abs().total_cmp(&(b - e.e_hat).abs()))
            .expect("non-empty");
        let err = (e.e_hat - nearest).abs();
        let tol = e.grid_resolution + slack;
        rows.push(CheckRow {
            label: format!("estimate {}", i + 1),
            detail: format!(
                "E_hat={:.6} oracle={:.6} |err|={:.2e} tol={:.2e}",
                e.e_hat, nearest, err, tol
            ),
            pass: err <= tol,
        });
    }
    let h = cfg.scan.spacing();
    for &ek in &oracle.eigenvalues {
        if ek <= cfg.scan.e_lo + h || ek >= cfg.scan.e_hi - h {
            continue;
        }
        let found = est
            .estimates
            .iter()
            .any(|e| (e.e_hat - ek).abs() <= e.grid_resolution + slack);
        if !found {
            rows.push(CheckRow {
                label: "oracle".into(),
                detail: format!("missed eigenvalue {ek:.6}"),
                pass: false,
            });
        }
    }
    Ok(rows)
}

/// Convenience for reporting: one value serialised like the artifacts.
pub fn f17(v: f64) -> String {
    serde_json::to_string(&F17(v)).expect("serialises")
}
