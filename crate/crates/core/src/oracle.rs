//! Reference spectra for validation: closed forms on rectangles and balls,
//! a 5-point finite-difference solver for other 2D domains, and the
//! upper-bound curve `U(E) = min_k (E_k − E)²`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::residual::Potential;

/// Relative gap below which two closed-form eigenvalues are the same value.
const MERGE_RTOL: f64 = 1e-10;
/// The same for iteratively computed eigenvalues.
const FD_MERGE_RTOL: f64 = 1e-8;
const BALL_MAX_ANGULAR: usize = 12;
const BALL_MAX_RADIAL: usize = 12;
const BESSEL_MAX_ZERO: usize = 20;
const ZERO_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    ClosedForm,
    FiniteDifference { grid_n: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSpectrum {
    /// Strictly ascending, multiplicities merged.
    pub eigenvalues: Vec<f64>,
    pub provenance: Provenance,
    pub domain: Domain,
    pub potential: Potential,
}

fn merge_sorted(values: Vec<f64>, count: usize) -> Vec<f64> {
    merge_sorted_with(values, count, MERGE_RTOL)
}

fn merge_sorted_with(mut values: Vec<f64>, count: usize, rtol: f64) -> Vec<f64> {
    values.sort_by(|a, b| a.total_cmp(b));
    let mut out: Vec<f64> = Vec::with_capacity(count);
    for v in values {
        match out.last() {
            Some(&last) if (v - last).abs() <= rtol * v.abs().max(1.0) => {}
            _ => out.push(v),
        }
        if out.len() == count {
            break;
        }
    }
    out
}

/// The `count` smallest distinct values of `π² Σᵢ (mᵢ/Lᵢ)²`, `mᵢ ≥ 1`.
pub fn rectangle_spectrum(lengths: &[f64], count: usize) -> Result<Vec<f64>> {
    if lengths.is_empty() || lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::InvalidArgument("side lengths must be > 0".into()));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    // Each of the `count` smallest distinct values has every mᵢ ≤ count.
    let dim = lengths.len();
    let mut values = Vec::new();
    let mut m = vec![1usize; dim];
    loop {
        let v: f64 = m
            .iter()
            .zip(lengths)
            .map(|(&mi, li)| (mi as f64 / li).powi(2))
            .sum::<f64>()
            * PI
            * PI;
        values.push(v);
        let mut axis = 0;
        loop {
            if axis == dim {
                return Ok(merge_sorted(values, count));
            }
            m[axis] += 1;
            if m[axis] <= count {
                break;
            }
            m[axis] = 1;
            axis += 1;
        }
    }
}

/// Bessel functions `J_{ν−1}(x)` and `J_ν(x)` for `2ν` a non-negative
/// integer, by Miller's backward recurrence.
///
/// Integer orders are normalised with `J₀ + 2 Σ J₂ₖ = 1`; half-integer
/// orders against the closed forms of `J_{1/2}` and `J_{3/2}`.
pub fn bessel_j_pair(nu: f64, x: f64) -> Result<(f64, f64)> {
    let twice = 2.0 * nu;
    if !(nu >= 0.0 && twice.fract() == 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Bessel order {nu} is not a non-negative multiple of 1/2"
        )));
    }
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::InvalidArgument("Bessel argument must be > 0".into()));
    }
    let n = nu.floor() as usize;
    let half = nu.fract() != 0.0;
    let m = (n + 1).max(x.ceil() as usize);
    let top = m + 20 + (40.0 * m as f64).sqrt() as usize;

    // vals[k] ∝ J_{f+k}(x), f = ν − n.
    let f = nu - n as f64;
    let mut vals = vec![0.0; top + 2];
    vals[top] = 1e-300;
    for k in (1..=top).rev() {
        vals[k - 1] = 2.0 * (f + k as f64) / x * vals[k] - vals[k + 1];
        if vals[k - 1].abs() > 1e250 {
            vals[k - 1..].iter_mut().for_each(|v| *v *= 1e-250);
        }
    }

    let scale = if half {
        let c = (2.0 / (PI * x)).sqrt();
        let (j_half, j_3half) = (c * x.sin(), c * (x.sin() / x - x.cos()));
        if j_half.abs() >= j_3half.abs() {
            j_half / vals[0]
        } else {
            j_3half / vals[1]
        }
    } else {
        let norm: f64 = vals[0] + 2.0 * vals[2..].iter().step_by(2).sum::<f64>();
        1.0 / norm
    };
    let prev = match (n, half) {
        (0, false) => -vals[1] * scale,
        (0, true) => (2.0 / (PI * x)).sqrt() * x.cos(),
        _ => vals[n - 1] * scale,
    };
    Ok((prev, vals[n] * scale))
}

pub fn bessel_j(nu: f64, x: f64) -> Result<f64> {
    bessel_j_pair(nu, x).map(|(_, j)| j)
}

/// `k`-th positive zero of `J_ν`.
///
/// Zeros are bracketed by a sign-change scan starting at `x = ν` (no zero
/// lies below it), located by bisection and polished with Newton steps that
/// are kept inside the bracket.
pub fn bessel_zero(nu: f64, k: usize) -> Result<f64> {
    if k == 0 || k > BESSEL_MAX_ZERO {
        return Err(Error::InvalidArgument(format!(
            "zero index {k} outside 1..={BESSEL_MAX_ZERO}"
        )));
    }
    bessel_j(nu, 1.0)?;
    let step = 0.25;
    let mut a = nu.max(step);
    let mut fa = bessel_j(nu, a)?;
    let mut found = 0;
    // Zero spacing exceeds ~2.9, so a 0.25 step cannot skip a pair of zeros.
    let limit = nu + (k as f64 + nu + 4.0) * PI + 10.0;
    while a < limit {
        let b = a + step;
        let fb = bessel_j(nu, b)?;
        if fa == 0.0 {
            found += 1;
            if found == k {
                return Ok(a);
            }
        } else if fa * fb < 0.0 {
            found += 1;
            if found == k {
                return refine_zero(nu, a, b, fa);
            }
        }
        a = b;
        fa = fb;
    }
    Err(Error::Solver(format!(
        "failed to bracket zero {k} of J_{nu}"
    )))
}

fn refine_zero(nu: f64, mut a: f64, mut b: f64, mut fa: f64) -> Result<f64> {
    while b - a > 1e-6 {
        let m = 0.5 * (a + b);
        let fm = bessel_j(nu, m)?;
        if fm == 0.0 {
            return Ok(m);
        }
        if fa * fm < 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
    }
    let mut x = 0.5 * (a + b);
    for _ in 0..20 {
        let (jm1, j) = bessel_j_pair(nu, x)?;
        let dj = jm1 - nu / x * j;
        let next = x - j / dj;
        if !(next > a && next < b) {
            break;
        }
        let done = (next - x).abs() < 1e-3 * ZERO_TOL;
        x = next;
        if done {
            break;
        }
    }
    Ok(x)
}

/// Dirichlet eigenvalues of `−Δ` on the `d`-ball of radius `R`:
/// `(j_{ν,k}/R)²` with `ν = d/2 − 1 + ℓ`.
pub fn ball_spectrum(dim: usize, radius: f64, count: usize) -> Result<OracleSpectrum> {
    if dim < 2 {
        return Err(Error::InvalidArgument("ball spectrum needs d >= 2".into()));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::InvalidArgument("radius must be > 0".into()));
    }
    let mut values = Vec::new();
    for l in 0..=BALL_MAX_ANGULAR {
        let nu = dim as f64 / 2.0 - 1.0 + l as f64;
        for k in 1..=BALL_MAX_RADIAL {
            let z = bessel_zero(nu, k)?;
            values.push((z / radius).powi(2));
        }
    }
    Ok(OracleSpectrum {
        eigenvalues: merge_sorted(values, count),
        provenance: Provenance::ClosedForm,
        domain: Domain::Ball { dim, radius },
        potential: Potential::Zero,
    })
}

/// Closed-form spectrum where one exists (`V = 0` on balls and rectangles).
pub fn closed_form_spectrum(domain: &Domain, count: usize) -> Option<Result<OracleSpectrum>> {
    match domain {
        Domain::Ball { dim, radius } if *dim >= 2 => Some(ball_spectrum(*dim, *radius, count)),
        Domain::Rectangle { bounds } => {
            let lengths: Vec<f64> = bounds.iter().map(|[a, b]| b - a).collect();
            Some(
                rectangle_spectrum(&lengths, count).map(|eigenvalues| OracleSpectrum {
                    eigenvalues,
                    provenance: Provenance::ClosedForm,
                    domain: domain.clone(),
                    potential: Potential::Zero,
                }),
            )
        }
        _ => None,
    }
}

const MIN_ARM_FRACTION: f64 = 1e-3;

/// Interior nodes of a uniform grid and the 5-point operator `−Δ_h + V`.
///
/// An arm that leaves the domain at distance `θh` contributes `1/(θh²)` to
/// the diagonal instead of `1/h²`, which places the Dirichlet condition on
/// the true boundary rather than on the excluded node.
struct FdOperator {
    n_nodes: usize,
    diag: Vec<f64>,
    /// Up to four neighbour indices per node; `usize::MAX` marks a Dirichlet neighbour.
    neighbours: Vec<[usize; 4]>,
    inv_hx2: f64,
    inv_hy2: f64,
}

/// Fraction `θ ∈ (0, 1]` of the arm from interior node `p` to `p + arm`
/// that lies inside the domain, by bisection.
fn boundary_fraction(domain: &Domain, p: [f64; 2], arm: [f64; 2]) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if domain.contains_unchecked(&[p[0] + mid * arm[0], p[1] + mid * arm[1]]) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi.max(MIN_ARM_FRACTION)
}

impl FdOperator {
    fn new(domain: &Domain, potential: &Potential, grid_n: usize) -> Result<Self> {
        let bbox = domain.bounding_box();
        let [x0, x1] = bbox[0];
        let [y0, y1] = bbox[1];
        let hx = (x1 - x0) / grid_n as f64;
        let hy = (y1 - y0) / grid_n as f64;
        let side = grid_n + 1;
        let mut index = vec![usize::MAX; side * side];
        let mut coords = Vec::new();
        for iy in 1..grid_n {
            for ix in 1..grid_n {
                let p = [x0 + ix as f64 * hx, y0 + iy as f64 * hy];
                if domain.contains_unchecked(&p) {
                    index[iy * side + ix] = coords.len();
                    coords.push(p);
                }
            }
        }
        if coords.is_empty() {
            return Err(Error::InvalidArgument("grid has no interior nodes".into()));
        }
        let (inv_hx2, inv_hy2) = (1.0 / (hx * hx), 1.0 / (hy * hy));
        let mut diag = Vec::with_capacity(coords.len());
        let mut neighbours = Vec::with_capacity(coords.len());
        for iy in 1..grid_n {
            for ix in 1..grid_n {
                if index[iy * side + ix] == usize::MAX {
                    continue;
                }
                let p = coords[index[iy * side + ix]];
                let nb = [
                    index[iy * side + ix - 1],
                    index[iy * side + ix + 1],
                    index[(iy - 1) * side + ix],
                    index[(iy + 1) * side + ix],
                ];
                let arms = [[-hx, 0.0], [hx, 0.0], [0.0, -hy], [0.0, hy]];
                let mut d = 2.0 * inv_hx2 + 2.0 * inv_hy2 + potential.eval(&p);
                for (slot, (&j, arm)) in nb.iter().zip(&arms).enumerate() {
                    if j == usize::MAX {
                        let w = if slot < 2 { inv_hx2 } else { inv_hy2 };
                        d += (1.0 / boundary_fraction(domain, p, *arm) - 1.0) * w;
                    }
                }
                diag.push(d);
                neighbours.push(nb);
            }
        }
        Ok(Self {
            n_nodes: coords.len(),
            diag,
            neighbours,
            inv_hx2,
            inv_hy2,
        })
    }

    fn apply(&self, shift: f64, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n_nodes {
            let nb = &self.neighbours[i];
            let mut acc = (self.diag[i] + shift) * x[i];
            for (slot, &j) in nb.iter().enumerate() {
                if j != usize::MAX {
                    let w = if slot < 2 { self.inv_hx2 } else { self.inv_hy2 };
                    acc -= w * x[j];
                }
            }
            y[i] = acc;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients on the SPD operator `A + shift·I`; `x` holds the
/// initial guess and receives the solution.
fn conjugate_gradient(op: &FdOperator, shift: f64, b: &[f64], x: &mut [f64], rtol: f64) -> bool {
    let n = b.len();
    let mut r = vec![0.0; n];
    let mut ap = vec![0.0; n];
    op.apply(shift, x, &mut ap);
    for i in 0..n {
        r[i] = b[i] - ap[i];
    }
    let b_norm = dot(b, b).sqrt().max(f64::MIN_POSITIVE);
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let max_iter = 20 * n.max(100);
    for _ in 0..max_iter {
        if rr.sqrt() <= rtol * b_norm {
            return true;
        }
        op.apply(shift, &p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return false;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    rr.sqrt() <= rtol * b_norm
}

fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let c = dot(v, q);
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= c * qi;
            }
        }
    }
    let n = dot(v, v).sqrt();
    for vi in v.iter_mut() {
        *vi /= n;
    }
}

/// Default finite-difference resolution (intervals per axis).
pub const DEFAULT_FD_GRID: usize = 128;

const CG_RTOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 2000;
const POWER_RTOL: f64 = 1e-12;

/// Smallest eigenvalues of the 5-point discretisation of `−Δ + V` on a 2D
/// domain, by inverse power iteration with Gram–Schmidt deflation.
///
/// The grid has `grid_n` intervals per axis of the bounding box; nodes outside
/// the open domain are excluded and the boundary is located along each cut
/// stencil arm. Returns the `count` smallest distinct
/// values; modes are computed until that many are found.
pub fn fd_spectrum(
    domain: &Domain,
    potential: &Potential,
    grid_n: usize,
    count: usize,
) -> Result<OracleSpectrum> {
    domain.validate()?;
    potential.validate()?;
    if domain.dim() != 2 {
        return Err(Error::InvalidArgument(
            "finite-difference oracle is 2D only".into(),
        ));
    }
    if grid_n < 32 {
        return Err(Error::InvalidArgument("grid_n must be >= 32".into()));
    }
    let op = FdOperator::new(domain, potential, grid_n)?;
    let n = op.n_nodes;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    let mut shift = 0.0;
    let mut retried = false;
    let mut ax = vec![0.0; n];

    'modes: while basis.len() < n
        && merge_sorted_with(values.clone(), count, FD_MERGE_RTOL).len() < count
    {
        // Deterministic, generic start vector.
        let mut v: Vec<f64> = (0..n)
            .map(|i| 1.0 + 0.5 * ((i as f64 + 1.0) * (basis.len() as f64 + 1.7)).sin())
            .collect();
        orthonormalize(&mut v, &basis);
        let mut lambda = f64::INFINITY;
        let mut y = v.clone();
        for _ in 0..POWER_MAX_ITER {
            if !conjugate_gradient(&op, shift, &v, &mut y, CG_RTOL) {
                if retried {
                    return Err(Error::Solver("conjugate gradients did not converge".into()));
                }
                retried = true;
                shift += 1.0;
                continue 'modes;
            }
            orthonormalize(&mut y, &basis);
            op.apply(0.0, &y, &mut ax);
            let rq = dot(&y, &ax);
            let converged = (rq - lambda).abs() <= POWER_RTOL * rq.abs();
            lambda = rq;
            v.copy_from_slice(&y);
            // Next solve starts from the current eigenvector estimate.
            for yi in y.iter_mut() {
                *yi /= lambda + shift;
            }
            if converged {
                break;
            }
        }
        values.push(lambda);
        basis.push(v);
    }
    Ok(OracleSpectrum {
        eigenvalues: merge_sorted_with(values, count, FD_MERGE_RTOL),
        provenance: Provenance::FiniteDifference { grid_n },
        domain: domain.clone(),
        potential: *potential,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpperBound {
    pub points: Vec<(f64, f64)>,
    /// Grid values beyond the largest supplied eigenvalue, where the bound
    /// may miss higher eigenvalues.
    pub beyond_spectrum: Vec<f64>,
}

/// `U(E) = min_k (E_k − E)²` on a grid.
pub fn upper_bound_curve(eigenvalues: &[f64], grid: &[f64]) -> Result<UpperBound> {
    if eigenvalues.is_empty() {
        return Err(Error::InvalidArgument("empty spectrum".into()));
    }
    let largest = eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let points = grid
        .iter()
        .map(|&e| {
            let u = eigenvalues
                .iter()
                .map(|ek| (ek - e) * (ek - e))
                .fold(f64::INFINITY, f64::min);
            (e, u)
        })
        .collect();
    let beyond_spectrum = grid.iter().copied().filter(|&e| e > largest).collect();
    Ok(UpperBound {
        points,
        beyond_spectrum,
    })
}
