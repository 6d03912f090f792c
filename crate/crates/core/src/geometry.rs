//! Computational domains, uniform interior sampling and polynomial boundary
//! factors.
//!
//! Every domain carries a boundary factor `B` that is a polynomial in `x`,
//! strictly positive inside, zero on the boundary, and vanishing linearly
//! there. Multiplying a network output by `B` enforces homogeneous Dirichlet
//! conditions by construction.
//!
//! | domain    | `B(x)`                                        |
//! |-----------|-----------------------------------------------|
//! | ball      | `R² − |x|²`                                   |
//! | rectangle | `∏ᵢ cᵢ (xᵢ − aᵢ)(bᵢ − xᵢ)`, `cᵢ = 4/(bᵢ−aᵢ)²` |
//! | annulus   | `(|x|² − r₀²)(r₁² − |x|²)`                    |
//! | triangle  | `27 λ₁ λ₂ λ₃` (barycentric coordinates)       |

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Jet2;

/// Minimum proposals before the acceptance-rate check can fire.
const MIN_ATTEMPTS_FOR_CHECK: u64 = 100_000;
const MIN_ACCEPTANCE_RATE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Domain {
    Ball { dim: usize, radius: f64 },
    Rectangle { bounds: Vec<[f64; 2]> },
    Annulus { inner: f64, outer: f64 },
    Triangle { vertices: [[f64; 2]; 3] },
}

impl Domain {
    pub fn unit_disk() -> Self {
        Domain::Ball {
            dim: 2,
            radius: 1.0,
        }
    }

    pub fn unit_square() -> Self {
        Domain::Rectangle {
            bounds: vec![[0.0, 1.0], [0.0, 1.0]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Domain::Ball { dim, radius } => {
                if *dim < 1 {
                    return Err(Error::InvalidArgument("ball dimension must be >= 1".into()));
                }
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(Error::InvalidArgument("ball radius must be > 0".into()));
                }
            }
            Domain::Rectangle { bounds } => {
                if bounds.is_empty() {
                    return Err(Error::InvalidArgument(
                        "rectangle needs at least one axis".into(),
                    ));
                }
                for (i, [a, b]) in bounds.iter().enumerate() {
                    if !(a.is_finite() && b.is_finite() && a < b) {
                        return Err(Error::InvalidArgument(format!(
                            "rectangle axis {i}: interval [{a}, {b}] is empty"
                        )));
                    }
                }
            }
            Domain::Annulus { inner, outer } => {
                if !(inner.is_finite() && outer.is_finite() && *inner > 0.0 && outer > inner) {
                    return Err(Error::InvalidArgument(
                        "annulus radii must satisfy outer > inner > 0".into(),
                    ));
                }
            }
            Domain::Triangle { vertices } => {
                if vertices.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument(
                        "triangle vertices must be finite".into(),
                    ));
                }
                if signed_area(vertices).abs() < 1e-14 {
                    return Err(Error::InvalidArgument(
                        "triangle vertices are collinear".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Ball { dim, .. } => *dim,
            Domain::Rectangle { bounds } => bounds.len(),
            Domain::Annulus { .. } | Domain::Triangle { .. } => 2,
        }
    }

    /// Axis-aligned box containing the closed domain.
    pub fn bounding_box(&self) -> Vec<[f64; 2]> {
        match self {
            Domain::Ball { dim, radius } => vec![[-radius, *radius]; *dim],
            Domain::Rectangle { bounds } => bounds.clone(),
            Domain::Annulus { outer, .. } => vec![[-outer, *outer]; 2],
            Domain::Triangle { vertices } => (0..2)
                .map(|axis| {
                    let lo = vertices
                        .iter()
                        .map(|v| v[axis])
                        .fold(f64::INFINITY, f64::min);
                    let hi = vertices
                        .iter()
                        .map(|v| v[axis])
                        .fold(f64::NEG_INFINITY, f64::max);
                    [lo, hi]
                })
                .collect(),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "point has dimension {}, domain has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Strict interior membership.
    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        self.check_dim(x)?;
        Ok(self.contains_unchecked(x))
    }

    pub(crate) fn contains_unchecked(&self, x: &[f64]) -> bool {
        match self {
            Domain::Ball { radius, .. } => norm_sq(x) < radius * radius,
            Domain::Rectangle { bounds } => {
                bounds.iter().zip(x).all(|([a, b], xi)| a < xi && xi < b)
            }
            Domain::Annulus { inner, outer } => {
                let q = norm_sq(x);
                inner * inner < q && q < outer * outer
            }
            Domain::Triangle { vertices } => barycentric(vertices, x).iter().all(|&l| l > 0.0),
        }
    }

    /// Exact Lebesgue measure.
    pub fn volume(&self) -> f64 {
        match self {
            Domain::Ball { dim, radius } => unit_ball_volume(*dim) * radius.powi(*dim as i32),
            Domain::Rectangle { bounds } => bounds.iter().map(|[a, b]| b - a).product(),
            Domain::Annulus { inner, outer } => PI * (outer * outer - inner * inner),
            Domain::Triangle { vertices } => signed_area(vertices).abs(),
        }
    }

    /// Boundary factor `B(x)` with its exact gradient and Hessian.
    ///
    /// Defined on the whole bounding box; only meaningful on the closed domain.
    pub fn boundary_factor(&self, x: &[f64]) -> Jet2 {
        let d = x.len();
        match self {
            Domain::Ball { radius, .. } => {
                let mut jet = Jet2::constant(d, radius * radius - norm_sq(x));
                for i in 0..d {
                    jet.gradient[i] = -2.0 * x[i];
                    jet.hessian[i * d + i] = -2.0;
                }
                jet
            }
            Domain::Rectangle { bounds } => {
                // B = ∏ fᵢ(xᵢ) with fᵢ quadratic in one coordinate.
                let mut f = vec![0.0; d];
                let mut df = vec![0.0; d];
                let mut d2f = vec![0.0; d];
                for (i, [a, b]) in bounds.iter().enumerate() {
                    let c = 4.0 / ((b - a) * (b - a));
                    f[i] = c * (x[i] - a) * (b - x[i]);
                    df[i] = c * (a + b - 2.0 * x[i]);
                    d2f[i] = -2.0 * c;
                }
                let prod_except = |skip: &[usize]| -> f64 {
                    (0..d).filter(|k| !skip.contains(k)).map(|k| f[k]).product()
                };
                let mut jet = Jet2::constant(d, prod_except(&[]));
                for i in 0..d {
                    jet.gradient[i] = df[i] * prod_except(&[i]);
                    for j in 0..d {
                        jet.hessian[i * d + j] = if i == j {
                            d2f[i] * prod_except(&[i])
                        } else {
                            df[i] * df[j] * prod_except(&[i, j])
                        };
                    }
                }
                jet
            }
            Domain::Annulus { inner, outer } => {
                let (r0, r1) = (inner * inner, outer * outer);
                let q = norm_sq(x);
                // B(q) = (q − r0)(r1 − q); dB/dq and d²B/dq² = −2.
                let db = r0 + r1 - 2.0 * q;
                let mut jet = Jet2::constant(d, (q - r0) * (r1 - q));
                for i in 0..d {
                    jet.gradient[i] = 2.0 * db * x[i];
                    for j in 0..d {
                        let delta = if i == j { 2.0 * db } else { 0.0 };
                        jet.hessian[i * d + j] = delta - 8.0 * x[i] * x[j];
                    }
                }
                jet
            }
            Domain::Triangle { vertices } => {
                let (lam, grads) = barycentric_affine(vertices, x);
                // B = 27 λ₁λ₂λ₃; each λ is affine so only mixed terms survive.
                let mut jet = Jet2::constant(d, 27.0 * lam[0] * lam[1] * lam[2]);
                for i in 0..d {
                    jet.gradient[i] = 27.0
                        * (grads[0][i] * lam[1] * lam[2]
                            + grads[1][i] * lam[0] * lam[2]
                            + grads[2][i] * lam[0] * lam[1]);
                }
                for i in 0..d {
                    for j in 0..d {
                        let mut h = 0.0;
                        for (a, b, c) in [(0, 1, 2), (0, 2, 1), (1, 2, 0)] {
                            h += (grads[a][i] * grads[b][j] + grads[b][i] * grads[a][j]) * lam[c];
                        }
                        jet.hessian[i * d + j] = 27.0 * h;
                    }
                }
                jet
            }
        }
    }

    /// Uniform i.i.d. interior points by rejection from the bounding box.
    pub fn sample_interior(&self, n: usize, seed: u64) -> Result<PointBatch> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be >= 1".into()));
        }
        self.validate()?;
        let bbox = self.bounding_box();
        let d = bbox.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(n * d);
        let mut x = vec![0.0; d];
        let mut attempts: u64 = 0;
        let mut accepted = 0;
        while accepted < n {
            for (xi, [lo, hi]) in x.iter_mut().zip(&bbox) {
                let u: f64 = rng.gen();
                *xi = lo + (hi - lo) * u;
            }
            attempts += 1;
            if self.contains_unchecked(&x) {
                points.extend_from_slice(&x);
                accepted += 1;
            } else if attempts >= MIN_ATTEMPTS_FOR_CHECK {
                let rate = accepted as f64 / attempts as f64;
                if rate < MIN_ACCEPTANCE_RATE {
                    return Err(Error::DegenerateDomain { rate, attempts });
                }
            }
        }
        Ok(PointBatch {
            dim: d,
            points,
            seed,
            attempts,
        })
    }

    /// Point on the boundary parametrised by `dim + 1` uniforms in [0, 1).
    ///
    /// `t[0]` picks the boundary piece, the rest place the point on it.
    pub fn boundary_point(&self, t: &[f64]) -> Vec<f64> {
        match self {
            Domain::Ball { dim, radius } => {
                // Normalise a direction built from the uniforms; fall back to e₁.
                let dir: Vec<f64> = (0..*dim).map(|i| 2.0 * t[i + 1] - 1.0).collect();
                let n = norm_sq(&dir).sqrt();
                if n < 1e-12 {
                    let mut e = vec![0.0; *dim];
                    e[0] = *radius;
                    return e;
                }
                dir.iter().map(|v| radius * v / n).collect()
            }
            Domain::Rectangle { bounds } => {
                let d = bounds.len();
                let face = ((t[0] * (2 * d) as f64) as usize).min(2 * d - 1);
                let axis = face / 2;
                bounds
                    .iter()
                    .enumerate()
                    .map(|(i, [a, b])| {
                        if i == axis {
                            if face.is_multiple_of(2) {
                                *a
                            } else {
                                *b
                            }
                        } else {
                            a + (b - a) * t[i + 1]
                        }
                    })
                    .collect()
            }
            Domain::Annulus { inner, outer } => {
                let theta = 2.0 * PI * t[1];
                let r = if t[0] < 0.5 { *inner } else { *outer };
                vec![r * theta.cos(), r * theta.sin()]
            }
            Domain::Triangle { vertices } => {
                let edge = ((t[0] * 3.0) as usize).min(2);
                let (p, q) = (vertices[edge], vertices[(edge + 1) % 3]);
                let s = t[1];
                vec![p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])]
            }
        }
    }
}

/// Monte Carlo collocation points, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct PointBatch {
    dim: usize,
    points: Vec<f64>,
    seed: u64,
    attempts: u64,
}

impl PointBatch {
    /// Batch from explicit coordinates, e.g. a hand-built test point.
    pub fn from_points(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(
                "point buffer must hold a positive whole number of points".into(),
            ));
        }
        let attempts = (points.len() / dim) as u64;
        Ok(Self {
            dim,
            points,
            seed: 0,
            attempts,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    /// Flat `len × dim` coordinates.
    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Bounding-box proposals consumed to produce the batch.
    pub fn attempts(&self) -> u64 {
        self.attempts
    }
}

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn unit_ball_volume(d: usize) -> f64 {
    // V_d = 2π/d · V_{d−2}, V_0 = 1, V_1 = 2.
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * PI / d as f64 * unit_ball_volume(d - 2),
    }
}

fn signed_area(v: &[[f64; 2]; 3]) -> f64 {
    0.5 * ((v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]))
}

fn barycentric(v: &[[f64; 2]; 3], x: &[f64]) -> [f64; 3] {
    barycentric_affine(v, x).0
}

/// Barycentric coordinates and their (constant) gradients.
fn barycentric_affine(v: &[[f64; 2]; 3], x: &[f64]) -> ([f64; 3], [[f64; 2]; 3]) {
    let two_a = 2.0 * signed_area(v);
    let mut lam = [0.0; 3];
    let mut grads = [[0.0; 2]; 3];
    for i in 0..3 {
        // λᵢ vanishes on the edge opposite vertex i.
        let p = v[(i + 1) % 3];
        let q = v[(i + 2) % 3];
        let gx = (p[1] - q[1]) / two_a;
        let gy = (q[0] - p[0]) / two_a;
        grads[i] = [gx, gy];
        lam[i] = gx * (x[0] - p[0]) + gy * (x[1] - p[1]);
    }
    (lam, grads)
}
