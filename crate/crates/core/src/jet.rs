//! Second-order jets: the value, spatial gradient and spatial Hessian of a
//! scalar field at one point.

use serde::{Deserialize, Serialize};

/// Value, gradient and Hessian of a scalar field at a point.
///
/// The Hessian is stored row-major as a flat `d * d` vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jet2 {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<f64>,
}

impl Jet2 {
    pub fn constant(dim: usize, value: f64) -> Self {
        Self {
            value,
            gradient: vec![0.0; dim],
            hessian: vec![0.0; dim * dim],
        }
    }

    #[inline]
    pub fn hess(&self, i: usize, j: usize) -> f64 {
        self.hessian[i * self.gradient.len() + j]
    }

    /// Largest entry of `|H - H^T|`.
    pub fn asymmetry(&self) -> f64 {
        let d = self.gradient.len();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                worst = worst.max((self.hess(i, j) - self.hess(j, i)).abs());
            }
        }
        worst
    }

    /// Number of scalar components `1 + d + d*d` in the flat layout.
    pub fn components(dim: usize) -> usize {
        1 + dim + dim * dim
    }

    /// Flat layout: value, gradient, Hessian (row-major).
    pub fn to_flat(&self, out: &mut [f64]) {
        let d = self.gradient.len();
        out[0] = self.value;
        out[1..1 + d].copy_from_slice(&self.gradient);
        out[1 + d..1 + d + d * d].copy_from_slice(&self.hessian);
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Self {
        Self {
            value: flat[0],
            gradient: flat[1..1 + dim].to_vec(),
            hessian: flat[1 + dim..1 + dim + dim * dim].to_vec(),
        }
    }

    /// Jet of the product `self * other` (second-order Leibniz rule).
    pub fn mul(&self, other: &Jet2) -> Jet2 {
        let d = self.gradient.len();
        let (a, b) = (self, other);
        let gradient = (0..d)
            .map(|i| a.value * b.gradient[i] + b.value * a.gradient[i])
            .collect();
        let mut hessian = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                hessian[i * d + j] = a.value * b.hess(i, j)
                    + a.gradient[i] * b.gradient[j]
                    + b.gradient[i] * a.gradient[j]
                    + b.value * a.hess(i, j);
            }
        }
        Jet2 {
            value: a.value * b.value,
            gradient,
            hessian,
        }
    }
}

/// A batch of jets in the flat layout, one row of `1 + d + d*d` per point.
#[derive(Clone, Debug, PartialEq)]
pub struct JetBatch {
    dim: usize,
    data: Vec<f64>,
}

impl JetBatch {
    pub fn zeros(dim: usize, len: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; len * Jet2::components(dim)],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / Jet2::components(self.dim)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let c = Jet2::components(self.dim);
        &self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = Jet2::components(self.dim);
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn jet(&self, i: usize) -> Jet2 {
        Jet2::from_flat(self.dim, self.row(i))
    }

    pub fn view(&self, i: usize) -> JetView<'_> {
        JetView::new(self.dim, self.row(i))
    }

    /// Flat `len × components` storage.
    pub fn raw(&self) -> &[f64] {
        &self.data
    }
}

/// Borrowed view of one flat jet row.
#[derive(Clone, Copy, Debug)]
pub struct JetView<'a> {
    pub dim: usize,
    pub row: &'a [f64],
}

impl<'a> JetView<'a> {
    pub fn new(dim: usize, row: &'a [f64]) -> Self {
        Self { dim, row }
    }
}

/// Read access shared by owned jets and flat rows, so residuals evaluate
/// identically on either.
pub trait JetRef {
    fn dim(&self) -> usize;
    fn value(&self) -> f64;
    fn gradient(&self) -> &[f64];
    fn hessian(&self) -> &[f64];

    fn laplacian(&self) -> f64 {
        let d = self.dim();
        let h = self.hessian();
        let mut tr = 0.0;
        for i in 0..d {
            tr += h[i * d + i];
        }
        tr
    }
}

impl JetRef for Jet2 {
    fn dim(&self) -> usize {
        self.gradient.len()
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn gradient(&self) -> &[f64] {
        &self.gradient
    }
    fn hessian(&self) -> &[f64] {
        &self.hessian
    }
}

impl JetRef for JetView<'_> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self) -> f64 {
        self.row[0]
    }
    fn gradient(&self) -> &[f64] {
        &self.row[1..1 + self.dim]
    }
    fn hessian(&self) -> &[f64] {
        &self.row[1 + self.dim..]
    }
}
