//! Two-hidden-layer tanh network with exact spatial jets and exact
//! parameter gradients of losses built from those jets.
//!
//! Spatial derivatives are propagated forward as second-order jets: affine
//! layers act linearly on `(value, gradient, Hessian)`, and an activation `σ`
//! maps a jet `(z, g, H)` to `(σ(z), σ'(z) g, σ'(z) H + σ''(z) g gᵀ)`.
//! Parameter gradients are obtained by running the adjoint of that
//! propagation backwards, so they are exact up to rounding.
//!
//! Points are processed in chunks with layer jets stored as
//! `[unit][component][point]`, so the hidden-to-hidden layer and its adjoint
//! are plain matrix products over the whole chunk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Domain, PointBatch};
use crate::jet::{Jet2, JetBatch};

/// Points processed together; bounds the size of the forward tape.
const CHUNK: usize = 256;

const SNAPSHOT_FORMAT: &str = "eigenpinn-mlp";
const SNAPSHOT_VERSION: u32 = 1;

/// Weights and biases of a `[d, h1, h2, 1]` network.
///
/// Flat layout: `W1 (h1×d) | b1 | W2 (h2×h1) | b2 | w3 (h2) | b3`, all
/// matrices row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    widths: [usize; 4],
    seed: u64,
    data: Vec<f64>,
}

/// Gradient of a scalar loss with respect to every entry of [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradient {
    widths: [usize; 4],
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    d: usize,
    h1: usize,
    h2: usize,
}

impl Layout {
    fn new(widths: [usize; 4]) -> Self {
        Self {
            d: widths[0],
            h1: widths[1],
            h2: widths[2],
        }
    }
    fn w1(&self) -> std::ops::Range<usize> {
        0..self.h1 * self.d
    }
    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.h1 * self.d;
        s..s + self.h1
    }
    fn w2(&self) -> std::ops::Range<usize> {
        let s = self.b1().end;
        s..s + self.h2 * self.h1
    }
    fn b2(&self) -> std::ops::Range<usize> {
        let s = self.w2().end;
        s..s + self.h2
    }
    fn w3(&self) -> std::ops::Range<usize> {
        let s = self.b2().end;
        s..s + self.h2
    }
    fn b3(&self) -> usize {
        self.w3().end
    }
    fn len(&self) -> usize {
        self.b3() + 1
    }
}

fn check_widths(widths: &[usize]) -> Result<[usize; 4]> {
    match widths {
        [d, h1, h2, 1] if *d >= 1 && *h1 >= 1 && *h2 >= 1 => Ok([*d, *h1, *h2, 1]),
        _ => Err(Error::InvalidArgument(format!(
            "widths must be [d, h1, h2, 1] with all entries >= 1, got {widths:?}"
        ))),
    }
}

/// Glorot-uniform bound `√(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases. Deterministic in `seed`.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        let widths = check_widths(widths)?;
        let lay = Layout::new(widths);
        let mut data = vec![0.0; lay.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (range, fan_in, fan_out) in [
            (lay.w1(), lay.d, lay.h1),
            (lay.w2(), lay.h1, lay.h2),
            (lay.w3(), lay.h2, 1),
        ] {
            let bound = glorot_bound(fan_in, fan_out);
            for w in &mut data[range] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(Self { widths, seed, data })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        let widths = check_widths(widths)?;
        Ok(Self {
            widths,
            seed: 0,
            data: vec![0.0; Layout::new(widths).len()],
        })
    }

    pub fn from_flat(widths: &[usize], seed: u64, data: Vec<f64>) -> Result<Self> {
        let widths = check_widths(widths)?;
        let expected = Layout::new(widths).len();
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} parameters for widths {widths:?}, got {}",
                data.len()
            )));
        }
        Ok(Self { widths, seed, data })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Output-layer bias.
    pub fn output_bias_mut(&mut self) -> &mut f64 {
        let i = Layout::new(self.widths).b3();
        &mut self.data[i]
    }

    /// Output-layer weights `w3`.
    pub fn output_weights_mut(&mut self) -> &mut [f64] {
        let r = Layout::new(self.widths).w3();
        &mut self.data[r]
    }

    /// Second-layer biases `b2`.
    pub fn hidden2_bias_mut(&mut self) -> &mut [f64] {
        let r = Layout::new(self.widths).b2();
        &mut self.data[r]
    }

    /// Jet of the raw network output `N(x)`.
    pub fn forward_jet(&self, x: &[f64]) -> Jet2 {
        forward_single::<Tanh>(self, x)
    }

    /// Jet of the trial function `u = B · N`.
    pub fn trial_jet(&self, domain: &Domain, x: &[f64]) -> Jet2 {
        domain.boundary_factor(x).mul(&self.forward_jet(x))
    }

    /// Serialise as a one-line JSON header followed by little-endian `f64`s.
    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let header = SnapshotHeader {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            widths: self.widths.to_vec(),
            seed: self.seed,
            count: self.data.len(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serialises");
        out.push(b'\n');
        out.reserve(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Snapshot("missing header line".into()))?;
        let header: SnapshotHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Snapshot(format!("bad header: {e}")))?;
        if header.format != SNAPSHOT_FORMAT || header.version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!(
                "unsupported snapshot {} v{}",
                header.format, header.version
            )));
        }
        let body = &bytes[nl + 1..];
        if body.len() != header.count * 8 {
            return Err(Error::Snapshot(format!(
                "expected {} parameter bytes, found {}",
                header.count * 8,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_flat(&header.widths, header.seed, data)
            .map_err(|e| Error::Snapshot(e.to_string()))
    }

    /// Hex SHA-256 prefix of the snapshot bytes; used as a file name.
    pub fn content_id(&self) -> String {
        let digest = Sha256::digest(self.to_snapshot_bytes());
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    format: String,
    version: u32,
    widths: Vec<usize>,
    seed: u64,
    count: usize,
}

impl ParamGradient {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            widths: params.widths,
            data: vec![0.0; params.data.len()],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Gradient with respect to the first-layer biases.
    pub fn hidden1_bias(&self) -> &[f64] {
        &self.data[Layout::new(self.widths).b1()]
    }

    pub fn hidden2_bias(&self) -> &[f64] {
        &self.data[Layout::new(self.widths).b2()]
    }
}

/// Activation with its first three derivatives.
pub(crate) trait Activation {
    fn eval(z: f64) -> [f64; 4];
}

pub(crate) struct Tanh;

impl Activation for Tanh {
    #[inline]
    fn eval(z: f64) -> [f64; 4] {
        let t = z.tanh();
        let t1 = 1.0 - t * t;
        [t, t1, -2.0 * t * t1, t1 * (6.0 * t * t - 2.0)]
    }
}

/// Collocation points with their boundary-factor jets precomputed.
#[derive(Clone, Debug)]
pub struct Collocation {
    points: PointBatch,
    boundary: JetBatch,
}

impl Collocation {
    pub fn new(domain: &Domain, points: PointBatch) -> Result<Self> {
        if points.dim() != domain.dim() {
            return Err(Error::InvalidArgument(format!(
                "batch dimension {} does not match domain dimension {}",
                points.dim(),
                domain.dim()
            )));
        }
        let d = points.dim();
        let mut boundary = JetBatch::zeros(d, points.len());
        for (i, x) in points.iter().enumerate() {
            domain.boundary_factor(x).to_flat(boundary.row_mut(i));
        }
        Ok(Self { points, boundary })
    }

    pub fn points(&self) -> &PointBatch {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }
}

/// Borrowed parameter views.
struct Net<'a> {
    lay: Layout,
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
    w3: &'a [f64],
    b3: f64,
}

impl<'a> Net<'a> {
    fn new(p: &'a MlpParams) -> Self {
        let lay = Layout::new(p.widths);
        Self {
            lay,
            w1: &p.data[lay.w1()],
            b1: &p.data[lay.b1()],
            w2: &p.data[lay.w2()],
            b2: &p.data[lay.b2()],
            w3: &p.data[lay.w3()],
            b3: p.data[lay.b3()],
        }
    }
}

/// `C = A·B` (or `C += A·B` with `accumulate`) for row-major `A (m×k)` and
/// `B (k×n)` given as pointers with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward intermediates for a chunk of `n` points.
///
/// Layer buffers are `[unit][component][point]`; `act*` hold the activation
/// and its first three derivatives as `[order][unit][point]`.
struct Tape {
    n: usize,
    c: usize,
    act1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    act2: Vec<f64>,
    a2: Vec<f64>,
    /// Output jets `[component][point]`.
    net: Vec<f64>,
}

impl Tape {
    fn new(lay: Layout, n: usize) -> Self {
        let c = Jet2::components(lay.d);
        Self {
            n,
            c,
            act1: vec![0.0; 4 * lay.h1 * n],
            a1: vec![0.0; lay.h1 * c * n],
            z2: vec![0.0; lay.h2 * c * n],
            act2: vec![0.0; 4 * lay.h2 * n],
            a2: vec![0.0; lay.h2 * c * n],
            net: vec![0.0; c * n],
        }
    }

    fn resize(&mut self, lay: Layout, n: usize) {
        if n != self.n {
            *self = Tape::new(lay, n);
        }
    }
}

/// Forward jet propagation for points `xs` (flat, `n × d`).
fn forward_batch<A: Activation>(net: &Net, xs: &[f64], tape: &mut Tape) {
    let Layout { d, h1, h2 } = net.lay;
    let (n, c) = (tape.n, tape.c);
    let cn = c * n;

    for j in 0..h1 {
        let row = &net.w1[j * d..(j + 1) * d];
        let a1 = &mut tape.a1[j * cn..(j + 1) * cn];
        for i in 0..n {
            let x = &xs[i * d..(i + 1) * d];
            let mut z = net.b1[j];
            for a in 0..d {
                z += row[a] * x[a];
            }
            let f = A::eval(z);
            for (q, fq) in f.iter().enumerate() {
                tape.act1[(q * h1 + j) * n + i] = *fq;
            }
            a1[i] = f[0];
        }
        let t1 = &tape.act1[(h1 + j) * n..(h1 + j + 1) * n];
        let t2 = &tape.act1[(2 * h1 + j) * n..(2 * h1 + j + 1) * n];
        for a in 0..d {
            let out = &mut a1[(1 + a) * n..(2 + a) * n];
            for (o, t) in out.iter_mut().zip(t1) {
                *o = t * row[a];
            }
            for b in 0..d {
                let w = row[a] * row[b];
                let out = &mut a1[(1 + d + a * d + b) * n..(2 + d + a * d + b) * n];
                for (o, t) in out.iter_mut().zip(t2) {
                    *o = t * w;
                }
            }
        }
    }

    gemm(
        h2,
        h1,
        cn,
        net.w2,
        (h1, 1),
        &tape.a1,
        (cn, 1),
        &mut tape.z2,
        false,
    );

    for k in 0..h2 {
        let z2 = &mut tape.z2[k * cn..(k + 1) * cn];
        for v in &mut z2[..n] {
            *v += net.b2[k];
        }
        let a2 = &mut tape.a2[k * cn..(k + 1) * cn];
        for i in 0..n {
            let f = A::eval(z2[i]);
            for (q, fq) in f.iter().enumerate() {
                tape.act2[(q * h2 + k) * n + i] = *fq;
            }
            a2[i] = f[0];
        }
        let s1 = &tape.act2[(h2 + k) * n..(h2 + k + 1) * n];
        let s2 = &tape.act2[(2 * h2 + k) * n..(2 * h2 + k + 1) * n];
        for a in 0..d {
            let ga = &z2[(1 + a) * n..(2 + a) * n];
            for i in 0..n {
                a2[(1 + a) * n + i] = s1[i] * ga[i];
            }
            for b in 0..d {
                let gb = &z2[(1 + b) * n..(2 + b) * n];
                let h = (1 + d + a * d + b) * n;
                for i in 0..n {
                    a2[h + i] = s1[i] * z2[h + i] + s2[i] * ga[i] * gb[i];
                }
            }
        }
    }

    tape.net.fill(0.0);
    tape.net[..n].fill(net.b3);
    for k in 0..h2 {
        let w = net.w3[k];
        for (o, a) in tape.net.iter_mut().zip(&tape.a2[k * cn..(k + 1) * cn]) {
            *o += w * a;
        }
    }
}

/// Flat product-rule jet `out = b · n`.
#[inline]
fn product_jet(d: usize, b: &[f64], n: &[f64], out: &mut [f64]) {
    let (bv, nv) = (b[0], n[0]);
    out[0] = bv * nv;
    for i in 0..d {
        out[1 + i] = bv * n[1 + i] + nv * b[1 + i];
    }
    for i in 0..d {
        for j in 0..d {
            let h = 1 + d + i * d + j;
            out[h] = bv * n[h] + b[1 + i] * n[1 + j] + n[1 + i] * b[1 + j] + nv * b[h];
        }
    }
}

/// Scratch buffers for the adjoint pass.
struct AdjointScratch {
    net_bar: Vec<f64>,
    hsym: Vec<f64>,
    z2_bar: Vec<f64>,
    a1_bar: Vec<f64>,
}

impl AdjointScratch {
    fn new(lay: Layout, n: usize) -> Self {
        let c = Jet2::components(lay.d);
        Self {
            net_bar: vec![0.0; c * n],
            hsym: vec![0.0; lay.d * lay.d * n],
            z2_bar: vec![0.0; lay.h2 * c * n],
            a1_bar: vec![0.0; lay.h1 * c * n],
        }
    }
}

/// Adjoint pass for one chunk. `u_bar` and `boundary` are the chunk's rows of
/// the loss adjoint and the boundary-factor jets; gradients are accumulated
/// into `grad`.
#[allow(clippy::too_many_arguments)]
fn backward_batch<A: Activation>(
    net: &Net,
    xs: &[f64],
    boundary: &[f64],
    u_bar: &[f64],
    tape: &Tape,
    sc: &mut AdjointScratch,
    grad: &mut [f64],
) {
    let Layout { d, h1, h2 } = net.lay;
    let lay = net.lay;
    let (n, c) = (tape.n, tape.c);
    let cn = c * n;

    // u = B·N  →  N̄, stored [component][point].
    for i in 0..n {
        let b = &boundary[i * c..(i + 1) * c];
        let ub = &u_bar[i * c..(i + 1) * c];
        let bv = b[0];
        let mut v = bv * ub[0];
        for a in 0..d {
            v += b[1 + a] * ub[1 + a];
        }
        for h in 1 + d..c {
            v += ub[h] * b[h];
        }
        sc.net_bar[i] = v;
        for bb in 0..d {
            let mut g = bv * ub[1 + bb];
            for a in 0..d {
                g += (ub[1 + d + a * d + bb] + ub[1 + d + bb * d + a]) * b[1 + a];
            }
            sc.net_bar[(1 + bb) * n + i] = g;
        }
        for h in 1 + d..c {
            sc.net_bar[h * n + i] = bv * ub[h];
        }
        for a in 0..d {
            for bb in 0..d {
                sc.hsym[(a * d + bb) * n + i] = ub[1 + d + a * d + bb] + ub[1 + d + bb * d + a];
            }
        }
    }
    // hsym currently holds the symmetrised ū Hessian; N̄'s is B times it.
    for a in 0..d {
        for bb in 0..d {
            let hs = &mut sc.hsym[(a * d + bb) * n..(a * d + bb + 1) * n];
            for (i, h) in hs.iter_mut().enumerate() {
                *h *= boundary[i * c];
            }
        }
    }

    // Output layer.
    let mut gb3 = 0.0;
    for &v in &sc.net_bar[..n] {
        gb3 += v;
    }
    grad[lay.b3()] += gb3;
    {
        let gw3 = &mut grad[lay.w3()];
        for k in 0..h2 {
            let a2 = &tape.a2[k * cn..(k + 1) * cn];
            let mut acc = 0.0;
            for (x, y) in a2.iter().zip(&sc.net_bar) {
                acc += x * y;
            }
            gw3[k] += acc;
        }
    }

    // Second activation, with ā2[k] = w3[k] · N̄.
    let nb = &sc.net_bar;
    for k in 0..h2 {
        let w = net.w3[k];
        let z2 = &tape.z2[k * cn..(k + 1) * cn];
        let zb = &mut sc.z2_bar[k * cn..(k + 1) * cn];
        let s1 = &tape.act2[(h2 + k) * n..(h2 + k + 1) * n];
        let s2 = &tape.act2[(2 * h2 + k) * n..(2 * h2 + k + 1) * n];
        let s3 = &tape.act2[(3 * h2 + k) * n..(3 * h2 + k + 1) * n];
        for i in 0..n {
            let mut sbar1 = 0.0;
            let mut sbar2 = 0.0;
            for a in 0..d {
                let ga = z2[(1 + a) * n + i];
                sbar1 += nb[(1 + a) * n + i] * ga;
                let mut zg = s1[i] * nb[(1 + a) * n + i];
                for bb in 0..d {
                    let gb = z2[(1 + bb) * n + i];
                    let h = (1 + d + a * d + bb) * n + i;
                    sbar1 += nb[h] * z2[h];
                    sbar2 += nb[h] * ga * gb;
                    zg += s2[i] * sc.hsym[(a * d + bb) * n + i] * gb;
                }
                zb[(1 + a) * n + i] = w * zg;
            }
            zb[i] = w * (nb[i] * s1[i] + sbar1 * s2[i] + sbar2 * s3[i]);
        }
        for h in 1 + d..c {
            for i in 0..n {
                zb[h * n + i] = w * s1[i] * nb[h * n + i];
            }
        }
    }

    // Second dense layer.
    {
        let gb2 = &mut grad[lay.b2()];
        for k in 0..h2 {
            let mut acc = 0.0;
            for &v in &sc.z2_bar[k * cn..k * cn + n] {
                acc += v;
            }
            gb2[k] += acc;
        }
    }
    gemm(
        h2,
        cn,
        h1,
        &sc.z2_bar,
        (cn, 1),
        &tape.a1,
        (1, cn),
        &mut grad[lay.w2()],
        true,
    );
    gemm(
        h1,
        h2,
        cn,
        net.w2,
        (1, h1),
        &sc.z2_bar,
        (cn, 1),
        &mut sc.a1_bar,
        false,
    );

    // First activation and dense layer; the pre-activation jet is
    // (W1 x + b1, W1 row, 0).
    let w1_start = lay.w1().start;
    let b1_start = lay.b1().start;
    for j in 0..h1 {
        let f1 = &tape.act1[(h1 + j) * n..(h1 + j + 1) * n];
        let f2 = &tape.act1[(2 * h1 + j) * n..(2 * h1 + j + 1) * n];
        let f3 = &tape.act1[(3 * h1 + j) * n..(3 * h1 + j + 1) * n];
        let row = &net.w1[j * d..(j + 1) * d];
        let ab = &sc.a1_bar[j * cn..(j + 1) * cn];
        let mut gw = [0.0f64; 8];
        let gw = &mut gw[..d.min(8)];
        let mut gw_big = if d > 8 { vec![0.0; d] } else { Vec::new() };
        let mut gb = 0.0;
        for i in 0..n {
            let mut gv = 0.0;
            let mut hv = 0.0;
            for a in 0..d {
                gv += ab[(1 + a) * n + i] * row[a];
                for bb in 0..d {
                    hv += ab[(1 + d + a * d + bb) * n + i] * row[a] * row[bb];
                }
            }
            let z_bar = ab[i] * f1[i] + gv * f2[i] + hv * f3[i];
            let x = &xs[i * d..(i + 1) * d];
            for a in 0..d {
                let mut g = ab[(1 + a) * n + i] * f1[i];
                for bb in 0..d {
                    let hab = ab[(1 + d + a * d + bb) * n + i];
                    let hba = ab[(1 + d + bb * d + a) * n + i];
                    g += f2[i] * (hab + hba) * row[bb];
                }
                let slot = if d > 8 { &mut gw_big[a] } else { &mut gw[a] };
                *slot += g + z_bar * x[a];
            }
            gb += z_bar;
        }
        for a in 0..d {
            grad[w1_start + j * d + a] += if d > 8 { gw_big[a] } else { gw[a] };
        }
        grad[b1_start + j] += gb;
    }
}

pub(crate) fn forward_single<A: Activation>(params: &MlpParams, x: &[f64]) -> Jet2 {
    assert_eq!(x.len(), params.input_dim(), "input dimension mismatch");
    let net = Net::new(params);
    let mut tape = Tape::new(net.lay, 1);
    forward_batch::<A>(&net, x, &mut tape);
    Jet2::from_flat(net.lay.d, &tape.net)
}

/// Trial-function jets `u = B·N` at every collocation point.
pub fn trial_jets(params: &MlpParams, colloc: &Collocation) -> JetBatch {
    trial_jets_with::<Tanh>(params, colloc)
}

fn chunks(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(CHUNK).map(move |s| (s, (s + CHUNK).min(n)))
}

pub(crate) fn trial_jets_with<A: Activation>(params: &MlpParams, colloc: &Collocation) -> JetBatch {
    let net = Net::new(params);
    let d = net.lay.d;
    let c = Jet2::components(d);
    let mut out = JetBatch::zeros(d, colloc.len());
    let mut tape = Tape::new(net.lay, CHUNK.min(colloc.len()));
    let mut nrow = vec![0.0; c];
    let xs_all = colloc.points.as_flat();
    for (s, e) in chunks(colloc.len()) {
        let n = e - s;
        tape.resize(net.lay, n);
        forward_batch::<A>(&net, &xs_all[s * d..e * d], &mut tape);
        for i in 0..n {
            for (cc, v) in nrow.iter_mut().enumerate() {
                *v = tape.net[cc * n + i];
            }
            product_jet(d, colloc.boundary.row(s + i), &nrow, out.row_mut(s + i));
        }
    }
    out
}

/// Loss value and its exact gradient with respect to the parameters.
///
/// `loss` receives the trial jets of every collocation point and returns the
/// scalar loss together with its adjoint: a batch of the same shape holding
/// `∂loss/∂(value, gradient, Hessian)` per point.
pub fn loss_gradient<F>(
    params: &MlpParams,
    colloc: &Collocation,
    loss: F,
) -> Result<(f64, ParamGradient)>
where
    F: FnOnce(&JetBatch) -> Result<(f64, JetBatch)>,
{
    loss_gradient_with::<Tanh, F>(params, colloc, loss)
}

pub(crate) fn loss_gradient_with<A: Activation, F>(
    params: &MlpParams,
    colloc: &Collocation,
    loss: F,
) -> Result<(f64, ParamGradient)>
where
    F: FnOnce(&JetBatch) -> Result<(f64, JetBatch)>,
{
    if colloc.is_empty() {
        return Err(Error::InvalidArgument("empty collocation batch".into()));
    }
    let jets = trial_jets_with::<A>(params, colloc);
    let (value, adjoint) = loss(&jets)?;
    if !value.is_finite() {
        let index = (0..jets.len())
            .find(|&i| jets.row(i).iter().any(|v| !v.is_finite()))
            .unwrap_or(0);
        return Err(Error::NonFinite {
            quantity: "loss",
            index,
        });
    }
    if adjoint.len() != jets.len() || adjoint.dim() != jets.dim() {
        return Err(Error::InvalidArgument(
            "loss adjoint must match the jet batch shape".into(),
        ));
    }

    let net = Net::new(params);
    let lay = net.lay;
    let d = lay.d;
    let c = Jet2::components(d);
    let mut total = ParamGradient::zeros_like(params);
    let first = CHUNK.min(colloc.len());
    let mut tape = Tape::new(lay, first);
    let mut scratch = AdjointScratch::new(lay, first);
    let xs_all = colloc.points.as_flat();
    for (s, e) in chunks(colloc.len()) {
        let n = e - s;
        if n != tape.n {
            tape.resize(lay, n);
            scratch = AdjointScratch::new(lay, n);
        }
        let xs = &xs_all[s * d..e * d];
        forward_batch::<A>(&net, xs, &mut tape);
        backward_batch::<A>(
            &net,
            xs,
            &colloc.boundary.raw()[s * c..e * c],
            &adjoint.raw()[s * c..e * c],
            &tape,
            &mut scratch,
            &mut total.data,
        );
    }
    Ok((value, total))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Identity activation, used to check the jet algebra on affine maps.
    pub struct Identity;

    impl Activation for Identity {
        fn eval(z: f64) -> [f64; 4] {
            [z, 1.0, 0.0, 0.0]
        }
    }
}
