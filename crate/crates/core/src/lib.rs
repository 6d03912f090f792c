//! Eigenvalues of elliptic operators from neural-network loss curves.
//!
//! For each value `E` of a uniform grid a small tanh network is trained to
//! minimise the squared residual of `−Δu + Vu = Eu` (or its p-Laplacian
//! analogue) under a soft normalisation constraint. The trained loss, seen
//! as a function of `E`, dips towards zero at eigenvalues; deep local minima
//! of this curve are reported and locally refined.
//!
//! Random streams use ChaCha8 (`rand_chacha`) seeded from explicit 64-bit
//! seeds; independent streams are derived with SplitMix64 so that every
//! batch is reproducible across platforms.

pub mod error;
pub mod geometry;
pub mod jet;
pub mod netcalc;
pub mod oracle;
pub mod residual;
pub mod scan;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Domain, PointBatch};
pub use jet::{Jet2, JetBatch};
pub use netcalc::{Collocation, MlpParams, ParamGradient};
pub use residual::{LossBreakdown, LossConfig, OperatorSpec, Potential};
pub use scan::{CurveEntry, EigenEstimate, LossCurve, ScanConfig, ScanOutcome, Scanner};
pub use train::{Optimizer, StopReason, TrainConfig, TrainReport, Trainer};

/// Derive an independent seed for stream `stream` of a base seed (SplitMix64
/// finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
