//! Loss-curve sweeps over the eigenvalue parameter, minimum detection and
//! local refinement.

use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::netcalc::MlpParams;
use crate::residual::LossBreakdown;
use crate::train::{StopReason, TrainConfig, Trainer};

const INIT_STREAM: u64 = 0x6e65_7469_6e69_7403;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub e_lo: f64,
    pub e_hi: f64,
    pub grid_count: usize,
    /// Detection threshold ε on the curve value.
    pub threshold: f64,
    pub refine_depth: usize,
    pub refine_factor: usize,
    pub warm_start: bool,
    /// Candidates refined concurrently.
    pub workers: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            e_lo: 3.0,
            e_hi: 35.0,
            grid_count: 129,
            threshold: 0.5,
            refine_depth: 2,
            refine_factor: 4,
            warm_start: true,
            workers: 1,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.e_lo.is_finite() && self.e_hi.is_finite() && self.e_lo < self.e_hi) {
            return bad("e_lo must be < e_hi");
        }
        if self.grid_count < 2 {
            return bad("grid_count must be >= 2");
        }
        if !(self.threshold > 0.0) {
            return bad("threshold must be > 0");
        }
        if self.refine_factor < 2 {
            return bad("refine_factor must be >= 2");
        }
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        Ok(())
    }

    /// Spacing of the top-level grid.
    pub fn spacing(&self) -> f64 {
        (self.e_hi - self.e_lo) / (self.grid_count - 1) as f64
    }

    /// Grid spacing after a full refinement.
    pub fn final_resolution(&self) -> f64 {
        self.spacing() / (self.refine_factor as f64).powi(self.refine_depth as i32)
    }
}

/// `j` equally spaced values from `lo` to `hi` inclusive.
pub fn make_grid(lo: f64, hi: f64, j: usize) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "grid needs lo < hi, got [{lo}, {hi}]"
        )));
    }
    if j < 2 {
        return Err(Error::InvalidArgument(
            "grid needs at least 2 points".into(),
        ));
    }
    let h = (hi - lo) / (j - 1) as f64;
    Ok((0..j)
        .map(|i| if i == j - 1 { hi } else { lo + i as f64 * h })
        .collect())
}

/// One trained point of a loss curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveEntry {
    pub energy: f64,
    pub breakdown: LossBreakdown,
    pub validation: LossBreakdown,
    pub steps_run: usize,
    pub stop_reason: StopReason,
    pub params: MlpParams,
    /// Content identifier of `params`.
    pub params_ref: String,
}

impl CurveEntry {
    /// Curve value used for detection: diverged or non-finite entries count
    /// as `+∞`.
    pub fn value(&self) -> f64 {
        if self.stop_reason == StopReason::Diverged || !self.breakdown.total.is_finite() {
            f64::INFINITY
        } else {
            self.breakdown.total
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub entries: Vec<CurveEntry>,
}

impl LossCurve {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(CurveEntry::value).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenEstimate {
    pub e_hat: f64,
    pub loss_at_min: f64,
    /// Spacing of the finest grid that was accepted.
    pub grid_resolution: f64,
    pub refinement_level: usize,
    /// The refinement minimum sat on a bracket end even after widening.
    pub unbracketed: bool,
    /// Top-level grid value the refinement started from.
    pub candidate: f64,
    pub params: MlpParams,
    pub params_ref: String,
}

/// Interior local minima below `threshold`: `v[i] < v[i−1]`, `v[i] ≤ v[i+1]`
/// (so the leftmost point of a plateau wins) and `v[i] < threshold`.
pub fn detect_minima_in(values: &[f64], threshold: f64) -> Vec<usize> {
    if values.len() < 3 {
        return Vec::new();
    }
    (1..values.len() - 1)
        .filter(|&i| {
            values[i] < values[i - 1] && values[i] <= values[i + 1] && values[i] < threshold
        })
        .collect()
}

pub fn detect_minima(curve: &LossCurve, threshold: f64) -> Vec<usize> {
    detect_minima_in(&curve.values(), threshold)
}

/// Trains along a grid and refines detected minima.
#[derive(Clone, Debug)]
pub struct Scanner<'a> {
    pub trainer: &'a Trainer,
    pub widths: [usize; 4],
    pub seed: u64,
    pub train: TrainConfig,
    pub scan: ScanConfig,
}

/// Result of a full scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutcome {
    pub curve: LossCurve,
    pub candidates: Vec<usize>,
    pub estimates: Vec<EigenEstimate>,
}

impl<'a> Scanner<'a> {
    pub fn new(
        trainer: &'a Trainer,
        widths: &[usize],
        seed: u64,
        train: TrainConfig,
        scan: ScanConfig,
    ) -> Result<Self> {
        train.validate()?;
        scan.validate()?;
        let widths: [usize; 4] = widths.try_into().map_err(|_| {
            Error::InvalidArgument(format!("widths must have 4 entries, got {widths:?}"))
        })?;
        if widths[0] != trainer.domain().dim() {
            return Err(Error::InvalidArgument(format!(
                "network input width {} does not match domain dimension {}",
                widths[0],
                trainer.domain().dim()
            )));
        }
        Ok(Self {
            trainer,
            widths,
            seed,
            train,
            scan,
        })
    }

    /// Freshly initialised network; the same for every grid point.
    pub fn initial_params(&self) -> Result<MlpParams> {
        MlpParams::init(&self.widths, derive_seed(self.seed, INIT_STREAM))
    }

    fn train_entry(
        &self,
        init: &MlpParams,
        energy: f64,
        batch_energy: f64,
        cfg: &TrainConfig,
    ) -> Result<CurveEntry> {
        match self.trainer.train_on(init, energy, batch_energy, cfg) {
            Ok((params, report)) => Ok(CurveEntry {
                energy,
                breakdown: report.final_loss,
                validation: report.validation_loss,
                steps_run: report.steps_run,
                stop_reason: report.stop_reason,
                params_ref: params.content_id(),
                params,
            }),
            Err(Error::NonFinite { .. }) => {
                let nan = LossBreakdown {
                    total: f64::INFINITY,
                    residual_term: f64::NAN,
                    penalty_term: f64::NAN,
                    norm_estimate: f64::NAN,
                    mu_used: crate::residual::mu_schedule(self.trainer.loss_config().mu0, energy),
                };
                Ok(CurveEntry {
                    energy,
                    breakdown: nan,
                    validation: nan,
                    steps_run: 0,
                    stop_reason: StopReason::Diverged,
                    params_ref: init.content_id(),
                    params: init.clone(),
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Sequential left-to-right sweep. With warm starts each entry begins
    /// from its left neighbour's parameters (warm budget); the first entry,
    /// every entry after a diverged one, and every entry when warm starts
    /// are off begin from the initial network (cold budget).
    pub fn run_scan(
        &self,
        grid: &[f64],
        mut progress: impl FnMut(&CurveEntry),
    ) -> Result<LossCurve> {
        if grid.is_empty() {
            return Err(Error::InvalidArgument("empty grid".into()));
        }
        let fresh = self.initial_params()?;
        let warm_cfg = self.train.warm();
        let mut entries: Vec<CurveEntry> = Vec::with_capacity(grid.len());
        for &energy in grid {
            let prev = entries
                .last()
                .filter(|e| self.scan.warm_start && e.stop_reason != StopReason::Diverged);
            let entry = match prev {
                Some(p) => self.train_entry(&p.params, energy, energy, &warm_cfg)?,
                None => self.train_entry(&fresh, energy, energy, &self.train)?,
            };
            progress(&entry);
            entries.push(entry);
        }
        Ok(LossCurve { entries })
    }

    /// Trains `center ± k·step`, `k = 0..=factor`, each from `init` on the
    /// batches of `batch_energy`, and returns the entries in ascending `E`.
    fn bracket(
        &self,
        init: &MlpParams,
        center: f64,
        step: f64,
        batch_energy: f64,
    ) -> Result<Vec<CurveEntry>> {
        let f = self.scan.refine_factor as i64;
        let cfg = self.train.warm();
        (-f..=f)
            .map(|k| self.train_entry(init, center + k as f64 * step, batch_energy, &cfg))
            .collect()
    }

    /// Local refinement around the interior candidate `i0` of `curve`.
    ///
    /// Each level first retrains the current best snapshot at its own energy
    /// with the cold budget, then trains a grid `refine_factor` times finer
    /// across the bracket `[E_c − h, E_c + h]`, every point warm-started from
    /// that snapshot, and moves to its minimiser. A minimiser on
    /// the bracket end recentres the bracket once; if it lands on the end
    /// again the estimate is flagged unbracketed and refinement stops. A
    /// level whose minimum is not below the threshold is discarded. All
    /// levels train on the candidate's batches.
    pub fn refine(&self, curve: &LossCurve, i0: usize) -> Result<EigenEstimate> {
        let n = curve.len();
        if i0 == 0 || i0 + 1 >= n {
            return Err(Error::InvalidArgument(format!(
                "candidate {i0} is not interior"
            )));
        }
        let top = &curve.entries[i0];
        let mut best = top.clone();
        let mut h = 0.5 * (curve.entries[i0 + 1].energy - curve.entries[i0 - 1].energy);
        let mut level = 0;
        let mut unbracketed = false;
        let factor = self.scan.refine_factor;

        for depth in 1..=self.scan.refine_depth {
            let step = h / factor as f64;
            let mut center =
                self.train_entry(&best.params, best.energy, top.energy, &self.train)?;
            let mut widened = false;
            let (entries, at) = loop {
                let entries = self.bracket(&center.params, center.energy, step, top.energy)?;
                let at = argmin(&entries);
                let on_end = at == 0 || at == entries.len() - 1;
                if on_end && !widened {
                    widened = true;
                    center = entries[at].clone();
                    continue;
                }
                unbracketed = on_end;
                break (entries, at);
            };
            let cand = &entries[at];
            if !(cand.value() < self.scan.threshold) {
                break;
            }
            best = cand.clone();
            h = step;
            level = depth;
            if unbracketed {
                break;
            }
        }

        Ok(EigenEstimate {
            e_hat: best.energy,
            loss_at_min: best.value(),
            grid_resolution: h,
            refinement_level: level,
            unbracketed,
            candidate: top.energy,
            params_ref: best.params_ref.clone(),
            params: best.params,
        })
    }

    /// Refines every candidate, `workers` at a time; the output order
    /// follows the candidates.
    pub fn refine_all(
        &self,
        curve: &LossCurve,
        candidates: &[usize],
    ) -> Result<Vec<EigenEstimate>> {
        let workers = self.scan.workers.min(candidates.len()).max(1);
        if workers == 1 {
            return candidates.iter().map(|&i| self.refine(curve, i)).collect();
        }
        let mut results: Vec<Option<Result<EigenEstimate>>> =
            (0..candidates.len()).map(|_| None).collect();
        for (chunk_idx, chunk) in candidates.chunks(workers).enumerate() {
            let done: Vec<Result<EigenEstimate>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&i| s.spawn(move || self.refine(curve, i)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("refinement worker panicked"))
                    .collect()
            });
            for (k, r) in done.into_iter().enumerate() {
                results[chunk_idx * workers + k] = Some(r);
            }
        }
        results
            .into_iter()
            .map(|r| r.expect("every candidate refined"))
            .collect()
    }

    /// Sweep, detection and refinement.
    pub fn scan_and_refine(&self, progress: impl FnMut(&CurveEntry)) -> Result<ScanOutcome> {
        let grid = make_grid(self.scan.e_lo, self.scan.e_hi, self.scan.grid_count)?;
        let curve = self.run_scan(&grid, progress)?;
        let candidates = detect_minima(&curve, self.scan.threshold);
        let estimates = self.refine_all(&curve, &candidates)?;
        Ok(ScanOutcome {
            curve,
            candidates,
            estimates,
        })
    }
}

/// Index of the smallest curve value, leftmost on ties.
fn argmin(entries: &[CurveEntry]) -> usize {
    let mut best = 0;
    for (i, e) in entries.iter().enumerate() {
        if e.value() < entries[best].value() {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        assert_eq!(make_grid(0.0, 1.0, 2).unwrap(), vec![0.0, 1.0]);
        let g = make_grid(44.0, 55.0, 12).unwrap();
        assert!(g.windows(2).all(|w| (w[1] - w[0] - 1.0).abs() < 1e-12));
        let g = make_grid(3.0, 35.0, 129).unwrap();
        assert_eq!(g.len(), 129);
        assert_eq!(*g.last().unwrap(), 35.0);
        assert!(g.windows(2).all(|w| (w[1] - w[0] - 0.25).abs() < 1e-12));
        assert!(make_grid(35.0, 3.0, 5).is_err());
        assert!(make_grid(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn minima_examples() {
        assert_eq!(detect_minima_in(&[5.0, 1.0, 4.0], 2.0), vec![1]);
        assert!(detect_minima_in(&[5.0, 1.0, 4.0], 0.5).is_empty());
        assert_eq!(detect_minima_in(&[5.0, 1.0, 1.0, 4.0], 2.0), vec![1]);
        assert!(detect_minima_in(&[0.1, 1.0], 2.0).is_empty());
        // Endpoints are never minima.
        assert!(detect_minima_in(&[0.1, 1.0, 2.0, 0.1], 5.0).is_empty());
        // Diverged points act as +∞.
        assert_eq!(
            detect_minima_in(&[f64::INFINITY, 0.2, f64::INFINITY], 1.0),
            vec![1]
        );
    }

    #[test]
    fn config_validation() {
        assert!(ScanConfig::default().validate().is_ok());
        let c = ScanConfig::default();
        assert!((c.spacing() - 0.25).abs() < 1e-15);
        assert!((c.final_resolution() - 0.015625).abs() < 1e-15);
        for bad in [
            ScanConfig {
                e_lo: 35.0,
                e_hi: 3.0,
                ..c
            },
            ScanConfig { grid_count: 1, ..c },
            ScanConfig {
                threshold: 0.0,
                ..c
            },
            ScanConfig {
                refine_factor: 1,
                ..c
            },
            ScanConfig { workers: 0, ..c },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
