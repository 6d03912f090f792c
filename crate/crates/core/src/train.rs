//! Minimisation of the penalised loss at a fixed eigenvalue parameter.
//!
//! Two optimisers are available: L-BFGS with a strong-Wolfe line search
//! (the default) and Adam. Both are deterministic.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::netcalc::{Collocation, MlpParams, ParamGradient};
use crate::residual::{self, LossBreakdown, LossConfig, OperatorSpec};

const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0001;
const VALIDATION_STREAM: u64 = 0x7661_6c69_6400_0002;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Lbfgs,
    Adam,
}

impl Optimizer {
    pub fn as_str(&self) -> &'static str {
        match self {
            Optimizer::Lbfgs => "lbfgs",
            Optimizer::Adam => "adam",
        }
    }
}

/// Optimiser settings. For L-BFGS a "step" is one loss-and-gradient
/// evaluation; for Adam it is one update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    /// Adam step size; for L-BFGS the length of the first steepest-descent
    /// step.
    pub learning_rate: f64,
    /// Step budget for a cold (freshly initialised) start.
    pub max_steps: usize,
    /// Step budget when starting from a neighbour's parameters.
    pub max_steps_warm: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub rel_improve_tol: f64,
    pub patience: usize,
    pub check_every: usize,
    /// Multiplicative learning-rate decay per step; 1 disables it.
    pub lr_decay: f64,
    /// Number of correction pairs kept by L-BFGS.
    pub lbfgs_memory: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Lbfgs,
            learning_rate: 1e-3,
            max_steps: 2000,
            max_steps_warm: 800,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            rel_improve_tol: 1e-4,
            patience: 5,
            check_every: 50,
            lr_decay: 1.0,
            lbfgs_memory: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.max_steps == 0 || self.max_steps_warm == 0 {
            return bad("max_steps and max_steps_warm must be >= 1");
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if !(self.rel_improve_tol >= 0.0) {
            return bad("rel_improve_tol must be >= 0");
        }
        if self.patience == 0 || self.check_every == 0 {
            return bad("patience and check_every must be >= 1");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.lbfgs_memory == 0 {
            return bad("lbfgs_memory must be >= 1");
        }
        Ok(())
    }

    /// The same settings with `max_steps` replaced by the warm-start budget.
    pub fn warm(&self) -> Self {
        Self {
            max_steps: self.max_steps_warm,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxSteps,
    Diverged,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::MaxSteps => "max_steps",
            StopReason::Diverged => "diverged",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Breakdown of the minimised objective (training batch) at the
    /// returned parameters.
    pub final_loss: LossBreakdown,
    /// Same quantities on the held-out validation batch.
    pub validation_loss: LossBreakdown,
    pub steps_run: usize,
    pub stop_reason: StopReason,
    /// `(step, training total)` every `check_every` steps.
    pub loss_history: Vec<(usize, f64)>,
}

/// A differentiable scalar function of the network parameters.
pub trait Objective {
    fn evaluate(&mut self, params: &MlpParams, step: usize) -> Result<(f64, ParamGradient)>;
}

impl<F> Objective for F
where
    F: FnMut(&MlpParams, usize) -> Result<(f64, ParamGradient)>,
{
    fn evaluate(&mut self, params: &MlpParams, step: usize) -> Result<(f64, ParamGradient)> {
        self(params, step)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimOutcome {
    pub params: MlpParams,
    pub steps_run: usize,
    pub stop_reason: StopReason,
    pub loss_history: Vec<(usize, f64)>,
}

/// Run the optimiser selected by `cfg`.
pub fn minimize<O: Objective>(
    init: &MlpParams,
    objective: &mut O,
    cfg: &TrainConfig,
) -> OptimOutcome {
    match cfg.optimizer {
        Optimizer::Lbfgs => lbfgs_minimize(init, objective, cfg),
        Optimizer::Adam => adam_minimize(init, objective, cfg),
    }
}

/// Plateau detector shared by both optimisers: a check is stale when the
/// best loss seen so far has not improved on the best at the previous check
/// by `rel_improve_tol` (relative).
struct Plateau {
    best_at_check: f64,
    stale: usize,
}

impl Plateau {
    fn new() -> Self {
        Self {
            best_at_check: f64::INFINITY,
            stale: 0,
        }
    }

    /// Returns true when `patience` consecutive checks were stale.
    fn check(&mut self, running_best: f64, first: bool, cfg: &TrainConfig) -> bool {
        if !first {
            if running_best < self.best_at_check - cfg.rel_improve_tol * self.best_at_check.abs() {
                self.stale = 0;
            } else {
                self.stale += 1;
            }
        }
        self.best_at_check = self.best_at_check.min(running_best);
        self.stale >= cfg.patience
    }
}

/// Adam with plateau-based early stopping.
///
/// Each step evaluates the objective at the current parameters and then
/// applies one update. A non-finite loss or gradient restores the last
/// parameters whose loss was finite and stops with [`StopReason::Diverged`].
pub fn adam_minimize<O: Objective>(
    init: &MlpParams,
    objective: &mut O,
    cfg: &TrainConfig,
) -> OptimOutcome {
    let n = init.len();
    let mut params = init.clone();
    let mut last_good = init.clone();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut history = Vec::new();
    let mut plateau = Plateau::new();
    let mut running_best = f64::INFINITY;
    let mut stop_reason = StopReason::MaxSteps;
    let mut steps_run = 0;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let mut b1t = 1.0;
    let mut b2t = 1.0;
    let mut lr = cfg.learning_rate;

    for step in 0..cfg.max_steps {
        let (loss, grad) = match objective.evaluate(&params, step) {
            Ok((loss, grad))
                if loss.is_finite() && grad.as_slice().iter().all(|g| g.is_finite()) =>
            {
                (loss, grad)
            }
            _ => {
                params = last_good;
                stop_reason = StopReason::Diverged;
                return OptimOutcome {
                    params,
                    steps_run,
                    stop_reason,
                    loss_history: history,
                };
            }
        };
        last_good.as_mut_slice().copy_from_slice(params.as_slice());
        running_best = running_best.min(loss);

        if step % cfg.check_every == 0 {
            history.push((step, loss));
            if plateau.check(running_best, step == 0, cfg) {
                stop_reason = StopReason::Converged;
                break;
            }
        }

        b1t *= b1;
        b2t *= b2;
        let step_size = lr / (1.0 - b1t);
        let bias2 = 1.0 / (1.0 - b2t);
        for (((p, g), mi), vi) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            *p -= step_size * *mi / ((*vi * bias2).sqrt() + cfg.adam_eps);
        }
        lr *= cfg.lr_decay;
        steps_run += 1;
    }

    if !params.is_finite() {
        params = last_good;
        stop_reason = StopReason::Diverged;
    }
    OptimOutcome {
        params,
        steps_run,
        stop_reason,
        loss_history: history,
    }
}

/// Collocation batches and settings for training at many energies.
///
/// With `batch_per_energy` each energy gets its own fixed training and
/// validation batch, seeded by the energy's bit pattern; otherwise every
/// energy of a scan sees the same points.
#[derive(Clone, Debug)]
pub struct Trainer {
    domain: Domain,
    op: OperatorSpec,
    loss_cfg: LossConfig,
    seed: u64,
    train: Collocation,
    validation: Collocation,
}

impl Trainer {
    pub fn new(
        domain: &Domain,
        op: &OperatorSpec,
        loss_cfg: &LossConfig,
        seed: u64,
    ) -> Result<Self> {
        domain.validate()?;
        op.validate()?;
        loss_cfg.validate()?;
        let train = Collocation::new(
            domain,
            domain.sample_interior(loss_cfg.n_train, derive_seed(seed, TRAIN_STREAM))?,
        )?;
        let validation = Collocation::new(
            domain,
            domain.sample_interior(loss_cfg.n_val, derive_seed(seed, VALIDATION_STREAM))?,
        )?;
        Ok(Self {
            domain: domain.clone(),
            op: *op,
            loss_cfg: *loss_cfg,
            seed,
            train,
            validation,
        })
    }

    fn batch<'a>(
        &'a self,
        shared: &'a Collocation,
        n: usize,
        stream: u64,
        energy: f64,
    ) -> Result<Cow<'a, Collocation>> {
        if !self.loss_cfg.batch_per_energy {
            return Ok(Cow::Borrowed(shared));
        }
        let seed = derive_seed(derive_seed(self.seed, stream), energy.to_bits());
        Ok(Cow::Owned(Collocation::new(
            &self.domain,
            self.domain.sample_interior(n, seed)?,
        )?))
    }

    /// Training batch used at `energy`.
    pub fn training_batch(&self, energy: f64) -> Result<Cow<'_, Collocation>> {
        self.batch(&self.train, self.loss_cfg.n_train, TRAIN_STREAM, energy)
    }

    /// Validation batch used at `energy`.
    pub fn validation_batch(&self, energy: f64) -> Result<Cow<'_, Collocation>> {
        self.batch(
            &self.validation,
            self.loss_cfg.n_val,
            VALIDATION_STREAM,
            energy,
        )
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn operator(&self) -> &OperatorSpec {
        &self.op
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss_cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Validation-batch loss of `params` at `energy`.
    pub fn validation_loss(&self, params: &MlpParams, energy: f64) -> Result<LossBreakdown> {
        residual::assemble_loss(
            params,
            &*self.validation_batch(energy)?,
            &self.op,
            energy,
            self.loss_cfg.mu0,
            &self.domain,
        )
    }

    pub fn train(
        &self,
        init: &MlpParams,
        energy: f64,
        cfg: &TrainConfig,
    ) -> Result<(MlpParams, TrainReport)> {
        self.train_on(init, energy, energy, cfg)
    }

    /// Like [`Trainer::train`], but with the batches that belong to
    /// `batch_energy`, so that several nearby energies can share one pair
    /// of batches.
    pub fn train_on(
        &self,
        init: &MlpParams,
        energy: f64,
        batch_energy: f64,
        cfg: &TrainConfig,
    ) -> Result<(MlpParams, TrainReport)> {
        cfg.validate()?;
        if !init.is_finite() {
            return Err(Error::InvalidArgument(
                "initial parameters must be finite".into(),
            ));
        }
        if init.input_dim() != self.domain.dim() {
            return Err(Error::InvalidArgument(format!(
                "network input dimension {} does not match domain dimension {}",
                init.input_dim(),
                self.domain.dim()
            )));
        }
        let train = self.training_batch(batch_energy)?;
        let mu = residual::mu_schedule(self.loss_cfg.mu0, energy);
        let volume = self.domain.volume();
        let mut objective = |p: &MlpParams, step: usize| -> Result<(f64, ParamGradient)> {
            if self.loss_cfg.resample_each_step && step > 0 {
                let pts = self.domain.sample_interior(
                    self.loss_cfg.n_train,
                    derive_seed(
                        derive_seed(derive_seed(self.seed, TRAIN_STREAM), batch_energy.to_bits()),
                        step as u64,
                    ),
                )?;
                let batch = Collocation::new(&self.domain, pts)?;
                residual::loss_and_gradient(p, &batch, &self.op, energy, mu, volume)
                    .map(|(bd, g)| (bd.total, g))
            } else {
                residual::loss_and_gradient(p, &train, &self.op, energy, mu, volume)
                    .map(|(bd, g)| (bd.total, g))
            }
        };
        let outcome = minimize(init, &mut objective, cfg);
        let final_loss = residual::assemble_loss(
            &outcome.params,
            &train,
            &self.op,
            energy,
            self.loss_cfg.mu0,
            &self.domain,
        )?;
        let validation_loss = residual::assemble_loss(
            &outcome.params,
            &*self.validation_batch(batch_energy)?,
            &self.op,
            energy,
            self.loss_cfg.mu0,
            &self.domain,
        )?;
        Ok((
            outcome.params,
            TrainReport {
                final_loss,
                validation_loss,
                steps_run: outcome.steps_run,
                stop_reason: outcome.stop_reason,
                loss_history: outcome.loss_history,
            },
        ))
    }
}

/// Train at a single energy from `init`; batches are derived from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn train_at_energy(
    init: &MlpParams,
    energy: f64,
    op: &OperatorSpec,
    domain: &Domain,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(MlpParams, TrainReport)> {
    Trainer::new(domain, op, loss_cfg, seed)?.train(init, energy, train_cfg)
}

/// L-BFGS with a strong-Wolfe line search and plateau-based early stopping.
///
/// Every objective evaluation counts against the step budget. If the budget
/// runs out inside a line search, the lowest trial point is still taken when
/// it lowers the loss. A non-finite loss at a trial point is treated as `+∞`
/// and shrinks the step, so the returned parameters are always finite.
pub fn lbfgs_minimize<O: Objective>(
    init: &MlpParams,
    objective: &mut O,
    cfg: &TrainConfig,
) -> OptimOutcome {
    let mut ev = Evaluator {
        objective,
        evals: 0,
        budget: cfg.max_steps,
    };
    let mut params = init.clone();
    let mut history = Vec::new();
    let (mut f, mut g) = match ev.eval(&params) {
        Some((f, g)) if f.is_finite() => (f, g),
        _ => {
            return OptimOutcome {
                params,
                steps_run: ev.evals,
                stop_reason: StopReason::Diverged,
                loss_history: history,
            }
        }
    };
    history.push((0, f));
    let mut memory = Memory::new(cfg.lbfgs_memory);
    let mut plateau = Plateau::new();
    plateau.check(f, true, cfg);
    let mut next_check = cfg.check_every;
    let mut stop_reason = StopReason::MaxSteps;

    while ev.evals < ev.budget {
        let mut dir = memory.direction(&g, cfg.learning_rate);
        let mut dg = dot(&dir, &g);
        if !(dg < 0.0) {
            memory.clear();
            dir = memory.direction(&g, cfg.learning_rate);
            dg = dot(&dir, &g);
            if !(dg < 0.0) {
                stop_reason = StopReason::Converged;
                break;
            }
        }
        let mut search = LineSearch {
            x0: &params,
            dir: &dir,
            f0: f,
            dg0: dg,
            trial: params.clone(),
            best: None,
        };
        match search.run(&mut ev) {
            Some(sample) => {
                let s: Vec<f64> = dir.iter().map(|d| sample.step * d).collect();
                for (p, si) in params.as_mut_slice().iter_mut().zip(&s) {
                    *p += si;
                }
                let y: Vec<f64> = sample.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
                memory.push(s, y);
                f = sample.loss;
                g = sample.grad;
            }
            None if memory.is_empty() => {
                if ev.evals < ev.budget {
                    stop_reason = StopReason::Converged;
                }
                break;
            }
            None => memory.clear(),
        }

        if ev.evals >= next_check {
            while next_check <= ev.evals {
                next_check += cfg.check_every;
            }
            history.push((ev.evals, f));
            if plateau.check(f, false, cfg) {
                stop_reason = StopReason::Converged;
                break;
            }
        }
    }
    OptimOutcome {
        params,
        steps_run: ev.evals,
        stop_reason,
        loss_history: history,
    }
}

struct Evaluator<'a, O> {
    objective: &'a mut O,
    evals: usize,
    budget: usize,
}

impl<O: Objective> Evaluator<'_, O> {
    /// `None` once the budget is spent; a non-finite loss or gradient is
    /// reported as an infinite loss.
    fn eval(&mut self, p: &MlpParams) -> Option<(f64, Vec<f64>)> {
        if self.evals >= self.budget {
            return None;
        }
        let r = self.objective.evaluate(p, self.evals);
        self.evals += 1;
        Some(match r {
            Ok((l, g)) if l.is_finite() && g.as_slice().iter().all(|v| v.is_finite()) => {
                (l, g.as_slice().to_vec())
            }
            _ => (f64::INFINITY, Vec::new()),
        })
    }
}

/// Correction pairs `(s, y)` with `ρ = 1 / sᵀy`.
struct Memory {
    cap: usize,
    pairs: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl Memory {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            pairs: std::collections::VecDeque::with_capacity(cap),
        }
    }

    fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn clear(&mut self) {
        self.pairs.clear();
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if !(sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt()) {
            return;
        }
        if self.pairs.len() == self.cap {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion. Without curvature pairs this is a steepest-descent
    /// step of length `first_step`.
    fn direction(&self, g: &[f64], first_step: f64) -> Vec<f64> {
        let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
        let Some((s_last, y_last, _)) = self.pairs.back() else {
            let scale = first_step / dot(g, g).sqrt().max(f64::MIN_POSITIVE);
            q.iter_mut().for_each(|v| *v *= scale);
            return q;
        };
        let mut alpha = vec![0.0; self.pairs.len()];
        for (i, (s, y, rho)) in self.pairs.iter().enumerate().rev() {
            alpha[i] = rho * dot(s, &q);
            axpy(-alpha[i], y, &mut q);
        }
        let gamma = dot(s_last, y_last) / dot(y_last, y_last);
        q.iter_mut().for_each(|v| *v *= gamma);
        for (i, (s, y, rho)) in self.pairs.iter().enumerate() {
            let beta = rho * dot(y, &q);
            axpy(alpha[i] - beta, s, &mut q);
        }
        q
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Clone)]
struct Sample {
    step: f64,
    loss: f64,
    slope: f64,
    grad: Vec<f64>,
}

struct LineSearch<'a> {
    x0: &'a MlpParams,
    dir: &'a [f64],
    f0: f64,
    dg0: f64,
    trial: MlpParams,
    /// Lowest trial point below `f0`.
    best: Option<Sample>,
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_ZOOM: usize = 20;

impl LineSearch<'_> {
    fn sample<O: Objective>(&mut self, ev: &mut Evaluator<O>, step: f64) -> Option<Sample> {
        for ((t, x), d) in self
            .trial
            .as_mut_slice()
            .iter_mut()
            .zip(self.x0.as_slice())
            .zip(self.dir)
        {
            *t = x + step * d;
        }
        let (loss, grad) = ev.eval(&self.trial)?;
        let slope = if loss.is_finite() {
            dot(&grad, self.dir)
        } else {
            f64::NAN
        };
        let s = Sample {
            step,
            loss,
            slope,
            grad,
        };
        if loss < self.f0 && self.best.as_ref().is_none_or(|b| loss < b.loss) {
            self.best = Some(s.clone());
        }
        Some(s)
    }

    fn armijo(&self, s: &Sample) -> bool {
        s.loss <= self.f0 + WOLFE_C1 * s.step * self.dg0
    }

    fn curvature(&self, s: &Sample) -> bool {
        s.slope.abs() <= -WOLFE_C2 * self.dg0
    }

    /// Bracketing phase; returns a step satisfying the strong Wolfe
    /// conditions, or the best decrease found before the budget ran out.
    fn run<O: Objective>(&mut self, ev: &mut Evaluator<O>) -> Option<Sample> {
        let mut prev = Sample {
            step: 0.0,
            loss: self.f0,
            slope: self.dg0,
            grad: Vec::new(),
        };
        let mut step = 1.0;
        let mut first = true;
        loop {
            let Some(s) = self.sample(ev, step) else {
                return self.best.take();
            };
            if !self.armijo(&s) || (!first && s.loss >= prev.loss) {
                return self.zoom(ev, prev, s);
            }
            if self.curvature(&s) {
                return Some(s);
            }
            if s.slope >= 0.0 {
                return self.zoom(ev, s, prev);
            }
            step *= 2.0;
            prev = s;
            first = false;
        }
    }

    fn zoom<O: Objective>(
        &mut self,
        ev: &mut Evaluator<O>,
        mut lo: Sample,
        mut hi: Sample,
    ) -> Option<Sample> {
        for _ in 0..MAX_ZOOM {
            let step = cubic_min(&lo, &hi);
            if (hi.step - lo.step).abs() <= 1e-12 * lo.step.abs().max(hi.step.abs()) {
                break;
            }
            let Some(s) = self.sample(ev, step) else {
                break;
            };
            if !self.armijo(&s) || s.loss >= lo.loss {
                hi = s;
            } else {
                if self.curvature(&s) {
                    return Some(s);
                }
                if s.slope * (hi.step - lo.step) >= 0.0 {
                    hi = lo;
                }
                lo = s;
            }
        }
        self.best.take()
    }
}

/// Minimiser of the cubic through two samples, kept away from the ends of
/// the interval; falls back to bisection.
fn cubic_min(a: &Sample, b: &Sample) -> f64 {
    let (lo, hi) = if a.step < b.step {
        (a.step, b.step)
    } else {
        (b.step, a.step)
    };
    let mid = 0.5 * (lo + hi);
    if !(a.loss.is_finite() && b.loss.is_finite() && a.slope.is_finite() && b.slope.is_finite()) {
        return mid;
    }
    let d1 = a.slope + b.slope - 3.0 * (a.loss - b.loss) / (a.step - b.step);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b.step - a.step).signum() * disc.sqrt();
    let t = b.step - (b.step - a.step) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t >= lo + margin && t <= hi - margin {
        t
    } else {
        mid
    }
}
