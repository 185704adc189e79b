//! Generic trust-region iteration.
//!
//! The same step is used for the standalone TR optimizer, the global pass of
//! APTS and the local subdomain solves.

use crate::linalg::norm_inf;
use crate::lsr1::Lsr1Memory;
use crate::trsubproblem::{solve_first_order, solve_obs, SolutionKind};
use crate::Error;

/// Something with a loss and a gradient.
pub trait Objective {
    fn dim(&self) -> usize;
    fn loss(&self, x: &[f64]) -> Result<f64, Error>;
    fn loss_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), Error>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelOrder {
    /// Linear model; the step is the ∞-normalized negative gradient.
    #[default]
    First,
    /// Quadratic model with an LSR1 Hessian, solved by OBS.
    Second,
}

impl ModelOrder {
    pub fn from_int(order: u32) -> Option<Self> {
        match order {
            1 => Some(Self::First),
            2 => Some(Self::Second),
            _ => None,
        }
    }

    pub fn as_int(self) -> u32 {
        match self {
            Self::First => 1,
            Self::Second => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrConfig {
    pub delta_init: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub order: ModelOrder,
    pub history: usize,
}

impl Default for TrConfig {
    fn default() -> Self {
        Self {
            delta_init: 1e-2,
            delta_min: 1e-4,
            delta_max: 1e-1,
            eta1: 0.25,
            eta2: 0.75,
            alpha: 0.5,
            beta: 2.0,
            order: ModelOrder::First,
            history: 5,
        }
    }
}

impl TrConfig {
    pub fn with_order(mut self, order: ModelOrder) -> Self {
        self.order = order;
        self
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("trust region: {msg}")));
        if !(0.0 < self.eta1 && self.eta1 < self.eta2 && self.eta2 < 1.0) {
            return bad("need 0 < eta1 < eta2 < 1");
        }
        if !(0.0 < self.alpha && self.alpha < 1.0 && 1.0 < self.beta) {
            return bad("need 0 < alpha < 1 < beta");
        }
        if !(self.delta_min >= 0.0
            && self.delta_min <= self.delta_init
            && self.delta_init <= self.delta_max
            && self.delta_init > 0.0
            && self.delta_max.is_finite())
        {
            return bad("need 0 <= delta_min <= delta_init <= delta_max, delta_init > 0");
        }
        if self.order == ModelOrder::Second && self.history == 0 {
            return bad("second-order model needs history >= 1");
        }
        Ok(())
    }
}

/// Actual over predicted reduction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rho {
    Value(f64),
    /// Predicted reduction too small to divide by; treated as a failure.
    Degenerate,
}

impl Rho {
    pub fn value(self) -> Option<f64> {
        match self {
            Rho::Value(v) => Some(v),
            Rho::Degenerate => None,
        }
    }
}

pub fn rho(actual: f64, predicted: f64) -> Rho {
    if predicted > 1e-14 * (1.0 + actual.abs()) {
        Rho::Value(actual / predicted)
    } else {
        Rho::Degenerate
    }
}

/// Radius policy: grow on ρ ≥ η₂, keep on η₁ ≤ ρ < η₂, shrink and reject
/// below η₁. Returns the new radius and whether the step is accepted.
pub fn update_radius(delta: f64, ratio: Rho, config: &TrConfig) -> (f64, bool) {
    match ratio.value() {
        Some(r) if r >= config.eta2 => ((config.beta * delta).min(config.delta_max), true),
        Some(r) if r >= config.eta1 => (delta.clamp(config.delta_min, config.delta_max), true),
        _ => ((config.alpha * delta).max(config.delta_min), false),
    }
}

#[derive(Debug, Clone)]
pub struct TrState {
    pub delta: f64,
    pub memory: Option<Lsr1Memory>,
    pub iteration: usize,
}

impl TrState {
    pub fn new(config: &TrConfig) -> Result<Self, Error> {
        let memory = match config.order {
            ModelOrder::First => None,
            ModelOrder::Second => Some(Lsr1Memory::new(config.history)?),
        };
        Ok(Self {
            delta: config.delta_init,
            memory,
            iteration: 0,
        })
    }
}

/// Loss and gradient at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl Evaluation {
    pub fn at<O: Objective + ?Sized>(objective: &O, x: &[f64]) -> Result<Self, Error> {
        let (loss, grad) = objective.loss_and_grad(x)?;
        Ok(Self { loss, grad })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrStepRecord {
    pub iteration: usize,
    /// Loss at the iterate after the step (unchanged on rejection).
    pub loss: f64,
    pub rho: Option<f64>,
    /// Radius after the update.
    pub delta: f64,
    pub accepted: bool,
    pub converged: bool,
    /// ‖s‖_∞ of the candidate.
    pub step_norm: f64,
    pub predicted: f64,
    pub actual: f64,
}

/// One accept-or-reject trust-region iteration.
///
/// `current` must hold the loss and gradient at `params`; both are advanced
/// when the candidate is accepted.
pub fn tr_step<O: Objective + ?Sized>(
    objective: &O,
    params: &mut Vec<f64>,
    current: &mut Evaluation,
    state: &mut TrState,
    config: &TrConfig,
) -> Result<TrStepRecord, Error> {
    let iteration = state.iteration;
    state.iteration += 1;
    let converged_record = |loss, delta| TrStepRecord {
        iteration,
        loss,
        rho: None,
        delta,
        accepted: false,
        converged: true,
        step_norm: 0.0,
        predicted: 0.0,
        actual: 0.0,
    };
    if norm_inf(&current.grad) == 0.0 {
        return Ok(converged_record(current.loss, state.delta));
    }

    let solution = match (&state.memory, config.order) {
        (Some(mem), ModelOrder::Second) => solve_obs(mem, &current.grad, state.delta)?,
        _ => solve_first_order(&current.grad, state.delta)?,
    };
    if solution.kind == SolutionKind::Converged {
        return Ok(converged_record(current.loss, state.delta));
    }

    let trial: Vec<f64> = params.iter().zip(&solution.step).map(|(x, s)| x + s).collect();
    let (trial_loss, trial_grad) = objective.loss_and_grad(&trial)?;
    let actual = current.loss - trial_loss;
    let ratio = rho(actual, solution.predicted_reduction);
    let (delta, accepted) = update_radius(state.delta, ratio, config);
    state.delta = delta;

    if accepted {
        if let Some(mem) = state.memory.as_mut() {
            let y: Vec<f64> = trial_grad
                .iter()
                .zip(&current.grad)
                .map(|(a, b)| a - b)
                .collect();
            mem.update(&solution.step, &y)?;
        }
        *params = trial;
        current.loss = trial_loss;
        current.grad = trial_grad;
    }

    Ok(TrStepRecord {
        iteration,
        loss: current.loss,
        rho: ratio.value(),
        delta,
        accepted,
        converged: false,
        step_norm: norm_inf(&solution.step),
        predicted: solution.predicted_reduction,
        actual,
    })
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub params: Vec<f64>,
    pub loss: f64,
    pub records: Vec<TrStepRecord>,
    pub converged: bool,
    pub state: TrState,
}

/// 2-D Rosenbrock function, minimum 0 at (1, 1).
pub struct Rosenbrock;

impl Objective for Rosenbrock {
    fn dim(&self) -> usize {
        2
    }
    fn loss(&self, x: &[f64]) -> Result<f64, Error> {
        if x.len() != 2 {
            return Err(Error::InvalidConfig(format!("Rosenbrock needs 2 coordinates, got {}", x.len())));
        }
        Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
    }
    fn loss_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), Error> {
        let loss = self.loss(x)?;
        let t = x[1] - x[0] * x[0];
        Ok((loss, vec![-2.0 * (1.0 - x[0]) - 400.0 * x[0] * t, 200.0 * t]))
    }
}

/// Global defaults with a radius floor suited to a unit-scale problem.
///
/// At a floor of 1e-4 a rejected second-order candidate on Rosenbrock is
/// regenerated unchanged forever, since only accepted steps feed the memory.
pub fn rosenbrock_config() -> TrConfig {
    TrConfig {
        delta_min: 1e-8,
        ..TrConfig::default()
    }
    .with_order(ModelOrder::Second)
}

/// Repeats [`tr_step`] until `max_iters` or ‖∇‖_∞ ≤ `grad_tol`.
pub fn tr_minimize<O: Objective + ?Sized>(
    objective: &O,
    x0: Vec<f64>,
    config: &TrConfig,
    max_iters: usize,
    grad_tol: f64,
) -> Result<Trajectory, Error> {
    config.validate()?;
    let mut params = x0;
    let mut current = Evaluation::at(objective, &params)?;
    let mut state = TrState::new(config)?;
    let mut records = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        if norm_inf(&current.grad) <= grad_tol {
            converged = true;
            break;
        }
        let rec = tr_step(objective, &mut params, &mut current, &mut state, config)?;
        let stop = rec.converged;
        records.push(rec);
        if stop {
            converged = true;
            break;
        }
    }
    if !converged && norm_inf(&current.grad) <= grad_tol {
        converged = true;
    }
    Ok(Trajectory {
        params,
        loss: current.loss,
        records,
        converged,
        state,
    })
}

#[cfg(test)]
pub(crate) mod test_objectives {
    use super::*;

    pub struct Quadratic {
        pub diag: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.diag.len()
        }
        fn loss(&self, x: &[f64]) -> Result<f64, Error> {
            Ok(0.5 * x.iter().zip(&self.diag).map(|(a, h)| h * a * a).sum::<f64>())
        }
        fn loss_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), Error> {
            let g = x.iter().zip(&self.diag).map(|(a, h)| h * a).collect();
            Ok((self.loss(x)?, g))
        }
    }
}
