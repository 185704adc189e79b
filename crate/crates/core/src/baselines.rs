//! First-order reference optimizers.

use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Momentum SGD on the full dataset.
    Gd,
    Sgd,
    Adam,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "gd" => Ok(Self::Gd),
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::InvalidConfig(format!("unknown baseline optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl BaselineConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: BaselineKind::Sgd,
            learning_rate,
            momentum,
            ..Self::adam(learning_rate)
        }
    }

    pub fn gd(learning_rate: f64) -> Self {
        Self {
            kind: BaselineKind::Gd,
            ..Self::sgd(learning_rate, 0.0)
        }
    }

    /// Adam with the usual β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: BaselineKind::Adam,
            learning_rate,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.kind == BaselineKind::Adam {
            for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
                if !(b > 0.0 && b < 1.0) {
                    return bad(format!("{name} must lie in (0, 1), got {b}"));
                }
            }
            if !(self.epsilon > 0.0) {
                return bad(format!("epsilon must be positive, got {}", self.epsilon));
            }
        }
        Ok(())
    }
}

/// Velocity for (S)GD, moments for Adam.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BaselineState {
    pub velocity: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl BaselineState {
    pub fn new(dim: usize) -> Self {
        Self {
            velocity: vec![0.0; dim],
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

/// Applies one update in place.
pub fn baseline_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut BaselineState,
    config: &BaselineConfig,
) -> Result<(), Error> {
    let n = params.len();
    if grad.len() != n || state.velocity.len() != n {
        return Err(Error::InvalidConfig(format!(
            "baseline step: {} params, {} gradient entries, state for {}",
            n,
            grad.len(),
            state.velocity.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Invariant("non-finite gradient".into()));
    }
    let lr = config.learning_rate;
    state.t += 1;
    match config.kind {
        BaselineKind::Gd | BaselineKind::Sgd => {
            for ((p, v), g) in params.iter_mut().zip(&mut state.velocity).zip(grad) {
                *v = config.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        BaselineKind::Adam => {
            let (b1, b2) = (config.beta1, config.beta2);
            let c1 = 1.0 - b1.powf(state.t as f64);
            let c2 = 1.0 - b2.powf(state.t as f64);
            for (((p, m), v), g) in params.iter_mut().zip(&mut state.m).zip(&mut state.v).zip(grad) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + config.epsilon);
            }
        }
    }
    Ok(())
}
