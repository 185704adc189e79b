//! Epoch loop shared by every optimizer.

use std::time::Instant;

use crate::apts::{apts_step, make_partition, AptsConfig, AptsState, ModelObjective, StepRecord, Subdomains};
use crate::baselines::{baseline_step, BaselineConfig, BaselineState};
use crate::model::{Batch, Mlp, TrainableMask};
use crate::trloop::{tr_step, Evaluation, TrConfig, TrState};
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Apts(AptsConfig),
    /// Standalone trust region, one iteration per batch.
    Tr(TrConfig),
    Baseline(BaselineConfig),
}

impl Method {
    pub fn validate(&self) -> Result<(), Error> {
        match self {
            Method::Apts(c) => c.validate(),
            Method::Tr(c) => c.validate(),
            Method::Baseline(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub trial: usize,
    /// 0 is the evaluation before any training.
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub global_radius: Option<f64>,
    /// fdl loop iterations summed over the epoch.
    pub fdl_activations: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedStep {
    pub trial: usize,
    pub epoch: usize,
    pub batch: usize,
    pub record: StepRecord,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<LoggedStep>,
}

/// Inputs of one training run.
pub struct TrainSetup<'a> {
    pub mlp: &'a Mlp,
    /// Batches visited in order every epoch; a single entry is full-batch.
    pub batches: &'a [Batch],
    /// Full training set for the per-epoch train loss.
    pub train: &'a Batch,
    pub test: Option<&'a Batch>,
    pub trial: usize,
    /// When false `wall_seconds` is written as 0 so outputs are reproducible.
    pub wall_clock: bool,
}

enum Runner {
    Apts {
        config: AptsConfig,
        subdomains: Subdomains,
        state: AptsState,
    },
    Tr {
        config: TrConfig,
        state: TrState,
    },
    Baseline {
        config: BaselineConfig,
        state: BaselineState,
    },
}

impl Runner {
    fn radius(&self) -> Option<f64> {
        match self {
            Runner::Apts { state, .. } => Some(state.global.delta),
            Runner::Tr { state, .. } => Some(state.delta),
            Runner::Baseline { .. } => None,
        }
    }
}

pub fn train(setup: &TrainSetup<'_>, method: &Method, params0: Vec<f64>, epochs: usize) -> Result<TrainOutcome, Error> {
    method.validate()?;
    let mlp = setup.mlp;
    if params0.len() != mlp.param_count() {
        return Err(Error::InvalidConfig(format!(
            "initial parameters have {} entries, model needs {}",
            params0.len(),
            mlp.param_count()
        )));
    }
    if setup.batches.is_empty() {
        return Err(Error::InvalidConfig("no training batches".into()));
    }
    let mut runner = match method {
        Method::Apts(config) => {
            let partition = make_partition(mlp.segment_count(), config.subdomains, config.partition_seed)?;
            Runner::Apts {
                config: config.clone(),
                subdomains: Subdomains::new(partition, mlp.segments())?,
                state: AptsState::new(config)?,
            }
        }
        Method::Tr(config) => Runner::Tr {
            config: *config,
            state: TrState::new(config)?,
        },
        Method::Baseline(config) => Runner::Baseline {
            config: *config,
            state: BaselineState::new(mlp.param_count()),
        },
    };

    let start = Instant::now();
    let mut params = params0;
    let mut records = Vec::with_capacity(epochs + 1);
    let mut steps = Vec::new();
    let record = |epoch: usize, params: &[f64], radius: Option<f64>, fdl: usize| -> Result<EpochRecord, Error> {
        let train_loss = mlp.loss(params, setup.train)?;
        let test = setup.test.map(|b| mlp.evaluate(params, b)).transpose()?;
        Ok(EpochRecord {
            trial: setup.trial,
            epoch,
            train_loss,
            test_loss: test.map(|e| e.loss),
            test_accuracy: test.map(|e| e.accuracy),
            global_radius: radius,
            fdl_activations: fdl,
            wall_seconds: if setup.wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })
    };
    records.push(record(0, &params, runner.radius(), 0)?);

    let all = TrainableMask::all(mlp.segment_count());
    for epoch in 1..=epochs {
        let mut fdl = 0;
        for (b, batch) in setup.batches.iter().enumerate() {
            match &mut runner {
                Runner::Apts {
                    config,
                    subdomains,
                    state,
                } => {
                    let rec = apts_step(mlp, subdomains, &mut params, batch, state, config)?;
                    fdl += rec.fdl.activations;
                    log::debug!(
                        "trial {} epoch {epoch} batch {b}: loss {:.6} -> {:.6}, radius {:.3e}",
                        setup.trial,
                        rec.loss_before,
                        rec.loss_after,
                        rec.delta_after
                    );
                    steps.push(LoggedStep {
                        trial: setup.trial,
                        epoch,
                        batch: b,
                        record: rec,
                    });
                }
                Runner::Tr { config, state } => {
                    let objective = ModelObjective::new(mlp, batch);
                    let mut current = Evaluation::at(&objective, &params)?;
                    tr_step(&objective, &mut params, &mut current, state, config)?;
                }
                Runner::Baseline { config, state } => {
                    let (_, grad) = mlp.loss_and_grad(&params, batch, &all)?;
                    baseline_step(&mut params, &grad, state, config)?;
                }
            }
        }
        let rec = record(epoch, &params, runner.radius(), fdl)?;
        log::info!(
            "trial {} epoch {epoch}: train loss {:.6}, test accuracy {}",
            setup.trial,
            rec.train_loss,
            rec.test_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"))
        );
        records.push(rec);
    }
    Ok(TrainOutcome {
        params,
        epochs: records,
        steps,
    })
}
