//! Additively preconditioned trust-region steps.
//!
//! Each step runs independent TR solves on disjoint groups of parameter
//! segments, sums the local updates into one preconditioned iterate,
//! optionally blends it back towards the scaled gradient when the loss went
//! up, and finishes with one global TR iteration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::linalg::norm_inf;
use crate::lsr1::Lsr1Memory;
use crate::model::{Batch, Mlp, Segment, TrainableMask};
use crate::trloop::{tr_step, Evaluation, Objective, TrConfig, TrState};
use crate::Error;

/// Assignment of parameter segments to subdomains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub segment_count: usize,
    /// Sorted segment indices per subdomain.
    pub assignment: Vec<Vec<usize>>,
}

impl Partition {
    pub fn subdomain_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignment.iter().map(Vec::len).collect()
    }

    /// Subdomain owning `segment`.
    pub fn owner(&self, segment: usize) -> Option<usize> {
        self.assignment.iter().position(|a| a.contains(&segment))
    }
}

/// Shuffles the segment indices by `seed` and deals them round-robin.
pub fn make_partition(segment_count: usize, subdomains: usize, seed: u64) -> Result<Partition, Error> {
    if subdomains == 0 || subdomains > segment_count {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= subdomains <= segments, got {subdomains} subdomains for {segment_count} segments"
        )));
    }
    let mut order: Vec<usize> = (0..segment_count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![Vec::new(); subdomains];
    for (k, seg) in order.into_iter().enumerate() {
        assignment[k % subdomains].push(seg);
    }
    for a in &mut assignment {
        a.sort_unstable();
    }
    Ok(Partition {
        segment_count,
        assignment,
    })
}

/// A partition resolved against a concrete segment table.
#[derive(Debug, Clone)]
pub struct Subdomains {
    pub partition: Partition,
    /// Ascending flat coordinates per subdomain.
    pub coords: Vec<Vec<usize>>,
    pub masks: Vec<TrainableMask>,
}

impl Subdomains {
    pub fn new(partition: Partition, segments: &[Segment]) -> Result<Self, Error> {
        if partition.segment_count != segments.len() {
            return Err(Error::InvalidConfig(format!(
                "partition covers {} segments, model has {}",
                partition.segment_count,
                segments.len()
            )));
        }
        let mut coords = Vec::with_capacity(partition.subdomain_count());
        let mut masks = Vec::with_capacity(partition.subdomain_count());
        for segs in &partition.assignment {
            coords.push(segs.iter().flat_map(|&k| segments[k].range()).collect());
            masks.push(
                TrainableMask::from_segments(segs.iter().copied(), segments.len())
                    .map_err(Error::Model)?,
            );
        }
        Ok(Self {
            partition,
            coords,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AptsConfig {
    pub subdomains: usize,
    pub partition_seed: u64,
    /// Maximum local TR iterations per subdomain.
    pub nu: usize,
    pub fdl: bool,
    /// Global radius policy; its order applies to the local solves too.
    pub global: TrConfig,
    /// Run the local solves on the rayon pool.
    pub parallel: bool,
}

impl Default for AptsConfig {
    fn default() -> Self {
        Self {
            subdomains: 2,
            partition_seed: 0,
            nu: 5,
            fdl: true,
            global: TrConfig::default(),
            parallel: true,
        }
    }
}

impl AptsConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.nu == 0 {
            return Err(Error::InvalidConfig("apts: nu must be at least 1".into()));
        }
        if self.subdomains == 0 {
            return Err(Error::InvalidConfig("apts: need at least one subdomain".into()));
        }
        self.global.validate()
    }

    /// Local radius policy: starts at Δ_G with no lower bound.
    pub fn local_config(&self, delta_g: f64) -> TrConfig {
        TrConfig {
            delta_init: delta_g,
            delta_min: 0.0,
            delta_max: delta_g,
            ..self.global
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    /// New values of the subdomain coordinates.
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Local loss after each iteration.
    pub losses: Vec<f64>,
}

/// Up to `nu` TR iterations on a subdomain objective, keeping the cumulative
/// displacement within `delta_g` in the ∞-norm.
///
/// `start` holds loss and gradient at `x0`. The radius cap shrinks to the
/// unused budget before every iteration.
pub fn local_solve<O: Objective + ?Sized>(
    objective: &O,
    x0: &[f64],
    start: Evaluation,
    delta_g: f64,
    nu: usize,
    config: &TrConfig,
    memory: Option<Lsr1Memory>,
) -> Result<LocalResult, Error> {
    if !(delta_g > 0.0) {
        return Err(Error::InvalidConfig(format!("local solve needs delta_G > 0, got {delta_g}")));
    }
    let mut x = x0.to_vec();
    let mut current = start;
    let mut state = TrState {
        delta: delta_g,
        memory,
        iteration: 0,
    };
    let mut cfg = *config;
    cfg.delta_min = 0.0;
    let mut losses = Vec::new();
    let mut iterations = 0;
    for _ in 0..nu {
        let used = x.iter().zip(x0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let remaining = delta_g - used;
        if remaining <= 1e-12 * delta_g {
            break;
        }
        cfg.delta_max = remaining;
        state.delta = state.delta.min(remaining);
        let rec = tr_step(objective, &mut x, &mut current, &mut state, &cfg)?;
        iterations += 1;
        if rec.converged {
            break;
        }
        losses.push(rec.loss);
    }
    Ok(LocalResult {
        values: x,
        iterations,
        losses,
    })
}

/// The network loss over the full parameter vector.
pub struct ModelObjective<'a> {
    pub mlp: &'a Mlp,
    pub batch: &'a Batch,
    mask: TrainableMask,
}

impl<'a> ModelObjective<'a> {
    pub fn new(mlp: &'a Mlp, batch: &'a Batch) -> Self {
        Self {
            mlp,
            batch,
            mask: TrainableMask::all(mlp.segment_count()),
        }
    }
}

impl Objective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.mlp.param_count()
    }
    fn loss(&self, x: &[f64]) -> Result<f64, Error> {
        Ok(self.mlp.loss(x, self.batch)?)
    }
    fn loss_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), Error> {
        Ok(self.mlp.loss_and_grad(x, self.batch, &self.mask)?)
    }
}

/// The network loss as a function of one subdomain's coordinates, all other
/// parameters frozen at `base`.
pub struct SubdomainObjective<'a> {
    pub mlp: &'a Mlp,
    pub batch: &'a Batch,
    pub base: &'a [f64],
    pub coords: &'a [usize],
    pub mask: &'a TrainableMask,
}

impl SubdomainObjective<'_> {
    fn scatter(&self, x: &[f64]) -> Result<Vec<f64>, Error> {
        if x.len() != self.coords.len() {
            return Err(Error::InvalidConfig(format!(
                "subdomain vector has {} entries, expected {}",
                x.len(),
                self.coords.len()
            )));
        }
        let mut full = self.base.to_vec();
        for (&i, &v) in self.coords.iter().zip(x) {
            full[i] = v;
        }
        Ok(full)
    }
}

impl Objective for SubdomainObjective<'_> {
    fn dim(&self) -> usize {
        self.coords.len()
    }
    fn loss(&self, x: &[f64]) -> Result<f64, Error> {
        Ok(self.mlp.loss(&self.scatter(x)?, self.batch)?)
    }
    fn loss_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), Error> {
        let (loss, grad) = self.mlp.loss_and_grad(&self.scatter(x)?, self.batch, self.mask)?;
        Ok((loss, self.coords.iter().map(|&i| grad[i]).collect()))
    }
}

/// Zero-padded sum of local results. Returns θ̃ and s = θ̃ − θ.
pub fn aggregate(
    params: &[f64],
    results: &[LocalResult],
    coords: &[Vec<usize>],
    delta_g: f64,
) -> Result<(Vec<f64>, Vec<f64>), Error> {
    if results.len() != coords.len() {
        return Err(Error::Invariant(format!(
            "{} local results for {} subdomains",
            results.len(),
            coords.len()
        )));
    }
    let mut owned = vec![false; params.len()];
    let mut step = vec![0.0; params.len()];
    for (res, idx) in results.iter().zip(coords) {
        if res.values.len() != idx.len() {
            return Err(Error::Invariant("local result length differs from subdomain size".into()));
        }
        for (&i, &v) in idx.iter().zip(&res.values) {
            if i >= params.len() || std::mem::replace(&mut owned[i], true) {
                return Err(Error::Invariant(format!("coordinate {i} claimed by two subdomains")));
            }
            step[i] = v - params[i];
        }
    }
    let bound = norm_inf(&step);
    if bound > delta_g + 1e-12 {
        return Err(Error::Invariant(format!(
            "preconditioning step {bound:e} exceeds global radius {delta_g:e}"
        )));
    }
    let theta: Vec<f64> = params.iter().zip(&step).map(|(p, s)| p + s).collect();
    Ok((theta, step))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdlTrace {
    /// Loop iterations executed.
    pub activations: usize,
    pub final_w: f64,
    pub final_delta: f64,
}

/// Result of the safeguard: the half-step iterate and its loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FdlOutcome {
    pub theta: Vec<f64>,
    pub loss: f64,
    pub trace: FdlTrace,
}

const FDL_STEPS: usize = 5;

/// Blends a loss-increasing preconditioning step back towards the scaled
/// negative gradient `g`, shrinking the radius each time.
///
/// `loss_step` is the loss at θ_k + s. The returned trace's `final_delta`
/// becomes the next global radius.
#[allow(clippy::too_many_arguments)]
pub fn fdl_safeguard<F>(
    theta_k: &[f64],
    s: &[f64],
    g: &[f64],
    loss_old: f64,
    loss_step: f64,
    delta_g: f64,
    delta_min: f64,
    alpha: f64,
    mut loss_at: F,
) -> Result<FdlOutcome, Error>
where
    F: FnMut(&[f64]) -> Result<f64, Error>,
{
    let mut theta: Vec<f64> = theta_k.iter().zip(s).map(|(a, b)| a + b).collect();
    let mut loss = loss_step;
    let mut delta = delta_g;
    let mut k = 0;
    while loss > loss_old && k < FDL_STEPS {
        k += 1;
        let w = k as f64 / FDL_STEPS as f64;
        delta = delta_min.max(alpha * delta);
        let d: Vec<f64> = g.iter().zip(s).map(|(gi, si)| w * gi + (1.0 - w) * si).collect();
        let nd = norm_inf(&d);
        if nd == 0.0 {
            theta = theta_k.to_vec();
            loss = loss_old;
            break;
        }
        theta = theta_k.iter().zip(&d).map(|(a, di)| a + delta * di / nd).collect();
        loss = loss_at(&theta)?;
    }
    Ok(FdlOutcome {
        theta,
        loss,
        trace: FdlTrace {
            activations: k,
            final_w: k as f64 / FDL_STEPS as f64,
            final_delta: delta,
        },
    })
}

#[derive(Debug, Clone)]
pub struct AptsState {
    pub global: TrState,
    pub step: usize,
}

impl AptsState {
    pub fn new(config: &AptsConfig) -> Result<Self, Error> {
        Ok(Self {
            global: TrState::new(&config.global)?,
            step: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss_before: f64,
    /// Loss at θ^{k+½}.
    pub loss_half: f64,
    pub loss_after: f64,
    pub delta_before: f64,
    pub delta_after: f64,
    /// ‖θ̃ − θ_k‖_∞.
    pub precond_norm: f64,
    pub fdl: FdlTrace,
    pub local_iterations: Vec<usize>,
    pub accepted: bool,
    pub rho: Option<f64>,
    pub converged: bool,
}

/// One preconditioning pass plus one global TR iteration on `batch`.
pub fn apts_step(
    mlp: &Mlp,
    subdomains: &Subdomains,
    params: &mut Vec<f64>,
    batch: &Batch,
    state: &mut AptsState,
    config: &AptsConfig,
) -> Result<StepRecord, Error> {
    let step = state.step;
    state.step += 1;
    let global = ModelObjective::new(mlp, batch);
    let (loss_k, grad_k) = global.loss_and_grad(params)?;
    let delta_g = state.global.delta;
    let gnorm = norm_inf(&grad_k);
    if gnorm == 0.0 {
        return Ok(StepRecord {
            step,
            loss_before: loss_k,
            loss_half: loss_k,
            loss_after: loss_k,
            delta_before: delta_g,
            delta_after: delta_g,
            precond_norm: 0.0,
            fdl: FdlTrace {
                activations: 0,
                final_w: 0.0,
                final_delta: delta_g,
            },
            local_iterations: vec![0; subdomains.len()],
            accepted: false,
            rho: None,
            converged: true,
        });
    }

    let local_cfg = config.local_config(delta_g);
    let snapshot: &[f64] = params;
    let solve = |i: usize| -> Result<LocalResult, Error> {
        let coords = &subdomains.coords[i];
        let objective = SubdomainObjective {
            mlp,
            batch,
            base: snapshot,
            coords,
            mask: &subdomains.masks[i],
        };
        let x0: Vec<f64> = coords.iter().map(|&c| snapshot[c]).collect();
        let start = Evaluation {
            loss: loss_k,
            grad: coords.iter().map(|&c| grad_k[c]).collect(),
        };
        let memory = state.global.memory.as_ref().map(|m| m.restrict(coords)).transpose()?;
        local_solve(&objective, &x0, start, delta_g, config.nu, &local_cfg, memory)
    };
    let results: Vec<LocalResult> = if config.parallel && subdomains.len() > 1 {
        (0..subdomains.len()).into_par_iter().map(solve).collect::<Result<_, _>>()?
    } else {
        (0..subdomains.len()).map(solve).collect::<Result<_, _>>()?
    };
    let (theta_tilde, s) = aggregate(params, &results, &subdomains.coords, delta_g)?;
    let precond_norm = norm_inf(&s);

    let (theta_half, mut current) = if config.fdl {
        let loss_step = global.loss(&theta_tilde)?;
        let g: Vec<f64> = grad_k.iter().map(|x| -delta_g * x / gnorm).collect();
        let outcome = fdl_safeguard(
            params,
            &s,
            &g,
            loss_k,
            loss_step,
            delta_g,
            config.global.delta_min,
            config.global.alpha,
            |x| global.loss(x),
        )?;
        state.global.delta = outcome.trace.final_delta;
        let trace = outcome.trace;
        let eval = if outcome.theta == *params {
            Evaluation {
                loss: loss_k,
                grad: grad_k,
            }
        } else {
            Evaluation::at(&global, &outcome.theta)?
        };
        ((outcome.theta, trace), eval)
    } else {
        let eval = Evaluation::at(&global, &theta_tilde)?;
        let trace = FdlTrace {
            activations: 0,
            final_w: 0.0,
            final_delta: delta_g,
        };
        ((theta_tilde, trace), eval)
    };
    let (mut theta, fdl) = theta_half;
    let loss_half = current.loss;

    let rec = tr_step(&global, &mut theta, &mut current, &mut state.global, &config.global)?;
    *params = theta;
    Ok(StepRecord {
        step,
        loss_before: loss_k,
        loss_half,
        loss_after: current.loss,
        delta_before: delta_g,
        delta_after: state.global.delta,
        precond_norm,
        fdl,
        local_iterations: results.iter().map(|r| r.iterations).collect(),
        accepted: rec.accepted,
        rho: rec.rho,
        converged: false,
    })
}

/// Trains with APTS over `setup.batches` (one batch is APTS, several are the
/// mini-batch variant).
pub fn run_apts(
    setup: &crate::training::TrainSetup<'_>,
    config: &AptsConfig,
    params0: Vec<f64>,
    epochs: usize,
) -> Result<crate::training::TrainOutcome, Error> {
    crate::training::train(setup, &crate::training::Method::Apts(config.clone()), params0, epochs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::model::MlpSpec;
    use crate::trloop::{tr_minimize, ModelOrder};
    use proptest::prelude::*;

    struct Quadratic {
        diag: Vec<f64>,
        center: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.diag.len()
        }
        fn loss(&self, x: &[f64]) -> Result<f64, Error> {
            Ok(0.5
                * x.iter()
                    .zip(&self.center)
                    .zip(&self.diag)
                    .map(|((a, c), h)| h * (a - c) * (a - c))
                    .sum::<f64>())
        }
        fn loss_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), Error> {
            let g = x
                .iter()
                .zip(&self.center)
                .zip(&self.diag)
                .map(|((a, c), h)| h * (a - c))
                .collect();
            Ok((self.loss(x)?, g))
        }
    }

    #[test]
    fn partition_examples() {
        let p = make_partition(6, 2, 3).unwrap();
        assert_eq!(p.sizes(), vec![3, 3]);
        let p = make_partition(6, 4, 3).unwrap();
        assert_eq!(p.sizes(), vec![2, 2, 1, 1]);
        let p = make_partition(6, 1, 3).unwrap();
        assert_eq!(p.assignment, vec![vec![0, 1, 2, 3, 4, 5]]);
        assert!(make_partition(6, 7, 0).is_err());
        assert!(make_partition(6, 0, 0).is_err());
        assert_eq!(make_partition(6, 3, 11).unwrap(), make_partition(6, 3, 11).unwrap());
    }

    proptest! {
        #[test]
        fn prop_partition_sound(m in 1usize..20, n_frac in 0.0f64..1.0, seed in any::<u64>()) {
            let n = 1 + ((m - 1) as f64 * n_frac) as usize;
            let p = make_partition(m, n, seed).unwrap();
            let mut all: Vec<usize> = p.assignment.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..m).collect::<Vec<_>>());
            let sizes = p.sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn prop_aggregate_bound(seed in any::<u64>(), delta in 1e-4f64..1.0) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let params: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let coords = vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7], vec![8, 9, 10, 11]];
            let results: Vec<LocalResult> = coords.iter().map(|c| LocalResult {
                values: c.iter().map(|&i| params[i] + rng.gen_range(-delta..delta)).collect(),
                iterations: 1,
                losses: vec![],
            }).collect();
            let (theta, s) = aggregate(&params, &results, &coords, delta).unwrap();
            prop_assert!(norm_inf(&s) <= delta + 1e-12);
            for i in 0..n {
                prop_assert_eq!(theta[i], params[i] + s[i]);
            }
        }
    }

    #[test]
    fn aggregate_examples() {
        let params = vec![1.0, 2.0, 3.0, 4.0];
        let coords = vec![vec![0, 2], vec![1, 3]];
        let same: Vec<LocalResult> = coords
            .iter()
            .map(|c| LocalResult {
                values: c.iter().map(|&i| params[i]).collect(),
                iterations: 0,
                losses: vec![],
            })
            .collect();
        let (theta, s) = aggregate(&params, &same, &coords, 0.1).unwrap();
        assert_eq!(theta, params);
        assert!(s.iter().all(|&x| x == 0.0));

        let moved = vec![
            LocalResult {
                values: vec![1.05, 3.0],
                iterations: 1,
                losses: vec![],
            },
            LocalResult {
                values: vec![2.0, 3.95],
                iterations: 1,
                losses: vec![],
            },
        ];
        let (theta, _) = aggregate(&params, &moved, &coords, 0.1).unwrap();
        let changed: Vec<usize> = (0..4).filter(|&i| theta[i] != params[i]).collect();
        assert_eq!(changed, vec![0, 3]);

        let overlap = vec![vec![0, 1], vec![1, 2]];
        let res = vec![
            LocalResult {
                values: vec![1.0, 2.0],
                iterations: 0,
                losses: vec![],
            };
            2
        ];
        assert!(matches!(
            aggregate(&params, &res, &overlap, 0.1),
            Err(Error::Invariant(_))
        ));
        let too_far = vec![
            LocalResult {
                values: vec![1.5, 3.0],
                iterations: 1,
                losses: vec![],
            },
            same[1].clone(),
        ];
        assert!(aggregate(&params, &too_far, &coords, 0.1).is_err());
    }

    #[test]
    fn fdl_examples() {
        let theta = vec![0.0, 0.0];
        let s = vec![0.1, 0.0];
        let g = vec![0.0, -0.1];
        // improvement on the first probe: no loop
        let out = fdl_safeguard(&theta, &s, &g, 1.0, 0.5, 0.1, 1e-4, 0.5, |_| unreachable!()).unwrap();
        assert_eq!(out.trace.activations, 0);
        assert_eq!(out.trace.final_w, 0.0);
        assert_eq!(out.theta, vec![0.1, 0.0]);

        // one failing probe then success
        let out = fdl_safeguard(&theta, &s, &g, 1.0, 2.0, 0.1, 1e-4, 0.5, |_| Ok(0.9)).unwrap();
        assert_eq!(out.trace.activations, 1);
        assert_eq!(out.trace.final_w, 0.2);
        assert_eq!(out.trace.final_delta, 0.05);
        assert!(norm_inf(&out.theta) - 0.05 < 1e-15);

        // never improves: saturates at the gradient direction
        let mut probes = 0;
        let out = fdl_safeguard(&theta, &s, &g, 1.0, 2.0, 0.1, 1e-4, 0.5, |_| {
            probes += 1;
            Ok(3.0)
        })
        .unwrap();
        assert_eq!(probes, 5);
        assert_eq!(out.trace.final_w, 1.0);
        let d = 0.1 * 0.5f64.powi(5);
        assert_eq!(out.trace.final_delta, d);
        assert_eq!(out.theta[0], 0.0);
        assert!((out.theta[1] + d).abs() <= 1e-18);

        // floor on the radius
        let out = fdl_safeguard(&theta, &s, &g, 1.0, 2.0, 1e-4, 1e-4, 0.5, |_| Ok(3.0)).unwrap();
        assert_eq!(out.trace.final_delta, 1e-4);

        // zero blend vector at w = 0.2: 0.2·(-0.4) + 0.8·0.1 = 0
        let out = fdl_safeguard(&theta, &[0.1, 0.0], &[-0.4, 0.0], 1.0, 2.0, 0.1, 1e-4, 0.5, |_| Ok(3.0))
            .unwrap();
        assert_eq!(out.trace.activations, 1);
        assert_eq!(out.theta, theta);
        assert_eq!(out.loss, 1.0);
    }

    #[test]
    fn fdl_weights_on_grid() {
        for k in 0..=5 {
            let mut n = 0;
            let out = fdl_safeguard(&[0.0], &[0.1], &[-0.1], 1.0, 2.0, 0.1, 1e-4, 0.5, |_| {
                n += 1;
                Ok(if n >= k { 0.0 } else { 5.0 })
            })
            .unwrap();
            assert!([0.0, 0.2, 0.4, 0.6, 0.8, 1.0].contains(&out.trace.final_w));
            assert!(out.trace.activations <= 5);
        }
    }

    #[test]
    fn local_solve_budget_and_monotone() {
        let f = Quadratic {
            diag: vec![1.0, 4.0, 2.0, 8.0],
            center: vec![1.0, -1.0, 0.5, 0.25],
        };
        let x0 = vec![0.0; 4];
        let subsets = [vec![0usize, 1], vec![2usize, 3]];
        for order in [ModelOrder::First, ModelOrder::Second] {
            let cfg = TrConfig::default().with_order(order);
            for subset in &subsets {
                let local = LocalView {
                    f: &f,
                    base: &x0,
                    coords: subset,
                };
                let start_x: Vec<f64> = subset.iter().map(|&i| x0[i]).collect();
                let start = Evaluation::at(&local, &start_x).unwrap();
                let mem = match order {
                    ModelOrder::Second => Some(Lsr1Memory::new(5).unwrap()),
                    ModelOrder::First => None,
                };
                let res = local_solve(&local, &start_x, start.clone(), 0.3, 5, &cfg, mem).unwrap();
                let mut last = start.loss;
                for &l in &res.losses {
                    assert!(l <= last);
                    last = l;
                }
                assert!(norm_inf(&res.values) <= 0.3 + 1e-15);
                assert!(res.iterations <= 5);
            }
        }
    }

    #[test]
    fn local_solve_first_step_exhausts_budget() {
        let f = Quadratic {
            diag: vec![1.0, 1.0],
            center: vec![5.0, 5.0],
        };
        let cfg = TrConfig::default();
        let start = Evaluation::at(&f, &[0.0, 0.0]).unwrap();
        let res = local_solve(&f, &[0.0, 0.0], start, 0.1, 5, &cfg, None).unwrap();
        assert_eq!(res.iterations, 1);
        assert_eq!(res.values, vec![0.1, 0.1]);
    }

    #[test]
    fn local_solve_zero_gradient_is_identity() {
        let f = Quadratic {
            diag: vec![1.0, 1.0],
            center: vec![0.0, 0.0],
        };
        let start = Evaluation::at(&f, &[0.0, 0.0]).unwrap();
        let res = local_solve(&f, &[0.0, 0.0], start, 0.1, 5, &TrConfig::default(), None).unwrap();
        assert_eq!(res.values, vec![0.0, 0.0]);
        assert!(res.losses.is_empty());
    }

    struct LocalView<'a> {
        f: &'a Quadratic,
        base: &'a [f64],
        coords: &'a [usize],
    }

    impl Objective for LocalView<'_> {
        fn dim(&self) -> usize {
            self.coords.len()
        }
        fn loss(&self, x: &[f64]) -> Result<f64, Error> {
            let mut full = self.base.to_vec();
            for (&i, &v) in self.coords.iter().zip(x) {
                full[i] = v;
            }
            self.f.loss(&full)
        }
        fn loss_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), Error> {
            let mut full = self.base.to_vec();
            for (&i, &v) in self.coords.iter().zip(x) {
                full[i] = v;
            }
            let (l, g) = self.f.loss_and_grad(&full)?;
            Ok((l, self.coords.iter().map(|&i| g[i]).collect()))
        }
    }

    fn toy() -> (Mlp, Batch) {
        let data = make_synthetic(SyntheticKind::TwoGaussians, 20, 5);
        let mlp = Mlp::new(&MlpSpec::new(vec![data.features, 3, 2], 0)).unwrap();
        (mlp, data.to_batch().unwrap())
    }

    #[test]
    fn tr_on_small_mlp_halves_loss() {
        let (mlp, batch) = toy();
        let obj = ModelObjective::new(&mlp, &batch);
        let x0 = mlp.init_params(1).values;
        let l0 = obj.loss(&x0).unwrap();
        for order in [ModelOrder::First, ModelOrder::Second] {
            let cfg = TrConfig::default().with_order(order);
            let traj = tr_minimize(&obj, x0.clone(), &cfg, 100, 0.0).unwrap();
            assert!(traj.loss <= 0.5 * l0, "{order:?}: {l0} -> {}", traj.loss);
        }
    }

    #[test]
    fn apts_steps_respect_invariants() {
        let (mlp, batch) = toy();
        for (fdl, order) in [(true, ModelOrder::First), (false, ModelOrder::Second), (true, ModelOrder::Second)] {
            let config = AptsConfig {
                subdomains: 2,
                fdl,
                global: TrConfig::default().with_order(order),
                ..AptsConfig::default()
            };
            let sub = Subdomains::new(make_partition(4, 2, 0).unwrap(), mlp.segments()).unwrap();
            let mut state = AptsState::new(&config).unwrap();
            let mut params = mlp.init_params(2).values;
            for _ in 0..40 {
                let rec = apts_step(&mlp, &sub, &mut params, &batch, &mut state, &config).unwrap();
                assert!(rec.precond_norm <= rec.delta_before + 1e-12);
                assert!(rec.delta_after >= 1e-4 && rec.delta_after <= 1e-1);
                assert!(rec.fdl.activations <= 5);
                if fdl && rec.fdl.final_w < 1.0 {
                    assert!(rec.loss_half <= rec.loss_before);
                }
                assert!(rec.loss_after <= rec.loss_half);
                assert!(rec.local_iterations.iter().all(|&n| n <= config.nu));
            }
        }
    }

    #[test]
    fn apts_parallel_matches_serial() {
        let (mlp, batch) = toy();
        let run = |parallel| {
            let config = AptsConfig {
                subdomains: 3,
                parallel,
                global: TrConfig::default().with_order(ModelOrder::Second),
                ..AptsConfig::default()
            };
            let sub = Subdomains::new(make_partition(4, 3, 9).unwrap(), mlp.segments()).unwrap();
            let mut state = AptsState::new(&config).unwrap();
            let mut params = mlp.init_params(4).values;
            let recs: Vec<StepRecord> = (0..15)
                .map(|_| apts_step(&mlp, &sub, &mut params, &batch, &mut state, &config).unwrap())
                .collect();
            (params, recs)
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn apts_zero_gradient_is_converged() {
        let mlp = Mlp::new(&MlpSpec::new(vec![2, 2], 0)).unwrap();
        // one sample per class, zero weights: the gradient is not zero in general,
        // but with identical inputs and balanced targets it is
        let batch = Batch::new(vec![1.0, 1.0, 1.0, 1.0], 2, vec![0, 1]).unwrap();
        let config = AptsConfig::default();
        let sub = Subdomains::new(make_partition(2, 2, 0).unwrap(), mlp.segments()).unwrap();
        let mut state = AptsState::new(&config).unwrap();
        let mut params = vec![0.0; mlp.param_count()];
        let rec = apts_step(&mlp, &sub, &mut params, &batch, &mut state, &config).unwrap();
        assert!(rec.converged);
        assert!(params.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_subdomain_precondition_is_masked_tr_step() {
        let (mlp, batch) = toy();
        let config = AptsConfig {
            subdomains: 1,
            nu: 1,
            fdl: false,
            ..AptsConfig::default()
        };
        let sub = Subdomains::new(make_partition(4, 1, 0).unwrap(), mlp.segments()).unwrap();
        let mut state = AptsState::new(&config).unwrap();
        let x0 = mlp.init_params(3).values;
        let mut params = x0.clone();
        let rec = apts_step(&mlp, &sub, &mut params, &batch, &mut state, &config).unwrap();

        // reference: one plain TR step, then one more
        let obj = ModelObjective::new(&mlp, &batch);
        let mut x = x0;
        let mut cur = Evaluation::at(&obj, &x).unwrap();
        let mut local_state = TrState::new(&config.global).unwrap();
        let mut local_cfg = config.local_config(config.global.delta_init);
        local_cfg.delta_max = config.global.delta_init;
        let first = tr_step(&obj, &mut x, &mut cur, &mut local_state, &local_cfg).unwrap();
        assert_eq!(rec.loss_half, first.loss);
        assert_eq!(rec.local_iterations, vec![1]);
    }
}
