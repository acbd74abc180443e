//! Augmented random search with barrier-shaped rewards.
//!
//! Each iteration samples `N` Gaussian directions, scores `θ ± νδ` on every
//! task, keeps the `b` best directions by `max(R+, R-)`, and moves `θ` along
//! the reward-weighted sum of their directions scaled by `α / (b σ_b)`.
//! Step size and noise then decay geometrically.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::gridsim::{GridModel, Task};
use crate::parallel::{
    job_stream, rollout_with, stream_seed, JobId, JobPool, PolicyController, RolloutJob, RolloutOptions,
    RolloutResult, Variant,
};
use crate::policy::{perturb_theta, PolicyArch, PolicyParams, RunningStats, Sign};
use crate::reward::RewardWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArsConfig {
    /// Step size α.
    pub alpha: f64,
    /// Directions sampled per iteration (N).
    pub num_directions: usize,
    /// Perturbation scale ν.
    pub noise: f64,
    /// Directions kept for the update (b).
    pub top_b: usize,
    /// Rollouts per perturbation, one per task (m).
    pub rollouts_per_direction: usize,
    /// Per-iteration decay ε applied to α and ν.
    pub decay: f64,
    /// Iterations H.
    pub iterations: usize,
    pub seed: u64,
    /// Greedy evaluation cadence, in iterations.
    pub eval_every: usize,
    pub sigma_floor: f64,
    /// Std of the Gaussian initial weights.
    pub init_scale: f64,
    /// Initial value of the output-head bias.
    pub init_output_bias: f64,
}

impl Default for ArsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            num_directions: 16,
            noise: 0.03,
            top_b: 8,
            rollouts_per_direction: 9,
            decay: 0.997,
            iterations: 300,
            seed: 0,
            eval_every: 5,
            sigma_floor: 1e-8,
            init_scale: 0.1,
            init_output_bias: 2.0,
        }
    }
}

impl ArsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_directions == 0 {
            return Err(config("num_directions must be >= 1"));
        }
        if self.top_b == 0 || self.top_b > self.num_directions {
            return Err(config(format!("top_b must be in 1..={}, got {}", self.num_directions, self.top_b)));
        }
        if self.rollouts_per_direction == 0 {
            return Err(config("rollouts_per_direction must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(config("alpha must be positive"));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(config("noise must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(config("decay must be in (0, 1]"));
        }
        if self.eval_every == 0 {
            return Err(config("eval_every must be >= 1"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(config("sigma_floor must be positive"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite() && self.init_output_bias.is_finite()) {
            return Err(config("init_scale must be finite and >= 0, init_output_bias finite"));
        }
        Ok(())
    }
}

/// Scores of one direction: mean returns of `θ + νδ` and `θ - νδ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionResult {
    pub index: usize,
    pub delta: Vec<f64>,
    pub r_plus: f64,
    pub r_minus: f64,
    pub score: f64,
}

impl DirectionResult {
    pub fn new(index: usize, delta: Vec<f64>, r_plus: f64, r_minus: f64) -> Self {
        Self { index, delta, r_plus, r_minus, score: r_plus.max(r_minus) }
    }
}

/// One greedy-evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based count of completed iterations.
    pub iteration: usize,
    /// Mean return of the unperturbed policy over the task set.
    pub greedy_return: f64,
    /// Envelope-violation steps summed over the task set.
    pub violations: usize,
    /// Step size and noise used during this iteration.
    pub alpha: f64,
    pub nu: f64,
    pub wall_seconds: f64,
    #[serde(skip)]
    pub failed_directions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<IterationRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn greedy_returns(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.greedy_return).collect()
    }
}

/// Result of a (possibly partial) training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub stats: RunningStats,
    pub history: TrainHistory,
    pub alpha: f64,
    pub nu: f64,
    pub iterations_completed: usize,
}

/// Training aborted; `partial` holds the last consistent state.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub partial: Box<TrainOutcome>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} iterations)", self.error, self.partial.iterations_completed)
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// An episodic task set the optimizer can score policies on.
pub trait Objective: Sync {
    fn num_tasks(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Episode return of `params` on task `task`. Must be a pure function of
    /// its arguments.
    fn rollout(&self, params: &PolicyParams, stats: &RunningStats, task: usize, stream: u64, collect: bool) -> RolloutResult;
}

/// The grid surrogate under a reward configuration.
#[derive(Debug, Clone)]
pub struct GridObjective {
    pub model: GridModel,
    pub tasks: Vec<Task>,
    pub weights: RewardWeights,
}

impl GridObjective {
    pub fn new(model: GridModel, tasks: Vec<Task>, weights: RewardWeights) -> Result<Self> {
        model.validate()?;
        weights.validate()?;
        if tasks.is_empty() {
            return Err(config("task set is empty"));
        }
        for t in &tasks {
            t.validate(&model)?;
        }
        Ok(Self { model, tasks, weights })
    }
}

impl Objective for GridObjective {
    fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn input_dim(&self) -> usize {
        self.model.observation_dim()
    }

    fn output_dim(&self) -> usize {
        self.model.action_dim()
    }

    fn rollout(&self, params: &PolicyParams, stats: &RunningStats, task: usize, _stream: u64, collect: bool) -> RolloutResult {
        let mut controller = PolicyController::new(params, stats, self.model.bounds);
        let opts = RolloutOptions { horizon: None, retain_trajectory: false, collect_observations: collect };
        rollout_with(&self.model, &self.tasks[task], &mut controller, &self.weights, opts)
    }
}

/// Per-iteration hook, e.g. for checkpointing.
pub trait TrainObserver {
    fn on_iteration(&mut self, _state: &IterationState<'_>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub struct IterationState<'a> {
    /// 1-based count of completed iterations.
    pub iteration: usize,
    pub params: &'a PolicyParams,
    pub stats: &'a RunningStats,
    /// Present on greedy-evaluation iterations.
    pub record: Option<&'a IterationRecord>,
}

/// `n` i.i.d. standard-normal vectors of length `n_theta`.
pub fn sample_directions<R: Rng + ?Sized>(n: usize, n_theta: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| sample_direction(n_theta, rng)).collect()
}

fn sample_direction<R: Rng + ?Sized>(n_theta: usize, rng: &mut R) -> Vec<f64> {
    (0..n_theta).map(|_| rng.sample(StandardNormal)).collect()
}

const DIRECTION_STREAM: u64 = 0xd1;
const INIT_STREAM: u64 = 0x1f;

/// Random stream owned by direction `direction` of iteration `iteration`.
pub fn direction_rng(seed: u64, iteration: usize, direction: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, &[DIRECTION_STREAM, iteration as u64, direction as u64]))
}

/// Mean of `m` returns per sign, in task order.
fn mean_return(results: &[RolloutResult]) -> f64 {
    results.iter().map(|r| r.total_return).sum::<f64>() / results.len() as f64
}

/// Score `θ ± νδ` on every task, sequentially. Returns the visited
/// observations of all `2m` rollouts alongside the result.
pub fn evaluate_direction<O: Objective + ?Sized>(
    objective: &O,
    params: &PolicyParams,
    index: usize,
    delta: &[f64],
    nu: f64,
    stats: &RunningStats,
) -> Result<(DirectionResult, Vec<Vec<f64>>)> {
    let mut observations = Vec::new();
    let mut means = [0.0; 2];
    for (slot, sign) in [Sign::Plus, Sign::Minus].into_iter().enumerate() {
        let p = params.with_theta(perturb_theta(params.theta(), delta, nu, sign)?)?;
        let mut results = Vec::with_capacity(objective.num_tasks());
        for task in 0..objective.num_tasks() {
            let r = objective.rollout(&p, stats, task, 0, true);
            if let Some(why) = &r.failure {
                return Err(Error::Training(format!("direction {index} failed on task {task}: {why}")));
            }
            results.push(r);
        }
        means[slot] = mean_return(&results);
        observations.extend(results.into_iter().flat_map(|r| r.observations));
    }
    Ok((DirectionResult::new(index, delta.to_vec(), means[0], means[1]), observations))
}

/// Best `b` directions by score (ties to the lower index) and the population
/// std of their `2b` returns, replaced by 1 when below `sigma_floor`.
pub fn select_top(results: &[DirectionResult], b: usize, sigma_floor: f64) -> Result<(Vec<&DirectionResult>, f64)> {
    if results.is_empty() {
        return Err(Error::Training("no direction results to select from".into()));
    }
    if b == 0 || b > results.len() {
        return Err(contract(format!("top_b = {b} with {} results", results.len())));
    }
    let mut order: Vec<&DirectionResult> = results.iter().collect();
    order.sort_by(|a, c| c.score.total_cmp(&a.score).then(a.index.cmp(&c.index)));
    order.truncate(b);
    let values: Vec<f64> = order.iter().flat_map(|d| [d.r_plus, d.r_minus]).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    let sigma = var.sqrt();
    let sigma = if sigma < sigma_floor || !sigma.is_finite() { 1.0 } else { sigma };
    Ok((order, sigma))
}

/// `θ + α / (b σ_b) · Σ (R+ - R-) δ`, summed in the given order.
pub fn update_weights(theta: &[f64], selected: &[&DirectionResult], alpha: f64, b: usize, sigma_b: f64) -> Result<Vec<f64>> {
    if selected.len() != b {
        return Err(contract(format!("{} directions selected, b = {b}", selected.len())));
    }
    if !(sigma_b > 0.0) {
        return Err(contract("sigma_b must be positive"));
    }
    let mut step = vec![0.0; theta.len()];
    for d in selected {
        if d.delta.len() != theta.len() {
            return Err(contract(format!("direction has {} entries, theta has {}", d.delta.len(), theta.len())));
        }
        let w = d.r_plus - d.r_minus;
        step.iter_mut().zip(&d.delta).for_each(|(s, x)| *s += w * x);
    }
    let scale = alpha / (b as f64 * sigma_b);
    let next: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t + scale * s).collect();
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("weight update produced non-finite values".into()));
    }
    Ok(next)
}

pub fn decay(alpha: f64, nu: f64, epsilon: f64) -> (f64, f64) {
    (epsilon * alpha, epsilon * nu)
}

/// Initial policy: Gaussian weights with a shifted output bias.
pub fn initial_params(cfg: &ArsConfig, arch: PolicyArch, input_dim: usize, output_dim: usize) -> Result<PolicyParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &[INIT_STREAM]));
    let mut theta = PolicyParams::random(arch, input_dim, output_dim, cfg.init_scale, &mut rng)?.into_theta();
    let n = theta.len();
    theta[n - output_dim..].iter_mut().for_each(|b| *b = cfg.init_output_bias);
    PolicyParams::new(arch, input_dim, output_dim, theta)
}

/// Run the full training loop.
pub fn train<O: Objective + ?Sized>(
    cfg: &ArsConfig,
    objective: &O,
    arch: PolicyArch,
    pool: &JobPool,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainFailure> {
    let params = match setup(cfg, objective, arch) {
        Ok(p) => p,
        Err(error) => {
            let fallback = PolicyParams::zeros(arch, objective.input_dim(), objective.output_dim().max(1))
                .unwrap_or_else(|_| PolicyParams::zeros(PolicyArch::Linear, 1, 1).expect("1x1 linear policy"));
            let stats = RunningStats::new(fallback.input_dim);
            let partial = TrainOutcome {
                params: fallback,
                stats,
                history: TrainHistory::default(),
                alpha: cfg.alpha,
                nu: cfg.noise,
                iterations_completed: 0,
            };
            return Err(TrainFailure { error, partial: Box::new(partial) });
        }
    };
    let mut state = TrainOutcome {
        stats: RunningStats::new(objective.input_dim()),
        params,
        history: TrainHistory::default(),
        alpha: cfg.alpha,
        nu: cfg.noise,
        iterations_completed: 0,
    };
    let start = Instant::now();
    for it in 0..cfg.iterations {
        if let Err(error) = iterate(cfg, objective, pool, observer, &mut state, it, start) {
            return Err(TrainFailure { error, partial: Box::new(state) });
        }
    }
    Ok(state)
}

fn setup<O: Objective + ?Sized>(cfg: &ArsConfig, objective: &O, arch: PolicyArch) -> Result<PolicyParams> {
    cfg.validate()?;
    if objective.num_tasks() != cfg.rollouts_per_direction {
        return Err(config(format!(
            "rollouts_per_direction = {} but the task set has {} tasks",
            cfg.rollouts_per_direction,
            objective.num_tasks()
        )));
    }
    initial_params(cfg, arch, objective.input_dim(), objective.output_dim())
}

fn iterate<O: Objective + ?Sized>(
    cfg: &ArsConfig,
    objective: &O,
    pool: &JobPool,
    observer: &mut dyn TrainObserver,
    state: &mut TrainOutcome,
    it: usize,
    start: Instant,
) -> Result<()> {
    let m = objective.num_tasks();
    let n_theta = state.params.n_theta();
    let deltas: Vec<Vec<f64>> =
        (0..cfg.num_directions).map(|d| sample_direction(n_theta, &mut direction_rng(cfg.seed, it, d))).collect();

    let stats = Arc::new(state.stats.clone());
    let mut jobs = Vec::with_capacity(2 * cfg.num_directions * m);
    for (d, delta) in deltas.iter().enumerate() {
        for sign in [Sign::Plus, Sign::Minus] {
            let theta = Arc::new(perturb_theta(state.params.theta(), delta, state.nu, sign)?);
            for task in 0..m {
                let id = JobId { iteration: it, direction: d, variant: Variant::Perturbed(sign), task };
                jobs.push(RolloutJob { id, theta: theta.clone(), stats: stats.clone(), stream: job_stream(cfg.seed, &id) });
            }
        }
    }
    let template = &state.params;
    let results = pool.run(&jobs, |job| match template.with_theta(job.theta.as_ref().clone()) {
        Ok(p) => objective.rollout(&p, &job.stats, job.id.task, job.stream, true),
        Err(e) => RolloutResult::failed(Some(job.id), e.to_string()),
    });

    let mut directions = Vec::with_capacity(cfg.num_directions);
    let mut next_stats = state.stats.clone();
    let mut failed = 0;
    for (d, (chunk, delta)) in results.chunks(2 * m).zip(deltas).enumerate() {
        if chunk.iter().any(RolloutResult::is_failed) {
            failed += 1;
            continue;
        }
        let (plus, minus) = chunk.split_at(m);
        directions.push(DirectionResult::new(d, delta, mean_return(plus), mean_return(minus)));
        for obs in chunk.iter().flat_map(|r| &r.observations) {
            next_stats.push(obs)?;
        }
    }
    if directions.is_empty() {
        let why = results.iter().find_map(|r| r.failure.clone()).unwrap_or_default();
        return Err(Error::Training(format!("iteration {}: every direction failed ({why})", it + 1)));
    }

    let b = cfg.top_b.min(directions.len());
    let (selected, sigma_b) = select_top(&directions, b, cfg.sigma_floor)?;
    let theta = update_weights(state.params.theta(), &selected, state.alpha, b, sigma_b)?;
    let (alpha_used, nu_used) = (state.alpha, state.nu);
    state.params = state.params.with_theta(theta)?;
    (state.alpha, state.nu) = decay(state.alpha, state.nu, cfg.decay);
    state.stats = next_stats;
    state.iterations_completed = it + 1;

    let due = (it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iterations;
    let record = if due {
        let (greedy_return, violations) = greedy_eval(cfg.seed, it, objective, &state.params, &state.stats, pool)?;
        state.history.records.push(IterationRecord {
            iteration: it + 1,
            greedy_return,
            violations,
            alpha: alpha_used,
            nu: nu_used,
            wall_seconds: start.elapsed().as_secs_f64(),
            failed_directions: failed,
        });
        state.history.records.last()
    } else {
        None
    };
    observer.on_iteration(&IterationState { iteration: it + 1, params: &state.params, stats: &state.stats, record })
}

/// Mean return and summed violation steps of the unperturbed policy.
fn greedy_eval<O: Objective + ?Sized>(
    seed: u64,
    it: usize,
    objective: &O,
    params: &PolicyParams,
    stats: &RunningStats,
    pool: &JobPool,
) -> Result<(f64, usize)> {
    let theta = Arc::new(params.theta().to_vec());
    let stats = Arc::new(stats.clone());
    let jobs: Vec<RolloutJob> = (0..objective.num_tasks())
        .map(|task| {
            let id = JobId { iteration: it, direction: 0, variant: Variant::Current, task };
            RolloutJob { id, theta: theta.clone(), stats: stats.clone(), stream: job_stream(seed, &id) }
        })
        .collect();
    let results = pool.run(&jobs, |job| objective.rollout(params, &job.stats, job.id.task, job.stream, false));
    if let Some(why) = results.iter().find_map(|r| r.failure.as_ref()) {
        return Err(Error::Training(format!("greedy evaluation failed: {why}")));
    }
    Ok((mean_return(&results), results.iter().map(|r| r.violation_steps).sum()))
}
