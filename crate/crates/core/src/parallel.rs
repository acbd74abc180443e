//! Episode rollouts and the deterministic job pool that runs them.
//!
//! A job is a pure function of its descriptor and immutable snapshots of the
//! weights and normalization statistics, so the pool may execute jobs in any
//! order on any thread. Results always come back in submission order.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridsim::{self, check_violation, ActionBounds, GridModel, StepInfo, Task};
use crate::policy::{normalize_into, policy_forward, squash_action, HiddenState, PolicyParams, RunningStats, Sign};
use crate::reward::{combined_reward, RewardBreakdown, RewardWeights};

/// Which policy a job evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Perturbed(Sign),
    /// The unperturbed (greedy) policy.
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobId {
    pub iteration: usize,
    pub direction: usize,
    pub variant: Variant,
    pub task: usize,
}

#[derive(Debug, Clone)]
pub struct RolloutJob {
    pub id: JobId,
    pub theta: Arc<Vec<f64>>,
    pub stats: Arc<RunningStats>,
    /// Seed for any randomness inside the rollout.
    pub stream: u64,
}

/// One step of a retained trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub info: StepInfo,
    pub action: Vec<f64>,
    pub reward: RewardBreakdown,
    /// Envelope threshold at `info.t`, absent up to clearance.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutResult {
    pub job: Option<JobId>,
    /// Sum of combined rewards over the episode.
    pub total_return: f64,
    /// Populated only when trajectory retention is requested.
    pub steps: Vec<StepRecord>,
    /// Post-step observations, for the running statistics.
    pub observations: Vec<Vec<f64>>,
    /// Violating (bus, step) samples.
    pub violation_steps: usize,
    pub total_shed: f64,
    pub num_steps: usize,
    /// Ended by the failed-recovery penalty rather than the horizon.
    pub terminated_early: bool,
    pub failure: Option<String>,
}

impl RolloutResult {
    pub fn failed(job: Option<JobId>, why: impl Into<String>) -> Self {
        Self { job, failure: Some(why.into()), ..Default::default() }
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    /// Simulated seconds; `None` uses the model horizon.
    pub horizon: Option<f64>,
    pub retain_trajectory: bool,
    pub collect_observations: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self { horizon: None, retain_trajectory: false, collect_observations: true }
    }
}

/// Anything that turns observations into shed commands.
pub trait Controller {
    fn reset(&mut self);
    /// `t` is the time at the start of the action interval.
    fn act(&mut self, t: f64, obs: &[f64]) -> Result<Vec<f64>>;
}

/// Normalize with frozen stats, run the network, squash into bounds.
pub struct PolicyController<'a> {
    params: &'a PolicyParams,
    stats: &'a RunningStats,
    std: Vec<f64>,
    bounds: ActionBounds,
    hidden: HiddenState,
    scratch: Vec<f64>,
}

impl<'a> PolicyController<'a> {
    pub fn new(params: &'a PolicyParams, stats: &'a RunningStats, bounds: ActionBounds) -> Self {
        Self {
            params,
            stats,
            std: stats.std(),
            bounds,
            hidden: params.initial_hidden(),
            scratch: vec![0.0; stats.dim()],
        }
    }
}

impl Controller for PolicyController<'_> {
    fn reset(&mut self) {
        self.hidden.reset();
    }

    fn act(&mut self, _t: f64, obs: &[f64]) -> Result<Vec<f64>> {
        normalize_into(obs, self.stats, &self.std, &mut self.scratch)?;
        let raw = policy_forward(self.params, &self.scratch, &mut self.hidden)?;
        Ok(squash_action(&raw, &self.bounds))
    }
}

/// No emergency control: every command is zero.
pub struct ZeroController {
    pub n_actions: usize,
}

impl Controller for ZeroController {
    fn reset(&mut self) {}

    fn act(&mut self, _t: f64, _obs: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.n_actions])
    }
}

/// Adapter for scripted controllers.
pub struct FnController<F>(pub F);

impl<F: FnMut(f64, &[f64]) -> Vec<f64>> Controller for FnController<F> {
    fn reset(&mut self) {}

    fn act(&mut self, t: f64, obs: &[f64]) -> Result<Vec<f64>> {
        Ok((self.0)(t, obs))
    }
}

/// Run one episode of `task` under `controller`.
pub fn rollout_with(
    model: &GridModel,
    task: &Task,
    controller: &mut dyn Controller,
    weights: &RewardWeights,
    opts: RolloutOptions,
) -> RolloutResult {
    match try_rollout(model, task, controller, weights, opts) {
        Ok(r) => r,
        Err(e) => RolloutResult::failed(None, e.to_string()),
    }
}

fn try_rollout(
    model: &GridModel,
    task: &Task,
    controller: &mut dyn Controller,
    weights: &RewardWeights,
    opts: RolloutOptions,
) -> Result<RolloutResult> {
    let horizon = opts.horizon.unwrap_or(model.horizon).min(model.horizon);
    let max_steps = (horizon / model.action_interval() - gridsim::TIME_EPS).ceil().max(0.0) as usize;
    let mut out = RolloutResult::default();
    if max_steps == 0 {
        return Ok(out);
    }

    controller.reset();
    let (mut state, obs) = gridsim::reset(model, task, 0)?;
    let mut obs = obs.0;
    let mut infos: Vec<StepInfo> = Vec::new();
    for _ in 0..max_steps {
        let action = controller.act(state.t, &obs)?;
        let info = gridsim::step_in_place(model, &mut state, &action)?;
        let reward = combined_reward(&info, weights);
        if !reward.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite reward at t = {}", info.t)));
        }
        out.total_return += reward.total;
        out.total_shed += info.shed_amounts.iter().sum::<f64>();
        out.num_steps += 1;
        obs.clear();
        obs.extend_from_slice(&info.voltages);
        obs.extend_from_slice(&info.load_fractions);
        if opts.collect_observations {
            out.observations.push(obs.clone());
        }
        let done = info.terminated;
        if opts.retain_trajectory {
            let threshold = (info.t > info.t_clear).then(|| model.envelope.threshold_at_offset(info.t - info.t_clear));
            out.steps.push(StepRecord { info: info.clone(), action, reward, threshold });
        }
        if done {
            out.terminated_early = info.t + gridsim::TIME_EPS < model.horizon;
        }
        infos.push(info);
        if done {
            break;
        }
    }
    out.violation_steps = check_violation(&infos, &model.envelope).total_violation_steps;
    Ok(out)
}

/// Greedy rollout of `params` with frozen `stats`, horizon in seconds.
pub fn rollout(
    model: &GridModel,
    task: &Task,
    params: &PolicyParams,
    stats: &RunningStats,
    bounds: ActionBounds,
    weights: &RewardWeights,
    horizon: f64,
) -> RolloutResult {
    let mut controller = PolicyController::new(params, stats, bounds);
    let opts = RolloutOptions { horizon: Some(horizon), retain_trajectory: true, collect_observations: true };
    rollout_with(model, task, &mut controller, weights, opts)
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based stream id: a pure function of the seed and the coordinates.
pub fn stream_seed(seed: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(mix64(seed ^ 0x9e37_79b9_7f4a_7c15), |acc, &c| {
        mix64(acc.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(mix64(c)))
    })
}

pub fn job_stream(seed: u64, id: &JobId) -> u64 {
    let variant = match id.variant {
        Variant::Perturbed(Sign::Plus) => 0,
        Variant::Perturbed(Sign::Minus) => 1,
        Variant::Current => 2,
    };
    stream_seed(seed, &[id.iteration as u64, id.direction as u64, variant, id.task as u64])
}

/// Fixed-size worker pool for rollout batches.
pub struct JobPool {
    workers: usize,
    pool: rayon::ThreadPool,
}

impl JobPool {
    pub fn new(workers: usize) -> Result<Self> {
        let workers = if workers == 0 { default_workers() } else { workers };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("rollout-{i}"))
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Self { workers, pool })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Execute every job; slot `i` of the output belongs to `jobs[i]`. A job
    /// that panics yields a failed result instead of poisoning the batch.
    pub fn run<F>(&self, jobs: &[RolloutJob], exec: F) -> Vec<RolloutResult>
    where
        F: Fn(&RolloutJob) -> RolloutResult + Sync,
    {
        let run_one = |job: &RolloutJob| {
            let mut r = catch_unwind(AssertUnwindSafe(|| exec(job)))
                .unwrap_or_else(|p| RolloutResult::failed(None, panic_message(&p)));
            r.job = Some(job.id);
            r
        };
        if self.workers == 1 {
            return jobs.iter().map(run_one).collect();
        }
        self.pool.install(|| jobs.par_iter().map(run_one).collect())
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("rollout panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("rollout panicked: {s}")
    } else {
        "rollout panicked".to_string()
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// One-shot convenience over [`JobPool::run`].
pub fn run_jobs<F>(jobs: &[RolloutJob], worker_count: usize, exec: F) -> Result<Vec<RolloutResult>>
where
    F: Fn(&RolloutJob) -> RolloutResult + Sync,
{
    if worker_count == 0 {
        return Err(Error::Contract("worker_count must be >= 1".into()));
    }
    Ok(JobPool::new(worker_count)?.run(jobs, exec))
}
