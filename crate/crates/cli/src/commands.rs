//! The four subcommands as library functions.

use std::path::{Path, PathBuf};

use safeshed_core::ars::{self, GridObjective, IterationRecord, IterationState, TrainObserver, TrainOutcome};
use safeshed_core::parallel::{rollout_with, PolicyController, RolloutOptions, RolloutResult, ZeroController};
use safeshed_core::policy::{deserialize, serialize};
use safeshed_core::{BusId, GridModel, JobPool, PolicyParams, RewardWeights, RunningStats, Task};

use crate::export::{self, Comparison, EvalReport, TaskReport};
use crate::{CliError, ExperimentConfig};

pub const LATEST_CHECKPOINT: &str = "checkpoints/latest.ckpt";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const RUN_FILE: &str = "run.toml";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Run metadata: code version, seed and the full resolved config.
pub fn run_metadata(cfg: &ExperimentConfig, command: &str) -> String {
    let mut meta = toml::Table::new();
    meta.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    meta.insert("command".into(), command.into());
    meta.insert("seed".into(), toml::Value::Integer(cfg.seed as i64));
    let config = toml::Value::try_from(cfg).expect("config serializes");
    let mut root = toml::Table::new();
    root.insert("meta".into(), toml::Value::Table(meta));
    root.insert("config".into(), config);
    toml::to_string_pretty(&root).expect("metadata serializes")
}

/// Recover the config snapshot from a `run.toml`.
pub fn load_run_metadata(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut root: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let config = root
        .remove("config")
        .ok_or_else(|| CliError::Config(format!("{}: missing [config]", path.display())))?;
    let cfg: ExperimentConfig = config.try_into().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// "Best" prefers zero violations, then higher greedy return.
fn better(candidate: &IterationRecord, incumbent: Option<&IterationRecord>) -> bool {
    match incumbent {
        None => true,
        Some(b) => {
            let key = |r: &IterationRecord| (r.violations == 0, r.greedy_return);
            key(candidate) > key(b)
        }
    }
}

struct CheckpointWriter {
    dir: PathBuf,
    best: Option<IterationRecord>,
    quiet: bool,
    iterations: usize,
}

impl TrainObserver for CheckpointWriter {
    fn on_iteration(&mut self, s: &IterationState<'_>) -> safeshed_core::Result<()> {
        let Some(rec) = s.record else { return Ok(()) };
        let bytes = serialize(s.params, s.stats);
        let io = |e: std::io::Error| safeshed_core::Error::Training(format!("checkpoint write failed: {e}"));
        std::fs::write(self.dir.join(LATEST_CHECKPOINT), &bytes).map_err(io)?;
        if better(rec, self.best.as_ref()) {
            std::fs::write(self.dir.join(BEST_CHECKPOINT), &bytes).map_err(io)?;
            self.best = Some(rec.clone());
        }
        if !self.quiet {
            eprintln!(
                "iter {:>4}/{}  greedy return {:>11.3}  violations {:>4}  alpha {:.5}  nu {:.5}{}",
                rec.iteration,
                self.iterations,
                rec.greedy_return,
                rec.violations,
                rec.alpha,
                rec.nu,
                if rec.failed_directions > 0 { format!("  ({} directions failed)", rec.failed_directions) } else { String::new() }
            );
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub outcome: TrainOutcome,
    pub best: Option<IterationRecord>,
}

/// Train a policy and write checkpoints, history and run metadata under `out`.
pub fn train(cfg: &ExperimentConfig, out: &Path, quiet: bool) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let model = cfg.model()?;
    let objective = GridObjective::new(model, cfg.train_tasks()?, cfg.reward)?;
    let ars_cfg = cfg.ars_config()?;
    let pool = JobPool::new(cfg.workers)?;

    create_dir(&out.join("checkpoints"))?;
    write_file(&out.join(RUN_FILE), run_metadata(cfg, "train").as_bytes())?;

    let mut observer = CheckpointWriter { dir: out.to_path_buf(), best: None, quiet, iterations: ars_cfg.iterations };
    let result = ars::train(&ars_cfg, &objective, cfg.policy, &pool, &mut observer);
    let (outcome, failure) = match result {
        Ok(o) => (o, None),
        Err(f) => (*f.partial, Some(f.error)),
    };
    // Final state goes to disk even when the run aborted.
    write_file(&out.join(LATEST_CHECKPOINT), &serialize(&outcome.params, &outcome.stats))?;
    if observer.best.is_none() {
        write_file(&out.join(BEST_CHECKPOINT), &serialize(&outcome.params, &outcome.stats))?;
    }
    export::write_history(&out.join(HISTORY_FILE), &outcome.history, cfg.output.record_wall_time)?;
    if let Some(e) = failure {
        return Err(CliError::Runtime(format!(
            "training aborted after {} iterations: {e}; latest checkpoint flushed",
            outcome.iterations_completed
        )));
    }
    Ok(TrainSummary { out_dir: out.to_path_buf(), outcome, best: observer.best })
}

pub fn load_checkpoint(path: &Path, model: &GridModel) -> Result<(PolicyParams, RunningStats), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Load(format!("cannot read {}: {e}", path.display())))?;
    let (params, stats) = deserialize(&bytes).map_err(|e| CliError::Load(format!("{}: {e}", path.display())))?;
    if params.input_dim != model.observation_dim() || params.output_dim != model.action_dim() {
        return Err(CliError::Load(format!(
            "{}: policy is {}x{}, grid needs {}x{}",
            path.display(),
            params.input_dim,
            params.output_dim,
            model.observation_dim(),
            model.action_dim()
        )));
    }
    Ok((params, stats))
}

/// A task selected for evaluation and whether it is outside the training set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selected {
    pub task: Task,
    pub held_out: bool,
}

/// `all`, `train`, `held-out`, or `;`-separated `bus=B,dur=D` items.
pub fn select_tasks(cfg: &ExperimentConfig, spec: &str) -> Result<Vec<Selected>, CliError> {
    let train = cfg.train_tasks()?;
    let held = cfg.held_out_tasks()?;
    let tag = |ts: &[Task], held_out| ts.iter().map(|&task| Selected { task, held_out }).collect::<Vec<_>>();
    match spec.trim() {
        "all" => Ok([tag(&train, false), tag(&held, true)].concat()),
        "train" => Ok(tag(&train, false)),
        "held-out" => Ok(tag(&held, true)),
        list => {
            let model = cfg.model()?;
            list.split(';')
                .map(|item| {
                    let task = parse_task(item, cfg.tasks.fault_start)?;
                    task.validate(&model)?;
                    let held_out = !train.iter().any(|t| t.label() == task.label());
                    Ok(Selected { task, held_out })
                })
                .collect()
        }
    }
}

pub fn parse_task(item: &str, fault_start: f64) -> Result<Task, CliError> {
    let bad = || CliError::Config(format!("task spec {item:?}: expected bus=B,dur=D"));
    let (mut bus, mut dur) = (None, None);
    for part in item.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(bad)?;
        match k.trim() {
            "bus" => bus = Some(v.trim().parse::<u32>().map_err(|_| bad())?),
            "dur" | "duration" => dur = Some(v.trim().parse::<f64>().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    Ok(Task { fault_bus: BusId(bus.ok_or_else(bad)?), fault_start, fault_duration: dur.ok_or_else(bad)? })
}

fn run_tasks(
    model: &GridModel,
    weights: &RewardWeights,
    tasks: &[Selected],
    traj_dir: Option<&Path>,
    mut run: impl FnMut(&Task, RolloutOptions) -> RolloutResult,
) -> Result<Vec<TaskReport>, CliError> {
    if let Some(d) = traj_dir {
        create_dir(d)?;
    }
    let opts = RolloutOptions { horizon: None, retain_trajectory: true, collect_observations: false };
    tasks
        .iter()
        .map(|s| {
            let r = run(&s.task, opts);
            if let Some(why) = r.failure {
                return Err(CliError::Runtime(format!("rollout on {} failed: {why}", s.task)));
            }
            if let Some(d) = traj_dir {
                export::write_trajectory(&d.join(format!("{}.csv", s.task.label())), model, weights, &r.steps)?;
            }
            Ok(TaskReport::new(&s.task, s.held_out, r.total_return, r.total_shed, r.violation_steps, r.terminated_early))
        })
        .collect()
}

/// Greedy rollouts of a checkpoint; returns the report without writing it.
pub fn evaluate(
    cfg: &ExperimentConfig,
    params: &PolicyParams,
    stats: &RunningStats,
    name: &str,
    tasks: &[Selected],
    traj_dir: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let model = cfg.model()?;
    let rows = run_tasks(&model, &cfg.reward, tasks, traj_dir, |task, opts| {
        let mut c = PolicyController::new(params, stats, model.bounds);
        rollout_with(&model, task, &mut c, &cfg.reward, opts)
    })?;
    Ok(EvalReport::new(name, rows))
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, spec: &str, out: &Path) -> Result<EvalReport, CliError> {
    let model = cfg.model()?;
    let (params, stats) = load_checkpoint(checkpoint, &model)?;
    let tasks = select_tasks(cfg, spec)?;
    create_dir(out)?;
    let report = evaluate(cfg, &params, &stats, &checkpoint.display().to_string(), &tasks, Some(&out.join("trajectories")))?;
    report.write(out, "report")?;
    Ok(report)
}

/// Zero-action rollouts: the uncontrolled response.
pub fn baseline(cfg: &ExperimentConfig, spec: &str, out: &Path) -> Result<EvalReport, CliError> {
    let model = cfg.model()?;
    let tasks = select_tasks(cfg, spec)?;
    create_dir(out)?;
    let rows = run_tasks(&model, &cfg.reward, &tasks, Some(&out.join("baseline")), |task, opts| {
        let mut c = ZeroController { n_actions: model.action_dim() };
        rollout_with(&model, task, &mut c, &cfg.reward, opts)
    })?;
    let report = EvalReport::new("no-control", rows);
    report.write(out, "baseline")?;
    Ok(report)
}

/// Evaluate two checkpoints on the same tasks. Both use the configured reward
/// weights so returns are comparable.
pub fn compare(cfg: &ExperimentConfig, safe: &Path, standard: &Path, spec: &str, out: &Path) -> Result<Comparison, CliError> {
    let model = cfg.model()?;
    let tasks = select_tasks(cfg, spec)?;
    let (p_safe, s_safe) = load_checkpoint(safe, &model)?;
    let (p_std, s_std) = load_checkpoint(standard, &model)?;
    let cmp = Comparison {
        safe: evaluate(cfg, &p_safe, &s_safe, &safe.display().to_string(), &tasks, None)?,
        standard: evaluate(cfg, &p_std, &s_std, &standard.display().to_string(), &tasks, None)?,
    };
    create_dir(out)?;
    cmp.write_csv(&out.join("compare.csv"))?;
    write_file(&out.join("compare.txt"), cmp.to_table().as_bytes())?;
    Ok(cmp)
}
