//! CSV and report writers. Column sets and order are fixed.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use safeshed_core::ars::TrainHistory;
use safeshed_core::parallel::StepRecord;
use safeshed_core::{GridModel, RewardWeights, Task};

use crate::CliError;

pub const HISTORY_COLUMNS: [&str; 6] = ["iteration", "greedy_return", "violations", "alpha", "nu", "wall_seconds"];

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Runtime(format!("writing {}: {e}", path.display()))
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

pub fn write_history(path: &Path, history: &TrainHistory, record_wall_time: bool) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(HISTORY_COLUMNS).map_err(|e| csv_err(path, e))?;
    for r in &history.records {
        let wall = if record_wall_time { r.wall_seconds } else { 0.0 };
        w.write_record([
            r.iteration.to_string(),
            r.greedy_return.to_string(),
            r.violations.to_string(),
            r.alpha.to_string(),
            r.nu.to_string(),
            wall.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// `t, V_bus*, L_bus*, a_bus*, r, B, R, threshold`.
pub fn trajectory_columns(model: &GridModel) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    cols.extend(model.monitored_buses.iter().map(|b| format!("V_bus{b}")));
    cols.extend(model.load_buses.iter().map(|b| format!("L_bus{b}")));
    cols.extend(model.load_buses.iter().map(|b| format!("a_bus{b}")));
    cols.extend(["r", "B", "R", "threshold"].map(String::from));
    cols
}

/// `r` is the base reward, `B` the raw barrier and `R = r - c4 B`.
pub fn write_trajectory(path: &Path, model: &GridModel, weights: &RewardWeights, steps: &[StepRecord]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(trajectory_columns(model)).map_err(|e| csv_err(path, e))?;
    for s in steps {
        let mut row = vec![s.info.t.to_string()];
        row.extend(s.info.voltages.iter().map(f64::to_string));
        row.extend(s.info.load_fractions.iter().map(f64::to_string));
        row.extend(s.action.iter().map(f64::to_string));
        row.push(s.reward.base(weights).to_string());
        row.push(s.reward.barrier_term.to_string());
        row.push(s.reward.total.to_string());
        row.push(s.threshold.map_or_else(String::new, |x| x.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub fault_bus: u32,
    pub fault_duration: f64,
    pub held_out: bool,
    pub episode_return: f64,
    /// Load shed over the episode, p.u.
    pub total_shed: f64,
    pub violation_steps: usize,
    /// No envelope violation and no failed-recovery termination.
    pub recovered: bool,
}

impl TaskReport {
    pub fn new(task: &Task, held_out: bool, episode_return: f64, total_shed: f64, violation_steps: usize, terminated_early: bool) -> Self {
        Self {
            task: task.label(),
            fault_bus: task.fault_bus.0,
            fault_duration: task.fault_duration,
            held_out,
            episode_return,
            total_shed,
            violation_steps,
            recovered: violation_steps == 0 && !terminated_early,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub rows: Vec<TaskReport>,
    pub passed: usize,
    pub total: usize,
}

impl EvalReport {
    pub fn new(policy: impl Into<String>, rows: Vec<TaskReport>) -> Self {
        let passed = rows.iter().filter(|r| r.recovered).count();
        let total = rows.len();
        Self { policy: policy.into(), rows, passed, total }
    }

    pub fn total_violations(&self) -> usize {
        self.rows.iter().map(|r| r.violation_steps).sum()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("policy: {}\n", self.policy);
        let _ = writeln!(s, "{:<16} {:>8} {:>12} {:>10} {:>10} {:>9}", "task", "held-out", "return", "shed_pu", "violations", "recovered");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>12.4} {:>10.4} {:>10} {:>9}",
                r.task,
                if r.held_out { "yes" } else { "" },
                r.episode_return,
                r.total_shed,
                r.violation_steps,
                if r.recovered { "yes" } else { "NO" }
            );
        }
        let _ = writeln!(s, "passed {}/{}", self.passed, self.total);
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), CliError> {
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_table()).map_err(|e| CliError::io(&txt, e))?;
        let json = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&json, body + "\n").map_err(|e| CliError::io(&json, e))
    }
}

pub const COMPARE_COLUMNS: [&str; 10] = [
    "task",
    "held_out",
    "safe_return",
    "standard_return",
    "safe_shed",
    "standard_shed",
    "safe_violations",
    "standard_violations",
    "violates",
    "fewer_violations",
];

/// Side-by-side view of two evaluations over the same tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub safe: EvalReport,
    pub standard: EvalReport,
}

impl Comparison {
    fn rows(&self) -> impl Iterator<Item = (&TaskReport, &TaskReport)> {
        self.safe.rows.iter().zip(&self.standard.rows)
    }

    fn flags(a: &TaskReport, b: &TaskReport) -> (&'static str, &'static str) {
        let violates = match (a.violation_steps > 0, b.violation_steps > 0) {
            (false, false) => "none",
            (true, false) => "safe",
            (false, true) => "standard",
            (true, true) => "both",
        };
        let fewer = match a.violation_steps.cmp(&b.violation_steps) {
            std::cmp::Ordering::Less => "safe",
            std::cmp::Ordering::Greater => "standard",
            std::cmp::Ordering::Equal => "tie",
        };
        (violates, fewer)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CliError> {
        let mut w = writer(path)?;
        w.write_record(COMPARE_COLUMNS).map_err(|e| csv_err(path, e))?;
        for (a, b) in self.rows() {
            let (violates, fewer) = Self::flags(a, b);
            w.write_record([
                a.task.clone(),
                a.held_out.to_string(),
                a.episode_return.to_string(),
                b.episode_return.to_string(),
                a.total_shed.to_string(),
                b.total_shed.to_string(),
                a.violation_steps.to_string(),
                b.violation_steps.to_string(),
                violates.to_string(),
                fewer.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("safe: {}\nstandard: {}\n", self.safe.policy, self.standard.policy);
        let _ = writeln!(
            s,
            "{:<16} {:>11} {:>11} {:>9} {:>9} {:>6} {:>6} {:>9} {:>8}",
            "task", "ret_safe", "ret_std", "shed_safe", "shed_std", "v_safe", "v_std", "violates", "fewer"
        );
        for (a, b) in self.rows() {
            let (violates, fewer) = Self::flags(a, b);
            let name = if a.held_out { format!("{}*", a.task) } else { a.task.clone() };
            let _ = writeln!(
                s,
                "{:<16} {:>11.3} {:>11.3} {:>9.3} {:>9.3} {:>6} {:>6} {:>9} {:>8}",
                name, a.episode_return, b.episode_return, a.total_shed, b.total_shed, a.violation_steps, b.violation_steps, violates, fewer
            );
        }
        let _ = writeln!(
            s,
            "total violation steps: safe {}, standard {} (* = held out)",
            self.safe.total_violations(),
            self.standard.total_violations()
        );
        s
    }
}
