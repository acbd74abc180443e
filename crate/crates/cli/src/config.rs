//! Experiment configuration (TOML).
//!
//! Precedence, lowest first: built-in defaults, the config file,
//! `SAFESHED__SECTION__KEY` environment variables, `--set section.key=value`
//! flags, and finally the dedicated `--seed/--workers/--out` flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use safeshed_core::ars::ArsConfig;
use safeshed_core::gridsim::{make_task_set, DynamicsParams};
use safeshed_core::{BusId, GridModel, PolicyArch, RewardWeights, Task};

use crate::CliError;

/// Environment variable prefix for config overrides.
pub const ENV_PREFIX: &str = "SAFESHED__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Rollout workers; 0 uses every available core.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub grid: GridSection,
    pub reward: RewardWeights,
    pub ars: ArsSection,
    pub policy: PolicyArch,
    pub tasks: TaskSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            out_dir: PathBuf::from("runs/default"),
            grid: GridSection::default(),
            reward: RewardWeights::default(),
            ars: ArsSection::default(),
            policy: PolicyArch::default(),
            tasks: TaskSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub dt: f64,
    pub substeps: usize,
    pub horizon: f64,
    pub action_epsilon: f64,
    /// Initial load at buses 4, 7, 18 in p.u.
    pub load_base: Vec<f64>,
    pub dynamics: DynamicsParams,
}

impl Default for GridSection {
    fn default() -> Self {
        let m = GridModel::ieee39_surrogate();
        Self {
            dt: m.dt,
            substeps: m.substeps,
            horizon: m.horizon,
            action_epsilon: m.action_epsilon,
            load_base: m.load_base,
            dynamics: m.dynamics,
        }
    }
}

/// ARS hyperparameters. The rollout count per direction is the size of the
/// training task set and the seed is the top-level one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArsSection {
    pub alpha: f64,
    pub num_directions: usize,
    pub noise: f64,
    pub top_b: usize,
    pub decay: f64,
    pub iterations: usize,
    pub eval_every: usize,
    pub sigma_floor: f64,
    pub init_scale: f64,
    pub init_output_bias: f64,
}

impl Default for ArsSection {
    fn default() -> Self {
        let a = ArsConfig::default();
        Self {
            alpha: a.alpha,
            num_directions: a.num_directions,
            noise: a.noise,
            top_b: a.top_b,
            decay: a.decay,
            iterations: a.iterations,
            eval_every: a.eval_every,
            sigma_floor: a.sigma_floor,
            init_scale: a.init_scale,
            init_output_bias: a.init_output_bias,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub bus: u32,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// Fault onset, seconds.
    pub fault_start: f64,
    pub train_buses: Vec<u32>,
    pub train_durations: Vec<f64>,
    pub held_out: Vec<TaskSpec>,
    /// Reject held-out tasks that also appear in the training set.
    pub disjoint: bool,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            fault_start: Task::DEFAULT_FAULT_START,
            train_buses: vec![4, 15, 21],
            train_durations: vec![0.0, 0.15, 0.28],
            held_out: vec![TaskSpec { bus: 7, duration: 0.15 }],
            disjoint: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Write elapsed wall time into history.csv; disable for byte-stable output.
    pub record_wall_time: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { record_wall_time: true }
    }
}

impl ExperimentConfig {
    /// Parse a config file, then apply environment and `--set` overrides.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let origin = path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
        let mut overrides: Vec<(String, String)> = env_overrides(std::env::vars());
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {s:?}")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_toml_with_overrides(&text, &origin, &overrides)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        Self::from_toml_with_overrides(text, "<string>", &[])
    }

    /// `overrides` are dotted keys with TOML-literal values; bare words are
    /// taken as strings.
    pub fn from_toml_with_overrides(text: &str, origin: &str, overrides: &[(String, String)]) -> Result<Self, CliError> {
        // Parsing the text directly keeps line numbers in the diagnostics.
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        if overrides.is_empty() {
            cfg.validate()?;
            return Ok(cfg);
        }
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        for (key, raw) in overrides {
            set_dotted(&mut table, key, parse_value(raw))?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Config(format!("override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model(&self) -> Result<GridModel, CliError> {
        let mut m = GridModel::ieee39_surrogate();
        let g = &self.grid;
        m.dt = g.dt;
        m.substeps = g.substeps;
        m.horizon = g.horizon;
        m.action_epsilon = g.action_epsilon;
        m.load_base = g.load_base.clone();
        m.dynamics = g.dynamics;
        m.validate()?;
        Ok(m)
    }

    pub fn train_tasks(&self) -> Result<Vec<Task>, CliError> {
        let buses: Vec<BusId> = self.tasks.train_buses.iter().map(|&b| BusId(b)).collect();
        Ok(make_task_set(&self.model()?, &buses, &self.tasks.train_durations, self.tasks.fault_start)?)
    }

    pub fn held_out_tasks(&self) -> Result<Vec<Task>, CliError> {
        let model = self.model()?;
        self.tasks
            .held_out
            .iter()
            .map(|s| {
                let t = Task { fault_bus: BusId(s.bus), fault_start: self.tasks.fault_start, fault_duration: s.duration };
                t.validate(&model)?;
                Ok(t)
            })
            .collect()
    }

    pub fn ars_config(&self) -> Result<ArsConfig, CliError> {
        let a = &self.ars;
        let cfg = ArsConfig {
            alpha: a.alpha,
            num_directions: a.num_directions,
            noise: a.noise,
            top_b: a.top_b,
            rollouts_per_direction: self.train_tasks()?.len(),
            decay: a.decay,
            iterations: a.iterations,
            seed: self.seed,
            eval_every: a.eval_every,
            sigma_floor: a.sigma_floor,
            init_scale: a.init_scale,
            init_output_bias: a.init_output_bias,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.reward.validate()?;
        if let PolicyArch::Lstm { hidden_size: 0 } = self.policy {
            return Err(CliError::Config("policy.hidden_size must be >= 1".into()));
        }
        let train = self.train_tasks()?;
        let held = self.held_out_tasks()?;
        if self.tasks.disjoint {
            let seen: BTreeSet<String> = train.iter().map(|t| t.label()).collect();
            if let Some(t) = held.iter().find(|t| seen.contains(&t.label())) {
                return Err(CliError::Config(format!("held-out task {t} is also a training task")));
            }
        }
        self.ars_config()?;
        Ok(())
    }
}

/// `SAFESHED__ARS__ALPHA=0.05` becomes `("ars.alpha", "0.05")`.
pub fn env_overrides(vars: impl Iterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.split("__").map(str::to_ascii_lowercase).collect::<Vec<_>>().join("."), v))
        })
        .collect();
    out.sort();
    out
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t.remove("v").expect("probe key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p:?} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
