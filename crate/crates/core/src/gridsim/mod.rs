//! Surrogate dynamic grid environment reproducing fault-induced delayed
//! voltage recovery (FIDVR) at a handful of monitored buses.
//!
//! Each monitored bus carries a voltage magnitude `V` and a stalled-motor
//! drag state `D`. While the fault is applied the voltage is pinned at
//! `V_nom - dip(fault_bus, bus)`. Drag accumulates whenever the voltage sits
//! below `V_stall` and bleeds off once it rises above `V_rec`:
//!
//! ```text
//! D' = D + dt * (k_s * max(0, V_stall - V) - k_d * max(0, V - V_rec) * D)
//! V' = V + dt * (k_r * (V_nom - V) - k_L * L * D - sum_j c_ij * (V - V_j))
//! ```
//!
//! `L` is the remaining load fraction at load buses and zero elsewhere, so
//! shedding load is the only lever that weakens the drag term.

mod envelope;
pub mod topology;

use serde::{Deserialize, Serialize};

pub use envelope::{
    check_violation, envelope_threshold, SafetyEnvelope, ViolationPoint, ViolationReport,
    RECOVERY_BREAKPOINTS,
};
pub(crate) use envelope::{threshold_in, TIME_EPS};

use crate::error::{config, contract, Error, Result};
use crate::reward;

/// Bus number in the IEEE 39-bus numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub u32);

impl std::fmt::Display for BusId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One fault scenario: a self-clearing short circuit at `fault_bus`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub fault_bus: BusId,
    /// Seconds.
    pub fault_start: f64,
    /// Seconds; zero means a no-fault episode.
    pub fault_duration: f64,
}

impl Task {
    pub const DEFAULT_FAULT_START: f64 = 1.0;

    pub fn new(fault_bus: BusId, fault_duration: f64) -> Self {
        Self { fault_bus, fault_start: Self::DEFAULT_FAULT_START, fault_duration }
    }

    /// Fault clearance instant.
    pub fn clearance_time(&self) -> f64 {
        self.fault_start + self.fault_duration
    }

    pub fn label(&self) -> String {
        format!("bus{}_dur{:.2}", self.fault_bus, self.fault_duration)
    }

    pub fn validate(&self, model: &GridModel) -> Result<()> {
        if !(self.fault_duration >= 0.0) || !self.fault_duration.is_finite() {
            return Err(config(format!("fault duration must be >= 0, got {}", self.fault_duration)));
        }
        if !(self.fault_start > 0.0) || !self.fault_start.is_finite() {
            return Err(config(format!("fault start must be > 0, got {}", self.fault_start)));
        }
        model.fault_index(self.fault_bus)?;
        Ok(())
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "bus={},dur={}", self.fault_bus, self.fault_duration)
    }
}

/// Cartesian product of fault buses and durations, bus-major.
pub fn make_task_set(
    model: &GridModel,
    buses: &[BusId],
    durations: &[f64],
    fault_start: f64,
) -> Result<Vec<Task>> {
    if buses.is_empty() || durations.is_empty() {
        return Err(config("task set needs at least one bus and one duration"));
    }
    let mut tasks = Vec::with_capacity(buses.len() * durations.len());
    for &bus in buses {
        for &d in durations {
            let task = Task { fault_bus: bus, fault_start, fault_duration: d };
            task.validate(model)?;
            tasks.push(task);
        }
    }
    Ok(tasks)
}

/// Admissible per-bus shed command range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self { a_min: -0.2, a_max: 0.0 }
    }
}

impl ActionBounds {
    pub fn contains(&self, a: f64) -> bool {
        a >= self.a_min && a <= self.a_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsParams {
    /// Nominal voltage, p.u.
    pub v_nom: f64,
    /// k_r, 1/s.
    pub recovery_rate: f64,
    /// k_L, p.u./s per unit drag.
    pub drag_gain: f64,
    /// k_s, drag per (p.u. * s).
    pub stall_rate: f64,
    /// k_d, 1/(p.u. * s).
    pub drag_decay: f64,
    pub v_stall: f64,
    pub v_rec: f64,
}

impl Default for DynamicsParams {
    // Calibrated so that: an uncontrolled 0.15 s fault at bus 4 stalls below
    // 0.95 p.u.; shedding at full rate from clearance recovers every task
    // within 1.5 s; a zero-duration fault never leaves nominal voltage.
    fn default() -> Self {
        Self {
            v_nom: 1.0,
            recovery_rate: 35.0,
            drag_gain: 16.0,
            stall_rate: 4.0,
            drag_decay: 30.0,
            v_stall: 0.75,
            v_rec: 0.92,
        }
    }
}

/// Immutable description of the surrogate grid, shared by all rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    pub load_buses: Vec<BusId>,
    pub monitored_buses: Vec<BusId>,
    pub fault_buses: Vec<BusId>,
    /// Initial active load at each load bus, p.u. on a 100 MVA base.
    pub load_base: Vec<f64>,
    /// Symmetric, zero diagonal, indexed by monitored-bus position.
    pub coupling: Vec<Vec<f64>>,
    /// `dip_depth[f][i]`: voltage drop at monitored bus `i` during a fault at
    /// `fault_buses[f]`.
    pub dip_depth: Vec<Vec<f64>>,
    pub dynamics: DynamicsParams,
    /// Euler step, seconds.
    pub dt: f64,
    /// Euler steps per action interval.
    pub substeps: usize,
    /// Episode length, seconds.
    pub horizon: f64,
    /// Shed commands smaller in magnitude than this count as "no shed".
    pub action_epsilon: f64,
    pub bounds: ActionBounds,
    pub envelope: SafetyEnvelope,
}

impl Default for GridModel {
    fn default() -> Self {
        Self::ieee39_surrogate()
    }
}

impl GridModel {
    /// Default surrogate: loads at buses 4, 7, 18; voltages monitored at
    /// 4, 7, 8, 18; faults allowed at 4, 7, 15, 21.
    pub fn ieee39_surrogate() -> Self {
        let load_buses = vec![BusId(4), BusId(7), BusId(18)];
        let monitored_buses = vec![BusId(4), BusId(7), BusId(8), BusId(18)];
        let fault_buses = vec![BusId(4), BusId(7), BusId(15), BusId(21)];
        let dynamics = DynamicsParams::default();
        let coupling = default_coupling(&monitored_buses);
        let dip_depth = default_dip_depth(&fault_buses, &monitored_buses, dynamics.v_nom);
        Self {
            load_buses,
            monitored_buses,
            fault_buses,
            load_base: vec![5.0, 2.338, 1.58],
            coupling,
            dip_depth,
            dynamics,
            dt: 0.02,
            substeps: 5,
            horizon: 10.0,
            action_epsilon: 1e-3,
            bounds: ActionBounds::default(),
            envelope: SafetyEnvelope::default(),
        }
    }

    pub fn action_interval(&self) -> f64 {
        self.dt * self.substeps as f64
    }

    pub fn observation_dim(&self) -> usize {
        self.monitored_buses.len() + self.load_buses.len()
    }

    pub fn action_dim(&self) -> usize {
        self.load_buses.len()
    }

    /// Number of action intervals in a full episode.
    pub fn horizon_steps(&self) -> usize {
        (self.horizon / self.action_interval() - TIME_EPS).ceil().max(0.0) as usize
    }

    pub fn fault_index(&self, bus: BusId) -> Result<usize> {
        self.fault_buses
            .iter()
            .position(|&b| b == bus)
            .ok_or_else(|| config(format!("bus {bus} is not an allowed fault location")))
    }

    pub fn validate(&self) -> Result<()> {
        let n_mon = self.monitored_buses.len();
        if n_mon == 0 || self.load_buses.is_empty() || self.fault_buses.is_empty() {
            return Err(config("grid model needs load, monitored and fault buses"));
        }
        if self.load_base.len() != self.load_buses.len() {
            return Err(config("load_base must have one entry per load bus"));
        }
        if self.load_base.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(config("load_base entries must be positive"));
        }
        for &b in &self.load_buses {
            if !self.monitored_buses.contains(&b) {
                return Err(config(format!("load bus {b} must also be monitored")));
            }
        }
        if self.coupling.len() != n_mon || self.coupling.iter().any(|r| r.len() != n_mon) {
            return Err(config(format!("coupling must be {n_mon}x{n_mon}")));
        }
        for i in 0..n_mon {
            if self.coupling[i][i] != 0.0 {
                return Err(config("coupling diagonal must be zero"));
            }
            for j in 0..n_mon {
                let c = self.coupling[i][j];
                if !(c >= 0.0) || !c.is_finite() {
                    return Err(config("coupling weights must be finite and nonnegative"));
                }
                if c != self.coupling[j][i] {
                    return Err(config("coupling must be symmetric"));
                }
            }
        }
        if self.dip_depth.len() != self.fault_buses.len()
            || self.dip_depth.iter().any(|r| r.len() != n_mon)
        {
            return Err(config("dip_depth must have one row per fault bus and one column per monitored bus"));
        }
        if self.dip_depth.iter().flatten().any(|&d| !(0.0..1.0).contains(&d)) {
            return Err(config("dip_depth entries must lie in [0, 1)"));
        }
        let p = &self.dynamics;
        if !(p.v_stall < p.v_rec && p.v_rec <= p.v_nom) {
            return Err(config("dynamics require v_stall < v_rec <= v_nom"));
        }
        for (name, r) in [
            ("recovery_rate", p.recovery_rate),
            ("drag_gain", p.drag_gain),
            ("stall_rate", p.stall_rate),
            ("drag_decay", p.drag_decay),
        ] {
            if !(r > 0.0) || !r.is_finite() {
                return Err(config(format!("{name} must be > 0")));
            }
        }
        if !(self.dt > 0.0) || self.substeps == 0 || !(self.horizon >= 0.0) {
            return Err(config("dt, substeps and horizon must be positive"));
        }
        if !(self.action_epsilon >= 0.0) {
            return Err(config("action_epsilon must be >= 0"));
        }
        if !(self.bounds.a_min < self.bounds.a_max) {
            return Err(config("action bounds require a_min < a_max"));
        }
        self.envelope.validate()
    }

    fn load_position(&self, monitored: usize) -> Option<usize> {
        let bus = self.monitored_buses[monitored];
        self.load_buses.iter().position(|&b| b == bus)
    }
}

/// Coupling weight `2 / hops` between distinct monitored buses.
pub fn default_coupling(monitored: &[BusId]) -> Vec<Vec<f64>> {
    monitored
        .iter()
        .map(|&a| {
            let dist = topology::hop_distances(a);
            monitored
                .iter()
                .map(|&b| match dist.get(&b) {
                    Some(&h) if h > 0 => 2.0 / h as f64,
                    _ => 0.0,
                })
                .collect()
        })
        .collect()
}

/// Faulted-bus voltage falls to 0.3 p.u., rising 0.05 p.u. per hop away from
/// the fault and saturating at 0.55 p.u.
pub fn default_dip_depth(faults: &[BusId], monitored: &[BusId], v_nom: f64) -> Vec<Vec<f64>> {
    faults
        .iter()
        .map(|&f| {
            let dist = topology::hop_distances(f);
            monitored
                .iter()
                .map(|b| {
                    let hops = dist.get(b).copied().unwrap_or(usize::MAX).min(100);
                    let v_fault = (0.3 + 0.05 * hops as f64).min(0.55);
                    v_nom - v_fault
                })
                .collect()
        })
        .collect()
}

/// Observation vector: monitored voltages followed by remaining load fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Mutable episode state. Owned by exactly one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub task: Task,
    /// Euler steps taken since reset.
    pub substep: usize,
    pub t: f64,
    pub voltages: Vec<f64>,
    pub load_fractions: Vec<f64>,
    pub drag: Vec<f64>,
    /// Load shed so far per load bus, p.u.
    pub cumulative_shed: Vec<f64>,
}

impl GridState {
    pub fn observation(&self) -> Observation {
        let mut v = Vec::with_capacity(self.voltages.len() + self.load_fractions.len());
        v.extend_from_slice(&self.voltages);
        v.extend_from_slice(&self.load_fractions);
        Observation(v)
    }
}

/// Everything the reward and the violation checker need from one action interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// End of the interval, seconds.
    pub t: f64,
    pub t_clear: f64,
    pub voltages: Vec<f64>,
    pub load_fractions: Vec<f64>,
    /// Load removed this interval per load bus, p.u.
    pub shed_amounts: Vec<f64>,
    pub invalid_action_count: u32,
    pub terminated: bool,
    pub violation: bool,
}

/// Flat start: nominal voltage, full load, no drag. The surrogate has no
/// stochastic component, so `seed` does not influence the state.
pub fn reset(model: &GridModel, task: &Task, _seed: u64) -> Result<(GridState, Observation)> {
    task.validate(model)?;
    let n_mon = model.monitored_buses.len();
    let n_load = model.load_buses.len();
    let state = GridState {
        task: *task,
        substep: 0,
        t: 0.0,
        voltages: vec![model.dynamics.v_nom; n_mon],
        load_fractions: vec![1.0; n_load],
        drag: vec![0.0; n_mon],
        cumulative_shed: vec![0.0; n_load],
    };
    let obs = state.observation();
    Ok((state, obs))
}

/// Advance one action interval.
pub fn step(
    model: &GridModel,
    state: &GridState,
    action: &[f64],
) -> Result<(GridState, Observation, StepInfo)> {
    let mut next = state.clone();
    let info = step_in_place(model, &mut next, action)?;
    let obs = next.observation();
    Ok((next, obs, info))
}

/// In-place variant of [`step`] used on the rollout hot path.
pub fn step_in_place(model: &GridModel, state: &mut GridState, action: &[f64]) -> Result<StepInfo> {
    if action.len() != model.load_buses.len() {
        return Err(contract(format!(
            "action has {} entries, grid has {} load buses",
            action.len(),
            model.load_buses.len()
        )));
    }
    if let Some(a) = action.iter().find(|&&a| !model.bounds.contains(a)) {
        return Err(contract(format!(
            "action component {a} outside [{}, {}]",
            model.bounds.a_min, model.bounds.a_max
        )));
    }

    let mut shed_amounts = vec![0.0; action.len()];
    let mut invalid = 0u32;
    for (j, &a) in action.iter().enumerate() {
        let before = state.load_fractions[j];
        if a < -model.action_epsilon && before == 0.0 {
            invalid += 1;
        }
        let mut after = (before + a).max(0.0);
        // Repeated -0.2 steps leave ~1e-17 behind; snap it so the bus reads as empty.
        if after < 1e-12 {
            after = 0.0;
        }
        state.load_fractions[j] = after;
        shed_amounts[j] = (before - after) * model.load_base[j];
        state.cumulative_shed[j] += shed_amounts[j];
    }

    let task = state.task;
    let fault = model.fault_index(task.fault_bus)?;
    let fault_start_k = (task.fault_start / model.dt).round() as usize;
    let fault_end_k = if task.fault_duration > 0.0 {
        (task.clearance_time() / model.dt - TIME_EPS).ceil() as usize
    } else {
        fault_start_k
    };

    let p = &model.dynamics;
    let n = state.voltages.len();
    let load_at: Vec<f64> = (0..n)
        .map(|i| model.load_position(i).map_or(0.0, |j| state.load_fractions[j]))
        .collect();
    let mut dv = vec![0.0; n];
    for _ in 0..model.substeps {
        let k = state.substep;
        let in_fault = k >= fault_start_k && k < fault_end_k;
        if in_fault {
            for (v, &dip) in state.voltages.iter_mut().zip(&model.dip_depth[fault]) {
                *v = p.v_nom - dip;
            }
        } else {
            for i in 0..n {
                let vi = state.voltages[i];
                let exchange: f64 = model.coupling[i]
                    .iter()
                    .zip(&state.voltages)
                    .map(|(c, vj)| c * (vi - vj))
                    .sum();
                dv[i] = p.recovery_rate * (p.v_nom - vi)
                    - p.drag_gain * load_at[i] * state.drag[i]
                    - exchange;
            }
        }
        for i in 0..n {
            let vi = state.voltages[i];
            let d = state.drag[i];
            let dd = p.stall_rate * (p.v_stall - vi).max(0.0) - p.drag_decay * (vi - p.v_rec).max(0.0) * d;
            state.drag[i] = (d + model.dt * dd).max(0.0);
            if !in_fault {
                state.voltages[i] = (vi + model.dt * dv[i]).max(0.0);
            }
        }
        state.substep += 1;
    }
    state.t = state.substep as f64 * model.dt;

    if state.voltages.iter().chain(&state.drag).any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("grid state diverged at t = {}", state.t)));
    }

    let t_clear = task.clearance_time();
    let violation = state.t > t_clear && {
        let theta = model.envelope.threshold_at_offset(state.t - t_clear);
        state.voltages.iter().any(|&v| v < theta)
    };
    let terminated = state.t + TIME_EPS >= model.horizon
        || reward::terminal_condition(state.t, t_clear, &state.voltages);

    Ok(StepInfo {
        t: state.t,
        t_clear,
        voltages: state.voltages.clone(),
        load_fractions: state.load_fractions.clone(),
        shed_amounts,
        invalid_action_count: invalid,
        terminated,
        violation,
    })
}
