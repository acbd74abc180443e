//! Base load-shedding reward, the time-dependent voltage barrier, and their
//! combination into the safe-RL objective `R = r - c4 * B`.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::gridsim::{threshold_in, StepInfo, RECOVERY_BREAKPOINTS, TIME_EPS};

/// Seconds after clearance beyond which any sub-0.95 p.u. voltage is a failed recovery.
pub const TERMINAL_DELAY: f64 = 4.0;
pub const TERMINAL_VOLTAGE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    /// Voltage-deficit weight.
    pub c1: f64,
    /// Shed-amount weight.
    pub c2: f64,
    /// Invalid-action weight.
    pub c3: f64,
    /// Barrier weight; zero gives the standard (unsafe) objective.
    pub c4: f64,
    pub terminal_penalty: f64,
    /// p.u. distance from the threshold at which barrier terms saturate.
    pub barrier_margin: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            c1: 1.0,
            c2: 5.0,
            c3: 1.0,
            c4: 2.5e-5,
            terminal_penalty: -1000.0,
            barrier_margin: 1e-3,
        }
    }
}

impl RewardWeights {
    /// Same weights with the barrier switched off.
    pub fn standard(self) -> Self {
        Self { c4: 0.0, ..self }
    }

    pub fn barrier_cap(&self) -> f64 {
        self.barrier_margin.powi(-2)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("c1", self.c1), ("c2", self.c2), ("c3", self.c3), ("c4", self.c4)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(config(format!("reward weight {name} must be finite and >= 0")));
            }
        }
        if !(self.barrier_margin > 0.0) {
            return Err(config("barrier_margin must be > 0"));
        }
        if !self.terminal_penalty.is_finite() {
            return Err(config("terminal_penalty must be finite"));
        }
        Ok(())
    }
}

/// Per-step reward split into its weighted parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// Sum of per-bus voltage deficits (<= 0).
    pub delta_v_term: f64,
    /// Total load shed this step, p.u.
    pub shed_term: f64,
    pub invalid_term: f64,
    pub barrier_term: f64,
    pub terminal_term: f64,
    /// `c1*dv - c2*shed - c3*invalid - c4*barrier + terminal`.
    pub total: f64,
}

impl RewardBreakdown {
    /// The base reward `r` without the barrier contribution.
    pub fn base(&self, w: &RewardWeights) -> f64 {
        self.total + w.c4 * self.barrier_term
    }
}

/// True once the recovery deadline has passed with any bus still below 0.95 p.u.
pub fn terminal_condition(t: f64, t_clear: f64, voltages: &[f64]) -> bool {
    t > t_clear + TERMINAL_DELAY + TIME_EPS && voltages.iter().any(|&v| v < TERMINAL_VOLTAGE)
}

// Reward and barrier windows are the recovery envelope's windows.
fn window_threshold(t: f64, t_clear: f64) -> f64 {
    threshold_in(&RECOVERY_BREAKPOINTS, t - t_clear)
}

/// Voltage deficit `min(v - theta(t), 0)`; defined only after clearance.
pub fn delta_v(v: f64, t: f64, t_clear: f64) -> Result<f64> {
    if t <= t_clear {
        return Err(contract(format!("delta_v undefined at t = {t} <= t_clear = {t_clear}")));
    }
    Ok((v - window_threshold(t, t_clear)).min(0.0))
}

/// Base reward for one step. The voltage term is zero up to and including
/// clearance; shed and invalid-action costs apply at every step.
pub fn base_reward(info: &StepInfo, weights: &RewardWeights) -> f64 {
    let b = breakdown(info, weights, 0.0);
    b.total
}

/// Barrier `sum_i 1/(V_i - theta(t))^2`, each term saturating at `margin^-2`
/// once `V_i <= theta + margin`. Zero up to and including clearance.
pub fn barrier(voltages: &[f64], t: f64, t_clear: f64, weights: &RewardWeights) -> f64 {
    if t <= t_clear {
        return 0.0;
    }
    let theta = window_threshold(t, t_clear);
    let cap = weights.barrier_cap();
    voltages
        .iter()
        .map(|&v| {
            let gap = v - theta;
            if gap <= weights.barrier_margin {
                cap
            } else {
                (gap * gap).recip().min(cap)
            }
        })
        .sum()
}

/// Combined reward `r - c4 * B`.
pub fn combined_reward(info: &StepInfo, weights: &RewardWeights) -> RewardBreakdown {
    let b = barrier(&info.voltages, info.t, info.t_clear, weights);
    breakdown(info, weights, b)
}

fn breakdown(info: &StepInfo, w: &RewardWeights, barrier_term: f64) -> RewardBreakdown {
    let mut out = RewardBreakdown { barrier_term, ..Default::default() };
    if terminal_condition(info.t, info.t_clear, &info.voltages) {
        out.terminal_term = w.terminal_penalty;
    } else {
        if info.t > info.t_clear {
            out.delta_v_term = info
                .voltages
                .iter()
                .map(|&v| (v - window_threshold(info.t, info.t_clear)).min(0.0))
                .sum();
        }
        // Shedding is paid for whenever it happens, including before clearance.
        out.shed_term = info.shed_amounts.iter().sum();
        out.invalid_term = f64::from(info.invalid_action_count);
    }
    out.total = w.c1 * out.delta_v_term - w.c2 * out.shed_term - w.c3 * out.invalid_term
        - w.c4 * out.barrier_term
        + out.terminal_term;
    out
}
