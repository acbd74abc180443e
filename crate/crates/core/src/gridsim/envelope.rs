//! Post-clearance voltage recovery envelope and the violation checker.

use serde::{Deserialize, Serialize};

use super::StepInfo;
use crate::error::{config, contract, Result};

/// Tolerance applied to window boundaries so that `k * dt` round-off cannot
/// push a sample across a breakpoint.
pub(crate) const TIME_EPS: f64 = 1e-9;

/// Minimum voltage after clearance, as a piecewise-constant function of the
/// time elapsed since the fault was cleared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyEnvelope {
    /// `(offset_after_clearance_s, min_voltage_pu)`, offsets strictly increasing.
    pub breakpoints: Vec<(f64, f64)>,
}

/// Transient voltage recovery criterion: at least 0.7 p.u. at clearance,
/// 0.8 after 0.33 s, 0.9 after 0.5 s and 0.95 after 1.5 s.
pub const RECOVERY_BREAKPOINTS: [(f64, f64); 4] = [(0.0, 0.7), (0.33, 0.8), (0.5, 0.9), (1.5, 0.95)];

impl Default for SafetyEnvelope {
    fn default() -> Self {
        Self { breakpoints: RECOVERY_BREAKPOINTS.to_vec() }
    }
}

pub(crate) fn threshold_in(breakpoints: &[(f64, f64)], offset: f64) -> f64 {
    let mut theta = breakpoints[0].1;
    for &(start, v) in &breakpoints[1..] {
        if offset + TIME_EPS >= start {
            theta = v;
        } else {
            break;
        }
    }
    theta
}

impl SafetyEnvelope {
    pub fn validate(&self) -> Result<()> {
        let bp = &self.breakpoints;
        if bp.is_empty() {
            return Err(config("envelope needs at least one breakpoint"));
        }
        if bp[0].0 != 0.0 {
            return Err(config("first envelope breakpoint must sit at offset 0"));
        }
        for w in bp.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(config("envelope offsets must be strictly increasing"));
            }
            if w[1].1 <= w[0].1 {
                return Err(config("envelope thresholds must be strictly increasing"));
            }
        }
        if bp.iter().any(|&(_, v)| !(v > 0.0 && v < 1.0)) {
            return Err(config("envelope thresholds must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Threshold for a given offset after clearance (offset >= 0).
    pub fn threshold_at_offset(&self, offset: f64) -> f64 {
        threshold_in(&self.breakpoints, offset)
    }

    /// Threshold at absolute time `t`; undefined while the fault is on.
    pub fn threshold(&self, t: f64, t_clear: f64) -> Result<f64> {
        if t < t_clear {
            return Err(contract(format!(
                "envelope threshold undefined before clearance (t = {t}, t_clear = {t_clear})"
            )));
        }
        Ok(self.threshold_at_offset(t - t_clear))
    }
}

pub fn envelope_threshold(envelope: &SafetyEnvelope, t: f64, t_clear: f64) -> Result<f64> {
    envelope.threshold(t, t_clear)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationPoint {
    pub t: f64,
    pub voltage: f64,
    pub threshold: f64,
}

/// Every (bus, step) sample that fell strictly below the envelope.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    /// Indexed by monitored-bus position.
    pub per_bus: Vec<Vec<ViolationPoint>>,
    /// Number of violating (bus, step) samples.
    pub total_violation_steps: usize,
    pub max_deficit: f64,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.total_violation_steps == 0
    }
}

/// Scan a time-ordered trajectory. Samples at or before clearance are exempt.
pub fn check_violation(trajectory: &[StepInfo], envelope: &SafetyEnvelope) -> ViolationReport {
    let n_bus = trajectory.iter().map(|s| s.voltages.len()).max().unwrap_or(0);
    let mut report = ViolationReport {
        per_bus: vec![Vec::new(); n_bus],
        ..Default::default()
    };
    for info in trajectory {
        if info.t <= info.t_clear {
            continue;
        }
        let theta = envelope.threshold_at_offset(info.t - info.t_clear);
        for (i, &v) in info.voltages.iter().enumerate() {
            if v < theta {
                report.per_bus[i].push(ViolationPoint { t: info.t, voltage: v, threshold: theta });
                report.total_violation_steps += 1;
                report.max_deficit = report.max_deficit.max(theta - v);
            }
        }
    }
    report
}
