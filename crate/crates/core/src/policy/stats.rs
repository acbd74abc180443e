use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Smallest standard deviation used for normalization.
pub const STD_FLOOR: f64 = 1e-8;

/// Online per-coordinate mean and population variance (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    pub mean: Vec<f64>,
    /// Summed squared deviations from the running mean.
    pub m2: Vec<f64>,
}

impl RunningStats {
    /// Zero mean, identity scale.
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(contract(format!("observation has {} entries, stats track {}", x.len(), self.dim())));
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &xi) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = xi - *m;
            *m += delta / n;
            *s += delta * (xi - *m);
        }
        Ok(())
    }

    /// Per-coordinate standard deviation; identity until two samples are seen.
    pub fn std(&self) -> Vec<f64> {
        if self.count <= 1 {
            return vec![1.0; self.dim()];
        }
        let n = self.count as f64;
        self.m2.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.dim()];
        }
        let n = self.count as f64;
        self.m2.iter().map(|s| s / n).collect()
    }
}

/// Functional form of [`RunningStats::push`].
pub fn stats_update(stats: &RunningStats, obs: &[f64]) -> Result<RunningStats> {
    let mut next = stats.clone();
    next.push(obs)?;
    Ok(next)
}

/// `(obs - mean) / std`, coordinate-wise.
pub fn normalize(obs: &[f64], stats: &RunningStats) -> Result<Vec<f64>> {
    let mut out = vec![0.0; obs.len()];
    normalize_into(obs, stats, &stats.std(), &mut out)?;
    Ok(out)
}

/// Allocation-free variant taking a precomputed `std`.
pub fn normalize_into(obs: &[f64], stats: &RunningStats, std: &[f64], out: &mut [f64]) -> Result<()> {
    if obs.len() != stats.dim() || std.len() != stats.dim() || out.len() != obs.len() {
        return Err(contract(format!("observation has {} entries, stats track {}", obs.len(), stats.dim())));
    }
    for (((o, &x), &m), &s) in out.iter_mut().zip(obs).zip(&stats.mean).zip(std) {
        *o = (x - m) / s.max(STD_FLOOR);
    }
    Ok(())
}
