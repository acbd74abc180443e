//! Deterministic control policies over a flat weight vector.
//!
//! The policy maps a normalized observation to a raw output per load bus;
//! [`squash_action`] turns that into an admissible shed command. Two
//! architectures share the same flat-vector representation so that random
//! search can treat them uniformly:
//!
//! * `Linear`: `y = W x + b`, laid out as `W` (row-major, `out x in`) then `b`.
//! * `Lstm`: one LSTM cell with gate order input, forget, candidate, output,
//!   followed by a linear head. Layout: `W_ih` (`4H x in`), `W_hh` (`4H x H`),
//!   gate bias (`4H`), `W_out` (`out x H`), `b_out` (`out`).

mod checkpoint;
mod stats;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use crate::gridsim::ActionBounds;
pub use checkpoint::{deserialize, deserialize_expecting, serialize, CHECKPOINT_MAGIC, FORMAT_VERSION};
pub use stats::{normalize, normalize_into, stats_update, RunningStats, STD_FLOOR};

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase", deny_unknown_fields)]
pub enum PolicyArch {
    Linear,
    Lstm { hidden_size: usize },
}

impl Default for PolicyArch {
    fn default() -> Self {
        PolicyArch::Lstm { hidden_size: 32 }
    }
}

impl std::fmt::Display for PolicyArch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolicyArch::Linear => write!(f, "linear"),
            PolicyArch::Lstm { hidden_size } => write!(f, "lstm({hidden_size})"),
        }
    }
}

impl PolicyArch {
    /// Number of weights for the given input/output widths.
    pub fn n_theta(&self, input_dim: usize, output_dim: usize) -> usize {
        match *self {
            PolicyArch::Linear => output_dim * input_dim + output_dim,
            PolicyArch::Lstm { hidden_size: h } => {
                4 * h * input_dim + 4 * h * h + 4 * h + output_dim * h + output_dim
            }
        }
    }
}

/// Direction of a weight-space perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn as_f64(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: PolicyArch,
    pub input_dim: usize,
    pub output_dim: usize,
    theta: Vec<f64>,
}

impl PolicyParams {
    pub fn new(arch: PolicyArch, input_dim: usize, output_dim: usize, theta: Vec<f64>) -> Result<Self> {
        if let PolicyArch::Lstm { hidden_size: 0 } = arch {
            return Err(contract("LSTM hidden size must be positive"));
        }
        let expected = arch.n_theta(input_dim, output_dim);
        if theta.len() != expected {
            return Err(contract(format!(
                "{arch} policy with {input_dim} inputs and {output_dim} outputs needs {expected} weights, got {}",
                theta.len()
            )));
        }
        if theta.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("policy weights must be finite".into()));
        }
        Ok(Self { arch, input_dim, output_dim, theta })
    }

    pub fn zeros(arch: PolicyArch, input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::new(arch, input_dim, output_dim, vec![0.0; arch.n_theta(input_dim, output_dim)])
    }

    /// Small Gaussian initial weights, `N(0, scale^2)`.
    pub fn random<R: Rng + ?Sized>(
        arch: PolicyArch,
        input_dim: usize,
        output_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let theta = (0..arch.n_theta(input_dim, output_dim))
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(arch, input_dim, output_dim, theta)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn n_theta(&self) -> usize {
        self.theta.len()
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    /// Same shape, different weights.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.arch, self.input_dim, self.output_dim, theta)
    }

    pub fn initial_hidden(&self) -> HiddenState {
        HiddenState::zeros(self.arch)
    }
}

/// Recurrent state carried between steps of one episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HiddenState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl HiddenState {
    pub fn zeros(arch: PolicyArch) -> Self {
        match arch {
            PolicyArch::Linear => Self::default(),
            PolicyArch::Lstm { hidden_size } => Self { h: vec![0.0; hidden_size], c: vec![0.0; hidden_size] },
        }
    }

    pub fn reset(&mut self) {
        self.h.iter_mut().for_each(|x| *x = 0.0);
        self.c.iter_mut().for_each(|x| *x = 0.0);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One forward step; advances `hidden` in place and returns the raw output.
pub fn policy_forward(params: &PolicyParams, input: &[f64], hidden: &mut HiddenState) -> Result<Vec<f64>> {
    if input.len() != params.input_dim {
        return Err(contract(format!(
            "policy expects {} inputs, got {}",
            params.input_dim,
            input.len()
        )));
    }
    if input.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite policy input".into()));
    }
    if params.theta.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numeric("non-finite policy weights".into()));
    }
    let (n_in, n_out) = (params.input_dim, params.output_dim);
    let theta = &params.theta;

    let out: Vec<f64> = match params.arch {
        PolicyArch::Linear => {
            let (w, b) = theta.split_at(n_out * n_in);
            (0..n_out).map(|r| b[r] + dot(&w[r * n_in..(r + 1) * n_in], input)).collect()
        }
        PolicyArch::Lstm { hidden_size: h } => {
            if hidden.h.len() != h || hidden.c.len() != h {
                return Err(contract(format!("hidden state does not match lstm({h})")));
            }
            let (w_ih, rest) = theta.split_at(4 * h * n_in);
            let (w_hh, rest) = rest.split_at(4 * h * h);
            let (bias, rest) = rest.split_at(4 * h);
            let (w_out, b_out) = rest.split_at(n_out * h);

            let mut z = vec![0.0; 4 * h];
            for (r, zr) in z.iter_mut().enumerate() {
                *zr = bias[r]
                    + dot(&w_ih[r * n_in..(r + 1) * n_in], input)
                    + dot(&w_hh[r * h..(r + 1) * h], &hidden.h);
            }
            for k in 0..h {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[h + k]);
                let g = z[2 * h + k].tanh();
                let o = sigmoid(z[3 * h + k]);
                let c = f * hidden.c[k] + i * g;
                hidden.c[k] = c;
                hidden.h[k] = o * c.tanh();
            }
            (0..n_out).map(|r| b_out[r] + dot(&w_out[r * h..(r + 1) * h], &hidden.h)).collect()
        }
    };
    if out.iter().any(|y| !y.is_finite()) {
        return Err(Error::Numeric("non-finite policy output".into()));
    }
    Ok(out)
}

/// Map raw outputs into `[a_min, a_max]` with a tanh squash.
pub fn squash_action(raw: &[f64], bounds: &ActionBounds) -> Vec<f64> {
    raw.iter()
        .map(|&x| {
            let a = bounds.a_min + (x.tanh() + 1.0) * 0.5 * (bounds.a_max - bounds.a_min);
            a.clamp(bounds.a_min, bounds.a_max)
        })
        .collect()
}

/// `theta + sign * nu * delta`; the input parameters are left untouched.
pub fn perturb(params: &PolicyParams, delta: &[f64], nu: f64, sign: Sign) -> Result<PolicyParams> {
    Ok(PolicyParams { theta: perturb_theta(&params.theta, delta, nu, sign)?, ..params.clone() })
}

pub fn perturb_theta(theta: &[f64], delta: &[f64], nu: f64, sign: Sign) -> Result<Vec<f64>> {
    if delta.len() != theta.len() {
        return Err(contract(format!(
            "perturbation has {} entries, policy has {}",
            delta.len(),
            theta.len()
        )));
    }
    let scale = sign.as_f64() * nu;
    Ok(theta.iter().zip(delta).map(|(t, d)| t + scale * d).collect())
}
