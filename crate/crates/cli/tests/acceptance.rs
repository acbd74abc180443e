//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 6-8 share one pair of full training runs.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safeshed_cli::commands::{self, Selected};
use safeshed_cli::ExperimentConfig;
use safeshed_core::ars::{self, ArsConfig, DirectionResult, Objective};
use safeshed_core::gridsim::check_violation;
use safeshed_core::parallel::{rollout_with, FnController, RolloutOptions, RolloutResult, ZeroController};
use safeshed_core::policy::{
    deserialize, policy_forward, serialize, HiddenState, PolicyArch, PolicyParams, RunningStats,
};
use safeshed_core::reward::{barrier, delta_v};
use safeshed_core::{BusId, GridModel, JobPool, RewardWeights, Task};

type Check = Result<String, String>;

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, id: u32, name: &str, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS  {name} [{secs:.1}s] {detail}"),
            Err(detail) => {
                self.failures += 1;
                println!("criterion {id:>2} FAIL  {name} [{secs:.1}s] {detail}");
            }
        }
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(got: f64, want: f64, rel: f64) -> bool {
    (got - want).abs() <= rel * want.abs().max(1.0)
}

// 1 ------------------------------------------------------------------------

fn barrier_and_delta_v() -> Check {
    let w = RewardWeights::default();
    let t_clear = 1.15;
    let window4 = t_clear + 2.0;
    let window3 = t_clear + 1.0;
    let b1 = barrier(&[1.05], window4, t_clear, &w);
    let b2 = barrier(&[0.96], window4, t_clear, &w);
    let dv = delta_v(0.85, window3, t_clear).map_err(|e| e.to_string())?;
    // Hand values are exact; f64 subtraction of decimal inputs is not, so
    // agreement is to the last few ulps.
    ensure(close(b1, 100.0, 1e-12), format!("barrier(1.05) = {b1}"))?;
    ensure(close(b2, 10_000.0, 1e-12), format!("barrier(0.96) = {b2}"))?;
    ensure(close(dv, -0.05, 1e-12), format!("delta_v(0.85) = {dv}"))?;
    Ok(format!("B(1.05)={b1} B(0.96)={b2} dV(0.85)={dv} (rel tol 1e-12)"))
}

// 2 ------------------------------------------------------------------------

fn update_rule_examples() -> Check {
    // Example A: (2,0) along e1, (1,1) along e2, alpha 0.1.
    let rs = vec![DirectionResult::new(0, vec![1.0, 0.0], 2.0, 0.0), DirectionResult::new(1, vec![0.0, 1.0], 1.0, 1.0)];
    let (sel, sigma) = ars::select_top(&rs, 2, 1e-8).map_err(|e| e.to_string())?;
    let next = ars::update_weights(&[0.0, 0.0], &sel, 0.1, 2, sigma).map_err(|e| e.to_string())?;
    let want_a = [0.1 / (2.0 * 0.5f64.sqrt()) * 2.0, 0.0];
    ensure((sigma - 0.5f64.sqrt()).abs() < 1e-9, format!("example A sigma {sigma}"))?;
    ensure(next.iter().zip(&want_a).all(|(g, w)| (g - w).abs() < 1e-9), format!("example A theta {next:?}"))?;
    ensure((next[0] - 0.141421).abs() < 1e-6, "example A magnitude")?;
    let a0 = next[0];

    // Example B: (1,5), (2,0), (0,0), b = 2 selects the first two.
    let rs = vec![
        DirectionResult::new(0, vec![1.0, 0.0, 0.0], 1.0, 5.0),
        DirectionResult::new(1, vec![0.0, 1.0, 0.0], 2.0, 0.0),
        DirectionResult::new(2, vec![0.0, 0.0, 1.0], 0.0, 0.0),
    ];
    let (sel, sigma) = ars::select_top(&rs, 2, 1e-8).map_err(|e| e.to_string())?;
    let picked: Vec<usize> = sel.iter().map(|d| d.index).collect();
    ensure(picked == [0, 1], format!("example B selected {picked:?}"))?;
    ensure((sigma - 1.870828693).abs() < 1e-9, format!("example B sigma {sigma}"))?;
    let theta0 = [0.5, -0.25, 1.0];
    let next = ars::update_weights(&theta0, &sel, 0.1, 2, sigma).map_err(|e| e.to_string())?;
    let scale = 0.1 / (2.0 * 3.5f64.sqrt());
    let want_b = [0.5 + scale * -4.0, -0.25 + scale * 2.0, 1.0];
    ensure(next.iter().zip(&want_b).all(|(g, w)| (g - w).abs() < 1e-9), format!("example B theta {next:?}"))?;
    Ok(format!("A: {:.9}, B: [{:.9}, {:.9}, {:.9}]", a0, next[0], next[1], next[2]))
}

// 3 ------------------------------------------------------------------------

fn calibration_triple() -> Check {
    let model = GridModel::default();
    let w = RewardWeights::default();
    let opts = RolloutOptions { horizon: None, retain_trajectory: true, collect_observations: false };
    let zero = |task: &Task| rollout_with(&model, task, &mut ZeroController { n_actions: 3 }, &w, opts);

    let a = zero(&Task::new(BusId(4), 0.15));
    ensure(!a.is_failed(), "rollout (a) failed")?;
    ensure(a.violation_steps >= 1, format!("(a) uncontrolled bus-4/0.15 s: {} violations", a.violation_steps))?;

    let b = zero(&Task::new(BusId(4), 0.0));
    ensure(b.violation_steps == 0, format!("(b) no-fault: {} violations", b.violation_steps))?;

    let task = Task::new(BusId(4), 0.28);
    let t_clear = task.clearance_time();
    let mut loads = [1.0f64; 3];
    let mut shed = FnController(move |t: f64, obs: &[f64]| {
        loads.copy_from_slice(&obs[4..7]);
        loads.iter().map(|&l| if t + 1e-9 >= t_clear && l > 0.0 { -0.2 } else { 0.0 }).collect()
    });
    let c = rollout_with(&model, &task, &mut shed, &w, opts);
    ensure(!c.is_failed(), "rollout (c) failed")?;
    let late: Vec<_> = c.steps.iter().filter(|s| s.info.t > t_clear + 1.5).map(|s| s.info.clone()).collect();
    let late_violations = check_violation(&late, &model.envelope).total_violation_steps;
    ensure(late_violations == 0, format!("(c) max shedding bus-4/0.28 s: {late_violations} violations after t_clear + 1.5 s"))?;
    Ok(format!("(a) {} violations, (b) 0, (c) 0 late violations ({} total)", a.violation_steps, c.violation_steps))
}

// 4 ------------------------------------------------------------------------

struct Quadratic {
    x: Vec<f64>,
    c: Vec<f64>,
}

impl Objective for Quadratic {
    fn num_tasks(&self) -> usize {
        1
    }

    fn input_dim(&self) -> usize {
        self.x.len()
    }

    fn output_dim(&self) -> usize {
        self.c.len()
    }

    fn rollout(&self, params: &PolicyParams, _stats: &RunningStats, _task: usize, _stream: u64, _collect: bool) -> RolloutResult {
        match policy_forward(params, &self.x, &mut params.initial_hidden()) {
            Ok(y) => {
                let loss: f64 = y.iter().zip(&self.c).map(|(a, b)| (a - b).powi(2)).sum();
                RolloutResult { total_return: -loss, num_steps: 1, ..Default::default() }
            }
            Err(e) => RolloutResult::failed(None, e.to_string()),
        }
    }
}

fn quadratic_sanity() -> Check {
    let obj = Quadratic { x: vec![1.0, -0.5, 2.0, 0.25], c: vec![0.7, -1.2, 0.3] };
    // A linear map W x + b can hit any c, so the optimal return is 0.
    let optimum = 0.0;
    let cfg = ArsConfig {
        num_directions: 8,
        top_b: 4,
        rollouts_per_direction: 1,
        iterations: 500,
        eval_every: 10,
        seed: 11,
        ..Default::default()
    };
    let pool = JobPool::new(2).map_err(|e| e.to_string())?;
    let out = ars::train(&cfg, &obj, PolicyArch::Linear, &pool, &mut ()).map_err(|e| e.to_string())?;
    let best_iter = out.history.records.iter().find(|r| optimum - r.greedy_return < 1e-2).map(|r| r.iteration);
    let last = out.history.records.last().ok_or("empty history")?;
    ensure(best_iter.is_some(), format!("final return {} after 500 iterations", last.greedy_return))?;
    ensure(optimum - last.greedy_return < 1e-2, format!("final return {}", last.greedy_return))?;
    Ok(format!("within 1e-2 by iteration {}, final return {:.2e}", best_iter.unwrap(), last.greedy_return))
}

// 5 ------------------------------------------------------------------------

fn determinism(tmp: &Path) -> Check {
    let mut runs = Vec::new();
    for workers in [1, 8] {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 7;
        cfg.workers = workers;
        cfg.ars.iterations = 50;
        cfg.ars.num_directions = 8;
        cfg.ars.top_b = 4;
        cfg.output.record_wall_time = false;
        let out = tmp.join(format!("det_w{workers}"));
        let s = commands::train(&cfg, &out, true).map_err(|e| e.to_string())?;
        let history = std::fs::read(out.join(commands::HISTORY_FILE)).map_err(|e| e.to_string())?;
        let bits: Vec<u64> = s.outcome.params.theta().iter().map(|x| x.to_bits()).collect();
        runs.push((bits, history));
    }
    ensure(runs[0].0 == runs[1].0, "final theta differs between 1 and 8 workers")?;
    ensure(runs[0].1 == runs[1].1, "history CSV differs between 1 and 8 workers")?;
    Ok(format!("{} weights and {} history bytes identical", runs[0].0.len(), runs[0].1.len()))
}

// 6-8 ----------------------------------------------------------------------

struct Comparison {
    safe: Vec<usize>,
    standard: Vec<usize>,
    safe_held: usize,
    standard_held: usize,
    safe_returns: Vec<f64>,
}

fn train_pair(tmp: &Path) -> Result<Comparison, String> {
    let base = ExperimentConfig::default();
    let mut results = Vec::new();
    for (name, c4) in [("safe", base.reward.c4), ("standard", 0.0)] {
        let mut cfg = base.clone();
        cfg.reward.c4 = c4;
        let out = tmp.join(name);
        let s = commands::train(&cfg, &out, true).map_err(|e| format!("{name}: {e}"))?;
        let tasks: Vec<Selected> = commands::select_tasks(&cfg, "all").map_err(|e| e.to_string())?;
        let report = commands::evaluate(&cfg, &s.outcome.params, &s.outcome.stats, name, &tasks, None)
            .map_err(|e| e.to_string())?;
        results.push((report, s.outcome.history.greedy_returns()));
    }
    let (safe, safe_hist) = &results[0];
    let (standard, _) = &results[1];
    let split = |r: &safeshed_cli::export::EvalReport, held: bool| -> Vec<usize> {
        r.rows.iter().filter(|x| x.held_out == held).map(|x| x.violation_steps).collect()
    };
    Ok(Comparison {
        safe: split(safe, false),
        standard: split(standard, false),
        safe_held: split(safe, true).iter().sum(),
        standard_held: split(standard, true).iter().sum(),
        safe_returns: safe_hist.clone(),
    })
}

fn safe_vs_standard(c: &Comparison) -> Check {
    ensure(c.safe.len() == 9 && c.standard.len() == 9, "expected 9 training tasks")?;
    let (s, t): (usize, usize) = (c.safe.iter().sum(), c.standard.iter().sum());
    ensure(s <= t, format!("safe {s} > standard {t} violation steps"))?;
    for (i, (a, b)) in c.safe.iter().zip(&c.standard).enumerate() {
        ensure(*b > 0 || *a == 0, format!("task {i}: standard clean but safe has {a} violations"))?;
    }
    Ok(format!("violation steps safe {s} vs standard {t}; per task safe {:?} standard {:?}", c.safe, c.standard))
}

fn generalization(c: &Comparison) -> Check {
    ensure(
        c.safe_held <= c.standard_held,
        format!("held-out bus 7: safe {} > standard {}", c.safe_held, c.standard_held),
    )?;
    Ok(format!("held-out bus-7/0.15 s violation steps: safe {} vs standard {}", c.safe_held, c.standard_held))
}

fn reward_trend(c: &Comparison) -> Check {
    let g = &c.safe_returns;
    ensure(g.len() >= 4, format!("only {} greedy evaluations", g.len()))?;
    let q = g.len() / 4;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (first, last) = (mean(&g[..q]), mean(&g[g.len() - q..]));
    ensure(last > first, format!("last quartile {last:.3} <= first quartile {first:.3}"))?;
    Ok(format!("greedy return first quartile {first:.3} -> last quartile {last:.3}"))
}

// 9 ------------------------------------------------------------------------

fn reference_lstm(theta: &[f64], n_in: usize, h: usize, n_out: usize, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    // Gate-by-gate evaluation, indexing the flat layout directly.
    let w_ih = |g: usize, k: usize, j: usize| theta[(g * h + k) * n_in + j];
    let off_hh = 4 * h * n_in;
    let w_hh = |g: usize, k: usize, j: usize| theta[off_hh + (g * h + k) * h + j];
    let off_b = off_hh + 4 * h * h;
    let bias = |g: usize, k: usize| theta[off_b + g * h + k];
    let off_out = off_b + 4 * h;
    let w_out = |r: usize, k: usize| theta[off_out + r * h + k];
    let b_out = |r: usize| theta[off_out + n_out * h + r];
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());

    let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
    let mut outs = Vec::new();
    for x in xs {
        let mut gates = vec![[0.0f64; 4]; h];
        for (k, gk) in gates.iter_mut().enumerate() {
            for (g, slot) in gk.iter_mut().enumerate() {
                let mut z = bias(g, k);
                for j in 0..n_in {
                    z += w_ih(g, k, j) * x[j];
                }
                for j in 0..h {
                    z += w_hh(g, k, j) * hs[j];
                }
                *slot = if g == 2 { z.tanh() } else { sigmoid(z) };
            }
        }
        for k in 0..h {
            let [i, f, gg, o] = gates[k];
            cs[k] = f * cs[k] + i * gg;
            hs[k] = o * cs[k].tanh();
        }
        outs.push((0..n_out).map(|r| b_out(r) + (0..h).map(|k| w_out(r, k) * hs[k]).sum::<f64>()).collect());
    }
    outs
}

fn oracle_equivalences() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cases = 120;
    let mut worst_stats = 0.0f64;
    for _ in 0..cases {
        let dim = rng.random_range(1..6);
        let n = rng.random_range(2..2000);
        let scale = 10f64.powi(rng.random_range(-3..4));
        let xs: Vec<Vec<f64>> =
            (0..n).map(|_| (0..dim).map(|_| scale * rng.random_range(-1.0..1.0) + rng.random_range(-5.0..5.0)).collect()).collect();
        let mut s = RunningStats::new(dim);
        for x in &xs {
            s.push(x).map_err(|e| e.to_string())?;
        }
        for j in 0..dim {
            let mean = xs.iter().map(|x| x[j]).sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n as f64;
            let em = (s.mean[j] - mean).abs() / mean.abs().max(1.0);
            let ev = (s.variance()[j] - var).abs() / var.abs().max(1.0);
            worst_stats = worst_stats.max(em).max(ev);
        }
    }
    ensure(worst_stats <= 1e-10, format!("Welford vs two-pass worst relative error {worst_stats:e}"))?;

    let mut worst_lstm = 0.0f64;
    for _ in 0..cases {
        let (n_in, h, n_out) = (rng.random_range(1..9), rng.random_range(1..33), rng.random_range(1..5));
        let arch = PolicyArch::Lstm { hidden_size: h };
        let p = PolicyParams::random(arch, n_in, n_out, 0.6, &mut rng).map_err(|e| e.to_string())?;
        let xs: Vec<Vec<f64>> = (0..rng.random_range(1..10)).map(|_| (0..n_in).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let want = reference_lstm(p.theta(), n_in, h, n_out, &xs);
        let mut state = HiddenState::zeros(arch);
        for (x, w) in xs.iter().zip(&want) {
            let got = policy_forward(&p, x, &mut state).map_err(|e| e.to_string())?;
            for (a, b) in got.iter().zip(w) {
                worst_lstm = worst_lstm.max((a - b).abs());
            }
        }
    }
    ensure(worst_lstm <= 1e-6, format!("LSTM vs reference worst error {worst_lstm:e}"))?;
    Ok(format!("{cases} cases each; Welford worst rel err {worst_stats:.1e}, LSTM worst abs err {worst_lstm:.1e}"))
}

// 10 -----------------------------------------------------------------------

fn checkpoint_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let archs = [PolicyArch::Linear, PolicyArch::Lstm { hidden_size: 1 }, PolicyArch::Lstm { hidden_size: 32 }];
    let mut corruptions = 0;
    for arch in archs {
        let p = PolicyParams::random(arch, 7, 3, 1.0, &mut rng).map_err(|e| e.to_string())?;
        let mut s = RunningStats::new(7);
        for _ in 0..50 {
            let x: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..2.0)).collect();
            s.push(&x).map_err(|e| e.to_string())?;
        }
        let bytes = serialize(&p, &s);
        let (p2, s2) = deserialize(&bytes).map_err(|e| e.to_string())?;
        let same_theta = p.theta().iter().zip(p2.theta()).all(|(a, b)| a.to_bits() == b.to_bits());
        let same_stats = s.count == s2.count
            && s.mean.iter().zip(&s2.mean).all(|(a, b)| a.to_bits() == b.to_bits())
            && s.m2.iter().zip(&s2.m2).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same_theta && same_stats && p.arch == p2.arch, format!("{arch} round trip not bitwise"))?;
        ensure(serialize(&p2, &s2) == bytes, "re-serialization differs")?;

        let mut variants: Vec<Vec<u8>> = (0..bytes.len()).step_by(7).map(|n| bytes[..n].to_vec()).collect();
        for _ in 0..300 {
            let mut b = bytes.clone();
            let i = rng.random_range(0..b.len());
            b[i] ^= 1 << rng.random_range(0..8);
            variants.push(b);
        }
        for _ in 0..50 {
            let n = rng.random_range(0..200);
            variants.push((0..n).map(|_| rng.random::<u8>()).collect());
        }
        for v in variants {
            corruptions += 1;
            match catch_unwind(|| deserialize(&v)) {
                Err(_) => return Err("deserialize panicked on corrupt input".into()),
                Ok(Ok(_)) => return Err("corrupt checkpoint accepted".into()),
                Ok(Err(_)) => {}
            }
        }
    }
    Ok(format!("3 architectures bitwise; {corruptions} corrupted inputs all rejected"))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut suite = Suite { failures: 0 };
    suite.run(1, "formula fidelity: barrier and delta_v", barrier_and_delta_v);
    suite.run(2, "formula fidelity: update rule", update_rule_examples);
    suite.run(3, "calibration triple", calibration_triple);
    suite.run(4, "optimizer sanity on a quadratic", quadratic_sanity);
    suite.run(5, "training determinism across worker counts", || determinism(tmp.path()));

    let start = Instant::now();
    let pair = catch_unwind(AssertUnwindSafe(|| train_pair(tmp.path())))
        .unwrap_or_else(|_| Err("training panicked".to_string()));
    println!("   (safe and standard training: {:.1}s)", start.elapsed().as_secs_f64());
    match &pair {
        Ok(c) => {
            suite.run(6, "safe-vs-standard violation ordering", || safe_vs_standard(c));
            suite.run(7, "generalization to held-out fault", || generalization(c));
            suite.run(8, "greedy return trend", || reward_trend(c));
        }
        Err(e) => {
            for (id, name) in [(6, "safe-vs-standard violation ordering"), (7, "generalization to held-out fault"), (8, "greedy return trend")] {
                suite.run(id, name, || Err(e.clone()));
            }
        }
    }

    suite.run(9, "oracle equivalences", oracle_equivalences);
    suite.run(10, "checkpoint round trip", checkpoint_round_trip);

    if suite.failures > 0 {
        println!("acceptance: {} criteria FAILED", suite.failures);
        std::process::exit(1);
    }
    println!("acceptance: all 10 criteria passed");
}
