//! Progress estimators.
//!
//! [`OracleEstimator`] reads the simulator's ground-truth completion and
//! returns the relative change of the remaining progress, which the
//! accumulation recurrence inverts exactly. The noisy variant corrupts the
//! episode-level verdict with fixed flip rates to model an imperfect
//! success discriminator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::memory::ProgressTrace;
use crate::sim::{Observation, TaskSpec};

pub trait ProgressEstimator: Send + Sync {
    /// Signed progress made between two observations, in `[-1, 1]`.
    fn estimate(&self, prev: &Observation, now: &Observation, task: &TaskSpec) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleEstimator;

impl ProgressEstimator for OracleEstimator {
    fn estimate(&self, prev: &Observation, now: &Observation, task: &TaskSpec) -> Result<f64> {
        oracle_estimate(prev, now, task)
    }
}

/// `(G(now) - G(prev)) / (1 - G(prev))`, clamped to `[-1, 1]`.
pub fn oracle_estimate(prev: &Observation, now: &Observation, task: &TaskSpec) -> Result<f64> {
    if prev.task_id != task.task_id || now.task_id != task.task_id {
        return Err(invalid(format!(
            "observations from tasks {}/{} scored against task {}",
            prev.task_id, now.task_id, task.task_id
        )));
    }
    let (g0, g1) = (prev.completion, now.completion);
    let remaining = 1.0 - g0;
    if remaining <= 0.0 {
        return Ok(if g1 >= g0 { 0.0 } else { -1.0 });
    }
    Ok(((g1 - g0) / remaining).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisyEstimatorConfig {
    pub flip_to_success_rate: f64,
    pub flip_to_failure_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoisyEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("flip_to_success_rate", self.flip_to_success_rate),
            ("flip_to_failure_rate", self.flip_to_failure_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

impl Default for NoisyEstimatorConfig {
    /// Rates giving precision 0.970 and recall 0.678 at a base success rate of 0.6.
    fn default() -> Self {
        calibrate_flip_rates(0.6, 0.970, 0.678, 0).expect("default calibration is feasible")
    }
}

/// Solves the precision/recall identities for the two flip rates:
/// `recall = 1 - f_fail` and
/// `precision = p r / (p r + (1 - p) f_succ)` with base success rate `p`.
pub fn calibrate_flip_rates(base_rate: f64, precision: f64, recall: f64, seed: u64) -> Result<NoisyEstimatorConfig> {
    if !(base_rate > 0.0 && base_rate < 1.0) || !(precision > 0.0 && precision <= 1.0) || !(0.0..=1.0).contains(&recall) {
        return Err(invalid("calibration targets out of range"));
    }
    let f_succ = base_rate * recall * (1.0 / precision - 1.0) / (1.0 - base_rate);
    let cfg = NoisyEstimatorConfig {
        flip_to_success_rate: f_succ,
        flip_to_failure_rate: 1.0 - recall,
        seed,
    };
    cfg.validate().map_err(|_| invalid("calibration targets need a flip rate above 1"))?;
    Ok(cfg)
}

fn verdict_rng(seed: u64, episode_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode_id);
    rng
}

/// Episode verdict as reported by the noisy discriminator.
pub fn noisy_episode_verdict(true_success: bool, config: &NoisyEstimatorConfig, episode_id: u64) -> bool {
    let u: f64 = verdict_rng(config.seed, episode_id).random();
    if true_success {
        u >= config.flip_to_failure_rate
    } else {
        u < config.flip_to_success_rate
    }
}

/// Rewrites an oracle trace so that it carries the noisy verdict.
///
/// A failure reported as success gets a uniformly rising ramp that ends at
/// exactly `eta` on the last evaluation step. A success reported as failure
/// gets its accumulated progress capped just below `eta`.
pub fn apply_noisy_verdict(
    trace: ProgressTrace,
    config: &NoisyEstimatorConfig,
    episode_id: u64,
    eta: f64,
) -> ProgressTrace {
    let verdict = noisy_episode_verdict(trace.success, config, episode_id);
    if verdict == trace.success {
        return trace;
    }
    let m = trace.eval_timesteps.len() - 1;
    let accumulated: Vec<f64> = if verdict {
        (0..=m).map(|i| if i == m { eta } else { eta * i as f64 / m as f64 }).collect()
    } else {
        let cap = eta - (0.01f64).min(eta / 2.0);
        trace.accumulated.iter().map(|v| v.min(cap)).collect()
    };
    rebuild(trace.eval_timesteps, accumulated, verdict)
}

fn rebuild(eval_timesteps: Vec<usize>, accumulated: Vec<f64>, success: bool) -> ProgressTrace {
    let interval_scores = accumulated
        .windows(2)
        .map(|w| {
            let rem = 1.0 - w[0];
            if rem <= 0.0 {
                0.0
            } else {
                ((w[1] - w[0]) / rem).clamp(-1.0, 1.0)
            }
        })
        .collect();
    let (peak, completion) = accumulated
        .iter()
        .enumerate()
        .fold((0, accumulated[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    ProgressTrace {
        peak_timestep: eval_timesteps[peak],
        eval_timesteps,
        interval_scores,
        accumulated,
        completion,
        success,
    }
}

/// Precision and recall of `verdict` against `truth` over paired samples.
/// Undefined ratios are reported as NaN.
pub fn precision_recall(pairs: impl IntoIterator<Item = (bool, bool)>) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (truth, verdict) in pairs {
        match (truth, verdict) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: u64, b: u64| if a + b == 0 { f64::NAN } else { a as f64 / (a + b) as f64 };
    (ratio(tp, fp), ratio(tp, fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorConfig {
    #[default]
    Oracle,
    Noisy(NoisyEstimatorConfig),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::accumulate_progress;
    use crate::sim::{find_task, SimEnv};

    fn obs_with(g: f64) -> (TaskSpec, Observation) {
        let task = find_task("T2").unwrap();
        let (_, mut o) = SimEnv::reset(&task, 0).unwrap();
        o.completion = g;
        (task, o)
    }

    #[test]
    fn oracle_examples() {
        let (task, o) = obs_with(0.3);
        assert_eq!(oracle_estimate(&o, &o, &task).unwrap(), 0.0);

        let (_, a) = obs_with(0.0);
        let (_, b) = obs_with(0.5);
        let (_, c) = obs_with(1.0);
        let c1 = oracle_estimate(&a, &b, &task).unwrap();
        let c2 = oracle_estimate(&b, &c, &task).unwrap();
        assert_eq!((c1, c2), (0.5, 1.0));
        let v1 = accumulate_progress(0.0, c1).unwrap();
        let v2 = accumulate_progress(v1, c2).unwrap();
        assert_eq!((v1, v2), (0.5, 1.0));

        let (_, hi) = obs_with(0.8);
        let (_, lo) = obs_with(0.6);
        assert!((oracle_estimate(&hi, &lo, &task).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_rejects_task_mismatch() {
        let (_, o) = obs_with(0.1);
        assert!(oracle_estimate(&o, &o, &find_task("T1").unwrap()).is_err());
    }

    #[test]
    fn zero_rates_are_identity_and_one_rates_invert() {
        let off = NoisyEstimatorConfig {
            flip_to_success_rate: 0.0,
            flip_to_failure_rate: 0.0,
            seed: 9,
        };
        let all = NoisyEstimatorConfig {
            flip_to_success_rate: 1.0,
            flip_to_failure_rate: 1.0,
            seed: 9,
        };
        for ep in 0..200 {
            for truth in [false, true] {
                assert_eq!(noisy_episode_verdict(truth, &off, ep), truth);
                assert_eq!(noisy_episode_verdict(truth, &all, ep), !truth);
            }
        }
    }

    #[test]
    fn verdicts_are_reproducible() {
        let cfg = NoisyEstimatorConfig::default();
        for ep in 0..100 {
            assert_eq!(noisy_episode_verdict(true, &cfg, ep), noisy_episode_verdict(true, &cfg, ep));
        }
    }

    #[test]
    fn calibration_matches_identities() {
        let cfg = calibrate_flip_rates(0.6, 0.97, 0.678, 0).unwrap();
        assert!((cfg.flip_to_failure_rate - 0.322).abs() < 1e-12);
        let p = 0.6 * 0.678 / (0.6 * 0.678 + 0.4 * cfg.flip_to_success_rate);
        assert!((p - 0.97).abs() < 1e-12);
    }

    #[test]
    fn realized_rates_converge() {
        let cfg = calibrate_flip_rates(0.6, 0.97, 0.678, 4).unwrap();
        let pairs: Vec<_> = (0..20000u64)
            .map(|ep| {
                let truth = ep % 5 < 3;
                (truth, noisy_episode_verdict(truth, &cfg, ep))
            })
            .collect();
        let (p, r) = precision_recall(pairs);
        assert!((p - 0.97).abs() < 0.01, "precision {p}");
        assert!((r - 0.678).abs() < 0.015, "recall {r}");
    }

    #[test]
    fn flipped_traces() {
        let base = ProgressTrace::from_scores(vec![0, 5, 9], vec![0.2, 0.1], 0.95).unwrap();
        let to_success = NoisyEstimatorConfig {
            flip_to_success_rate: 1.0,
            flip_to_failure_rate: 0.0,
            seed: 0,
        };
        let t = apply_noisy_verdict(base, &to_success, 0, 0.95);
        assert!(t.success);
        assert_eq!(t.completion, 0.95);
        assert_eq!(t.peak_timestep, 9);
        assert!(t.interval_scores.iter().all(|&c| c > 0.0));

        let ok = ProgressTrace::from_scores(vec![0, 5, 9], vec![0.5, 1.0], 0.95).unwrap();
        let to_failure = NoisyEstimatorConfig {
            flip_to_success_rate: 0.0,
            flip_to_failure_rate: 1.0,
            seed: 0,
        };
        let t = apply_noisy_verdict(ok, &to_failure, 0, 0.95);
        assert!(!t.success);
        assert!(t.completion < 0.95);
    }
}
