//! Per-decision timing of the base sampler against the guided pipeline.

use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use super::{run_episode, stream, DeploymentConfig, GuidanceMode, Runtime, KEY_SALT, SAMPLER_SALT};
use crate::error::Result;
use crate::retrieval::{extract_key, retrieve_prior};
use crate::sim::Observation;

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub decisions: usize,
    pub memory_entries: usize,
    /// Decisions for which retrieval produced a prior.
    pub guided_decisions: usize,
    pub base_us: f64,
    pub guided_excluding_retrieval_us: f64,
    pub full_pipeline_us: f64,
    pub guided_ratio: f64,
    pub full_ratio: f64,
}

const DEFAULT_FILL: usize = 3500;
const REPEATS: usize = 3;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fills the memory up to its capacity (3500 entries when unlimited) with
/// unguided episodes, then times `decisions` decisions drawn from guided
/// episodes. Reported times are medians over decisions.
pub fn bench_timing(config: &DeploymentConfig, decisions: usize) -> Result<TimingReport> {
    config.validate()?;
    let rt = Runtime::new(config)?;
    let target = config.memory.capacity.unwrap_or(DEFAULT_FILL);
    let seed = config.seeds[0];

    let mut warm = config.clone();
    warm.guidance_mode = GuidanceMode::Off;
    let mut memory = rt.new_memory(config);
    let mut episode = 0u64;
    let limit = 100 * target as u64 + 1000;
    while memory.len() < target && episode < limit {
        // aborted warm-up episodes simply contribute nothing
        let _ = run_episode(&rt, &warm, &mut memory, seed, episode);
        episode += 1;
    }

    // decision states visited by the guided policy, memory frozen
    let mut guided = config.clone();
    guided.guidance_mode = GuidanceMode::DynamicT0;
    let mut states: Vec<Observation> = Vec::with_capacity(decisions);
    while states.len() < decisions && episode < limit + 10 * decisions as u64 {
        let mut scratch = memory.clone();
        if let Ok((_, obs)) = run_episode(&rt, &guided, &mut scratch, seed, episode) {
            states.extend(obs.into_iter().rev().skip(1).rev());
        }
        episode += 1;
    }
    states.truncate(decisions);

    let task = &rt.task;
    let mode = rt.policy.gripper_mode;
    let mut base_t = Vec::with_capacity(states.len());
    let mut guided_t = Vec::with_capacity(states.len());
    let mut full_t = Vec::with_capacity(states.len());
    let mut hits = 0;
    for (i, obs) in states.iter().enumerate() {
        let mut key_rng = stream(seed, KEY_SALT, u64::MAX - i as u64);
        let key = extract_key(obs, &rt.projector, &mut key_rng)?;
        let prior = retrieve_prior(&memory, &key, &task.task_id, &config.retrieval, mode)?;
        hits += usize::from(prior.is_some());
        let (mut b, mut g, mut f) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
        for rep in 0..REPEATS {
            let id = (i * REPEATS + rep) as u64;

            let mut rng = stream(seed, SAMPLER_SALT, id);
            let t = Instant::now();
            let spec = rt.policy.condition(obs, task)?;
            black_box(rt.sample(config, &spec, None, &mut rng)?);
            b = b.min(t.elapsed().as_secs_f64());

            let mut rng = stream(seed, SAMPLER_SALT, id);
            let t = Instant::now();
            let spec = rt.policy.condition(obs, task)?;
            black_box(rt.decide(&guided, &spec, prior.as_ref(), &mut rng)?);
            g = g.min(t.elapsed().as_secs_f64());

            let mut rng = stream(seed, SAMPLER_SALT, id);
            let mut key_rng = stream(seed, KEY_SALT, id);
            let t = Instant::now();
            let spec = rt.policy.condition(obs, task)?;
            let key = extract_key(obs, &rt.projector, &mut key_rng)?;
            let p = retrieve_prior(&memory, &key, &task.task_id, &config.retrieval, mode)?;
            black_box(rt.decide(&guided, &spec, p.as_ref(), &mut rng)?);
            f = f.min(t.elapsed().as_secs_f64());
        }
        base_t.push(b * 1e6);
        guided_t.push(g * 1e6);
        full_t.push(f * 1e6);
    }
    let (base_us, guided_us, full_us) = (median(base_t), median(guided_t), median(full_t));
    Ok(TimingReport {
        decisions: states.len(),
        memory_entries: memory.len(),
        guided_decisions: hits,
        base_us,
        guided_excluding_retrieval_us: guided_us,
        full_pipeline_us: full_us,
        guided_ratio: guided_us / base_us,
        full_ratio: full_us / base_us,
    })
}
