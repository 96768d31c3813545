//! Continuous-deployment runner, ablation sweeps and timing benchmark.
//!
//! One deployment run owns one environment stream, one memory and one set
//! of random streams per seed. Episodes inside a run are strictly
//! sequential because the memory evolves between them; seeds run in
//! parallel.

mod bench;
mod output;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action_space::{interpolate_chunks, ActionChunk};
use crate::error::{Error, Result};
use crate::guidance::{
    diffusion_sample_from, flow_sample_from, prior_start_time, DiffusionSchedule, GuidanceConfig, GuidedSample,
};
use crate::memory::{commit_with_policy, evaluate_trajectory, CommitPolicy, EpisodeBuffer, MemoryConfig, SuccessMemory};
use crate::policy::{CompetenceParams, ConditionedPolicy, ToyPolicy};
use crate::progress::{apply_noisy_verdict, EstimatorConfig, OracleEstimator};
use crate::retrieval::{extract_key, retrieve_prior, EliteActionPrior, KeyProjector, RetrievalConfig};
use crate::sim::{find_task, Observation, SimEnv, TaskSpec};

pub use bench::{bench_timing, TimingReport};
pub use output::{write_ablation_outputs, write_deployment_outputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Flow,
    Diffusion,
}

/// How the retrieved prior is used at each decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuidanceMode {
    /// Plain sampler; memory is still built but never read.
    Off,
    #[default]
    DynamicT0,
    FixedT0 {
        value: f64,
    },
    /// Execute the prior verbatim.
    DirectReplay,
    /// Sample without guidance, then blend `(1 - lambda) a + lambda prior`.
    OutputInterp {
        lambda: f64,
    },
}

impl GuidanceMode {
    pub fn label(&self) -> String {
        match self {
            Self::Off => "off".into(),
            Self::DynamicT0 => "dynamic_t0".into(),
            Self::FixedT0 { value } => format!("fixed_t0({value})"),
            Self::DirectReplay => "direct_replay".into(),
            Self::OutputInterp { lambda } => format!("output_interp({lambda})"),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Self::FixedT0 { value } if !(value > 0.0 && value <= 1.0) => {
                Err(Error::Config(format!("fixed_t0 value {value} outside (0, 1]")))
            }
            Self::OutputInterp { lambda } if !(0.0..=1.0).contains(&lambda) => {
                Err(Error::Config(format!("output_interp lambda {lambda} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    fn reads_memory(&self) -> bool {
        !matches!(self, Self::Off)
    }
}

/// Retrieval key construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyConfig {
    pub dim: usize,
    /// Standard deviation of the perception noise added before normalizing.
    pub noise_scale: f64,
    /// Seed of the fixed projection.
    pub projector_seed: u64,
}

impl Default for KeyConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            noise_scale: 0.0005,
            projector_seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeploymentConfig {
    pub task_id: String,
    /// Replaces the built-in task definition when present.
    pub task: Option<TaskSpec>,
    pub n_episodes: usize,
    pub seeds: Vec<u64>,
    pub policy: PolicyKind,
    pub guidance_mode: GuidanceMode,
    pub estimator: EstimatorConfig,
    pub commit: CommitPolicy,
    pub memory: MemoryConfig,
    pub retrieval: RetrievalConfig,
    pub guidance: GuidanceConfig,
    pub diffusion: DiffusionSchedule,
    pub mixture: CompetenceParams,
    pub key: KeyConfig,
    /// Seed of the frozen policy's encoder weights.
    pub policy_seed: u64,
    /// Aborted episodes tolerated per run before the CLI reports failure.
    pub abort_budget: Option<usize>,
}

impl Default for DeploymentConfig {
    fn default() -> Self {
        Self {
            task_id: "T2".into(),
            task: None,
            n_episodes: 300,
            seeds: (0..5).collect(),
            policy: PolicyKind::Flow,
            guidance_mode: GuidanceMode::DynamicT0,
            estimator: EstimatorConfig::Oracle,
            commit: CommitPolicy::PrefixVerified,
            memory: MemoryConfig::default(),
            retrieval: RetrievalConfig::default(),
            guidance: GuidanceConfig::default(),
            diffusion: DiffusionSchedule::default(),
            mixture: CompetenceParams::default(),
            key: KeyConfig::default(),
            policy_seed: 0,
            abort_budget: None,
        }
    }
}

impl DeploymentConfig {
    pub fn resolve_task(&self) -> Result<TaskSpec> {
        let task = match &self.task {
            Some(t) => {
                if t.task_id != self.task_id {
                    return Err(Error::Config(format!(
                        "task override has id {} but task_id is {}",
                        t.task_id, self.task_id
                    )));
                }
                t.clone()
            }
            None => find_task(&self.task_id).map_err(|e| Error::Config(e.to_string()))?,
        };
        task.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve_task()?;
        if self.n_episodes == 0 {
            return Err(Error::Config("n_episodes must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.key.dim == 0 || !(self.key.noise_scale >= 0.0) {
            return Err(Error::Config("key.dim must be >= 1 and key.noise_scale >= 0".into()));
        }
        self.guidance_mode.validate()?;
        self.memory.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.retrieval.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.guidance.validate()?;
        self.mixture.validate()?;
        self.diffusion.rebuilt()?;
        if let EstimatorConfig::Noisy(n) = &self.estimator {
            n.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    pub seed: u64,
    pub true_success: bool,
    /// Verdict of the configured progress estimator.
    pub verdict: bool,
    pub completion: f64,
    pub peak_timestep: usize,
    pub memory_size_after: usize,
    pub chunks_executed: usize,
    pub wall_time_ms: f64,
    pub mean_t0_used: Option<f64>,
    pub outcome: String,
    /// Set when the episode was aborted by an error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Records of one seed's deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<EpisodeRecord>,
}

impl SeedRun {
    pub fn final_success(&self) -> f64 {
        cumulative_success(&self.records).last().copied().unwrap_or(0.0)
    }

    pub fn aborted(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Cumulative success ratio after each episode.
pub fn cumulative_success(records: &[EpisodeRecord]) -> Vec<f64> {
    let mut hits = 0usize;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            hits += usize::from(r.true_success);
            hits as f64 / (i + 1) as f64
        })
        .collect()
}

/// True when no `window`-episode stretch (every start position) deviates
/// from the overall success rate by more than three binomial standard
/// deviations.
pub fn is_stationary(successes: &[bool], window: usize) -> bool {
    if successes.is_empty() || window == 0 || window > successes.len() {
        return true;
    }
    let p = successes.iter().filter(|s| **s).count() as f64 / successes.len() as f64;
    let band = 3.0 * (p * (1.0 - p) / window as f64).sqrt();
    let mut hits = successes[..window].iter().filter(|s| **s).count();
    let mut ok = true;
    for start in 0..=successes.len() - window {
        if start > 0 {
            hits = hits + usize::from(successes[start + window - 1]) - usize::from(successes[start - 1]);
        }
        let q = hits as f64 / window as f64;
        ok &= (q - p).abs() <= band + 1e-12;
    }
    ok
}

const ENV_SALT: u64 = 0x656e_765f_7374_7265;
const SAMPLER_SALT: u64 = 0x7361_6d70_6c65_7200;
const KEY_SALT: u64 = 0x6b65_795f_6e6f_6973;
const VERDICT_SALT: u64 = 0x7665_7264_6963_7400;

/// Independent random stream for one purpose of one episode of one seed.
fn stream(seed: u64, salt: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(episode);
    rng
}

/// Everything a run needs that does not change between episodes.
pub(crate) struct Runtime {
    pub task: TaskSpec,
    pub policy: ToyPolicy,
    pub projector: KeyProjector,
    pub diffusion: DiffusionSchedule,
}

impl Runtime {
    pub fn new(config: &DeploymentConfig) -> Result<Self> {
        let task = config.resolve_task()?;
        let feature_dim = task.feature_dim();
        Ok(Self {
            policy: ToyPolicy::new(config.mixture, &task, config.policy_seed)?,
            projector: KeyProjector::random(feature_dim, config.key.dim, config.key.noise_scale, config.key.projector_seed)?,
            diffusion: config.diffusion.rebuilt()?,
            task,
        })
    }

    pub fn new_memory(&self, config: &DeploymentConfig) -> SuccessMemory {
        SuccessMemory::new(
            config.memory.capacity,
            config.key.dim,
            self.task.horizon,
            self.policy.gripper_mode,
        )
    }

    /// Samples from the policy, optionally started from `guide`.
    pub fn sample(
        &self,
        config: &DeploymentConfig,
        spec: &ConditionedPolicy<'_>,
        guide: Option<(&ActionChunk, f64)>,
        rng: &mut impl Rng,
    ) -> Result<GuidedSample> {
        let scale = self.policy.action_scale();
        let mode = self.policy.gripper_mode;
        match config.policy {
            PolicyKind::Flow => flow_sample_from(spec, guide, config.guidance.num_steps, &scale, mode, rng),
            PolicyKind::Diffusion => diffusion_sample_from(spec, guide, &self.diffusion, &scale, mode, rng),
        }
    }

    /// One decision: the chunk to execute and the start time used, if any.
    pub fn decide(
        &self,
        config: &DeploymentConfig,
        spec: &ConditionedPolicy<'_>,
        prior: Option<&EliteActionPrior>,
        rng: &mut impl Rng,
    ) -> Result<(ActionChunk, Option<f64>)> {
        let Some(prior) = prior else {
            return Ok((self.sample(config, spec, None, rng)?.chunk, None));
        };
        match config.guidance_mode {
            GuidanceMode::Off => Ok((self.sample(config, spec, None, rng)?.chunk, None)),
            GuidanceMode::DynamicT0 => {
                let t0 = prior_start_time(prior, &config.guidance);
                let s = self.sample(config, spec, Some((&prior.chunk, t0)), rng)?;
                Ok((s.chunk, s.t0))
            }
            GuidanceMode::FixedT0 { value } => {
                let s = self.sample(config, spec, Some((&prior.chunk, value)), rng)?;
                Ok((s.chunk, s.t0))
            }
            GuidanceMode::DirectReplay => Ok((prior.chunk.clone(), Some(0.0))),
            GuidanceMode::OutputInterp { lambda } => {
                let a = self.sample(config, spec, None, rng)?.chunk;
                Ok((interpolate_chunks(&a, &prior.chunk, lambda, self.policy.gripper_mode)?, None))
            }
        }
    }
}

struct EpisodeRng {
    sampler: ChaCha8Rng,
    key: ChaCha8Rng,
}

fn run_episode(
    rt: &Runtime,
    config: &DeploymentConfig,
    memory: &mut SuccessMemory,
    seed: u64,
    episode: u64,
) -> Result<(EpisodeRecord, Vec<Observation>)> {
    let start = Instant::now();
    let env_seed: u64 = stream(seed, ENV_SALT, episode).random();
    let mut rng = EpisodeRng {
        sampler: stream(seed, SAMPLER_SALT, episode),
        key: stream(seed, KEY_SALT, episode),
    };
    let task = &rt.task;
    let (mut env, mut obs) = SimEnv::reset(task, env_seed)?;
    let mut buffer = EpisodeBuffer::new(episode, obs.clone());
    let mut status = env.status();
    let mut t0_sum = 0.0;
    let mut t0_count = 0usize;
    while !status.done {
        let spec = rt.policy.condition(&obs, task)?;
        let key = extract_key(&obs, &rt.projector, &mut rng.key)?;
        let prior = if config.guidance_mode.reads_memory() {
            retrieve_prior(memory, &key, &task.task_id, &config.retrieval, rt.policy.gripper_mode)?
        } else {
            None
        };
        let (chunk, t0) = rt.decide(config, &spec, prior.as_ref(), &mut rng.sampler)?;
        if let Some(t0) = t0 {
            t0_sum += t0;
            t0_count += 1;
        }
        (obs, status) = env.step_chunk(&chunk)?;
        buffer.record(key, chunk, obs.clone());
    }
    let mut trace = evaluate_trajectory(&buffer, &OracleEstimator, task, &config.memory)?;
    if let EstimatorConfig::Noisy(noisy) = &config.estimator {
        let cfg = crate::progress::NoisyEstimatorConfig {
            seed: noisy.seed ^ seed.wrapping_mul(VERDICT_SALT),
            ..*noisy
        };
        trace = apply_noisy_verdict(trace, &cfg, episode, config.memory.eta);
    }
    commit_with_policy(memory, &buffer, &trace, config.commit)?;
    let record = EpisodeRecord {
        episode_id: episode,
        seed,
        true_success: status.true_success,
        verdict: trace.success,
        completion: status.completion_fraction,
        peak_timestep: trace.peak_timestep,
        memory_size_after: memory.len(),
        chunks_executed: status.step_count,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        mean_t0_used: (t0_count > 0).then(|| t0_sum / t0_count as f64),
        outcome: status.outcome.as_str().into(),
        error: None,
    };
    Ok((record, buffer.observations().to_vec()))
}

/// Runs every episode of one seed, recording failures instead of stopping.
pub fn run_seed(config: &DeploymentConfig, seed: u64) -> Result<SeedRun> {
    config.validate()?;
    let rt = Runtime::new(config)?;
    let mut memory = rt.new_memory(config);
    Ok(run_seed_with(&rt, config, &mut memory, seed))
}

pub(crate) fn run_seed_with(rt: &Runtime, config: &DeploymentConfig, memory: &mut SuccessMemory, seed: u64) -> SeedRun {
    let records = (0..config.n_episodes as u64)
        .map(|episode| {
            let start = Instant::now();
            match run_episode(rt, config, memory, seed, episode) {
                Ok((record, _)) => record,
                Err(e) => EpisodeRecord {
                    episode_id: episode,
                    seed,
                    true_success: false,
                    verdict: false,
                    completion: 0.0,
                    peak_timestep: 0,
                    memory_size_after: memory.len(),
                    chunks_executed: 0,
                    wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
                    mean_t0_used: None,
                    outcome: "aborted".into(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    SeedRun { seed, records }
}

/// Runs the deployment for every configured seed, seeds in parallel.
pub fn run_deployment(config: &DeploymentConfig) -> Result<Vec<SeedRun>> {
    config.validate()?;
    let rt = Runtime::new(config)?;
    Ok(config
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut memory = rt.new_memory(config);
            run_seed_with(&rt, config, &mut memory, seed)
        })
        .collect())
}

/// Final memory of a single-seed run, for snapshots.
pub fn run_seed_keep_memory(config: &DeploymentConfig, seed: u64) -> Result<(SeedRun, SuccessMemory)> {
    config.validate()?;
    let rt = Runtime::new(config)?;
    let mut memory = rt.new_memory(config);
    let run = run_seed_with(&rt, config, &mut memory, seed);
    Ok((run, memory))
}

/// Axes of an ablation sweep. Empty axes keep the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AblationAxes {
    pub guidance_mode: Vec<GuidanceMode>,
    /// `null` stands for unlimited capacity.
    pub capacity: Vec<Option<usize>>,
    pub commit: Vec<CommitPolicy>,
    pub estimator: Vec<EstimatorConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AblationMatrix {
    pub base: DeploymentConfig,
    pub axes: AblationAxes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub name: String,
    pub config: DeploymentConfig,
    pub runs: Vec<SeedRun>,
}

impl CellResult {
    pub fn finals(&self) -> Vec<f64> {
        self.runs.iter().map(SeedRun::final_success).collect()
    }

    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.finals())
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().cloned().map(Some).collect()
    }
    .into_iter()
    .map(|v| v.or_else(|| Some(base.clone())))
    .collect()
}

fn estimator_label(e: &EstimatorConfig) -> &'static str {
    match e {
        EstimatorConfig::Oracle => "oracle",
        EstimatorConfig::Noisy(_) => "noisy",
    }
}

fn commit_label(c: CommitPolicy) -> &'static str {
    match c {
        CommitPolicy::PrefixVerified => "prefix",
        CommitPolicy::FullVerified => "full",
        CommitPolicy::StoreAllUnverified => "unverified",
    }
}

/// Expands the cartesian product of the declared axes.
pub fn expand_matrix(matrix: &AblationMatrix) -> Result<Vec<(String, DeploymentConfig)>> {
    matrix.base.validate()?;
    let base = &matrix.base;
    let mut cells = Vec::new();
    for mode in axis(&matrix.axes.guidance_mode, base.guidance_mode) {
        for cap in axis(&matrix.axes.capacity, base.memory.capacity) {
            for commit in axis(&matrix.axes.commit, base.commit) {
                for est in axis(&matrix.axes.estimator, base.estimator) {
                    let (mode, cap, commit, est) = (mode.unwrap(), cap.unwrap(), commit.unwrap(), est.unwrap());
                    let mut cfg = base.clone();
                    cfg.guidance_mode = mode;
                    cfg.memory.capacity = cap;
                    cfg.commit = commit;
                    cfg.estimator = est;
                    cfg.validate()?;
                    let cap_label = cap.map_or("unlimited".to_string(), |c| c.to_string());
                    let name = format!(
                        "{}|cap={}|{}|{}",
                        mode.label(),
                        cap_label,
                        commit_label(commit),
                        estimator_label(&est)
                    );
                    cells.push((name, cfg));
                }
            }
        }
    }
    Ok(cells)
}

/// Runs every cell of the matrix over all seeds.
pub fn run_ablation(matrix: &AblationMatrix) -> Result<Vec<CellResult>> {
    expand_matrix(matrix)?
        .into_iter()
        .map(|(name, config)| {
            let runs = run_deployment(&config)?;
            Ok(CellResult { name, config, runs })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: GuidanceMode) -> DeploymentConfig {
        DeploymentConfig {
            n_episodes: 12,
            seeds: vec![3],
            guidance_mode: mode,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        DeploymentConfig::default().validate().unwrap();
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        assert!(serde_json::from_str::<DeploymentConfig>(r#"{"task_id": "T1", "bogus": 1}"#).is_err());
        let c: DeploymentConfig =
            serde_json::from_str(r#"{"task_id": "T1", "guidance_mode": {"kind": "fixed_t0", "value": 0.5}}"#).unwrap();
        assert_eq!(c.guidance_mode, GuidanceMode::FixedT0 { value: 0.5 });
    }

    #[test]
    fn invalid_modes_rejected() {
        assert!(small(GuidanceMode::FixedT0 { value: 0.0 }).validate().is_err());
        assert!(small(GuidanceMode::OutputInterp { lambda: 1.5 }).validate().is_err());
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = small(GuidanceMode::DynamicT0);
        let strip = |r: SeedRun| {
            r.records
                .into_iter()
                .map(|mut e| {
                    e.wall_time_ms = 0.0;
                    e
                })
                .collect::<Vec<_>>()
        };
        let a = strip(run_seed(&cfg, 3).unwrap());
        let b = strip(run_seed(&cfg, 3).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn first_episode_matches_off_mode() {
        let off = run_seed(&small(GuidanceMode::Off), 5).unwrap();
        let dynamic = run_seed(&small(GuidanceMode::DynamicT0), 5).unwrap();
        let (a, b) = (&off.records[0], &dynamic.records[0]);
        assert_eq!(
            (a.true_success, a.completion, a.chunks_executed),
            (b.true_success, b.completion, b.chunks_executed)
        );
    }

    #[test]
    fn perfect_policy_always_succeeds() {
        let mut cfg = small(GuidanceMode::Off);
        cfg.mixture.p_err = 0.0;
        cfg.n_episodes = 30;
        let run = run_seed(&cfg, 1).unwrap();
        assert!(run.records.iter().all(|r| r.true_success), "{:?}", run.records);
        assert!(run.records.last().unwrap().memory_size_after > 0);
    }

    #[test]
    fn stationarity_check() {
        let steady: Vec<bool> = (0..300).map(|i| i % 3 != 0).collect();
        assert!(is_stationary(&steady, 100));
        let drift: Vec<bool> = (0..300).map(|i| i >= 150).collect();
        assert!(!is_stationary(&drift, 100));
    }

    #[test]
    fn matrix_expansion_is_cartesian() {
        let m = AblationMatrix {
            base: small(GuidanceMode::Off),
            axes: AblationAxes {
                guidance_mode: vec![GuidanceMode::Off, GuidanceMode::DynamicT0],
                capacity: vec![Some(0), None],
                ..Default::default()
            },
        };
        let cells = expand_matrix(&m).unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells.iter().any(|(n, c)| n.contains("cap=unlimited") && c.memory.capacity.is_none()));
    }
}
