//! Online success memory.
//!
//! During an episode every decision step is buffered together with the
//! observations it produced. When the episode ends, interval progress scores
//! are accumulated into a trajectory-level completion score; successful
//! episodes contribute their pre-peak prefix to a bounded FIFO store.

mod snapshot;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::action_space::{ActionChunk, GripperMode};
use crate::error::{invalid, Error, Result};
use crate::progress::ProgressEstimator;
use crate::sim::{Observation, TaskSpec};

pub use snapshot::{inspect_snapshot, load_snapshot, save_snapshot, SnapshotReport};

const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    /// Evaluation interval in decision steps.
    pub delta: usize,
    /// Success threshold on the completion score.
    pub eta: f64,
    /// Maximum number of stored entries; `None` means unlimited.
    pub capacity: Option<usize>,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            delta: 5,
            eta: 0.95,
            capacity: Some(3500),
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta == 0 {
            return Err(Error::Config("memory.delta must be >= 1".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("memory.eta = {} outside (0, 1]", self.eta)));
        }
        Ok(())
    }
}

/// Unit-norm retrieval key.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalKey(Vec<f64>);

impl RetrievalKey {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || !values.iter().all(|v| v.is_finite()) {
            return Err(invalid("retrieval key must be a nonempty finite vector"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(invalid(format!("retrieval key norm {norm} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub key: RetrievalKey,
    pub chunk: ActionChunk,
    pub episode_id: u64,
    pub timestep: usize,
    pub task_id: String,
}

/// Per-episode staging area: one entry per decision step and the
/// observations `o_0 .. o_T` surrounding them.
#[derive(Debug, Clone)]
pub struct EpisodeBuffer {
    episode_id: u64,
    task_id: String,
    entries: Vec<MemoryEntry>,
    observations: Vec<Observation>,
}

impl EpisodeBuffer {
    pub fn new(episode_id: u64, initial: Observation) -> Self {
        Self {
            episode_id,
            task_id: initial.task_id.clone(),
            entries: Vec::new(),
            observations: vec![initial],
        }
    }

    /// Records the decision taken at the current timestep and the
    /// observation that followed it.
    pub fn record(&mut self, key: RetrievalKey, chunk: ActionChunk, next: Observation) {
        let timestep = self.entries.len();
        self.entries.push(MemoryEntry {
            key,
            chunk,
            episode_id: self.episode_id,
            timestep,
            task_id: self.task_id.clone(),
        });
        self.observations.push(next);
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    /// Number of decision steps `T`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn episode_id(&self) -> u64 {
        self.episode_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgressTrace {
    pub eval_timesteps: Vec<usize>,
    /// One score per evaluation interval (`eval_timesteps.len() - 1` of them).
    pub interval_scores: Vec<f64>,
    /// Accumulated progress at each evaluation timestep; starts at 0.
    pub accumulated: Vec<f64>,
    pub completion: f64,
    pub peak_timestep: usize,
    pub success: bool,
}

impl ProgressTrace {
    /// Accumulates `scores` over `eval_timesteps` and derives completion,
    /// earliest peak and verdict.
    pub fn from_scores(eval_timesteps: Vec<usize>, scores: Vec<f64>, eta: f64) -> Result<Self> {
        if eval_timesteps.len() != scores.len() + 1 {
            return Err(invalid(format!(
                "{} evaluation timesteps need {} interval scores, got {}",
                eval_timesteps.len(),
                eval_timesteps.len().saturating_sub(1),
                scores.len()
            )));
        }
        let mut accumulated = Vec::with_capacity(eval_timesteps.len());
        accumulated.push(0.0);
        for &c in &scores {
            let prev = *accumulated.last().unwrap_or(&0.0);
            accumulated.push(accumulate_progress(prev, c)?);
        }
        let (peak_idx, completion) = accumulated
            .iter()
            .enumerate()
            .fold((0, accumulated[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        Ok(Self {
            peak_timestep: eval_timesteps[peak_idx],
            success: completion >= eta,
            eval_timesteps,
            interval_scores: scores,
            accumulated,
            completion,
        })
    }
}

/// `clamp(v_prev + (1 - v_prev) * c, 0, 1)`.
pub fn accumulate_progress(v_prev: f64, c: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v_prev) {
        return Err(invalid(format!("previous progress {v_prev} outside [0, 1]")));
    }
    if !(-1.0..=1.0).contains(&c) {
        return Err(invalid(format!("interval score {c} outside [-1, 1]")));
    }
    Ok((v_prev + (1.0 - v_prev) * c).clamp(0.0, 1.0))
}

/// `{0, delta, 2 delta, ...} ∪ {t_end}`.
pub fn evaluation_timesteps(t_end: usize, delta: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..t_end).step_by(delta.max(1)).collect();
    ts.push(t_end);
    ts
}

/// Scores every evaluation interval of a finished episode and accumulates
/// the result.
pub fn evaluate_trajectory(
    buffer: &EpisodeBuffer,
    estimator: &dyn ProgressEstimator,
    task: &TaskSpec,
    config: &MemoryConfig,
) -> Result<ProgressTrace> {
    config.validate()?;
    let t_end = buffer.len();
    if t_end == 0 {
        return Err(invalid("cannot evaluate an empty episode buffer"));
    }
    let obs = buffer.observations();
    if obs.len() != t_end + 1 {
        return Err(invalid(format!(
            "buffer holds {} observations for {t_end} steps",
            obs.len()
        )));
    }
    let ts = evaluation_timesteps(t_end, config.delta);
    let scores = ts
        .windows(2)
        .map(|w| {
            estimator
                .estimate(&obs[w[0]], &obs[w[1]], task)
                .map_err(|e| Error::Evaluation {
                    timestep: w[1],
                    reason: e.to_string(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    ProgressTrace::from_scores(ts, scores, config.eta)
}

/// Which part of an episode gets written to memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CommitPolicy {
    /// Successful episodes, entries up to the progress peak.
    #[default]
    PrefixVerified,
    /// Successful episodes, every entry.
    FullVerified,
    /// Every episode, every entry, no verdict check.
    StoreAllUnverified,
}

/// Bounded FIFO store of successful decision steps.
#[derive(Debug, Clone)]
pub struct SuccessMemory {
    entries: VecDeque<MemoryEntry>,
    /// Keys copied into one flat buffer so scans stay cache friendly. The
    /// first `dead` rows belong to evicted entries and are compacted lazily.
    keys: Vec<f64>,
    dead: usize,
    capacity: Option<usize>,
    dim: usize,
    horizon: usize,
    gripper_mode: GripperMode,
}

impl SuccessMemory {
    pub fn new(capacity: Option<usize>, dim: usize, horizon: usize, gripper_mode: GripperMode) -> Self {
        Self {
            entries: VecDeque::new(),
            keys: Vec::new(),
            dead: 0,
            capacity,
            dim,
            horizon,
            gripper_mode,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gripper_mode(&self) -> GripperMode {
        self.gripper_mode
    }

    /// Entries in insertion order, oldest first.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = &MemoryEntry> + DoubleEndedIterator {
        self.entries.iter()
    }

    pub fn get(&self, index: usize) -> Option<&MemoryEntry> {
        self.entries.get(index)
    }

    /// All keys, oldest first, as one row-major `len() x dim()` slice.
    pub fn key_rows(&self) -> &[f64] {
        &self.keys[self.dead * self.dim..]
    }

    /// Changes the capacity, evicting the oldest entries if needed.
    pub fn set_capacity(&mut self, capacity: Option<usize>) {
        self.capacity = capacity;
        self.evict();
    }

    /// Appends one entry, evicting the oldest when over capacity.
    pub fn push(&mut self, entry: MemoryEntry) -> Result<()> {
        if entry.key.dim() != self.dim {
            return Err(invalid(format!(
                "entry key dimension {} != memory dimension {}",
                entry.key.dim(),
                self.dim
            )));
        }
        if entry.chunk.horizon() != self.horizon {
            return Err(invalid(format!(
                "entry horizon {} != memory horizon {}",
                entry.chunk.horizon(),
                self.horizon
            )));
        }
        entry.chunk.validate(self.gripper_mode)?;
        self.keys.extend_from_slice(entry.key.as_slice());
        self.entries.push_back(entry);
        self.evict();
        Ok(())
    }

    fn evict(&mut self) {
        if let Some(cap) = self.capacity {
            while self.entries.len() > cap {
                self.entries.pop_front();
                self.dead += 1;
            }
        }
        if self.dead > 0 && self.dead >= self.entries.len() {
            self.keys.drain(..self.dead * self.dim);
            self.dead = 0;
        }
    }
}

impl PartialEq for SuccessMemory {
    fn eq(&self, other: &Self) -> bool {
        self.capacity == other.capacity
            && self.dim == other.dim
            && self.horizon == other.horizon
            && self.gripper_mode == other.gripper_mode
            && self.entries == other.entries
    }
}

/// Writes the verified pre-peak prefix of `buffer` to memory. Returns the
/// number of entries appended.
pub fn commit_episode(memory: &mut SuccessMemory, buffer: &EpisodeBuffer, trace: &ProgressTrace) -> Result<usize> {
    commit_with_policy(memory, buffer, trace, CommitPolicy::PrefixVerified)
}

pub fn commit_with_policy(
    memory: &mut SuccessMemory,
    buffer: &EpisodeBuffer,
    trace: &ProgressTrace,
    policy: CommitPolicy,
) -> Result<usize> {
    if trace.eval_timesteps.last() != Some(&buffer.len()) {
        return Err(invalid("progress trace does not belong to this buffer"));
    }
    let limit = match policy {
        CommitPolicy::PrefixVerified if trace.success => trace.peak_timestep,
        CommitPolicy::FullVerified if trace.success => usize::MAX,
        CommitPolicy::StoreAllUnverified => usize::MAX,
        _ => return Ok(0),
    };
    let mut added = 0;
    for e in buffer.entries().iter().take_while(|e| e.timestep <= limit) {
        memory.push(e.clone())?;
        added += 1;
    }
    Ok(added)
}
