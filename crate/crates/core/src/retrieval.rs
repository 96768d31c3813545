//! Similarity-gated retrieval, DTW consistency filtering and elite-prior
//! construction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};

use crate::action_space::{aggregate_chunks, ActionChunk, AggregationWeights, GripperMode, Vec3};
use crate::error::{invalid, Error, Result};
use crate::memory::{MemoryEntry, RetrievalKey, SuccessMemory};
use crate::sim::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub gamma_sim: f64,
    pub tau: f64,
    pub dtw_mad_lambda: f64,
    pub rotation_cost_weight: f64,
    pub gripper_cost_weight: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            gamma_sim: 0.9992,
            tau: 0.05,
            dtw_mad_lambda: 3.0,
            rotation_cost_weight: 1.0,
            gripper_cost_weight: 0.25,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("retrieval: {m}")));
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(self.gamma_sim > -1.0 && self.gamma_sim < 1.0) {
            return bad("gamma_sim must lie in (-1, 1)");
        }
        if !(self.dtw_mad_lambda > 0.0) {
            return bad("dtw_mad_lambda must be > 0");
        }
        if !(self.rotation_cost_weight >= 0.0 && self.gripper_cost_weight >= 0.0) {
            return bad("DTW cost weights must be nonnegative");
        }
        Ok(())
    }
}

/// Fixed random linear map from observation features to key space.
#[derive(Debug, Clone)]
pub struct KeyProjector {
    /// Row-major `dim_out x dim_in`.
    matrix: Vec<f64>,
    dim_in: usize,
    dim_out: usize,
    noise_scale: f64,
}

impl KeyProjector {
    /// Gaussian projection with entries of variance `1 / dim_out`, so the
    /// projected norm matches the feature norm in expectation.
    pub fn random(dim_in: usize, dim_out: usize, noise_scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (dim_out as f64).sqrt();
        let matrix = (0..dim_in * dim_out)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * s)
            .collect();
        Self::from_matrix(matrix, dim_in, dim_out, noise_scale)
    }

    pub fn from_matrix(matrix: Vec<f64>, dim_in: usize, dim_out: usize, noise_scale: f64) -> Result<Self> {
        if dim_in == 0 || dim_out == 0 || matrix.len() != dim_in * dim_out {
            return Err(invalid(format!(
                "projection matrix of length {} does not match {dim_out}x{dim_in}",
                matrix.len()
            )));
        }
        if !(noise_scale >= 0.0) || !matrix.iter().all(|v| v.is_finite()) {
            return Err(invalid("projection must be finite with nonnegative noise scale"));
        }
        Ok(Self {
            matrix,
            dim_in,
            dim_out,
            noise_scale,
        })
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }
}

/// Projects the observation features, adds Gaussian perception noise and
/// normalizes. `rng` is only drawn from when the noise scale is positive.
pub fn extract_key(observation: &Observation, projector: &KeyProjector, rng: &mut impl Rng) -> Result<RetrievalKey> {
    let f = &observation.feature_vector;
    if f.len() != projector.dim_in {
        return Err(invalid(format!(
            "feature vector has {} entries, projector expects {}",
            f.len(),
            projector.dim_in
        )));
    }
    let mut y: Vec<f64> = projector.matrix.chunks_exact(projector.dim_in).map(|row| dot(row, f)).collect();
    if projector.noise_scale > 0.0 {
        for v in &mut y {
            *v += projector.noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let norm = dot(&y, &y).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateKey);
    }
    for v in &mut y {
        *v /= norm;
    }
    RetrievalKey::new(y)
}

/// Dot product with eight independent accumulators so the compiler can
/// vectorize; the summation order is fixed, so results are reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateStage {
    SimilarityGated,
    ConsistencyFiltered,
}

#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub entry: &'a MemoryEntry,
    pub similarity: f64,
    pub inconsistency: f64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct CandidateSet<'a> {
    /// Sorted by descending similarity.
    pub candidates: Vec<Candidate<'a>>,
    pub stage: CandidateStage,
}

impl CandidateSet<'_> {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Cosine top-K over the entries of `task_id`, ties going to the most
/// recently inserted entry, followed by the similarity gate.
pub fn retrieve<'a>(
    memory: &'a SuccessMemory,
    key: &RetrievalKey,
    task_id: &str,
    config: &RetrievalConfig,
) -> Result<CandidateSet<'a>> {
    if key.dim() != memory.dim() {
        return Err(invalid(format!(
            "query key dimension {} != memory dimension {}",
            key.dim(),
            memory.dim()
        )));
    }
    let q = key.as_slice();
    let mut top: Vec<(f64, &MemoryEntry)> = Vec::with_capacity(config.k + 1);
    // Newest first: an entry only displaces strictly worse ones, so among
    // equal similarities the newer entry ranks higher.
    let rows = memory.key_rows().chunks_exact(memory.dim().max(1));
    for (row, e) in rows.rev().zip(memory.entries().rev()) {
        let s = dot(q, row).clamp(-1.0, 1.0);
        if s < config.gamma_sim || e.task_id != task_id {
            continue;
        }
        if top.len() == config.k && s <= top[config.k - 1].0 {
            continue;
        }
        let pos = top.iter().position(|(t, _)| *t < s).unwrap_or(top.len());
        top.insert(pos, (s, e));
        top.truncate(config.k);
    }
    Ok(CandidateSet {
        candidates: top
            .into_iter()
            .map(|(similarity, entry)| Candidate {
                entry,
                similarity,
                inconsistency: 0.0,
                weight: 0.0,
            })
            .collect(),
        stage: CandidateStage::SimilarityGated,
    })
}

/// Per-step quantities reused across DTW cost evaluations.
#[derive(Debug, Clone, Copy)]
struct StepGeom {
    dp: Vec3,
    /// Unit quaternion of the step rotation, (w, x, y, z).
    q: [f64; 4],
    g: f64,
}

fn geometry(chunk: &ActionChunk) -> Vec<StepGeom> {
    chunk
        .steps
        .iter()
        .map(|s| StepGeom {
            dp: s.dp,
            q: {
                let u = UnitQuaternion::from_scaled_axis(s.dr);
                [u.w, u.i, u.j, u.k]
            },
            g: s.g,
        })
        .collect()
}

#[inline]
fn step_cost(x: &StepGeom, y: &StepGeom, config: &RetrievalConfig) -> f64 {
    (x.dp - y.dp).norm()
        + config.rotation_cost_weight * relative_angle(&x.q, &y.q)
        + config.gripper_cost_weight * (x.g - y.g).abs()
}

/// Geodesic angle between two unit quaternions. With the sign chosen so the
/// quaternions sit in the same hemisphere, |a - b| = 2 sin(theta/4) and
/// |a + b| = 2 cos(theta/4), which stays accurate near zero and near pi.
#[inline]
fn relative_angle(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3];
    let sgn = if d < 0.0 { -1.0 } else { 1.0 };
    let (mut minus, mut plus) = (0.0, 0.0);
    for i in 0..4 {
        let bi = sgn * b[i];
        minus += (a[i] - bi) * (a[i] - bi);
        plus += (a[i] + bi) * (a[i] + bi);
    }
    4.0 * minus.sqrt().atan2(plus.sqrt())
}

fn dtw_geom(a: &[StepGeom], b: &[StepGeom], config: &RetrievalConfig) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { f64::INFINITY };
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![f64::INFINITY; m];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = best + step_cost(x, y, config);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

/// Classic DTW with match/insert/delete moves; returns the unnormalized
/// optimal path cost.
pub fn dtw_distance(a: &ActionChunk, b: &ActionChunk, config: &RetrievalConfig) -> f64 {
    dtw_geom(&geometry(a), &geometry(b), config)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Drops candidates whose median DTW distance to the others exceeds
/// `median(r) + lambda * MAD(r)`. Sets of size <= 2 pass through.
pub fn consistency_filter<'a>(set: CandidateSet<'a>, config: &RetrievalConfig) -> CandidateSet<'a> {
    let mut candidates = set.candidates;
    let n = candidates.len();
    if n >= 2 {
        let geoms: Vec<_> = candidates.iter().map(|c| geometry(&c.entry.chunk)).collect();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = dtw_geom(&geoms[i], &geoms[j], config);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        let r: Vec<f64> = (0..n)
            .map(|i| {
                let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[i * n + j]).collect();
                median(&others)
            })
            .collect();
        for (c, &ri) in candidates.iter_mut().zip(&r) {
            c.inconsistency = ri;
        }
        if n > 2 {
            let med = median(&r);
            let deviations: Vec<f64> = r.iter().map(|x| (x - med).abs()).collect();
            let mad = median(&deviations);
            if mad > 0.0 {
                let cut = med + config.dtw_mad_lambda * mad;
                // the minimum-r candidate is at most the median, hence always kept
                candidates.retain(|c| c.inconsistency <= cut);
            }
        }
    } else if let Some(c) = candidates.first_mut() {
        c.inconsistency = 0.0;
    }
    CandidateSet {
        candidates,
        stage: CandidateStage::ConsistencyFiltered,
    }
}

/// Max-shifted softmax `exp((s_i - s_max) / tau)`, normalized.
pub fn softmax_weights(similarities: &[f64], tau: f64) -> Result<AggregationWeights> {
    if similarities.is_empty() {
        return Err(invalid("softmax over an empty set"));
    }
    if !(tau > 0.0) {
        return Err(invalid("softmax temperature must be positive"));
    }
    let max = similarities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = similarities.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    AggregationWeights::new(e.into_iter().map(|x| x / z).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EliteActionPrior {
    pub chunk: ActionChunk,
    pub mean_similarity: f64,
    pub dtw_dispersion: f64,
    pub support: usize,
}

/// Aggregates the filtered candidates into the elite prior, filling in each
/// candidate's weight. Returns `None` for an empty set.
pub fn build_elite_prior(
    set: &mut CandidateSet<'_>,
    config: &RetrievalConfig,
    gripper_mode: GripperMode,
) -> Result<Option<EliteActionPrior>> {
    if set.stage != CandidateStage::ConsistencyFiltered {
        return Err(invalid("elite prior needs a consistency-filtered candidate set"));
    }
    if set.is_empty() {
        return Ok(None);
    }
    let sims: Vec<f64> = set.candidates.iter().map(|c| c.similarity).collect();
    let weights = softmax_weights(&sims, config.tau)?;
    for (c, &w) in set.candidates.iter_mut().zip(weights.as_slice()) {
        c.weight = w;
    }
    let chunks: Vec<ActionChunk> = set.candidates.iter().map(|c| c.entry.chunk.clone()).collect();
    let chunk = aggregate_chunks(&chunks, &weights, gripper_mode)?;
    let n = set.len() as f64;
    let mean_similarity = sims.iter().sum::<f64>() / n;
    let dtw_dispersion = if set.len() == 1 {
        0.0
    } else {
        let r: Vec<f64> = set.candidates.iter().map(|c| c.inconsistency).collect();
        let mean = r.iter().sum::<f64>() / n;
        (r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
    };
    Ok(Some(EliteActionPrior {
        chunk,
        mean_similarity,
        dtw_dispersion,
        support: set.len(),
    }))
}

/// Retrieve, filter and aggregate in one call.
pub fn retrieve_prior(
    memory: &SuccessMemory,
    key: &RetrievalKey,
    task_id: &str,
    config: &RetrievalConfig,
    gripper_mode: GripperMode,
) -> Result<Option<EliteActionPrior>> {
    if memory.is_empty() {
        return Ok(None);
    }
    let gated = retrieve(memory, key, task_id, config)?;
    let mut filtered = consistency_filter(gated, config);
    build_elite_prior(&mut filtered, config, gripper_mode)
}
