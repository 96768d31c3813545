//! Action chunks and component-aware geometry.
//!
//! An action step is split into a Euclidean translation increment, an
//! axis-angle orientation increment and a gripper command. Aggregating several
//! chunks treats each component on its own terms: linear weighted mean for
//! translation, weighted geodesic mean on SO(3) for orientation, and either a
//! clipped mean or a weighted vote for the gripper.

pub mod so3;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
pub use so3::{geodesic_mean, so3_exp, so3_log, Mat3, Vec3};

/// Per-step action dimension once flattened: 3 translation + 3 rotation + 1 gripper.
pub const STEP_DIM: usize = 7;

/// Top-two class-mass margin (fraction of total mass) below which a discrete
/// gripper vote is treated as a conflict.
pub const GRIPPER_CONFLICT_MARGIN: f64 = 0.1;

const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GripperMode {
    #[default]
    Continuous,
    Discrete,
}

impl GripperMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GripperMode::Continuous => "continuous",
            GripperMode::Discrete => "discrete",
        }
    }

    /// Projects a raw gripper value into this mode's valid range.
    pub fn project(self, g: f64) -> f64 {
        match self {
            GripperMode::Continuous => g.clamp(0.0, 1.0),
            GripperMode::Discrete => {
                if g >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_valid(self, g: f64) -> bool {
        match self {
            GripperMode::Continuous => (0.0..=1.0).contains(&g),
            GripperMode::Discrete => g == 0.0 || g == 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActionStep {
    /// Translation increment in environment length units.
    pub dp: Vec3,
    /// Orientation increment, axis-angle (radians).
    pub dr: Vec3,
    /// Gripper command; 1 means closed.
    pub g: f64,
}

impl ActionStep {
    pub fn new(dp: Vec3, dr: Vec3, g: f64) -> Self {
        Self { dp, dr, g }
    }

    fn to_array(self) -> [f64; STEP_DIM] {
        [
            self.dp.x, self.dp.y, self.dp.z, self.dr.x, self.dr.y, self.dr.z, self.g,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActionChunk {
    pub steps: Vec<ActionStep>,
}

/// Per-component scales that map physical action coordinates to the
/// normalized coordinates a generative policy works in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionScale {
    pub dp: f64,
    pub dr: f64,
    pub g: f64,
}

impl Default for ActionScale {
    fn default() -> Self {
        Self {
            dp: 1.0,
            dr: 1.0,
            g: 1.0,
        }
    }
}

impl ActionChunk {
    pub fn new(steps: Vec<ActionStep>) -> Self {
        Self { steps }
    }

    pub fn zeros(horizon: usize) -> Self {
        Self {
            steps: vec![ActionStep::default(); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Checks the chunk invariants for a given gripper mode.
    pub fn validate(&self, mode: GripperMode) -> Result<()> {
        if self.steps.is_empty() {
            return Err(invalid("action chunk has zero horizon"));
        }
        for (h, s) in self.steps.iter().enumerate() {
            if !s.to_array().iter().all(|v| v.is_finite()) {
                return Err(invalid(format!("step {h}: non-finite action")));
            }
            if s.dr.norm() > std::f64::consts::PI + 1e-12 {
                return Err(invalid(format!("step {h}: |dr| exceeds pi")));
            }
            if !mode.is_valid(s.g) {
                return Err(invalid(format!(
                    "step {h}: gripper {} outside {} range",
                    s.g,
                    mode.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Flattens to `H * STEP_DIM` normalized coordinates, step-major.
    pub fn to_flat(&self, scale: &ActionScale) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps.len() * STEP_DIM);
        for s in &self.steps {
            out.extend_from_slice(&[
                s.dp.x / scale.dp,
                s.dp.y / scale.dp,
                s.dp.z / scale.dp,
                s.dr.x / scale.dr,
                s.dr.y / scale.dr,
                s.dr.z / scale.dr,
                s.g / scale.g,
            ]);
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat) followed by canonicalization:
    /// each `dr` is wrapped to `|dr| <= pi` and `g` projected into `mode`'s range.
    pub fn from_flat(flat: &[f64], scale: &ActionScale, mode: GripperMode) -> Result<Self> {
        if flat.is_empty() || flat.len() % STEP_DIM != 0 {
            return Err(invalid(format!(
                "flat action length {} is not a positive multiple of {STEP_DIM}",
                flat.len()
            )));
        }
        let steps = flat
            .chunks_exact(STEP_DIM)
            .map(|c| {
                let dp = Vec3::new(c[0], c[1], c[2]) * scale.dp;
                let dr = so3::canonicalize(&(Vec3::new(c[3], c[4], c[5]) * scale.dr));
                ActionStep::new(dp, dr, mode.project(c[6] * scale.g))
            })
            .collect();
        Ok(Self { steps })
    }

    /// Total bit-level ordering used to make aggregation order-independent.
    fn bit_cmp(&self, other: &Self) -> Ordering {
        let a = self.steps.iter().flat_map(|s| s.to_array());
        let b = other.steps.iter().flat_map(|s| s.to_array());
        a.map(f64::to_bits).cmp(b.map(f64::to_bits))
    }
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid("empty weight vector"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(invalid(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("empty weight vector"));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Component-aware weighted aggregation of action chunks.
///
/// All sums run in a canonical candidate order (weight descending, then chunk
/// bits), so permuting `(candidates, weights)` together gives a bitwise
/// identical result.
pub fn aggregate_chunks(
    candidates: &[ActionChunk],
    weights: &AggregationWeights,
    gripper_mode: GripperMode,
) -> Result<ActionChunk> {
    if candidates.is_empty() {
        return Err(invalid("aggregate_chunks: no candidates"));
    }
    if candidates.len() != weights.len() {
        return Err(invalid(format!(
            "aggregate_chunks: {} candidates but {} weights",
            candidates.len(),
            weights.len()
        )));
    }
    let horizon = candidates[0].horizon();
    if horizon == 0 {
        return Err(invalid("aggregate_chunks: zero-horizon candidate"));
    }
    if candidates.iter().any(|c| c.horizon() != horizon) {
        return Err(invalid("aggregate_chunks: mixed horizons"));
    }
    let w = weights.as_slice();

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| {
        w[j].total_cmp(&w[i])
            .then_with(|| candidates[i].bit_cmp(&candidates[j]))
    });
    let ws: Vec<f64> = order.iter().map(|&i| w[i]).collect();

    let mut steps = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let mut dp = Vec3::zeros();
        let mut g = 0.0;
        let mut rots = Vec::with_capacity(order.len());
        for (&i, &wi) in order.iter().zip(&ws) {
            let s = &candidates[i].steps[h];
            dp += s.dp * wi;
            g += s.g * wi;
            rots.push(so3_exp(&s.dr)?);
        }
        let dr = so3_log(&geodesic_mean(&rots, &ws)?)?;
        let g = match gripper_mode {
            GripperMode::Continuous => g.clamp(0.0, 1.0),
            GripperMode::Discrete => {
                vote_gripper(order.iter().map(|&i| candidates[i].steps[h].g), &ws)?
            }
        };
        steps.push(ActionStep::new(dp, dr, g));
    }
    Ok(ActionChunk { steps })
}

/// Weighted vote over discrete gripper classes; on a near-tie, falls back to
/// the command of the first (heaviest) candidate.
fn vote_gripper(commands: impl Iterator<Item = f64>, weights: &[f64]) -> Result<f64> {
    let mut mass = [0.0f64; 2];
    let mut first = None;
    for (g, &w) in commands.zip(weights) {
        let class = match g {
            x if x == 0.0 => 0,
            x if x == 1.0 => 1,
            other => return Err(invalid(format!("discrete gripper command {other} not in {{0,1}}"))),
        };
        first.get_or_insert(class);
        mass[class] += w;
    }
    let total = mass[0] + mass[1];
    let winner = if (mass[1] - mass[0]).abs() < GRIPPER_CONFLICT_MARGIN * total {
        first.unwrap_or(0)
    } else if mass[1] > mass[0] {
        1
    } else {
        0
    };
    Ok(winner as f64)
}

/// Component-aware interpolation `(1 - lambda) a + lambda b`.
pub fn interpolate_chunks(
    a: &ActionChunk,
    b: &ActionChunk,
    lambda: f64,
    gripper_mode: GripperMode,
) -> Result<ActionChunk> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("interpolation coefficient {lambda} outside [0,1]")));
    }
    let w = AggregationWeights::new(vec![1.0 - lambda, lambda])?;
    aggregate_chunks(&[a.clone(), b.clone()], &w, gripper_mode)
}
