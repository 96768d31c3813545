//! Frozen toy policy: an analytic Gaussian mixture over flattened action
//! chunks, exposed both as a flow-matching velocity field and as a
//! diffusion noise predictor.
//!
//! The mixture is rebuilt for every observation. Its dominant mode is a
//! scripted expert chunk; the remaining mass sits on distractor modes
//! (grabbing a look-alike object, near misses, misplaced releases), so the
//! policy fails by picking the wrong mode rather than by being imprecise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::action_space::so3::{exp_map, log_map};
use crate::action_space::{ActionChunk, ActionScale, ActionStep, GripperMode, Mat3, Vec3, STEP_DIM};
use crate::error::{invalid, Error, Result};
use crate::sim::{yaw_rotation, ObjectStatus, Observation, TaskSpec};

/// Evaluates the marginal velocity `v(x, t)` of a flow that runs from noise
/// at `t = 1` to data at `t = 0`.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]);
}

/// Predicts the noise component of `x_n = sqrt(ab) x_0 + sqrt(1 - ab) eps`.
pub trait NoisePredictor {
    fn dim(&self) -> usize;
    fn predict_noise(&self, x: &[f64], alpha_bar: f64, out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Correct,
    WrongObject,
    NearMiss,
    Misplace,
    Hesitate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureMode {
    pub mean: Vec<f64>,
    pub mass: f64,
    pub kind: ModeKind,
}

/// Isotropic Gaussian mixture in normalized chunk coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub modes: Vec<MixtureMode>,
    pub sigma: f64,
}

impl MixtureSpec {
    pub fn new(modes: Vec<MixtureMode>, sigma: f64) -> Result<Self> {
        if modes.is_empty() {
            return Err(invalid("mixture needs at least one mode"));
        }
        if !(sigma > 0.0) {
            return Err(invalid("mixture sigma must be positive"));
        }
        let d = modes[0].mean.len();
        if d == 0 || modes.iter().any(|m| m.mean.len() != d || !(m.mass >= 0.0)) {
            return Err(invalid("mixture modes must share a positive dimension and have nonnegative mass"));
        }
        let total: f64 = modes.iter().map(|m| m.mass).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mixture masses sum to {total}")));
        }
        Ok(Self { modes, sigma })
    }

    /// Single Gaussian `N(mean, sigma^2 I)`.
    pub fn single(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        Self::new(
            vec![MixtureMode {
                mean,
                mass: 1.0,
                kind: ModeKind::Correct,
            }],
            sigma,
        )
    }

    pub fn dim(&self) -> usize {
        self.modes[0].mean.len()
    }

    /// Posterior mode responsibilities for `x ~ sum_m w_m N(a mu_m, var I)`.
    pub fn responsibilities(&self, x: &[f64], a: f64, var: f64) -> Vec<f64> {
        let logits: Vec<f64> = self
            .modes
            .iter()
            .map(|m| {
                if m.mass <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let d2: f64 = x.iter().zip(&m.mean).map(|(xi, mi)| (xi - a * mi).powi(2)).sum();
                m.mass.ln() - d2 / (2.0 * var)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    pub fn sample_data(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.modes.len() - 1;
        for (i, m) in self.modes.iter().enumerate() {
            acc += m.mass;
            if u < acc {
                pick = i;
                break;
            }
        }
        self.modes[pick]
            .mean
            .iter()
            .map(|mu| mu + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

impl VelocityField for MixtureSpec {
    fn dim(&self) -> usize {
        MixtureSpec::dim(self)
    }

    /// Closed-form marginal velocity of `x_t = (1 - t) x_0 + t eps`:
    /// `sum_m w_m (E[eps | x, m] - E[x_0 | x, m])`.
    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let s2 = self.sigma * self.sigma;
        let a = 1.0 - t;
        let d = a * a * s2 + t * t;
        let w = self.responsibilities(x, a, d);
        let (ce, cx) = (t / d, a * s2 / d);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (m, wm) in self.modes.iter().zip(w) {
            if wm == 0.0 {
                continue;
            }
            for ((o, xi), mu) in out.iter_mut().zip(x).zip(&m.mean) {
                let r = xi - a * mu;
                *o += wm * (ce * r - (mu + cx * r));
            }
        }
    }
}

impl NoisePredictor for MixtureSpec {
    fn dim(&self) -> usize {
        MixtureSpec::dim(self)
    }

    fn predict_noise(&self, x: &[f64], alpha_bar: f64, out: &mut [f64]) {
        let s2 = self.sigma * self.sigma;
        let sa = alpha_bar.sqrt();
        let var = alpha_bar * s2 + 1.0 - alpha_bar;
        let w = self.responsibilities(x, sa, var);
        let c = (1.0 - alpha_bar).sqrt() / var;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (m, wm) in self.modes.iter().zip(w) {
            if wm == 0.0 {
                continue;
            }
            for ((o, xi), mu) in out.iter_mut().zip(x).zip(&m.mean) {
                *o += wm * c * (xi - sa * mu);
            }
        }
    }
}

/// Knobs of the partially competent policy. Distances are in environment
/// length units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompetenceParams {
    /// Total distractor mass; the correct mode always keeps `1 - p_err`.
    pub p_err: f64,
    /// Mode spread in normalized action units.
    pub sigma: f64,
    /// Share of the approach distractor mass on the look-alike object when
    /// both are equally far.
    pub twin_share: f64,
    /// How fast that share grows (up to twice its base value) as the
    /// look-alike gets closer than the correct object.
    pub twin_sharpness: f64,
    /// Subgoal displacement of near-miss and misplace modes.
    pub offset: f64,
    /// Share of the transport distractor mass that releases off target; the
    /// rest hesitates.
    pub misplace_share: f64,
    pub max_speed: f64,
    pub max_turn: f64,
    /// Translation and rotation per unit of normalized action.
    pub dp_unit: f64,
    pub dr_unit: f64,
    /// Hidden width of the conditioning encoder; 0 disables it.
    pub encoder_width: usize,
    pub encoder_depth: usize,
    /// Log-mass tilt the encoder output applies to each mode.
    pub encoder_gain: f64,
    /// Hidden width of the per-step residual head; 0 disables it.
    pub expert_width: usize,
    /// Output scale of that head, in normalized action units.
    pub expert_gain: f64,
}

impl Default for CompetenceParams {
    fn default() -> Self {
        Self {
            p_err: 0.3,
            sigma: 0.05,
            twin_share: 0.5,
            twin_sharpness: 1.0,
            offset: 4.0,
            misplace_share: 0.5,
            max_speed: 4.0,
            max_turn: 0.3,
            dp_unit: 1.0,
            dr_unit: 0.3,
            encoder_width: 1024,
            encoder_depth: 2,
            encoder_gain: 0.05,
            expert_width: 384,
            expert_gain: 0.01,
        }
    }
}

impl CompetenceParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("mixture.{name} = {v} outside [0, 1]")))
            }
        };
        unit("p_err", self.p_err)?;
        unit("twin_share", self.twin_share)?;
        unit("misplace_share", self.misplace_share)?;
        for (name, v) in [
            ("sigma", self.sigma),
            ("max_speed", self.max_speed),
            ("max_turn", self.max_turn),
            ("dp_unit", self.dp_unit),
            ("dr_unit", self.dr_unit),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("mixture.{name} must be positive")));
            }
        }
        if !(self.twin_sharpness >= 0.0 && self.offset >= 0.0 && self.encoder_gain >= 0.0 && self.expert_gain >= 0.0)
        {
            return Err(Error::Config("mixture: negative sharpness, offset or gain".into()));
        }
        Ok(())
    }

    /// Normalization of the policy's action space.
    pub fn action_scale(&self) -> ActionScale {
        ActionScale {
            dp: self.dp_unit,
            dr: self.dr_unit,
            g: 1.0,
        }
    }
}

/// Straight-line chunk from `start` to `goal` applying the body-frame
/// rotation `turn` spread over the same steps. Short motions are stretched
/// over the whole horizon so that nearby states give nearby chunks; long
/// ones run at the step limits and finish in a later chunk. The gripper
/// holds `g_move` while moving and switches to `g_arrive` on the arrival
/// step.
fn scripted_chunk(
    start: Vec3,
    goal: Vec3,
    turn: Vec3,
    horizon: usize,
    params: &CompetenceParams,
    g_move: f64,
    g_arrive: f64,
) -> ActionChunk {
    let delta = goal - start;
    let n_move = (delta.norm() / params.max_speed - 1e-9).ceil().max(0.0) as usize;
    let n_turn = (turn.norm() / params.max_turn - 1e-9).ceil().max(0.0) as usize;
    let n = n_move.max(n_turn).max(horizon);
    let dp = delta / n as f64;
    let dr = turn / n as f64;
    let steps = (0..horizon)
        .map(|h| ActionStep::new(dp, dr, if h + 1 == n { g_arrive } else { g_move }))
        .collect();
    ActionChunk::new(steps)
}

/// Body-frame turn that brings the held object from `obj_rot` to `target`
/// while the gripper is at `grip_rot`.
fn carry_turn(grip_rot: &Mat3, obj_rot: &Mat3, target: &Mat3) -> Vec3 {
    log_map(&(grip_rot.transpose() * target * obj_rot.transpose() * grip_rot))
}

const LATERAL: [[f64; 2]; 4] = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];

/// Builds the mixture for one observation, in physical chunk units.
pub fn competence_chunks(obs: &Observation, task: &TaskSpec, params: &CompetenceParams) -> Vec<(ActionChunk, f64, ModeKind)> {
    let h = task.horizon;
    let n_stages = task.stages.len();
    if obs.stage_index >= n_stages {
        return vec![(ActionChunk::zeros(h), 1.0, ModeKind::Correct)];
    }
    let stage = &task.stages[obs.stage_index];
    let grip = obs.gripper_pos;
    let p_err = params.p_err;
    let mut modes = Vec::new();

    match obs.held_object {
        Some(held) => {
            let obj = obs.object_poses[held];
            let offset = obj.pos - grip;
            let target_rot = yaw_rotation(stage.target_yaw);
            let turn = carry_turn(&obs.gripper_rot, &obj.rot, &target_rot);
            let goal = stage.target - offset;
            let correct = scripted_chunk(grip, goal, turn, h, params, 1.0, 0.0);
            if held != stage.object {
                // carrying the wrong object: the policy completes the motion anyway
                return vec![(correct, 1.0, ModeKind::Correct)];
            }
            let misplace = p_err * params.misplace_share;
            let hesitate = p_err - misplace;
            modes.push((correct, 1.0 - p_err, ModeKind::Correct));
            for l in LATERAL {
                let shift = Vec3::new(l[0], l[1], 0.0) * params.offset;
                modes.push((
                    scripted_chunk(grip, goal + shift, turn, h, params, 1.0, 0.0),
                    misplace / 4.0,
                    ModeKind::Misplace,
                ));
            }
            let mid = grip + (goal - grip) * 0.5;
            modes.push((
                scripted_chunk(grip, mid, turn * 0.5, h, params, 1.0, 1.0),
                hesitate,
                ModeKind::Hesitate,
            ));
        }
        None => {
            let target = obs.object_poses[stage.object].pos;
            // level the gripper on the way down
            let turn = log_map(&obs.gripper_rot.transpose());
            let d_correct = (target - grip).norm();
            let twin = obs
                .object_poses
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != stage.object && obs.object_status[*i] == ObjectStatus::Free)
                .map(|(_, o)| (o.pos, (o.pos - grip).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            // the look-alike draws more of the error mass when it is the closer one
            let twin_mass = match twin {
                Some((_, d_twin)) => {
                    let lean = 2.0 / (1.0 + (-params.twin_sharpness * (d_correct - d_twin)).exp());
                    p_err * (params.twin_share * lean).min(1.0)
                }
                None => 0.0,
            };
            let near = p_err - twin_mass;
            modes.push((
                scripted_chunk(grip, target, turn, h, params, 0.0, 1.0),
                1.0 - p_err,
                ModeKind::Correct,
            ));
            if let Some((pos, _)) = twin {
                modes.push((
                    scripted_chunk(grip, pos, turn, h, params, 0.0, 1.0),
                    twin_mass,
                    ModeKind::WrongObject,
                ));
            }
            for l in LATERAL {
                let shift = Vec3::new(l[0], l[1], 0.0) * params.offset;
                modes.push((
                    scripted_chunk(grip, target + shift, turn, h, params, 0.0, 1.0),
                    near / 4.0,
                    ModeKind::NearMiss,
                ));
            }
        }
    }
    modes.retain(|m| m.1 > 0.0);
    let total: f64 = modes.iter().map(|m| m.1).sum();
    for m in &mut modes {
        m.1 /= total;
    }
    modes
}

/// Mixture over normalized chunk coordinates for one observation, without
/// the encoder tilt.
pub fn competence_profile(obs: &Observation, task: &TaskSpec, params: &CompetenceParams) -> Result<MixtureSpec> {
    let scale = params.action_scale();
    let modes = competence_chunks(obs, task, params)
        .into_iter()
        .map(|(chunk, mass, kind)| MixtureMode {
            mean: chunk.to_flat(&scale),
            mass,
            kind,
        })
        .collect();
    MixtureSpec::new(modes, params.sigma)
}

/// Fixed random tanh network over the observation features. Its output
/// slightly tilts the mode masses; its cost stands in for the observation
/// encoder of a real policy.
#[derive(Debug, Clone)]
struct Encoder {
    layers: Vec<(Vec<f64>, usize, usize)>,
}

const ENCODER_OUT: usize = 8;

impl Encoder {
    fn new(dim_in: usize, width: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![dim_in];
        dims.extend(std::iter::repeat_n(width, depth));
        dims.push(ENCODER_OUT);
        let layers = dims
            .windows(2)
            .map(|w| (dense(&mut rng, w[0], w[1]), w[0], w[1]))
            .collect();
        Self { layers }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (m, din, _) in &self.layers {
            h = m.chunks_exact(*din).map(|row| row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>().tanh()).collect();
        }
        h
    }
}

fn dense(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Vec<f64> {
    let s = 1.0 / (din as f64).sqrt();
    (0..din * dout).map(|_| rng.sample::<f64, _>(StandardNormal) * s).collect()
}

/// Random residual head evaluated at every sampler step, standing in for
/// the per-step cost of a learned action expert. Its input is the noisy
/// chunk, the noise level and the encoder context.
#[derive(Debug, Clone)]
struct ExpertHead {
    hidden: Vec<f64>,
    output: Vec<f64>,
    din: usize,
}

impl ExpertHead {
    fn new(dim: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6578_7065_7274);
        let din = dim + 1 + ENCODER_OUT;
        Self {
            hidden: dense(&mut rng, din, width),
            output: dense(&mut rng, width, dim),
            din,
        }
    }

    /// Adds `gain * tanh(W2 tanh(W1 [x, level, context]))` to `out`.
    fn add_residual(&self, x: &[f64], level: f64, context: &[f64], gain: f64, out: &mut [f64]) {
        let mut input = Vec::with_capacity(self.din);
        input.extend_from_slice(x);
        input.push(level);
        input.extend_from_slice(context);
        input.resize(self.din, 0.0);
        let h: Vec<f64> = self
            .hidden
            .chunks_exact(self.din)
            .map(|row| row.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>().tanh())
            .collect();
        for (o, row) in out.iter_mut().zip(self.output.chunks_exact(h.len())) {
            *o += gain * row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>().tanh();
        }
    }
}

/// The policy at one observation: the mode mixture plus the per-step head.
#[derive(Debug, Clone)]
pub struct ConditionedPolicy<'a> {
    pub mixture: MixtureSpec,
    head: Option<&'a ExpertHead>,
    context: Vec<f64>,
    gain: f64,
}

impl VelocityField for ConditionedPolicy<'_> {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.mixture.velocity(x, t, out);
        if let Some(head) = self.head {
            head.add_residual(x, t, &self.context, self.gain, out);
        }
    }
}

impl NoisePredictor for ConditionedPolicy<'_> {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn predict_noise(&self, x: &[f64], alpha_bar: f64, out: &mut [f64]) {
        self.mixture.predict_noise(x, alpha_bar, out);
        if let Some(head) = self.head {
            head.add_residual(x, (1.0 - alpha_bar).sqrt(), &self.context, self.gain, out);
        }
    }
}

/// The frozen base policy.
#[derive(Debug, Clone)]
pub struct ToyPolicy {
    pub params: CompetenceParams,
    pub gripper_mode: GripperMode,
    encoder: Option<Encoder>,
    head: Option<ExpertHead>,
}

impl ToyPolicy {
    pub fn new(params: CompetenceParams, task: &TaskSpec, seed: u64) -> Result<Self> {
        params.validate()?;
        let encoder = (params.encoder_width > 0 && params.encoder_gain > 0.0)
            .then(|| Encoder::new(task.feature_dim(), params.encoder_width, params.encoder_depth, seed));
        let head = (params.expert_width > 0 && params.expert_gain > 0.0)
            .then(|| ExpertHead::new(task.horizon * STEP_DIM, params.expert_width, seed));
        Ok(Self {
            params,
            gripper_mode: GripperMode::Continuous,
            encoder,
            head,
        })
    }

    pub fn action_scale(&self) -> ActionScale {
        self.params.action_scale()
    }

    /// Conditioning pass: what the policy samples from at `obs`.
    pub fn condition(&self, obs: &Observation, task: &TaskSpec) -> Result<ConditionedPolicy<'_>> {
        let mut mixture = competence_profile(obs, task, &self.params)?;
        let mut context = vec![0.0; ENCODER_OUT];
        if let Some(enc) = &self.encoder {
            if obs.feature_vector.len() != enc.layers[0].1 {
                return Err(invalid("observation feature size does not match the policy encoder"));
            }
            context = enc.forward(&obs.feature_vector);
            for (m, zm) in mixture.modes.iter_mut().zip(context.iter().cycle()) {
                m.mass *= (self.params.encoder_gain * zm).exp();
            }
            let total: f64 = mixture.modes.iter().map(|m| m.mass).sum();
            for m in &mut mixture.modes {
                m.mass /= total;
            }
        }
        if let Some(head) = &self.head {
            if mixture.dim() != head.din - 1 - ENCODER_OUT {
                return Err(invalid("task horizon does not match the policy head"));
            }
        }
        Ok(ConditionedPolicy {
            mixture,
            head: self.head.as_ref(),
            context,
            gain: self.params.expert_gain,
        })
    }

    /// Physical chunk from normalized coordinates.
    pub fn decode(&self, flat: &[f64]) -> Result<ActionChunk> {
        ActionChunk::from_flat(flat, &self.action_scale(), self.gripper_mode)
    }
}

/// Scripted expert chunk (the `Correct` mode mean) for an observation.
pub fn expert_chunk(obs: &Observation, task: &TaskSpec, params: &CompetenceParams) -> ActionChunk {
    competence_chunks(obs, task, params)
        .into_iter()
        .find(|m| m.2 == ModeKind::Correct)
        .map(|m| m.0)
        .unwrap_or_else(|| ActionChunk::zeros(task.horizon))
}

/// Rotation applied by a chunk's orientation increments, in order.
pub fn chunk_rotation(chunk: &ActionChunk) -> Mat3 {
    chunk.steps.iter().fold(Mat3::identity(), |r, s| r * exp_map(&s.dr))
}
