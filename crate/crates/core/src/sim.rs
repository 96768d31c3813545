//! Deterministic kinematic pick-and-place environment.
//!
//! A task is an ordered list of stages; each stage asks for one object to be
//! grasped and released inside a target region with a required yaw. Grasping
//! is proximity based (the gripper must close within `grasp_tol` of a free
//! object) and there is no contact physics. Releasing a held object anywhere
//! that does not complete the current stage ends the episode as a failure.
//!
//! The ground-truth completion fraction is
//! `G = (completed_stages + s) / n_stages` with the within-stage shaped part
//! `s = (approach + transport) / 4`, where `approach` and `transport` are
//! `1 - clamp(distance / initial_distance, 0, 1)` towards the object and the
//! target respectively. `s` therefore stays in `[0, 1/2]` and the final half of
//! each stage is credited only when the object is placed.
//!
//! Observation feature layout (`feature_vector`, length
//! `14 + 14 * n_objects + n_stages + 1`):
//!
//! | offset | content |
//! |---|---|
//! | 0 | bias (`FeatureScales::bias`) |
//! | 1..4 | gripper position minus workspace center, times `pos` |
//! | 4..13 | gripper rotation, row-major, times `rot` |
//! | 13 | gripper closed flag times `flag` |
//! | per object (14 wide) | position (3) times `pos`, rotation (9) times `rot`, held flag, placed flag (times `flag`) |
//! | tail | one-hot stage index (n_stages + 1 entries) times `flag` |

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action_space::so3::{exp_map, rotation_angle};
use crate::action_space::{ActionChunk, Mat3, Vec3};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObjectSpec {
    pub name: String,
    pub spawn_center: Vec3,
    /// Uniform jitter half-widths along x and y.
    pub spawn_half_extent: [f64; 2],
    /// Uniform yaw jitter half-width (radians).
    pub yaw_jitter: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageGoal {
    pub object: usize,
    pub target: Vec3,
    /// Horizontal radius of the target region.
    pub target_radius: f64,
    pub target_yaw: f64,
    /// Maximum allowed angle between object and target orientation.
    pub rot_tol: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct FeatureScales {
    pub bias: f64,
    pub pos: f64,
    pub rot: f64,
    pub flag: f64,
}

impl Default for FeatureScales {
    fn default() -> Self {
        Self {
            bias: 1.0,
            pos: 0.006,
            rot: 0.02,
            flag: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub instruction: String,
    pub objects: Vec<ObjectSpec>,
    pub stages: Vec<StageGoal>,
    pub home: Vec3,
    pub grasp_tol: f64,
    /// Episode length limit in chunks.
    pub step_budget: usize,
    pub horizon: usize,
    pub workspace_min: Vec3,
    pub workspace_max: Vec3,
    /// Vertical tolerance for a release to count as inside the target.
    pub place_height_tol: f64,
    #[serde(default)]
    pub features: FeatureScales,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(invalid(format!("task {}: no stages", self.task_id)));
        }
        if self.horizon == 0 || self.step_budget == 0 {
            return Err(invalid(format!("task {}: horizon and step budget must be positive", self.task_id)));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.object >= self.objects.len() {
                return Err(invalid(format!("task {}: stage {i} references unknown object", self.task_id)));
            }
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn feature_dim(&self) -> usize {
        14 + 14 * self.objects.len() + self.stages.len() + 1
    }

    fn workspace_center(&self) -> Vec3 {
        (self.workspace_min + self.workspace_max) * 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub pos: Vec3,
    pub rot: Mat3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectStatus {
    Free,
    Held,
    Placed,
    Dropped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub task_id: String,
    pub gripper_pos: Vec3,
    pub gripper_rot: Mat3,
    pub gripper_closed: bool,
    pub object_poses: Vec<ObjectPose>,
    pub object_status: Vec<ObjectStatus>,
    pub held_object: Option<usize>,
    pub stage_index: usize,
    pub feature_vector: Vec<f64>,
    /// Ground-truth completion fraction `G`. Not part of `feature_vector`;
    /// only the oracle progress estimator reads it.
    pub completion: f64,
    pub step_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Running,
    Success,
    /// The stage object was released outside its target or misaligned.
    Dropped,
    /// A non-stage object was released.
    WrongObject,
    Timeout,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Running => "running",
            Self::Success => "success",
            Self::Dropped => "dropped",
            Self::WrongObject => "wrong_object",
            Self::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvStatus {
    pub done: bool,
    pub true_success: bool,
    pub completion_fraction: f64,
    pub step_count: usize,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy)]
struct Grip {
    object: usize,
    offset: Vec3,
    rel_rot: Mat3,
}

#[derive(Debug, Clone, Copy)]
struct StageRef {
    approach_d0: f64,
    transport_d0: f64,
}

/// One environment instance; owns the state of a single episode.
#[derive(Debug, Clone)]
pub struct SimEnv {
    task: TaskSpec,
    gripper_pos: Vec3,
    gripper_rot: Mat3,
    gripper_closed: bool,
    objects: Vec<ObjectPose>,
    status: Vec<ObjectStatus>,
    grip: Option<Grip>,
    stage: usize,
    stage_ref: StageRef,
    step_count: usize,
    outcome: Outcome,
}

pub fn yaw_rotation(yaw: f64) -> Mat3 {
    exp_map(&Vec3::new(0.0, 0.0, yaw))
}

impl SimEnv {
    /// Starts an episode: objects jittered uniformly inside their spawn
    /// regions from `seed`, gripper open at the home pose, stage 0.
    pub fn reset(task: &TaskSpec, seed: u64) -> Result<(Self, Observation)> {
        task.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let objects = task
            .objects
            .iter()
            .map(|o| {
                let dx = sym_uniform(&mut rng, o.spawn_half_extent[0]);
                let dy = sym_uniform(&mut rng, o.spawn_half_extent[1]);
                let yaw = sym_uniform(&mut rng, o.yaw_jitter);
                ObjectPose {
                    pos: o.spawn_center + Vec3::new(dx, dy, 0.0),
                    rot: yaw_rotation(yaw),
                }
            })
            .collect();
        let mut env = Self {
            task: task.clone(),
            gripper_pos: task.home,
            gripper_rot: Mat3::identity(),
            gripper_closed: false,
            objects,
            status: vec![ObjectStatus::Free; task.objects.len()],
            grip: None,
            stage: 0,
            stage_ref: StageRef {
                approach_d0: 1.0,
                transport_d0: 1.0,
            },
            step_count: 0,
            outcome: Outcome::Running,
        };
        env.stage_ref = env.current_stage_ref();
        let obs = env.observe();
        Ok((env, obs))
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn status(&self) -> EnvStatus {
        EnvStatus {
            done: self.outcome != Outcome::Running,
            true_success: self.outcome == Outcome::Success,
            completion_fraction: self.completion(),
            step_count: self.step_count,
            outcome: self.outcome,
        }
    }

    /// Executes one chunk step by step. A failing release ends the episode
    /// immediately and the remaining steps are not applied.
    pub fn step_chunk(&mut self, action: &ActionChunk) -> Result<(Observation, EnvStatus)> {
        if self.outcome != Outcome::Running {
            return Err(invalid("step_chunk called on a finished episode"));
        }
        if action.horizon() != self.task.horizon {
            return Err(invalid(format!(
                "chunk horizon {} != task horizon {}",
                action.horizon(),
                self.task.horizon
            )));
        }
        for step in &action.steps {
            if !(step.dp.iter().chain(step.dr.iter()).all(|v| v.is_finite()) && step.g.is_finite()) {
                return Err(invalid("non-finite action step"));
            }
            self.apply_step(step.dp, step.dr, step.g);
            if self.outcome != Outcome::Running {
                break;
            }
        }
        self.step_count += 1;
        if self.outcome == Outcome::Running && self.step_count >= self.task.step_budget {
            self.outcome = Outcome::Timeout;
        }
        Ok((self.observe(), self.status()))
    }

    fn apply_step(&mut self, dp: Vec3, dr: Vec3, g: f64) {
        let lo = self.task.workspace_min;
        let hi = self.task.workspace_max;
        let p = self.gripper_pos + dp;
        self.gripper_pos = Vec3::new(p.x.clamp(lo.x, hi.x), p.y.clamp(lo.y, hi.y), p.z.clamp(lo.z, hi.z));
        self.gripper_rot *= exp_map(&dr);
        if let Some(grip) = self.grip {
            self.objects[grip.object] = ObjectPose {
                pos: self.gripper_pos + grip.offset,
                rot: self.gripper_rot * grip.rel_rot,
            };
        }

        let close = g >= 0.5;
        if close && !self.gripper_closed {
            self.try_grasp();
        } else if !close && self.gripper_closed {
            self.release();
        }
        self.gripper_closed = close;
    }

    fn try_grasp(&mut self) {
        let tol = self.task.grasp_tol;
        let nearest = self
            .objects
            .iter()
            .enumerate()
            .filter(|(i, _)| self.status[*i] == ObjectStatus::Free)
            .map(|(i, o)| (i, (o.pos - self.gripper_pos).norm()))
            .filter(|&(_, d)| d <= tol)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = nearest {
            let o = self.objects[i];
            self.grip = Some(Grip {
                object: i,
                offset: o.pos - self.gripper_pos,
                rel_rot: self.gripper_rot.transpose() * o.rot,
            });
            self.status[i] = ObjectStatus::Held;
        }
    }

    fn release(&mut self) {
        let Some(grip) = self.grip.take() else {
            return;
        };
        let i = grip.object;
        let goal = &self.task.stages[self.stage];
        if i != goal.object {
            self.status[i] = ObjectStatus::Dropped;
            self.outcome = Outcome::WrongObject;
            return;
        }
        let o = self.objects[i];
        let horiz = (o.pos.xy() - goal.target.xy()).norm();
        let vert = (o.pos.z - goal.target.z).abs();
        let angle = rotation_angle(&(o.rot.transpose() * yaw_rotation(goal.target_yaw)));
        if horiz <= goal.target_radius && vert <= self.task.place_height_tol && angle <= goal.rot_tol {
            self.status[i] = ObjectStatus::Placed;
            self.stage += 1;
            if self.stage == self.task.stages.len() {
                self.outcome = Outcome::Success;
            } else {
                self.stage_ref = self.current_stage_ref();
            }
        } else {
            self.status[i] = ObjectStatus::Dropped;
            self.outcome = Outcome::Dropped;
        }
    }

    fn current_stage_ref(&self) -> StageRef {
        let goal = &self.task.stages[self.stage];
        let obj = self.objects[goal.object].pos;
        StageRef {
            approach_d0: (obj - self.gripper_pos).norm(),
            transport_d0: (obj - goal.target).norm(),
        }
    }

    /// Ground-truth completion fraction `G`.
    pub fn completion(&self) -> f64 {
        let n = self.task.stages.len();
        if self.stage >= n {
            return 1.0;
        }
        let goal = &self.task.stages[self.stage];
        let i = goal.object;
        let shaped = match self.status[i] {
            ObjectStatus::Dropped | ObjectStatus::Placed => 0.0,
            status => {
                let o = self.objects[i].pos;
                let approach = if status == ObjectStatus::Held {
                    1.0
                } else {
                    progress((o - self.gripper_pos).norm(), self.stage_ref.approach_d0)
                };
                let transport = progress((o - goal.target).norm(), self.stage_ref.transport_d0);
                0.25 * (approach + transport)
            }
        };
        (self.stage as f64 + shaped) / n as f64
    }

    pub fn observe(&self) -> Observation {
        Observation {
            task_id: self.task.task_id.clone(),
            gripper_pos: self.gripper_pos,
            gripper_rot: self.gripper_rot,
            gripper_closed: self.gripper_closed,
            object_poses: self.objects.clone(),
            object_status: self.status.clone(),
            held_object: self.grip.map(|g| g.object),
            stage_index: self.stage,
            feature_vector: self.features(),
            completion: self.completion(),
            step_count: self.step_count,
        }
    }

    fn features(&self) -> Vec<f64> {
        let fs = self.task.features;
        let c = self.task.workspace_center();
        let mut f = Vec::with_capacity(self.task.feature_dim());
        f.push(fs.bias);
        f.extend((self.gripper_pos - c).iter().map(|v| v * fs.pos));
        f.extend(self.gripper_rot.transpose().iter().map(|v| v * fs.rot));
        f.push(if self.gripper_closed { fs.flag } else { 0.0 });
        for (o, s) in self.objects.iter().zip(&self.status) {
            f.extend((o.pos - c).iter().map(|v| v * fs.pos));
            f.extend(o.rot.transpose().iter().map(|v| v * fs.rot));
            f.push(if *s == ObjectStatus::Held { fs.flag } else { 0.0 });
            f.push(if *s == ObjectStatus::Placed { fs.flag } else { 0.0 });
        }
        for k in 0..=self.task.stages.len() {
            f.push(if k == self.stage { fs.flag } else { 0.0 });
        }
        f
    }

    /// Completed-stage indicator vector, e.g. `[1, 1, 0, 0]` after two stages.
    pub fn stage_completion(&self) -> Vec<u8> {
        (0..self.task.stages.len())
            .map(|k| u8::from(k < self.stage))
            .collect()
    }

    pub fn stages_completed(&self) -> usize {
        self.stage
    }
}

fn progress(distance: f64, initial: f64) -> f64 {
    if initial <= 1e-9 {
        return 1.0;
    }
    1.0 - (distance / initial).clamp(0.0, 1.0)
}

fn sym_uniform(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half <= 0.0 {
        0.0
    } else {
        rng.random_range(-half..=half)
    }
}

/// One line of an episode trace export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub chunk: usize,
    pub gripper_pos: [f64; 3],
    pub gripper_rot: [f64; 9],
    pub gripper_closed: bool,
    pub completion: f64,
    pub stage: usize,
}

impl TraceRecord {
    pub fn from_observation(obs: &Observation) -> Self {
        let mut rot = [0.0; 9];
        for (dst, src) in rot.iter_mut().zip(obs.gripper_rot.transpose().iter()) {
            *dst = *src;
        }
        Self {
            chunk: obs.step_count,
            gripper_pos: [obs.gripper_pos.x, obs.gripper_pos.y, obs.gripper_pos.z],
            gripper_rot: rot,
            gripper_closed: obs.gripper_closed,
            completion: obs.completion,
            stage: obs.stage_index,
        }
    }
}

/// Writes one JSON object per observation.
pub fn write_trace<W: Write>(mut out: W, observations: &[Observation]) -> Result<()> {
    for obs in observations {
        let line = serde_json::to_string(&TraceRecord::from_observation(obs))
            .map_err(|e| invalid(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn object(name: &str, x: f64, y: f64) -> ObjectSpec {
    ObjectSpec {
        name: name.to_string(),
        spawn_center: Vec3::new(x, y, 2.0),
        spawn_half_extent: [2.0, 2.0],
        yaw_jitter: 0.35,
    }
}

fn slot(object: usize, x: f64, y: f64) -> StageGoal {
    StageGoal {
        object,
        target: Vec3::new(x, y, 2.0),
        target_radius: 2.0,
        target_yaw: 0.0,
        rot_tol: 0.15,
    }
}

fn base_task(task_id: &str, instruction: &str, objects: Vec<ObjectSpec>, stages: Vec<StageGoal>) -> TaskSpec {
    TaskSpec {
        task_id: task_id.to_string(),
        instruction: instruction.to_string(),
        objects,
        stages,
        home: Vec3::new(0.0, 0.0, 15.0),
        grasp_tol: 2.0,
        step_budget: 40,
        horizon: 8,
        workspace_min: Vec3::new(-40.0, -40.0, 0.0),
        workspace_max: Vec3::new(40.0, 40.0, 40.0),
        place_height_tol: 3.0,
        features: FeatureScales::default(),
    }
}

/// The shipped task suite.
///
/// * `T1`: single pick-and-place with one look-alike distractor.
/// * `T2`: two objects into two basket slots, plus a distractor.
/// * `T3`: four objects into a four-slot rack, in order.
pub fn task_suite() -> Vec<TaskSpec> {
    vec![
        base_task(
            "T1",
            "put the block on the plate",
            vec![object("block", 16.0, 10.0), object("decoy", 16.0, -10.0)],
            vec![slot(0, -16.0, 0.0)],
        ),
        base_task(
            "T2",
            "put the soup and then the sauce in the basket",
            vec![
                object("soup", 16.0, 10.0),
                object("sauce", 16.0, -10.0),
                object("butter", 2.0, -26.0),
            ],
            vec![slot(0, -16.0, 5.0), slot(1, -16.0, -5.0)],
        ),
        base_task(
            "T3",
            "place the four tubes in the rack from left to right",
            vec![
                object("tube_a", 16.0, 12.0),
                object("tube_b", 16.0, -12.0),
                object("tube_c", 6.0, 24.0),
                object("tube_d", 6.0, -24.0),
            ],
            vec![
                slot(0, -16.0, 9.0),
                slot(1, -16.0, 3.0),
                slot(2, -16.0, -3.0),
                slot(3, -16.0, -9.0),
            ],
        ),
    ]
}

pub fn find_task(task_id: &str) -> Result<TaskSpec> {
    task_suite()
        .into_iter()
        .find(|t| t.task_id == task_id)
        .ok_or_else(|| invalid(format!("unknown task id {task_id}")))
}
