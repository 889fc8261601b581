//! Leader/follower bilateral-control simulator.
//!
//! Each joint is a rigid inertia with viscous friction and an optional
//! gravity term, integrated with semi-implicit Euler. Both arms run
//! acceleration control with disturbance-observer (DOB) compensation, and a
//! reaction-force observer (RFOB) estimates the external torque on each joint.
//! The symmetric four-channel law drives
//!
//! * the position difference `θ_l − θ_f` to zero (position channel), and
//! * the reaction-torque sum `τ_l + τ_f` to zero (force channel).
//!
//! Sign convention: the plant is `J·θ̈ = τ_cmd + τ_ext − D·θ̇ − g(θ)`, the DOB
//! tracks `τ_dis = τ_cmd − J·θ̈` and the RFOB reports `τ_res = τ̂_dis − D·θ̇ −
//! g(θ)`, which settles at `−τ_ext`: the torque the joint exerts back on
//! whatever is pushing it.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Episode, FrameStream, JointSample, ModelError, RobotStream};

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum SimError {
    #[error("numerical divergence at t={time_s:.4}s on joint {joint} (|value| = {magnitude:e})")]
    NumericalDivergence {
        time_s: f64,
        joint: usize,
        magnitude: f64,
    },

    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),

    #[error("trajectory has {found} joint profiles, config has {expected} joints")]
    TrajectoryJointMismatch { expected: usize, found: usize },

    #[error("cannot read config {path}: {message}")]
    ConfigRead { path: String, message: String },

    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Gravity torque as a function of joint angle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GravityModel {
    #[default]
    None,
    Constant {
        torque: f64,
    },
    /// `coefficient · sin(θ)`
    Pendulum {
        coefficient: f64,
    },
}

impl GravityModel {
    pub fn torque(&self, angle: f64) -> f64 {
        match *self {
            GravityModel::None => 0.0,
            GravityModel::Constant { torque } => torque,
            GravityModel::Pendulum { coefficient } => coefficient * angle.sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    /// kg·m²
    pub inertia: f64,
    /// N·m·s/rad
    #[serde(default)]
    pub viscous_friction: f64,
    #[serde(default)]
    pub gravity: GravityModel,
}

impl JointModel {
    pub fn new(inertia: f64, viscous_friction: f64) -> Self {
        Self {
            inertia,
            viscous_friction,
            gravity: GravityModel::None,
        }
    }

    /// Friction plus gravity at the given state.
    pub fn modeled_load(&self, angle: f64, velocity: f64) -> f64 {
        self.viscous_friction * velocity + self.gravity.torque(angle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    /// Position gain, 1/s².
    pub kp: f64,
    /// Velocity gain, 1/s.
    pub kd: f64,
    /// Force gain, rad/s² per N·m.
    pub kf: f64,
    /// rad/s
    pub dob_cutoff: f64,
    /// rad/s
    pub rfob_cutoff: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            kp: 900.0,
            kd: 60.0,
            kf: 100.0,
            dob_cutoff: 300.0,
            rfob_cutoff: 100.0,
        }
    }
}

/// Spring-damper model of the operator's hand pulling the leader toward a
/// reference angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorModel {
    /// N·m/rad
    pub stiffness: f64,
    /// N·m·s/rad
    pub damping: f64,
}

impl Default for OperatorModel {
    fn default() -> Self {
        Self {
            stiffness: 1.0,
            damping: 0.25,
        }
    }
}

/// Unilateral virtual wall on a follower joint, active for `θ_f > position`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub joint: usize,
    pub position: f64,
    pub stiffness: f64,
    #[serde(default)]
    pub damping: f64,
}

impl Wall {
    /// Torque the wall applies to the follower (never pulls).
    pub fn torque(&self, angle: f64, velocity: f64) -> f64 {
        let penetration = angle - self.position;
        if penetration <= 0.0 {
            return 0.0;
        }
        (-self.stiffness * penetration - self.damping * velocity).min(0.0)
    }
}

/// External torque applied to one follower joint over `[start_s, end_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub joint: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub torque: f64,
}

fn default_cameras() -> Vec<String> {
    vec!["gripper".into(), "overhead".into()]
}

fn default_bound() -> f64 {
    1.0e6
}

fn default_task() -> String {
    "put-in-drawer".into()
}

fn default_jitter() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub robot_rate_hz: u32,
    pub frame_rate_hz: u32,
    pub duration_s: f64,
    /// Integration step; defaults to `1 / robot_rate_hz`.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_task")]
    pub task: String,
    #[serde(default = "default_cameras")]
    pub cameras: Vec<String>,
    /// Relative per-joint amplitude jitter of the operator trajectory.
    #[serde(default = "default_jitter")]
    pub amplitude_jitter: f64,
    /// Any angle or velocity beyond this magnitude aborts the run.
    #[serde(default = "default_bound")]
    pub divergence_bound: f64,
    #[serde(default)]
    pub gains: ControllerGains,
    #[serde(default)]
    pub operator: OperatorModel,
    pub joints: Vec<JointModel>,
    #[serde(default)]
    pub walls: Vec<Wall>,
    #[serde(default)]
    pub disturbances: Vec<Disturbance>,
}

impl SimConfig {
    /// Reference setup: five joints at 1000 Hz with two 100 Hz cameras.
    pub fn reference() -> Self {
        let inertias = [0.012, 0.010, 0.008, 0.006, 0.004];
        Self {
            robot_rate_hz: 1000,
            frame_rate_hz: 100,
            duration_s: 1.0,
            dt: None,
            seed: 0,
            task: default_task(),
            cameras: default_cameras(),
            amplitude_jitter: default_jitter(),
            divergence_bound: default_bound(),
            gains: ControllerGains::default(),
            operator: OperatorModel::default(),
            joints: inertias.iter().map(|&j| JointModel::new(j, 0.02)).collect(),
            walls: Vec::new(),
            disturbances: Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let config: SimConfig =
            toml::from_str(text).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::ConfigRead {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt.unwrap_or(1.0 / f64::from(self.robot_rate_hz))
    }

    /// Integration steps per recorded robot sample.
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn substeps(&self) -> Result<usize, SimError> {
        let period = 1.0 / f64::from(self.robot_rate_hz);
        let dt = self.dt();
        let n = (period / dt).round();
        if !(dt > 0.0) || n < 1.0 || ((n * dt) - period).abs() > 1e-9 * period {
            return Err(SimError::InvalidConfig(format!(
                "dt {dt} must divide the robot period {period} and be no larger than it"
            )));
        }
        Ok(n as usize)
    }

    /// Robot sample count `T` and frame count `F`.
    pub fn counts(&self) -> (usize, usize) {
        let t = (self.duration_s * f64::from(self.robot_rate_hz)).round() as usize;
        let f = (self.duration_s * f64::from(self.frame_rate_hz)).round() as usize;
        (t, f)
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.robot_rate_hz == 0 || self.frame_rate_hz == 0 {
            return bad("rates must be positive".into());
        }
        if !self.robot_rate_hz.is_multiple_of(self.frame_rate_hz) {
            return Err(ModelError::NonIntegerRatio {
                robot_hz: self.robot_rate_hz,
                frame_hz: self.frame_rate_hz,
            }
            .into());
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return bad("duration_s must be positive".into());
        }
        if self.counts().1 == 0 {
            return bad("duration too short for a single frame".into());
        }
        self.substeps()?;
        if self.joints.is_empty() {
            return bad("at least one joint is required".into());
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.inertia > 0.0) || !j.inertia.is_finite() {
                return bad(format!("joint {i}: inertia must be positive"));
            }
            if !(j.viscous_friction >= 0.0) {
                return bad(format!("joint {i}: viscous_friction must be nonnegative"));
            }
        }
        let g = &self.gains;
        if [g.kp, g.kd, g.kf]
            .iter()
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return bad("gains must be finite and nonnegative".into());
        }
        if !(g.dob_cutoff > 0.0) || !(g.rfob_cutoff > 0.0) {
            return bad("observer cutoffs must be positive".into());
        }
        if !(self.operator.stiffness >= 0.0) || !(self.operator.damping >= 0.0) {
            return bad("operator stiffness and damping must be nonnegative".into());
        }
        if !(self.divergence_bound > 0.0) {
            return bad("divergence_bound must be positive".into());
        }
        if !(self.amplitude_jitter >= 0.0) {
            return bad("amplitude_jitter must be nonnegative".into());
        }
        if self.cameras.is_empty() {
            return bad("at least one camera is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cameras {
            if c.is_empty() || !seen.insert(c) {
                return bad(format!("camera ids must be unique and non-empty ('{c}')"));
            }
        }
        let n = self.joints.len();
        for w in &self.walls {
            if w.joint >= n || !(w.stiffness >= 0.0) || !(w.damping >= 0.0) {
                return bad(format!("wall on joint {} is invalid", w.joint));
            }
        }
        for d in &self.disturbances {
            if d.joint >= n || !(d.end_s >= d.start_s) || !d.torque.is_finite() {
                return bad(format!("disturbance on joint {} is invalid", d.joint));
            }
        }
        Ok(())
    }
}

/// `1 − e^{−g·dt}`: exact discretization of a first-order lag.
pub fn lowpass_alpha(cutoff: f64, dt: f64) -> f64 {
    1.0 - (-cutoff * dt).exp()
}

/// DOB and RFOB state for one joint.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    dob_cutoff: f64,
    rfob_cutoff: f64,
    prev_velocity: f64,
    /// τ̂_dis at the DOB bandwidth, used for compensation.
    pub dob_estimate: f64,
    /// τ̂_dis at the RFOB bandwidth.
    pub reaction_band: f64,
    /// τ_res
    pub rfob_estimate: f64,
}

impl ObserverState {
    pub fn new(dob_cutoff: f64, rfob_cutoff: f64) -> Self {
        Self {
            dob_cutoff,
            rfob_cutoff,
            prev_velocity: 0.0,
            dob_estimate: 0.0,
            reaction_band: 0.0,
            rfob_estimate: 0.0,
        }
    }

    pub fn from_gains(gains: &ControllerGains) -> Self {
        Self::new(gains.dob_cutoff, gains.rfob_cutoff)
    }

    /// Feeds one tick. `commanded_torque` is the command applied since the
    /// previous call and `velocity` the velocity measured now; together they
    /// give the disturbance `τ_cmd − J·Δθ̇/dt` over the last interval.
    pub fn dob_update(
        &mut self,
        commanded_torque: f64,
        velocity: f64,
        joint: &JointModel,
        dt: f64,
    ) -> f64 {
        debug_assert!(dt > 0.0);
        let accel = (velocity - self.prev_velocity) / dt;
        let raw = commanded_torque - joint.inertia * accel;
        self.dob_estimate += lowpass_alpha(self.dob_cutoff, dt) * (raw - self.dob_estimate);
        self.reaction_band += lowpass_alpha(self.rfob_cutoff, dt) * (raw - self.reaction_band);
        self.prev_velocity = velocity;
        self.dob_estimate
    }

    /// Updates τ_res from the RFOB-band disturbance estimate.
    pub fn rfob_update(&mut self, angle: f64, velocity: f64, joint: &JointModel) -> f64 {
        self.rfob_estimate = rfob_update(self.reaction_band, angle, velocity, joint);
        self.rfob_estimate
    }
}

/// Reaction torque: the disturbance estimate minus modeled friction and
/// gravity.
pub fn rfob_update(dob_estimate: f64, angle: f64, velocity: f64, joint: &JointModel) -> f64 {
    dob_estimate - joint.modeled_load(angle, velocity)
}

/// One arm: joint states, observers and the command currently applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmState {
    pub angle: Vec<f64>,
    pub velocity: Vec<f64>,
    pub command: Vec<f64>,
    pub observers: Vec<ObserverState>,
}

impl ArmState {
    pub fn at_rest(joints: usize, gains: &ControllerGains) -> Self {
        Self {
            angle: vec![0.0; joints],
            velocity: vec![0.0; joints],
            command: vec![0.0; joints],
            observers: vec![ObserverState::from_gains(gains); joints],
        }
    }

    pub fn reaction(&self) -> Vec<f64> {
        self.observers.iter().map(|o| o.rfob_estimate).collect()
    }

    /// Refreshes DOB and RFOB from the command applied over the last `dt`.
    pub fn observe(&mut self, models: &[JointModel], dt: f64) {
        for (j, model) in models.iter().enumerate() {
            let obs = &mut self.observers[j];
            obs.dob_update(self.command[j], self.velocity[j], model, dt);
            obs.rfob_update(self.angle[j], self.velocity[j], model);
        }
    }

    /// Semi-implicit Euler: velocity first, then angle with the new velocity.
    fn integrate(&mut self, models: &[JointModel], external: &[f64], dt: f64) {
        for (j, model) in models.iter().enumerate() {
            let net =
                self.command[j] + external[j] - model.modeled_load(self.angle[j], self.velocity[j]);
            self.velocity[j] += dt * net / model.inertia;
            self.angle[j] += dt * self.velocity[j];
        }
    }

    /// Kinetic energy `Σ ½·J·θ̇²`.
    pub fn kinetic_energy(&self, models: &[JointModel]) -> f64 {
        models
            .iter()
            .zip(&self.velocity)
            .map(|(m, v)| 0.5 * m.inertia * v * v)
            .sum()
    }
}

/// Integrates one arm open-loop: `command` held for `dt`, no controller.
pub fn plant_step(
    arm: &mut ArmState,
    models: &[JointModel],
    command: &[f64],
    external: &[f64],
    dt: f64,
) {
    arm.command.copy_from_slice(command);
    arm.integrate(models, external, dt);
}

/// Acceleration references for (leader, follower) on one joint.
pub fn four_channel_reference(
    gains: &ControllerGains,
    angle_error: f64,
    velocity_error: f64,
    reaction_sum: f64,
) -> (f64, f64) {
    let position = 0.5 * (gains.kp * angle_error + gains.kd * velocity_error);
    let force = -0.5 * gains.kf * reaction_sum;
    (-position + force, position + force)
}

/// One control tick of the coupled pair.
///
/// Updates both arms' observers from the previous command, computes new
/// commands `τ_cmd = J·a_ref + τ̂_dis` and integrates both plants for `dt`.
#[allow(clippy::too_many_arguments)]
pub fn bilateral_step(
    leader: &mut ArmState,
    follower: &mut ArmState,
    models: &[JointModel],
    gains: &ControllerGains,
    operator_torque: &[f64],
    environment_torque: &[f64],
    dt: f64,
    bound: f64,
) -> Result<(), SimError> {
    leader.observe(models, dt);
    follower.observe(models, dt);
    bilateral_control(
        leader,
        follower,
        models,
        gains,
        operator_torque,
        environment_torque,
        dt,
        bound,
    )
}

/// Command and integration half of [`bilateral_step`], using the observer
/// values already in place.
#[allow(clippy::too_many_arguments)]
pub fn bilateral_control(
    leader: &mut ArmState,
    follower: &mut ArmState,
    models: &[JointModel],
    gains: &ControllerGains,
    operator_torque: &[f64],
    environment_torque: &[f64],
    dt: f64,
    bound: f64,
) -> Result<(), SimError> {
    for (j, model) in models.iter().enumerate() {
        let (a_l, a_f) = four_channel_reference(
            gains,
            leader.angle[j] - follower.angle[j],
            leader.velocity[j] - follower.velocity[j],
            leader.observers[j].rfob_estimate + follower.observers[j].rfob_estimate,
        );
        leader.command[j] = model.inertia * a_l + leader.observers[j].dob_estimate;
        follower.command[j] = model.inertia * a_f + follower.observers[j].dob_estimate;
    }

    leader.integrate(models, operator_torque, dt);
    follower.integrate(models, environment_torque, dt);

    for arm in [&*leader, &*follower] {
        for (j, value) in arm.angle.iter().chain(&arm.velocity).enumerate() {
            if !value.is_finite() || value.abs() > bound {
                return Err(SimError::NumericalDivergence {
                    time_s: f64::NAN,
                    joint: j % models.len(),
                    magnitude: value.abs(),
                });
            }
        }
    }
    Ok(())
}

/// Built-in operator schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryName {
    Hold,
    Step,
    PickSweep,
}

impl TrajectoryName {
    pub fn as_str(self) -> &'static str {
        match self {
            TrajectoryName::Hold => "hold",
            TrajectoryName::Step => "step",
            TrajectoryName::PickSweep => "pick_sweep",
        }
    }
}

impl std::str::FromStr for TrajectoryName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hold" => Ok(TrajectoryName::Hold),
            "step" => Ok(TrajectoryName::Step),
            "pick_sweep" | "pick-sweep" => Ok(TrajectoryName::PickSweep),
            other => Err(format!(
                "unknown trajectory '{other}' (expected hold, step or pick_sweep)"
            )),
        }
    }
}

/// Whether the schedule is a torque on the leader or a reference angle the
/// operator's hand pulls the leader toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorInput {
    Torque,
    AngleReference,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    Zero,
    Step {
        at_s: f64,
        value: f64,
    },
    /// Cosine-blended between consecutive `(time, value)` knots, held flat
    /// outside them.
    Waypoints(Vec<(f64, f64)>),
}

impl Profile {
    pub fn value_at(&self, t: f64) -> f64 {
        match self {
            Profile::Zero => 0.0,
            Profile::Step { at_s, value } => {
                if t >= *at_s {
                    *value
                } else {
                    0.0
                }
            }
            Profile::Waypoints(knots) => {
                let Some(&(t0, v0)) = knots.first() else {
                    return 0.0;
                };
                if t <= t0 {
                    return v0;
                }
                for w in knots.windows(2) {
                    let ((ta, va), (tb, vb)) = (w[0], w[1]);
                    if t <= tb {
                        let s = (t - ta) / (tb - ta);
                        return va + (vb - va) * 0.5 * (1.0 - (PI * s).cos());
                    }
                }
                knots.last().map_or(0.0, |k| k.1)
            }
        }
    }

    fn scaled(&self, factor: f64) -> Profile {
        match self {
            Profile::Zero => Profile::Zero,
            Profile::Step { at_s, value } => Profile::Step {
                at_s: *at_s,
                value: value * factor,
            },
            Profile::Waypoints(k) => {
                Profile::Waypoints(k.iter().map(|&(t, v)| (t, v * factor)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorTrajectory {
    pub input: OperatorInput,
    pub profiles: Vec<Profile>,
}

impl OperatorTrajectory {
    pub fn value_at(&self, joint: usize, t: f64) -> f64 {
        self.profiles[joint].value_at(t)
    }

    pub fn joints(&self) -> usize {
        self.profiles.len()
    }
}

pub const STEP_TIME_S: f64 = 0.1;
pub const STEP_ANGLE_RAD: f64 = 0.3;

/// Knot times of the open/pick/move/place/close phases.
pub const PICK_SWEEP_KNOTS_S: [f64; 6] = [0.05, 0.23, 0.41, 0.59, 0.77, 0.95];
const PICK_SWEEP_PATTERN: [f64; 5] = [0.6, -0.4, 0.9, 0.3, 0.0];

pub fn scripted_trajectories(name: TrajectoryName, joints: usize) -> OperatorTrajectory {
    match name {
        TrajectoryName::Hold => OperatorTrajectory {
            input: OperatorInput::Torque,
            profiles: vec![Profile::Zero; joints],
        },
        TrajectoryName::Step => OperatorTrajectory {
            input: OperatorInput::AngleReference,
            profiles: vec![
                Profile::Step {
                    at_s: STEP_TIME_S,
                    value: STEP_ANGLE_RAD,
                };
                joints
            ],
        },
        TrajectoryName::PickSweep => OperatorTrajectory {
            input: OperatorInput::AngleReference,
            profiles: (0..joints)
                .map(|j| {
                    let amplitude = 0.25 / (1.0 + 0.3 * j as f64);
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    let mut knots = vec![(PICK_SWEEP_KNOTS_S[0], 0.0)];
                    for (phase, &p) in PICK_SWEEP_PATTERN.iter().enumerate() {
                        knots.push((PICK_SWEEP_KNOTS_S[phase + 1], sign * amplitude * p));
                    }
                    Profile::Waypoints(knots)
                })
                .collect(),
        },
    }
}

/// Per-episode summary of the closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSummary {
    /// Max over the run of `|θ_l − θ_f|` per joint.
    pub max_tracking_error: Vec<f64>,
    /// Max over the last 10% of the run of `|θ_l − θ_f|` per joint.
    pub terminal_tracking_error: Vec<f64>,
    /// Max over the last 10% of `|τ_res,l + τ_res,f|` per joint.
    pub terminal_force_error: Vec<f64>,
    /// Max over the run of the true environment torque magnitude per joint.
    pub peak_contact_torque: Vec<f64>,
}

/// Runs the closed loop and records an [`Episode`] plus its summary.
pub fn simulate_episode(
    config: &SimConfig,
    trajectory: &OperatorTrajectory,
) -> Result<(Episode, SimSummary), SimError> {
    config.validate()?;
    let joints = config.num_joints();
    if trajectory.joints() != joints {
        return Err(SimError::TrajectoryJointMismatch {
            expected: joints,
            found: trajectory.joints(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jittered = OperatorTrajectory {
        input: trajectory.input,
        profiles: trajectory
            .profiles
            .iter()
            .map(|p| {
                let u: f64 = rng.gen_range(-1.0..=1.0);
                p.scaled(1.0 + config.amplitude_jitter * u)
            })
            .collect(),
    };

    let models = &config.joints;
    let gains = &config.gains;
    let dt = config.dt();
    let substeps = config.substeps()?;
    let (t_len, f_len) = config.counts();
    let ratio = (config.robot_rate_hz / config.frame_rate_hz) as usize;

    let mut leader = ArmState::at_rest(joints, gains);
    let mut follower = ArmState::at_rest(joints, gains);
    let mut leader_rec = Vec::with_capacity(t_len * joints);
    let mut follower_rec = Vec::with_capacity(t_len * joints);

    let tail_start = t_len - t_len.div_ceil(10);
    let mut summary = SimSummary {
        max_tracking_error: vec![0.0; joints],
        terminal_tracking_error: vec![0.0; joints],
        terminal_force_error: vec![0.0; joints],
        peak_contact_torque: vec![0.0; joints],
    };

    let mut operator = vec![0.0; joints];
    let mut environment = vec![0.0; joints];
    for k in 0..t_len {
        for s in 0..substeps {
            let t = (k * substeps + s) as f64 * dt;
            for j in 0..joints {
                let u = jittered.value_at(j, t);
                operator[j] = match jittered.input {
                    OperatorInput::Torque => u,
                    OperatorInput::AngleReference => {
                        config.operator.stiffness * (u - leader.angle[j])
                            - config.operator.damping * leader.velocity[j]
                    }
                };
                environment[j] = 0.0;
            }
            for w in &config.walls {
                let tau = w.torque(follower.angle[w.joint], follower.velocity[w.joint]);
                environment[w.joint] += tau;
                let peak = &mut summary.peak_contact_torque[w.joint];
                *peak = peak.max(tau.abs());
            }
            for d in &config.disturbances {
                if t >= d.start_s && t < d.end_s {
                    environment[d.joint] += d.torque;
                }
            }

            leader.observe(models, dt);
            follower.observe(models, dt);
            if s == 0 {
                for (arm, rec) in [(&leader, &mut leader_rec), (&follower, &mut follower_rec)] {
                    rec.extend((0..joints).map(|j| {
                        JointSample::new(
                            arm.angle[j],
                            arm.velocity[j],
                            arm.observers[j].rfob_estimate,
                        )
                    }));
                }
            }
            bilateral_control(
                &mut leader,
                &mut follower,
                models,
                gains,
                &operator,
                &environment,
                dt,
                config.divergence_bound,
            )
            .map_err(|e| match e {
                SimError::NumericalDivergence {
                    joint, magnitude, ..
                } => SimError::NumericalDivergence {
                    time_s: t,
                    joint,
                    magnitude,
                },
                other => other,
            })?;
        }

        let recorded = &leader_rec[k * joints..];
        let recorded_f = &follower_rec[k * joints..];
        for j in 0..joints {
            let l: &JointSample = &recorded[j];
            let f: &JointSample = &recorded_f[j];
            let err = (l.angle - f.angle).abs();
            summary.max_tracking_error[j] = summary.max_tracking_error[j].max(err);
            if k >= tail_start {
                summary.terminal_tracking_error[j] = summary.terminal_tracking_error[j].max(err);
                let force = (l.torque + f.torque).abs();
                summary.terminal_force_error[j] = summary.terminal_force_error[j].max(force);
            }
        }
    }

    let leader_stream = RobotStream::from_flat(config.robot_rate_hz, joints, leader_rec)?;
    let follower_stream = RobotStream::from_flat(config.robot_rate_hz, joints, follower_rec)?;
    let payloads: Vec<Vec<u8>> = (0..f_len)
        .map(|k| {
            follower_stream
                .tick(k * ratio)
                .iter()
                .flat_map(|s| s.angle.to_le_bytes())
                .collect()
        })
        .collect();
    let frame_streams = config
        .cameras
        .iter()
        .map(|c| FrameStream::from_payloads(config.frame_rate_hz, c.clone(), payloads.clone()))
        .collect::<Result<Vec<_>, _>>()?;

    let meta = BTreeMap::from([
        ("task".to_owned(), config.task.clone()),
        ("seed".to_owned(), config.seed.to_string()),
        ("source".to_owned(), "bilateral-sim".to_owned()),
    ]);
    let episode = Episode::new(
        format!("sim-{}", config.seed),
        leader_stream,
        follower_stream,
        frame_streams,
        meta,
    )?;
    Ok((episode, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joint() -> JointModel {
        JointModel::new(0.01, 0.0)
    }

    /// Open-loop joint with constant command `0.4·d` and a constant load `d`
    /// (`τ_ext = −d`), so the true disturbance is exactly `d`.
    fn dob_run(d: f64, cutoff: f64, seconds: f64) -> Vec<f64> {
        let dt = 1e-3;
        let model = [joint()];
        let mut arm = ArmState::at_rest(1, &ControllerGains::default());
        let mut obs = ObserverState::new(cutoff, cutoff);
        let mut trace = Vec::new();
        let steps = (seconds / dt).round() as usize;
        for _ in 0..steps {
            plant_step(&mut arm, &model, &[0.4 * d], &[-d], dt);
            trace.push(obs.dob_update(0.4 * d, arm.velocity[0], &model[0], dt));
        }
        trace
    }

    #[test]
    fn dob_stays_zero_without_disturbance() {
        let model = joint();
        let mut obs = ObserverState::new(300.0, 100.0);
        for _ in 0..1000 {
            assert_eq!(obs.dob_update(0.0, 0.0, &model, 1e-3), 0.0);
            assert_eq!(obs.rfob_update(0.0, 0.0, &model), 0.0);
        }
    }

    #[test]
    fn dob_step_response_matches_first_order_closed_form() {
        let g = 50.0;
        let trace = dob_run(0.5, g, 5.0 / g);
        // tick n has seen n full intervals of the disturbance
        for (i, &est) in trace.iter().enumerate() {
            let t = (i + 1) as f64 * 1e-3;
            let closed = 0.5 * (1.0 - (-g * t).exp());
            assert!(
                (est - closed).abs() <= 1e-9,
                "t={t} est={est} closed={closed}"
            );
        }
        let last = *trace.last().unwrap();
        assert!((last - 0.5).abs() / 0.5 < 0.02, "{last}");
    }

    #[test]
    fn dob_is_sign_symmetric() {
        let pos = dob_run(0.5, 80.0, 0.2);
        let neg = dob_run(-0.5, 80.0, 0.2);
        for (a, b) in pos.iter().zip(&neg) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn rfob_subtracts_model() {
        let free = JointModel::new(0.01, 0.0);
        assert_eq!(rfob_update(0.37, 0.2, 1.0, &free), 0.37);
        let viscous = JointModel::new(0.01, 0.1);
        assert_eq!(rfob_update(0.37, 0.0, 1.0, &viscous), 0.37 - 0.1);
        let heavy = JointModel {
            gravity: GravityModel::Pendulum { coefficient: 2.0 },
            ..viscous
        };
        let expect = 0.37 - 0.1 - 2.0 * 0.5f64.sin();
        assert!((rfob_update(0.37, 0.5, 1.0, &heavy) - expect).abs() < 1e-15);
    }

    /// Single joint under DOB-compensated PD hold, pressed by a known load.
    #[test]
    fn rfob_recovers_contact_torque() {
        let model = [JointModel {
            inertia: 0.01,
            viscous_friction: 0.05,
            gravity: GravityModel::Pendulum { coefficient: 0.4 },
        }];
        let gains = ControllerGains::default();
        let dt = 1e-3;
        let load = 0.3;
        let mut arm = ArmState::at_rest(1, &gains);
        for _ in 0..2000 {
            arm.observe(&model, dt);
            let a = -gains.kp * arm.angle[0] - gains.kd * arm.velocity[0];
            arm.command[0] = model[0].inertia * a + arm.observers[0].dob_estimate;
            arm.integrate(&model, &[-load], dt);
        }
        let res = arm.observers[0].rfob_estimate;
        assert!((res - load).abs() / load < 0.05, "τres = {res}");
    }

    #[test]
    fn plant_energy_never_grows_without_inputs() {
        let models: Vec<_> = [0.0, 0.01, 0.5]
            .iter()
            .map(|&d| JointModel::new(0.01, d))
            .collect();
        let mut arm = ArmState::at_rest(3, &ControllerGains::default());
        arm.velocity = vec![2.0, -1.0, 3.0];
        let mut energy = arm.kinetic_energy(&models);
        for _ in 0..5000 {
            plant_step(&mut arm, &models, &[0.0; 3], &[0.0; 3], 1e-3);
            let next = arm.kinetic_energy(&models);
            assert!(next <= energy + 1e-9);
            energy = next;
        }
    }

    #[test]
    fn rest_is_an_equilibrium() {
        let cfg = SimConfig::reference();
        let n = cfg.num_joints();
        let mut l = ArmState::at_rest(n, &cfg.gains);
        let mut f = ArmState::at_rest(n, &cfg.gains);
        for _ in 0..500 {
            bilateral_step(
                &mut l,
                &mut f,
                &cfg.joints,
                &cfg.gains,
                &vec![0.0; n],
                &vec![0.0; n],
                1e-3,
                1e6,
            )
            .unwrap();
        }
        assert!(l
            .angle
            .iter()
            .chain(&f.angle)
            .chain(&l.velocity)
            .all(|&v| v == 0.0));
        assert!(l.reaction().iter().chain(&f.reaction()).all(|&v| v == 0.0));
    }

    #[test]
    fn four_channel_law_is_antisymmetric_in_position() {
        let g = ControllerGains::default();
        let (l, f) = four_channel_reference(&g, 0.1, -0.2, 0.0);
        assert_eq!(l, -f);
        let (l, f) = four_channel_reference(&g, 0.0, 0.0, 0.4);
        assert_eq!(l, f);
        assert_eq!(l, -0.5 * g.kf * 0.4);
    }

    #[test]
    fn free_motion_tracks_position() {
        let mut cfg = SimConfig::reference();
        cfg.duration_s = 2.0;
        let traj = scripted_trajectories(TrajectoryName::Step, cfg.num_joints());
        let (_, summary) = simulate_episode(&cfg, &traj).unwrap();
        for (j, e) in summary.terminal_tracking_error.iter().enumerate() {
            assert!(*e < 1e-3, "joint {j}: {e}");
        }
        assert!(summary.max_tracking_error.iter().any(|&e| e > 1e-3));
    }

    #[test]
    fn contact_balances_reaction_torques() {
        let mut cfg = SimConfig::reference();
        cfg.duration_s = 3.0;
        cfg.walls = (0..cfg.num_joints())
            .map(|j| Wall {
                joint: j,
                position: 0.15,
                stiffness: 20.0,
                damping: 0.2,
            })
            .collect();
        let traj = scripted_trajectories(TrajectoryName::Step, cfg.num_joints());
        let (ep, summary) = simulate_episode(&cfg, &traj).unwrap();
        for j in 0..cfg.num_joints() {
            let peak = summary.peak_contact_torque[j];
            assert!(peak > 0.05, "joint {j} never touched the wall");
            let ratio = summary.terminal_force_error[j] / peak;
            assert!(ratio < 0.05, "joint {j}: {ratio}");
        }
        // follower sits at the wall, leader follows it, not the reference
        let last = ep.sample_count() - 1;
        let f = ep.follower().tick(last);
        assert!(f.iter().all(|s| s.angle < STEP_ANGLE_RAD * 0.8));
    }

    #[test]
    fn episode_counts() {
        let cfg = SimConfig::reference();
        let (ep, _) =
            simulate_episode(&cfg, &scripted_trajectories(TrajectoryName::PickSweep, 5)).unwrap();
        assert_eq!(
            (ep.sample_count(), ep.frame_count(), ep.ratio()),
            (1000, 100, 10)
        );
        assert_eq!(ep.frame_streams().len(), 2);
        assert_eq!(ep.frame_streams()[0].frames()[3].payload.len(), 5 * 8);

        let mut cfg = SimConfig::reference();
        cfg.robot_rate_hz = 500;
        cfg.frame_rate_hz = 50;
        cfg.duration_s = 0.5;
        let (ep, _) =
            simulate_episode(&cfg, &scripted_trajectories(TrajectoryName::Step, 5)).unwrap();
        assert_eq!(
            (ep.sample_count(), ep.frame_count(), ep.ratio()),
            (250, 25, 10)
        );
    }

    #[test]
    fn hold_trajectory_records_zeros() {
        let cfg = SimConfig::reference();
        let (ep, _) =
            simulate_episode(&cfg, &scripted_trajectories(TrajectoryName::Hold, 5)).unwrap();
        for s in ep.leader().as_flat().iter().chain(ep.follower().as_flat()) {
            assert_eq!(*s, JointSample::default());
        }
    }

    #[test]
    fn simulation_is_deterministic_and_seeded() {
        let mut cfg = SimConfig::reference();
        cfg.seed = 7;
        let traj = scripted_trajectories(TrajectoryName::PickSweep, 5);
        let (a, _) = simulate_episode(&cfg, &traj).unwrap();
        let (b, _) = simulate_episode(&cfg, &traj).unwrap();
        let bits = |e: &Episode| -> Vec<u64> {
            e.leader()
                .as_flat()
                .iter()
                .chain(e.follower().as_flat())
                .flat_map(|s| [s.angle.to_bits(), s.velocity.to_bits(), s.torque.to_bits()])
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
        cfg.seed = 8;
        let (c, _) = simulate_episode(&cfg, &traj).unwrap();
        assert_ne!(bits(&a), bits(&c));
        assert_eq!(c.id(), "sim-8");
    }

    #[test]
    fn substeps_record_at_robot_rate() {
        let mut cfg = SimConfig::reference();
        cfg.dt = Some(2.5e-4);
        assert_eq!(cfg.substeps().unwrap(), 4);
        let (ep, summary) =
            simulate_episode(&cfg, &scripted_trajectories(TrajectoryName::Step, 5)).unwrap();
        assert_eq!(ep.sample_count(), 1000);
        assert!(summary.max_tracking_error.iter().all(|e| e.is_finite()));
        cfg.dt = Some(3e-4);
        assert!(matches!(cfg.validate(), Err(SimError::InvalidConfig(_))));
        cfg.dt = Some(2e-3);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unstable_gains_diverge() {
        let mut cfg = SimConfig::reference();
        cfg.gains.kp = 1e7;
        cfg.gains.kd = 0.0;
        cfg.divergence_bound = 1e3;
        let err =
            simulate_episode(&cfg, &scripted_trajectories(TrajectoryName::Step, 5)).unwrap_err();
        match err {
            SimError::NumericalDivergence { time_s, .. } => assert!(time_s >= STEP_TIME_S),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn disturbance_script_moves_follower() {
        let mut cfg = SimConfig::reference();
        cfg.disturbances = vec![Disturbance {
            joint: 2,
            start_s: 0.2,
            end_s: 0.4,
            torque: 0.1,
        }];
        let (ep, _) =
            simulate_episode(&cfg, &scripted_trajectories(TrajectoryName::Hold, 5)).unwrap();
        let mid = ep.follower().tick(300);
        assert!(mid[2].torque < -0.05, "{}", mid[2].torque);
        assert_eq!(mid[0], JointSample::default());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimConfig::reference();
        cfg.frame_rate_hz = 300;
        assert!(matches!(
            cfg.validate(),
            Err(SimError::Model(ModelError::NonIntegerRatio { .. }))
        ));
        let mut cfg = SimConfig::reference();
        cfg.joints[1].inertia = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::reference();
        cfg.gains.rfob_cutoff = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::reference();
        cfg.walls.push(Wall {
            joint: 9,
            position: 0.0,
            stiffness: 1.0,
            damping: 0.0,
        });
        assert!(cfg.validate().is_err());
        assert!(matches!(
            simulate_episode(
                &SimConfig::reference(),
                &scripted_trajectories(TrajectoryName::Step, 2)
            ),
            Err(SimError::TrajectoryJointMismatch {
                expected: 5,
                found: 2
            })
        ));
    }

    #[test]
    fn config_toml_round_trip() {
        let mut cfg = SimConfig::reference();
        cfg.walls.push(Wall {
            joint: 0,
            position: 0.1,
            stiffness: 20.0,
            damping: 0.2,
        });
        cfg.joints[0].gravity = GravityModel::Pendulum { coefficient: 0.3 };
        let text = cfg.to_toml_string();
        assert_eq!(SimConfig::from_toml_str(&text).unwrap(), cfg);

        let minimal = r#"
            robot_rate_hz = 1000
            frame_rate_hz = 100
            duration_s = 1.0
            [[joints]]
            inertia = 0.01
        "#;
        let cfg = SimConfig::from_toml_str(minimal).unwrap();
        assert_eq!(cfg.gains, ControllerGains::default());
        assert_eq!(cfg.cameras, vec!["gripper", "overhead"]);
        assert!(SimConfig::from_toml_str("robot_rate_hz = 'x'").is_err());
    }

    #[test]
    fn scripted_schedules() {
        let hold = scripted_trajectories(TrajectoryName::Hold, 5);
        assert_eq!(hold.input, OperatorInput::Torque);
        for j in 0..5 {
            for i in 0..200 {
                assert_eq!(hold.value_at(j, i as f64 * 0.01), 0.0);
            }
        }

        let step = scripted_trajectories(TrajectoryName::Step, 1);
        assert_eq!(step.joints(), 1);
        assert_eq!(step.value_at(0, 0.0999), 0.0);
        assert_eq!(step.value_at(0, 0.1), 0.3);
        assert_eq!(step.value_at(0, 5.0), 0.3);

        let sweep = scripted_trajectories(TrajectoryName::PickSweep, 5);
        assert_eq!(sweep.joints(), 5);
        for j in 0..5 {
            let Profile::Waypoints(knots) = &sweep.profiles[j] else {
                panic!("expected waypoints");
            };
            assert_eq!(knots.len(), 6);
            // max jump over a 1 µs grid bounds the slope, so the schedule is continuous
            let h = 1e-6;
            let mut prev = sweep.value_at(j, 0.0);
            let mut t = h;
            let mut worst: f64 = 0.0;
            while t < 1.2 {
                let v = sweep.value_at(j, t);
                worst = worst.max((v - prev).abs());
                prev = v;
                t += h;
            }
            assert!(worst < 1e-4, "joint {j} jump {worst}");
        }
    }
}
