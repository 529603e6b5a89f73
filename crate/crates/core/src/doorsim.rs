//! A deterministic top-down world with a latched, hinged door.
//!
//! The robot is a disk with a unicycle base and a gripper point a fixed
//! distance ahead of its center. The wrist turns the latch only while the
//! gripper is on the handle; once the latch angle reaches `phi_release` the
//! door swings open under body contact. The episode succeeds when the robot
//! center crosses the wall line inside the doorway.
//!
//! Coordinates are meters with `+y` pointing from the robot's side of the wall
//! toward the far room. A door at angle `theta` runs from its hinge (the right
//! end of the gap) along `(-cos theta, sin theta)`.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::helpgate::{gate_update, GateConfig, GateSignal, GateState};
use crate::trajlog::{
    quantize, Action, BasePose, FailureMode, KinematicState, Observation, ObservationSpec,
    Outcome, Provenance, Step, Trajectory, TrajlogError,
};

#[derive(Debug, Error)]
pub enum DoorsimError {
    #[error("infeasible world config: {0}")]
    InfeasibleConfig(String),
    #[error("start pose for seed {0} is in collision")]
    InfeasibleStart(u64),
    #[error("the gate monitors the {0} but the policy does not report it")]
    MissingSignal(&'static str),
    #[error("policy failed: {0}")]
    Policy(String),
    #[error(transparent)]
    Trajectory(#[from] TrajlogError),
}

pub type Result<T> = std::result::Result<T, DoorsimError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub base_forward: f64,
    pub base_turn: f64,
    pub wrist_rate: f64,
}

/// Grayscale intensities used by [`render`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub background: f64,
    pub wall: f64,
    pub door: f64,
    pub handle: f64,
    pub robot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoorWorldConfig {
    pub arena_width: f64,
    pub arena_height: f64,
    pub wall_y: f64,
    pub gap_width: f64,
    /// Left end of the doorway; sampled in `gap_x0 ± gap_x0_jitter`.
    pub gap_x0: f64,
    pub gap_x0_jitter: f64,
    pub door_initial_angle: f64,
    pub door_max_angle: f64,
    /// Handle position as a fraction of the door length from the hinge.
    pub handle_fraction: f64,
    pub handle_fraction_jitter: f64,
    /// Distance of the handle off the door face, toward the robot side.
    pub handle_standoff: f64,
    pub reach_radius: f64,
    pub phi_release: f64,
    pub phi_max: f64,
    pub robot_radius: f64,
    pub gripper_offset: f64,
    pub start: BasePose,
    pub start_jitter: BasePose,
    pub limits: Limits,
    pub tick: f64,
    pub max_steps: u32,
    /// Wrist travel (rad) spent turning with the gripper off the handle but
    /// within `grasp_zone` of the latched door before the grasp counts as
    /// missed.
    pub fumble_limit: f64,
    pub grasp_zone: f64,
    /// Blocked travel (m) pressed into the latched door before the push
    /// counts as a failure.
    pub push_limit: f64,
    pub palette: Palette,
}

impl Default for DoorWorldConfig {
    fn default() -> Self {
        Self {
            arena_width: 4.0,
            arena_height: 4.0,
            wall_y: 2.5,
            gap_width: 1.0,
            gap_x0: 1.5,
            gap_x0_jitter: 0.3,
            door_initial_angle: 0.0,
            door_max_angle: 1.75,
            handle_fraction: 0.625,
            handle_fraction_jitter: 0.075,
            handle_standoff: 0.05,
            reach_radius: 0.08,
            phi_release: 0.8,
            phi_max: 1.2,
            robot_radius: 0.2,
            gripper_offset: 0.3,
            start: BasePose {
                x: 2.0,
                y: 0.9,
                heading: FRAC_PI_2,
            },
            start_jitter: BasePose {
                x: 1.0,
                y: 0.3,
                heading: 0.6,
            },
            limits: Limits {
                base_forward: 0.5,
                base_turn: 1.5,
                wrist_rate: 2.0,
            },
            tick: 0.1,
            max_steps: 150,
            fumble_limit: 1.0,
            grasp_zone: 0.12,
            push_limit: 0.05,
            palette: Palette {
                background: 0.0,
                wall: 1.0,
                door: 0.6,
                handle: 0.85,
                robot: 0.4,
            },
        }
    }
}

impl DoorWorldConfig {
    /// Same world with every randomization range set to zero.
    pub fn canonical(&self) -> Self {
        Self {
            gap_x0_jitter: 0.0,
            handle_fraction_jitter: 0.0,
            start_jitter: BasePose {
                x: 0.0,
                y: 0.0,
                heading: 0.0,
            },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DoorsimError::InfeasibleConfig(m.to_string()));
        let finite = [
            self.arena_width,
            self.arena_height,
            self.wall_y,
            self.gap_width,
            self.gap_x0,
            self.gap_x0_jitter,
            self.door_initial_angle,
            self.door_max_angle,
            self.handle_fraction,
            self.handle_fraction_jitter,
            self.handle_standoff,
            self.reach_radius,
            self.phi_release,
            self.phi_max,
            self.robot_radius,
            self.gripper_offset,
            self.tick,
            self.fumble_limit,
            self.grasp_zone,
            self.push_limit,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        if self.fumble_limit < 0.0 || self.push_limit < 0.0 || self.grasp_zone < 0.0 {
            return bad("failure limits must be non-negative");
        }
        if self.gap_width <= 2.0 * self.robot_radius {
            return bad("doorway must be wider than the robot");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1");
        }
        if self.tick <= 0.0 || self.robot_radius <= 0.0 || self.reach_radius <= 0.0 {
            return bad("tick, robot radius and reach radius must be positive");
        }
        let jitters = [
            self.gap_x0_jitter,
            self.handle_fraction_jitter,
            self.start_jitter.x,
            self.start_jitter.y,
            self.start_jitter.heading,
        ];
        if jitters.iter().any(|&j| j < 0.0) {
            return bad("randomization ranges must be non-negative");
        }
        if self.gap_x0 - self.gap_x0_jitter < 0.0
            || self.gap_x0 + self.gap_x0_jitter + self.gap_width > self.arena_width
        {
            return bad("doorway leaves the arena");
        }
        if self.wall_y <= 0.0 || self.wall_y >= self.arena_height {
            return bad("wall outside the arena");
        }
        let (flo, fhi) = (
            self.handle_fraction - self.handle_fraction_jitter,
            self.handle_fraction + self.handle_fraction_jitter,
        );
        if flo <= 0.0 || fhi >= 1.0 {
            return bad("handle must lie on the door");
        }
        if self.phi_release <= 0.0 || self.phi_release > self.phi_max {
            return bad("phi_release must lie in (0, phi_max]");
        }
        if self.door_initial_angle < 0.0 || self.door_initial_angle >= self.door_max_angle {
            return bad("door initial angle must lie in [0, door_max_angle)");
        }
        let l = &self.limits;
        if !(l.base_forward > 0.0 && l.base_turn > 0.0 && l.wrist_rate > 0.0) {
            return bad("actuator limits must be positive");
        }
        Ok(())
    }

    /// Clamps an action to the actuator limits. Non-finite fields become 0.
    pub fn clamp_action(&self, a: &Action) -> Action {
        let c = |v: f64, lim: f64| if v.is_finite() { v.clamp(-lim, lim) } else { 0.0 };
        Action {
            base_forward: c(a.base_forward, self.limits.base_forward),
            base_turn: c(a.base_turn, self.limits.base_turn),
            wrist_rate: c(a.wrist_rate, self.limits.wrist_rate),
            terminate: if a.terminate.is_finite() {
                a.terminate.clamp(0.0, 1.0)
            } else {
                0.0
            },
        }
    }
}

/// Per-episode layout drawn at reset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub gap_x0: f64,
    pub handle_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub pose: BasePose,
    /// Wrist/latch angle.
    pub phi: f64,
    pub door_angle: f64,
    /// Accumulated off-handle wrist travel near the latched door.
    pub fumble: f64,
    /// Accumulated travel blocked by the latched door.
    pub door_load: f64,
    pub step: u32,
    pub scenario: Scenario,
    pub seed: u64,
}

type P2 = (f64, f64);

fn sub(a: P2, b: P2) -> P2 {
    (a.0 - b.0, a.1 - b.1)
}

fn dot(a: P2, b: P2) -> f64 {
    a.0 * b.0 + a.1 * b.1
}

fn dist(a: P2, b: P2) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

fn seg_dist(p: P2, a: P2, b: P2) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 == 0.0 {
        0.0
    } else {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    };
    dist(p, (a.0 + t * ab.0, a.1 + t * ab.1))
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

impl WorldState {
    pub fn position(&self) -> P2 {
        (self.pose.x, self.pose.y)
    }

    pub fn gap_x1(&self, cfg: &DoorWorldConfig) -> f64 {
        self.scenario.gap_x0 + cfg.gap_width
    }

    pub fn hinge(&self, cfg: &DoorWorldConfig) -> P2 {
        (self.gap_x1(cfg), cfg.wall_y)
    }

    /// Unit vector from the hinge along the door.
    pub fn door_direction(&self) -> P2 {
        (-self.door_angle.cos(), self.door_angle.sin())
    }

    /// Unit normal of the door face on the robot's side.
    pub fn door_normal(&self) -> P2 {
        (-self.door_angle.sin(), -self.door_angle.cos())
    }

    pub fn door_end(&self, cfg: &DoorWorldConfig) -> P2 {
        let h = self.hinge(cfg);
        let d = self.door_direction();
        (h.0 + cfg.gap_width * d.0, h.1 + cfg.gap_width * d.1)
    }

    pub fn handle(&self, cfg: &DoorWorldConfig) -> P2 {
        let h = self.hinge(cfg);
        let d = self.door_direction();
        let n = self.door_normal();
        let along = self.scenario.handle_fraction * cfg.gap_width;
        (
            h.0 + along * d.0 + cfg.handle_standoff * n.0,
            h.1 + along * d.1 + cfg.handle_standoff * n.1,
        )
    }

    pub fn gripper(&self, cfg: &DoorWorldConfig) -> P2 {
        (
            self.pose.x + cfg.gripper_offset * self.pose.heading.cos(),
            self.pose.y + cfg.gripper_offset * self.pose.heading.sin(),
        )
    }

    pub fn is_released(&self, cfg: &DoorWorldConfig) -> bool {
        self.phi >= cfg.phi_release
    }

    pub fn gripper_on_handle(&self, cfg: &DoorWorldConfig) -> bool {
        dist(self.gripper(cfg), self.handle(cfg)) <= cfg.reach_radius
    }

    pub fn kinematics(&self) -> KinematicState {
        KinematicState {
            joint_angles: vec![self.phi],
            base_pose: self.pose,
        }
    }

    fn door_distance(&self, p: P2, cfg: &DoorWorldConfig) -> f64 {
        seg_dist(p, self.hinge(cfg), self.door_end(cfg))
    }

    /// Whether a disk at `p` touches the arena boundary or the fixed walls.
    fn hits_static(&self, p: P2, cfg: &DoorWorldConfig) -> bool {
        let r = cfg.robot_radius;
        if p.0 - r < 0.0 || p.0 + r > cfg.arena_width || p.1 - r < 0.0 || p.1 + r > cfg.arena_height
        {
            return true;
        }
        let wy = cfg.wall_y;
        seg_dist(p, (0.0, wy), (self.scenario.gap_x0, wy)) < r
            || seg_dist(p, (self.gap_x1(cfg), wy), (cfg.arena_width, wy)) < r
    }
}

fn jitter(rng: &mut ChaCha8Rng, center: f64, half: f64) -> f64 {
    let u: f64 = rng.random_range(-1.0..=1.0);
    center + half * u
}

/// Draws the initial state for `seed`.
pub fn reset(config: &DoorWorldConfig, seed: u64) -> Result<WorldState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap_x0 = jitter(&mut rng, config.gap_x0, config.gap_x0_jitter);
    let handle_fraction = jitter(&mut rng, config.handle_fraction, config.handle_fraction_jitter);
    let s = &config.start;
    let j = &config.start_jitter;
    let pose = BasePose {
        x: jitter(&mut rng, s.x, j.x),
        y: jitter(&mut rng, s.y, j.y),
        heading: wrap_angle(jitter(&mut rng, s.heading, j.heading)),
    };
    let state = WorldState {
        pose,
        phi: 0.0,
        door_angle: config.door_initial_angle,
        fumble: 0.0,
        door_load: 0.0,
        step: 0,
        scenario: Scenario {
            gap_x0,
            handle_fraction,
        },
        seed,
    };
    let p = state.position();
    if state.hits_static(p, config)
        || state.door_distance(p, config) < config.robot_radius
        || p.1 >= config.wall_y
    {
        return Err(DoorsimError::InfeasibleStart(seed));
    }
    Ok(state)
}

const DOOR_SWEEP: f64 = 0.005;

/// Advances the world by one tick. A returned outcome ends the episode; on
/// contact outcomes the robot is left at its last collision-free pose.
pub fn step(
    state: &WorldState,
    action: &Action,
    config: &DoorWorldConfig,
) -> (WorldState, Option<Outcome>) {
    let a = config.clamp_action(action);
    let mut next = state.clone();
    next.step = state.step + 1;
    let timeout = |s: WorldState| {
        let o = (s.step >= config.max_steps).then_some(Outcome::Failure(FailureMode::Timeout));
        (s, o)
    };

    if state.gripper_on_handle(config) {
        next.phi = (state.phi + a.wrist_rate * config.tick).clamp(0.0, config.phi_max);
        next.fumble = 0.0;
    } else if !state.is_released(config)
        && state.door_distance(state.gripper(config), config) < config.grasp_zone
    {
        next.fumble = state.fumble + a.wrist_rate.abs() * config.tick;
        if next.fumble > config.fumble_limit {
            return (next, Some(Outcome::Failure(FailureMode::GraspMiss)));
        }
    } else {
        next.fumble = 0.0;
    }

    if a.base_forward == 0.0 && a.base_turn == 0.0 {
        next.door_load = 0.0;
        return timeout(next);
    }
    let heading = wrap_angle(state.pose.heading + a.base_turn * config.tick);
    let travel = a.base_forward * config.tick;
    let p = (
        state.pose.x + travel * heading.cos(),
        state.pose.y + travel * heading.sin(),
    );
    let collision = Some(Outcome::Failure(FailureMode::Collision));
    if next.hits_static(p, config) {
        return (next, collision);
    }
    if next.door_distance(p, config) < config.robot_radius {
        if !next.is_released(config) {
            next.door_load = state.door_load + travel.abs();
            if next.door_load > config.push_limit {
                return (next, Some(Outcome::Failure(FailureMode::PushWhileLatched)));
            }
            return timeout(next);
        }
        let mut k = 1u32;
        loop {
            let angle = state.door_angle + f64::from(k) * DOOR_SWEEP;
            if angle > config.door_max_angle {
                return (next, collision);
            }
            next.door_angle = angle;
            if next.door_distance(p, config) >= config.robot_radius {
                break;
            }
            k += 1;
        }
    }
    next.door_load = 0.0;
    next.pose = BasePose {
        x: p.0,
        y: p.1,
        heading,
    };
    if p.1 > config.wall_y && p.0 > next.scenario.gap_x0 && p.0 < next.gap_x1(config) {
        return (next, Some(Outcome::Success));
    }
    timeout(next)
}

struct Raster {
    w: usize,
    h: usize,
    sx: f64,
    sy: f64,
    arena_h: f64,
    buf: Vec<f64>,
}

impl Raster {
    const SS: usize = 2;

    fn new(spec: &ObservationSpec, cfg: &DoorWorldConfig) -> Self {
        let w = spec.width * Self::SS;
        let h = spec.height * Self::SS;
        Self {
            w,
            h,
            sx: cfg.arena_width / w as f64,
            sy: cfg.arena_height / h as f64,
            arena_h: cfg.arena_height,
            buf: vec![cfg.palette.background; w * h],
        }
    }

    fn sample_center(&self, i: usize, j: usize) -> P2 {
        ((i as f64 + 0.5) * self.sx, self.arena_h - (j as f64 + 0.5) * self.sy)
    }

    /// Paints every sample within `radius` of segment `a`-`b`.
    fn capsule(&mut self, a: P2, b: P2, radius: f64, value: f64) {
        let (x0, x1) = (a.0.min(b.0) - radius, a.0.max(b.0) + radius);
        let (y0, y1) = (a.1.min(b.1) - radius, a.1.max(b.1) + radius);
        let i0 = (x0 / self.sx).floor().max(0.0) as usize;
        let i1 = ((x1 / self.sx).ceil().max(0.0) as usize).min(self.w);
        let j0 = ((self.arena_h - y1) / self.sy).floor().max(0.0) as usize;
        let j1 = (((self.arena_h - y0) / self.sy).ceil().max(0.0) as usize).min(self.h);
        for j in j0..j1 {
            for i in i0..i1 {
                if seg_dist(self.sample_center(i, j), a, b) <= radius {
                    self.buf[j * self.w + i] = value;
                }
            }
        }
    }
}

const WALL_HALF_WIDTH: f64 = 0.06;
const DOOR_HALF_WIDTH: f64 = 0.04;
const HANDLE_HALF_LENGTH: f64 = 0.08;
const HANDLE_HALF_WIDTH: f64 = 0.03;

/// Rasterizes walls, door, handle and robot top-down with 2x2 supersampling.
/// The handle lever is drawn rotated by the latch angle. Every channel gets
/// the same intensity.
pub fn render(state: &WorldState, spec: &ObservationSpec, config: &DoorWorldConfig) -> Observation {
    let pal = &config.palette;
    let mut r = Raster::new(spec, config);
    let wy = config.wall_y;
    r.capsule((0.0, wy), (state.scenario.gap_x0, wy), WALL_HALF_WIDTH, pal.wall);
    r.capsule((state.gap_x1(config), wy), (config.arena_width, wy), WALL_HALF_WIDTH, pal.wall);
    r.capsule(state.hinge(config), state.door_end(config), DOOR_HALF_WIDTH, pal.door);
    let hp = state.handle(config);
    let lever = state.door_angle + state.phi;
    let ld = (-lever.cos() * HANDLE_HALF_LENGTH, lever.sin() * HANDLE_HALF_LENGTH);
    r.capsule(
        (hp.0 - ld.0, hp.1 - ld.1),
        (hp.0 + ld.0, hp.1 + ld.1),
        HANDLE_HALF_WIDTH,
        pal.handle,
    );
    let c = state.position();
    r.capsule(c, c, config.robot_radius, pal.robot);

    let ss = Raster::SS;
    let norm = (ss * ss) as f64;
    let mut pixels = vec![0u8; spec.len()];
    for y in 0..spec.height {
        for x in 0..spec.width {
            let mut acc = 0.0;
            for dj in 0..ss {
                let row = (y * ss + dj) * r.w;
                for di in 0..ss {
                    acc += r.buf[row + x * ss + di];
                }
            }
            let level = quantize(acc / norm);
            for ch in 0..spec.channels {
                pixels[spec.index(x, y, ch)] = level;
            }
        }
    }
    Observation::from_levels(pixels, state.kinematics())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Gripper-to-handle distance at which the expert starts turning the wrist.
    pub grasp_tolerance: f64,
    /// Lateral tolerance of the final approach funnel at the pregrasp pose.
    pub funnel_base: f64,
    /// Growth of the funnel's lateral tolerance per meter of remaining approach.
    pub funnel_slope: f64,
    pub staging_distance: f64,
    pub lookahead: f64,
    pub arrive_tolerance: f64,
    pub turn_gain: f64,
    pub forward_gain: f64,
    /// Heading error above which the base turns in place.
    pub turn_in_place: f64,
    /// How far past the wall the push phase aims.
    pub push_depth: f64,
    /// The latch is turned this far past the release angle before pushing.
    pub latch_margin: f64,
    pub noise_std: f64,
    /// Lag-one autocorrelation of the action noise. The noise is a stationary
    /// Gauss-Markov process whose per-step std stays `noise_std`.
    pub noise_correlation: f64,
    /// Per-step probability of starting a phase-skip burst.
    pub perturb_prob: f64,
    pub perturb_steps: u32,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            grasp_tolerance: 0.05,
            funnel_base: 0.03,
            funnel_slope: 0.4,
            staging_distance: 0.4,
            lookahead: 0.25,
            arrive_tolerance: 0.01,
            turn_gain: 4.0,
            forward_gain: 3.0,
            turn_in_place: 0.4,
            push_depth: 0.6,
            latch_margin: 0.2,
            noise_std: 0.0,
            noise_correlation: 0.0,
            perturb_prob: 0.0,
            perturb_steps: 5,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite())
            || !(self.latch_margin >= 0.0 && self.latch_margin.is_finite())
            || !(0.0..=1.0).contains(&self.perturb_prob)
            || !(0.0..1.0).contains(&self.noise_correlation)
        {
            return Err(DoorsimError::InfeasibleConfig(
                "expert noise std and latch margin must be >= 0, noise correlation in [0, 1) and perturbation probability in [0, 1]"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExpertPhase {
    Approach,
    Grasp,
    Push,
    Through,
}

impl ExpertPhase {
    /// The phase a perturbed expert jumps to.
    pub fn skip(self) -> Self {
        match self {
            ExpertPhase::Approach => ExpertPhase::Grasp,
            ExpertPhase::Grasp => ExpertPhase::Push,
            ExpertPhase::Push | ExpertPhase::Through => ExpertPhase::Through,
        }
    }
}

pub fn expert_phase(state: &WorldState, world: &DoorWorldConfig, expert: &ExpertConfig) -> ExpertPhase {
    let at_handle = dist(state.gripper(world), state.handle(world)) <= expert.grasp_tolerance;
    if state.pose.y > world.wall_y {
        ExpertPhase::Through
    } else if at_handle && state.phi < world.phi_release + expert.latch_margin && state.phi < world.phi_max {
        ExpertPhase::Grasp
    } else if state.is_released(world) {
        ExpertPhase::Push
    } else {
        ExpertPhase::Approach
    }
}

fn steer(state: &WorldState, target: P2, speed: f64, world: &DoorWorldConfig, e: &ExpertConfig) -> Action {
    let d = sub(target, state.position());
    let err = wrap_angle(d.1.atan2(d.0) - state.pose.heading);
    let lim = world.limits.base_turn;
    Action {
        base_forward: if err.abs() > e.turn_in_place {
            0.0
        } else {
            speed * err.cos()
        },
        base_turn: (e.turn_gain * err).clamp(-lim, lim),
        ..Action::default()
    }
}

fn approach(state: &WorldState, world: &DoorWorldConfig, e: &ExpertConfig) -> Action {
    let vmax = world.limits.base_forward;
    let handle = state.handle(world);
    let n = state.door_normal();
    let u = (-n.0, -n.1);
    let lateral = state.door_direction();
    let pregrasp = (
        handle.0 + world.gripper_offset * n.0,
        handle.1 + world.gripper_offset * n.1,
    );
    let p = state.position();
    let ex = dot(sub(p, pregrasp), lateral);
    let ey = dot(sub(pregrasp, p), u);
    let in_funnel = ey >= -e.arrive_tolerance && ex.abs() <= e.funnel_base + e.funnel_slope * ey.max(0.0);
    if !in_funnel {
        let staging = (
            pregrasp.0 - e.staging_distance * u.0,
            pregrasp.1 - e.staging_distance * u.1,
        );
        let speed = (e.forward_gain * dist(p, staging)).min(vmax);
        return steer(state, staging, speed, world, e);
    }
    if ey <= e.arrive_tolerance {
        let err = wrap_angle(u.1.atan2(u.0) - state.pose.heading);
        let lim = world.limits.base_turn;
        return Action {
            base_turn: (e.turn_gain * err).clamp(-lim, lim),
            ..Action::default()
        };
    }
    let back = (ey - e.lookahead).max(0.0);
    let target = (pregrasp.0 - back * u.0, pregrasp.1 - back * u.1);
    steer(state, target, (e.forward_gain * ey).min(vmax), world, e)
}

/// The action of `phase` at `state`, regardless of which phase the state is in.
pub fn phase_action(
    phase: ExpertPhase,
    state: &WorldState,
    world: &DoorWorldConfig,
    expert: &ExpertConfig,
) -> Action {
    let vmax = world.limits.base_forward;
    match phase {
        ExpertPhase::Through => Action {
            base_forward: vmax,
            terminate: 1.0,
            ..Action::default()
        },
        ExpertPhase::Push => {
            let gx = state.scenario.gap_x0 + 0.5 * world.gap_width;
            steer(state, (gx, world.wall_y + expert.push_depth), vmax, world, expert)
        }
        ExpertPhase::Grasp => Action {
            wrist_rate: world.limits.wrist_rate,
            ..Action::default()
        },
        ExpertPhase::Approach => approach(state, world, expert),
    }
}

/// Noise-free demonstrator: approach the handle, turn the latch past release,
/// push the door open and drive through. A pure function of the state.
pub fn scripted_expert(state: &WorldState, world: &DoorWorldConfig, expert: &ExpertConfig) -> Action {
    phase_action(expert_phase(state, world, expert), state, world, expert)
}

/// What a policy reports at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub value: Option<f64>,
    pub failure_prob: Option<f64>,
}

impl From<Action> for Decision {
    fn from(action: Action) -> Self {
        Self {
            action,
            value: None,
            failure_prob: None,
        }
    }
}

pub trait Policy {
    fn provenance(&self) -> Provenance;

    /// Called once before each episode.
    fn begin_episode(&mut self, _seed: u64) {}

    fn act(
        &mut self,
        state: &WorldState,
        observation: &Observation,
        world: &DoorWorldConfig,
    ) -> Result<Decision>;
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedExpert {
    pub config: ExpertConfig,
}

impl Policy for ScriptedExpert {
    fn provenance(&self) -> Provenance {
        Provenance::ExpertDemo
    }

    fn act(&mut self, state: &WorldState, _: &Observation, world: &DoorWorldConfig) -> Result<Decision> {
        Ok(scripted_expert(state, world, &self.config).into())
    }
}

/// The scripted expert with Gaussian action noise and occasional bursts of
/// phase skipping.
#[derive(Debug, Clone)]
pub struct NoisyExpert {
    pub config: ExpertConfig,
    pub policy_id: String,
    rng: ChaCha8Rng,
    burst_left: u32,
    noise: Option<[f64; 3]>,
}

impl NoisyExpert {
    pub fn new(config: ExpertConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            policy_id: format!("noisy-expert-{}", config.noise_std),
            config,
            rng: ChaCha8Rng::seed_from_u64(0),
            burst_left: 0,
            noise: None,
        })
    }
}

const NOISE_STREAM: u64 = 0x6e6f_6973_7900_0001;

impl Policy for NoisyExpert {
    fn provenance(&self) -> Provenance {
        Provenance::PolicyRollout {
            policy_id: self.policy_id.clone(),
        }
    }

    fn begin_episode(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_STREAM);
        self.burst_left = 0;
        self.noise = None;
    }

    fn act(&mut self, state: &WorldState, _: &Observation, world: &DoorWorldConfig) -> Result<Decision> {
        let mut phase = expert_phase(state, world, &self.config);
        let start_burst = self.rng.random::<f64>() < self.config.perturb_prob;
        if self.burst_left > 0 {
            self.burst_left -= 1;
            phase = phase.skip();
        } else if start_burst {
            self.burst_left = self.config.perturb_steps.saturating_sub(1);
            phase = phase.skip();
        }
        let mut a = phase_action(phase, state, world, &self.config);
        let normal = Normal::new(0.0, self.config.noise_std)
            .map_err(|e| DoorsimError::Policy(e.to_string()))?;
        let fresh = [0; 3].map(|_| normal.sample(&mut self.rng));
        let rho = self.config.noise_correlation;
        let keep = (1.0 - rho * rho).sqrt();
        let n = match self.noise {
            None => fresh,
            Some(prev) => [0, 1, 2].map(|i| rho * prev[i] + keep * fresh[i]),
        };
        self.noise = Some(n);
        a.base_forward += n[0];
        a.base_turn += n[1];
        a.wrist_rate += n[2];
        Ok(world.clamp_action(&a).into())
    }
}

/// Runs one episode from `reset(world, seed)` until an outcome, recording
/// every frame including the terminal one. With a gate, the episode ends as
/// [`Outcome::AskedForHelp`] on the frame where it fires.
pub fn rollout(
    policy: &mut dyn Policy,
    world: &DoorWorldConfig,
    spec: &ObservationSpec,
    seed: u64,
    episode_id: &str,
    gate: Option<&GateConfig>,
) -> Result<Trajectory> {
    let mut state = reset(world, seed)?;
    policy.begin_episode(seed);
    let mut gate_state = GateState::default();
    let mut steps = Vec::new();
    let mut pending: Option<Outcome> = None;
    let outcome = loop {
        let observation = render(&state, spec, world);
        let decision = policy.act(&state, &observation, world)?;
        let action = world.clamp_action(&decision.action);
        steps.push(Step {
            index: state.step,
            observation,
            action,
        });
        if let Some(o) = pending {
            break o;
        }
        if let Some(g) = gate {
            let signal = match g.signal {
                GateSignal::ValueHead => decision.value.ok_or(DoorsimError::MissingSignal("value"))?,
                GateSignal::ClassifierHead => decision
                    .failure_prob
                    .ok_or(DoorsimError::MissingSignal("failure probability"))?,
            };
            let (next, fired) = gate_update(gate_state, signal, g);
            gate_state = next;
            if fired {
                break Outcome::AskedForHelp;
            }
        }
        let (next, o) = step(&state, &action, world);
        state = next;
        pending = o;
    };
    Ok(Trajectory::new(
        episode_id,
        seed,
        policy.provenance(),
        steps,
        outcome,
        spec,
    )?)
}
