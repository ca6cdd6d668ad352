//! Discrete-time redirected-walking simulator: an artificial-potential-field
//! redirection controller with reset-to-gradient resets, random virtual
//! target paths, and Monte Carlo reset estimation.
//!
//! All state lives in room-centered coordinates (the room spans
//! `[-w/2, w/2] x [-h/2, h/2]`) and headings are unit vectors rather than
//! angles. With that representation a quarter turn of the layout and of every
//! random draw produces a quarter-turned trajectory bit for bit.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{closest_on_segment, ConvexPoly, Vec2};
use crate::layout::Layout;

const MAX_START_TRIES: usize = 10_000;

/// Residual heading error at which a turn in progress counts as finished.
const TURN_DONE_RAD: f64 = 1e-12;

/// Reset-heading candidates: one degree apart, built as quarter turns of a
/// single quadrant so the candidate set is itself quarter-turn symmetric.
const CANDIDATES_PER_QUADRANT: usize = 90;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("no start position with clearance above {buffer} m after {tries} tries")]
    InfeasibleLayout { buffer: f64, tries: usize },
    #[error("position {x}, {y} is outside the room or inside an obstacle")]
    InvalidPosition { x: f64, y: f64 },
    #[error("invalid simulator configuration: {0}")]
    InvalidConfig(String),
    #[error("path count must be at least 1")]
    NoPaths,
    #[error("deadline passed after {completed} of {paths} paths")]
    DeadlineExceeded { completed: usize, paths: usize },
}

/// Simulator constants. Speeds and gain bounds default to the Study-1
/// protocol; buffer, collection radius and force kernel are modelling
/// choices and exposed for that reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Frame time, seconds.
    pub dt: f64,
    /// m/s
    pub walk_speed: f64,
    /// deg/s
    pub turn_speed: f64,
    pub trans_gain_range: [f64; 2],
    pub rot_gain_range: [f64; 2],
    /// Radius of the injected physical arc while walking straight, meters.
    pub curvature_radius: f64,
    pub curvature_enabled: bool,
    pub reset_buffer: f64,
    pub target_radius_range: [f64; 2],
    pub target_collect_dist: f64,
    pub episode_distance: f64,
    pub force_falloff_exponent: f64,
    pub wall_segment_weight: f64,
    pub obstacle_weight: f64,
    /// The simulated user turns in place until the heading error is below
    /// this many degrees, then walks.
    pub turn_tolerance_deg: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 90.0,
            walk_speed: 1.4,
            turn_speed: 90.0,
            trans_gain_range: [0.86, 1.26],
            rot_gain_range: [0.67, 1.24],
            curvature_radius: 7.5,
            curvature_enabled: true,
            reset_buffer: 0.2,
            target_radius_range: [2.0, 6.0],
            target_collect_dist: 0.1,
            episode_distance: 500.0,
            force_falloff_exponent: 2.0,
            wall_segment_weight: 1.0,
            obstacle_weight: 1.0,
            turn_tolerance_deg: 1.0,
        }
    }
}

impl SimConfig {
    /// Configuration with every redirection gain pinned to 1 and no
    /// curvature: physical motion mirrors virtual motion.
    pub fn without_redirection() -> Self {
        Self {
            trans_gain_range: [1.0, 1.0],
            rot_gain_range: [1.0, 1.0],
            curvature_enabled: false,
            ..Self::default()
        }
    }

    /// Parses a TOML table; missing keys take their defaults.
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        let positive = [
            ("dt", self.dt),
            ("walk_speed", self.walk_speed),
            ("turn_speed", self.turn_speed),
            ("curvature_radius", self.curvature_radius),
            ("reset_buffer", self.reset_buffer),
            ("target_collect_dist", self.target_collect_dist),
            ("force_falloff_exponent", self.force_falloff_exponent),
            ("wall_segment_weight", self.wall_segment_weight),
            ("obstacle_weight", self.obstacle_weight),
            ("turn_tolerance_deg", self.turn_tolerance_deg),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive and finite"));
            }
        }
        if !(self.episode_distance >= 0.0 && self.episode_distance.is_finite()) {
            return bad("episode_distance must be non-negative");
        }
        for (name, [lo, hi]) in [
            ("trans_gain_range", self.trans_gain_range),
            ("rot_gain_range", self.rot_gain_range),
        ] {
            if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
                return bad(&format!("{name} must be positive and contain 1.0"));
            }
        }
        let [rmin, rmax] = self.target_radius_range;
        if !(rmin > 0.0 && rmin <= rmax && rmax.is_finite()) {
            return bad("target_radius_range must be positive and ordered");
        }
        if self.target_collect_dist >= rmin {
            return bad("target_collect_dist must be below the minimum target radius");
        }
        Ok(())
    }

    pub fn validate_for(&self, layout: &Layout) -> Result<(), SimError> {
        self.validate()?;
        let shorter = layout.room.width().min(layout.room.height());
        if self.reset_buffer >= shorter / 2.0 {
            return Err(SimError::InvalidConfig(
                "reset_buffer must be below half the room's shorter side".into(),
            ));
        }
        Ok(())
    }

    fn turn_step_rad(&self) -> f64 {
        self.turn_speed.to_radians() * self.dt
    }

    fn walk_step(&self) -> f64 {
        self.walk_speed * self.dt
    }
}

/// Simulated user. Positions are room-centered; headings are unit vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserState {
    pub phys_pos: Vec2,
    pub phys_dir: Vec2,
    pub virt_pos: Vec2,
    pub virt_dir: Vec2,
    pub virt_distance_walked: f64,
    pub resets: u32,
    /// A turn in place, once started, runs until the heading is on target.
    pub turning: bool,
}

impl UserState {
    pub fn new(phys_pos: Vec2, phys_heading: f64, virt_pos: Vec2, virt_heading: f64) -> Self {
        Self {
            phys_pos,
            phys_dir: Vec2::from_angle(phys_heading),
            virt_pos,
            virt_dir: Vec2::from_angle(virt_heading),
            virt_distance_walked: 0.0,
            resets: 0,
            turning: false,
        }
    }

    /// Physical heading in (-pi, pi].
    pub fn phys_heading(&self) -> f64 {
        self.phys_dir.angle()
    }

    pub fn virt_heading(&self) -> f64 {
        self.virt_dir.angle()
    }
}

/// Redirection gains for one frame. `curvature` is signed, in 1/m.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainSet {
    pub translation: f64,
    pub rotation: f64,
    pub curvature_sign: i8,
    pub curvature: f64,
}

impl GainSet {
    pub const NEUTRAL: GainSet = GainSet {
        translation: 1.0,
        rotation: 1.0,
        curvature_sign: 0,
        curvature: 0.0,
    };
}

/// What the user does this frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Walking,
    /// Turning in place; `direction` is +1 for counter-clockwise.
    Turning { direction: f64 },
}

/// Force kernel `(p - c) / |p - c|^(1 + e)`, scaled by `weight`.
fn push(v: Vec2, weight: f64, exponent: f64) -> Vec2 {
    let n = v.norm();
    v * (weight / n.powf(1.0 + exponent))
}

/// Same kernel for an axis-aligned offset `d`; odd in `d`.
fn push_axis(d: f64, weight: f64, exponent: f64) -> f64 {
    d * (weight / d.abs().powf(1.0 + exponent))
}

/// Room and obstacles in room-centered coordinates.
#[derive(Debug, Clone)]
pub struct Arena {
    half: Vec2,
    obstacles: Vec<ConvexPoly>,
    origin: Vec2,
}

/// Closest point and distance of one boundary element.
#[derive(Debug, Clone, Copy)]
struct Contact {
    point: Vec2,
    distance: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub force: Vec2,
    pub clearance: f64,
}

impl Arena {
    pub fn from_layout(layout: &Layout) -> Self {
        Self {
            half: layout.room.half_extents(),
            obstacles: layout.centered_footprints(),
            origin: layout.room.center(),
        }
    }

    /// Room center in room coordinates.
    pub fn origin(&self) -> Vec2 {
        self.origin
    }

    pub fn half_extents(&self) -> Vec2 {
        self.half
    }

    pub fn to_room(&self, p: Vec2) -> Vec2 {
        p + self.origin
    }

    pub fn from_room(&self, p: Vec2) -> Vec2 {
        p - self.origin
    }

    /// Strictly inside the room and not inside or on any obstacle.
    pub fn is_free(&self, p: Vec2) -> bool {
        p.x > -self.half.x
            && p.x < self.half.x
            && p.y > -self.half.y
            && p.y < self.half.y
            && !self.obstacles.iter().any(|o| o.contains(p))
    }

    /// Contacts in a fixed order: right, left, top, bottom wall, then
    /// obstacles in layout order. `p` must be inside the room.
    fn for_each_contact(&self, p: Vec2, mut f: impl FnMut(Contact)) {
        let h = self.half;
        f(Contact {
            point: Vec2::new(h.x, p.y),
            distance: h.x - p.x,
        });
        f(Contact {
            point: Vec2::new(-h.x, p.y),
            distance: p.x + h.x,
        });
        f(Contact {
            point: Vec2::new(p.x, h.y),
            distance: h.y - p.y,
        });
        f(Contact {
            point: Vec2::new(p.x, -h.y),
            distance: p.y + h.y,
        });
        for o in &self.obstacles {
            let c = closest_point_outside(o, p);
            f(Contact {
                point: c,
                distance: (p - c).norm(),
            });
        }
    }

    /// Summed push force and minimum clearance at `p` (room-centered).
    pub fn probe(&self, p: Vec2, cfg: &SimConfig) -> Probe {
        let e = cfg.force_falloff_exponent;
        let ww = cfg.wall_segment_weight;
        let h = self.half;
        // each pair of opposite walls is a two-term sum, which is commutative
        // and therefore survives the quarter-turn relabelling of walls
        let mut force = Vec2::new(
            push_axis(p.x - h.x, ww, e) + push_axis(p.x + h.x, ww, e),
            push_axis(p.y - h.y, ww, e) + push_axis(p.y + h.y, ww, e),
        );
        let mut clearance = (h.x - p.x).min(p.x + h.x).min(h.y - p.y).min(p.y + h.y);
        for o in &self.obstacles {
            let c = closest_point_outside(o, p);
            let v = p - c;
            clearance = clearance.min(v.norm());
            force += push(v, cfg.obstacle_weight, e);
        }
        Probe { force, clearance }
    }

    pub fn clearance(&self, p: Vec2) -> f64 {
        let mut best = f64::INFINITY;
        self.for_each_contact(p, |c| best = best.min(c.distance));
        best
    }

    pub fn apf_force(&self, p: Vec2, cfg: &SimConfig) -> Result<Vec2, SimError> {
        if !self.is_free(p) {
            let q = self.to_room(p);
            return Err(SimError::InvalidPosition { x: q.x, y: q.y });
        }
        Ok(self.probe(p, cfg).force)
    }

    /// Advances the user by one frame toward `target` (virtual coordinates)
    /// and returns the gains that were applied.
    pub fn step(&self, state: &mut UserState, target: Vec2, cfg: &SimConfig) -> GainSet {
        let force = self.probe(state.phys_pos, cfg).force;
        let to_target = target - state.virt_pos;
        let error = state.virt_dir.cross(to_target).atan2(state.virt_dir.dot(to_target));

        let must_turn = error.abs() >= cfg.turn_tolerance_deg.to_radians()
            || (state.turning && error.abs() > TURN_DONE_RAD);
        if must_turn {
            let direction = if error > 0.0 { 1.0 } else { -1.0 };
            let gains = select_gains(state.phys_dir, force, cfg, Motion::Turning { direction });
            let max_turn = cfg.turn_step_rad();
            state.turning = error.abs() > max_turn;
            let virt_turn = direction * error.abs().min(max_turn);
            state.virt_dir = unit(state.virt_dir.rotate(virt_turn));
            state.phys_dir = unit(state.phys_dir.rotate(virt_turn / gains.rotation));
            gains
        } else {
            state.turning = false;
            let gains = select_gains(state.phys_dir, force, cfg, Motion::Walking);
            let virt_step = cfg.walk_step();
            state.virt_pos += state.virt_dir * virt_step;
            state.virt_distance_walked += virt_step;
            let phys_step = virt_step / gains.translation;
            state.phys_pos += state.phys_dir * phys_step;
            if gains.curvature != 0.0 {
                state.phys_dir = unit(state.phys_dir.rotate(gains.curvature * phys_step));
            }
            gains
        }
    }

    /// Resets the user when they are inside the buffer of some boundary
    /// element and heading toward it. Returns whether a reset happened.
    pub fn check_and_reset(&self, state: &mut UserState, cfg: &SimConfig) -> bool {
        let p = state.phys_pos;
        let mut near: Vec<Vec2> = Vec::new();
        let mut approaching = false;
        self.for_each_contact(p, |c| {
            if c.distance < cfg.reset_buffer {
                if let Some(towards) = (c.point - p).normalized() {
                    approaching |= state.phys_dir.dot(towards) > 0.0;
                    near.push(towards);
                }
            }
        });
        if !approaching {
            return false;
        }
        state.resets += 1;
        let force = self.probe(p, cfg).force;
        state.phys_dir = reset_direction(force, state.phys_dir, &near);
        true
    }
}

/// Closest point on the polygon boundary, also for points inside it.
fn closest_point_outside(poly: &ConvexPoly, p: Vec2) -> Vec2 {
    let mut best = poly.vertices()[0];
    let mut best_d = f64::INFINITY;
    for (a, b) in poly.edges() {
        let c = closest_on_segment(a, b, p);
        let d = (p - c).norm_sq();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn unit(v: Vec2) -> Vec2 {
    v.normalized().unwrap_or(v)
}

/// Largest approach speed toward any nearby element when moving along `d`.
fn approach_rate(d: Vec2, near: &[Vec2]) -> f64 {
    near.iter().map(|t| d.dot(*t)).fold(f64::NEG_INFINITY, f64::max)
}

/// Reset-to-gradient heading: the direction of the summed push force. When
/// that direction would still close in on an element within the buffer, the
/// nearest admissible direction to it is used instead.
fn reset_direction(force: Vec2, current: Vec2, near: &[Vec2]) -> Vec2 {
    let preferred = force.normalized().unwrap_or(-current);
    if approach_rate(preferred, near) <= 0.0 {
        return preferred;
    }
    let mut best_ok: Option<(f64, Vec2)> = None;
    let mut best_any = (f64::INFINITY, preferred);
    for q in 0..4u8 {
        for i in 0..CANDIDATES_PER_QUADRANT {
            let d = Vec2::from_angle(i as f64 * (PI / 2.0) / CANDIDATES_PER_QUADRANT as f64)
                .rotate_quarter(q);
            let rate = approach_rate(d, near);
            if rate <= 0.0 {
                let score = d.dot(preferred);
                if best_ok.map_or(true, |(s, _)| score > s) {
                    best_ok = Some((score, d));
                }
            } else if rate < best_any.0 {
                best_any = (rate, d);
            }
        }
    }
    best_ok.map_or(best_any.1, |(_, d)| d)
}

/// Gain policy of the APF controller.
///
/// Walking: curvature steers the physical heading toward the force (sign of
/// `heading x force`, +1 on a tie); translation gain is the range minimum when
/// walking against the force and the maximum otherwise. Turning: rotation gain
/// is the range maximum when the turn brings the heading toward the force and
/// the minimum otherwise. A zero force yields neutral gains.
pub fn select_gains(phys_dir: Vec2, force: Vec2, cfg: &SimConfig, motion: Motion) -> GainSet {
    if force == Vec2::ZERO || !force.is_finite() {
        return GainSet::NEUTRAL;
    }
    let cross = phys_dir.cross(force);
    let dot = phys_dir.dot(force);
    match motion {
        Motion::Walking => {
            let [tmin, tmax] = cfg.trans_gain_range;
            let sign: i8 = if cross >= 0.0 { 1 } else { -1 };
            let curvature = if cfg.curvature_enabled {
                sign as f64 / cfg.curvature_radius
            } else {
                0.0
            };
            GainSet {
                translation: if dot < 0.0 { tmin } else { tmax },
                rotation: 1.0,
                curvature_sign: if cfg.curvature_enabled { sign } else { 0 },
                curvature,
            }
        }
        Motion::Turning { direction } => {
            let [rmin, rmax] = cfg.rot_gain_range;
            let toward = direction * cross > 0.0 || (cross == 0.0 && dot < 0.0);
            GainSet {
                translation: 1.0,
                rotation: if toward { rmax } else { rmin },
                curvature_sign: 0,
                curvature: 0.0,
            }
        }
    }
}

/// Push force at `p` given in room coordinates.
pub fn apf_force(layout: &Layout, cfg: &SimConfig, p: Vec2) -> Result<Vec2, SimError> {
    let arena = Arena::from_layout(layout);
    arena.apf_force(arena.from_room(p), cfg)
}

/// One frame of motion; `state` and `target` are room-centered / virtual.
pub fn step(state: UserState, target: Vec2, layout: &Layout, cfg: &SimConfig) -> UserState {
    let mut s = state;
    Arena::from_layout(layout).step(&mut s, target, cfg);
    s
}

pub fn check_and_reset(state: UserState, layout: &Layout, cfg: &SimConfig) -> UserState {
    let mut s = state;
    Arena::from_layout(layout).check_and_reset(&mut s, cfg);
    s
}

/// Extremes of the gains actually applied during an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainAudit {
    pub translation_min: f64,
    pub translation_max: f64,
    pub rotation_min: f64,
    pub rotation_max: f64,
    pub curvature_max_abs: f64,
    /// Smallest clearance to any wall or obstacle seen at a frame boundary.
    pub min_clearance: f64,
    pub frames: u64,
}

impl Default for GainAudit {
    fn default() -> Self {
        Self {
            translation_min: f64::INFINITY,
            translation_max: f64::NEG_INFINITY,
            rotation_min: f64::INFINITY,
            rotation_max: f64::NEG_INFINITY,
            curvature_max_abs: 0.0,
            min_clearance: f64::INFINITY,
            frames: 0,
        }
    }
}

impl GainAudit {
    fn record(&mut self, g: &GainSet, motion_walking: bool) {
        if motion_walking {
            self.translation_min = self.translation_min.min(g.translation);
            self.translation_max = self.translation_max.max(g.translation);
            self.curvature_max_abs = self.curvature_max_abs.max(g.curvature.abs());
        } else {
            self.rotation_min = self.rotation_min.min(g.rotation);
            self.rotation_max = self.rotation_max.max(g.rotation);
        }
        self.frames += 1;
    }
}

/// One frame of an episode trace, room coordinates for the physical side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: u64,
    pub phys: Vec2,
    pub virt: Vec2,
    pub resets: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub resets: u32,
    /// Virtual distance walked, meters.
    pub distance: f64,
    pub phys_trace: Option<Vec<TracePoint>>,
    pub seed: u64,
    pub audit: GainAudit,
}

impl EpisodeResult {
    /// CSV with header `step,phys_x,phys_y,virt_x,virt_y,resets`.
    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,phys_x,phys_y,virt_x,virt_y,resets")?;
        for t in self.phys_trace.iter().flatten() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                t.step, t.phys.x, t.phys.y, t.virt.x, t.virt.y, t.resets
            )?;
        }
        Ok(())
    }
}

/// Per-episode options beyond the seed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpisodeOptions {
    pub record_trace: bool,
    /// Every random vector (start position, headings, target offsets) is
    /// turned this many quarter turns counter-clockwise, which is how the
    /// episode of a quarter-turned layout reproduces the original one.
    pub quarter_turns: u8,
}

/// Where targets come from.
pub trait TargetSource {
    /// Next virtual target after `from` was collected (or the start).
    fn next_target(&mut self, from: Vec2) -> Option<Vec2>;
}

/// Targets at a uniform distance and uniform bearing around the previous one.
pub struct RandomTargets<'a> {
    rng: &'a mut ChaCha8Rng,
    radius: [f64; 2],
    quarter_turns: u8,
}

impl TargetSource for RandomTargets<'_> {
    fn next_target(&mut self, from: Vec2) -> Option<Vec2> {
        let r = self.rng.gen_range(self.radius[0]..=self.radius[1]);
        let phi = self.rng.gen_range(0.0..2.0 * PI);
        Some(from + (Vec2::from_angle(phi) * r).rotate_quarter(self.quarter_turns))
    }
}

/// A fixed list of targets, ending the episode once exhausted.
pub struct ScriptedTargets {
    targets: std::vec::IntoIter<Vec2>,
}

impl ScriptedTargets {
    pub fn new(targets: Vec<Vec2>) -> Self {
        Self {
            targets: targets.into_iter(),
        }
    }
}

impl TargetSource for ScriptedTargets {
    fn next_target(&mut self, _from: Vec2) -> Option<Vec2> {
        self.targets.next()
    }
}

/// Runs frames until the virtual distance reaches `cfg.episode_distance` or
/// the target source runs dry.
pub fn simulate(
    arena: &Arena,
    cfg: &SimConfig,
    mut state: UserState,
    targets: &mut dyn TargetSource,
    record_trace: bool,
) -> (UserState, GainAudit, Option<Vec<TracePoint>>) {
    let mut audit = GainAudit::default();
    let mut trace = record_trace.then(Vec::new);
    let mut frame = 0u64;
    let push_trace = |trace: &mut Option<Vec<TracePoint>>, s: &UserState, frame: u64| {
        if let Some(t) = trace.as_mut() {
            t.push(TracePoint {
                step: frame,
                phys: arena.to_room(s.phys_pos),
                virt: s.virt_pos,
                resets: s.resets,
            });
        }
    };
    push_trace(&mut trace, &state, frame);
    audit.min_clearance = arena.clearance(state.phys_pos);

    let mut target = targets.next_target(state.virt_pos);
    while state.virt_distance_walked < cfg.episode_distance {
        let Some(goal) = target else { break };
        let before = state.virt_distance_walked;
        let gains = arena.step(&mut state, goal, cfg);
        audit.record(&gains, state.virt_distance_walked > before);
        arena.check_and_reset(&mut state, cfg);
        audit.min_clearance = audit.min_clearance.min(arena.clearance(state.phys_pos));
        frame += 1;
        push_trace(&mut trace, &state, frame);
        if (goal - state.virt_pos).norm() <= cfg.target_collect_dist {
            target = targets.next_target(goal);
        }
    }
    (state, audit, trace)
}

/// Draws a start position uniformly over the free space with clearance above
/// the reset buffer, then uniform physical and virtual headings.
fn random_start(
    arena: &Arena,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
    quarter_turns: u8,
) -> Result<UserState, SimError> {
    // draws happen in the unrotated frame, whose half extents are swapped for
    // odd quarter turns
    let h = if quarter_turns % 2 == 1 {
        Vec2::new(arena.half.y, arena.half.x)
    } else {
        arena.half
    };
    for _ in 0..MAX_START_TRIES {
        let u: f64 = rng.gen();
        let v: f64 = rng.gen();
        let p = Vec2::new((2.0 * u - 1.0) * h.x, (2.0 * v - 1.0) * h.y).rotate_quarter(quarter_turns);
        if arena.is_free(p) && arena.clearance(p) > cfg.reset_buffer {
            let phys = rng.gen_range(0.0..2.0 * PI);
            let virt = rng.gen_range(0.0..2.0 * PI);
            return Ok(UserState {
                phys_pos: p,
                phys_dir: Vec2::from_angle(phys).rotate_quarter(quarter_turns),
                virt_pos: Vec2::ZERO,
                virt_dir: Vec2::from_angle(virt).rotate_quarter(quarter_turns),
                virt_distance_walked: 0.0,
                resets: 0,
                turning: false,
            });
        }
    }
    Err(SimError::InfeasibleLayout {
        buffer: cfg.reset_buffer,
        tries: MAX_START_TRIES,
    })
}

pub fn run_episode(layout: &Layout, cfg: &SimConfig, seed: u64) -> Result<EpisodeResult, SimError> {
    run_episode_with(&Arena::from_layout(layout), cfg, seed, EpisodeOptions::default())
}

pub fn run_episode_with(
    arena: &Arena,
    cfg: &SimConfig,
    seed: u64,
    opts: EpisodeOptions,
) -> Result<EpisodeResult, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = random_start(arena, cfg, &mut rng, opts.quarter_turns)?;
    let mut targets = RandomTargets {
        rng: &mut rng,
        radius: cfg.target_radius_range,
        quarter_turns: opts.quarter_turns,
    };
    let (end, audit, trace) = simulate(arena, cfg, start, &mut targets, opts.record_trace);
    Ok(EpisodeResult {
        resets: end.resets,
        distance: end.virt_distance_walked,
        phys_trace: trace,
        seed,
        audit,
    })
}

/// Episode from a given start state along a fixed list of targets.
pub fn run_scripted_episode(
    layout: &Layout,
    cfg: &SimConfig,
    start: UserState,
    targets: Vec<Vec2>,
    record_trace: bool,
) -> EpisodeResult {
    let arena = Arena::from_layout(layout);
    let (end, audit, trace) = simulate(
        &arena,
        cfg,
        start,
        &mut ScriptedTargets::new(targets),
        record_trace,
    );
    EpisodeResult {
        resets: end.resets,
        distance: end.virt_distance_walked,
        phys_trace: trace,
        seed: 0,
        audit,
    }
}

/// Per-path seed: SplitMix64 finalizer applied to
/// `seed ^ ((index + 1) * 0x9E3779B97F4A7C15)`.
pub fn path_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetEstimate {
    pub per_path: Vec<u32>,
    pub mean: f64,
    /// Sample standard deviation (n - 1), 0 for a single path.
    pub std: f64,
}

impl ResetEstimate {
    pub fn from_counts(per_path: Vec<u32>) -> Self {
        let (mean, std) = mean_std(&per_path);
        Self {
            per_path,
            mean,
            std,
        }
    }
}

/// Sequential mean and sample standard deviation.
pub fn mean_std(values: &[u32]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mut sum = 0.0;
    for &v in values {
        sum += v as f64;
    }
    let mean = sum / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let mut ss = 0.0;
    for &v in values {
        let d = v as f64 - mean;
        ss += d * d;
    }
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Runs `paths` episodes in parallel, path `i` seeded with
/// `path_seed(seed, i)`; results are ordered by path index.
pub fn estimate_resets(
    layout: &Layout,
    cfg: &SimConfig,
    paths: usize,
    seed: u64,
) -> Result<ResetEstimate, SimError> {
    estimate_resets_with(&Arena::from_layout(layout), cfg, paths, seed, 0)
}

pub fn estimate_resets_with(
    arena: &Arena,
    cfg: &SimConfig,
    paths: usize,
    seed: u64,
    quarter_turns: u8,
) -> Result<ResetEstimate, SimError> {
    if paths == 0 {
        return Err(SimError::NoPaths);
    }
    cfg.validate()?;
    let opts = EpisodeOptions {
        record_trace: false,
        quarter_turns,
    };
    let per_path = (0..paths as u64)
        .into_par_iter()
        .map(|i| run_episode_with(arena, cfg, path_seed(seed, i), opts).map(|r| r.resets))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ResetEstimate::from_counts(per_path))
}

/// [`estimate_resets`] that gives up once `deadline` has passed. The clock
/// is checked before each path, so the overrun is at most one episode per
/// worker thread. A completed estimate equals the unbounded one.
pub fn estimate_resets_until(
    layout: &Layout,
    cfg: &SimConfig,
    paths: usize,
    seed: u64,
    deadline: Instant,
) -> Result<ResetEstimate, SimError> {
    if paths == 0 {
        return Err(SimError::NoPaths);
    }
    cfg.validate()?;
    let arena = Arena::from_layout(layout);
    let done = AtomicUsize::new(0);
    let per_path = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            if Instant::now() >= deadline {
                return Err(SimError::DeadlineExceeded {
                    completed: done.load(Ordering::Relaxed),
                    paths,
                });
            }
            let r = run_episode_with(&arena, cfg, path_seed(seed, i), EpisodeOptions::default())?;
            done.fetch_add(1, Ordering::Relaxed);
            Ok(r.resets)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ResetEstimate::from_counts(per_path))
}
