//! Drone sessions, the fixed-rate control tick and multi-drone coordination.
//!
//! One `Orchestrator` owns every session. Callers feed it tracking samples and
//! operator commands between ticks; `tick` turns the current world into one
//! RC command per drone. Nothing in here blocks or touches I/O.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{control_update, ControlConfig, ControlError, ControllerState, GainOverride, PresetTable};
use crate::geometry::{yaw_of, Pose, Vec3};
use crate::msp::{RcCommand, RC_MID, RC_MIN};
use crate::path::{realtime_target, AltitudeBand, FlightPath, PathError, PointerRay, Recorder};
use crate::safety::{active_zones, filter_target, ActiveZones, Geofence, SafetyConfig, Shape, Verdict, Zone, ZoneDef, ZoneSource};
use crate::tracking::{HealthState, HealthThresholds, ObjectId, ObjectKind, TrackSample, TrackedObject, TrackingStore};

pub type DroneId = u32;

/// A scripted run starts once the drone is this close to the first waypoint.
pub const START_TOLERANCE: f64 = 0.15;
/// Path time pauses while the drone trails its target by more than this,
/// unless the safety filter is what holds it back.
pub const MAX_LAG: f64 = 0.5;
/// Takeoff completes within this distance of the takeoff altitude.
pub const TAKEOFF_TOLERANCE: f64 = 0.05;
/// Landing completes below this altitude.
pub const LANDED_ALTITUDE: f64 = 0.05;
/// Lateral push when two drones are stacked vertically.
pub const STRATIFY_DROP: f64 = 0.2;
const STACKED_TOLERANCE: f64 = 0.01;
/// Angle stepped around a blocking sphere per detour target, radians.
const DETOUR_STEP: f64 = 0.4;
/// Detours engage within this distance of a blocking sphere's surface.
const DETOUR_ENGAGE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    /// Control period in seconds.
    pub control_period: f64,
    pub d_min: f64,
    pub k_rep: f64,
    pub takeoff_altitude: f64,
    pub landing_speed: f64,
    /// Seconds for the failsafe throttle ramp to reach the floor.
    pub failsafe_ramp: f64,
    pub thresholds: HealthThresholds,
    pub safety: SafetyConfig,
    pub fence: Geofence,
    pub altitude_band: AltitudeBand,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            control_period: 0.02,
            d_min: 0.5,
            k_rep: 2.0,
            takeoff_altitude: 1.0,
            landing_speed: 0.3,
            failsafe_ramp: 2.0,
            thresholds: HealthThresholds::default(),
            safety: SafetyConfig::default(),
            fence: Geofence::default(),
            altitude_band: AltitudeBand::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestratorError {
    #[error("unknown drone {0}")]
    UnknownDrone(DroneId),
    #[error("drone {0} already exists")]
    DuplicateDrone(DroneId),
    #[error("unknown recording {0:?}")]
    UnknownRecording(String),
    #[error("recording {0:?} already running")]
    DuplicateRecording(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Path(#[from] PathError),
}

/// Where a realtime session takes its pointing ray from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RaySource {
    /// The latest `pointer_update` from an operator.
    #[default]
    Pointer,
    /// A tracked hand controller pointing along its forward axis.
    Tracked { object_id: ObjectId, distance: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRun {
    pub path: FlightPath,
    pub t: f64,
    pub started: bool,
}

impl PathRun {
    fn new(path: FlightPath) -> Self {
        Self { path, t: 0.0, started: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    Idle,
    Takeoff { target: Vec3, yaw: f64 },
    Scripted(PathRun),
    Playback(PathRun),
    Realtime { source: RaySource, yaw: f64, last: Vec3 },
    Hover { point: Vec3, yaw: f64 },
    Landing { point: Vec3, yaw: f64 },
    Failsafe { since: f64, from_throttle: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Idle,
    Takeoff,
    Scripted,
    DemonstratedPlayback,
    Realtime,
    Hover,
    Landing,
    Failsafe,
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModeKind::Idle => "idle",
            ModeKind::Takeoff => "takeoff",
            ModeKind::Scripted => "scripted",
            ModeKind::DemonstratedPlayback => "demonstrated_playback",
            ModeKind::Realtime => "realtime",
            ModeKind::Hover => "hover",
            ModeKind::Landing => "landing",
            ModeKind::Failsafe => "failsafe",
        };
        f.write_str(s)
    }
}

impl Mode {
    pub fn kind(&self) -> ModeKind {
        match self {
            Mode::Idle => ModeKind::Idle,
            Mode::Takeoff { .. } => ModeKind::Takeoff,
            Mode::Scripted(_) => ModeKind::Scripted,
            Mode::Playback(_) => ModeKind::DemonstratedPlayback,
            Mode::Realtime { .. } => ModeKind::Realtime,
            Mode::Hover { .. } => ModeKind::Hover,
            Mode::Landing { .. } => ModeKind::Landing,
            Mode::Failsafe { .. } => ModeKind::Failsafe,
        }
    }

    /// Under closed-loop position control.
    pub fn is_flying(&self) -> bool {
        !matches!(self, Mode::Idle | Mode::Failsafe { .. })
    }

    fn path_run(&self) -> Option<&PathRun> {
        match self {
            Mode::Scripted(run) | Mode::Playback(run) => Some(run),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transition", rename_all = "snake_case")]
pub enum Command {
    Arm,
    Disarm,
    Takeoff,
    StartPath {
        path_id: String,
    },
    StartRealtime {
        #[serde(default)]
        source: RaySource,
    },
    Hover,
    Land,
    Reset,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Arm => "arm",
            Command::Disarm => "disarm",
            Command::Takeoff => "takeoff",
            Command::StartPath { .. } => "start_path",
            Command::StartRealtime { .. } => "start_realtime",
            Command::Hover => "hover",
            Command::Land => "land",
            Command::Reset => "reset",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("cannot {command} while {mode}: {reason}")]
pub struct TransitionError {
    pub mode: ModeKind,
    pub command: &'static str,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroneSession {
    pub drone_id: DroneId,
    pub tracked_object_id: ObjectId,
    /// Lower number wins.
    pub priority: i32,
    pub mode: Mode,
    pub armed: bool,
    pub control: ControlConfig,
    pub controller: ControllerState,
    pub last_rc: RcCommand,
    pub target: Option<Vec3>,
    pub verdict: Verdict,
    pub verdict_zone: Option<String>,
}

impl DroneSession {
    pub fn new(drone_id: DroneId, tracked_object_id: ObjectId, priority: i32, control: ControlConfig) -> Self {
        Self {
            drone_id,
            tracked_object_id,
            priority,
            mode: Mode::Idle,
            armed: false,
            control,
            controller: ControllerState::default(),
            last_rc: idle_command(false),
            target: None,
            verdict: Verdict::Unchanged,
            verdict_zone: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredPath {
    pub path: FlightPath,
    /// Came from a recording rather than an upload.
    pub demonstrated: bool,
}

/// What a transition may look at besides the session itself.
#[derive(Debug, Clone, Copy)]
pub struct TransitionContext<'a> {
    /// The drone's pose if its tracking is fresh.
    pub pose: Option<Pose>,
    pub paths: &'a BTreeMap<String, StoredPath>,
    pub takeoff_altitude: f64,
    /// A dynamic zone has lost tracking.
    pub degraded: bool,
}

/// Applies an operator command to a session.
///
/// Legal moves: arm and takeoff from idle (takeoff needs arming and fresh
/// tracking); path and realtime starts from any airborne mode; land from
/// anywhere; reset only from idle or failsafe, the latter after a disarm.
pub fn transition(session: &DroneSession, cmd: &Command, ctx: &TransitionContext) -> Result<DroneSession, TransitionError> {
    let kind = session.mode.kind();
    let err = |reason: &str| TransitionError { mode: kind, command: cmd.name(), reason: reason.to_string() };
    let here = ctx.pose.map(|p| (p.position, yaw_of(p.orientation).unwrap_or(0.0)));
    let hold = || here.or_else(|| session.target.map(|t| (t, mode_yaw(&session.mode))));
    let airborne = matches!(kind, ModeKind::Hover | ModeKind::Scripted | ModeKind::DemonstratedPlayback | ModeKind::Realtime);

    let mut next = session.clone();
    match cmd {
        Command::Arm => {
            if kind != ModeKind::Idle {
                return Err(err("arming is only possible on the ground"));
            }
            next.armed = true;
        }
        Command::Disarm => match kind {
            ModeKind::Idle | ModeKind::Failsafe => next.armed = false,
            _ => return Err(err("land first")),
        },
        Command::Takeoff => {
            if kind != ModeKind::Idle {
                return Err(err("already flying"));
            }
            if !session.armed {
                return Err(err("not armed"));
            }
            let Some((p, yaw)) = here else {
                return Err(err("tracking is not fresh"));
            };
            next.mode = Mode::Takeoff { target: Vec3::new(p.x, p.y, ctx.takeoff_altitude), yaw };
            next.controller = ControllerState::default();
        }
        Command::StartPath { path_id } => {
            if !airborne {
                return Err(err("take off first"));
            }
            if ctx.degraded {
                return Err(err("a dynamic zone has lost tracking"));
            }
            let stored = ctx.paths.get(path_id).ok_or_else(|| err(&format!("unknown path {path_id:?}")))?;
            let run = PathRun::new(stored.path.clone());
            next.mode = if stored.demonstrated { Mode::Playback(run) } else { Mode::Scripted(run) };
        }
        Command::StartRealtime { source } => {
            if !airborne {
                return Err(err("take off first"));
            }
            if ctx.degraded {
                return Err(err("a dynamic zone has lost tracking"));
            }
            if let RaySource::Tracked { distance, .. } = source {
                if !(distance.is_finite() && *distance > 0.0) {
                    return Err(err("ray distance must be positive"));
                }
            }
            let (p, yaw) = hold().ok_or_else(|| err("no position"))?;
            next.mode = Mode::Realtime { source: *source, yaw, last: p };
        }
        Command::Hover => {
            if !session.mode.is_flying() {
                return Err(err("not flying"));
            }
            let (point, yaw) = hold().ok_or_else(|| err("no position"))?;
            next.mode = Mode::Hover { point, yaw };
        }
        Command::Land => {
            // Accepted everywhere; on the ground and in failsafe there is nothing to change.
            if session.mode.is_flying() && kind != ModeKind::Landing {
                let (point, yaw) = hold().ok_or_else(|| err("no position"))?;
                next.mode = Mode::Landing { point, yaw };
            }
        }
        Command::Reset => match kind {
            ModeKind::Idle => {
                next.armed = false;
                next.controller = ControllerState::default();
            }
            ModeKind::Failsafe => {
                if session.armed {
                    return Err(err("disarm first"));
                }
                next.mode = Mode::Idle;
                next.controller = ControllerState::default();
                next.target = None;
            }
            _ => return Err(err("reset is only possible from idle or failsafe")),
        },
    }
    Ok(next)
}

fn mode_yaw(mode: &Mode) -> f64 {
    match mode {
        Mode::Takeoff { yaw, .. } | Mode::Realtime { yaw, .. } | Mode::Hover { yaw, .. } | Mode::Landing { yaw, .. } => *yaw,
        Mode::Scripted(run) | Mode::Playback(run) => run.path.sample(run.t).yaw,
        Mode::Idle | Mode::Failsafe { .. } => 0.0,
    }
}

/// Throttle floor, sticks centered.
pub fn idle_command(armed: bool) -> RcCommand {
    RcCommand::sticks(RC_MID, RC_MID, RC_MIN, RC_MID, armed)
}

/// Open-loop descent: throttle ramps linearly from `from_throttle` to the
/// floor over `ramp` seconds with attitude and yaw centered.
pub fn failsafe_command(from_throttle: u16, elapsed: f64, ramp: f64) -> RcCommand {
    let from = from_throttle.max(RC_MIN) as f64;
    let frac = if ramp > 0.0 { (elapsed / ramp).clamp(0.0, 1.0) } else { 1.0 };
    let throttle = (from - (from - RC_MIN as f64) * frac).round() as u16;
    RcCommand::sticks(RC_MID, RC_MID, throttle.max(RC_MIN), RC_MID, true)
}

/// Pushes lower-priority targets away from higher-priority drones.
///
/// `positions` and `targets` are in priority order, highest first. For every
/// pair closer than `d_min` the lower one's target moves `k_rep·(d_min − d)·dt`
/// horizontally away from the other; a vertically stacked pair drops the lower
/// one's target by [`STRATIFY_DROP`] instead.
pub fn resolve_separation(positions: &[Option<Vec3>], targets: &[Option<Vec3>], d_min: f64, k_rep: f64, dt: f64) -> Vec<Option<Vec3>> {
    let mut out = targets.to_vec();
    for j in 0..positions.len() {
        let (Some(pj), Some(target)) = (positions[j], out[j].as_mut()) else { continue };
        for pi in positions[..j].iter().flatten() {
            let d = pj.distance(*pi);
            if d >= d_min {
                continue;
            }
            let away = (pj - *pi).horizontal();
            if away.norm() < STACKED_TOLERANCE {
                target.z -= STRATIFY_DROP;
            } else {
                *target += away / away.norm() * (k_rep * (d_min - d) * dt);
            }
        }
    }
    out
}

/// Next intermediate target when a sphere blocks the straight line to `goal`:
/// a point on a ring just outside the sphere, stepped from the drone's bearing
/// toward the goal's side. Head-on conflicts pass on the right.
fn detour(center: Vec3, radius: f64, current: Vec3, goal: Vec3, clearance: f64) -> Vec3 {
    let radial = (current - center).normalized().unwrap_or(Vec3::X);
    let want = goal - current;
    let mut tangent = want - radial * want.dot(radial);
    if tangent.norm() < 1e-3 {
        tangent = want.cross(Vec3::Z);
    }
    let tangent = tangent.normalized().unwrap_or(Vec3::Y);
    center + (radial * DETOUR_STEP.cos() + tangent * DETOUR_STEP.sin()) * (radius + clearance)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    ModeChanged { drone_id: DroneId, from: ModeKind, to: ModeKind, reason: String },
    Verdict { drone_id: DroneId, verdict: Verdict, zone: Option<String> },
    Failsafe { drone_id: DroneId, reason: String },
    SafetyDegraded { zones: Vec<String> },
    PathComplete { drone_id: DroneId, path_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TickOutput {
    /// One command per drone, in priority order.
    pub commands: Vec<(DroneId, RcCommand)>,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionSummary {
    pub drone_id: DroneId,
    pub tracked_object_id: ObjectId,
    pub priority: i32,
    pub mode: ModeKind,
    pub armed: bool,
    pub position: Option<Vec3>,
    pub target: Option<Vec3>,
    pub health: Option<HealthState>,
    pub verdict: Verdict,
    pub zone: Option<String>,
    pub path_id: Option<String>,
    pub path_t: Option<f64>,
    pub throttle: u16,
}

/// Everything the loop knew at one tick.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorldSnapshot {
    pub timestamp: f64,
    pub tick: u64,
    pub objects: Vec<TrackedObject>,
    pub zones: Vec<Zone>,
    pub degraded: Vec<String>,
    pub sessions: Vec<SessionSummary>,
}

/// A drone as declared in configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroneSpec {
    pub drone_id: DroneId,
    pub tracked_object_id: ObjectId,
    #[serde(default)]
    pub priority: i32,
    #[serde(default)]
    pub preset: Option<String>,
}

#[derive(Debug, Clone)]
struct Recording {
    recorder: Recorder,
    source: Option<ObjectId>,
}

pub struct Orchestrator {
    cfg: OrchestratorConfig,
    presets: PresetTable,
    default_preset: String,
    /// Kept sorted by (priority, drone id).
    sessions: Vec<DroneSession>,
    tracking: TrackingStore,
    zone_defs: Vec<ZoneDef>,
    paths: BTreeMap<String, StoredPath>,
    recordings: BTreeMap<String, Recording>,
    pointer: Option<PointerRay>,
    zones: ActiveZones,
    now: f64,
    ticks: u64,
}

impl Orchestrator {
    pub fn new(cfg: OrchestratorConfig, presets: PresetTable, default_preset: &str) -> Result<Self, OrchestratorError> {
        if !(cfg.control_period > 0.0 && cfg.d_min > 0.0 && cfg.k_rep >= 0.0 && cfg.landing_speed > 0.0) {
            return Err(OrchestratorError::InvalidConfig("control_period, d_min and landing_speed must be positive".into()));
        }
        presets.get(default_preset)?;
        Ok(Self {
            cfg,
            presets,
            default_preset: default_preset.to_string(),
            sessions: Vec::new(),
            tracking: TrackingStore::default(),
            zone_defs: Vec::new(),
            paths: BTreeMap::new(),
            recordings: BTreeMap::new(),
            pointer: None,
            zones: ActiveZones::default(),
            now: 0.0,
            ticks: 0,
        })
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.cfg
    }

    pub fn add_drone(&mut self, spec: &DroneSpec) -> Result<(), OrchestratorError> {
        if self.sessions.iter().any(|s| s.drone_id == spec.drone_id) {
            return Err(OrchestratorError::DuplicateDrone(spec.drone_id));
        }
        let control = self.presets.get(spec.preset.as_deref().unwrap_or(&self.default_preset))?;
        self.tracking.register(spec.tracked_object_id, ObjectKind::Drone);
        self.sessions.push(DroneSession::new(spec.drone_id, spec.tracked_object_id, spec.priority, control));
        self.sessions.sort_by_key(|s| (s.priority, s.drone_id));
        Ok(())
    }

    pub fn register_object(&mut self, id: ObjectId, kind: ObjectKind) {
        self.tracking.register(id, kind);
    }

    pub fn ingest(&mut self, sample: &TrackSample) {
        self.tracking.ingest(sample.id, sample.pose, sample.received);
    }

    pub fn tracking(&self) -> &TrackingStore {
        &self.tracking
    }

    pub fn set_zones(&mut self, defs: Vec<ZoneDef>) {
        self.zone_defs = defs;
    }

    pub fn zone_defs(&self) -> &[ZoneDef] {
        &self.zone_defs
    }

    /// Stores or replaces a path under its id.
    pub fn upload_path(&mut self, path: FlightPath, demonstrated: bool) {
        self.paths.insert(path.id().to_string(), StoredPath { path, demonstrated });
    }

    pub fn path(&self, id: &str) -> Option<&StoredPath> {
        self.paths.get(id)
    }

    /// Latest ray wins.
    pub fn set_pointer(&mut self, ray: PointerRay) {
        self.pointer = Some(ray);
    }

    pub fn set_gains(&mut self, drone_id: DroneId, gains: &GainOverride) -> Result<(), OrchestratorError> {
        let idx = self.index(drone_id)?;
        let cfg = gains.apply(&self.sessions[idx].control, &self.presets)?;
        self.sessions[idx].control = cfg;
        Ok(())
    }

    pub fn sessions(&self) -> &[DroneSession] {
        &self.sessions
    }

    pub fn session(&self, drone_id: DroneId) -> Option<&DroneSession> {
        self.sessions.iter().find(|s| s.drone_id == drone_id)
    }

    fn index(&self, drone_id: DroneId) -> Result<usize, OrchestratorError> {
        self.sessions.iter().position(|s| s.drone_id == drone_id).ok_or(OrchestratorError::UnknownDrone(drone_id))
    }

    fn fresh_pose(&self, object: ObjectId) -> Option<Pose> {
        let obj = self.tracking.get(object)?;
        (obj.health(self.now, self.cfg.thresholds).state == HealthState::Fresh).then_some(obj.smoothed)
    }

    /// Applies an operator command; returns the mode-change event, if any.
    pub fn command(&mut self, drone_id: DroneId, cmd: &Command) -> Result<Vec<Event>, OrchestratorError> {
        let idx = self.index(drone_id)?;
        let ctx = TransitionContext {
            pose: self.fresh_pose(self.sessions[idx].tracked_object_id),
            paths: &self.paths,
            takeoff_altitude: self.cfg.takeoff_altitude,
            degraded: !self.zones.degraded.is_empty(),
        };
        let next = transition(&self.sessions[idx], cmd, &ctx)?;
        let (from, to) = (self.sessions[idx].mode.kind(), next.mode.kind());
        self.sessions[idx] = next;
        let mut events = Vec::new();
        if from != to {
            events.push(Event { t: self.now, kind: EventKind::ModeChanged { drone_id, from, to, reason: cmd.name().to_string() } });
        }
        Ok(events)
    }

    /// Puts an idle session straight into an armed hover, for simulations
    /// that begin with the drone already in the air.
    pub fn assume_hover(&mut self, drone_id: DroneId, point: Vec3, yaw: f64) -> Result<(), OrchestratorError> {
        let idx = self.index(drone_id)?;
        let s = &mut self.sessions[idx];
        if s.mode != Mode::Idle {
            return Err(TransitionError { mode: s.mode.kind(), command: "assume_hover", reason: "only from idle".into() }.into());
        }
        s.armed = true;
        s.mode = Mode::Hover { point, yaw };
        s.target = Some(point);
        Ok(())
    }

    /// Starts a demonstration recording, optionally sampling a tracked object each tick.
    pub fn record_start(&mut self, id: &str, source: Option<ObjectId>) -> Result<(), OrchestratorError> {
        if self.recordings.contains_key(id) {
            return Err(OrchestratorError::DuplicateRecording(id.to_string()));
        }
        self.recordings.insert(id.to_string(), Recording { recorder: Recorder::new(), source });
        Ok(())
    }

    pub fn record_pose(&mut self, id: &str, pose: &Pose) -> Result<bool, OrchestratorError> {
        let rec = self.recordings.get_mut(id).ok_or_else(|| OrchestratorError::UnknownRecording(id.to_string()))?;
        Ok(rec.recorder.record(pose))
    }

    /// Simplifies the recording into a demonstrated path and stores it.
    pub fn record_finish(&mut self, id: &str, path_id: &str, epsilon: f64, speed: f64) -> Result<FlightPath, OrchestratorError> {
        let rec = self.recordings.remove(id).ok_or_else(|| OrchestratorError::UnknownRecording(id.to_string()))?;
        let path = rec.recorder.finish(path_id, epsilon, speed)?;
        self.upload_path(path.clone(), true);
        Ok(path)
    }

    /// One control period. `dt` is held within 20% of the configured period.
    pub fn tick(&mut self, now: f64, dt: f64) -> TickOutput {
        let period = self.cfg.control_period;
        let dt = dt.clamp(0.8 * period, 1.2 * period);
        self.now = now;
        self.ticks += 1;
        let mut events = Vec::new();
        let cfg = self.cfg;

        let zones = active_zones(&self.zone_defs, &self.tracking, now, cfg.thresholds, &cfg.safety);
        if zones.degraded != self.zones.degraded {
            events.push(Event { t: now, kind: EventKind::SafetyDegraded { zones: zones.degraded.clone() } });
        }
        self.zones = zones;
        let degraded = !self.zones.degraded.is_empty();

        for rec in self.recordings.values_mut() {
            if let Some(obj) = rec.source.and_then(|id| self.tracking.get(id)) {
                rec.recorder.record(&obj.smoothed);
            }
        }

        let observed: Vec<Option<(Pose, Vec3)>> = self
            .sessions
            .iter()
            .map(|s| {
                let obj = self.tracking.get(s.tracked_object_id)?;
                (obj.health(now, cfg.thresholds).state != HealthState::Lost).then_some((obj.smoothed, obj.velocity))
            })
            .collect();

        let n = self.sessions.len();
        let mut goals: Vec<Option<(Vec3, f64)>> = vec![None; n];
        for i in 0..n {
            let obstacles = (0..i).filter_map(|j| {
                let (pose, vel) = observed[j]?;
                Some(Zone {
                    id: format!("drone-{}", self.sessions[j].drone_id),
                    shape: Shape::Sphere { center: pose.position, radius: cfg.d_min + vel.norm() * cfg.safety.motion_lead },
                    source: ZoneSource::Drone { drone_id: self.sessions[j].drone_id },
                    margin: 0.0,
                })
            });
            let all: Vec<Zone> = self.zones.zones.iter().cloned().chain(obstacles).collect();
            let ray = self.pointer;
            let s = &mut self.sessions[i];

            if observed[i].is_none() && s.mode.is_flying() {
                let from_throttle = s.last_rc.throttle();
                events.push(Event { t: now, kind: EventKind::Failsafe { drone_id: s.drone_id, reason: "drone tracking lost".into() } });
                set_mode(s, Mode::Failsafe { since: now, from_throttle }, now, "drone tracking lost", &mut events);
            }
            let Some((pose, _)) = observed[i] else { continue };
            if degraded && matches!(s.mode, Mode::Scripted(_) | Mode::Playback(_) | Mode::Realtime { .. }) {
                let yaw = yaw_of(pose.orientation).unwrap_or(0.0);
                set_mode(s, Mode::Hover { point: pose.position, yaw }, now, "dynamic zone tracking lost", &mut events);
            }

            let Some((goal, yaw)) = mode_goal(s, &pose, ray, &self.tracking, &cfg, now, dt, &mut events) else { continue };

            let mut f = filter_target(goal, pose.position, &all, &cfg.fence, &cfg.safety);
            if let (Verdict::Clamped, Some(zi)) = (f.verdict, f.zone) {
                let blocking = all[zi].inflated();
                let holding = cfg.safety.hold_instead && matches!(all[zi].source, ZoneSource::Dynamic { .. });
                if let Shape::Sphere { center, radius } = blocking {
                    if !holding && !blocking.contains_strict(goal) && pose.position.distance(center) < radius + DETOUR_ENGAGE {
                        let via = detour(center, radius, pose.position, goal, 2.0 * cfg.safety.standoff);
                        f.target = filter_target(via, pose.position, &all, &cfg.fence, &cfg.safety).target;
                    }
                }
            }
            let zone = f.zone.map(|z| all[z].id.clone());
            if f.verdict != s.verdict || zone != s.verdict_zone {
                events.push(Event { t: now, kind: EventKind::Verdict { drone_id: s.drone_id, verdict: f.verdict, zone: zone.clone() } });
                s.verdict = f.verdict;
                s.verdict_zone = zone;
            }
            goals[i] = Some((f.target, yaw));
        }

        let positions: Vec<Option<Vec3>> = observed.iter().map(|o| o.map(|(p, _)| p.position)).collect();
        let targets: Vec<Option<Vec3>> = goals.iter().map(|g| g.map(|(t, _)| t)).collect();
        let separated = resolve_separation(&positions, &targets, cfg.d_min, cfg.k_rep, dt);

        let mut commands = Vec::with_capacity(n);
        for (i, s) in self.sessions.iter_mut().enumerate() {
            let rc = match (&s.mode, goals[i], separated[i], observed[i]) {
                (Mode::Failsafe { since, from_throttle }, ..) => failsafe_command(*from_throttle, now - since, cfg.failsafe_ramp),
                (_, Some((_, yaw)), Some(target), Some((pose, vel))) => {
                    let target = cfg.fence.clamp(target);
                    match control_update(&s.control, &s.controller, &pose, vel, target, yaw, dt) {
                        Ok((out, state)) => {
                            s.controller = state;
                            s.target = Some(target);
                            out.rc
                        }
                        Err(e) => {
                            let from_throttle = s.last_rc.throttle();
                            let reason = format!("controller fault: {e}");
                            events.push(Event { t: now, kind: EventKind::Failsafe { drone_id: s.drone_id, reason: reason.clone() } });
                            set_mode(s, Mode::Failsafe { since: now, from_throttle }, now, &reason, &mut events);
                            failsafe_command(from_throttle, 0.0, cfg.failsafe_ramp)
                        }
                    }
                }
                _ => {
                    s.controller = ControllerState::default();
                    idle_command(s.armed)
                }
            };
            s.last_rc = rc;
            commands.push((s.drone_id, rc));
        }
        TickOutput { commands, events }
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        let sessions = self
            .sessions
            .iter()
            .map(|s| {
                let obj = self.tracking.get(s.tracked_object_id);
                let run = s.mode.path_run();
                SessionSummary {
                    drone_id: s.drone_id,
                    tracked_object_id: s.tracked_object_id,
                    priority: s.priority,
                    mode: s.mode.kind(),
                    armed: s.armed,
                    position: obj.map(|o| o.smoothed.position),
                    target: s.target,
                    health: obj.map(|o| o.health(self.now, self.cfg.thresholds).state),
                    verdict: s.verdict,
                    zone: s.verdict_zone.clone(),
                    path_id: run.map(|r| r.path.id().to_string()),
                    path_t: run.map(|r| r.t),
                    throttle: s.last_rc.throttle(),
                }
            })
            .collect();
        WorldSnapshot {
            timestamp: self.now,
            tick: self.ticks,
            objects: self.tracking.objects().cloned().collect(),
            zones: self.zones.zones.clone(),
            degraded: self.zones.degraded.clone(),
            sessions,
        }
    }
}

fn set_mode(s: &mut DroneSession, mode: Mode, now: f64, reason: &str, events: &mut Vec<Event>) {
    let (from, to) = (s.mode.kind(), mode.kind());
    s.mode = mode;
    if from != to {
        events.push(Event { t: now, kind: EventKind::ModeChanged { drone_id: s.drone_id, from, to, reason: reason.to_string() } });
    }
}

/// The unfiltered target for this tick; advances path time and finishes
/// takeoff, paths and landings.
#[allow(clippy::too_many_arguments)]
fn mode_goal(
    s: &mut DroneSession,
    pose: &Pose,
    pointer: Option<PointerRay>,
    tracking: &TrackingStore,
    cfg: &OrchestratorConfig,
    now: f64,
    dt: f64,
    events: &mut Vec<Event>,
) -> Option<(Vec3, f64)> {
    let here = pose.position;
    let blocked = s.verdict != Verdict::Unchanged;
    match &mut s.mode {
        Mode::Idle | Mode::Failsafe { .. } => None,
        Mode::Takeoff { target, yaw } => {
            let goal = (*target, *yaw);
            if (here.z - target.z).abs() < TAKEOFF_TOLERANCE {
                set_mode(s, Mode::Hover { point: goal.0, yaw: goal.1 }, now, "takeoff altitude reached", events);
            }
            Some(goal)
        }
        Mode::Scripted(run) | Mode::Playback(run) => {
            if !run.started && here.distance(run.path.sample(0.0).position) < START_TOLERANCE {
                run.started = true;
            }
            let sample = run.path.sample(run.t);
            // A drone held back by a zone lets the path run on, so the target can clear the zone.
            if run.started && (blocked || here.distance(sample.position) < MAX_LAG) {
                run.t += dt;
            }
            if sample.done {
                let path_id = run.path.id().to_string();
                events.push(Event { t: now, kind: EventKind::PathComplete { drone_id: s.drone_id, path_id } });
                set_mode(s, Mode::Hover { point: sample.position, yaw: sample.yaw }, now, "path complete", events);
            }
            Some((sample.position, sample.yaw))
        }
        Mode::Realtime { source, yaw, last } => {
            let ray = match *source {
                RaySource::Pointer => pointer,
                RaySource::Tracked { object_id, distance } => tracking
                    .get(object_id)
                    .filter(|o| o.health(now, cfg.thresholds).state == HealthState::Fresh)
                    .and_then(|o| PointerRay::new(o.smoothed.position, o.smoothed.forward(), distance).ok()),
            };
            if let Some(ray) = ray {
                *last = realtime_target(&ray, cfg.altitude_band);
            }
            Some((*last, *yaw))
        }
        Mode::Hover { point, yaw } => Some((*point, *yaw)),
        Mode::Landing { point, yaw } => {
            if here.z < LANDED_ALTITUDE {
                s.armed = false;
                s.target = None;
                set_mode(s, Mode::Idle, now, "landed", events);
                return None;
            }
            point.z = (point.z - cfg.landing_speed * dt).max(0.0);
            Some((*point, *yaw))
        }
    }
}
