//! Headless closed-loop runs: orchestrator and simulator stepped in lockstep,
//! exchanging MSP bytes and tracker datagrams exactly as over the wire.
//!
//! Physics runs at 200 Hz, the tracker at 100 Hz and control at 50 Hz, all
//! counted off one integer step counter so a seed fully determines a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::control::PresetTable;
use crate::geometry::Vec3;
use crate::msp::encode_set_raw_rc;
use crate::orchestrator::{
    Command, DroneId, DroneSpec, Event, EventKind, ModeKind, Orchestrator, OrchestratorConfig, OrchestratorError,
};
use crate::path::simplify::point_segment_distance;
use crate::path::{path_from_value, FlightPath, PathError, PointerRay};
use crate::safety::{Shape, ZoneDef, ZoneDefKind};
use crate::sim::{Motion, NoiseConfig, SimDrone, SimError, SimParams, SimWorld, LOG_HEADER, PHYSICS_DT};
use crate::tracking::{format_datagram, parse_datagram, ObjectId, ObjectKind, TrackSample};

/// Physics steps per control tick (50 Hz).
pub const CONTROL_DECIMATION: u64 = 4;
/// Transient zone penetration tolerated before a sample counts as a violation.
pub const ZONE_TOLERANCE: f64 = 0.02;
/// Pairwise distance below this fraction of `d_min` counts as a violation.
pub const SEPARATION_FRACTION: f64 = 0.9;
/// A finished path counts as completed when the drone ends this close to its last waypoint.
pub const ARRIVAL_TOLERANCE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario: {0}")]
    Format(String),
    #[error("path {index}: {source}")]
    Path { index: usize, source: PathError },
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn default_true() -> bool {
    true
}

fn default_preset() -> String {
    "default".into()
}

fn default_path_start() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDrone {
    pub drone_id: DroneId,
    /// Defaults to `drone_id`.
    #[serde(default)]
    pub tracked_object_id: Option<ObjectId>,
    #[serde(default)]
    pub priority: i32,
    #[serde(default)]
    pub preset: Option<String>,
    pub start: Vec3,
    /// Degrees.
    #[serde(default)]
    pub yaw: f64,
    /// Start hovering at `start` instead of idle on the ground.
    #[serde(default = "default_true")]
    pub airborne: bool,
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default = "default_path_start")]
    pub path_start: f64,
}

impl ScenarioDrone {
    pub fn object_id(&self) -> ObjectId {
        self.tracked_object_id.unwrap_or(self.drone_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioObject {
    pub object_id: ObjectId,
    pub kind: ObjectKind,
    pub motion: Motion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Command { drone_id: DroneId, command: Command },
    Noise { sigma: f64, dropout: f64 },
    Pointer { origin: Vec3, forward: Vec3, distance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedAction {
    pub at: f64,
    #[serde(flatten)]
    pub action: Action,
}

/// A path given inline or as a file name relative to the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PathRef {
    File(String),
    Inline(Value),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub duration: f64,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub sim: SimParams,
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default, flatten)]
    pub orchestrator: OrchestratorConfig,
    #[serde(default)]
    pub zones: Vec<ZoneDef>,
    #[serde(default)]
    pub paths: Vec<PathRef>,
    pub drones: Vec<ScenarioDrone>,
    #[serde(default)]
    pub objects: Vec<ScenarioObject>,
    #[serde(default)]
    pub events: Vec<TimedAction>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Format(e.to_string()))
    }

    /// Reads a scenario and inlines path files named relative to it.
    pub fn load(file: &Path) -> Result<Scenario, ScenarioError> {
        let mut s = Scenario::from_json(&std::fs::read_to_string(file)?)?;
        let dir = file.parent().unwrap_or(Path::new("."));
        for p in &mut s.paths {
            if let PathRef::File(name) = p {
                let text = std::fs::read_to_string(dir.join(&*name))?;
                *p = PathRef::Inline(serde_json::from_str(&text).map_err(|e| ScenarioError::Format(format!("{name}: {e}")))?);
            }
        }
        Ok(s)
    }

    pub fn parsed_paths(&self) -> Result<Vec<FlightPath>, ScenarioError> {
        self.paths
            .iter()
            .enumerate()
            .map(|(index, p)| match p {
                PathRef::Inline(v) => path_from_value(v).map_err(|source| ScenarioError::Path { index, source }),
                PathRef::File(name) => Err(ScenarioError::Format(format!("path file {name:?} not loaded"))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroneReport {
    pub drone_id: DroneId,
    pub path_id: Option<String>,
    pub path_done: bool,
    pub completed: bool,
    pub final_mode: ModeKind,
    pub final_position: Vec3,
    /// Largest distance from the path polyline while flying it.
    pub max_cross_track: Option<f64>,
    pub failsafe_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub duration: f64,
    pub seed: u64,
    /// Brute-force minimum over every physics step.
    pub min_pairwise_distance: Option<f64>,
    /// Minimum signed distance to any inflated zone surface at 50 Hz.
    pub min_zone_clearance: Option<f64>,
    /// Minimum distance from any drone to any scripted object.
    pub min_object_distance: Option<f64>,
    pub violations: u64,
    pub drones: Vec<DroneReport>,
    pub rejected_frames: u64,
}

impl RunReport {
    /// No safety violation and every assigned path completed.
    pub fn success(&self) -> bool {
        self.violations == 0 && self.drones.iter().all(|d| d.path_id.is_none() || d.completed)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub trajectory_csv: String,
    pub rc_log: String,
    pub events: Vec<Event>,
}

struct Track {
    drone_id: DroneId,
    sim_index: usize,
    path: Option<FlightPath>,
    cross_track: Option<f64>,
    path_done: bool,
    failsafe_at: Option<f64>,
}

fn min_opt(a: Option<f64>, b: f64) -> Option<f64> {
    Some(a.map_or(b, |a| a.min(b)))
}

fn polyline_distance(poly: &[Vec3], p: Vec3) -> f64 {
    match poly {
        [] => f64::INFINITY,
        [only] => only.distance(p),
        _ => poly.windows(2).map(|w| point_segment_distance(p, w[0], w[1])).fold(f64::INFINITY, f64::min),
    }
}

/// A scenario wired up and ready to step.
pub struct Harness {
    scenario: Scenario,
    sim: SimWorld,
    orch: Orchestrator,
    tracks: Vec<Track>,
    pending: Vec<TimedAction>,
    trajectory: String,
    rc_log: String,
    events: Vec<Event>,
    min_pair: Option<f64>,
    min_clearance: Option<f64>,
    min_object: Option<f64>,
    violations: u64,
}

impl Harness {
    pub fn new(scenario: &Scenario) -> Result<Harness, ScenarioError> {
        Self::with_presets(scenario, PresetTable::builtin())
    }

    pub fn with_presets(scenario: &Scenario, presets: PresetTable) -> Result<Harness, ScenarioError> {
        let mut orch = Orchestrator::new(scenario.orchestrator, presets, &scenario.preset)?;
        let mut sim = SimWorld::new(scenario.seed, scenario.noise)?;
        for def in &scenario.zones {
            def.validate().map_err(|e| ScenarioError::Format(e.to_string()))?;
        }
        orch.set_zones(scenario.zones.clone());
        let paths: BTreeMap<String, FlightPath> =
            scenario.parsed_paths()?.into_iter().map(|p| (p.id().to_string(), p)).collect();
        for p in paths.values() {
            orch.upload_path(p.clone(), false);
        }
        for o in &scenario.objects {
            orch.register_object(o.object_id, o.kind);
            sim.add_object(o.object_id, o.motion);
        }

        let mut pending = scenario.events.clone();
        let mut tracks = Vec::new();
        for d in &scenario.drones {
            let spec = DroneSpec { drone_id: d.drone_id, tracked_object_id: d.object_id(), priority: d.priority, preset: d.preset.clone() };
            orch.add_drone(&spec)?;
            let yaw = d.yaw.to_radians();
            let mut body = SimDrone::at_rest(d.start, yaw, scenario.sim);
            if d.airborne {
                orch.assume_hover(d.drone_id, d.start, yaw)?;
            } else {
                body.position.z = 0.0;
                body.last_rc = crate::orchestrator::idle_command(false);
            }
            let sim_index = sim.add_drone(d.drone_id, d.object_id(), body)?;
            let path = match &d.path {
                Some(id) => {
                    let p = paths.get(id).ok_or_else(|| ScenarioError::Format(format!("drone {}: unknown path {id:?}", d.drone_id)))?;
                    pending.push(TimedAction {
                        at: d.path_start,
                        action: Action::Command { drone_id: d.drone_id, command: Command::StartPath { path_id: id.clone() } },
                    });
                    Some(p.clone())
                }
                None => None,
            };
            tracks.push(Track { drone_id: d.drone_id, sim_index, path, cross_track: None, path_done: false, failsafe_at: None });
        }
        // Stable: equal times keep file order.
        pending.sort_by(|a, b| a.at.total_cmp(&b.at));
        pending.reverse();

        Ok(Harness {
            scenario: scenario.clone(),
            sim,
            orch,
            tracks,
            pending,
            trajectory: String::from(LOG_HEADER),
            rc_log: String::new(),
            events: Vec::new(),
            min_pair: None,
            min_clearance: None,
            min_object: None,
            violations: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.sim.time()
    }

    pub fn sim(&self) -> &SimWorld {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut SimWorld {
        &mut self.sim
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orch
    }

    pub fn orchestrator_mut(&mut self) -> &mut Orchestrator {
        &mut self.orch
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// True position of a drone.
    pub fn position(&self, drone_id: DroneId) -> Option<Vec3> {
        let t = self.tracks.iter().find(|t| t.drone_id == drone_id)?;
        self.sim.drone(t.sim_index).map(|d| d.position)
    }

    fn apply(&mut self, action: &Action) {
        let t = self.time();
        match action {
            Action::Command { drone_id, command } => match self.orch.command(*drone_id, command) {
                Ok(events) => self.events.extend(events),
                Err(e) => log::warn!("t={t:.3}: {e}"),
            },
            Action::Noise { sigma, dropout } => {
                if let Err(e) = self.sim.set_noise(NoiseConfig { sigma: *sigma, dropout: *dropout }) {
                    log::warn!("t={t:.3}: {e}");
                }
            }
            Action::Pointer { origin, forward, distance } => match PointerRay::new(*origin, *forward, *distance) {
                Ok(ray) => self.orch.set_pointer(ray),
                Err(e) => log::warn!("t={t:.3}: {e}"),
            },
        }
    }

    /// Advances one physics step, running the tracker and controller when due.
    /// Returns the commands sent if a control tick ran.
    pub fn step(&mut self) -> Option<Vec<(DroneId, crate::msp::RcCommand)>> {
        let t = self.time();
        while self.pending.last().is_some_and(|a| a.at <= t + 1e-9) {
            let a = self.pending.pop().expect("checked");
            self.apply(&a.action);
        }
        if self.sim.tracker_due() {
            for (id, pose) in self.sim.observe() {
                // Through the text format, as a real tracker would send it.
                let line = format_datagram(id, &pose);
                if let Ok((id, pose)) = parse_datagram(&line) {
                    self.orch.ingest(&TrackSample { id, pose, received: t });
                }
            }
        }
        let mut sent = None;
        if self.sim.steps() % CONTROL_DECIMATION == 0 {
            let out = self.orch.tick(t, PHYSICS_DT * CONTROL_DECIMATION as f64);
            for (drone_id, rc) in &out.commands {
                let Some(track) = self.tracks.iter().find(|k| k.drone_id == *drone_id) else { continue };
                let bytes = encode_set_raw_rc(rc);
                let _ = write!(self.rc_log, "{t:.3} {drone_id} ");
                for b in &bytes {
                    let _ = write!(self.rc_log, "{b:02x}");
                }
                self.rc_log.push('\n');
                self.sim.feed_msp(track.sim_index, &bytes).expect("index is valid");
            }
            for e in &out.events {
                match &e.kind {
                    EventKind::Failsafe { drone_id, .. } => {
                        if let Some(k) = self.tracks.iter_mut().find(|k| k.drone_id == *drone_id) {
                            k.failsafe_at.get_or_insert(e.t);
                        }
                    }
                    EventKind::PathComplete { drone_id, .. } => {
                        if let Some(k) = self.tracks.iter_mut().find(|k| k.drone_id == *drone_id) {
                            k.path_done = true;
                        }
                    }
                    _ => {}
                }
            }
            self.events.extend(out.events.iter().cloned());
            self.check_zones();
            self.check_cross_track();
            sent = Some(out.commands);
        }
        self.sim.step();
        self.sim.log_rows(&mut self.trajectory);
        self.check_separation();
        sent
    }

    pub fn run_until(&mut self, t_end: f64) {
        while self.time() < t_end - 1e-9 {
            self.step();
        }
    }

    fn drone_positions(&self) -> Vec<Vec3> {
        self.tracks.iter().filter_map(|k| self.sim.drone(k.sim_index)).map(|d| d.position).collect()
    }

    fn check_separation(&mut self) {
        let ps = self.drone_positions();
        let d_min = self.scenario.orchestrator.d_min;
        for i in 0..ps.len() {
            for j in i + 1..ps.len() {
                let d = ps[i].distance(ps[j]);
                self.min_pair = min_opt(self.min_pair, d);
                if d < SEPARATION_FRACTION * d_min {
                    self.violations += 1;
                }
            }
        }
    }

    fn check_zones(&mut self) {
        let objects: BTreeMap<ObjectId, Vec3> = self.sim.object_positions().into_iter().collect();
        let fence = self.scenario.orchestrator.fence;
        for p in self.drone_positions() {
            // Drones on the ground are parked, not flying through anything.
            if p.z <= 0.0 {
                continue;
            }
            if !fence.inset(-ZONE_TOLERANCE).contains(p) {
                self.violations += 1;
            }
            for def in &self.scenario.zones {
                let shape = match &def.kind {
                    ZoneDefKind::Static { shape } => *shape,
                    ZoneDefKind::Dynamic { tracked_object_id, radius } => match objects.get(tracked_object_id) {
                        Some(&center) => Shape::Sphere { center, radius: *radius },
                        None => continue,
                    },
                };
                let clearance = shape.inflate(def.margin).signed_distance(p);
                self.min_clearance = min_opt(self.min_clearance, clearance);
                if clearance < -ZONE_TOLERANCE {
                    self.violations += 1;
                }
            }
            for &o in objects.values() {
                self.min_object = min_opt(self.min_object, o.distance(p));
            }
        }
    }

    fn check_cross_track(&mut self) {
        for k in &mut self.tracks {
            let Some(path) = &k.path else { continue };
            let Some(s) = self.orch.session(k.drone_id) else { continue };
            let flying_it = match &s.mode {
                crate::orchestrator::Mode::Scripted(run) | crate::orchestrator::Mode::Playback(run) => run.started && run.path.id() == path.id(),
                _ => false,
            };
            if flying_it {
                let p = self.sim.drone(k.sim_index).expect("index is valid").position;
                let d = polyline_distance(&path.polyline(), p);
                k.cross_track = Some(k.cross_track.map_or(d, |x| x.max(d)));
            }
        }
    }

    pub fn report(&self) -> RunReport {
        let drones = self
            .tracks
            .iter()
            .map(|k| {
                let s = self.orch.session(k.drone_id).expect("session exists");
                let final_position = self.sim.drone(k.sim_index).expect("index is valid").position;
                let last = k.path.as_ref().and_then(|p| p.waypoints().last()).map(|w| w.position);
                DroneReport {
                    drone_id: k.drone_id,
                    path_id: k.path.as_ref().map(|p| p.id().to_string()),
                    path_done: k.path_done,
                    completed: k.path_done && last.is_some_and(|w| w.distance(final_position) < ARRIVAL_TOLERANCE),
                    final_mode: s.mode.kind(),
                    final_position,
                    max_cross_track: k.cross_track,
                    failsafe_at: k.failsafe_at,
                }
            })
            .collect();
        RunReport {
            duration: self.time(),
            seed: self.scenario.seed,
            min_pairwise_distance: self.min_pair,
            min_zone_clearance: self.min_clearance,
            min_object_distance: self.min_object,
            violations: self.violations,
            drones,
            rejected_frames: (0..self.sim.drone_count()).map(|i| self.sim.rejected(i)).sum(),
        }
    }

    pub fn finish(self) -> RunOutput {
        let report = self.report();
        RunOutput { report, trajectory_csv: self.trajectory, rc_log: self.rc_log, events: self.events }
    }
}

/// Runs a scenario to its duration.
pub fn run(scenario: &Scenario) -> Result<RunOutput, ScenarioError> {
    let mut h = Harness::new(scenario)?;
    h.run_until(scenario.duration);
    Ok(h.finish())
}
