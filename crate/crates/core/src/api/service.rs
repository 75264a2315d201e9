//! Threads and queues behind [`serve`].
//!
//! ```text
//!  UDP tracker ─┐
//!  connections ─┼─ commands (lossless) ─┐
//!               └─ pointer (latest) ────┴─> control loop ─> MSP links
//!                                                │
//!                  snapshots (after a tick) + events (bounded)
//!                                                │
//!                                               hub ─> per-connection queues
//! ```
//! The control loop only ever uses `try_*` operations towards the outside, so
//! a stalled client can cost it nothing. A subscriber whose queue fills up is
//! disconnected. Snapshots are taken right after a tick so fan-out work lands
//! in the idle part of the period.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender, TrySendError};
use serde::Serialize;
use serde_json::{json, Value};
use tungstenite::Message;

use super::protocol::{
    ack_line, command_from_value, error_line, event_line, parse_client_message, protocol_error_line, snapshot_line,
    ModeRequest, Request, MAX_LINE,
};
use super::{ServiceConfig, ServiceError};
use crate::geometry::{Pose, Quat, Vec3};
use crate::msp::encode_set_raw_rc;
use crate::orchestrator::{Command, DroneId, DroneSpec, Event, Orchestrator, OrchestratorError, RaySource, WorldSnapshot};
use crate::path::{path_from_value, path_to_value, PathError, PointerRay};
use crate::safety::ZoneDef;
use crate::sim::{NoiseConfig, SimDrone, SimParams, SimServer, SimWorld};
use crate::tracking::{MonotonicClock, TrackSample, UdpListener};

const POLL: Duration = Duration::from_millis(100);
const WS_POLL: Duration = Duration::from_millis(20);
const REPLY_TIMEOUT: Duration = Duration::from_secs(5);
const LINK_QUEUE: usize = 4;
const EVENT_QUEUE: usize = 1024;
/// Spacing of embedded-sim drones on the ground grid, meters.
const SIM_SPACING: f64 = 1.0;

/// Control loop timing, measured between consecutive tick starts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LoopStats {
    pub period: f64,
    pub ticks: u64,
    pub min_interval: f64,
    pub max_interval: f64,
    pub mean_interval: f64,
}

impl LoopStats {
    /// Largest relative deviation of any interval from the nominal period.
    pub fn max_jitter(&self) -> f64 {
        if self.ticks < 2 {
            return 0.0;
        }
        ((self.max_interval - self.period).max(self.period - self.min_interval)) / self.period
    }

    fn record(&mut self, interval: f64) {
        // Called after `ticks` counts this tick, so ticks - 2 intervals came before.
        let n = self.ticks.saturating_sub(2) as f64;
        if n == 0.0 {
            self.min_interval = interval;
            self.max_interval = interval;
        }
        self.min_interval = self.min_interval.min(interval);
        self.max_interval = self.max_interval.max(interval);
        self.mean_interval = (self.mean_interval * n + interval) / (n + 1.0);
    }
}

#[derive(Debug)]
struct Rejection {
    reason: String,
    field: Option<String>,
}

impl Rejection {
    fn new(reason: impl Into<String>, field: Option<&str>) -> Self {
        Self { reason: reason.into(), field: field.map(str::to_string) }
    }
}

type Reply = Result<Option<Value>, Rejection>;

struct Job {
    request: Request,
    reply: Sender<Reply>,
}

enum HubMsg {
    Subscribe { conn: u64, tx: Sender<Arc<str>>, kicked: Arc<AtomicBool> },
    Unsubscribe { conn: u64 },
    Event(Event),
    Snapshot(Box<WorldSnapshot>),
}

/// What connection threads share.
struct Shared {
    jobs: Sender<Job>,
    pointer: Mutex<Option<PointerRay>>,
    hub: Sender<HubMsg>,
    queue: usize,
    stop: Arc<AtomicBool>,
    next_conn: AtomicU64,
}

pub struct Service {
    api_addr: SocketAddr,
    track_addr: SocketAddr,
    sim_msp_addr: Option<SocketAddr>,
    stop: Arc<AtomicBool>,
    stats: Arc<Mutex<LoopStats>>,
    threads: Vec<JoinHandle<()>>,
    tracker: Option<UdpListener>,
    sim: Option<SimServer>,
}

impl Service {
    pub fn api_addr(&self) -> SocketAddr {
        self.api_addr
    }

    pub fn track_addr(&self) -> SocketAddr {
        self.track_addr
    }

    pub fn sim_msp_addr(&self) -> Option<SocketAddr> {
        self.sim_msp_addr
    }

    pub fn stats(&self) -> LoopStats {
        *self.stats.lock().unwrap()
    }

    /// Starts a fresh measurement window.
    pub fn reset_stats(&self) {
        let mut st = self.stats.lock().unwrap();
        *st = LoopStats { period: st.period, ..Default::default() };
    }

    /// Blocks until the control loop exits.
    pub fn join(mut self) {
        if let Some(h) = self.threads.pop() {
            let _ = h.join();
        }
        self.stop();
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some(mut s) = self.sim.take() {
            s.stop();
        }
        if let Some(mut l) = self.tracker.take() {
            l.stop();
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.stop();
    }
}

fn bind_err(what: &'static str, addr: SocketAddr) -> impl FnOnce(io::Error) -> ServiceError {
    move |source| ServiceError::Bind { what, addr, source }
}

/// Starts the service. With `sim > 0` an embedded simulator flies that many
/// drones; otherwise drones fly over `cfg.links`.
pub fn serve(cfg: ServiceConfig, sim: usize) -> Result<Service, ServiceError> {
    cfg.validate()?;
    let presets = cfg.presets()?;
    let v_max = presets.get(&cfg.preset)?.v_max;
    let mut orch = Orchestrator::new(cfg.orchestrator_config(), presets, &cfg.preset)?;

    let drones: Vec<DroneSpec> = if cfg.drones.is_empty() {
        (1..=sim as u32).map(|i| DroneSpec { drone_id: i, tracked_object_id: i, priority: i as i32 - 1, preset: None }).collect()
    } else {
        cfg.drones.clone()
    };
    if sim > 0 && drones.len() != sim {
        return Err(ServiceError::Config(format!("--sim {sim} but {} drones configured", drones.len())));
    }
    if sim == 0 && !cfg.links.is_empty() && cfg.links.len() != drones.len() {
        return Err(ServiceError::Config(format!("{} links for {} drones", cfg.links.len(), drones.len())));
    }
    for d in &drones {
        orch.add_drone(d)?;
    }
    for o in &cfg.objects {
        orch.register_object(o.object_id, o.kind);
    }
    orch.set_zones(cfg.zones()?);

    let api_at = SocketAddr::new(cfg.bind, cfg.api_port);
    let listener = TcpListener::bind(api_at).map_err(bind_err("API", api_at))?;
    let api_addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;

    let clock = MonotonicClock::new();
    let (track_tx, track_rx) = unbounded();
    let track_at = SocketAddr::new(cfg.bind, cfg.track_port);
    let tracker = UdpListener::spawn(track_at, clock, track_tx).map_err(bind_err("tracking", track_at))?;
    let track_addr = tracker.local_addr;

    let (server, links) = if sim > 0 {
        let mut world = SimWorld::new(cfg.sim_seed, NoiseConfig::default())?;
        let cols = (sim as f64).sqrt().ceil() as usize;
        for (i, d) in drones.iter().enumerate() {
            let offset = |k: usize, n: usize| (k as f64 - (n as f64 - 1.0) / 2.0) * SIM_SPACING;
            let rows = sim.div_ceil(cols);
            let p = cfg.orchestrator.fence.clamp(Vec3::new(offset(i % cols, cols), offset(i / cols, rows), 0.0));
            world.add_drone(d.drone_id, d.tracked_object_id, SimDrone::at_rest(p, 0.0, SimParams::default()))?;
        }
        let msp_at = SocketAddr::new(cfg.bind, cfg.msp_port);
        let server = SimServer::spawn(world, msp_at, track_addr).map_err(bind_err("simulator MSP", msp_at))?;
        let addr = server.msp_addr();
        (Some(server), vec![addr; sim])
    } else {
        (None, cfg.links.clone())
    };

    let stop = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();
    // The simulator assigns drones by connection order, so connect in order.
    let mut link_tx: BTreeMap<DroneId, Sender<Vec<u8>>> = BTreeMap::new();
    for (d, addr) in drones.iter().zip(&links) {
        let stream = TcpStream::connect_timeout(addr, Duration::from_secs(2))
            .map_err(|source| ServiceError::Link { addr: *addr, source })?;
        stream.set_nodelay(true)?;
        let (tx, rx) = bounded::<Vec<u8>>(LINK_QUEUE);
        link_tx.insert(d.drone_id, tx);
        threads.push(thread::Builder::new().name(format!("msp-{}", d.drone_id)).spawn(move || link_writer(stream, rx))?);
    }

    let stats = Arc::new(Mutex::new(LoopStats { period: 1.0 / cfg.control_rate, ..Default::default() }));
    let (job_tx, job_rx) = unbounded::<Job>();
    let (hub_tx, hub_rx) = bounded::<HubMsg>(EVENT_QUEUE);
    let subscribers = Arc::new(AtomicUsize::new(0));
    let shared = Arc::new(Shared {
        jobs: job_tx,
        pointer: Mutex::new(None),
        hub: hub_tx.clone(),
        queue: cfg.subscriber_queue,
        stop: stop.clone(),
        next_conn: AtomicU64::new(1),
    });

    let hub = {
        let (stop, subscribers) = (stop.clone(), subscribers.clone());
        thread::Builder::new().name("hub".into()).spawn(move || hub_loop(hub_rx, subscribers, stop))?
    };
    let acceptor = {
        let shared = shared.clone();
        thread::Builder::new().name("accept".into()).spawn(move || accept_loop(listener, shared))?
    };
    let control = {
        let ctx = LoopCtx {
            orch,
            period: 1.0 / cfg.control_rate,
            v_max,
            clock,
            track_rx,
            job_rx,
            shared: shared.clone(),
            hub: hub_tx,
            links: link_tx,
            snapshot_step: cfg.snapshot_rate / cfg.control_rate,
            subscribers,
            stats: stats.clone(),
        };
        thread::Builder::new().name("control".into()).spawn(move || ctx.run())?
    };
    threads.push(hub);
    threads.push(acceptor);
    // Last, so `join` waits on it.
    threads.push(control);
    log::info!("api listening on {api_addr}, tracking on {track_addr}");
    Ok(Service {
        api_addr,
        track_addr,
        sim_msp_addr: server.as_ref().map(SimServer::msp_addr),
        stop,
        stats,
        threads,
        tracker: Some(tracker),
        sim: server,
    })
}

/// Sleeps most of the way, then yields until the deadline. Plain sleeps on
/// small or virtualized machines overshoot by several milliseconds often
/// enough to break the ±20% period budget.
/// Best effort: puts the calling thread in the SCHED_FIFO class so client
/// threads cannot delay a tick. Without the privilege the loop stays on the
/// normal scheduler and relies on `wait_until` alone.
#[cfg(target_os = "linux")]
fn realtime_priority() {
    let param = libc::sched_param { sched_priority: 10 };
    // SAFETY: plain syscall on the current thread with a valid parameter block
    let rc = unsafe { libc::pthread_setschedparam(libc::pthread_self(), libc::SCHED_FIFO, &param) };
    if rc != 0 {
        log::info!("control loop runs without realtime priority: {}", std::io::Error::from_raw_os_error(rc));
    }
}

#[cfg(not(target_os = "linux"))]
fn realtime_priority() {}

fn wait_until(deadline: Instant) {
    const SPIN: Duration = Duration::from_micros(1500);
    let left = deadline.saturating_duration_since(Instant::now());
    if left > SPIN {
        thread::sleep(left - SPIN);
    }
    while Instant::now() < deadline {
        thread::yield_now();
    }
}

fn link_writer(mut stream: TcpStream, rx: Receiver<Vec<u8>>) {
    for bytes in rx {
        if let Err(e) = stream.write_all(&bytes) {
            log::warn!("MSP link closed: {e}");
            return;
        }
    }
}

struct LoopCtx {
    orch: Orchestrator,
    period: f64,
    v_max: f64,
    clock: MonotonicClock,
    track_rx: Receiver<TrackSample>,
    job_rx: Receiver<Job>,
    shared: Arc<Shared>,
    hub: Sender<HubMsg>,
    links: BTreeMap<DroneId, Sender<Vec<u8>>>,
    /// Snapshots per tick; a snapshot goes out each time the phase wraps.
    snapshot_step: f64,
    subscribers: Arc<AtomicUsize>,
    stats: Arc<Mutex<LoopStats>>,
}

impl LoopCtx {
    fn run(mut self) {
        realtime_priority();
        let period = Duration::from_secs_f64(self.period);
        let mut deadline = Instant::now();
        let mut last = self.clock.now() - self.period;
        let mut phase = 0.0;
        while !self.shared.stop.load(Ordering::Relaxed) {
            let now = self.clock.now();
            for s in self.track_rx.try_iter() {
                self.orch.ingest(&s);
            }
            while let Ok(job) = self.job_rx.try_recv() {
                let (reply, events) = self.handle(job.request);
                let _ = job.reply.send(reply);
                self.publish(events);
            }
            if let Some(ray) = self.shared.pointer.lock().unwrap().take() {
                self.orch.set_pointer(ray);
            }
            let out = self.orch.tick(now, now - last);
            {
                let mut st = self.stats.lock().unwrap();
                st.ticks += 1;
                if st.ticks > 1 {
                    st.record(now - last);
                }
            }
            last = now;
            for (id, rc) in &out.commands {
                if let Some(tx) = self.links.get(id) {
                    // A full link drops this frame; the next tick sends a fresher one.
                    let _ = tx.try_send(encode_set_raw_rc(rc));
                }
            }
            self.publish(out.events);
            phase += self.snapshot_step;
            if phase >= 1.0 {
                phase -= 1.0;
                if self.subscribers.load(Ordering::Relaxed) > 0 {
                    if let Err(TrySendError::Full(_)) = self.hub.try_send(HubMsg::Snapshot(Box::new(self.orch.snapshot()))) {
                        log::debug!("hub busy, snapshot skipped");
                    }
                }
            }

            deadline += period;
            let wall = Instant::now();
            if deadline > wall {
                wait_until(deadline);
            } else {
                // Late: restart the schedule rather than squeezing the next
                // interval to catch up.
                if wall - deadline > period / 5 {
                    log::debug!("control tick late by {:?}", wall - deadline);
                }
                deadline = wall;
            }
        }
    }

    fn publish(&self, events: Vec<Event>) {
        for e in events {
            log::info!("{}", serde_json::to_string(&e).unwrap_or_default());
            if let Err(TrySendError::Full(_)) = self.hub.try_send(HubMsg::Event(e)) {
                log::warn!("event queue full, event dropped");
            }
        }
    }

    fn handle(&mut self, request: Request) -> (Reply, Vec<Event>) {
        let orch = &mut self.orch;
        let mut events = Vec::new();
        let reply = match request {
            Request::UploadPath { path } => upload(orch, &path, self.v_max),
            Request::GetPath { path_id } => match orch.path(&path_id) {
                Some(sp) => Ok(Some(json!({ "path": path_to_value(&sp.path), "demonstrated": sp.demonstrated }))),
                None => Err(Rejection::new(format!("unknown path {path_id:?}"), Some("path_id"))),
            },
            Request::DefineZones { zones } => define_zones(orch, zones),
            Request::Command { drone_id, transition } => match command_from_value(&transition) {
                Ok(cmd) => run_command(orch, drone_id, &cmd, &mut events),
                Err(e) => Err(Rejection::new(e, Some("transition"))),
            },
            Request::SetMode { drone_id, mode, path_id, source } => {
                let cmd = match mode {
                    ModeRequest::Scripted | ModeRequest::DemonstratedPlayback => match path_id {
                        Some(path_id) => Ok(Command::StartPath { path_id }),
                        None => Err(Rejection::new("path_id is required for this mode", Some("path_id"))),
                    },
                    ModeRequest::Realtime => Ok(Command::StartRealtime { source: source.unwrap_or(RaySource::Pointer) }),
                    ModeRequest::Hover => Ok(Command::Hover),
                    ModeRequest::Landing => Ok(Command::Land),
                };
                let wants_demo = mode == ModeRequest::DemonstratedPlayback;
                match cmd {
                    Ok(Command::StartPath { path_id }) if orch.path(&path_id).is_none() => {
                        Err(Rejection::new(format!("unknown path {path_id:?}"), Some("path_id")))
                    }
                    Ok(Command::StartPath { path_id }) if orch.path(&path_id).is_some_and(|p| p.demonstrated != wants_demo) => {
                        let kind = if wants_demo { "a recorded" } else { "an uploaded" };
                        Err(Rejection::new(format!("path {path_id:?} is not {kind} path"), Some("path_id")))
                    }
                    // No `transition` field here; the requested mode is what was refused.
                    Ok(cmd) => run_command(orch, drone_id, &cmd, &mut events).map_err(|mut r| {
                        if r.field.as_deref() == Some("transition") {
                            r.field = Some("mode".into());
                        }
                        r
                    }),
                    Err(r) => Err(r),
                }
            }
            Request::SetGains { drone_id, gains } => {
                orch.set_gains(drone_id, &gains).map(|_| None).map_err(|e| reject(e, "gains"))
            }
            Request::RecordStart { recording_id, source } => {
                if source.is_some_and(|id| orch.tracking().kind_of(id).is_none()) {
                    Err(Rejection::new("unknown tracked object", Some("source")))
                } else {
                    orch.record_start(&recording_id, source).map(|_| None).map_err(|e| reject(e, "recording_id"))
                }
            }
            Request::RecordPose { recording_id, x, y, z, t } => {
                let pose = Pose::new(Vec3::new(x, y, z), Quat::IDENTITY, t);
                if !(pose.position.is_finite() && t.is_finite()) {
                    Err(Rejection::new("pose must be finite", None))
                } else {
                    orch.record_pose(&recording_id, &pose)
                        .map(|accepted| Some(json!({ "accepted": accepted })))
                        .map_err(|e| reject(e, "recording_id"))
                }
            }
            Request::RecordFinish { recording_id, path_id, epsilon, speed } => {
                if !(epsilon.is_finite() && epsilon >= 0.0) {
                    Err(Rejection::new("epsilon must be >= 0", Some("epsilon")))
                } else if !(speed.is_finite() && speed > 0.0 && speed <= self.v_max) {
                    Err(Rejection::new(format!("speed must be in (0, {}]", self.v_max), Some("speed")))
                } else {
                    orch.record_finish(&recording_id, &path_id, epsilon, speed)
                        .map(|p| Some(json!({ "path": path_to_value(&p) })))
                        .map_err(|e| reject(e, "recording_id"))
                }
            }
            // Answered by the connection itself.
            Request::PointerUpdate { .. } | Request::Subscribe | Request::Unsubscribe | Request::Ping => Ok(None),
        };
        (reply, events)
    }
}

fn reject(e: OrchestratorError, default_field: &str) -> Rejection {
    let field = match &e {
        OrchestratorError::UnknownDrone(_) => Some("drone_id".to_string()),
        OrchestratorError::Path(p) => p.field_path().map(str::to_string),
        OrchestratorError::Transition(_) => Some("transition".to_string()),
        _ => Some(default_field.to_string()),
    };
    Rejection { reason: e.to_string(), field }
}

fn path_rejection(e: PathError) -> Rejection {
    let field = match e.field_path() {
        Some("$") | None => "path".to_string(),
        Some(f) => format!("path.{f}"),
    };
    Rejection { reason: e.to_string(), field: Some(field) }
}

fn upload(orch: &mut Orchestrator, doc: &Value, v_max: f64) -> Reply {
    let path = path_from_value(doc).map_err(path_rejection)?;
    path.check_speed_limit(v_max).map_err(path_rejection)?;
    let result = json!({ "path_id": path.id(), "duration": path.duration(), "waypoints": path.waypoints().len() });
    orch.upload_path(path, false);
    Ok(Some(result))
}

fn define_zones(orch: &mut Orchestrator, zones: Value) -> Reply {
    let Value::Array(items) = zones else {
        return Err(Rejection::new("zones must be an array", Some("zones")));
    };
    let mut defs = Vec::with_capacity(items.len());
    for (i, item) in items.into_iter().enumerate() {
        let at = format!("zones[{i}]");
        let def: ZoneDef = serde_json::from_value(item).map_err(|e| Rejection::new(e.to_string(), Some(&at)))?;
        def.validate().map_err(|e| Rejection::new(e.to_string(), Some(&at)))?;
        if defs.iter().any(|d: &ZoneDef| d.id == def.id) {
            return Err(Rejection::new(format!("duplicate zone id {:?}", def.id), Some(&format!("{at}.id"))));
        }
        defs.push(def);
    }
    let n = defs.len();
    orch.set_zones(defs);
    Ok(Some(json!({ "zones": n })))
}

fn run_command(orch: &mut Orchestrator, drone_id: DroneId, cmd: &Command, events: &mut Vec<Event>) -> Reply {
    events.extend(orch.command(drone_id, cmd).map_err(|e| reject(e, "transition"))?);
    let mode = orch.session(drone_id).map(|s| s.mode.kind());
    Ok(Some(json!({ "mode": mode })))
}

fn hub_loop(rx: Receiver<HubMsg>, count: Arc<AtomicUsize>, stop: Arc<AtomicBool>) {
    struct Sub {
        tx: Sender<Arc<str>>,
        kicked: Arc<AtomicBool>,
    }
    fn fan_out(subs: &mut BTreeMap<u64, Sub>, line: Arc<str>) {
        subs.retain(|conn, s| match s.tx.try_send(line.clone()) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) => {
                log::warn!("subscriber {conn} is too slow, disconnecting");
                s.kicked.store(true, Ordering::Relaxed);
                false
            }
            Err(TrySendError::Disconnected(_)) => false,
        });
    }

    let mut subs: BTreeMap<u64, Sub> = BTreeMap::new();
    let mut seq = 0;
    while !stop.load(Ordering::Relaxed) {
        match rx.recv_timeout(POLL) {
            Ok(HubMsg::Subscribe { conn, tx, kicked }) => {
                subs.insert(conn, Sub { tx, kicked });
            }
            Ok(HubMsg::Unsubscribe { conn }) => {
                subs.remove(&conn);
            }
            Ok(HubMsg::Event(e)) => fan_out(&mut subs, event_line(&e).into()),
            Ok(HubMsg::Snapshot(snap)) => {
                seq += 1;
                fan_out(&mut subs, snapshot_line(seq, &snap).into());
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        count.store(subs.len(), Ordering::Relaxed);
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let shared = shared.clone();
                let spawned = thread::Builder::new().name(format!("conn-{peer}")).spawn(move || {
                    if let Err(e) = connection(stream, shared) {
                        log::debug!("connection {peer} ended: {e}");
                    }
                });
                if let Err(e) = spawned {
                    log::warn!("cannot spawn connection thread: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

/// One client: its outgoing queue, subscription state and request handling.
struct Conn {
    id: u64,
    shared: Arc<Shared>,
    out: Sender<Arc<str>>,
    kicked: Arc<AtomicBool>,
    subscribed: bool,
}

impl Conn {
    fn new(shared: Arc<Shared>, out: Sender<Arc<str>>) -> Self {
        let id = shared.next_conn.fetch_add(1, Ordering::Relaxed);
        Self { id, shared, out, kicked: Arc::default(), subscribed: false }
    }

    fn push(&self, line: String) -> bool {
        self.out.send_timeout(line.into(), REPLY_TIMEOUT).is_ok()
    }

    fn closing(&self) -> bool {
        self.kicked.load(Ordering::Relaxed) || self.shared.stop.load(Ordering::Relaxed)
    }

    /// Handles one raw line. Returns false once the connection should close.
    fn handle_bytes(&mut self, raw: &[u8]) -> bool {
        let raw = raw.strip_suffix(b"\n").unwrap_or(raw);
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        match std::str::from_utf8(raw) {
            Ok(line) if line.trim().is_empty() => true,
            Ok(line) => self.handle_line(line),
            Err(_) => self.push(error_line(&Value::Null, "message is not valid UTF-8", None)),
        }
    }

    fn handle_line(&mut self, line: &str) -> bool {
        let env = match parse_client_message(line) {
            Ok(env) => env,
            Err(e) => return self.push(protocol_error_line(&e)),
        };
        let id = env.id;
        let reply = match env.request {
            Request::Ping => Ok(Some(json!({ "pong": true }))),
            Request::PointerUpdate { origin, forward, distance } => match PointerRay::new(origin, forward, distance) {
                Ok(ray) => {
                    *self.shared.pointer.lock().unwrap() = Some(ray);
                    Ok(None)
                }
                Err(e) => Err(Rejection::new(e.to_string(), None)),
            },
            Request::Subscribe => {
                // Ack first so it precedes the first snapshot.
                let ok = self.push(ack_line(&id, None));
                if ok && !self.subscribed {
                    self.subscribed = true;
                    let msg = HubMsg::Subscribe { conn: self.id, tx: self.out.clone(), kicked: self.kicked.clone() };
                    return self.shared.hub.send(msg).is_ok();
                }
                return ok;
            }
            Request::Unsubscribe => {
                self.unsubscribe();
                Ok(None)
            }
            request => self.call(request),
        };
        match reply {
            Ok(result) => self.push(ack_line(&id, result)),
            Err(r) => self.push(error_line(&id, &r.reason, r.field.as_deref())),
        }
    }

    fn call(&self, request: Request) -> Reply {
        let (tx, rx) = bounded(1);
        if self.shared.jobs.send(Job { request, reply: tx }).is_err() {
            return Err(Rejection::new("service is shutting down", None));
        }
        rx.recv_timeout(REPLY_TIMEOUT).unwrap_or_else(|_| Err(Rejection::new("control loop did not answer", None)))
    }

    fn unsubscribe(&mut self) {
        if self.subscribed {
            self.subscribed = false;
            let _ = self.shared.hub.send(HubMsg::Unsubscribe { conn: self.id });
        }
    }
}

impl Drop for Conn {
    fn drop(&mut self) {
        self.unsubscribe();
    }
}

fn connection(stream: TcpStream, shared: Arc<Shared>) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(POLL))?;
    stream.set_write_timeout(Some(REPLY_TIMEOUT))?;
    let mut head = [0u8; 4];
    loop {
        if shared.stop.load(Ordering::Relaxed) {
            return Ok(());
        }
        match stream.peek(&mut head) {
            Ok(0) => return Ok(()),
            Ok(n) if n >= 4 || !b"GET ".starts_with(&head[..n]) => break,
            Ok(_) => thread::sleep(Duration::from_millis(5)),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => return Err(e),
        }
    }
    if &head == b"GET " {
        websocket(stream, shared)
    } else {
        line_json(stream, shared)
    }
}

fn line_json(stream: TcpStream, shared: Arc<Shared>) -> io::Result<()> {
    let (out_tx, out_rx) = bounded::<Arc<str>>(shared.queue);
    let mut conn = Conn::new(shared, out_tx);
    let closed = Arc::new(AtomicBool::new(false));
    let writer = {
        let mut stream = stream.try_clone()?;
        let (kicked, stop, closed) = (conn.kicked.clone(), conn.shared.stop.clone(), closed.clone());
        thread::spawn(move || {
            let done = || kicked.load(Ordering::Relaxed) || stop.load(Ordering::Relaxed) || closed.load(Ordering::Relaxed);
            while !done() {
                match out_rx.recv_timeout(POLL) {
                    Ok(line) => {
                        if stream.write_all(line.as_bytes()).is_err() {
                            break;
                        }
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            }
            closed.store(true, Ordering::Relaxed);
            let _ = stream.shutdown(Shutdown::Both);
        })
    };

    let mut reader = BufReader::with_capacity(MAX_LINE, stream.try_clone()?);
    let mut buf = Vec::new();
    while !conn.closing() && !closed.load(Ordering::Relaxed) {
        let limit = (MAX_LINE + 1 - buf.len()) as u64;
        match (&mut reader).take(limit).read_until(b'\n', &mut buf) {
            Ok(0) => {
                if !buf.is_empty() {
                    conn.handle_bytes(&buf);
                }
                break;
            }
            Ok(_) if buf.ends_with(b"\n") => {
                let keep = conn.handle_bytes(&buf);
                buf.clear();
                if !keep {
                    break;
                }
            }
            Ok(_) if buf.len() > MAX_LINE => {
                conn.push(error_line(&Value::Null, &format!("line exceeds {MAX_LINE} bytes"), None));
                break;
            }
            Ok(_) => {}
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted) => {}
            Err(_) => break,
        }
    }
    conn.unsubscribe();
    // Let queued replies drain before the writer shuts the socket.
    drop(conn);
    let _ = writer.join();
    let _ = stream.shutdown(Shutdown::Both);
    Ok(())
}

fn websocket(stream: TcpStream, shared: Arc<Shared>) -> io::Result<()> {
    stream.set_read_timeout(Some(REPLY_TIMEOUT))?;
    let mut ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
    ws.get_ref().set_read_timeout(Some(WS_POLL))?;
    let (out_tx, out_rx) = bounded::<Arc<str>>(shared.queue);
    let mut conn = Conn::new(shared, out_tx);
    'outer: while !conn.closing() {
        match ws.read() {
            Ok(Message::Text(t)) => {
                for line in t.as_str().lines() {
                    if !conn.handle_bytes(line.as_bytes()) {
                        break 'outer;
                    }
                }
            }
            Ok(Message::Binary(b)) => {
                if !conn.handle_bytes(&b) {
                    break;
                }
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
        while let Ok(line) = out_rx.try_recv() {
            if ws.send(Message::text(line.trim_end())).is_err() {
                break 'outer;
            }
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}
