//! Pose ingestion for tracked objects (drones, hand controllers, users).
//!
//! Datagram grammar, one pose per datagram:
//! `TRK <id> <t_us> <x> <y> <z> <qw> <qx> <qy> <qz>\n`

use std::collections::BTreeMap;
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::Sender;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Quat, Vec3};

pub const DEFAULT_TRACK_PORT: u16 = 47800;
pub const TRACK_PORT_ENV: &str = "DRONOS_TRACK_PORT";

pub type ObjectId = u32;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("datagram field {field}: {reason}")]
pub struct DatagramError {
    pub field: usize,
    pub reason: String,
}

fn field_err(field: usize, reason: impl Into<String>) -> DatagramError {
    DatagramError { field, reason: reason.into() }
}

/// Parses one `TRK` datagram. Field indices in errors count the `TRK` tag as 0.
pub fn parse_datagram(line: &str) -> Result<(ObjectId, Pose), DatagramError> {
    let fields: Vec<&str> = line.split_ascii_whitespace().collect();
    if fields.first() != Some(&"TRK") {
        return Err(field_err(0, "expected TRK tag"));
    }
    if fields.len() != 10 {
        return Err(field_err(fields.len().min(10), format!("expected 10 fields, got {}", fields.len())));
    }
    let id: ObjectId = fields[1].parse().map_err(|_| field_err(1, "object id is not an integer"))?;
    let t_us: u64 = fields[2].parse().map_err(|_| field_err(2, "timestamp is not an integer"))?;
    let mut nums = [0.0f64; 7];
    for (i, n) in nums.iter_mut().enumerate() {
        let idx = i + 3;
        *n = fields[idx].parse().map_err(|_| field_err(idx, "not a decimal number"))?;
        if !n.is_finite() {
            return Err(field_err(idx, "not finite"));
        }
    }
    let orientation = Quat::new(nums[3], nums[4], nums[5], nums[6])
        .normalized()
        .map_err(|_| field_err(6, "zero-norm quaternion"))?;
    let pose = Pose::new(Vec3::new(nums[0], nums[1], nums[2]), orientation, t_us as f64 * 1e-6);
    Ok((id, pose))
}

/// Formats a pose as a datagram; floats use shortest round-trip notation.
pub fn format_datagram(id: ObjectId, pose: &Pose) -> String {
    let t_us = (pose.timestamp * 1e6).round().max(0.0) as u64;
    let (p, q) = (pose.position, pose.orientation);
    format!("TRK {id} {t_us} {} {} {} {} {} {} {}\n", p.x, p.y, p.z, q.w, q.x, q.y, q.z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Drone,
    Controller,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthState {
    Fresh,
    Stale,
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingHealth {
    pub state: HealthState,
    pub age: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HealthThresholds {
    pub stale_after: f64,
    pub lost_after: f64,
}

impl Default for HealthThresholds {
    fn default() -> Self {
        Self { stale_after: 0.1, lost_after: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackedObject {
    pub id: ObjectId,
    pub kind: ObjectKind,
    pub latest: Pose,
    pub smoothed: Pose,
    /// Low-passed finite difference of the smoothed position.
    pub velocity: Vec3,
    /// Local receive time of the last accepted datagram.
    pub last_update: f64,
    pub dropped_stale: u64,
}

impl TrackedObject {
    pub fn new(id: ObjectId, kind: ObjectKind, pose: Pose, now: f64) -> Self {
        Self {
            id,
            kind,
            latest: pose,
            smoothed: pose,
            velocity: Vec3::ZERO,
            last_update: now,
            dropped_stale: 0,
        }
    }

    /// Applies a new observation. Returns `false` if the pose was older than
    /// the latest one and was dropped.
    pub fn update(&mut self, pose: Pose, alpha: f64, velocity_alpha: f64, now: f64) -> bool {
        if pose.timestamp < self.latest.timestamp {
            self.dropped_stale += 1;
            return false;
        }
        let prev = self.smoothed;
        let position = pose.position * alpha + prev.position * (1.0 - alpha);
        let dt = pose.timestamp - prev.timestamp;
        if dt > 0.0 {
            let raw = (position - prev.position) / dt;
            self.velocity = raw * velocity_alpha + self.velocity * (1.0 - velocity_alpha);
        }
        self.smoothed = Pose::new(position, pose.orientation, pose.timestamp);
        self.latest = pose;
        self.last_update = self.last_update.max(now);
        true
    }

    pub fn health(&self, now: f64, thresholds: HealthThresholds) -> TrackingHealth {
        health(self, now, thresholds)
    }
}

pub fn health(obj: &TrackedObject, now: f64, t: HealthThresholds) -> TrackingHealth {
    let age = (now - obj.last_update).max(0.0);
    let state = if age >= t.lost_after {
        HealthState::Lost
    } else if age >= t.stale_after {
        HealthState::Stale
    } else {
        HealthState::Fresh
    };
    TrackingHealth { state, age }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingConfig {
    pub drone_alpha: f64,
    pub controller_alpha: f64,
    pub user_alpha: f64,
    pub velocity_alpha: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { drone_alpha: 0.35, controller_alpha: 0.35, user_alpha: 0.35, velocity_alpha: 0.3 }
    }
}

impl SmoothingConfig {
    pub fn alpha(&self, kind: ObjectKind) -> f64 {
        match kind {
            ObjectKind::Drone => self.drone_alpha,
            ObjectKind::Controller => self.controller_alpha,
            ObjectKind::User => self.user_alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct IngestCounters {
    pub accepted: u64,
    pub dropped_stale: u64,
    pub unknown_object: u64,
}

/// All tracked objects, keyed by id. Objects must be registered with their
/// kind before their datagrams are accepted.
#[derive(Debug, Clone, Default)]
pub struct TrackingStore {
    kinds: BTreeMap<ObjectId, ObjectKind>,
    objects: BTreeMap<ObjectId, TrackedObject>,
    smoothing: SmoothingConfig,
    counters: IngestCounters,
}

impl TrackingStore {
    pub fn new(smoothing: SmoothingConfig) -> Self {
        Self { smoothing, ..Default::default() }
    }

    pub fn register(&mut self, id: ObjectId, kind: ObjectKind) {
        self.kinds.entry(id).or_insert(kind);
    }

    pub fn kind_of(&self, id: ObjectId) -> Option<ObjectKind> {
        self.kinds.get(&id).copied()
    }

    pub fn ingest(&mut self, id: ObjectId, pose: Pose, now: f64) {
        let Some(&kind) = self.kinds.get(&id) else {
            self.counters.unknown_object += 1;
            return;
        };
        let alpha = self.smoothing.alpha(kind);
        let va = self.smoothing.velocity_alpha;
        match self.objects.get_mut(&id) {
            Some(obj) => {
                if obj.update(pose, alpha, va, now) {
                    self.counters.accepted += 1;
                } else {
                    self.counters.dropped_stale += 1;
                }
            }
            None => {
                self.objects.insert(id, TrackedObject::new(id, kind, pose, now));
                self.counters.accepted += 1;
            }
        }
    }

    pub fn get(&self, id: ObjectId) -> Option<&TrackedObject> {
        self.objects.get(&id)
    }

    pub fn objects(&self) -> impl Iterator<Item = &TrackedObject> {
        self.objects.values()
    }

    pub fn counters(&self) -> IngestCounters {
        self.counters
    }
}

/// A parsed datagram stamped with its local receive time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSample {
    pub id: ObjectId,
    pub pose: Pose,
    pub received: f64,
}

/// Seconds elapsed since a fixed epoch.
#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    epoch: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self { epoch: Instant::now() }
    }

    pub fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

pub struct UdpListener {
    pub local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl UdpListener {
    /// Binds `addr` and forwards every parsed datagram to `out`. Unparseable
    /// datagrams are logged and skipped.
    pub fn spawn(addr: SocketAddr, clock: MonotonicClock, out: Sender<TrackSample>) -> io::Result<UdpListener> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(Duration::from_millis(50)))?;
        let local_addr = socket.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::Builder::new().name("track-udp".into()).spawn(move || {
            let mut buf = [0u8; 2048];
            while !flag.load(Ordering::Relaxed) {
                let n = match socket.recv_from(&mut buf) {
                    Ok((n, _)) => n,
                    Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
                    Err(e) => {
                        log::warn!("tracking socket error: {e}");
                        continue;
                    }
                };
                let received = clock.now();
                let Ok(text) = std::str::from_utf8(&buf[..n]) else {
                    log::debug!("non-utf8 tracking datagram dropped");
                    continue;
                };
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    match parse_datagram(line) {
                        Ok((id, pose)) => {
                            if out.send(TrackSample { id, pose, received }).is_err() {
                                return;
                            }
                        }
                        Err(e) => log::debug!("bad tracking datagram: {e}"),
                    }
                }
            }
        })?;
        Ok(UdpListener { local_addr, stop, handle: Some(handle) })
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for UdpListener {
    fn drop(&mut self) {
        self.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::yaw_of;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn parse_identity() {
        let (id, pose) = parse_datagram("TRK 1 1000000 0 0 1 1 0 0 0\n").unwrap();
        assert_eq!(id, 1);
        assert_eq!(pose.timestamp, 1.0);
        assert_eq!(pose.position, Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(pose.orientation, Quat::IDENTITY);
    }

    #[test]
    fn parse_normalizes_quaternion() {
        let (id, pose) = parse_datagram("TRK 2 500000 1.5 -2 0.8 0.7071 0 0 0.7071").unwrap();
        assert_eq!(id, 2);
        assert_eq!(pose.timestamp, 0.5);
        assert_abs_diff_eq!(pose.orientation.norm(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(yaw_of(pose.orientation).unwrap(), std::f64::consts::FRAC_PI_2, epsilon = 1e-4);
    }

    #[test]
    fn parse_errors_name_the_field() {
        assert_eq!(parse_datagram("TRK 1 abc 0 0 1 1 0 0 0").unwrap_err().field, 2);
        assert_eq!(parse_datagram("TRK 1 1 0 0 x 1 0 0 0").unwrap_err().field, 5);
        assert_eq!(parse_datagram("TRK 1 1 0 0").unwrap_err().field, 5);
        assert_eq!(parse_datagram("POS 1 1 0 0 1 1 0 0 0").unwrap_err().field, 0);
        assert!(parse_datagram("TRK 1 1 0 0 1 0 0 0 0").unwrap_err().reason.contains("zero-norm"));
    }

    #[test]
    fn datagram_roundtrip() {
        let pose = Pose::new(Vec3::new(0.1, -2.25, 1.0 / 3.0), Quat::from_yaw(0.3), 12.34567);
        let (id, back) = parse_datagram(&format_datagram(7, &pose)).unwrap();
        assert_eq!(id, 7);
        assert_eq!(back.position, pose.position);
        assert_abs_diff_eq!(back.timestamp, 12.345670, epsilon = 1e-9);
    }

    fn at(x: f64, t: f64) -> Pose {
        Pose::new(Vec3::new(x, 0.0, 0.0), Quat::IDENTITY, t)
    }

    #[test]
    fn smoothing_examples() {
        let mut obj = TrackedObject::new(1, ObjectKind::Drone, at(0.0, 0.0), 0.0);
        obj.update(at(1.0, 0.01), 1.0, 0.3, 0.01);
        assert_eq!(obj.smoothed.position, obj.latest.position);

        let mut obj = TrackedObject::new(1, ObjectKind::Drone, at(0.0, 0.0), 0.0);
        obj.update(at(1.0, 0.01), 0.5, 0.3, 0.01);
        assert_eq!(obj.smoothed.position.x, 0.5);
        obj.update(at(1.0, 0.02), 0.5, 0.3, 0.02);
        obj.update(at(1.0, 0.03), 0.5, 0.3, 0.03);
        assert_eq!(obj.smoothed.position.x, 0.875);
    }

    #[test]
    fn orientation_is_replaced_not_smoothed() {
        let mut obj = TrackedObject::new(1, ObjectKind::Controller, at(0.0, 0.0), 0.0);
        let turned = Pose::new(Vec3::ZERO, Quat::from_yaw(1.0), 0.01);
        obj.update(turned, 0.2, 0.3, 0.01);
        assert_eq!(obj.smoothed.orientation, turned.orientation);
    }

    #[test]
    fn older_datagram_is_dropped() {
        let mut obj = TrackedObject::new(1, ObjectKind::User, at(0.0, 1.0), 1.0);
        assert!(!obj.update(at(5.0, 0.5), 0.5, 0.3, 1.1));
        assert_eq!(obj.dropped_stale, 1);
        assert_eq!(obj.smoothed.position.x, 0.0);
    }

    #[test]
    fn health_thresholds() {
        let obj = TrackedObject::new(1, ObjectKind::Drone, at(0.0, 0.0), 10.0);
        let th = HealthThresholds { stale_after: 0.1, lost_after: 0.2 };
        assert_eq!(obj.health(10.01, th).state, HealthState::Fresh);
        assert_eq!(obj.health(10.15, th).state, HealthState::Stale);
        assert_eq!(obj.health(10.25, th).state, HealthState::Lost);
    }

    #[test]
    fn store_requires_registration() {
        let mut store = TrackingStore::new(SmoothingConfig::default());
        store.ingest(3, at(1.0, 0.0), 0.0);
        assert!(store.get(3).is_none());
        assert_eq!(store.counters().unknown_object, 1);
        store.register(3, ObjectKind::User);
        store.register(3, ObjectKind::Drone);
        store.ingest(3, at(1.0, 0.0), 0.0);
        assert_eq!(store.get(3).unwrap().kind, ObjectKind::User);
    }

    #[test]
    fn udp_listener_delivers_samples() {
        let (tx, rx) = crossbeam_channel::unbounded();
        let mut listener =
            UdpListener::spawn("127.0.0.1:0".parse().unwrap(), MonotonicClock::new(), tx).unwrap();
        let sock = UdpSocket::bind("127.0.0.1:0").unwrap();
        sock.send_to(b"garbage", listener.local_addr).unwrap();
        sock.send_to(b"TRK 4 20000 1 2 3 1 0 0 0\n", listener.local_addr).unwrap();
        let sample = rx.recv_timeout(Duration::from_secs(2)).unwrap();
        assert_eq!(sample.id, 4);
        assert_eq!(sample.pose.position, Vec3::new(1.0, 2.0, 3.0));
        listener.stop();
    }

    proptest! {
        #[test]
        fn smoothed_stays_in_hull(xs in proptest::collection::vec(-5.0..5.0f64, 1..60), alpha in 0.01..=1.0f64) {
            let mut obj = TrackedObject::new(1, ObjectKind::Drone, at(xs[0], 0.0), 0.0);
            let (mut lo, mut hi) = (xs[0], xs[0]);
            for (i, &x) in xs.iter().enumerate().skip(1) {
                obj.update(at(x, i as f64 * 0.01), alpha, 0.3, i as f64 * 0.01);
                lo = lo.min(x);
                hi = hi.max(x);
                let s = obj.smoothed.position.x;
                prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
            }
        }

        #[test]
        fn dropped_count_matches_out_of_order(order in Just((0..40usize).collect::<Vec<_>>()).prop_shuffle()) {
            // Count datagrams whose timestamp is below the running maximum.
            let mut max_seen = None;
            let mut expected = 0;
            let mut obj: Option<TrackedObject> = None;
            for &i in &order {
                let pose = at(i as f64, i as f64 * 0.01);
                match max_seen {
                    Some(m) if i < m => expected += 1,
                    _ => max_seen = Some(i),
                }
                match obj.as_mut() {
                    None => obj = Some(TrackedObject::new(1, ObjectKind::Drone, pose, 0.0)),
                    Some(o) => { o.update(pose, 0.35, 0.3, 0.0); }
                }
            }
            prop_assert_eq!(obj.unwrap().dropped_stale, expected);
        }
    }
}
