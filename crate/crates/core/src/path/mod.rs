//! Flight paths and the three programming modes: scripted waypoint paths,
//! paths recorded by demonstration, and realtime pointer targeting.

mod file;
mod record;
pub mod simplify;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Vec3};

pub use file::{path_from_json, path_from_value, path_to_json, path_to_value, PATH_FORMAT_VERSION};
pub use record::{Recorder, RAW_TRACE_CAPACITY};

/// Positions closer than this are considered duplicates.
pub const DUPLICATE_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_RDP_EPSILON: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PathError {
    #[error("{path}: {reason}")]
    Field { path: String, reason: String },
    #[error("recording too short: {0} points, need at least 2")]
    RecordingTooShort(usize),
    #[error("invalid pointer ray: {0}")]
    InvalidRay(&'static str),
}

impl PathError {
    pub(crate) fn field(path: impl Into<String>, reason: impl Into<String>) -> Self {
        PathError::Field { path: path.into(), reason: reason.into() }
    }

    /// JSON-style location of the offending field, if any.
    pub fn field_path(&self) -> Option<&str> {
        match self {
            PathError::Field { path, .. } => Some(path),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YawSetpoint {
    /// Face the direction of travel.
    Auto,
    /// Fixed heading in radians.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub position: Vec3,
    pub yaw: YawSetpoint,
    /// Cruise speed on the leg arriving at this waypoint, m/s.
    pub speed_to: f64,
    /// Dwell time at this waypoint, seconds.
    pub hold: f64,
}

impl Waypoint {
    pub fn new(position: Vec3, speed_to: f64) -> Self {
        Self { position, yaw: YawSetpoint::Auto, speed_to, hold: 0.0 }
    }

    pub fn with_hold(mut self, hold: f64) -> Self {
        self.hold = hold;
        self
    }

    pub fn with_yaw(mut self, yaw: YawSetpoint) -> Self {
        self.yaw = yaw;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Hold { waypoint: usize },
    Leg { from: usize, to: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Segment {
    phase: Phase,
    start: f64,
    end: f64,
    yaw: f64,
}

/// An immutable, validated flight path with a precomputed timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct FlightPath {
    id: String,
    waypoints: Vec<Waypoint>,
    looped: bool,
    timeline: Vec<Segment>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub position: Vec3,
    pub yaw: f64,
    pub done: bool,
}

impl FlightPath {
    pub fn new(id: impl Into<String>, waypoints: Vec<Waypoint>, looped: bool) -> Result<FlightPath, PathError> {
        if waypoints.is_empty() {
            return Err(PathError::field("waypoints", "at least one waypoint required"));
        }
        for (i, w) in waypoints.iter().enumerate() {
            let at = |f: &str| format!("waypoints[{i}].{f}");
            if !w.position.is_finite() {
                return Err(PathError::field(at("position"), "not finite"));
            }
            if !(w.speed_to.is_finite() && w.speed_to > 0.0) {
                return Err(PathError::field(at("speed_to"), "must be a positive number"));
            }
            if !(w.hold.is_finite() && w.hold >= 0.0) {
                return Err(PathError::field(at("hold"), "must be finite and >= 0"));
            }
            if let YawSetpoint::Fixed(y) = w.yaw {
                if !y.is_finite() {
                    return Err(PathError::field(at("yaw"), "not finite"));
                }
            }
            if i > 0 && w.position.distance(waypoints[i - 1].position) < DUPLICATE_TOLERANCE {
                return Err(PathError::field(at("position"), "duplicates the previous waypoint"));
            }
        }
        let timeline = build_timeline(&waypoints, looped);
        Ok(FlightPath { id: id.into(), waypoints, looped, timeline })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn is_loop(&self) -> bool {
        self.looped
    }

    /// Length of one traversal in seconds (one period for looped paths).
    pub fn duration(&self) -> f64 {
        self.timeline.last().map_or(0.0, |s| s.end)
    }

    /// Fails if any leg is flown faster than `v_max`.
    pub fn check_speed_limit(&self, v_max: f64) -> Result<(), PathError> {
        match self.waypoints.iter().position(|w| w.speed_to > v_max) {
            Some(i) => Err(PathError::field(
                format!("waypoints[{i}].speed_to"),
                format!("exceeds v_max {v_max} m/s"),
            )),
            None => Ok(()),
        }
    }

    /// Polyline vertices as flown, including the closing vertex of a loop.
    pub fn polyline(&self) -> Vec<Vec3> {
        let mut pts: Vec<Vec3> = self.waypoints.iter().map(|w| w.position).collect();
        if self.looped && self.waypoints.len() > 1 {
            pts.push(self.waypoints[0].position);
        }
        pts
    }

    pub fn sample(&self, t: f64) -> PathSample {
        sample(self, t)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

fn leg_heading(from: Vec3, to: Vec3) -> Option<f64> {
    let d = to - from;
    (d.x.hypot(d.y) > 1e-9).then(|| wrap_angle(d.y.atan2(d.x)))
}

fn build_timeline(wps: &[Waypoint], looped: bool) -> Vec<Segment> {
    let n = wps.len();
    let mut legs: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    if looped && n > 1 {
        legs.push((n - 1, 0));
    }
    // Auto yaw before the first horizontal leg uses that leg's heading.
    let mut heading = legs
        .iter()
        .find_map(|&(a, b)| leg_heading(wps[a].position, wps[b].position))
        .unwrap_or(0.0);
    let yaw_at = |w: &Waypoint, auto: f64| match w.yaw {
        YawSetpoint::Auto => auto,
        YawSetpoint::Fixed(y) => wrap_angle(y),
    };

    let mut out = Vec::with_capacity(2 * n + 1);
    let mut t = 0.0;
    let mut push = |phase: Phase, dur: f64, yaw: f64, t: &mut f64| {
        out.push(Segment { phase, start: *t, end: *t + dur, yaw });
        *t += dur;
    };
    push(Phase::Hold { waypoint: 0 }, wps[0].hold, yaw_at(&wps[0], heading), &mut t);
    for (k, &(from, to)) in legs.iter().enumerate() {
        let (a, b) = (wps[from].position, wps[to].position);
        if let Some(h) = leg_heading(a, b) {
            heading = h;
        }
        let dur = a.distance(b) / wps[to].speed_to;
        push(Phase::Leg { from, to }, dur, yaw_at(&wps[to], heading), &mut t);
        // A loop ends on its closing leg; the start hold opens the next period.
        let closing = looped && k == legs.len() - 1;
        if !closing {
            push(Phase::Hold { waypoint: to }, wps[to].hold, yaw_at(&wps[to], heading), &mut t);
        }
    }
    out
}

/// Target position and yaw at time `t` after the path started.
pub fn sample(path: &FlightPath, t: f64) -> PathSample {
    let period = path.duration();
    let last = *path.timeline.last().expect("timeline is never empty");
    let mut t = t.max(0.0);
    if path.looped {
        if period <= 0.0 {
            let seg = path.timeline[0];
            return PathSample { position: path.waypoints[0].position, yaw: seg.yaw, done: false };
        }
        t = t.rem_euclid(period);
    } else if t >= period {
        let end = match last.phase {
            Phase::Hold { waypoint } => waypoint,
            Phase::Leg { to, .. } => to,
        };
        return PathSample { position: path.waypoints[end].position, yaw: last.yaw, done: true };
    }
    let idx = path.timeline.partition_point(|s| s.end <= t).min(path.timeline.len() - 1);
    let seg = path.timeline[idx];
    let position = match seg.phase {
        Phase::Hold { waypoint } => path.waypoints[waypoint].position,
        Phase::Leg { from, to } => {
            let (a, b) = (path.waypoints[from].position, path.waypoints[to].position);
            let dur = seg.end - seg.start;
            let s = if dur > 0.0 { ((t - seg.start) / dur).clamp(0.0, 1.0) } else { 1.0 };
            a.lerp(b, s)
        }
    };
    PathSample { position, yaw: seg.yaw, done: false }
}

/// Altitude band applied to realtime targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AltitudeBand {
    pub z_floor: f64,
    pub z_ceiling: f64,
}

impl Default for AltitudeBand {
    fn default() -> Self {
        Self { z_floor: 0.3, z_ceiling: 2.5 }
    }
}

/// Pointing ray of a hand controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointerRay {
    pub origin: Vec3,
    pub forward: Vec3,
    pub distance: f64,
}

impl PointerRay {
    /// Normalizes `forward`; rejects zero directions and non-positive distances.
    pub fn new(origin: Vec3, forward: Vec3, distance: f64) -> Result<PointerRay, PathError> {
        if !origin.is_finite() {
            return Err(PathError::InvalidRay("origin not finite"));
        }
        let forward = forward.normalized().ok_or(PathError::InvalidRay("forward must be non-zero"))?;
        if !(distance.is_finite() && distance > 0.0) {
            return Err(PathError::InvalidRay("distance must be positive"));
        }
        Ok(PointerRay { origin, forward, distance })
    }
}

pub fn realtime_target(ray: &PointerRay, band: AltitudeBand) -> Vec3 {
    let mut p = ray.origin + ray.forward * ray.distance;
    p.z = p.z.clamp(band.z_floor, band.z_ceiling);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::simplify::point_segment_distance;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn line_path(hold_a: f64) -> FlightPath {
        FlightPath::new(
            "ab",
            vec![Waypoint::new(v(0.0, 0.0, 1.0), 1.0).with_hold(hold_a), Waypoint::new(v(2.0, 0.0, 1.0), 1.0)],
            false,
        )
        .unwrap()
    }

    #[test]
    fn linear_interpolation() {
        let s = line_path(0.0).sample(1.0);
        assert_eq!(s.position, v(1.0, 0.0, 1.0));
        assert!(!s.done);
    }

    #[test]
    fn clamps_at_end() {
        let s = line_path(0.0).sample(5.0);
        assert_eq!(s.position, v(2.0, 0.0, 1.0));
        assert!(s.done);
    }

    #[test]
    fn hold_shifts_timeline() {
        let p = line_path(0.5);
        assert_eq!(p.sample(1.0).position, v(0.5, 0.0, 1.0));
        assert_eq!(p.sample(0.3).position, v(0.0, 0.0, 1.0));
        assert_abs_diff_eq!(p.duration(), 2.5);
    }

    #[test]
    fn auto_yaw_follows_leg_and_freezes_in_hold() {
        let p = FlightPath::new(
            "l",
            vec![
                Waypoint::new(v(0.0, 0.0, 1.0), 1.0),
                Waypoint::new(v(1.0, 0.0, 1.0), 1.0).with_hold(1.0),
                Waypoint::new(v(1.0, 1.0, 1.0), 1.0),
                Waypoint::new(v(1.0, 1.0, 2.0), 1.0),
            ],
            false,
        )
        .unwrap();
        assert_abs_diff_eq!(p.sample(0.5).yaw, 0.0);
        assert_abs_diff_eq!(p.sample(1.5).yaw, 0.0);
        assert_abs_diff_eq!(p.sample(2.5).yaw, FRAC_PI_2);
        // Vertical leg keeps the previous heading.
        assert_abs_diff_eq!(p.sample(3.5).yaw, FRAC_PI_2);
    }

    #[test]
    fn fixed_yaw_is_used() {
        let p = FlightPath::new(
            "y",
            vec![Waypoint::new(v(0.0, 0.0, 1.0), 1.0), Waypoint::new(v(1.0, 0.0, 1.0), 1.0).with_yaw(YawSetpoint::Fixed(1.0))],
            false,
        )
        .unwrap();
        assert_eq!(p.sample(0.5).yaw, 1.0);
    }

    #[test]
    fn loop_wraps_around() {
        let p = FlightPath::new(
            "tri",
            vec![Waypoint::new(v(0.0, 0.0, 1.0), 1.0), Waypoint::new(v(1.0, 0.0, 1.0), 1.0), Waypoint::new(v(1.0, 1.0, 1.0), 1.0)],
            true,
        )
        .unwrap();
        let period = 2.0 + 2f64.sqrt();
        assert_abs_diff_eq!(p.duration(), period, epsilon = 1e-12);
        let a = p.sample(0.5);
        let b = p.sample(0.5 + 3.0 * period);
        assert!((a.position - b.position).norm() < 1e-9);
        assert!(!b.done);
    }

    #[test]
    fn single_waypoint() {
        let p = FlightPath::new("one", vec![Waypoint::new(v(0.0, 0.0, 1.0), 1.0).with_hold(2.0)], false).unwrap();
        assert!(!p.sample(1.0).done);
        assert!(p.sample(2.0).done);
        let l = FlightPath::new("one", vec![Waypoint::new(v(0.0, 0.0, 1.0), 1.0)], true).unwrap();
        assert_eq!(l.sample(7.0).position, v(0.0, 0.0, 1.0));
    }

    #[test]
    fn construction_errors() {
        let e = FlightPath::new("d", vec![Waypoint::new(v(0.0, 0.0, 1.0), 1.0), Waypoint::new(v(0.0, 0.0005, 1.0), 1.0)], false)
            .unwrap_err();
        assert_eq!(e.field_path(), Some("waypoints[1].position"));
        let e = FlightPath::new("s", vec![Waypoint::new(v(0.0, 0.0, 1.0), 0.0)], false).unwrap_err();
        assert_eq!(e.field_path(), Some("waypoints[0].speed_to"));
        assert!(FlightPath::new("e", vec![], false).is_err());
        let p = line_path(0.0);
        assert!(p.check_speed_limit(0.5).is_err());
        assert!(p.check_speed_limit(1.0).is_ok());
    }

    #[test]
    fn realtime_examples() {
        let band = AltitudeBand { z_floor: 0.3, z_ceiling: 2.5 };
        let ray = PointerRay::new(v(0.0, 0.0, 1.0), v(1.0, 0.0, 0.0), 1.5).unwrap();
        assert_eq!(realtime_target(&ray, band), v(1.5, 0.0, 1.0));
        let down = PointerRay::new(v(0.0, 0.0, 1.0), v(0.0, 0.0, -1.0), 2.0).unwrap();
        assert_eq!(realtime_target(&down, band), v(0.0, 0.0, 0.3));
        let further = PointerRay { distance: 2.0, ..ray };
        assert_eq!(realtime_target(&further, band), v(2.0, 0.0, 1.0));
        assert!(PointerRay::new(Vec3::ZERO, Vec3::ZERO, 1.0).is_err());
        assert!(PointerRay::new(Vec3::ZERO, Vec3::X, 0.0).is_err());
    }

    fn random_path() -> impl Strategy<Value = FlightPath> {
        (
            proptest::collection::vec(
                ((-3.0..3.0f64, -3.0..3.0f64, 0.3..2.0f64), 0.05..1.0f64, prop_oneof![Just(0.0), 0.0..2.0f64]),
                1..8,
            ),
            any::<bool>(),
        )
            .prop_filter_map("duplicate waypoints", |(raw, looped)| {
                let wps = raw
                    .into_iter()
                    .map(|((x, y, z), s, h)| Waypoint::new(v(x, y, z), s).with_hold(h))
                    .collect();
                FlightPath::new("p", wps, looped).ok()
            })
    }

    proptest! {
        #[test]
        fn no_teleports(path in random_path(), t in 0.0..30.0f64, dt in 1e-4..0.5f64) {
            let v_max = path.waypoints().iter().map(|w| w.speed_to).fold(0.0, f64::max);
            let a = path.sample(t).position;
            let b = path.sample(t + dt).position;
            prop_assert!((b - a).norm() <= v_max * dt + 1e-9);
        }

        #[test]
        fn samples_lie_on_polyline(path in random_path(), frac in 0.0..=1.0f64) {
            let t = frac * path.duration();
            let p = path.sample(t).position;
            let poly = path.polyline();
            let d = if poly.len() == 1 {
                p.distance(poly[0])
            } else {
                poly.windows(2).map(|w| point_segment_distance(p, w[0], w[1])).fold(f64::INFINITY, f64::min)
            };
            prop_assert!(d < 1e-9);
        }
    }
}
