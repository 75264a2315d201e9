//! No-fly zones and the geofence.
//!
//! Targets are filtered before the controller sees them: a target whose
//! straight approach would enter a zone is pulled back to just before the
//! entry point, and a drone already inside a zone is sent to the nearest exit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::tracking::{HealthState, HealthThresholds, ObjectId, TrackingStore};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ZoneError {
    #[error("zone '{id}': {reason}")]
    Invalid { id: String, reason: String },
    #[error("zone file: {0}")]
    File(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { min: Vec3, max: Vec3 },
}

impl Shape {
    pub fn inflate(&self, margin: f64) -> Shape {
        match *self {
            Shape::Sphere { center, radius } => Shape::Sphere { center, radius: radius + margin },
            Shape::Box { min, max } => {
                let m = Vec3::new(margin, margin, margin);
                Shape::Box { min: min - m, max: max + m }
            }
        }
    }

    pub fn center(&self) -> Vec3 {
        match *self {
            Shape::Sphere { center, .. } => center,
            Shape::Box { min, max } => (min + max) * 0.5,
        }
    }

    /// Strict interior test; the boundary is allowed.
    pub fn contains_strict(&self, p: Vec3) -> bool {
        match *self {
            Shape::Sphere { center, radius } => (p - center).norm() < radius,
            Shape::Box { min, max } => {
                p.x > min.x && p.x < max.x && p.y > min.y && p.y < max.y && p.z > min.z && p.z < max.z
            }
        }
    }

    /// Signed distance to the surface, negative inside.
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Box { min, max } => {
                let c = (min + max) * 0.5;
                let h = (max - min) * 0.5;
                let q = Vec3::new((p.x - c.x).abs() - h.x, (p.y - c.y).abs() - h.y, (p.z - c.z).abs() - h.z);
                let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
        }
    }

    /// First parameter `s` in [0, 1] at which `a + s (b - a)` enters the
    /// open interior, or `None` if the segment never does.
    pub fn segment_entry(&self, a: Vec3, b: Vec3) -> Option<f64> {
        let d = b - a;
        match *self {
            Shape::Sphere { center, radius } => {
                let f = a - center;
                if f.norm() < radius {
                    return Some(0.0);
                }
                let qa = d.norm_squared();
                if qa == 0.0 {
                    return None;
                }
                let qb = 2.0 * f.dot(d);
                let qc = f.norm_squared() - radius * radius;
                let disc = qb * qb - 4.0 * qa * qc;
                if disc <= 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let (s0, s1) = ((-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa));
                // Outside start: the interior is (s0, s1); entering needs s0 < 1 and s1 > 0.
                (s0 < 1.0 && s1 > 0.0).then_some(s0.max(0.0))
            }
            Shape::Box { min, max } => {
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for (((a, d), mn), mx) in a.to_array().into_iter().zip(d.to_array()).zip(min.to_array()).zip(max.to_array()) {
                    if d == 0.0 {
                        if !(a > mn && a < mx) {
                            return None;
                        }
                    } else {
                        let (t0, t1) = ((mn - a) / d, (mx - a) / d);
                        lo = lo.max(t0.min(t1));
                        hi = hi.min(t0.max(t1));
                    }
                }
                let (lo, hi) = (lo.max(0.0), hi.min(1.0));
                (lo < hi).then_some(lo)
            }
        }
    }

    fn validate(&self, id: &str) -> Result<(), ZoneError> {
        let bad = |reason: &str| Err(ZoneError::Invalid { id: id.to_string(), reason: reason.into() });
        match *self {
            Shape::Sphere { center, radius } => {
                if !center.is_finite() {
                    return bad("center not finite");
                }
                if !(radius.is_finite() && radius > 0.0) {
                    return bad("radius must be > 0");
                }
            }
            Shape::Box { min, max } => {
                if !min.is_finite() || !max.is_finite() {
                    return bad("box corners not finite");
                }
                if !(min.x < max.x && min.y < max.y && min.z < max.z) {
                    return bad("box min must be < max on every axis");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ZoneSource {
    Static,
    /// Attached to a tracked object such as a user.
    Dynamic { tracked_object_id: ObjectId },
    /// Another drone, as seen by lower-priority drones.
    Drone { drone_id: u32 },
}

/// A positioned keep-out volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub shape: Shape,
    pub source: ZoneSource,
    pub margin: f64,
}

impl Zone {
    pub fn fixed(id: impl Into<String>, shape: Shape, margin: f64) -> Zone {
        Zone { id: id.into(), shape, source: ZoneSource::Static, margin }
    }

    pub fn inflated(&self) -> Shape {
        self.shape.inflate(self.margin)
    }

    pub fn is_moving(&self) -> bool {
        !matches!(self.source, ZoneSource::Static)
    }
}

pub fn is_violating(zone: &Zone, p: Vec3) -> bool {
    zone.inflated().contains_strict(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ZoneDefKind {
    Static { shape: Shape },
    Dynamic { tracked_object_id: ObjectId, radius: f64 },
}

/// Zone as written in zone files: static shapes or bubbles around tracked objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneDef {
    pub id: String,
    #[serde(flatten)]
    pub kind: ZoneDefKind,
    #[serde(default)]
    pub margin: f64,
}

impl ZoneDef {
    pub fn validate(&self) -> Result<(), ZoneError> {
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(ZoneError::Invalid { id: self.id.clone(), reason: "margin must be >= 0".into() });
        }
        match &self.kind {
            ZoneDefKind::Static { shape } => shape.validate(&self.id),
            ZoneDefKind::Dynamic { radius, .. } => {
                Shape::Sphere { center: Vec3::ZERO, radius: *radius }.validate(&self.id)
            }
        }
    }

    pub fn static_zone(&self) -> Option<Zone> {
        match &self.kind {
            ZoneDefKind::Static { shape } => Some(Zone::fixed(self.id.clone(), *shape, self.margin)),
            ZoneDefKind::Dynamic { .. } => None,
        }
    }
}

pub fn zones_from_json(text: &str) -> Result<Vec<ZoneDef>, ZoneError> {
    let defs: Vec<ZoneDef> = serde_json::from_str(text).map_err(|e| ZoneError::File(e.to_string()))?;
    for d in &defs {
        d.validate()?;
    }
    Ok(defs)
}

/// The permitted flight volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geofence {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Geofence {
    fn default() -> Self {
        Self { min: Vec3::new(-3.0, -3.0, 0.0), max: Vec3::new(3.0, 3.0, 2.5) }
    }
}

impl Geofence {
    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y && p.z >= self.min.z && p.z <= self.max.z
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        p.component_max(self.min).component_min(self.max)
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// The fence shrunk by `d` on every side (never past its center).
    pub fn inset(&self, d: f64) -> Geofence {
        let c = self.center();
        let shrink = Vec3::new(d, d, d);
        Geofence { min: (self.min + shrink).component_min(c), max: (self.max - shrink).component_max(c) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyConfig {
    /// Distance kept before a zone entry point and beyond an exit point.
    pub standoff: f64,
    /// Extra radius for dynamic zones whose tracking is stale or lost.
    pub stale_inflation: f64,
    /// Moving zones grow by their speed times this horizon, in seconds.
    pub motion_lead: f64,
    /// Stop in place rather than divert when a dynamic zone blocks the way.
    pub hold_instead: bool,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self { standoff: 0.05, stale_inflation: 0.1, motion_lead: 0.5, hold_instead: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Unchanged,
    Clamped,
    Retreat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Filtered {
    pub target: Vec3,
    pub verdict: Verdict,
    /// Index of the zone that clamped or forced the retreat.
    pub zone: Option<usize>,
}

const EXIT_AXES: [Vec3; 6] = [
    Vec3::X,
    Vec3::Y,
    Vec3::Z,
    Vec3::new(-1.0, 0.0, 0.0),
    Vec3::new(0.0, -1.0, 0.0),
    Vec3::new(0.0, 0.0, -1.0),
];

/// Exit points of `shape` from `p` with their travel distance, nearest first;
/// ties keep +x, +y, +z, -x, -y, -z order.
fn exit_candidates(shape: &Shape, p: Vec3, standoff: f64) -> Vec<(f64, Vec3)> {
    let mut out: Vec<(f64, Vec3)> = Vec::with_capacity(7);
    match *shape {
        Shape::Sphere { center, radius } => {
            let reach = radius + standoff;
            if let Some(dir) = (p - center).normalized() {
                out.push((0.0, center + dir * reach));
            }
            for axis in EXIT_AXES {
                // Point on the ray from p along axis at distance `reach` from the center.
                let f = p - center;
                let b = f.dot(axis);
                let s = -b + (b * b - f.norm_squared() + reach * reach).max(0.0).sqrt();
                out.push((s, p + axis * s));
            }
            if let Some(first) = out.first_mut() {
                first.0 = first.1.distance(p);
            }
        }
        Shape::Box { min, max } => {
            let (pa, mn, mx) = (p.to_array(), min.to_array(), max.to_array());
            for (k, axis) in EXIT_AXES.iter().enumerate() {
                let i = k % 3;
                let mut q = pa;
                q[i] = if k < 3 { mx[i] + standoff } else { mn[i] - standoff };
                let q = Vec3::from_array(q);
                out.push(((q - p).dot(*axis).abs(), q));
            }
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Filters a target position against zones and the fence.
pub fn filter_target(target: Vec3, current: Vec3, zones: &[Zone], fence: &Geofence, cfg: &SafetyConfig) -> Filtered {
    if !fence.contains(current) {
        let back = fence.inset(cfg.standoff).clamp(current);
        return Filtered { target: back, verdict: Verdict::Retreat, zone: None };
    }
    let inflated: Vec<Shape> = zones.iter().map(Zone::inflated).collect();
    let safe = |q: Vec3| fence.contains(q) && inflated.iter().all(|s| !s.contains_strict(q));

    if let Some(first) = inflated.iter().position(|s| s.contains_strict(current)) {
        let mut fallback = None;
        for (i, shape) in inflated.iter().enumerate().filter(|(_, s)| s.contains_strict(current)) {
            for (d, q) in exit_candidates(shape, current, cfg.standoff) {
                // Rounding noise must not break the axis tie order.
                if safe(q) && fallback.is_none_or(|(best, _, _): (f64, Vec3, usize)| d < best - 1e-9) {
                    fallback = Some((d, q, i));
                }
            }
        }
        let (target, zone) = match fallback {
            Some((_, q, i)) => (q, i),
            // Boxed in: head for the nearest exit of the first violated zone anyway.
            None => (fence.clamp(exit_candidates(&inflated[first], current, cfg.standoff)[0].1), first),
        };
        return Filtered { target, verdict: Verdict::Retreat, zone: Some(zone) };
    }

    let fenced = fence.clamp(target);
    let mut verdict = if fenced != target { Verdict::Clamped } else { Verdict::Unchanged };
    let entry = inflated
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.segment_entry(current, fenced).map(|e| (e, i)))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let Some((s, zone)) = entry else {
        return Filtered { target: fenced, verdict, zone: None };
    };
    verdict = Verdict::Clamped;
    let d = fenced - current;
    let len = d.norm();
    let s_safe = if len > 0.0 { (s - cfg.standoff / len).max(0.0) } else { 0.0 };
    let target = if cfg.hold_instead && matches!(zones[zone].source, ZoneSource::Dynamic { .. }) {
        current
    } else {
        current + d * s_safe
    };
    Filtered { target, verdict, zone: Some(zone) }
}

/// A static problem with a planned path.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathIssue {
    OutsideFence { waypoint: usize, position: Vec3 },
    WaypointInZone { waypoint: usize, zone: String },
    LegCrossesZone { from: usize, to: usize, zone: String, entry: Vec3 },
}

impl std::fmt::Display for PathIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PathIssue::OutsideFence { waypoint, position } => {
                write!(f, "waypoint {waypoint} at ({:.3}, {:.3}, {:.3}) is outside the fence", position.x, position.y, position.z)
            }
            PathIssue::WaypointInZone { waypoint, zone } => write!(f, "waypoint {waypoint} is inside zone {zone:?}"),
            PathIssue::LegCrossesZone { from, to, zone, entry } => write!(
                f,
                "leg {from}->{to} enters zone {zone:?} at ({:.3}, {:.3}, {:.3})",
                entry.x, entry.y, entry.z
            ),
        }
    }
}

/// Checks waypoints against the fence and inflated zones, and every leg
/// (including the closing leg of a loop) for zone crossings.
pub fn check_path(points: &[Vec3], looped: bool, zones: &[Zone], fence: &Geofence) -> Vec<PathIssue> {
    let mut issues = Vec::new();
    let inflated: Vec<Shape> = zones.iter().map(Zone::inflated).collect();
    for (i, &p) in points.iter().enumerate() {
        if !fence.contains(p) {
            issues.push(PathIssue::OutsideFence { waypoint: i, position: p });
        }
        for (z, shape) in zones.iter().zip(&inflated) {
            if shape.contains_strict(p) {
                issues.push(PathIssue::WaypointInZone { waypoint: i, zone: z.id.clone() });
            }
        }
    }
    let mut legs: Vec<(usize, usize)> = (1..points.len()).map(|i| (i - 1, i)).collect();
    if looped && points.len() > 1 {
        legs.push((points.len() - 1, 0));
    }
    for (a, b) in legs {
        let (pa, pb) = (points[a], points[b]);
        for (z, shape) in zones.iter().zip(&inflated) {
            // Legs that start or end inside a zone are already reported per waypoint.
            if shape.contains_strict(pa) || shape.contains_strict(pb) {
                continue;
            }
            if let Some(s) = shape.segment_entry(pa, pb) {
                issues.push(PathIssue::LegCrossesZone { from: a, to: b, zone: z.id.clone(), entry: pa.lerp(pb, s) });
            }
        }
    }
    issues
}

/// Zones for this tick plus ids of dynamic zones whose tracking is lost.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActiveZones {
    pub zones: Vec<Zone>,
    pub degraded: Vec<String>,
}

/// Positions dynamic zones at their objects' smoothed positions; stale or
/// lost tracks are inflated, and lost or missing tracks flag degraded safety.
pub fn active_zones(defs: &[ZoneDef], tracking: &TrackingStore, now: f64, thresholds: HealthThresholds, cfg: &SafetyConfig) -> ActiveZones {
    let mut out = ActiveZones::default();
    for def in defs {
        match &def.kind {
            ZoneDefKind::Static { shape } => out.zones.push(Zone::fixed(def.id.clone(), *shape, def.margin)),
            ZoneDefKind::Dynamic { tracked_object_id, radius } => {
                let Some(obj) = tracking.get(*tracked_object_id) else {
                    out.degraded.push(def.id.clone());
                    continue;
                };
                let health = obj.health(now, thresholds);
                let mut r = *radius + obj.velocity.norm() * cfg.motion_lead;
                if health.state != HealthState::Fresh {
                    r += cfg.stale_inflation;
                }
                if health.state == HealthState::Lost {
                    out.degraded.push(def.id.clone());
                }
                out.zones.push(Zone {
                    id: def.id.clone(),
                    shape: Shape::Sphere { center: obj.smoothed.position, radius: r },
                    source: ZoneSource::Dynamic { tracked_object_id: *tracked_object_id },
                    margin: def.margin,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Quat};
    use crate::path::simplify::point_segment_distance;
    use crate::tracking::{ObjectKind, SmoothingConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn sphere(c: Vec3, r: f64, margin: f64) -> Zone {
        Zone::fixed("s", Shape::Sphere { center: c, radius: r }, margin)
    }

    fn big_fence() -> Geofence {
        Geofence { min: v(-5.0, -5.0, 0.0), max: v(5.0, 5.0, 3.0) }
    }

    #[test]
    fn violation_examples() {
        let user = sphere(v(0.0, 0.0, 1.0), 0.2, 0.0);
        assert!(is_violating(&user, v(0.0, 0.0, 1.0)));
        assert!(!is_violating(&user, v(0.2, 0.0, 1.0)));
        let table = Zone::fixed("t", Shape::Box { min: Vec3::ZERO, max: v(1.0, 1.0, 1.0) }, 0.1);
        assert!(is_violating(&table, v(1.05, 0.5, 0.5)));
        assert!(!is_violating(&table, v(1.1, 0.5, 0.5)));
    }

    #[test]
    fn no_zones_is_identity() {
        let f = filter_target(v(1.0, 1.0, 1.0), v(0.0, 0.0, 1.0), &[], &big_fence(), &SafetyConfig::default());
        assert_eq!(f.verdict, Verdict::Unchanged);
        assert_eq!(f.target, v(1.0, 1.0, 1.0));
    }

    // Line-sphere entry along the x axis solved by hand: x = c + r + m.
    #[test]
    fn clamps_before_sphere() {
        let z = sphere(v(0.0, 0.0, 1.0), 0.5, 0.1);
        let f = filter_target(v(0.0, 0.0, 1.0), v(2.0, 0.0, 1.0), &[z], &big_fence(), &SafetyConfig::default());
        assert_eq!(f.verdict, Verdict::Clamped);
        assert_abs_diff_eq!(f.target.x, 0.65, epsilon = 1e-12);
        assert_abs_diff_eq!(f.target.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn retreats_from_center_along_x() {
        let z = sphere(v(0.0, 0.0, 1.0), 0.5, 0.1);
        let f = filter_target(v(-2.0, 0.0, 1.0), v(0.0, 0.0, 1.0), &[z], &big_fence(), &SafetyConfig::default());
        assert_eq!(f.verdict, Verdict::Retreat);
        assert!((f.target - v(0.65, 0.0, 1.0)).norm() < 1e-12, "{:?}", f);
    }

    #[test]
    fn retreat_is_radial_off_center() {
        let z = sphere(v(0.0, 0.0, 1.0), 0.5, 0.0);
        let f = filter_target(v(0.0, 0.0, 1.0), v(0.0, 0.1, 1.0), &[z], &big_fence(), &SafetyConfig::default());
        assert!((f.target - v(0.0, 0.55, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn retreat_tie_break_skips_blocked_axis() {
        // +x exit leaves the fence, so +y is next.
        let fence = Geofence { min: v(-5.0, -5.0, 0.0), max: v(0.3, 5.0, 3.0) };
        let z = sphere(v(0.0, 0.0, 1.0), 0.5, 0.0);
        let f = filter_target(Vec3::ZERO, v(0.0, 0.0, 1.0), &[z], &fence, &SafetyConfig::default());
        assert!((f.target - v(0.0, 0.55, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn box_entry_and_exit() {
        let b = Zone::fixed("b", Shape::Box { min: v(1.0, -1.0, 0.0), max: v(2.0, 1.0, 2.0) }, 0.0);
        let f = filter_target(v(3.0, 0.0, 1.0), v(0.0, 0.0, 1.0), &[b.clone()], &big_fence(), &SafetyConfig::default());
        assert!((f.target - v(0.95, 0.0, 1.0)).norm() < 1e-12);
        let f = filter_target(v(0.0, 0.0, 1.0), v(1.1, 0.0, 1.0), &[b], &big_fence(), &SafetyConfig::default());
        assert_eq!(f.verdict, Verdict::Retreat);
        assert!((f.target - v(0.95, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn grazing_and_boundary_segments() {
        let s = Shape::Sphere { center: Vec3::ZERO, radius: 1.0 };
        assert_eq!(s.segment_entry(v(-2.0, 1.0, 0.0), v(2.0, 1.0, 0.0)), None);
        assert_eq!(s.segment_entry(v(1.0, 0.0, 0.0), v(2.0, 0.0, 0.0)), None);
        assert_eq!(s.segment_entry(v(1.0, 0.0, 0.0), v(0.0, 0.0, 0.0)), Some(0.0));
        let b = Shape::Box { min: Vec3::ZERO, max: v(1.0, 1.0, 1.0) };
        assert_eq!(b.segment_entry(v(-1.0, 1.0, 0.5), v(2.0, 1.0, 0.5)), None);
        assert_abs_diff_eq!(b.segment_entry(v(-1.0, 0.5, 0.5), v(1.0, 0.5, 0.5)).unwrap(), 0.5);
    }

    #[test]
    fn fence_clamps_and_recovers() {
        let fence = Geofence { min: v(-1.0, -1.0, 0.0), max: v(1.0, 1.0, 2.0) };
        let f = filter_target(v(5.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 1.0), &[], &fence, &SafetyConfig::default());
        assert_eq!(f.verdict, Verdict::Clamped);
        assert_eq!(f.target, v(1.0, 0.0, 1.0));
        let f = filter_target(v(0.0, 0.0, 1.0), v(1.5, 0.0, 1.0), &[], &fence, &SafetyConfig::default());
        assert_eq!(f.verdict, Verdict::Retreat);
        assert_eq!(f.target, v(0.95, 0.0, 1.0));
    }

    #[test]
    fn hold_instead_for_dynamic_zones() {
        let mut z = sphere(v(0.0, 0.0, 1.0), 0.2, 0.0);
        z.source = ZoneSource::Dynamic { tracked_object_id: 9 };
        let cfg = SafetyConfig { hold_instead: true, ..Default::default() };
        let f = filter_target(v(-2.0, 0.0, 1.0), v(2.0, 0.0, 1.0), &[z], &big_fence(), &cfg);
        assert_eq!(f.verdict, Verdict::Clamped);
        assert_eq!(f.target, v(2.0, 0.0, 1.0));
    }

    fn store_with_user(pos: Vec3, t: f64) -> TrackingStore {
        let mut s = TrackingStore::new(SmoothingConfig::default());
        s.register(7, ObjectKind::User);
        s.ingest(7, Pose::new(pos, Quat::IDENTITY, t), t);
        s
    }

    #[test]
    fn dynamic_zone_positioning() {
        let defs = vec![ZoneDef { id: "user".into(), kind: ZoneDefKind::Dynamic { tracked_object_id: 7, radius: 0.2 }, margin: 0.0 }];
        let store = store_with_user(v(1.0, 1.0, 1.0), 0.0);
        let th = HealthThresholds::default();
        let cfg = SafetyConfig::default();
        let fresh = active_zones(&defs, &store, 0.05, th, &cfg);
        assert_eq!(fresh.zones[0].shape, Shape::Sphere { center: v(1.0, 1.0, 1.0), radius: 0.2 });
        assert!(fresh.degraded.is_empty());
        let stale = active_zones(&defs, &store, 0.15, th, &cfg);
        let Shape::Sphere { radius, .. } = stale.zones[0].shape else { panic!() };
        assert_abs_diff_eq!(radius, 0.3, epsilon = 1e-12);
        let lost = active_zones(&defs, &store, 0.5, th, &cfg);
        assert_eq!(lost.zones[0].shape.center(), v(1.0, 1.0, 1.0));
        assert_eq!(lost.degraded, vec!["user".to_string()]);
        let missing = active_zones(&defs, &TrackingStore::default(), 0.0, th, &cfg);
        assert!(missing.zones.is_empty());
        assert_eq!(missing.degraded.len(), 1);
    }

    #[test]
    fn static_zones_pass_through() {
        let defs = vec![ZoneDef { id: "p".into(), kind: ZoneDefKind::Static { shape: Shape::Sphere { center: Vec3::ZERO, radius: 0.5 } }, margin: 0.1 }];
        let a = active_zones(&defs, &TrackingStore::default(), 0.0, HealthThresholds::default(), &SafetyConfig::default());
        assert_eq!(a.zones, vec![defs[0].static_zone().unwrap()]);
    }

    #[test]
    fn zone_file_parsing() {
        let defs = zones_from_json(
            r#"[{"id":"pillar","kind":"static","shape":{"type":"sphere","center":{"x":0,"y":0,"z":1},"radius":0.5},"margin":0.1},
                {"id":"user","kind":"dynamic","tracked_object_id":7,"radius":0.2}]"#,
        )
        .unwrap();
        assert_eq!(defs.len(), 2);
        assert_eq!(defs[1].margin, 0.0);
        assert!(zones_from_json(r#"[{"id":"b","kind":"static","shape":{"type":"box","min":{"x":1,"y":0,"z":0},"max":{"x":0,"y":1,"z":1}}}]"#).is_err());
        assert!(zones_from_json(r#"[{"id":"u","kind":"dynamic","tracked_object_id":7,"radius":-1}]"#).is_err());
    }

    #[test]
    fn signed_distance_box() {
        let b = Shape::Box { min: Vec3::ZERO, max: v(1.0, 1.0, 1.0) };
        assert_abs_diff_eq!(b.signed_distance(v(0.5, 0.5, 0.5)), -0.5);
        assert_abs_diff_eq!(b.signed_distance(v(2.0, 0.5, 0.5)), 1.0);
    }

    fn zone_strategy() -> impl Strategy<Value = Zone> {
        prop_oneof![
            ((-3.0..3.0f64, -3.0..3.0f64, 0.0..2.5f64), 0.05..0.8f64, 0.0..0.2f64)
                .prop_map(|((x, y, z), r, m)| sphere(v(x, y, z), r, m)),
            ((-3.0..3.0f64, -3.0..3.0f64, 0.0..2.5f64), (0.05..1.0f64, 0.05..1.0f64, 0.05..1.0f64), 0.0..0.2f64)
                .prop_map(|((x, y, z), (a, b, c), m)| Zone::fixed("b", Shape::Box { min: v(x, y, z), max: v(x + a, y + b, z + c) }, m)),
        ]
    }

    fn point() -> impl Strategy<Value = Vec3> {
        (-6.0..6.0f64, -6.0..6.0f64, -1.0..4.0f64).prop_map(|(x, y, z)| v(x, y, z))
    }

    fn fence() -> Geofence {
        Geofence { min: v(-4.0, -4.0, 0.0), max: v(4.0, 4.0, 3.0) }
    }

    #[test]
    fn path_check_reports_offenders() {
        let zones = [sphere(v(0.0, 0.0, 1.0), 0.5, 0.1)];
        let fence = Geofence::default();
        let pts = [v(-2.0, 0.0, 1.0), v(2.0, 0.0, 1.0), v(2.0, 2.0, 1.0), v(0.1, 0.0, 1.0), v(5.0, 0.0, 1.0)];
        let issues = check_path(&pts, false, &zones, &fence);
        assert!(matches!(&issues[0], PathIssue::WaypointInZone { waypoint: 3, .. }));
        assert!(matches!(&issues[1], PathIssue::OutsideFence { waypoint: 4, .. }));
        let PathIssue::LegCrossesZone { from: 0, to: 1, entry, .. } = &issues[2] else { panic!("{issues:?}") };
        assert!((entry.x + 0.6).abs() < 1e-9);
        assert_eq!(issues.len(), 3);
        assert!(issues[2].to_string().starts_with("leg 0->1 enters zone"));
        assert!(check_path(&pts[1..3], true, &zones, &fence).is_empty());
    }

    proptest! {
        #[test]
        fn safe_target_is_safe(zones in proptest::collection::vec(zone_strategy(), 0..5), target in point(), current in point()) {
            let fence = fence();
            let current = fence.clamp(current);
            prop_assume!(zones.iter().all(|z| !is_violating(z, current)));
            let f = filter_target(target, current, &zones, &fence, &SafetyConfig::default());
            prop_assert!(fence.contains(f.target));
            for z in &zones {
                prop_assert!(!is_violating(z, f.target), "target {:?} inside {:?}", f.target, z);
                prop_assert!(z.inflated().segment_entry(current, f.target).is_none());
            }
            // Idempotence.
            let again = filter_target(f.target, current, &zones, &fence, &SafetyConfig::default());
            prop_assert_eq!(again.verdict, Verdict::Unchanged);
            prop_assert_eq!(again.target, f.target);
        }

        #[test]
        fn retreat_leaves_violated_zone(zone in zone_strategy(), (dx, dy, dz) in (-0.02..0.02f64, -0.02..0.02f64, -0.02..0.02f64)) {
            let fence = fence();
            let current = fence.clamp(zone.shape.center() + v(dx, dy, dz));
            prop_assume!(is_violating(&zone, current));
            let f = filter_target(current, current, &[zone.clone()], &fence, &SafetyConfig::default());
            prop_assert_eq!(f.verdict, Verdict::Retreat);
            prop_assert!(fence.contains(f.target));
            if fence.contains(exit_candidates(&zone.inflated(), current, 0.05)[0].1) {
                prop_assert!(!is_violating(&zone, f.target));
            }
        }

        #[test]
        fn leg_check_agrees_with_filter(zone in zone_strategy(), a in point(), b in point()) {
            let fence = Geofence { min: v(-7.0, -7.0, -2.0), max: v(7.0, 7.0, 5.0) };
            prop_assume!(!is_violating(&zone, a) && !is_violating(&zone, b));
            let crosses = !check_path(&[a, b], false, &[zone.clone()], &fence).is_empty();
            let f = filter_target(b, a, &[zone], &fence, &SafetyConfig::default());
            prop_assert_eq!(crosses, f.verdict == Verdict::Clamped);
        }

        #[test]
        fn adding_a_zone_never_moves_closer(
            zones in proptest::collection::vec(zone_strategy(), 0..4),
            extra in zone_strategy(),
            target in point(),
            current in point(),
        ) {
            let fence = fence();
            let current = fence.clamp(current);
            prop_assume!(zones.iter().chain(std::iter::once(&extra)).all(|z| !is_violating(z, current)));
            let cfg = SafetyConfig::default();
            let before = filter_target(target, current, &zones, &fence, &cfg);
            let mut more = zones.clone();
            more.push(extra);
            let after = filter_target(target, current, &more, &fence, &cfg);
            // The extra constraint only shortens the advance along the same approach line.
            let fenced = fence.clamp(target);
            prop_assert!(after.target.distance(current) <= before.target.distance(current) + 1e-9);
            prop_assert!(point_segment_distance(after.target, current, fenced) < 1e-9);
            // Before a sphere entry the distance to its center shrinks monotonically.
            for z in &zones {
                if let Shape::Sphere { center, .. } = z.inflated() {
                    if z.inflated().segment_entry(current, fenced).is_some() {
                        prop_assert!(after.target.distance(center) >= before.target.distance(center) - 1e-9);
                    }
                }
            }
        }
    }
}
