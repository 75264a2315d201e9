use std::collections::VecDeque;

use super::simplify::rdp;
use super::{FlightPath, PathError, Waypoint, DUPLICATE_TOLERANCE};
use crate::geometry::{Pose, Vec3};

/// Oldest points are evicted past this many.
pub const RAW_TRACE_CAPACITY: usize = 10_000;

/// Captures a controller trace for programming by demonstration.
#[derive(Debug, Clone)]
pub struct Recorder {
    trace: VecDeque<(f64, Vec3)>,
    capacity: usize,
    dropped: u64,
}

impl Default for Recorder {
    fn default() -> Self {
        Self::new()
    }
}

impl Recorder {
    pub fn new() -> Self {
        Self::with_capacity(RAW_TRACE_CAPACITY)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self { trace: VecDeque::new(), capacity: capacity.max(2), dropped: 0 }
    }

    /// Appends the pose position. Non-increasing timestamps are dropped.
    pub fn record(&mut self, pose: &Pose) -> bool {
        if let Some(&(t, _)) = self.trace.back() {
            if pose.timestamp <= t {
                self.dropped += 1;
                return false;
            }
        }
        if !pose.position.is_finite() {
            self.dropped += 1;
            return false;
        }
        if self.trace.len() == self.capacity {
            self.trace.pop_front();
        }
        self.trace.push_back((pose.timestamp, pose.position));
        true
    }

    pub fn len(&self) -> usize {
        self.trace.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trace.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn raw_trace(&self) -> Vec<Vec3> {
        self.trace.iter().map(|&(_, p)| p).collect()
    }

    /// Simplifies the trace into a path of auto-yaw, zero-hold waypoints.
    pub fn finish(&self, id: &str, epsilon: f64, default_speed: f64) -> Result<FlightPath, PathError> {
        if self.trace.len() < 2 {
            return Err(PathError::RecordingTooShort(self.trace.len()));
        }
        let mut vertices = rdp(&self.raw_trace(), epsilon);
        vertices.dedup_by(|b, a| a.distance(*b) < DUPLICATE_TOLERANCE);
        let waypoints = vertices.into_iter().map(|p| Waypoint::new(p, default_speed)).collect();
        FlightPath::new(id, waypoints, false)
    }
}
