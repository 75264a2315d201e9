//! Cascaded position controller.
//!
//! Outer loop: position error → velocity setpoint (P, norm-limited to `v_max`).
//! Inner loop: per-axis velocity PID → desired acceleration, mapped to
//! small-angle tilt and throttle and finally to RC channel values.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotate_z, wrap_angle, yaw_of, Pose, Vec3};
use crate::msp::{RcCommand, RC_MAX, RC_MID, RC_MIN};

pub const GRAVITY: f64 = 9.81;

static BUILTIN_PRESETS: &str = include_str!("../config/presets.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("invalid config {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("preset file: {0}")]
    PresetFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Integrator clamp, in output units.
    pub i_max: f64,
}

impl PidGains {
    pub fn validate(&self, field: &str) -> Result<(), ControlError> {
        let bad = |reason: &str| ControlError::InvalidConfig { field: field.to_string(), reason: reason.into() };
        if ![self.kp, self.ki, self.kd, self.i_max].iter().all(|v| v.is_finite()) {
            return Err(bad("gains must be finite"));
        }
        if self.kp < 0.0 || self.ki < 0.0 || self.kd < 0.0 {
            return Err(bad("gains must be >= 0"));
        }
        if self.i_max <= 0.0 {
            return Err(bad("i_max must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_measurement: Option<f64>,
}

/// One PID update with a clamped integrator and derivative on measurement.
pub fn pid_step(
    gains: &PidGains,
    state: PidState,
    error: f64,
    measurement: f64,
    dt: f64,
) -> Result<(f64, PidState), ControlError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(ControlError::InvalidArgument("dt must be > 0"));
    }
    let integral = (state.integral + error * dt * gains.ki).clamp(-gains.i_max, gains.i_max);
    let derivative = match state.prev_measurement {
        Some(prev) => -gains.kd * (measurement - prev) / dt,
        None => 0.0,
    };
    let output = gains.kp * error + integral + derivative;
    Ok((output, PidState { integral, prev_measurement: Some(measurement) }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlConfig {
    pub preset_name: String,
    pub position_kp: Vec3,
    /// Velocity-loop gains for x, y, z.
    pub velocity_gains: [PidGains; 3],
    pub yaw_kp: f64,
    pub v_max: f64,
    /// Radians.
    pub tilt_max: f64,
    pub hover_throttle: f64,
    /// Throttle channel units per m/s² of vertical acceleration.
    pub throttle_gain: f64,
}

impl ControlConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |field: &str, reason: &str| Err(ControlError::InvalidConfig { field: field.into(), reason: reason.into() });
        let kp = self.position_kp;
        if !kp.is_finite() || kp.x < 0.0 || kp.y < 0.0 || kp.z < 0.0 {
            return bad("position_kp", "must be finite and >= 0");
        }
        for (axis, g) in ["x", "y", "z"].iter().zip(&self.velocity_gains) {
            g.validate(&format!("velocity_gains.{axis}"))?;
        }
        if !(self.yaw_kp.is_finite() && self.yaw_kp >= 0.0) {
            return bad("yaw_kp", "must be finite and >= 0");
        }
        if !(self.v_max.is_finite() && self.v_max > 0.0) {
            return bad("v_max", "must be > 0");
        }
        if !(self.tilt_max > 0.0 && self.tilt_max < FRAC_PI_4) {
            return bad("tilt_max", "must be in (0, 45) degrees");
        }
        if !(self.hover_throttle > RC_MIN as f64 && self.hover_throttle < RC_MAX as f64) {
            return bad("hover_throttle", "must be strictly between 1000 and 2000");
        }
        if !(self.throttle_gain.is_finite() && self.throttle_gain > 0.0) {
            return bad("throttle_gain", "must be > 0");
        }
        Ok(())
    }

    pub fn builtin(name: &str) -> Result<ControlConfig, ControlError> {
        let mut presets = PresetTable::builtin();
        presets.0.remove(name).ok_or_else(|| ControlError::UnknownPreset(name.to_string()))
    }

    pub fn default_preset() -> ControlConfig {
        Self::builtin("default").expect("builtin presets include 'default'")
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct AxisKp {
    x: f64,
    y: f64,
    z: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct AxisGains {
    x: PidGains,
    y: PidGains,
    z: PidGains,
}

/// On-disk preset shape; tilt is in degrees.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PresetDoc {
    position_kp: AxisKp,
    velocity_gains: AxisGains,
    yaw_kp: f64,
    v_max: f64,
    tilt_max_deg: f64,
    hover_throttle: f64,
    throttle_gain: f64,
}

impl PresetDoc {
    fn into_config(self, name: &str) -> ControlConfig {
        ControlConfig {
            preset_name: name.to_string(),
            position_kp: Vec3::new(self.position_kp.x, self.position_kp.y, self.position_kp.z),
            velocity_gains: [self.velocity_gains.x, self.velocity_gains.y, self.velocity_gains.z],
            yaw_kp: self.yaw_kp,
            v_max: self.v_max,
            tilt_max: self.tilt_max_deg.to_radians(),
            hover_throttle: self.hover_throttle,
            throttle_gain: self.throttle_gain,
        }
    }

    fn from_config(c: &ControlConfig) -> Self {
        let [x, y, z] = c.velocity_gains;
        PresetDoc {
            position_kp: AxisKp { x: c.position_kp.x, y: c.position_kp.y, z: c.position_kp.z },
            velocity_gains: AxisGains { x, y, z },
            yaw_kp: c.yaw_kp,
            v_max: c.v_max,
            tilt_max_deg: c.tilt_max.to_degrees(),
            hover_throttle: c.hover_throttle,
            throttle_gain: c.throttle_gain,
        }
    }
}

/// Named controller presets, loaded from a JSON map of name → settings.
#[derive(Debug, Clone, Default)]
pub struct PresetTable(pub BTreeMap<String, ControlConfig>);

impl PresetTable {
    pub fn from_json(text: &str) -> Result<PresetTable, ControlError> {
        let docs: BTreeMap<String, PresetDoc> =
            serde_json::from_str(text).map_err(|e| ControlError::PresetFile(e.to_string()))?;
        let mut out = BTreeMap::new();
        for (name, doc) in docs {
            let cfg = doc.into_config(&name);
            cfg.validate().map_err(|e| ControlError::PresetFile(format!("preset '{name}': {e}")))?;
            out.insert(name, cfg);
        }
        Ok(PresetTable(out))
    }

    pub fn builtin() -> PresetTable {
        Self::from_json(BUILTIN_PRESETS).expect("builtin presets are valid")
    }

    pub fn get(&self, name: &str) -> Result<ControlConfig, ControlError> {
        self.0.get(name).cloned().ok_or_else(|| ControlError::UnknownPreset(name.to_string()))
    }

    pub fn to_json(&self) -> String {
        let docs: BTreeMap<&String, PresetDoc> = self.0.iter().map(|(k, v)| (k, PresetDoc::from_config(v))).collect();
        serde_json::to_string_pretty(&docs).expect("presets serialize")
    }
}

/// Manual gain override as received from operators; unset fields keep the
/// current value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainOverride {
    pub preset: Option<String>,
    pub position_kp: Option<[f64; 3]>,
    pub velocity_kp: Option<[f64; 3]>,
    pub velocity_ki: Option<[f64; 3]>,
    pub velocity_kd: Option<[f64; 3]>,
    pub yaw_kp: Option<f64>,
    pub v_max: Option<f64>,
}

impl GainOverride {
    pub fn apply(&self, base: &ControlConfig, presets: &PresetTable) -> Result<ControlConfig, ControlError> {
        let mut cfg = match &self.preset {
            Some(name) => presets.get(name)?,
            None => base.clone(),
        };
        if let Some(k) = self.position_kp {
            cfg.position_kp = Vec3::from_array(k);
        }
        for (i, g) in cfg.velocity_gains.iter_mut().enumerate() {
            if let Some(k) = self.velocity_kp {
                g.kp = k[i];
            }
            if let Some(k) = self.velocity_ki {
                g.ki = k[i];
            }
            if let Some(k) = self.velocity_kd {
                g.kd = k[i];
            }
        }
        if let Some(k) = self.yaw_kp {
            cfg.yaw_kp = k;
        }
        if let Some(v) = self.v_max {
            cfg.v_max = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControllerState {
    pub velocity_pid: [PidState; 3],
}

/// Internals of one control update, kept for logging and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub rc: RcCommand,
    pub velocity_setpoint: Vec3,
    pub acceleration: Vec3,
}

fn channel(v: f64) -> u16 {
    v.round().clamp(RC_MIN as f64, RC_MAX as f64) as u16
}

pub fn control_update(
    cfg: &ControlConfig,
    state: &ControllerState,
    drone_pose: &Pose,
    drone_velocity: Vec3,
    target_position: Vec3,
    target_yaw: f64,
    dt: f64,
) -> Result<(ControlOutput, ControllerState), ControlError> {
    if !drone_pose.position.is_finite() || !drone_velocity.is_finite() || !target_position.is_finite() || !target_yaw.is_finite() {
        return Err(ControlError::InvalidArgument("non-finite controller input"));
    }
    let v_set = (target_position - drone_pose.position).hadamard(cfg.position_kp).clamp_norm(cfg.v_max);

    let err = (v_set - drone_velocity).to_array();
    let meas = drone_velocity.to_array();
    let mut accel = [0.0; 3];
    let mut next = *state;
    for axis in 0..3 {
        let (a, s) = pid_step(&cfg.velocity_gains[axis], state.velocity_pid[axis], err[axis], meas[axis], dt)?;
        accel[axis] = a;
        next.velocity_pid[axis] = s;
    }
    let accel = Vec3::from_array(accel);

    let yaw = yaw_of(drone_pose.orientation).unwrap_or(0.0);
    let body = rotate_z(accel, -yaw);
    let pitch = (body.x / GRAVITY).clamp(-cfg.tilt_max, cfg.tilt_max);
    let roll = (-body.y / GRAVITY).clamp(-cfg.tilt_max, cfg.tilt_max);
    let half = (RC_MAX - RC_MID) as f64;
    let mid = RC_MID as f64;
    let yaw_cmd = (cfg.yaw_kp * wrap_angle(target_yaw - yaw)).clamp(-1.0, 1.0);

    let rc = RcCommand::sticks(
        channel(mid + roll / cfg.tilt_max * half),
        channel(mid + pitch / cfg.tilt_max * half),
        channel(cfg.hover_throttle + cfg.throttle_gain * accel.z),
        channel(mid + yaw_cmd * half),
        true,
    );
    Ok((ControlOutput { rc, velocity_setpoint: v_set, acceleration: accel }, next))
}
