//! The operator-facing service: line-JSON over TCP (or a websocket on the
//! same port), bridged onto one fixed-rate control loop.

pub mod protocol;
mod service;

use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlError, PresetTable};
use crate::orchestrator::{DroneSpec, OrchestratorConfig, OrchestratorError};
use crate::safety::{zones_from_json, ZoneDef, ZoneError};
use crate::sim::{SimError, DEFAULT_MSP_PORT};
use crate::tracking::{ObjectId, ObjectKind, DEFAULT_TRACK_PORT, TRACK_PORT_ENV};

pub use service::{serve, LoopStats, Service};

pub const DEFAULT_API_PORT: u16 = 47820;
pub const API_PORT_ENV: &str = "DRONOS_API_PORT";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {what} on {addr}: {source}")]
    Bind { what: &'static str, addr: SocketAddr, source: io::Error },
    #[error("cannot reach MSP link {addr}: {source}")]
    Link { addr: SocketAddr, source: io::Error },
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Zones(#[from] ZoneError),
    #[error(transparent)]
    Presets(#[from] ControlError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub object_id: ObjectId,
    pub kind: ObjectKind,
}

/// Service configuration file. Every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: IpAddr,
    /// 0 picks a free port.
    pub api_port: u16,
    pub track_port: u16,
    /// Port for the embedded simulator's MSP listener.
    pub msp_port: u16,
    /// Control loop rate, Hz.
    pub control_rate: f64,
    pub snapshot_rate: f64,
    /// Messages buffered per connection before a subscriber is dropped.
    pub subscriber_queue: usize,
    pub presets_file: Option<PathBuf>,
    pub preset: String,
    pub zones_file: Option<PathBuf>,
    pub drones: Vec<DroneSpec>,
    pub objects: Vec<ObjectSpec>,
    /// MSP endpoints, one per drone in `drones` order. Ignored with an embedded sim.
    pub links: Vec<SocketAddr>,
    /// Seed for the embedded simulator.
    pub sim_seed: u64,
    #[serde(flatten)]
    pub orchestrator: OrchestratorConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            api_port: DEFAULT_API_PORT,
            track_port: DEFAULT_TRACK_PORT,
            msp_port: DEFAULT_MSP_PORT,
            control_rate: 50.0,
            snapshot_rate: 30.0,
            subscriber_queue: 256,
            presets_file: None,
            preset: "default".into(),
            zones_file: None,
            drones: Vec::new(),
            objects: Vec::new(),
            links: Vec::new(),
            sim_seed: 1,
            orchestrator: OrchestratorConfig::default(),
        }
    }
}

fn read(path: &Path) -> Result<String, ServiceError> {
    std::fs::read_to_string(path).map_err(|source| ServiceError::Read { path: path.to_path_buf(), source })
}

impl ServiceConfig {
    /// Relative file references resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<ServiceConfig, ServiceError> {
        let mut cfg: ServiceConfig =
            serde_json::from_str(&read(path)?).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for f in [&mut cfg.presets_file, &mut cfg.zones_file].into_iter().flatten() {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        Ok(cfg)
    }

    /// Applies `DRONOS_API_PORT` and `DRONOS_TRACK_PORT`.
    pub fn apply_env(&mut self) -> Result<(), ServiceError> {
        for (var, slot) in [(API_PORT_ENV, &mut self.api_port), (TRACK_PORT_ENV, &mut self.track_port)] {
            if let Ok(v) = std::env::var(var) {
                *slot = v.trim().parse().map_err(|_| ServiceError::Config(format!("{var}={v:?} is not a port")))?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: &str| Err(ServiceError::Config(m.to_string()));
        if !(self.control_rate.is_finite() && (1.0..=1000.0).contains(&self.control_rate)) {
            return bad("control_rate must be within [1, 1000] Hz");
        }
        if !(self.snapshot_rate.is_finite() && self.snapshot_rate > 0.0 && self.snapshot_rate <= self.control_rate) {
            return bad("snapshot_rate must be positive and at most control_rate");
        }
        if self.subscriber_queue == 0 {
            return bad("subscriber_queue must be at least 1");
        }
        if !(self.orchestrator.d_min.is_finite() && self.orchestrator.d_min > 0.0) {
            return bad("d_min must be positive");
        }
        if !(self.orchestrator.k_rep.is_finite() && self.orchestrator.k_rep >= 0.0) {
            return bad("k_rep must be >= 0");
        }
        let (lo, hi) = (self.orchestrator.fence.min, self.orchestrator.fence.max);
        if !(lo.is_finite() && hi.is_finite() && lo.x < hi.x && lo.y < hi.y && lo.z < hi.z) {
            return bad("fence min must be below max on every axis");
        }
        Ok(())
    }

    pub fn orchestrator_config(&self) -> OrchestratorConfig {
        OrchestratorConfig { control_period: 1.0 / self.control_rate, ..self.orchestrator }
    }

    pub fn presets(&self) -> Result<PresetTable, ServiceError> {
        match &self.presets_file {
            Some(p) => Ok(PresetTable::from_json(&read(p)?)?),
            None => Ok(PresetTable::builtin()),
        }
    }

    pub fn zones(&self) -> Result<Vec<ZoneDef>, ServiceError> {
        match &self.zones_file {
            Some(p) => Ok(zones_from_json(&read(p)?)?),
            None => Ok(Vec::new()),
        }
    }
}
