//! Line-JSON wire messages. Every message is one JSON object carrying `"v": 1`;
//! client messages also carry a request `id` that the reply echoes.

use serde::Deserialize;
use serde_json::{json, Value};

use crate::control::GainOverride;
use crate::geometry::Vec3;
use crate::orchestrator::{Command, DroneId, Event, RaySource, WorldSnapshot};
use crate::tracking::ObjectId;

pub const PROTOCOL_VERSION: u64 = 1;
/// Longest accepted line, bytes. Longer input closes the connection.
pub const MAX_LINE: usize = 64 * 1024;

fn default_epsilon() -> f64 {
    crate::path::DEFAULT_RDP_EPSILON
}

fn default_speed() -> f64 {
    0.5
}

/// The mode targets reachable through `set_mode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeRequest {
    Scripted,
    DemonstratedPlayback,
    Realtime,
    Hover,
    Landing,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    UploadPath {
        path: Value,
    },
    GetPath {
        path_id: String,
    },
    DefineZones {
        zones: Value,
    },
    Command {
        drone_id: DroneId,
        transition: Value,
    },
    SetMode {
        drone_id: DroneId,
        mode: ModeRequest,
        #[serde(default)]
        path_id: Option<String>,
        #[serde(default)]
        source: Option<RaySource>,
    },
    PointerUpdate {
        origin: Vec3,
        forward: Vec3,
        distance: f64,
    },
    Subscribe,
    Unsubscribe,
    SetGains {
        drone_id: DroneId,
        gains: GainOverride,
    },
    RecordStart {
        recording_id: String,
        #[serde(default)]
        source: Option<ObjectId>,
    },
    RecordPose {
        recording_id: String,
        x: f64,
        y: f64,
        z: f64,
        t: f64,
    },
    RecordFinish {
        recording_id: String,
        path_id: String,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_speed")]
        speed: f64,
    },
    Ping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub id: Value,
    pub request: Request,
}

/// A request that could not be understood. `id` is null when none was readable.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{reason}")]
pub struct ProtocolError {
    pub id: Value,
    pub reason: String,
    pub field: Option<String>,
}

impl ProtocolError {
    pub fn new(id: Value, reason: impl Into<String>) -> Self {
        Self { id, reason: reason.into(), field: None }
    }

    pub fn at(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }
}

/// Parses one line. The `transition` field of `command` messages is decoded
/// separately by [`command_from_value`] so its errors can name the field.
pub fn parse_client_message(line: &str) -> Result<Envelope, ProtocolError> {
    let value: Value = serde_json::from_str(line).map_err(|e| ProtocolError::new(Value::Null, format!("invalid JSON: {e}")))?;
    let Value::Object(obj) = &value else {
        return Err(ProtocolError::new(Value::Null, "message must be a JSON object"));
    };
    let id = match obj.get("id") {
        Some(id @ (Value::String(_) | Value::Number(_))) => id.clone(),
        Some(_) => return Err(ProtocolError::new(Value::Null, "id must be a string or number").at("id")),
        None => return Err(ProtocolError::new(Value::Null, "missing request id").at("id")),
    };
    match obj.get("v").and_then(Value::as_u64) {
        Some(PROTOCOL_VERSION) => {}
        Some(v) => return Err(ProtocolError::new(id, format!("unsupported protocol version {v}")).at("v")),
        None => return Err(ProtocolError::new(id, "missing protocol version").at("v")),
    }
    if !obj.get("type").is_some_and(Value::is_string) {
        return Err(ProtocolError::new(id, "missing message type").at("type"));
    }
    let request = Request::deserialize(&value).map_err(|e| ProtocolError::new(id.clone(), e.to_string()))?;
    Ok(Envelope { id, request })
}

/// `transition` is either a bare name (`"takeoff"`) or an object with a
/// `transition` tag and its arguments.
pub fn command_from_value(v: &Value) -> Result<Command, String> {
    let tagged = match v {
        Value::String(name) => json!({ "transition": name }),
        other => other.clone(),
    };
    Command::deserialize(&tagged).map_err(|e| e.to_string())
}

fn line(v: Value) -> String {
    let mut s = v.to_string();
    s.push('\n');
    s
}

pub fn ack_line(id: &Value, result: Option<Value>) -> String {
    let mut v = json!({ "v": PROTOCOL_VERSION, "type": "ack", "id": id });
    if let Some(r) = result {
        v["result"] = r;
    }
    line(v)
}

pub fn error_line(id: &Value, reason: &str, field: Option<&str>) -> String {
    let mut v = json!({ "v": PROTOCOL_VERSION, "type": "error", "id": id, "reason": reason });
    if let Some(f) = field {
        v["field"] = json!(f);
    }
    line(v)
}

pub fn protocol_error_line(e: &ProtocolError) -> String {
    error_line(&e.id, &e.reason, e.field.as_deref())
}

pub fn snapshot_line(seq: u64, snapshot: &WorldSnapshot) -> String {
    line(json!({ "v": PROTOCOL_VERSION, "type": "snapshot", "seq": seq, "snapshot": snapshot }))
}

pub fn event_line(event: &Event) -> String {
    line(json!({ "v": PROTOCOL_VERSION, "type": "event", "event": event }))
}
