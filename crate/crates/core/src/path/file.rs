//! JSON flight-path documents.
//!
//! ```json
//! {"format": 1, "id": "square", "loop": false,
//!  "waypoints": [{"x": 0, "y": 0, "z": 1, "yaw": "auto", "speed_to": 0.5, "hold": 0}]}
//! ```
//! Yaw is in degrees in files and radians everywhere else.

use serde_json::{json, Map, Value};

use super::{FlightPath, PathError, Waypoint, YawSetpoint};
use crate::geometry::Vec3;

pub const PATH_FORMAT_VERSION: u64 = 1;

fn number(obj: &Map<String, Value>, key: &str, at: &str) -> Result<f64, PathError> {
    let path = format!("{at}.{key}");
    match obj.get(key) {
        None => Err(PathError::field(path, "missing")),
        Some(v) => v.as_f64().ok_or_else(|| PathError::field(path, "must be a number")),
    }
}

fn waypoint(v: &Value, at: &str) -> Result<Waypoint, PathError> {
    let obj = v.as_object().ok_or_else(|| PathError::field(at, "must be an object"))?;
    let position = Vec3::new(number(obj, "x", at)?, number(obj, "y", at)?, number(obj, "z", at)?);
    let yaw = match obj.get("yaw") {
        None => YawSetpoint::Auto,
        Some(Value::String(s)) if s == "auto" => YawSetpoint::Auto,
        Some(Value::Number(n)) => YawSetpoint::Fixed(n.as_f64().unwrap_or(f64::NAN).to_radians()),
        Some(_) => return Err(PathError::field(format!("{at}.yaw"), "must be degrees or \"auto\"")),
    };
    let speed_to = number(obj, "speed_to", at)?;
    let hold = match obj.get("hold") {
        None => 0.0,
        Some(_) => number(obj, "hold", at)?,
    };
    Ok(Waypoint { position, yaw, speed_to, hold })
}

pub fn path_from_value(doc: &Value) -> Result<FlightPath, PathError> {
    let obj = doc.as_object().ok_or_else(|| PathError::field("$", "must be an object"))?;
    match obj.get("format").and_then(Value::as_u64) {
        Some(PATH_FORMAT_VERSION) => {}
        Some(other) => return Err(PathError::field("format", format!("unsupported version {other}"))),
        None => return Err(PathError::field("format", "missing or not an integer")),
    }
    let id = obj
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| PathError::field("id", "missing or not a string"))?;
    let looped = match obj.get("loop") {
        None => false,
        Some(v) => v.as_bool().ok_or_else(|| PathError::field("loop", "must be a boolean"))?,
    };
    let list = obj
        .get("waypoints")
        .and_then(Value::as_array)
        .ok_or_else(|| PathError::field("waypoints", "missing or not an array"))?;
    let waypoints = list
        .iter()
        .enumerate()
        .map(|(i, w)| waypoint(w, &format!("waypoints[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    FlightPath::new(id, waypoints, looped)
}

pub fn path_from_json(text: &str) -> Result<FlightPath, PathError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| PathError::field("$", e.to_string()))?;
    path_from_value(&doc)
}

pub fn path_to_value(path: &FlightPath) -> Value {
    let wps: Vec<Value> = path
        .waypoints()
        .iter()
        .map(|w| {
            let yaw = match w.yaw {
                YawSetpoint::Auto => json!("auto"),
                YawSetpoint::Fixed(r) => json!(r.to_degrees()),
            };
            json!({
                "x": w.position.x, "y": w.position.y, "z": w.position.z,
                "yaw": yaw, "speed_to": w.speed_to, "hold": w.hold,
            })
        })
        .collect();
    json!({"format": PATH_FORMAT_VERSION, "id": path.id(), "loop": path.is_loop(), "waypoints": wps})
}

pub fn path_to_json(path: &FlightPath) -> String {
    serde_json::to_string_pretty(&path_to_value(path)).expect("path serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_document() {
        let p = path_from_json(
            r#"{"format":1,"id":"sq","loop":true,"waypoints":[
                {"x":0,"y":0,"z":1,"yaw":"auto","speed_to":0.5,"hold":1},
                {"x":1,"y":0,"z":1,"yaw":90,"speed_to":0.5}]}"#,
        )
        .unwrap();
        assert_eq!(p.id(), "sq");
        assert!(p.is_loop());
        assert_eq!(p.waypoints()[0].hold, 1.0);
        assert_eq!(p.waypoints()[1].yaw, YawSetpoint::Fixed(std::f64::consts::FRAC_PI_2));
    }

    #[test]
    fn reports_field_paths() {
        let e = path_from_json(r#"{"format":1,"id":"x","waypoints":[{"x":0,"y":0,"z":1,"speed_to":1},{"x":1,"y":"a","z":1,"speed_to":1}]}"#)
            .unwrap_err();
        assert_eq!(e.field_path(), Some("waypoints[1].y"));
        let e = path_from_json(r#"{"format":2,"id":"x","waypoints":[]}"#).unwrap_err();
        assert_eq!(e.field_path(), Some("format"));
        let e = path_from_json(r#"{"format":1,"id":"x","waypoints":[{"x":0,"y":0,"z":1,"speed_to":-1}]}"#).unwrap_err();
        assert_eq!(e.field_path(), Some("waypoints[0].speed_to"));
        let e = path_from_json("{not json").unwrap_err();
        assert_eq!(e.field_path(), Some("$"));
    }

    #[test]
    fn document_roundtrip() {
        let text = r#"{"format":1,"id":"r","loop":false,"waypoints":[
            {"x":0,"y":0,"z":1,"yaw":45,"speed_to":0.5,"hold":0.25},
            {"x":1,"y":2,"z":1.5,"yaw":"auto","speed_to":0.3,"hold":0}]}"#;
        let p = path_from_json(text).unwrap();
        let back = path_from_json(&path_to_json(&p)).unwrap();
        assert_eq!(back.waypoints().len(), 2);
        for (a, b) in p.waypoints().iter().zip(back.waypoints()) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.speed_to, b.speed_to);
            match (a.yaw, b.yaw) {
                (YawSetpoint::Fixed(x), YawSetpoint::Fixed(y)) => assert!((x - y).abs() < 1e-12),
                (x, y) => assert_eq!(x, y),
            }
        }
    }
}
