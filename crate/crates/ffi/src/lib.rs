//! C ABI over the parts of `dronos` that are useful outside the service:
//! the MSP codec, flight paths, the demonstration recorder and the static
//! no-fly zone filter.
//!
//! Conventions:
//! - Every fallible call returns a [`DronosStatus`]; on failure
//!   [`dronos_last_error`] describes it (per thread).
//! - Objects are opaque handles created by `*_new`/`*_from_json` and released
//!   with the matching `*_free`. Passing NULL to a `*_free` is a no-op.
//! - Strings returned by the library are freed with [`dronos_string_free`].
//! - Positions are meters, angles radians (JSON path files use degrees).

use std::cell::RefCell;
use std::collections::VecDeque;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dronos::geometry::{Pose, Quat, Vec3};
use dronos::msp::{encode_set_raw_rc_channels, RcCommand, StreamDecoder, MSP_SET_RAW_RC};
use dronos::path::{path_from_json, path_to_json, FlightPath, Recorder};
use dronos::safety::{check_path, filter_target, zones_from_json, Geofence, SafetyConfig, Verdict, Zone};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DronosStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    BufferTooSmall = 4,
    /// Nothing to return (e.g. no decoded frame pending).
    Empty = 5,
    /// A Rust panic was caught at the boundary. The handle may be unusable.
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DronosVec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<Vec3> for DronosVec3 {
    fn from(v: Vec3) -> Self {
        Self { x: v.x, y: v.y, z: v.z }
    }
}

impl From<DronosVec3> for Vec3 {
    fn from(v: DronosVec3) -> Self {
        Vec3::new(v.x, v.y, v.z)
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DronosPathSample {
    pub position: DronosVec3,
    pub yaw: f64,
    pub done: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DronosVerdict {
    Unchanged = 0,
    Clamped = 1,
    Retreat = 2,
}

/// Streaming MSP decoder that queues decoded SET_RAW_RC commands.
pub struct DronosMspDecoder {
    decoder: StreamDecoder,
    pending: VecDeque<RcCommand>,
    rejected: u64,
}

pub struct DronosPath(FlightPath);

pub struct DronosRecorder(Recorder);

/// Static zones plus the fence and safety settings they are filtered with.
pub struct DronosZones {
    zones: Vec<Zone>,
    fence: Geofence,
    safety: SafetyConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(DronosStatus, String);

impl Fail {
    fn null(what: &str) -> Fail {
        Fail(DronosStatus::NullPointer, format!("{what} is NULL"))
    }

    fn arg(msg: impl Into<String>) -> Fail {
        Fail(DronosStatus::InvalidArgument, msg.into())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DronosStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DronosStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal error (panic caught at the C boundary)".into());
            DronosStatus::Internal
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail::null(what))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::arg(format!("{what} is not UTF-8")))
}

unsafe fn free_box<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// The last error message on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn dronos_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn dronos_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dronos_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Encodes an MSP_SET_RAW_RC frame. `*written` receives the frame length,
/// or the required capacity when `DRONOS_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `channels` must point to `count` values and `out` to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dronos_msp_encode_rc(
    channels: *const u16,
    count: usize,
    out: *mut u8,
    capacity: usize,
    written: *mut usize,
) -> DronosStatus {
    guard(|| {
        if channels.is_null() || out.is_null() || written.is_null() {
            return Err(Fail::null("argument"));
        }
        let frame = encode_set_raw_rc_channels(std::slice::from_raw_parts(channels, count)).map_err(|e| Fail::arg(e.to_string()))?;
        *written = frame.len();
        if frame.len() > capacity {
            return Err(Fail(DronosStatus::BufferTooSmall, format!("frame needs {} bytes", frame.len())));
        }
        ptr::copy_nonoverlapping(frame.as_ptr(), out, frame.len());
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn dronos_msp_decoder_new() -> *mut DronosMspDecoder {
    Box::into_raw(Box::new(DronosMspDecoder { decoder: StreamDecoder::new(), pending: VecDeque::new(), rejected: 0 }))
}

/// # Safety
/// `dec` must come from [`dronos_msp_decoder_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dronos_msp_decoder_free(dec: *mut DronosMspDecoder) {
    free_box(dec);
}

/// Feeds bytes in any chunking. Decoded SET_RAW_RC commands are queued for
/// [`dronos_msp_decoder_next_rc`]; `*frames` receives how many were queued.
/// Other valid frames are counted as rejected.
///
/// # Safety
/// `dec` must be a live decoder and `bytes` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn dronos_msp_decoder_feed(
    dec: *mut DronosMspDecoder,
    bytes: *const u8,
    len: usize,
    frames: *mut usize,
) -> DronosStatus {
    guard(|| {
        let d = get_mut(dec, "decoder")?;
        if bytes.is_null() && len > 0 {
            return Err(Fail::null("bytes"));
        }
        let data = if len == 0 { &[][..] } else { std::slice::from_raw_parts(bytes, len) };
        let mut queued = 0;
        for f in d.decoder.feed(data) {
            match f.rc_command() {
                Ok(rc) if f.command == MSP_SET_RAW_RC => {
                    d.pending.push_back(rc);
                    queued += 1;
                }
                _ => d.rejected += 1,
            }
        }
        if let Some(n) = frames.as_mut() {
            *n = queued;
        }
        Ok(())
    })
}

/// Pops the oldest decoded command. Returns `DRONOS_STATUS_EMPTY` when none is pending.
///
/// # Safety
/// `dec` must be a live decoder; `channels` must have room for `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn dronos_msp_decoder_next_rc(
    dec: *mut DronosMspDecoder,
    channels: *mut u16,
    capacity: usize,
    count: *mut usize,
) -> DronosStatus {
    guard(|| {
        let d = get_mut(dec, "decoder")?;
        if channels.is_null() || count.is_null() {
            return Err(Fail::null("argument"));
        }
        let Some(rc) = d.pending.front() else {
            return Err(Fail(DronosStatus::Empty, "no decoded frame pending".into()));
        };
        let ch = rc.channels();
        *count = ch.len();
        if ch.len() > capacity {
            return Err(Fail(DronosStatus::BufferTooSmall, format!("frame has {} channels", ch.len())));
        }
        ptr::copy_nonoverlapping(ch.as_ptr(), channels, ch.len());
        d.pending.pop_front();
        Ok(())
    })
}

/// Number of contiguous garbage runs skipped while searching for a frame
/// header. Returns 0 for NULL.
///
/// # Safety
/// `dec` must be NULL or a live decoder.
#[no_mangle]
pub unsafe extern "C" fn dronos_msp_decoder_resyncs(dec: *const DronosMspDecoder) -> u64 {
    dec.as_ref().map_or(0, |d| d.decoder.resync_count())
}

/// Frames with a bad checksum, plus valid frames that were not SET_RAW_RC.
///
/// # Safety
/// `dec` must be NULL or a live decoder.
#[no_mangle]
pub unsafe extern "C" fn dronos_msp_decoder_rejected(dec: *const DronosMspDecoder) -> u64 {
    dec.as_ref().map_or(0, |d| d.decoder.corrupt_count() + d.rejected)
}

/// Parses a JSON path document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dronos_path_from_json(json: *const c_char, out: *mut *mut DronosPath) -> DronosStatus {
    guard(|| {
        let out = get_mut(out, "out")?;
        *out = ptr::null_mut();
        let p = path_from_json(text(json, "json")?).map_err(|e| Fail(DronosStatus::Parse, e.to_string()))?;
        *out = Box::into_raw(Box::new(DronosPath(p)));
        Ok(())
    })
}

/// # Safety
/// `path` must be NULL or a live path handle.
#[no_mangle]
pub unsafe extern "C" fn dronos_path_free(path: *mut DronosPath) {
    free_box(path);
}

/// Serializes a path back to JSON. Free the result with [`dronos_string_free`].
/// Returns NULL on failure.
///
/// # Safety
/// `path` must be a live path handle.
#[no_mangle]
pub unsafe extern "C" fn dronos_path_to_json(path: *const DronosPath) -> *mut c_char {
    let mut out = ptr::null_mut();
    guard(|| {
        let p = get(path, "path")?;
        out = CString::new(path_to_json(&p.0)).map_err(|e| Fail::arg(e.to_string()))?.into_raw();
        Ok(())
    });
    out
}

/// Total duration in seconds, or NaN for NULL.
///
/// # Safety
/// `path` must be NULL or a live path handle.
#[no_mangle]
pub unsafe extern "C" fn dronos_path_duration(path: *const DronosPath) -> f64 {
    path.as_ref().map_or(f64::NAN, |p| p.0.duration())
}

/// # Safety
/// `path` must be NULL or a live path handle.
#[no_mangle]
pub unsafe extern "C" fn dronos_path_waypoint_count(path: *const DronosPath) -> usize {
    path.as_ref().map_or(0, |p| p.0.waypoints().len())
}

/// Setpoint at time `t` seconds into the path.
///
/// # Safety
/// `path` must be a live path handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dronos_path_sample(path: *const DronosPath, t: f64, out: *mut DronosPathSample) -> DronosStatus {
    guard(|| {
        let p = get(path, "path")?;
        let out = get_mut(out, "out")?;
        if t.is_nan() {
            return Err(Fail::arg("t is NaN"));
        }
        let s = p.0.sample(t);
        *out = DronosPathSample { position: s.position.into(), yaw: s.yaw, done: s.done };
        Ok(())
    })
}

/// A demonstration recorder. `capacity` 0 selects the default raw-trace capacity.
#[no_mangle]
pub extern "C" fn dronos_recorder_new(capacity: usize) -> *mut DronosRecorder {
    let r = if capacity == 0 { Recorder::new() } else { Recorder::with_capacity(capacity) };
    Box::into_raw(Box::new(DronosRecorder(r)))
}

/// # Safety
/// `rec` must be NULL or a live recorder.
#[no_mangle]
pub unsafe extern "C" fn dronos_recorder_free(rec: *mut DronosRecorder) {
    free_box(rec);
}

/// Appends a pose. `*accepted` is false when the sample was dropped (out of
/// order, non-finite, or the trace is full).
///
/// # Safety
/// `rec` must be a live recorder; `accepted` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn dronos_recorder_record(
    rec: *mut DronosRecorder,
    position: DronosVec3,
    t: f64,
    accepted: *mut bool,
) -> DronosStatus {
    guard(|| {
        let r = get_mut(rec, "recorder")?;
        let ok = r.0.record(&Pose::new(position.into(), Quat::IDENTITY, t));
        if let Some(a) = accepted.as_mut() {
            *a = ok;
        }
        Ok(())
    })
}

/// # Safety
/// `rec` must be NULL or a live recorder.
#[no_mangle]
pub unsafe extern "C" fn dronos_recorder_len(rec: *const DronosRecorder) -> usize {
    rec.as_ref().map_or(0, |r| r.0.len())
}

/// Simplifies the trace (Ramer-Douglas-Peucker with tolerance `epsilon`,
/// meters) into a path flown at `speed` m/s. The recorder stays usable.
///
/// # Safety
/// `rec` must be a live recorder, `id` a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dronos_recorder_finish(
    rec: *const DronosRecorder,
    id: *const c_char,
    epsilon: f64,
    speed: f64,
    out: *mut *mut DronosPath,
) -> DronosStatus {
    guard(|| {
        let r = get(rec, "recorder")?;
        let out = get_mut(out, "out")?;
        *out = ptr::null_mut();
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(Fail::arg("epsilon must be >= 0"));
        }
        let p = r.0.finish(text(id, "id")?, epsilon, speed).map_err(|e| Fail::arg(e.to_string()))?;
        *out = Box::into_raw(Box::new(DronosPath(p)));
        Ok(())
    })
}

/// Parses a zone file (JSON array). Only static zones are accepted here;
/// dynamic zones need live tracking. The default geofence and safety settings apply.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dronos_zones_from_json(json: *const c_char, out: *mut *mut DronosZones) -> DronosStatus {
    guard(|| {
        let out = get_mut(out, "out")?;
        *out = ptr::null_mut();
        let defs = zones_from_json(text(json, "json")?).map_err(|e| Fail(DronosStatus::Parse, e.to_string()))?;
        let mut zones = Vec::with_capacity(defs.len());
        for d in &defs {
            zones.push(d.static_zone().ok_or_else(|| Fail::arg(format!("zone {:?} is dynamic", d.id)))?);
        }
        *out = Box::into_raw(Box::new(DronosZones { zones, fence: Geofence::default(), safety: SafetyConfig::default() }));
        Ok(())
    })
}

/// # Safety
/// `zones` must be NULL or a live zone set.
#[no_mangle]
pub unsafe extern "C" fn dronos_zones_free(zones: *mut DronosZones) {
    free_box(zones);
}

/// # Safety
/// `zones` must be NULL or a live zone set.
#[no_mangle]
pub unsafe extern "C" fn dronos_zones_count(zones: *const DronosZones) -> usize {
    zones.as_ref().map_or(0, |z| z.zones.len())
}

/// Replaces the geofence (default: x, y in [-3, 3], z in [0, 2.5]).
///
/// # Safety
/// `zones` must be a live zone set.
#[no_mangle]
pub unsafe extern "C" fn dronos_zones_set_fence(zones: *mut DronosZones, min: DronosVec3, max: DronosVec3) -> DronosStatus {
    guard(|| {
        let z = get_mut(zones, "zones")?;
        let (min, max): (Vec3, Vec3) = (min.into(), max.into());
        if !(min.is_finite() && max.is_finite() && min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(Fail::arg("fence min must be below max on every axis"));
        }
        z.fence = Geofence { min, max };
        Ok(())
    })
}

/// Runs the safety filter on a commanded target for a drone at `current`.
///
/// # Safety
/// `zones` must be a live zone set; `out_target` and `out_verdict` writable.
#[no_mangle]
pub unsafe extern "C" fn dronos_zones_filter(
    zones: *const DronosZones,
    target: DronosVec3,
    current: DronosVec3,
    out_target: *mut DronosVec3,
    out_verdict: *mut DronosVerdict,
) -> DronosStatus {
    guard(|| {
        let z = get(zones, "zones")?;
        let (t, c): (Vec3, Vec3) = (target.into(), current.into());
        if !(t.is_finite() && c.is_finite()) {
            return Err(Fail::arg("positions must be finite"));
        }
        let out_target = get_mut(out_target, "out_target")?;
        let out_verdict = get_mut(out_verdict, "out_verdict")?;
        let f = filter_target(t, c, &z.zones, &z.fence, &z.safety);
        *out_target = f.target.into();
        *out_verdict = match f.verdict {
            Verdict::Unchanged => DronosVerdict::Unchanged,
            Verdict::Clamped => DronosVerdict::Clamped,
            Verdict::Retreat => DronosVerdict::Retreat,
        };
        Ok(())
    })
}

/// Static check of a path against the fence and zones. `*issues` receives
/// the number of problems; `report` (may be NULL) receives a newline-separated
/// description to free with [`dronos_string_free`], or NULL when clean.
///
/// # Safety
/// `path` and `zones` must be live handles; `issues` writable.
#[no_mangle]
pub unsafe extern "C" fn dronos_path_check(
    path: *const DronosPath,
    zones: *const DronosZones,
    issues: *mut usize,
    report: *mut *mut c_char,
) -> DronosStatus {
    guard(|| {
        let p = get(path, "path")?;
        let z = get(zones, "zones")?;
        let issues = get_mut(issues, "issues")?;
        let points: Vec<Vec3> = p.0.waypoints().iter().map(|w| w.position).collect();
        let found = check_path(&points, p.0.is_loop(), &z.zones, &z.fence);
        *issues = found.len();
        if let Some(r) = report.as_mut() {
            *r = if found.is_empty() {
                ptr::null_mut()
            } else {
                let text: Vec<String> = found.iter().map(ToString::to_string).collect();
                CString::new(text.join("\n")).map_err(|e| Fail::arg(e.to_string()))?.into_raw()
            };
        }
        Ok(())
    })
}
