//! Desk-scale quadrotor simulator.
//!
//! Kinematic tilt model: stick deflection maps straight to a tilt angle, tilt
//! to horizontal acceleration, throttle offset from hover to vertical
//! acceleration, plus linear drag. The simulator only talks MSP in and pose
//! datagrams out, the same as real hardware.

use std::fmt::Write as _;
use std::io::{self, Read};
use std::net::{SocketAddr, TcpListener, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::GRAVITY;
use crate::geometry::{rotate_z, wrap_angle, Pose, Quat, Vec3};
use crate::msp::{RcCommand, StreamDecoder, MSP_SET_RAW_RC, RC_MID};
use crate::tracking::{format_datagram, ObjectId};

pub const DEFAULT_MSP_PORT: u16 = 47810;
/// Physics step, seconds.
pub const PHYSICS_DT: f64 = 0.005;
/// Physics steps per tracker datagram (100 Hz).
pub const TRACKER_DECIMATION: u64 = 2;
pub const MAX_DT: f64 = 0.01;
pub const LOG_HEADER: &str = "t,drone_id,x,y,z,yaw,vx,vy,vz\n";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("dt must be in (0, {MAX_DT}], got {0}")]
    InvalidDt(f64),
    #[error("invalid noise: {0}")]
    InvalidNoise(&'static str),
    #[error("invalid parameters: {0}")]
    InvalidParams(&'static str),
    #[error("unknown drone index {0}")]
    UnknownDrone(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    /// Mass-normalized linear drag, 1/s.
    pub k_d: f64,
    /// Radians at full stick.
    pub tilt_max: f64,
    pub hover_throttle: f64,
    /// Vertical acceleration per throttle unit, (m/s²)/unit.
    pub k_t_inv: f64,
    /// Rad/s at full yaw stick.
    pub yaw_rate_max: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self { k_d: 0.3, tilt_max: 20f64.to_radians(), hover_throttle: 1450.0, k_t_inv: 0.01, yaw_rate_max: 2.0 }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.k_d.is_finite()
            && self.k_d >= 0.0
            && self.tilt_max > 0.0
            && self.tilt_max < std::f64::consts::FRAC_PI_2
            && self.hover_throttle.is_finite()
            && self.k_t_inv.is_finite()
            && self.k_t_inv > 0.0
            && self.yaw_rate_max.is_finite()
            && self.yaw_rate_max >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidParams("k_d >= 0, 0 < tilt_max < 90 deg, k_t_inv > 0, yaw_rate_max >= 0"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimDrone {
    pub position: Vec3,
    pub velocity: Vec3,
    pub yaw: f64,
    pub yaw_rate: f64,
    pub params: SimParams,
    pub last_rc: RcCommand,
}

impl SimDrone {
    /// At rest with throttle at hover and sticks centered.
    pub fn at_rest(position: Vec3, yaw: f64, params: SimParams) -> Self {
        let hover = params.hover_throttle.round().clamp(1000.0, 2000.0) as u16;
        Self {
            position,
            velocity: Vec3::ZERO,
            yaw,
            yaw_rate: 0.0,
            params,
            last_rc: RcCommand::sticks(RC_MID, RC_MID, hover, RC_MID, true),
        }
    }

    pub fn acceleration(&self, rc: &RcCommand) -> Vec3 {
        let p = &self.params;
        let stick = |ch: u16| (ch as f64 - RC_MID as f64) / 500.0;
        let pitch = stick(rc.pitch()) * p.tilt_max;
        let roll = stick(rc.roll()) * p.tilt_max;
        let body = Vec3::new(GRAVITY * pitch, -GRAVITY * roll, 0.0);
        let mut a = rotate_z(body, self.yaw);
        a.z = (rc.throttle() as f64 - p.hover_throttle) * p.k_t_inv;
        a - self.velocity * p.k_d
    }
}

/// Advances one drone by `dt` with semi-implicit Euler.
pub fn step(d: &SimDrone, rc: &RcCommand, dt: f64) -> Result<SimDrone, SimError> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(SimError::InvalidDt(dt));
    }
    let mut next = *d;
    next.velocity = d.velocity + d.acceleration(rc) * dt;
    next.position = d.position + next.velocity * dt;
    next.yaw_rate = (rc.yaw() as f64 - RC_MID as f64) / 500.0 * d.params.yaw_rate_max;
    next.yaw = wrap_angle(d.yaw + next.yaw_rate * dt);
    if next.position.z < 0.0 {
        next.position.z = 0.0;
        next.velocity = Vec3::ZERO;
    }
    next.last_rc = *rc;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Standard deviation of position noise per axis, meters.
    pub sigma: f64,
    /// Probability that a datagram is dropped.
    pub dropout: f64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(SimError::InvalidNoise("sigma must be >= 0"));
        }
        // 1.0 is allowed so tests can cut the tracker entirely.
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(SimError::InvalidNoise("dropout must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Scripted motion for non-drone tracked objects such as a walking user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Motion {
    Static {
        position: Vec3,
        #[serde(default)]
        yaw: f64,
    },
    /// Waits at `from` until `start`, then walks to `to` at `speed` and stays.
    Linear { from: Vec3, to: Vec3, start: f64, speed: f64 },
}

impl Motion {
    pub fn pose_at(&self, t: f64) -> (Vec3, f64) {
        match *self {
            Motion::Static { position, yaw } => (position, yaw),
            Motion::Linear { from, to, start, speed } => {
                let d = to - from;
                let len = d.norm();
                let yaw = d.y.atan2(d.x);
                if len == 0.0 || speed <= 0.0 {
                    return (from, yaw);
                }
                let s = ((t - start).max(0.0) * speed / len).min(1.0);
                (from.lerp(to, s), yaw)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Body {
    drone_id: u32,
    object_id: ObjectId,
    drone: SimDrone,
    decoder: StreamDecoder,
    rejected: u64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
struct Prop {
    object_id: ObjectId,
    motion: Motion,
    rng: ChaCha8Rng,
}

/// Simulated drones and props with a shared tracker.
#[derive(Debug, Clone)]
pub struct SimWorld {
    seed: u64,
    noise: NoiseConfig,
    bodies: Vec<Body>,
    props: Vec<Prop>,
    steps: u64,
    dt: f64,
}

impl SimWorld {
    pub fn new(seed: u64, noise: NoiseConfig) -> Result<Self, SimError> {
        noise.validate()?;
        Ok(Self { seed, noise, bodies: Vec::new(), props: Vec::new(), steps: 0, dt: PHYSICS_DT })
    }

    /// Each tracked object gets its own noise stream seeded from `seed + object_id`,
    /// so one drone's noise does not depend on which others exist.
    fn rng_for(&self, object_id: ObjectId) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(object_id as u64))
    }

    /// Returns the drone's index, which is also its MSP connection number.
    pub fn add_drone(&mut self, drone_id: u32, object_id: ObjectId, drone: SimDrone) -> Result<usize, SimError> {
        drone.params.validate()?;
        let rng = self.rng_for(object_id);
        self.bodies.push(Body { drone_id, object_id, drone, decoder: StreamDecoder::new(), rejected: 0, rng });
        Ok(self.bodies.len() - 1)
    }

    pub fn add_object(&mut self, object_id: ObjectId, motion: Motion) {
        let rng = self.rng_for(object_id);
        self.props.push(Prop { object_id, motion, rng });
    }

    pub fn set_noise(&mut self, noise: NoiseConfig) -> Result<(), SimError> {
        noise.validate()?;
        self.noise = noise;
        Ok(())
    }

    pub fn noise(&self) -> NoiseConfig {
        self.noise
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn drone(&self, index: usize) -> Option<&SimDrone> {
        self.bodies.get(index).map(|b| &b.drone)
    }

    pub fn drone_count(&self) -> usize {
        self.bodies.len()
    }

    /// Frames that failed to decode or were not SET_RAW_RC, per drone.
    pub fn rejected(&self, index: usize) -> u64 {
        self.bodies.get(index).map_or(0, |b| b.rejected + b.decoder.corrupt_count())
    }

    /// Feeds link bytes for one drone. Bad frames are counted and the last
    /// good command stays in effect.
    pub fn feed_msp(&mut self, index: usize, bytes: &[u8]) -> Result<(), SimError> {
        let body = self.bodies.get_mut(index).ok_or(SimError::UnknownDrone(index))?;
        for frame in body.decoder.feed(bytes) {
            match frame.rc_command() {
                Ok(rc) if frame.command == MSP_SET_RAW_RC => body.drone.last_rc = rc,
                _ => body.rejected += 1,
            }
        }
        Ok(())
    }

    /// One physics step with each drone's latest command.
    pub fn step(&mut self) {
        for b in &mut self.bodies {
            let rc = b.drone.last_rc;
            b.drone = step(&b.drone, &rc, self.dt).expect("fixed dt is valid");
        }
        self.steps += 1;
    }

    /// Whether the tracker fires at the current step.
    pub fn tracker_due(&self) -> bool {
        self.steps % TRACKER_DECIMATION == 0
    }

    /// Noisy observations of every object at the current time, drones first.
    /// Each object draws the same number of variates per frame whether or not
    /// it is dropped, keeping streams aligned across noise settings.
    pub fn observe(&mut self) -> Vec<(ObjectId, Pose)> {
        let t = self.time();
        let noise = self.noise;
        let mut out = Vec::new();
        let mut sample = |rng: &mut ChaCha8Rng, id: ObjectId, p: Vec3, yaw: f64| {
            let keep = rng.random::<f64>() >= noise.dropout;
            let n = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            if keep {
                out.push((id, Pose::new(p + n * noise.sigma, Quat::from_yaw(yaw), t)));
            }
        };
        for b in &mut self.bodies {
            sample(&mut b.rng, b.object_id, b.drone.position, b.drone.yaw);
        }
        for p in &mut self.props {
            let (pos, yaw) = p.motion.pose_at(t);
            sample(&mut p.rng, p.object_id, pos, yaw);
        }
        out
    }

    /// Ground-truth poses of the props at the current time.
    pub fn object_positions(&self) -> Vec<(ObjectId, Vec3)> {
        let t = self.time();
        self.props.iter().map(|p| (p.object_id, p.motion.pose_at(t).0)).collect()
    }

    /// Appends one CSV row per drone for the current state.
    pub fn log_rows(&self, out: &mut String) {
        let t = self.time();
        for b in &self.bodies {
            let d = &b.drone;
            let _ = writeln!(
                out,
                "{t:.3},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                b.drone_id, d.position.x, d.position.y, d.position.z, d.yaw, d.velocity.x, d.velocity.y, d.velocity.z
            );
        }
    }
}

/// Runs a world in real time behind the hardware interfaces: MSP over TCP
/// (the n-th connection drives drone n) and TRK datagrams over UDP.
pub struct SimServer {
    msp_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl SimServer {
    pub fn spawn(mut world: SimWorld, msp_bind: SocketAddr, track_target: SocketAddr) -> io::Result<SimServer> {
        let listener = TcpListener::bind(msp_bind)?;
        listener.set_nonblocking(true)?;
        let msp_addr = listener.local_addr()?;
        let udp = UdpSocket::bind(SocketAddr::new(track_target.ip(), 0))?;
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = unbounded::<(usize, Vec<u8>)>();

        let accept_stop = stop.clone();
        let accept = thread::spawn(move || accept_loop(listener, tx, accept_stop));

        let physics_stop = stop.clone();
        let physics = thread::spawn(move || {
            let start = Instant::now();
            while !physics_stop.load(Ordering::Relaxed) {
                drain(&mut world, &rx);
                if world.tracker_due() {
                    for (id, pose) in world.observe() {
                        let _ = udp.send_to(format_datagram(id, &pose).as_bytes(), track_target);
                    }
                }
                world.step();
                let due = start + Duration::from_secs_f64(world.time());
                if let Some(wait) = due.checked_duration_since(Instant::now()) {
                    thread::sleep(wait);
                }
            }
        });
        Ok(SimServer { msp_addr, stop, threads: vec![accept, physics] })
    }

    pub fn msp_addr(&self) -> SocketAddr {
        self.msp_addr
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for SimServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn drain(world: &mut SimWorld, rx: &Receiver<(usize, Vec<u8>)>) {
    while let Ok((idx, bytes)) = rx.try_recv() {
        if let Err(e) = world.feed_msp(idx, &bytes) {
            log::warn!("dropping MSP bytes: {e}");
        }
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<(usize, Vec<u8>)>, stop: Arc<AtomicBool>) {
    let mut next = 0usize;
    let mut readers = Vec::new();
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((mut stream, peer)) => {
                let idx = next;
                next += 1;
                log::info!("MSP link {idx} from {peer}");
                let tx = tx.clone();
                let stop = stop.clone();
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_read_timeout(Some(Duration::from_millis(100)));
                readers.push(thread::spawn(move || {
                    let mut buf = [0u8; 512];
                    while !stop.load(Ordering::Relaxed) {
                        match stream.read(&mut buf) {
                            Ok(0) => break,
                            Ok(n) => {
                                if tx.send((idx, buf[..n].to_vec())).is_err() {
                                    break;
                                }
                            }
                            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                            Err(_) => break,
                        }
                    }
                }));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                log::warn!("MSP accept failed: {e}");
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
    for r in readers {
        let _ = r.join();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msp::encode_set_raw_rc;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn hover_rc() -> RcCommand {
        RcCommand::sticks(1500, 1500, 1450, 1500, true)
    }

    fn drone() -> SimDrone {
        SimDrone::at_rest(Vec3::new(0.0, 0.0, 1.0), 0.0, SimParams::default())
    }

    #[test]
    fn hover_is_equilibrium() {
        let d = drone();
        let next = step(&d, &hover_rc(), 0.005).unwrap();
        assert_eq!(next.position, d.position);
        assert_eq!(next.velocity, Vec3::ZERO);
        assert_eq!(next.yaw, 0.0);
    }

    #[test]
    fn throttle_floor_one_step() {
        let rc = RcCommand::sticks(1500, 1500, 1000, 1500, true);
        let next = step(&drone(), &rc, 0.005).unwrap();
        // a_z = -450 * 0.01 with hover at 1450; the example's -5 m/s² assumes hover at 1500.
        assert_abs_diff_eq!(next.velocity.z, -4.5 * 0.005, epsilon = 1e-12);
        let mut p = SimParams::default();
        p.hover_throttle = 1500.0;
        let d = SimDrone::at_rest(Vec3::new(0.0, 0.0, 1.0), 0.0, p);
        assert_abs_diff_eq!(step(&d, &rc, 0.005).unwrap().velocity.z, -0.025, epsilon = 1e-12);
    }

    #[test]
    fn terminal_vertical_speed() {
        let mut d = drone();
        d.position.z = 1000.0;
        let rc = RcCommand::sticks(1500, 1500, 1550, 1500, true);
        let a_z = 100.0 * 0.01;
        let k_d = d.params.k_d;
        let steps = (20.0 / k_d / 0.005) as usize;
        for _ in 0..steps {
            d = step(&d, &rc, 0.005).unwrap();
        }
        let terminal = a_z / k_d;
        assert!((d.velocity.z - terminal).abs() < 0.01 * terminal, "{} vs {terminal}", d.velocity.z);
    }

    #[test]
    fn pitch_accelerates_along_heading() {
        let mut d = drone();
        d.yaw = std::f64::consts::FRAC_PI_2;
        let rc = RcCommand::sticks(1500, 2000, 1450, 1500, true);
        let next = step(&d, &rc, 0.005).unwrap();
        let a = GRAVITY * 20f64.to_radians();
        assert_abs_diff_eq!(next.velocity.y, a * 0.005, epsilon = 1e-12);
        assert_abs_diff_eq!(next.velocity.x, 0.0, epsilon = 1e-12);
        // Right roll with yaw 0 moves toward -y.
        let rc = RcCommand::sticks(2000, 1500, 1450, 1500, true);
        assert!(step(&drone(), &rc, 0.005).unwrap().velocity.y < 0.0);
    }

    #[test]
    fn ground_contact() {
        let mut d = drone();
        d.position.z = 0.001;
        d.velocity = Vec3::new(0.3, 0.0, -1.0);
        let next = step(&d, &hover_rc(), 0.005).unwrap();
        assert_eq!(next.position.z, 0.0);
        assert_eq!(next.velocity, Vec3::ZERO);
    }

    #[test]
    fn rejects_bad_dt() {
        assert_eq!(step(&drone(), &hover_rc(), 0.02), Err(SimError::InvalidDt(0.02)));
        assert!(step(&drone(), &hover_rc(), 0.0).is_err());
    }

    #[test]
    fn halving_dt_converges() {
        let run = |dt: f64| {
            let mut d = drone();
            let mut rc = RcCommand::sticks(1600, 1400, 1500, 1600, true);
            let n = (10.0 / dt).round() as usize;
            for i in 0..n {
                if i as f64 * dt > 5.0 {
                    rc = RcCommand::sticks(1450, 1550, 1430, 1500, true);
                }
                d = step(&d, &rc, dt).unwrap();
            }
            d.position
        };
        let coarse = run(0.005);
        let fine = run(0.0025);
        assert!(coarse.distance(fine) < 0.01, "{}", coarse.distance(fine));
    }

    fn world(noise: NoiseConfig) -> SimWorld {
        let mut w = SimWorld::new(42, noise).unwrap();
        w.add_drone(1, 1, drone()).unwrap();
        w
    }

    #[test]
    fn noiseless_hover_emits_constant_poses() {
        let mut w = world(NoiseConfig::default());
        let mut seen = Vec::new();
        for _ in 0..200 {
            if w.tracker_due() {
                seen.extend(w.observe().into_iter().map(|(_, p)| p.position));
            }
            w.step();
        }
        assert_eq!(seen.len(), 100);
        assert!(seen.iter().all(|p| *p == Vec3::new(0.0, 0.0, 1.0)));
    }

    #[test]
    fn full_dropout_is_silent() {
        let mut w = world(NoiseConfig { sigma: 0.0, dropout: 1.0 });
        for _ in 0..100 {
            assert!(w.observe().is_empty());
            w.step();
        }
    }

    #[test]
    fn noise_has_requested_spread() {
        let mut w = world(NoiseConfig { sigma: 0.005, dropout: 0.0 });
        let xs: Vec<f64> = (0..10_000).flat_map(|_| w.observe()).map(|(_, p)| p.position.x).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.004..=0.006).contains(&sd), "{sd}");
    }

    #[test]
    fn msp_bytes_drive_the_drone() {
        let mut w = world(NoiseConfig::default());
        let rc = RcCommand::sticks(1500, 1500, 1600, 1500, true);
        let bytes = encode_set_raw_rc(&rc);
        w.feed_msp(0, &bytes[..5]).unwrap();
        assert_eq!(w.drone(0).unwrap().last_rc, hover_rc());
        w.feed_msp(0, &bytes[5..]).unwrap();
        assert_eq!(w.drone(0).unwrap().last_rc, rc);
        // A corrupt frame is counted and the last command holds.
        let mut bad = encode_set_raw_rc(&hover_rc());
        *bad.last_mut().unwrap() ^= 0xff;
        w.feed_msp(0, &bad).unwrap();
        assert_eq!(w.drone(0).unwrap().last_rc, rc);
        assert_eq!(w.rejected(0), 1);
        assert!(w.feed_msp(3, &bytes).is_err());
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let run = || {
            let mut w = world(NoiseConfig { sigma: 0.01, dropout: 0.2 });
            w.add_object(100, Motion::Linear { from: Vec3::ZERO, to: Vec3::X, start: 0.1, speed: 0.5 });
            let mut log = String::from(LOG_HEADER);
            let mut obs = Vec::new();
            for _ in 0..400 {
                obs.extend(w.observe());
                w.step();
                w.log_rows(&mut log);
            }
            (log, obs)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn linear_motion() {
        let m = Motion::Linear { from: Vec3::ZERO, to: Vec3::new(2.0, 0.0, 0.0), start: 1.0, speed: 0.5 };
        assert_eq!(m.pose_at(0.5).0, Vec3::ZERO);
        assert_abs_diff_eq!(m.pose_at(2.0).0.x, 0.5, epsilon = 1e-12);
        assert_eq!(m.pose_at(100.0).0, Vec3::new(2.0, 0.0, 0.0));
    }

    proptest! {
        #[test]
        fn speed_never_grows_without_input(vx in -2.0..2.0f64, vy in -2.0..2.0f64, vz in -2.0..2.0f64) {
            let mut d = drone();
            d.position.z = 50.0;
            d.velocity = Vec3::new(vx, vy, vz);
            let mut speed = d.velocity.norm();
            for _ in 0..400 {
                d = step(&d, &hover_rc(), 0.005).unwrap();
                prop_assert!(d.velocity.norm() <= speed + 1e-12);
                speed = d.velocity.norm();
            }
        }
    }
}
