//! Drone flight automation: pose tracking ingest, flight-path programming
//! (scripted, demonstrated, realtime), cascaded PID control emitting MSP RC
//! frames, static and dynamic no-fly zones, multi-drone orchestration, and a
//! quadrotor simulator that speaks the same wire protocols as real hardware.

pub mod api;
pub mod control;
pub mod geometry;
pub mod msp;
pub mod orchestrator;
pub mod path;
pub mod safety;
pub mod scenario;
pub mod sim;
pub mod tracking;
