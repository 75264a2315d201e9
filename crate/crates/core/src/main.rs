use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use dronos::api::{serve, ServiceConfig, API_PORT_ENV, DEFAULT_API_PORT};
use dronos::geometry::Vec3;
use dronos::path::path_from_json;
use dronos::safety::{check_path, zones_from_json, Geofence};
use dronos::scenario::{run, Scenario};

#[derive(Parser)]
#[command(name = "dronos", version, about = "Drone flight automation service, validator and simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the API service, optionally with an embedded simulator.
    Serve {
        /// Service config file (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fly N simulated drones instead of configured links.
        #[arg(long, default_value_t = 0)]
        sim: usize,
        /// Default controller preset.
        #[arg(long)]
        preset: Option<String>,
        /// Overrides the configured API port.
        #[arg(long)]
        port: Option<u16>,
    },
    /// Check a path file against the geofence and static zones.
    Validate {
        path: PathBuf,
        #[arg(long)]
        zones: Option<PathBuf>,
        /// Take the geofence from a service config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run a scenario headless against the simulator and write its logs.
    Replay {
        scenario: PathBuf,
        /// Output directory for trajectory.csv, rc.log, events.jsonl and report.json.
        #[arg(long, default_value = "replay-out")]
        out: PathBuf,
    },
    /// Upload a path to a running service and fly it.
    Fly {
        path: PathBuf,
        #[arg(long)]
        drone: u32,
        /// Service address; defaults to localhost on DRONOS_API_PORT.
        #[arg(long)]
        api: Option<SocketAddr>,
        /// Arm and take off first if the drone is idle.
        #[arg(long)]
        takeoff: bool,
        /// Wait for the path to complete.
        #[arg(long)]
        wait: bool,
        /// Give up waiting after this many seconds.
        #[arg(long, default_value_t = 120.0)]
        timeout: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Serve { config, sim, preset, port } => cmd_serve(config, sim, preset, port),
        Cmd::Validate { path, zones, config, json } => cmd_validate(&path, zones.as_deref(), config.as_deref(), json),
        Cmd::Replay { scenario, out } => cmd_replay(&scenario, &out),
        Cmd::Fly { path, drone, api, takeoff, wait, timeout } => cmd_fly(&path, drone, api, takeoff, wait, timeout),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cmd_serve(config: Option<PathBuf>, sim: usize, preset: Option<String>, port: Option<u16>) -> Result<ExitCode> {
    let mut cfg = match config {
        Some(p) => ServiceConfig::load(&p)?,
        None => ServiceConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(p) = preset {
        cfg.preset = p;
    }
    if let Some(p) = port {
        cfg.api_port = p;
    }
    let service = serve(cfg, sim)?;
    println!("listening on {}", service.api_addr());
    service.join();
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(path: &Path, zones: Option<&Path>, config: Option<&Path>, as_json: bool) -> Result<ExitCode> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let fp = path_from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    let defs = match zones {
        Some(z) => zones_from_json(&std::fs::read_to_string(z).with_context(|| format!("reading {}", z.display()))?)?,
        None => Vec::new(),
    };
    let fence = match config {
        Some(c) => ServiceConfig::load(c)?.orchestrator.fence,
        None => Geofence::default(),
    };
    let fixed: Vec<_> = defs.iter().filter_map(|d| d.static_zone()).collect();
    let skipped: Vec<&str> = defs.iter().filter(|d| d.static_zone().is_none()).map(|d| d.id.as_str()).collect();
    let points: Vec<Vec3> = fp.waypoints().iter().map(|w| w.position).collect();
    let issues = check_path(&points, fp.is_loop(), &fixed, &fence);

    if as_json {
        let report = json!({
            "path_id": fp.id(),
            "ok": issues.is_empty(),
            "waypoints": points.len(),
            "zones_checked": fixed.len(),
            "dynamic_zones_skipped": skipped,
            "issues": issues,
        });
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for i in &issues {
            println!("{}: {i}", path.display());
        }
        if !skipped.is_empty() {
            println!("note: dynamic zones are not checked statically: {}", skipped.join(", "));
        }
        println!(
            "{}: {} waypoints, {} zones: {}",
            fp.id(),
            points.len(),
            fixed.len(),
            if issues.is_empty() { "ok".to_string() } else { format!("{} issue(s)", issues.len()) }
        );
    }
    Ok(if issues.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_replay(scenario: &Path, out: &Path) -> Result<ExitCode> {
    let sc = Scenario::load(scenario)?;
    let output = run(&sc)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("trajectory.csv"), &output.trajectory_csv)?;
    std::fs::write(out.join("rc.log"), &output.rc_log)?;
    let mut events = String::new();
    for e in &output.events {
        events.push_str(&serde_json::to_string(e)?);
        events.push('\n');
    }
    std::fs::write(out.join("events.jsonl"), events)?;
    let report = serde_json::to_string_pretty(&output.report)?;
    std::fs::write(out.join("report.json"), format!("{report}\n"))?;
    println!("{report}");
    Ok(if output.report.success() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// Minimal blocking client for the line protocol.
struct Client {
    stream: TcpStream,
    reader: BufReader<TcpStream>,
    next_id: u64,
    /// Events seen while waiting for replies.
    events: Vec<Value>,
}

impl Client {
    fn connect(addr: SocketAddr) -> Result<Client> {
        let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(3)).with_context(|| format!("connecting to {addr}"))?;
        stream.set_read_timeout(Some(Duration::from_secs(10)))?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Client { stream, reader, next_id: 1, events: Vec::new() })
    }

    fn read(&mut self) -> Result<Value> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            bail!("service closed the connection");
        }
        Ok(serde_json::from_str(&line)?)
    }

    fn request(&mut self, mut msg: Value) -> Result<Value> {
        let id = self.next_id;
        self.next_id += 1;
        msg["v"] = json!(1);
        msg["id"] = json!(id);
        writeln!(self.stream, "{msg}")?;
        loop {
            let reply = self.read()?;
            match reply["type"].as_str() {
                Some("event") => self.events.push(reply["event"].clone()),
                Some("ack") if reply["id"] == id => return Ok(reply["result"].clone()),
                Some("error") if reply["id"] == id => {
                    let field = reply["field"].as_str().map(|f| format!(" (at {f})")).unwrap_or_default();
                    bail!("{}{field}", reply["reason"].as_str().unwrap_or("request failed"));
                }
                _ => {}
            }
        }
    }

    fn command(&mut self, drone: u32, transition: &str) -> Result<Value> {
        self.request(json!({ "type": "command", "drone_id": drone, "transition": transition }))
    }

    /// Reads snapshots until `done` accepts one of them.
    fn wait_for(&mut self, deadline: Instant, mut done: impl FnMut(&Value, &[Value]) -> bool) -> Result<()> {
        loop {
            if Instant::now() > deadline {
                bail!("timed out");
            }
            let msg = self.read()?;
            if msg["type"] == "event" {
                self.events.push(msg["event"].clone());
            }
            if done(&msg, &self.events) {
                return Ok(());
            }
        }
    }
}

fn session_mode(snapshot: &Value, drone: u32) -> Option<String> {
    snapshot["snapshot"]["sessions"]
        .as_array()?
        .iter()
        .find(|s| s["drone_id"] == drone)
        .and_then(|s| s["mode"].as_str().map(str::to_string))
}

fn cmd_fly(path: &Path, drone: u32, api: Option<SocketAddr>, takeoff: bool, wait: bool, timeout: f64) -> Result<ExitCode> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let addr = match api {
        Some(a) => a,
        None => {
            let port = match std::env::var(API_PORT_ENV) {
                Ok(p) => p.parse().with_context(|| format!("{API_PORT_ENV}={p:?}"))?,
                Err(_) => DEFAULT_API_PORT,
            };
            SocketAddr::from(([127, 0, 0, 1], port))
        }
    };
    let deadline = Instant::now() + Duration::from_secs_f64(timeout);
    let mut client = Client::connect(addr)?;
    let uploaded = client.request(json!({ "type": "upload_path", "path": doc }))?;
    let path_id = uploaded["path_id"].as_str().unwrap_or_default().to_string();
    println!("uploaded {path_id:?} ({} s)", uploaded["duration"]);
    if wait || takeoff {
        client.request(json!({ "type": "subscribe" }))?;
    }
    if takeoff {
        let mut mode = None;
        client.wait_for(deadline, |m, _| {
            mode = session_mode(m, drone);
            mode.is_some()
        })?;
        if mode.as_deref() == Some("idle") {
            client.command(drone, "arm")?;
            client.command(drone, "takeoff")?;
            client.wait_for(deadline, |m, _| session_mode(m, drone).as_deref() == Some("hover"))?;
            println!("drone {drone} airborne");
        }
    }
    let r = client.request(json!({ "type": "set_mode", "drone_id": drone, "mode": "scripted", "path_id": path_id }))?;
    println!("drone {drone} mode {}", r["mode"]);
    if wait {
        let mut failed = None;
        client.wait_for(deadline, |_, events| {
            events.iter().any(|e| {
                if e["drone_id"] != drone {
                    return false;
                }
                if e["event"] == "failsafe" {
                    failed = Some(e["reason"].as_str().unwrap_or("failsafe").to_string());
                }
                failed.is_some() || (e["event"] == "path_complete" && e["path_id"] == path_id.as_str())
            })
        })?;
        if let Some(reason) = failed {
            eprintln!("drone {drone} entered failsafe: {reason}");
            return Ok(ExitCode::from(1));
        }
        println!("path {path_id:?} complete");
    }
    Ok(ExitCode::SUCCESS)
}
