//! Runs alone in its own binary: with other tests sharing the process the
//! scheduler, not the service, would dominate the measurement.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use dronos::api::{serve, ServiceConfig};
use serde_json::Value;

#[test]
fn fifty_subscribers_leave_the_tick_period_alone() {
    let cfg = ServiceConfig { api_port: 0, track_port: 0, msp_port: 0, ..Default::default() };
    let svc = serve(cfg, 2).unwrap();
    let mut clients: Vec<BufReader<TcpStream>> = (0..50)
        .map(|i| {
            let mut s = TcpStream::connect(svc.api_addr()).unwrap();
            s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
            writeln!(s, r#"{{"v":1,"id":{i},"type":"subscribe"}}"#).unwrap();
            BufReader::new(s)
        })
        .collect();
    let mut line = String::new();
    let mut next = |c: &mut BufReader<TcpStream>| -> Value {
        line.clear();
        c.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap()
    };
    for c in &mut clients {
        assert_eq!(next(c)["type"], "ack");
    }
    // every subscriber is live before measuring
    for c in &mut clients {
        while next(c)["type"] != "snapshot" {}
    }
    svc.reset_stats();
    let start = Instant::now();
    let mut received = 0;
    while start.elapsed() < Duration::from_secs(3) {
        for c in &mut clients {
            if next(c)["type"] == "snapshot" {
                received += 1;
            }
        }
    }
    let stats = svc.stats();
    assert!(received >= 50 * 80, "subscribers starved: {received} snapshots");
    assert!(stats.ticks >= 140, "only {} ticks in 3 s", stats.ticks);
    let jitter = stats.max_jitter();
    assert!(jitter <= 0.2, "tick jitter {:.1}% ({stats:?})", jitter * 100.0);
    assert!((stats.mean_interval - 0.02).abs() < 0.001, "{stats:?}");
}
