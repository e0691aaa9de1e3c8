//! Acceptance criteria A1-A11. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::HashMap;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use fleetsim_comms::{Client, Server};
use fleetsim_core::geometry::{Pose2, Vec2};
use fleetsim_core::physics2d::{ConvexPolygon, RigidBody2D};
use fleetsim_core::sensors::{scan, LidarConfig, RayScene, SensorRng};
use fleetsim_core::vehicle::friction::{friction_step, FrictionParams, RollingParams};
use fleetsim_core::vehicle::Wheel;
use fleetsim_core::world::World;
use fleetsim_core::worldfile::{load_world, preprocess, preprocess_file};
use serde_json::json;

type Outcome = Result<String, String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn world_path(name: &str) -> PathBuf {
    root().join("worlds").join(name)
}

fn env(vars: &[(&str, &str)]) -> HashMap<String, String> {
    vars.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn load(name: &str, vars: &[(&str, &str)], logs: &Path) -> World {
    let def = load_world(&world_path(name), &env(vars)).unwrap_or_else(|e| panic!("{e}"));
    World::new(&def, logs).unwrap_or_else(|e| panic!("{e}"))
}

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Csv {
    fn read(path: &Path) -> Csv {
        let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let mut lines = text.lines();
        let header = lines.next().unwrap().split(',').map(str::to_string).collect();
        let rows = lines.map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
        Csv { header, rows }
    }

    fn col(&self, name: &str) -> usize {
        self.header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
    }

    fn slip_flags(&self) -> usize {
        let cols: Vec<usize> = (0..self.header.len()).filter(|&i| self.header[i].contains("_slip_")).collect();
        assert!(!cols.is_empty());
        self.rows.iter().map(|r| cols.iter().filter(|&&c| r[c] != 0.0).count()).sum()
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn a1_no_slip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let mut w = load("diff_robot.xml", &[("V", "0.5"), ("MU", "1.0"), ("LOG", "r1.csv")], dir.path());
    w.run_ticks(10_000).unwrap();
    w.flush_logs().unwrap();
    let runtime = t0.elapsed().as_secs_f64();
    let gt = w.chassis(0).pose;
    let od = w.vehicles[0].odom_pose;
    let err = (gt.x - od.x).hypot(gt.y - od.y);
    let err_yaw = (gt.yaw - od.yaw).abs().to_degrees();
    let csv = Csv::read(&dir.path().join("r1.csv"));
    let slips = csv.slip_flags();
    check(
        w.time() >= 10.0 - 1e-9 && slips == 0 && err < 1e-3 && err_yaw < 0.01 && runtime < 5.0,
        format!("slip flags {slips}, position error {err:.2e} m, heading error {err_yaw:.2e} deg, {runtime:.2} s"),
    )
}

fn a2_slip_divergence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut w = load("diff_robot.xml", &[("V", "0.5"), ("MU", "0.05"), ("TAU_MAX", "1000"), ("LOG", "r1.csv")], dir.path());
    let start = w.chassis(0).pose;
    w.run_ticks(10_000).unwrap();
    w.flush_logs().unwrap();
    let gt = w.chassis(0).pose;
    let od = w.vehicles[0].odom_pose;
    let truth = (gt.x - start.x).hypot(gt.y - start.y);
    let odom = (od.x - start.x).hypot(od.y - start.y);
    let slips = Csv::read(&dir.path().join("r1.csv")).slip_flags();
    let ratio = odom / truth;
    check(slips > 0 && ratio > 1.05, format!("slip flags {slips}, odometry {odom:.4} m vs true {truth:.4} m, ratio {ratio:.4}"))
}

fn a3_lateral_stop() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut w = load("diff_robot.xml", &[("VY", "1"), ("MU", "0.5")], dir.path());
    let y0 = w.chassis(0).pose.y;
    let (mu, g) = (0.5, 9.81);
    let want = 1.0 / (2.0 * mu * g);
    for _ in 0..5000 {
        w.step().unwrap();
    }
    let d = w.chassis(0).pose.y - y0;
    let speed = w.chassis(0).vel.norm();
    let rel = (d - want).abs() / want;
    check(rel < 0.05 && speed < 1e-6, format!("stopped after {d:.5} m, closed form {want:.5} m, off by {:.2}%", rel * 100.0))
}

fn a4_moment_balance() -> Outcome {
    let mut rng = SensorRng::new(2024);
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.uniform();
    let (mut rolling_branch, mut slipping_branch) = (0usize, 0usize);
    let mut worst = 0.0f64;
    let mut bound_violations = 0usize;
    let t0 = Instant::now();
    for _ in 0..100_000 {
        let radius = u(0.05, 0.6);
        let iy = u(0.001, 0.5);
        let mut wheel = Wheel::new("w", Pose2::default(), radius, 0.1, 1.0, Some(iy));
        wheel.omega = u(-20.0, 20.0);
        wheel.tau_m = u(-50.0, 50.0);
        let load = u(0.0, 500.0);
        let mu = u(0.0, 1.2);
        let c_damping = u(0.0, 0.1);
        let rolling = (u(0.0, 1.0) < 0.5).then(|| RollingParams { r1: u(0.0, 0.05), r2: u(0.0, 0.01), v_alpha: u(0.01, 0.5) });
        let params = FrictionParams { mu, c_damping, rolling };
        let v = Vec2::new(u(-5.0, 5.0), u(-1.0, 1.0));
        let dt = u(1e-4, 1e-2);
        let out = friction_step(v, &wheel, load, &params, dt, 9.81);

        let f_r = rolling.map_or(0.0, |p| -load * (p.r1 * (v.x / p.v_alpha).tanh() + p.r2 * v.x));
        let tau = wheel.tau_m - c_damping * wheel.omega;
        let residual = tau - out.omega_dot * iy + radius * f_r - radius * out.fx;
        worst = worst.max(residual.abs());
        if out.fx.abs() > mu * load {
            bound_violations += 1;
        }
        if out.slipped_long {
            slipping_branch += 1;
        } else {
            rolling_branch += 1;
        }
    }
    let runtime = t0.elapsed().as_secs_f64();
    check(
        worst < 1e-9 && bound_violations == 0 && rolling_branch > 1000 && slipping_branch > 1000 && runtime < 1.0,
        format!(
            "max residual {worst:.2e} N m, {rolling_branch} rolling / {slipping_branch} slipping, |Fx| > mu W {bound_violations} times, {runtime:.3} s"
        ),
    )
}

fn a5_slope_attitude() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let w = load("slope.xml", &[], dir.path());
    let att = w.vehicles[0].attitude;
    let dp = (att.pitch - 10f64.to_radians()).abs();
    check(dp < 1e-4 && att.roll.abs() < 1e-6, format!("pitch error {dp:.2e} rad, roll {:.2e} rad", att.roll))
}

/// Algebraic least-squares circle fit: x^2 + y^2 + D x + E y + F = 0.
fn kasa_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let mut a = [[0.0f64; 4]; 3];
    for &(x, y) in points {
        let row = [x, y, 1.0];
        let rhs = -(x * x + y * y);
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += row[i] * row[j];
            }
            a[i][3] += row[i] * rhs;
        }
    }
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        for r in 0..3 {
            if r != col {
                let k = a[r][col] / a[col][col];
                for c in col..4 {
                    a[r][c] -= k * a[col][c];
                }
            }
        }
    }
    let (d, e, f) = (a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]);
    let (cx, cy) = (-d / 2.0, -e / 2.0);
    (cx, cy, (cx * cx + cy * cy - f).sqrt())
}

fn a6_turn_radius() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut w = load("diff_robot.xml", &[("V", "0.5"), ("OMEGA", "0.5"), ("MU", "1.0"), ("LOG", "r1.csv")], dir.path());
    w.run_ticks(20_000).unwrap();
    w.flush_logs().unwrap();
    let csv = Csv::read(&dir.path().join("r1.csv"));
    let (t, x, y) = (csv.col("t"), csv.col("x"), csv.col("y"));
    let points: Vec<(f64, f64)> = csv.rows.iter().filter(|r| r[t] >= 15.0).map(|r| (r[x], r[y])).collect();
    let (_, _, radius) = kasa_fit(&points);
    let rel = (radius - 1.0).abs();
    check(points.len() > 1000 && rel < 0.02, format!("fitted radius {radius:.5} m over {} samples", points.len()))
}

fn a7_parser_corpus() -> Outcome {
    let data = root().join("crates/core/tests/data/preprocess");
    let vars = env(&[("ROBOT", "alpha"), ("SPEED", "0.25")]);
    let mut inputs: Vec<PathBuf> = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "xml"))
        .collect();
    inputs.sort();
    let mut failures = Vec::new();
    for input in &inputs {
        let name = input.file_name().unwrap().to_string_lossy().to_string();
        match preprocess_file(input, &vars) {
            Ok(once) => {
                let want = fs::read_to_string(input.with_extension("expected")).unwrap();
                if once != want {
                    failures.push(format!("{name} differs from golden"));
                }
                if preprocess(&once, &vars, &data).ok().as_deref() != Some(once.as_str()) {
                    failures.push(format!("{name} not idempotent"));
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    let mut worlds = 0;
    for entry in fs::read_dir(root().join("worlds")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "xml") {
            worlds += 1;
            if let Err(e) = load_world(&path, &HashMap::new()) {
                failures.push(e.to_string());
            }
        }
    }
    check(
        failures.is_empty() && inputs.len() >= 5 && worlds >= 6,
        if failures.is_empty() {
            format!("{} golden files byte-exact and idempotent, {worlds} worlds parse", inputs.len())
        } else {
            failures.join("; ")
        },
    )
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn sim() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sim"));
    c.env_remove("MVS_PORT").env_remove("MVS_WS_PORT");
    c
}

struct Running(Child);

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn launch_in_background(world: &str, logs: &Path) -> (Running, String) {
    let (port, ws) = (free_port(), free_port());
    let child = sim()
        .args(["launch", world_path(world).to_str().unwrap(), "--headless"])
        .args(["--port", &port.to_string(), "--ws-port", &ws.to_string()])
        .arg("--log-dir")
        .arg(logs)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let addr = format!("127.0.0.1:{port}");
    let deadline = Instant::now() + Duration::from_secs(10);
    while Instant::now() < deadline {
        let up = sim().args(["topic", "list", "--server", &addr]).stdout(Stdio::null()).stderr(Stdio::null()).status();
        if up.is_ok_and(|s| s.success()) {
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    (Running(child), addr)
}

async fn broker_throughput() -> Result<(f64, usize), String> {
    const PUBLISHERS: usize = 4;
    const PER: usize = 25_000;
    let server = Server::start("127.0.0.1:0", "127.0.0.1:0").await.map_err(|e| e.to_string())?;
    let addr = server.tcp_addr().to_string();
    let sub = Client::connect_tcp(&addr).await.map_err(|e| e.to_string())?;
    let mut stream = sub.subscribe("bulk").await.map_err(|e| e.to_string())?;
    let mut pubs = Vec::new();
    for _ in 0..PUBLISHERS {
        let c = Client::connect_tcp(&addr).await.map_err(|e| e.to_string())?;
        c.advertise("bulk", "Blob").await.map_err(|e| e.to_string())?;
        pubs.push(c);
    }
    let pad = "x".repeat(1000);
    let t0 = Instant::now();
    let senders: Vec<_> = pubs
        .into_iter()
        .enumerate()
        .map(|(p, c)| {
            let pad = pad.clone();
            tokio::spawn(async move {
                for i in 0..PER {
                    c.publish("bulk", json!({ "p": p, "i": i, "pad": pad })).await.unwrap();
                }
                c
            })
        })
        .collect();
    let mut next = [0usize; PUBLISHERS];
    let mut bytes = 0usize;
    let mut disorder = 0usize;
    for _ in 0..PUBLISHERS * PER {
        let d = tokio::time::timeout(Duration::from_secs(10), stream.recv())
            .await
            .map_err(|_| format!("stalled after {} messages", next.iter().sum::<usize>()))?
            .ok_or("subscription closed")?;
        let p = d.payload["p"].as_u64().unwrap() as usize;
        let i = d.payload["i"].as_u64().unwrap() as usize;
        bytes += d.payload["pad"].as_str().unwrap().len();
        if i != next[p] {
            disorder += 1;
        }
        next[p] = i + 1;
    }
    let rate = (PUBLISHERS * PER) as f64 / t0.elapsed().as_secs_f64();
    for s in senders {
        let _ = s.await;
    }
    if disorder > 0 || next.iter().any(|&n| n != PER) {
        return Err(format!("{disorder} out-of-order deliveries"));
    }
    assert!(bytes >= PUBLISHERS * PER * 1000);
    Ok((rate, PUBLISHERS * PER))
}

fn a8_comms() -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
    let (rate, n) = rt.block_on(broker_throughput())?;

    let dir = tempfile::tempdir().unwrap();
    let (_sim, addr) = launch_in_background("rate50.xml", dir.path());
    let out = sim().args(["topic", "hz", "clock", "--window", "3", "--server", &addr]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    let hz: f64 = text
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("unexpected topic hz output {text:?}"))?;
    let rel = (hz - 50.0).abs() / 50.0;
    check(
        rate >= 10_000.0 && rel < 0.05,
        format!("{n} x 1 KiB in order, lossless at {rate:.0} msg/s; topic hz reports {hz:.3} Hz"),
    )
}

fn summary_times(stderr: &str) -> Option<(f64, f64)> {
    let line = stderr.lines().rev().find(|l| l.starts_with("sim: ") && l.contains("s wall"))?;
    let words: Vec<&str> = line.split_whitespace().collect();
    let at = |w: &str| words.iter().position(|x| *x == w);
    let sim_t = words[at("simulated")? - 2].parse().ok()?;
    let wall = words[at("wall")? - 2].parse().ok()?;
    Some((sim_t, wall))
}

fn run_headless(world: &str, logs: &Path, extra: &[&str]) -> Result<String, String> {
    let out = sim()
        .args(["launch", world_path(world).to_str().unwrap(), "--headless"])
        .args(["--port", &free_port().to_string(), "--ws-port", &free_port().to_string()])
        .arg("--log-dir")
        .arg(logs)
        .args(extra)
        .output()
        .unwrap();
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    if out.status.success() {
        Ok(stderr)
    } else {
        Err(format!("launch exited with {:?}: {stderr}", out.status.code()))
    }
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir.join("logs"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().to_string(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn a9_determinism() -> Outcome {
    let runs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for dir in &runs {
        run_headless("warehouse.xml", dir.path(), &["--rtf", "0", "--seed", "42", "--duration", "5"])?;
    }
    let (a, b) = (csv_files(runs[0].path()), csv_files(runs[1].path()));
    let identical = !a.is_empty() && a == b && a.iter().all(|(_, bytes)| bytes.len() > 1000);

    let dir = tempfile::tempdir().unwrap();
    let stderr = run_headless("warehouse.xml", dir.path(), &["--rtf", "1", "--seed", "42", "--duration", "3"])?;
    let (sim_t, wall) = summary_times(&stderr).ok_or_else(|| format!("no summary line in {stderr:?}"))?;
    let rel = (wall - sim_t).abs() / sim_t;
    check(
        identical && rel < 0.05,
        format!("{} CSV logs identical: {identical}; rtf 1 ran {sim_t:.3} s in {wall:.3} s wall", a.len()),
    )
}

fn a10_lidar() -> Outcome {
    let half = 2.0;
    let wall = |x: f64, y: f64, l: f64, w: f64| RigidBody2D::new_static(ConvexPolygon::rectangle(l, w), Pose2::new(x, y, 0.0));
    let bodies = vec![
        wall(half + 0.1, 0.0, 0.2, 2.0 * half + 0.4),
        wall(-half - 0.1, 0.0, 0.2, 2.0 * half + 0.4),
        wall(0.0, half + 0.1, 2.0 * half + 0.4, 0.2),
        wall(0.0, -half - 0.1, 2.0 * half + 0.4, 0.2),
    ];
    let scene = RayScene::from_bodies(&bodies);
    let pose = Pose2::new(0.3, -0.5, 0.2);
    let analytic = |angle: f64| {
        let (c, s) = (angle.cos(), angle.sin());
        let mut best = f64::INFINITY;
        for (d, o, plane) in [(c, pose.x, half), (c, pose.x, -half), (s, pose.y, half), (s, pose.y, -half)] {
            if d != 0.0 {
                let t = (plane - o) / d;
                if t > 0.0 {
                    best = best.min(t);
                }
            }
        }
        best
    };
    let cfg = |rays: usize, sigma: f64| LidarConfig {
        name: "room".into(),
        mount: Pose2::default(),
        fov: 2.0 * std::f64::consts::PI,
        n_rays: rays,
        max_range: 10.0,
        rate: 10.0,
        noise_sigma: sigma,
        topic: "room/scan".into(),
    };
    let mut rng = SensorRng::new(5);
    let step = 2.0 * std::f64::consts::PI / 360.0;
    let clean = scan(&cfg(360, 0.0), &scene, &pose, None, &mut rng, 0.0);
    let worst = clean
        .ranges
        .iter()
        .enumerate()
        .map(|(i, r)| (r - analytic(pose.yaw - std::f64::consts::PI + step * i as f64)).abs())
        .fold(0.0, f64::max);

    let sigma = 0.01;
    let n = 10_000;
    let step = 2.0 * std::f64::consts::PI / n as f64;
    let noisy = scan(&cfg(n, sigma), &scene, &pose, None, &mut rng, 0.0);
    let errors: Vec<f64> = noisy
        .ranges
        .iter()
        .enumerate()
        .map(|(i, r)| r - analytic(pose.yaw - std::f64::consts::PI + step * i as f64))
        .collect();
    let mean = errors.iter().sum::<f64>() / n as f64;
    let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let rel = (std - sigma).abs() / sigma;
    check(worst < 1e-9 && rel < 0.10, format!("max geometric error {worst:.2e} m; noisy std {std:.5} m for sigma {sigma}"))
}

fn a11_swarm_rate() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut w = load("swarm.xml", &[], dir.path());
    let lidars = w.lidars.len();
    let rays: usize = w.lidars.iter().map(|l| l.cfg.n_rays).sum();
    w.run_ticks(50).unwrap();
    let ticks = 1000;
    let t0 = Instant::now();
    w.run_ticks(ticks).unwrap();
    let rate = ticks as f64 / t0.elapsed().as_secs_f64();
    check(
        w.vehicles.len() == 30 && lidars == 30 && rays == 30 * 180 && w.dt == 0.005 && rate >= 200.0,
        format!("{} vehicles, {rays} rays, {rate:.0} ticks/s ({:.1}x realtime)", w.vehicles.len(), rate * w.dt),
    )
}

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 11] = [
        ("A1", "no-slip odometry", a1_no_slip),
        ("A2", "slip divergence", a2_slip_divergence),
        ("A3", "lateral clamp stopping distance", a3_lateral_stop),
        ("A4", "wheel moment balance", a4_moment_balance),
        ("A5", "terrain attitude fit", a5_slope_attitude),
        ("A6", "turn radius", a6_turn_radius),
        ("A7", "world file corpus", a7_parser_corpus),
        ("A8", "comms throughput and topic hz", a8_comms),
        ("A9", "determinism and realtime pacing", a9_determinism),
        ("A10", "lidar geometry and noise", a10_lidar),
        ("A11", "swarm tick rate", a11_swarm_rate),
    ];
    let mut failed = 0;
    for (id, title, run) in criteria {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("{id} PASS {title}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {title}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of 11 criteria failed");
        std::process::exit(1);
    }
}
