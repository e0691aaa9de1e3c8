//! `sim launch`: the fixed-step loop runs on its own thread while a tokio
//! runtime beside it hosts the comms server.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc as std_mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fleetsim_comms::{Client, Server, SimQueue};
use fleetsim_core::world::{Message, SimError, World, SERVICES};
use fleetsim_core::worldfile::{load_world, process_env};
use serde_json::Value;
use tokio::sync::oneshot;

use crate::{LaunchOptions, EXIT_BIND, EXIT_FAILURE, EXIT_OK, EXIT_PARSE};

/// Messages buffered between the simulation and the broker.
const QUEUE: usize = 4096;

type ServiceReply = Result<Value, (String, String)>;
type ServiceJob = (String, Value, oneshot::Sender<ServiceReply>);

#[derive(Debug, Clone, Copy)]
pub struct RunSummary {
    pub ticks: u64,
    pub sim_time: f64,
    pub wall: f64,
}

/// Drives `world` until `duration` simulated seconds have elapsed or `stop`
/// is raised. With `rtf > 0` each tick waits for its absolute wall-clock
/// deadline, so sleep overshoot never accumulates.
pub fn run_loop(
    world: &mut World,
    rtf: f64,
    duration: Option<f64>,
    stop: &AtomicBool,
    mut publish: impl FnMut(Message),
    services: &std_mpsc::Receiver<ServiceJob>,
) -> Result<RunSummary, SimError> {
    let target = duration.map(|d| (d / world.dt).round() as u64);
    let start = Instant::now();
    let mut base = (start, world.ticks());
    let serve = |world: &mut World, (name, req, reply): ServiceJob, publish: &mut dyn FnMut(Message)| {
        let result = world.call_service(&name, &req).map(|(v, msgs)| {
            msgs.into_iter().for_each(&mut *publish);
            v
        });
        let _ = reply.send(result.map_err(|e| (e.code.to_string(), e.message)));
    };

    while !stop.load(Ordering::Relaxed) {
        while let Ok(job) = services.try_recv() {
            serve(world, job, &mut publish);
            base = (Instant::now(), world.ticks());
        }
        if target.is_some_and(|n| world.ticks() >= n) {
            break;
        }
        if world.is_paused() {
            if let Ok(job) = services.recv_timeout(Duration::from_millis(20)) {
                serve(world, job, &mut publish);
            }
            base = (Instant::now(), world.ticks());
            continue;
        }
        for m in world.step()? {
            publish(m);
        }
        if rtf > 0.0 {
            let ahead = (world.ticks() - base.1) as f64 * world.dt / rtf;
            let deadline = base.0 + Duration::from_secs_f64(ahead);
            let now = Instant::now();
            if deadline > now {
                std::thread::sleep(deadline - now);
            }
        }
    }
    world.flush_logs()?;
    Ok(RunSummary { ticks: world.ticks(), sim_time: world.time(), wall: start.elapsed().as_secs_f64() })
}

async fn serve_services(client: Arc<Client>, jobs: std_mpsc::Sender<ServiceJob>) {
    let mut requests = client.service_requests();
    while let Some(req) = requests.recv().await {
        let (tx, rx) = oneshot::channel();
        let finished = || Err(("SimulationError".to_string(), "simulation has finished".to_string()));
        let result = if jobs.send((req.service.clone(), req.payload.clone(), tx)).is_ok() {
            rx.await.unwrap_or_else(|_| finished())
        } else {
            finished()
        };
        if client.reply(&req, result).await.is_err() {
            break;
        }
    }
}

async fn forward(queue: Arc<SimQueue<Value>>, client: Arc<Client>) {
    while let Some((topic, payload)) = queue.pop().await {
        if let Err(e) = client.publish(&topic, payload).await {
            log::warn!("publishing {topic}: {e}");
            break;
        }
    }
}

async fn interrupted() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

pub fn launch(opts: &LaunchOptions) -> i32 {
    let mut def = match load_world(&opts.world, &process_env()) {
        Ok(def) => def,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_PARSE;
        }
    };
    if let Some(seed) = opts.seed {
        def.seed = seed;
    }
    let rtf = opts.rtf.unwrap_or(def.realtime_factor);
    if !(rtf.is_finite() && rtf >= 0.0) {
        eprintln!("sim: --rtf must be a finite number >= 0");
        return EXIT_FAILURE;
    }
    if opts.duration.is_some_and(|d| !(d.is_finite() && d >= 0.0)) {
        eprintln!("sim: --duration must be a finite number >= 0");
        return EXIT_FAILURE;
    }
    if let Err(e) = std::fs::create_dir_all(&opts.log_dir) {
        eprintln!("sim: cannot create log directory {}: {e}", opts.log_dir.display());
        return EXIT_FAILURE;
    }
    let mut world = match World::new(&def, &opts.log_dir) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("{}: {e}", opts.world.display());
            return EXIT_FAILURE;
        }
    };
    world.set_parallel(!opts.sequential);

    let rt = match tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("sim: cannot start runtime: {e}");
            return EXIT_FAILURE;
        }
    };
    let _guard = rt.enter();
    let tcp = format!("{}:{}", opts.host, opts.port);
    let ws = format!("{}:{}", opts.host, opts.ws_port);
    let server = match rt.block_on(Server::start(&tcp, &ws)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("sim: {e}");
            return EXIT_BIND;
        }
    };
    log::info!("listening on tcp {} and websocket {}", server.tcp_addr(), server.ws_addr());

    let client = Arc::new(server.local_client("sim"));
    let registered = rt.block_on(async {
        for (topic, type_name) in world.topics() {
            client.advertise(&topic, type_name).await?;
        }
        for service in SERVICES {
            client.advertise_service(service).await?;
        }
        Ok::<_, fleetsim_comms::CommsError>(())
    });
    if let Err(e) = registered {
        eprintln!("sim: registering topics: {e}");
        return EXIT_FAILURE;
    }

    let queue = Arc::new(SimQueue::new(QUEUE));
    let (jobs_tx, jobs_rx) = std_mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let forwarder = rt.spawn(forward(queue.clone(), client.clone()));
    rt.spawn(serve_services(client.clone(), jobs_tx));
    {
        let stop = stop.clone();
        rt.spawn(async move {
            interrupted().await;
            stop.store(true, Ordering::Relaxed);
        });
    }

    let duration = opts.duration;
    let sim = {
        let (queue, stop) = (queue.clone(), stop.clone());
        std::thread::Builder::new()
            .name("sim".into())
            .spawn(move || {
                let r = run_loop(&mut world, rtf, duration, &stop, |m| {
                    queue.push(&m.topic, m.payload);
                }, &jobs_rx);
                (r, world.vehicles.len())
            })
            .expect("spawn simulation thread")
    };
    let (result, n_vehicles) = sim.join().expect("simulation thread panicked");

    queue.close();
    let _ = rt.block_on(async { tokio::time::timeout(Duration::from_secs(2), forwarder).await });
    server.shutdown();
    drop(server);
    rt.shutdown_timeout(Duration::from_millis(200));

    match result {
        Ok(s) => {
            eprintln!(
                "sim: {} vehicles, {} ticks, {:.3} s simulated in {:.3} s wall ({:.3}x realtime), {} messages dropped",
                n_vehicles,
                s.ticks,
                s.sim_time,
                s.wall,
                if s.wall > 0.0 { s.sim_time / s.wall } else { f64::INFINITY },
                queue.dropped(),
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("sim: {e}");
            EXIT_FAILURE
        }
    }
}
