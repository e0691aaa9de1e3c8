//! The simulated world and its fixed-step loop.
//!
//! One tick runs every vehicle's pre-step (loads, motor control, wheel
//! friction), the rigid-body step with contacts, then the post-step: sensors,
//! wheel spin and odometry, terrain attitude, CSV logs and topic messages.

use std::path::{Path, PathBuf};

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::geometry::{rotate_z, Pose2, Vec2};
use crate::physics2d::{apply_force_at, detect_with, integrate_positions, integrate_velocities, resolve, RigidBody2D};
use crate::sensors::{scan, LaserScan, LidarConfig, RateScheduler, RayScene, SensorRng};
use crate::terrain::ElevationGrid;
use crate::vehicle::{CsvLogger, VehicleError, VehicleModel};
use crate::worldfile::WorldDefinition;

pub const SERVICES: [&str; 6] =
    ["world/pause", "world/resume", "world/step_once", "world/info", "vehicle/set_twist", "vehicle/teleport"];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("vehicle {vehicle:?}: {source}")]
    Vehicle { vehicle: String, source: VehicleError },
    #[error("{0}")]
    Build(String),
}

/// Failure of a service call; `code` travels on the wire.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{code}: {message}")]
pub struct ServiceError {
    pub code: &'static str,
    pub message: String,
}

impl ServiceError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

/// A topic message produced by the simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub topic: String,
    pub type_name: &'static str,
    pub payload: Value,
}

#[derive(Debug)]
pub struct Lidar {
    pub vehicle: usize,
    pub cfg: LidarConfig,
    rng: SensorRng,
    sched: RateScheduler,
    pub last: Option<LaserScan>,
}

#[derive(Debug)]
pub struct World {
    pub dt: f64,
    pub gravity: f64,
    pub seed: u64,
    pub realtime_factor: f64,
    pub bodies: Vec<RigidBody2D>,
    pub vehicles: Vec<VehicleModel>,
    /// Block names and body indices.
    pub blocks: Vec<(String, usize)>,
    pub lidars: Vec<Lidar>,
    pub elevation: Option<ElevationGrid>,
    ticks: u64,
    paused: bool,
    parallel: bool,
    publish: RateScheduler,
}

/// Runs `f` over every item, on the rayon pool when `parallel` is set and
/// the feature is enabled. Output order always follows input order.
fn map_mut<T: Send, R: Send>(items: &mut [T], parallel: bool, f: impl Fn(&mut T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    if parallel {
        return items.par_iter_mut().map(f).collect();
    }
    let _ = parallel;
    items.iter_mut().map(f).collect()
}

impl World {
    /// Builds the runtime world. Relative CSV log paths resolve against
    /// `log_root`.
    pub fn new(def: &WorldDefinition, log_root: &Path) -> Result<Self, SimError> {
        let mut bodies = Vec::new();
        let mut blocks = Vec::new();
        for b in &def.blocks {
            let body = if b.is_static {
                RigidBody2D::new_static(b.shape.clone(), b.pose)
            } else {
                RigidBody2D::new_dynamic(b.shape.clone(), b.pose, b.mass, b.izz, b.shape.centroid())
            };
            blocks.push((b.name.clone(), bodies.len()));
            bodies.push(body);
        }

        let mut vehicles = Vec::new();
        let mut lidars = Vec::new();
        for spec in &def.vehicles {
            let idx = bodies.len();
            let wrap = |source| SimError::Vehicle { vehicle: spec.name.clone(), source };
            let mut chassis = RigidBody2D::new_dynamic(spec.shape.clone(), spec.pose, spec.total_mass(), spec.izz, spec.com);
            let (v_local, omega) = spec.initial_velocity;
            chassis.set_reference_velocity(rotate_z(v_local, spec.pose.yaw), omega);

            let mut v = VehicleModel::new(
                &spec.name,
                idx,
                spec.chassis_mass,
                spec.wheels.clone(),
                spec.kinematics,
                spec.pid,
                spec.friction,
            )
            .map_err(wrap)?;
            // Wheels start rolling with the initial velocity.
            for w in &mut v.wheels {
                let vc = v_local + Vec2::new(-omega * w.mount.y, omega * w.mount.x);
                w.omega = vc.x / w.radius;
            }
            v.set_twist(spec.twist.v, spec.twist.omega).map_err(wrap)?;
            v.odom_pose = spec.pose;
            if let Some(log) = &spec.log {
                let path: PathBuf = if log.is_absolute() { log.clone() } else { log_root.join(log) };
                v.logger = Some(CsvLogger::create(&path).map_err(wrap)?);
            }
            for cfg in &spec.lidars {
                lidars.push(Lidar {
                    vehicle: vehicles.len(),
                    rng: SensorRng::for_sensor(def.seed, &format!("{}/{}", spec.name, cfg.name)),
                    sched: RateScheduler::new(cfg.rate),
                    cfg: cfg.clone(),
                    last: None,
                });
            }
            bodies.push(chassis);
            vehicles.push(v);
        }

        let mut world = Self {
            dt: def.dt,
            gravity: def.gravity,
            seed: def.seed,
            realtime_factor: def.realtime_factor,
            bodies,
            vehicles,
            blocks,
            lidars,
            elevation: def.elevation.clone(),
            ticks: 0,
            paused: false,
            parallel: cfg!(feature = "parallel"),
            publish: RateScheduler::new(def.publish_rate),
        };
        world.update_attitudes();
        Ok(world)
    }

    pub fn time(&self) -> f64 {
        self.ticks as f64 * self.dt
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    /// Selects data-parallel or sequential execution; results are identical.
    pub fn set_parallel(&mut self, parallel: bool) {
        self.parallel = parallel && cfg!(feature = "parallel");
    }

    pub fn vehicle_index(&self, name: &str) -> Option<usize> {
        self.vehicles.iter().position(|v| v.name == name)
    }

    pub fn chassis(&self, vehicle: usize) -> &RigidBody2D {
        &self.bodies[self.vehicles[vehicle].body]
    }

    /// Topics this world publishes, with their type names.
    pub fn topics(&self) -> Vec<(String, &'static str)> {
        let mut t = vec![("clock".to_string(), "Clock")];
        for v in &self.vehicles {
            t.push((format!("{}/pose", v.name), "Pose"));
            t.push((format!("{}/odom", v.name), "Odometry"));
        }
        for l in &self.lidars {
            t.push((l.cfg.topic.clone(), "LaserScan"));
        }
        t
    }

    /// Advances one tick and returns the messages it produced.
    pub fn step(&mut self) -> Result<Vec<Message>, SimError> {
        let (dt, g) = (self.dt, self.gravity);

        let bodies = &self.bodies;
        let forces = map_mut(&mut self.vehicles, self.parallel, |v| v.pre_timestep(&bodies[v.body], dt, g));
        for (v, f) in self.vehicles.iter().zip(forces) {
            let f = f.map_err(|source| SimError::Vehicle { vehicle: v.name.clone(), source })?;
            for (force, point) in f {
                apply_force_at(&mut self.bodies[v.body], force, point);
            }
        }

        integrate_velocities(&mut self.bodies, dt);
        let contacts = detect_with(&self.bodies, self.parallel);
        resolve(&contacts, &mut self.bodies, dt);
        integrate_positions(&mut self.bodies, dt);
        self.ticks += 1;

        self.post_timestep()
    }

    fn post_timestep(&mut self) -> Result<Vec<Message>, SimError> {
        let t = self.time();
        let mut out = Vec::new();

        let due: Vec<usize> = (0..self.lidars.len()).filter(|&i| self.lidars[i].sched.due(t)).collect();
        if !due.is_empty() {
            let scene = RayScene::from_bodies(&self.bodies);
            let (bodies, vehicles) = (&self.bodies, &self.vehicles);
            let mut jobs: Vec<(&mut Lidar, Pose2, usize)> = self
                .lidars
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| due.contains(i))
                .map(|(_, l)| {
                    let body = vehicles[l.vehicle].body;
                    let pose = bodies[body].pose.compose(&l.cfg.mount);
                    (l, pose, body)
                })
                .collect();
            map_mut(&mut jobs, self.parallel, |(l, pose, body)| {
                l.last = Some(scan(&l.cfg, &scene, pose, Some(*body), &mut l.rng, t));
            });
            let due_lidars = jobs.into_iter().map(|j| j.0);
            for l in due_lidars {
                let payload = serde_json::to_value(l.last.as_ref().expect("just scanned")).expect("scan serializes");
                out.push(Message { topic: l.cfg.topic.clone(), type_name: "LaserScan", payload });
            }
        }

        for v in &mut self.vehicles {
            v.post_timestep(self.dt);
        }
        self.update_attitudes();

        for v in &mut self.vehicles {
            let chassis = &self.bodies[v.body];
            if let Some(mut log) = v.logger.take() {
                let r = log.log(v, chassis, t);
                v.logger = Some(log);
                r.map_err(|source| SimError::Vehicle { vehicle: v.name.clone(), source })?;
            }
        }

        if self.publish.due(t) {
            out.push(Message { topic: "clock".into(), type_name: "Clock", payload: json!({ "t": t }) });
            for v in &self.vehicles {
                let b = &self.bodies[v.body];
                let vel = b.velocity_at(b.pose.translation());
                let a = &v.attitude;
                out.push(Message {
                    topic: format!("{}/pose", v.name),
                    type_name: "Pose",
                    payload: json!({
                        "stamp": t, "x": b.pose.x, "y": b.pose.y, "yaw": b.pose.yaw,
                        "z": a.z, "pitch": a.pitch, "roll": a.roll,
                        "vx": vel.x, "vy": vel.y, "omega": b.omega,
                    }),
                });
                let o = &v.odom_pose;
                out.push(Message {
                    topic: format!("{}/odom", v.name),
                    type_name: "Odometry",
                    payload: json!({ "stamp": t, "x": o.x, "y": o.y, "yaw": o.yaw }),
                });
            }
        }
        Ok(out)
    }

    fn update_attitudes(&mut self) {
        if let Some(grid) = &self.elevation {
            for v in &mut self.vehicles {
                v.update_attitude(&self.bodies[v.body], grid);
            }
        }
    }

    /// Runs `n` ticks, discarding messages.
    pub fn run_ticks(&mut self, n: u64) -> Result<(), SimError> {
        for _ in 0..n {
            self.step()?;
        }
        Ok(())
    }

    pub fn flush_logs(&mut self) -> Result<(), SimError> {
        for v in &mut self.vehicles {
            if let Some(log) = &mut v.logger {
                log.flush().map_err(|source| SimError::Vehicle { vehicle: v.name.clone(), source })?;
            }
        }
        Ok(())
    }

    /// Handles a simulator service call. `world/step_once` may produce
    /// messages, which are returned alongside the reply.
    pub fn call_service(&mut self, service: &str, req: &Value) -> Result<(Value, Vec<Message>), ServiceError> {
        match service {
            "world/pause" => {
                self.paused = true;
                Ok((json!({ "ok": true }), Vec::new()))
            }
            "world/resume" => {
                self.paused = false;
                Ok((json!({ "ok": true }), Vec::new()))
            }
            "world/step_once" => {
                let msgs = self.step().map_err(|e| ServiceError::new("SimulationError", e.to_string()))?;
                Ok((json!({ "ok": true, "time": self.time() }), msgs))
            }
            "world/info" => Ok((self.info(), Vec::new())),
            "vehicle/set_twist" => {
                let i = self.vehicle_arg(req)?;
                let v = number(req, "v")?;
                let omega = number(req, "omega")?;
                self.vehicles[i]
                    .set_twist(v, omega)
                    .map_err(|e| ServiceError::new("SteerLimit", e.to_string()))?;
                Ok((json!({ "ok": true }), Vec::new()))
            }
            "vehicle/teleport" => {
                let i = self.vehicle_arg(req)?;
                let pose = Pose2::new(number(req, "x")?, number(req, "y")?, number(req, "yaw")?);
                let v = &mut self.vehicles[i];
                let b = &mut self.bodies[v.body];
                b.pose = pose;
                b.vel = Vec2::ZERO;
                b.omega = 0.0;
                for (w, pid) in v.wheels.iter_mut().zip(v.pid_states.iter_mut()) {
                    w.omega = 0.0;
                    pid.reset();
                }
                v.odom_pose = pose;
                self.update_attitudes();
                Ok((json!({ "ok": true }), Vec::new()))
            }
            other => Err(ServiceError::new("NoSuchService", format!("unknown service {other:?}"))),
        }
    }

    fn vehicle_arg(&self, req: &Value) -> Result<usize, ServiceError> {
        let name = req
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| ServiceError::new("BadRequest", "missing string field \"name\""))?;
        self.vehicle_index(name)
            .ok_or_else(|| ServiceError::new("NoSuchVehicle", format!("no vehicle named {name:?}")))
    }

    pub fn info(&self) -> Value {
        let vehicles: Vec<Value> = self
            .vehicles
            .iter()
            .map(|v| {
                let p = self.bodies[v.body].pose;
                json!({ "name": v.name, "x": p.x, "y": p.y, "yaw": p.yaw, "v": v.cmd.v, "omega": v.cmd.omega })
            })
            .collect();
        let blocks: Vec<&str> = self.blocks.iter().map(|(n, _)| n.as_str()).collect();
        json!({
            "time": self.time(),
            "dt": self.dt,
            "paused": self.paused,
            "seed": self.seed,
            "realtime_factor": self.realtime_factor,
            "vehicles": vehicles,
            "blocks": blocks,
        })
    }
}

fn number(req: &Value, field: &str) -> Result<f64, ServiceError> {
    req.get(field)
        .and_then(Value::as_f64)
        .ok_or_else(|| ServiceError::new("BadRequest", format!("missing numeric field {field:?}")))
}
