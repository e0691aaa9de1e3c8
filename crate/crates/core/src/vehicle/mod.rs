//! Vehicles: a chassis rigid body plus wheels whose ground forces are
//! resolved analytically every tick.
//!
//! The world calls [`VehicleModel::pre_timestep`] to obtain wheel forces
//! before the rigid-body step and [`VehicleModel::post_timestep`] afterwards
//! to integrate wheel spin and dead-reckoned odometry.

pub mod control;
pub mod friction;
pub mod log;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use control::{pid_step, twist_to_setpoints, Kinematics, PidParams, PidState, Twist, WheelSetpoint};
pub use friction::{friction_step, rolling_resistance, FrictionOutcome, FrictionParams, RollingParams};
pub use log::{csv_header, csv_log_row, CsvLogger};

use crate::geometry::{horn_fit, rotate_z, symmetric_eigen, wrap_pi, PointPairSet, Pose2, Vec2, Vec3};
use crate::physics2d::RigidBody2D;
use crate::terrain::ElevationGrid;

#[derive(Debug, Error)]
pub enum VehicleError {
    #[error("unsupported wheel layout: {0}")]
    UnsupportedLayout(String),
    #[error("required steer angle {required:.4} rad exceeds limit {max:.4} rad")]
    SteerLimit { required: f64, max: f64 },
    #[error("invalid vehicle: {0}")]
    Invalid(String),
    #[error("log write failed: {0}")]
    IoFailure(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Wheel {
    pub name: String,
    /// Mount in the vehicle frame; `yaw` is the current steer angle.
    pub mount: Pose2,
    pub radius: f64,
    pub width: f64,
    pub mass: f64,
    /// Spin-axis inertia, kg m^2.
    pub iy: f64,
    pub phi: f64,
    pub omega: f64,
    pub tau_m: f64,
    pub steerable: bool,
    /// Normal load from the last pre-step, N.
    pub load: f64,
    pub outcome: FrictionOutcome,
}

impl Wheel {
    /// `iy` defaults to a uniform disc, `m R^2 / 2`.
    pub fn new(name: &str, mount: Pose2, radius: f64, width: f64, mass: f64, iy: Option<f64>) -> Self {
        Self {
            name: name.to_string(),
            mount,
            radius,
            width,
            mass,
            iy: iy.unwrap_or(0.5 * mass * radius * radius),
            phi: 0.0,
            omega: 0.0,
            tau_m: 0.0,
            steerable: false,
            load: 0.0,
            outcome: FrictionOutcome::default(),
        }
    }

    pub fn position(&self) -> Vec2 {
        self.mount.translation()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Attitude {
    pub z: f64,
    pub pitch: f64,
    pub roll: f64,
}

#[derive(Debug)]
pub struct VehicleModel {
    pub name: String,
    /// Index of the chassis in the world's body list.
    pub body: usize,
    pub chassis_mass: f64,
    pub wheels: Vec<Wheel>,
    pub kinematics: Kinematics,
    pub pid: PidParams,
    pub pid_states: Vec<PidState>,
    pub friction: FrictionParams,
    pub cmd: Twist,
    pub odom_pose: Pose2,
    pub attitude: Attitude,
    pub logger: Option<CsvLogger>,
}

/// Planar velocity of a wheel center: `v + omega z x mount`.
pub fn wheel_center_velocity(v: Vec2, omega: f64, mount_xy: Vec2) -> Vec2 {
    v + Vec2::new(-omega * mount_xy.y, omega * mount_xy.x)
}

/// Static normal load on each wheel, N.
///
/// The chassis share is the minimum-norm solution of force balance plus the
/// two moment balances about the chassis COM; each wheel then carries its own
/// weight on top. Rank-deficient layouts (two wheels, collinear wheels) fall
/// back to the least-squares split along the wheel line.
pub fn weight_on_wheels(
    wheels: &[Wheel],
    chassis_mass: f64,
    com: Vec2,
    g: f64,
) -> Result<Vec<f64>, VehicleError> {
    let n = wheels.len();
    if n < 2 {
        return Err(VehicleError::UnsupportedLayout(format!("{n} wheel(s); need at least 2")));
    }
    let w_total = chassis_mass * g;
    let rows: Vec<[f64; 3]> = wheels
        .iter()
        .map(|w| [1.0, w.mount.x - com.x, w.mount.y - com.y])
        .collect();
    let mut m = [[0.0; 3]; 3];
    for r in &rows {
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] += r[a] * r[b];
            }
        }
    }
    let (vals, vecs) = symmetric_eigen(m);
    let lmax = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    // lambda = pinv(A A^T) * [W, 0, 0]
    let mut lambda = [0.0; 3];
    for k in 0..3 {
        if vals[k].abs() > 1e-12 * lmax {
            let coef = vecs[0][k] * w_total / vals[k];
            for (i, l) in lambda.iter_mut().enumerate() {
                *l += vecs[i][k] * coef;
            }
        }
    }
    let mut loads = Vec::with_capacity(n);
    for (r, w) in rows.iter().zip(wheels) {
        let share = r[0] * lambda[0] + r[1] * lambda[1] + r[2] * lambda[2];
        if share < -1e-9 * w_total.max(1.0) {
            return Err(VehicleError::UnsupportedLayout(format!(
                "wheel {:?} would carry a negative load ({share:.3} N); COM outside the support polygon",
                w.name
            )));
        }
        loads.push(share.max(0.0) + w.mass * g);
    }
    Ok(loads)
}

impl VehicleModel {
    pub fn new(
        name: &str,
        body: usize,
        chassis_mass: f64,
        wheels: Vec<Wheel>,
        kinematics: Kinematics,
        pid: PidParams,
        friction: FrictionParams,
    ) -> Result<Self, VehicleError> {
        if wheels.len() < 2 {
            return Err(VehicleError::Invalid(format!("vehicle {name:?} needs at least 2 wheels")));
        }
        if let Some(w) = wheels.iter().find(|w| !(w.radius > 0.0) || !(w.iy > 0.0)) {
            return Err(VehicleError::Invalid(format!("wheel {:?} needs radius > 0 and iy > 0", w.name)));
        }
        match kinematics {
            Kinematics::Differential => {
                let left = wheels.iter().any(|w| w.mount.y > 0.0);
                let right = wheels.iter().any(|w| w.mount.y < 0.0);
                if !left || !right {
                    return Err(VehicleError::Invalid(format!(
                        "differential vehicle {name:?} needs left (y > 0) and right (y < 0) wheels"
                    )));
                }
            }
            Kinematics::Ackermann { wheelbase, max_steer } => {
                let steer: Vec<&Wheel> = wheels.iter().filter(|w| w.steerable).collect();
                let fixed: Vec<&Wheel> = wheels.iter().filter(|w| !w.steerable).collect();
                let front_ok = steer.iter().all(|s| fixed.iter().all(|f| s.mount.x > f.mount.x));
                if wheels.len() < 4 || steer.len() < 2 || fixed.len() < 2 || !front_ok {
                    return Err(VehicleError::Invalid(format!(
                        "ackermann vehicle {name:?} needs >= 4 wheels with a steerable front pair"
                    )));
                }
                if !(wheelbase > 0.0) || !(max_steer > 0.0) {
                    return Err(VehicleError::Invalid("ackermann wheelbase and max_steer must be > 0".into()));
                }
            }
        }
        let pid_states = vec![PidState::default(); wheels.len()];
        Ok(Self {
            name: name.to_string(),
            body,
            chassis_mass,
            wheels,
            kinematics,
            pid,
            pid_states,
            friction,
            cmd: Twist::default(),
            odom_pose: Pose2::default(),
            attitude: Attitude::default(),
            logger: None,
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.chassis_mass + self.wheels.iter().map(|w| w.mass).sum::<f64>()
    }

    pub fn weight_on_wheels(&self, chassis: &RigidBody2D, g: f64) -> Result<Vec<f64>, VehicleError> {
        weight_on_wheels(&self.wheels, self.chassis_mass, chassis.com_local, g)
    }

    /// Validates and stores a twist setpoint.
    pub fn set_twist(&mut self, v: f64, omega: f64) -> Result<(), VehicleError> {
        twist_to_setpoints(&self.kinematics, v, omega, &self.wheels)?;
        self.cmd = Twist { v, omega };
        Ok(())
    }

    /// Loads, motor controllers and friction for every wheel. Returns the
    /// vehicle-frame force each wheel applies and its application point;
    /// the chassis itself is only read.
    pub fn pre_timestep(
        &mut self,
        chassis: &RigidBody2D,
        dt: f64,
        g: f64,
    ) -> Result<Vec<(Vec2, Vec2)>, VehicleError> {
        let loads = self.weight_on_wheels(chassis, g)?;

        let setpoints = twist_to_setpoints(&self.kinematics, self.cmd.v, self.cmd.omega, &self.wheels)?;
        for ((w, sp), pid) in self.wheels.iter_mut().zip(&setpoints).zip(self.pid_states.iter_mut()) {
            if w.steerable {
                w.mount.yaw = sp.steer;
            }
            // Measured rate is last tick's wheel spin, i.e. what odometry sees.
            w.tau_m = pid.step(sp.spin, w.omega, dt, &self.pid);
        }

        let v_body = rotate_z(chassis.vel, -chassis.pose.yaw);
        let mut forces = Vec::with_capacity(self.wheels.len());
        for (w, load) in self.wheels.iter_mut().zip(loads) {
            let arm = w.position() - chassis.com_local;
            let v_center = wheel_center_velocity(v_body, chassis.omega, arm);
            let v_local = rotate_z(v_center, -w.mount.yaw);
            let out = friction_step(v_local, w, load, &self.friction, dt, g);
            forces.push((rotate_z(Vec2::new(out.fx, out.fy), w.mount.yaw), w.position()));
            w.load = load;
            w.outcome = out;
        }
        Ok(forces)
    }

    /// Integrates wheel spin and dead-reckons odometry from it.
    pub fn post_timestep(&mut self, dt: f64) {
        let mut increments = Vec::with_capacity(self.wheels.len());
        for w in &mut self.wheels {
            w.omega += w.outcome.omega_dot * dt;
            let dphi = w.omega * dt;
            w.phi = wrap_pi(w.phi + dphi);
            increments.push(dphi);
        }
        self.update_odometry(&increments);
    }

    fn update_odometry(&mut self, dphi: &[f64]) {
        let use_wheel = |w: &Wheel| !matches!(self.kinematics, Kinematics::Ackermann { .. }) || !w.steerable;
        let (mut sl, mut nl, mut yl, mut sr, mut nr, mut yr, mut xs) = (0.0, 0, 0.0, 0.0, 0, 0.0, 0.0);
        for (w, d) in self.wheels.iter().zip(dphi) {
            if !use_wheel(w) {
                continue;
            }
            xs += w.mount.x;
            if w.mount.y > 0.0 {
                sl += w.radius * d;
                yl += w.mount.y;
                nl += 1;
            } else if w.mount.y < 0.0 {
                sr += w.radius * d;
                yr += w.mount.y;
                nr += 1;
            }
        }
        if nl == 0 || nr == 0 {
            return;
        }
        let (ds_l, ds_r) = (sl / nl as f64, sr / nr as f64);
        let (y_l, y_r) = (yl / nl as f64, yr / nr as f64);
        let track = y_l - y_r;
        let ds = 0.5 * (ds_l + ds_r);
        let dyaw = (ds_r - ds_l) / track;

        // Dead-reckon the axle midpoint, then map back to the vehicle origin.
        let axle = Pose2 { x: xs / (nl + nr) as f64, y: 0.5 * (y_l + y_r), yaw: 0.0 };
        let mid = self.odom_pose.compose(&axle);
        let heading = mid.yaw + 0.5 * dyaw;
        let moved = Pose2::new(mid.x + ds * heading.cos(), mid.y + ds * heading.sin(), mid.yaw + dyaw);
        self.odom_pose = moved.compose(&Pose2 { x: -axle.x, y: -axle.y, yaw: 0.0 });
    }

    /// Fits z, pitch and roll to the terrain heights under each wheel.
    pub fn update_attitude(&mut self, chassis: &RigidBody2D, grid: &ElevationGrid) {
        let pairs: Vec<(Vec3, Vec3)> = self
            .wheels
            .iter()
            .map(|w| {
                let p = w.position();
                let world = chassis.pose.transform_point(p);
                (Vec3::new(p.x, p.y, 0.0), Vec3::new(world.x, world.y, grid.elevation_at(world.x, world.y)))
            })
            .collect();
        let fit = PointPairSet::new(pairs.clone()).and_then(|set| horn_fit(&set));
        self.attitude = match fit {
            Ok(fit) => {
                let (_, pitch, roll) = fit.pose.q.to_ypr();
                Attitude { z: fit.pose.t.z, pitch, roll }
            }
            Err(_) => {
                // Too few or collinear contacts: follow the mean height only.
                let z = pairs.iter().map(|p| p.1.z).sum::<f64>() / pairs.len() as f64;
                Attitude { z, pitch: 0.0, roll: 0.0 }
            }
        };
    }
}
