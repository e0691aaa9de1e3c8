//! Drive kinematics and the per-wheel velocity PID loop.

use serde::{Deserialize, Serialize};

use super::{VehicleError, Wheel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Kinematics {
    Differential,
    Ackermann { wheelbase: f64, max_steer: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidParams {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Bound on the integral term, N m.
    pub i_clamp: f64,
    /// Bound on the output torque, N m.
    pub tau_max: f64,
}

impl Default for PidParams {
    fn default() -> Self {
        Self { kp: 5.0, ki: 2.0, kd: 0.0, i_clamp: 5.0, tau_max: 20.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState {
    /// Integral term in output units (already multiplied by ki).
    pub integral: f64,
    pub prev_measured: Option<f64>,
}

impl PidState {
    /// One controller update; returns the commanded torque.
    ///
    /// The derivative acts on the measurement. The integral is clamped to
    /// `±i_clamp` and frozen while the output saturates in the direction of
    /// the error.
    pub fn step(&mut self, setpoint: f64, measured: f64, dt: f64, p: &PidParams) -> f64 {
        debug_assert!(dt > 0.0);
        let err = setpoint - measured;
        let d = match self.prev_measured {
            Some(prev) => -p.kd * (measured - prev) / dt,
            None => 0.0,
        };
        self.prev_measured = Some(measured);

        let candidate = (self.integral + p.ki * err * dt).clamp(-p.i_clamp, p.i_clamp);
        let unsat = p.kp * err + candidate + d;
        let winding_up = unsat.abs() > p.tau_max && unsat.signum() == err.signum();
        if !winding_up {
            self.integral = candidate;
        }
        (p.kp * err + self.integral + d).clamp(-p.tau_max, p.tau_max)
    }

    pub fn reset(&mut self) {
        *self = PidState::default();
    }
}

/// Functional form of [`PidState::step`].
pub fn pid_step(mut state: PidState, setpoint: f64, measured: f64, dt: f64, p: &PidParams) -> (f64, PidState) {
    let tau = state.step(setpoint, measured, dt, p);
    (tau, state)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub v: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WheelSetpoint {
    /// rad/s
    pub spin: f64,
    /// rad, relative to the vehicle x axis
    pub steer: f64,
}

/// Per-wheel spin and steer commands realizing a body twist.
///
/// The reference point moves at `(v, 0)` in the vehicle frame while the body
/// turns at `omega`. For differential drives that point is the vehicle
/// origin. For Ackermann it is the center of the rear (fixed) axle, which
/// puts the turning center on the rear axle line.
pub fn twist_to_setpoints(
    kinematics: &Kinematics,
    v: f64,
    omega: f64,
    wheels: &[Wheel],
) -> Result<Vec<WheelSetpoint>, VehicleError> {
    match *kinematics {
        Kinematics::Differential => Ok(wheels
            .iter()
            .map(|w| WheelSetpoint { spin: (v - omega * w.mount.y) / w.radius, steer: 0.0 })
            .collect()),
        Kinematics::Ackermann { max_steer, .. } => {
            let rear: Vec<&Wheel> = wheels.iter().filter(|w| !w.steerable).collect();
            let x_rear = rear.iter().map(|w| w.mount.x).sum::<f64>() / rear.len().max(1) as f64;
            wheels
                .iter()
                .map(|w| {
                    let vx = v - omega * w.mount.y;
                    let vy = omega * (w.mount.x - x_rear);
                    if !w.steerable {
                        return Ok(WheelSetpoint { spin: vx / w.radius, steer: 0.0 });
                    }
                    let steer = if vx == 0.0 {
                        if vy == 0.0 { 0.0 } else { vy.signum() * std::f64::consts::FRAC_PI_2 }
                    } else {
                        (vy / vx).atan()
                    };
                    if steer.abs() > max_steer + 1e-12 {
                        return Err(VehicleError::SteerLimit { required: steer, max: max_steer });
                    }
                    let speed = vx.signum() * vx.hypot(vy);
                    Ok(WheelSetpoint { spin: speed / w.radius, steer })
                })
                .collect()
        }
    }
}
