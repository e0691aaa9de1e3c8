//! Wheel-ground friction: the per-wheel force resolution that drives every
//! chassis.
//!
//! Each axis is solved separately. Vertical equilibrium gives the normal
//! load `W`, which bounds both friction components by `F_max = mu * W`. The
//! lateral force is whatever stops lateral sliding within one step; the
//! longitudinal force comes from the wheel's moment balance
//!
//! ```text
//! tau - omega_dot * I_y + R * F_R - R * F_x = 0
//! ```
//!
//! solved first under the rolling-without-slipping assumption and, if the
//! result exceeds `F_max`, again with `F_x` pinned at the bound to find the
//! wheel's actual spin acceleration.

use serde::{Deserialize, Serialize};

use super::Wheel;
use crate::geometry::Vec2;

/// Smoothed Coulomb plus viscous rolling resistance coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RollingParams {
    pub r1: f64,
    /// s/m
    pub r2: f64,
    /// tanh transition speed, m/s
    pub v_alpha: f64,
}

impl Default for RollingParams {
    fn default() -> Self {
        Self { r1: 0.01, r2: 0.001, v_alpha: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrictionParams {
    pub mu: f64,
    /// Velocity-proportional torque loss, N m s / rad.
    pub c_damping: f64,
    pub rolling: Option<RollingParams>,
}

impl Default for FrictionParams {
    fn default() -> Self {
        Self { mu: 0.8, c_damping: 0.0, rolling: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrictionOutcome {
    pub fx: f64,
    pub fy: f64,
    pub omega_dot: f64,
    pub slipped_long: bool,
    pub slipped_lat: bool,
    /// Rolling resistance used in the balance (N).
    pub rolling: f64,
    /// Motor torque after damping losses (N m).
    pub tau_effective: f64,
}

/// Rolling resistance opposing `v_x`: `-W (r1 tanh(v_x / v_alpha) + r2 v_x)`.
pub fn rolling_resistance(v_x: f64, load: f64, p: &RollingParams) -> f64 {
    -load * (p.r1 * (v_x / p.v_alpha).tanh() + p.r2 * v_x)
}

/// Resolves the friction forces a wheel exerts on the chassis, in the wheel
/// frame (x forward along the rolling direction).
pub fn friction_step(
    v_local: Vec2,
    wheel: &Wheel,
    load: f64,
    params: &FrictionParams,
    dt: f64,
    g: f64,
) -> FrictionOutcome {
    debug_assert!(dt > 0.0 && load >= 0.0);
    let f_max = params.mu * load;

    let fy_raw = -(v_local.y / dt) * (load / g);
    let fy = fy_raw.clamp(-f_max, f_max);
    let slipped_lat = fy != fy_raw;

    let tau = wheel.tau_m - params.c_damping * wheel.omega;
    let f_r = params
        .rolling
        .as_ref()
        .map_or(0.0, |p| rolling_resistance(v_local.x, load, p));

    let r = wheel.radius;
    let target_omega = v_local.x / r;
    let target_omega_dot = (target_omega - wheel.omega) / dt;
    let fx_raw = (tau - target_omega_dot * wheel.iy + r * f_r) / r;
    let fx = fx_raw.clamp(-f_max, f_max);

    let (omega_dot, slipped_long) = if fx != fx_raw {
        ((tau + r * f_r - r * fx) / wheel.iy, true)
    } else {
        (target_omega_dot, false)
    };

    FrictionOutcome { fx, fy, omega_dot, slipped_long, slipped_lat, rolling: f_r, tau_effective: tau }
}

/// Moment-balance residual of an outcome, in N m.
pub fn equilibrium_residual(wheel: &Wheel, out: &FrictionOutcome) -> f64 {
    out.tau_effective - out.omega_dot * wheel.iy + wheel.radius * out.rolling
        - wheel.radius * out.fx
}
