//! Discrete-time double-integrator vehicle model.
//!
//! The ego state is `(x, y, vx, vy)` and the control is the acceleration pair
//! `(ux, uy)`, held constant over each step of length `dt`. Integration is the
//! exact zero-order-hold solution, so the model is affine in state and control.

use nalgebra::{Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("pinched corridor: lower boundary {lower} is not below upper boundary {upper}")]
    PinchedCorridor { lower: f64, upper: f64 },
}

/// Kinematic ego state. Positions in metres, speeds in m/s.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl EgoState {
    pub const fn new(x: f64, y: f64, vx: f64, vy: f64) -> Self {
        Self { x, y, vx, vy }
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.vx, self.vy)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

/// Longitudinal and lateral acceleration in m/s².
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub ux: f64,
    pub uy: f64,
}

impl Control {
    pub const ZERO: Control = Control { ux: 0.0, uy: 0.0 };

    pub const fn new(ux: f64, uy: f64) -> Self {
        Self { ux, uy }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.ux, self.uy)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }
}

/// Longitudinal acceleration limits and step length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleLimits {
    pub ux_min: f64,
    pub ux_max: f64,
    pub dt: f64,
}

impl Default for VehicleLimits {
    fn default() -> Self {
        Self {
            ux_min: -6.0,
            ux_max: 3.0,
            dt: 0.25,
        }
    }
}

impl VehicleLimits {
    pub fn is_valid(&self) -> bool {
        self.ux_min < 0.0 && self.ux_max > 0.0 && self.dt > 0.0
    }
}

/// One zero-order-hold step of the double integrator.
pub fn step(s: EgoState, u: Control, dt: f64) -> EgoState {
    let half_dt2 = 0.5 * dt * dt;
    EgoState {
        x: s.x + s.vx * dt + half_dt2 * u.ux,
        y: s.y + s.vy * dt + half_dt2 * u.uy,
        vx: s.vx + u.ux * dt,
        vy: s.vy + u.uy * dt,
    }
}

/// State transition matrix `A` of `x' = A x + B u`.
pub fn state_jacobian(dt: f64) -> Matrix4<f64> {
    let mut a = Matrix4::identity();
    a[(0, 2)] = dt;
    a[(1, 3)] = dt;
    a
}

/// Input matrix `B` of `x' = A x + B u`.
pub fn control_jacobian(dt: f64) -> Matrix4x2<f64> {
    let h = 0.5 * dt * dt;
    Matrix4x2::new(h, 0.0, 0.0, h, dt, 0.0, 0.0, dt)
}

/// Longitudinal acceleration interval `(lo, hi)` at `s`.
///
/// The lower bound never lets the speed go negative within one step.
pub fn longitudinal_bounds(s: &EgoState, lim: &VehicleLimits) -> (f64, f64) {
    let lo = (-s.vx / lim.dt).max(lim.ux_min);
    (lo, lim.ux_max)
}

/// Lateral acceleration that lands the next lateral position exactly on `target`.
pub fn lateral_landing_accel(s: &EgoState, target: f64, dt: f64) -> f64 {
    2.0 * ((target - s.y) - s.vy * dt) / (dt * dt)
}

/// Lateral acceleration interval keeping the next lateral position within
/// `[y_lower, y_upper]`.
pub fn lateral_bounds(
    s: &EgoState,
    y_upper: f64,
    y_lower: f64,
    dt: f64,
) -> Result<(f64, f64), DynamicsError> {
    if y_lower >= y_upper {
        return Err(DynamicsError::PinchedCorridor {
            lower: y_lower,
            upper: y_upper,
        });
    }
    Ok((
        lateral_landing_accel(s, y_lower, dt),
        lateral_landing_accel(s, y_upper, dt),
    ))
}

/// Chain rule through one step: given `dc/dx'`, returns `(dc/dx, dc/du)`.
pub fn chain_next_state(dc_dnext: &Vector4<f64>, dt: f64) -> (Vector4<f64>, Vector2<f64>) {
    (
        state_jacobian(dt).transpose() * dc_dnext,
        control_jacobian(dt).transpose() * dc_dnext,
    )
}
