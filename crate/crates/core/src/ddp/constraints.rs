//! Stage constraints `c(x_k, u_k) ≤ 0` and their exact projection.
//!
//! Every constraint binds the *next* state against corridor step `k + 1`.
//! Position-type constraints are scaled by `2/T²` so that all rows are in
//! acceleration units.

use nalgebra::{Vector2, Vector4};
use serde::{Deserialize, Serialize};

use super::qp::{QpConstraint, RowCols};
use crate::corridor::{CorridorSpec, StopLine};
use crate::dynamics::{
    chain_next_state, lateral_landing_accel, longitudinal_bounds, step, Control, EgoState,
    VehicleLimits,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `ux ≤ ux_max`
    AccelMax,
    /// `ux ≥ ux_min`
    AccelMin,
    /// `vx' ≥ 0`
    SpeedFloor,
    /// `y' ≤ upper(x')`
    Upper,
    /// `y' ≥ lower(x')`
    Lower,
    /// `x' ≤ P`, the stop line ahead of a pinch.
    StopLine,
    /// `x' + (vx'² - v_P²)₊ / (2b) ≤ P`: the ego can still stop behind the
    /// line braking at `b`, even if the line itself stops at `b`.
    StopDistance,
    /// `ux ≤ lo(x)`: full braking, substituted when the stop line can no longer
    /// be honoured.
    BrakeHold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintRow {
    pub kind: ConstraintKind,
    pub value: f64,
    pub cx: Vector4<f64>,
    pub cu: Vector2<f64>,
}

impl ConstraintRow {
    pub fn to_qp(&self) -> QpConstraint {
        let mut c = RowCols::zeros();
        c[0] = self.value;
        for i in 0..4 {
            c[i + 1] = self.cx[i];
        }
        QpConstraint { a: self.cu, c }
    }
}

/// Data the constraints need from the problem definition.
#[derive(Debug, Clone, Copy)]
pub struct ConstraintContext<'a> {
    pub corridor: &'a CorridorSpec,
    pub limits: &'a VehicleLimits,
    /// Deceleration assumed by the stop-distance constraint [m/s², > 0].
    pub follow_decel: f64,
}

fn stop_distance_excess(next: &EgoState, line: &StopLine, b: f64) -> (f64, f64) {
    let closing = next.vx * next.vx - line.speed * line.speed;
    if next.vx > line.speed {
        (next.x + closing / (2.0 * b) - line.position, next.vx / b)
    } else {
        (next.x - line.position, 0.0)
    }
}

/// Linearizes every stage constraint about `(s, u)` at step `k`.
pub fn linearize(s: &EgoState, u: &Control, k: usize, ctx: &ConstraintContext) -> Vec<ConstraintRow> {
    let dt = ctx.limits.dt;
    let scale = 2.0 / (dt * dt);
    let next = step(*s, *u, dt);
    let b = ctx.corridor.step(k + 1).bounds_with_slope(next.x);
    let mut rows = Vec::with_capacity(7);
    let ux = Vector2::new(1.0, 0.0);

    rows.push(ConstraintRow {
        kind: ConstraintKind::AccelMax,
        value: u.ux - ctx.limits.ux_max,
        cx: Vector4::zeros(),
        cu: ux,
    });
    rows.push(ConstraintRow {
        kind: ConstraintKind::AccelMin,
        value: ctx.limits.ux_min - u.ux,
        cx: Vector4::zeros(),
        cu: -ux,
    });
    rows.push(ConstraintRow {
        kind: ConstraintKind::SpeedFloor,
        value: -s.vx / dt - u.ux,
        cx: Vector4::new(0.0, 0.0, -1.0 / dt, 0.0),
        cu: -ux,
    });

    let mut through_next = |kind, value: f64, g_next: Vector4<f64>| {
        let (cx, cu) = chain_next_state(&(g_next * scale), dt);
        rows.push(ConstraintRow {
            kind,
            value: value * scale,
            cx,
            cu,
        });
    };
    through_next(
        ConstraintKind::Upper,
        next.y - b.upper,
        Vector4::new(-b.d_upper, 1.0, 0.0, 0.0),
    );
    through_next(
        ConstraintKind::Lower,
        b.lower - next.y,
        Vector4::new(b.d_lower, -1.0, 0.0, 0.0),
    );
    if let Some(line) = ctx.corridor.stop_line(k + 1) {
        through_next(
            ConstraintKind::StopLine,
            next.x - line.position,
            Vector4::new(1.0, 0.0, 0.0, 0.0),
        );
        let (excess, dv) = stop_distance_excess(&next, &line, ctx.follow_decel);
        through_next(
            ConstraintKind::StopDistance,
            excess,
            Vector4::new(1.0, 0.0, dv, 0.0),
        );
    }
    rows
}

/// The brake-hold row replacing the stop-line rows when they are unattainable.
pub fn brake_hold(s: &EgoState, u: &Control, lim: &VehicleLimits) -> ConstraintRow {
    let ux = Vector2::new(1.0, 0.0);
    if -s.vx / lim.dt > lim.ux_min {
        ConstraintRow {
            kind: ConstraintKind::BrakeHold,
            value: u.ux + s.vx / lim.dt,
            cx: Vector4::new(0.0, 0.0, 1.0 / lim.dt, 0.0),
            cu: ux,
        }
    } else {
        ConstraintRow {
            kind: ConstraintKind::BrakeHold,
            value: u.ux - lim.ux_min,
            cx: Vector4::zeros(),
            cu: ux,
        }
    }
}

/// Largest `ux` keeping the next state behind `line` under both stop rows.
pub fn stop_line_accel_cap(s: &EgoState, line: &StopLine, dt: f64, b: f64) -> f64 {
    let x0 = s.x + s.vx * dt;
    let cap6 = 2.0 * (line.position - x0) / (dt * dt);
    let alpha = dt * dt / (2.0 * b);
    let beta = 0.5 * dt * dt + s.vx * dt / b;
    let gamma = x0 + (s.vx * s.vx - line.speed * line.speed) / (2.0 * b) - line.position;
    let disc = beta * beta - 4.0 * alpha * gamma;
    let cap7 = if disc < 0.0 {
        f64::NEG_INFINITY
    } else {
        let r = (-beta + disc.sqrt()) / (2.0 * alpha);
        if s.vx + dt * r >= line.speed {
            r
        } else {
            // Below the line's speed the stop distance term is inactive.
            (line.speed - s.vx) / dt
        }
    };
    cap6.min(cap7)
}

/// Result of projecting a control onto the exact stage constraints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub control: Control,
    /// The stop line could not be honoured; full braking was applied.
    pub brake_override: bool,
    /// The corridor at the landing point was pinched; lateral containment failed.
    pub pinched: bool,
}

/// Clips `u` so that the next state satisfies every stage constraint. The
/// longitudinal component is fixed first; the lateral one is then clipped to
/// the corridor at the resulting next position.
pub fn project(s: &EgoState, u: &Control, k: usize, ctx: &ConstraintContext) -> Projection {
    let lim = ctx.limits;
    let dt = lim.dt;
    let (lo, mut hi) = longitudinal_bounds(s, lim);
    let mut brake_override = false;
    if let Some(line) = ctx.corridor.stop_line(k + 1) {
        let cap = stop_line_accel_cap(s, &line, dt, ctx.follow_decel);
        if cap < lo {
            brake_override = true;
        }
        hi = hi.min(cap);
    }
    let ux = if hi < lo { lo } else { u.ux.clamp(lo, hi) };
    let x_next = s.x + s.vx * dt + 0.5 * dt * dt * ux;
    let (y_lo, y_hi) = ctx.corridor.step(k + 1).bounds(x_next);
    let a_lo = lateral_landing_accel(s, y_lo, dt);
    let a_hi = lateral_landing_accel(s, y_hi, dt);
    let (uy, pinched) = if a_lo <= a_hi {
        (u.uy.clamp(a_lo, a_hi), false)
    } else {
        (lateral_landing_accel(s, 0.5 * (y_lo + y_hi), dt), true)
    };
    Projection {
        control: Control::new(ux, uy),
        brake_override,
        pinched,
    }
}

/// Largest violation of the exact constraints at step `k`, in metres for
/// position rows and m/s² for acceleration rows. Stop-line rows are skipped
/// when the applied control already brakes at the lower bound.
pub fn max_violation(s: &EgoState, u: &Control, k: usize, ctx: &ConstraintContext) -> f64 {
    let lim = ctx.limits;
    let (lo, hi) = longitudinal_bounds(s, lim);
    let next = step(*s, *u, lim.dt);
    let (y_lo, y_hi) = ctx.corridor.step(k + 1).bounds(next.x);
    let mut worst = (u.ux - hi).max(lo - u.ux).max(next.y - y_hi).max(y_lo - next.y);
    if let Some(line) = ctx.corridor.stop_line(k + 1) {
        let braking = u.ux <= lo + 1e-9;
        if !braking {
            let (excess, _) = stop_distance_excess(&next, &line, ctx.follow_decel);
            worst = worst.max(next.x - line.position).max(excess);
        }
    }
    worst.max(0.0)
}
