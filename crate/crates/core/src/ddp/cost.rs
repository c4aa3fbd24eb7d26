//! Quadratic stage cost: control effort plus speed tracking.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{control_jacobian, state_jacobian, Control, EgoState};

/// Nonnegative weights on `ux²`, `uy²`, `(vx - v_dx)²` and `(vy - v_dy)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Weights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0,
        }
    }
}

impl Weights {
    pub fn is_valid(&self) -> bool {
        let all = [self.w1, self.w2, self.w3, self.w4];
        all.iter().all(|w| w.is_finite() && *w >= 0.0) && self.w1 > 0.0 && self.w2 > 0.0
    }
}

/// Stage cost value and its exact first and second derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageCost {
    pub l: f64,
    pub lx: Vector4<f64>,
    pub lu: Vector2<f64>,
    pub lxx: Matrix4<f64>,
    pub luu: Matrix2<f64>,
    pub lux: Matrix2x4<f64>,
}

pub fn stage_value(s: &EgoState, u: &Control, w: &Weights, v_dx: f64, v_dy: f64) -> f64 {
    let ex = s.vx - v_dx;
    let ey = s.vy - v_dy;
    0.5 * (w.w1 * u.ux * u.ux + w.w2 * u.uy * u.uy + w.w3 * ex * ex + w.w4 * ey * ey)
}

pub fn stage_cost(s: &EgoState, u: &Control, w: &Weights, v_dx: f64, v_dy: f64) -> StageCost {
    let mut lxx = Matrix4::zeros();
    lxx[(2, 2)] = w.w3;
    lxx[(3, 3)] = w.w4;
    StageCost {
        l: stage_value(s, u, w, v_dx, v_dy),
        lx: Vector4::new(0.0, 0.0, w.w3 * (s.vx - v_dx), w.w4 * (s.vy - v_dy)),
        lu: Vector2::new(w.w1 * u.ux, w.w2 * u.uy),
        lxx,
        luu: Matrix2::new(w.w1, 0.0, 0.0, w.w2),
        lux: Matrix2x4::zeros(),
    }
}

/// Second-order expansion of `Q(x, u) = L(x, u) + V'(f(x, u))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QCoefficients {
    pub qx: Vector4<f64>,
    pub qu: Vector2<f64>,
    pub qxx: Matrix4<f64>,
    pub qux: Matrix2x4<f64>,
    pub quu: Matrix2<f64>,
}

/// Quadratic model of the cost-to-go at the next state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueExpansion {
    pub vx: Vector4<f64>,
    pub vxx: Matrix4<f64>,
}

impl ValueExpansion {
    pub fn zero() -> Self {
        Self {
            vx: Vector4::zeros(),
            vxx: Matrix4::zeros(),
        }
    }
}

/// Q coefficients for linear dynamics. The dynamics curvature terms vanish.
pub fn q_expansion(c: &StageCost, next: &ValueExpansion, dt: f64) -> QCoefficients {
    let a = state_jacobian(dt);
    let b = control_jacobian(dt);
    let bt_vxx = b.transpose() * next.vxx;
    let mut qxx = c.lxx + a.transpose() * next.vxx * a;
    qxx = 0.5 * (qxx + qxx.transpose());
    let mut quu = c.luu + bt_vxx * b;
    quu = 0.5 * (quu + quu.transpose());
    QCoefficients {
        qx: c.lx + a.transpose() * next.vx,
        qu: c.lu + b.transpose() * next.vx,
        qxx,
        qux: c.lux + bt_vxx * a,
        quu,
    }
}
