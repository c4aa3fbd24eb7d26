//! Reference implementations shared by the integration and acceptance tests.
//! They are written from first principles and deliberately avoid the
//! library's solver internals.

#![allow(dead_code)]

use std::collections::HashMap;

use corridor_planner::corridor::{
    obstacle_sigmoid_params, sigmoid_boundary, CorridorConfig, CorridorInputs, CorridorSpec,
    Obstacle, Orientation, RoadGeometry, Side,
};
use corridor_planner::ddp::cost::{q_expansion, stage_cost, stage_value, ValueExpansion, Weights};
use corridor_planner::dynamics::step;
use corridor_planner::ddp::OcpDefinition;
use corridor_planner::dynamics::{Control, EgoState, VehicleLimits};
use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use rand::Rng;

pub fn a_matrix(dt: f64) -> Matrix4<f64> {
    Matrix4::new(
        1.0, 0.0, dt, 0.0, //
        0.0, 1.0, 0.0, dt, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    )
}

pub fn b_matrix(dt: f64) -> Matrix4x2<f64> {
    let h = dt * dt / 2.0;
    Matrix4x2::new(h, 0.0, 0.0, h, dt, 0.0, 0.0, dt)
}

/// Finite-horizon affine LQ tracking solved by the discrete Riccati recursion.
///
/// Cost: sum over k < K of ½uᵀRu + ½(x - r)ᵀQ(x - r), no terminal term.
pub fn riccati_controls(w: &Weights, v_dx: f64, v_dy: f64, x0: Vector4<f64>, k: usize, dt: f64) -> Vec<Vector2<f64>> {
    let a = a_matrix(dt);
    let b = b_matrix(dt);
    let r = Matrix2::new(w.w1, 0.0, 0.0, w.w2);
    let mut q = Matrix4::zeros();
    q[(2, 2)] = w.w3;
    q[(3, 3)] = w.w4;
    let reference = Vector4::new(0.0, 0.0, v_dx, v_dy);
    let mut p = Matrix4::<f64>::zeros();
    let mut pv = Vector4::<f64>::zeros();
    let mut gains: Vec<(Matrix2x4<f64>, Vector2<f64>)> = Vec::with_capacity(k);
    for _ in 0..k {
        let huu = r + b.transpose() * p * b;
        let hux = b.transpose() * p * a;
        let hu = b.transpose() * pv;
        let inv = huu.try_inverse().expect("Huu invertible");
        let kk = -inv * hux;
        let ff = -inv * hu;
        let p_new = q + a.transpose() * p * a + hux.transpose() * kk;
        let pv_new = -(q * reference) + a.transpose() * pv + hux.transpose() * ff;
        p = 0.5 * (p_new + p_new.transpose());
        pv = pv_new;
        gains.push((kk, ff));
    }
    gains.reverse();
    let mut x = x0;
    let mut out = Vec::with_capacity(k);
    for (kk, ff) in gains {
        let u = kk * x + ff;
        x = a * x + b * u;
        out.push(u);
    }
    out
}

/// Cost of an open-loop control sequence under the tracking objective.
pub fn tracking_cost(w: &Weights, v_dx: f64, v_dy: f64, x0: Vector4<f64>, controls: &[Vector2<f64>], dt: f64) -> f64 {
    let a = a_matrix(dt);
    let b = b_matrix(dt);
    let mut x = x0;
    let mut total = 0.0;
    for u in controls {
        let ex = x[2] - v_dx;
        let ey = x[3] - v_dy;
        total += 0.5 * (w.w1 * u[0] * u[0] + w.w2 * u[1] * u[1] + w.w3 * ex * ex + w.w4 * ey * ey);
        x = a * x + b * u;
    }
    total
}

#[derive(Debug, Clone, Copy)]
pub struct DpGrid {
    pub ux: (f64, f64),
    pub uy: (f64, f64),
    pub points: usize,
    pub bin: [f64; 4],
    pub beam: usize,
}

impl Default for DpGrid {
    fn default() -> Self {
        Self {
            ux: (-6.0, 3.0),
            uy: (-24.0, 24.0),
            points: 21,
            bin: [0.2, 0.05, 0.2, 0.2],
            beam: 3_000,
        }
    }
}

/// Forward dynamic programming over a control grid. States landing in the same
/// bin keep only the cheapest real (unrounded) trajectory, so the returned cost
/// is achieved by an actual feasible control sequence.
pub fn dp_optimum(def: &OcpDefinition, grid: &DpGrid) -> Option<f64> {
    let dt = def.limits.dt;
    let lin = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (grid.points - 1) as f64;
    let controls: Vec<(f64, f64)> = (0..grid.points)
        .flat_map(|i| (0..grid.points).map(move |j| (i, j)))
        .map(|(i, j)| (lin(grid.ux.0, grid.ux.1, i), lin(grid.uy.0, grid.uy.1, j)))
        .collect();
    let mut layer: Vec<([f64; 4], f64)> = vec![(
        [def.initial.x, def.initial.y, def.initial.vx, def.initial.vy],
        0.0,
    )];
    for k in 0..def.horizon {
        let mut next: HashMap<[i64; 4], ([f64; 4], f64)> = HashMap::new();
        for (s, c) in &layer {
            let [x, y, vx, vy] = *s;
            let lo = (-vx / dt).max(def.limits.ux_min);
            let hi = def.limits.ux_max;
            for &(ux, uy) in &controls {
                if ux < lo || ux > hi {
                    continue;
                }
                let nx = x + vx * dt + 0.5 * ux * dt * dt;
                let ny = y + vy * dt + 0.5 * uy * dt * dt;
                let (low, up) = def.corridor.corridor_at(k + 1, nx);
                if ny < low || ny > up {
                    continue;
                }
                let ex = vx - def.v_dx;
                let ey = vy - def.v_dy;
                let w = &def.weights;
                let cost = c + 0.5 * (w.w1 * ux * ux + w.w2 * uy * uy + w.w3 * ex * ex + w.w4 * ey * ey);
                let ns = [nx, ny, vx + ux * dt, vy + uy * dt];
                let key = [0, 1, 2, 3].map(|i| (ns[i] / grid.bin[i]).round() as i64);
                let e = next.entry(key).or_insert((ns, f64::INFINITY));
                if cost < e.1 {
                    *e = (ns, cost);
                }
            }
        }
        let mut v: Vec<([f64; 4], f64)> = next.into_values().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.1.total_cmp(&b.1));
        v.truncate(grid.beam);
        layer = v;
    }
    layer.iter().map(|(_, c)| *c).reduce(f64::min)
}

/// Random K = 5 toy: the ego in the lower lane of a two-lane road behind a
/// slower vehicle it must start passing above, with a gentle corridor slope.
pub fn constrained_toy<R: Rng>(rng: &mut R) -> OcpDefinition {
    loop {
        let def = toy_candidate(rng);
        // Keep only toys where driving straight on would leave the corridor.
        let s = def.initial;
        let binds = (1..=def.horizon).any(|k| {
            let x = s.x + s.vx * k as f64 * def.limits.dt;
            def.corridor.corridor_at(k, x).0 > s.y + 0.05
        });
        if binds {
            return def;
        }
    }
}

fn toy_candidate<R: Rng>(rng: &mut R) -> OcpDefinition {
    let road = RoadGeometry::new(3.6, 2);
    let cfg = CorridorConfig {
        slope: 0.5,
        ..CorridorConfig::default()
    };
    let ego = EgoState::new(0.0, 1.8, rng.random_range(9.0..13.0), 0.0);
    let obstacle = Obstacle::new(rng.random_range(17.0..22.0), 1.8, rng.random_range(2.0..6.0), 4.5, 1.8);
    let horizon = 5;
    let dt = 0.25;
    let inputs = CorridorInputs {
        obstacles: vec![obstacle],
        orientations: vec![Orientation::PassAbove],
        ego,
        road,
        limits: cfg.road_limits(&road),
        dt,
        search: (ego.x, ego.x + 40.0),
    };
    let corridor = CorridorSpec::build(inputs, &cfg, horizon).expect("toy corridor");
    OcpDefinition {
        horizon,
        initial: ego,
        weights: Weights {
            w1: rng.random_range(0.5..2.0),
            w2: rng.random_range(0.05..0.5),
            w3: rng.random_range(0.5..2.0),
            w4: rng.random_range(0.05..0.5),
        },
        v_dx: 15.0,
        v_dy: 0.0,
        corridor,
        limits: VehicleLimits::default(),
        follow_decel: 4.0,
    }
}

/// Open LQ instance where no constraint can become active.
pub fn open_lq<R: Rng>(rng: &mut R, horizon: usize) -> OcpDefinition {
    let road = RoadGeometry::new(3.6, 2);
    let v_dx = rng.random_range(10.0..20.0);
    let initial = EgoState::new(
        rng.random_range(-5.0..5.0),
        rng.random_range(-1.0..1.0),
        v_dx + rng.random_range(-3.0..3.0),
        rng.random_range(-1.0..1.0),
    );
    OcpDefinition {
        horizon,
        initial,
        weights: Weights {
            w1: rng.random_range(0.1..5.0),
            w2: rng.random_range(0.1..5.0),
            w3: rng.random_range(0.1..5.0),
            w4: rng.random_range(0.1..5.0),
        },
        v_dx,
        v_dy: rng.random_range(-0.5..0.5),
        corridor: CorridorSpec::open(road, (-1e6, 1e6), horizon, 0.25),
        limits: VehicleLimits {
            ux_min: -1e3,
            ux_max: 1e3,
            dt: 0.25,
        },
        follow_decel: 4.0,
    }
}

pub fn to_vec(u: &Control) -> Vector2<f64> {
    Vector2::new(u.ux, u.uy)
}

/// One obstacle, its orientation and the context used to cut the corridor.
#[derive(Debug, Clone)]
pub struct CorridorCase {
    pub road: RoadGeometry,
    pub obstacle: Obstacle,
    pub orientation: Orientation,
    pub ego: EgoState,
    pub cfg: CorridorConfig,
}

/// Random case whose plateau stays on the road; `None` when it would not.
pub fn random_corridor_case<R: Rng>(rng: &mut R) -> Option<CorridorCase> {
    let road = RoadGeometry::new(rng.random_range(3.0..4.0), rng.random_range(2..=4));
    let width = rng.random_range(1.5..2.5);
    let obstacle = Obstacle::new(
        rng.random_range(-50.0..150.0),
        rng.random_range(0.5 * width..road.width() - 0.5 * width),
        rng.random_range(0.0..25.0),
        rng.random_range(3.0..6.0),
        width,
    );
    let orientation = if rng.random_bool(0.5) { Orientation::PassBelow } else { Orientation::PassAbove };
    let cfg = CorridorConfig {
        slope: rng.random_range(0.3..3.0),
        base_margin: rng.random_range(0.0..4.0),
        headway_gain: rng.random_range(0.0..1.0),
        lateral_margin: rng.random_range(0.05..0.6),
        ego_half_length: rng.random_range(1.5..2.75),
        ego_half_width: rng.random_range(0.7..1.0),
        ..CorridorConfig::default()
    };
    let ego = EgoState::new(0.0, road.lane_center(0), rng.random_range(0.0..30.0), 0.0);
    let case = CorridorCase { road, obstacle, orientation, ego, cfg };
    obstacle_sigmoid_params(&case.obstacle, orientation, &ego, &road, &cfg).ok()?;
    Some(case)
}

fn boundary(case: &CorridorCase, x: f64) -> f64 {
    let p = obstacle_sigmoid_params(&case.obstacle, case.orientation, &case.ego, &case.road, &case.cfg).unwrap();
    sigmoid_boundary(x, &p, &case.road, case.orientation.side())
}

/// Beyond 10/slope outside the switch points the boundary is back at the road
/// edge to within A·e⁻¹⁰.
pub fn check_far_field(case: &CorridorCase) -> Result<(), String> {
    let p = obstacle_sigmoid_params(&case.obstacle, case.orientation, &case.ego, &case.road, &case.cfg).unwrap();
    let side = case.orientation.side();
    let edge = match side {
        Side::Upper => case.road.width(),
        Side::Lower => 0.0,
    };
    let bound = p.amplitude(&case.road, side) * (-10.0f64).exp();
    let reach = 10.0 / p.slope;
    for i in 0..=20 {
        let d = reach * (1.0 + i as f64 * 0.5);
        for x in [p.rear_switch - d, p.front_switch + d] {
            let err = (boundary(case, x) - edge).abs();
            if err >= bound {
                return Err(format!("far field at x={x}: |b - edge| = {err:e} >= {bound:e}"));
            }
        }
    }
    Ok(())
}

/// No ego centre on the admissible side of the boundary puts the footprints
/// in contact: the boundary clears the inflated rectangle along its length.
pub fn check_exclusion(case: &CorridorCase, tol: f64) -> Result<(), String> {
    let r = case.cfg.inflated_footprint(&case.obstacle);
    let n = 200;
    for i in 0..=n {
        let x = r.x_min + (r.x_max - r.x_min) * i as f64 / n as f64;
        let b = boundary(case, x);
        let ok = match case.orientation {
            Orientation::PassBelow => b <= r.y_min + tol,
            Orientation::PassAbove => b >= r.y_max - tol,
        };
        if !ok {
            return Err(format!("boundary {b} enters footprint [{}, {}] at x={x}", r.y_min, r.y_max));
        }
    }
    Ok(())
}

/// Mirroring the obstacle across the road centre and flipping λ mirrors the
/// boundary.
pub fn check_mirror(case: &CorridorCase, tol: f64) -> Result<(), String> {
    let m = CorridorCase {
        obstacle: case.obstacle.mirrored(&case.road),
        orientation: case.orientation.flipped(),
        ego: EgoState {
            y: case.road.mirror_y(case.ego.y),
            ..case.ego
        },
        ..case.clone()
    };
    let p = obstacle_sigmoid_params(&case.obstacle, case.orientation, &case.ego, &case.road, &case.cfg).unwrap();
    let span = p.front_switch - p.rear_switch;
    for i in 0..=100 {
        let x = p.rear_switch - 0.5 * span + 2.0 * span * i as f64 / 100.0;
        let (a, b) = (boundary(case, x), boundary(&m, x));
        if (case.road.mirror_y(a) - b).abs() > tol {
            return Err(format!("mirror mismatch at x={x}: {a} vs {b}"));
        }
    }
    Ok(())
}

fn random_point<R: Rng>(rng: &mut R) -> (EgoState, Control) {
    (
        EgoState::new(
            rng.random_range(-50.0..50.0),
            rng.random_range(0.0..7.2),
            rng.random_range(0.0..30.0),
            rng.random_range(-3.0..3.0),
        ),
        Control::new(rng.random_range(-6.0..3.0), rng.random_range(-5.0..5.0)),
    )
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn fd_compare(what: &str, fd: f64, analytic: f64) -> Result<(), String> {
    if rel_close(fd, analytic, FD_TOL) {
        Ok(())
    } else {
        Err(format!("{what}: finite difference {fd} vs analytic {analytic}"))
    }
}

/// Stage-cost gradient and Hessian blocks against central differences at one
/// random point with random weights.
pub fn check_stage_derivatives<R: Rng>(rng: &mut R) -> Result<(), String> {
    let (s, u) = random_point(rng);
    let w = Weights {
        w1: rng.random_range(0.1..3.0),
        w2: rng.random_range(0.1..3.0),
        w3: rng.random_range(0.1..3.0),
        w4: rng.random_range(0.1..3.0),
    };
    let (vdx, vdy) = (15.0, 0.2);
    let h = FD_STEP;
    let c = stage_cost(&s, &u, &w, vdx, vdy);
    let f = |x: Vector4<f64>, v: Vector2<f64>| {
        stage_value(&EgoState::from_vector(&x), &Control::from_vector(&v), &w, vdx, vdy)
    };
    let grad = |x: Vector4<f64>, v: Vector2<f64>| {
        stage_cost(&EgoState::from_vector(&x), &Control::from_vector(&v), &w, vdx, vdy)
    };
    let (x0, u0) = (s.to_vector(), u.to_vector());
    for i in 0..4 {
        let mut e = Vector4::zeros();
        e[i] = h;
        fd_compare(&format!("lx[{i}]"), (f(x0 + e, u0) - f(x0 - e, u0)) / (2.0 * h), c.lx[i])?;
        let fd_row = (grad(x0 + e, u0).lx - grad(x0 - e, u0).lx) / (2.0 * h);
        for j in 0..4 {
            fd_compare(&format!("lxx[{j},{i}]"), fd_row[j], c.lxx[(j, i)])?;
        }
        let fd_ux = (grad(x0 + e, u0).lu - grad(x0 - e, u0).lu) / (2.0 * h);
        for j in 0..2 {
            fd_compare(&format!("lux[{j},{i}]"), fd_ux[j], c.lux[(j, i)])?;
        }
    }
    for i in 0..2 {
        let mut e = Vector2::zeros();
        e[i] = h;
        fd_compare(&format!("lu[{i}]"), (f(x0, u0 + e) - f(x0, u0 - e)) / (2.0 * h), c.lu[i])?;
        let fd_row = (grad(x0, u0 + e).lu - grad(x0, u0 - e).lu) / (2.0 * h);
        for j in 0..2 {
            fd_compare(&format!("luu[{j},{i}]"), fd_row[j], c.luu[(j, i)])?;
        }
    }
    Ok(())
}

/// Q-function gradients against central differences of the stage cost plus a
/// random quadratic model of the next value, built by hand.
pub fn check_q_expansion<R: Rng>(rng: &mut R) -> Result<(), String> {
    let dt = 0.25;
    let h = FD_STEP;
    let w = Weights::default();
    let (s, u) = random_point(rng);
    let vx = Vector4::from_fn(|_, _| rng.random_range(-5.0..5.0));
    let m = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let vxx = m * m.transpose();
    let next = ValueExpansion { vx, vxx };
    let anchor = step(s, u, dt).to_vector();
    let q = |x: Vector4<f64>, v: Vector2<f64>| {
        let (s, u) = (EgoState::from_vector(&x), Control::from_vector(&v));
        let d = step(s, u, dt).to_vector() - anchor;
        stage_value(&s, &u, &w, 15.0, 0.0) + vx.dot(&d) + 0.5 * d.dot(&(vxx * d))
    };
    let c = stage_cost(&s, &u, &w, 15.0, 0.0);
    let qc = q_expansion(&c, &next, dt);
    let (x0, u0) = (s.to_vector(), u.to_vector());
    for i in 0..4 {
        let mut e = Vector4::zeros();
        e[i] = h;
        fd_compare(&format!("qx[{i}]"), (q(x0 + e, u0) - q(x0 - e, u0)) / (2.0 * h), qc.qx[i])?;
    }
    for i in 0..2 {
        let mut e = Vector2::zeros();
        e[i] = h;
        fd_compare(&format!("qu[{i}]"), (q(x0, u0 + e) - q(x0, u0 - e)) / (2.0 * h), qc.qu[i])?;
    }
    Ok(())
}
