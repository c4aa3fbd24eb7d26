//! Constrained differential dynamic programming.
//!
//! The backward pass builds a quadratic model of the Bellman recursion and, at
//! each stage, solves a small QP with the linearized stage constraints to get an
//! affine control law. The forward pass rolls that law out with a backtracking
//! line search, projecting every control onto the exact constraints.

pub mod constraints;
pub mod cost;
pub mod qp;

use std::io::{self, Write};

use nalgebra::{Cholesky, Matrix2, Matrix2x4, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corridor::CorridorSpec;
use crate::dynamics::{step, Control, EgoState, VehicleLimits};
use constraints::{
    brake_hold, linearize, max_violation, project, ConstraintContext, ConstraintKind,
    ConstraintRow,
};
use cost::{q_expansion, stage_cost, stage_value, QCoefficients, ValueExpansion, Weights};
use qp::{Cols, QpConstraint};

/// The corridor-constrained optimal control problem.
#[derive(Debug, Clone)]
pub struct OcpDefinition {
    pub horizon: usize,
    pub initial: EgoState,
    pub weights: Weights,
    pub v_dx: f64,
    pub v_dy: f64,
    /// Must cover steps `0..=horizon`.
    pub corridor: CorridorSpec,
    pub limits: VehicleLimits,
    /// Braking rate assumed when keeping a safe distance to stop lines.
    pub follow_decel: f64,
}

impl OcpDefinition {
    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |m: &str| Err(SolveError::InvalidDefinition(m.to_string()));
        if self.horizon < 1 {
            return bad("horizon must be at least one step");
        }
        if !self.weights.is_valid() {
            return bad("weights must be nonnegative with w1, w2 > 0");
        }
        if !self.limits.is_valid() {
            return bad("limits need ux_min < 0 < ux_max and dt > 0");
        }
        if !(self.follow_decel > 0.0) {
            return bad("follow_decel must be positive");
        }
        if self.corridor.horizon() < self.horizon {
            return bad("corridor shorter than the horizon");
        }
        Ok(())
    }

    fn ctx(&self) -> ConstraintContext<'_> {
        ConstraintContext {
            corridor: &self.corridor,
            limits: &self.limits,
            follow_decel: self.follow_decel,
        }
    }

    pub fn stage_cost_value(&self, s: &EgoState, u: &Control) -> f64 {
        stage_value(s, u, &self.weights, self.v_dx, self.v_dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Threshold on the Euclidean norm of the control change over all stages.
    pub tolerance: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub min_step: f64,
    pub reg_init: f64,
    pub reg_max: f64,
    pub max_pivots: usize,
    pub qp_tolerance: f64,
    pub feasibility_tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tolerance: 1e-4,
            armijo: 1e-4,
            min_step: 1.0 / 1024.0,
            reg_init: 0.0,
            reg_max: 1e8,
            max_pivots: 10,
            qp_tolerance: 1e-9,
            feasibility_tolerance: 1e-6,
        }
    }
}

/// A dynamically consistent state/control trajectory with its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<EgoState>,
    pub controls: Vec<Control>,
    pub cost: f64,
}

/// Affine law `δu = k_ff + K_fb δx` for one stage, with the QP that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Gains {
    pub k_ff: Vector2<f64>,
    pub k_fb: Matrix2x4<f64>,
    pub active_set: Vec<ConstraintKind>,
    pub multipliers: Vec<f64>,
    /// Values of every stage constraint row at the nominal point.
    pub constraint_values: Vec<(ConstraintKind, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPass {
    pub gains: Vec<Gains>,
    pub q: Vec<QCoefficients>,
    /// Linear and quadratic parts of the predicted cost change at step size ε:
    /// `ε·linear + ε²·quadratic`.
    pub expected_linear: f64,
    pub expected_quadratic: f64,
}

impl BackwardPass {
    pub fn expected_change(&self, eps: f64) -> f64 {
        eps * self.expected_linear + eps * eps * self.expected_quadratic
    }

    pub fn feedforward_norm(&self) -> f64 {
        self.gains.iter().map(|g| g.k_ff.norm_squared()).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub step: f64,
    pub reg: f64,
    pub active_constraints: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub states: Vec<EgoState>,
    pub controls: Vec<Control>,
    pub cost: f64,
    /// Accepted forward passes.
    pub iterations: usize,
    pub converged: bool,
    /// Cost of the initial rollout followed by the cost after each accepted pass.
    pub cost_trace: Vec<f64>,
    pub records: Vec<IterationRecord>,
    /// Gains from the last backward pass.
    pub gains: Vec<Gains>,
    /// Worst exact constraint violation along the trajectory.
    pub max_violation: f64,
    /// Some stage had to brake fully because a stop line was already out of reach.
    pub brake_override: bool,
}

impl SolveResult {
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.max_violation <= tol
    }

    /// Writes `iteration,cost,step,reg,active,accepted` rows.
    pub fn write_trace_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "iteration,cost,step,reg,active,accepted")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:.10e},{},{:e},{},{}",
                r.iteration, r.cost, r.step, r.reg, r.active_constraints, r.accepted
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid problem: {0}")]
    InvalidDefinition(String),
    #[error("Quu not positive definite at stage {stage} even with maximal regularization")]
    DegenerateQuu { stage: usize },
    #[error("not converged after {} iterations", .0.iterations)]
    NotConverged(Box<SolveResult>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BackwardFailure {
    Degenerate(usize),
    Infeasible(usize),
}

/// Rolls `controls` out from the initial state, projecting each onto the
/// exact constraints.
pub fn rollout(def: &OcpDefinition, controls: &[Control]) -> (Trajectory, bool) {
    let ctx = def.ctx();
    let mut states = Vec::with_capacity(def.horizon + 1);
    let mut applied = Vec::with_capacity(def.horizon);
    let mut s = def.initial;
    let mut cost = 0.0;
    let mut override_any = false;
    states.push(s);
    for k in 0..def.horizon {
        let raw = controls.get(k).copied().unwrap_or(Control::ZERO);
        let p = project(&s, &raw, k, &ctx);
        override_any |= p.brake_override;
        cost += def.stage_cost_value(&s, &p.control);
        applied.push(p.control);
        s = step(s, p.control, def.limits.dt);
        states.push(s);
    }
    (
        Trajectory {
            states,
            controls: applied,
            cost,
        },
        override_any,
    )
}

fn forward_pass(def: &OcpDefinition, nominal: &Trajectory, bp: &BackwardPass, eps: f64) -> (Trajectory, bool) {
    let ctx = def.ctx();
    let dt = def.limits.dt;
    let mut states = Vec::with_capacity(def.horizon + 1);
    let mut controls = Vec::with_capacity(def.horizon);
    let mut s = def.initial;
    let mut cost = 0.0;
    let mut override_any = false;
    states.push(s);
    for k in 0..def.horizon {
        let g = &bp.gains[k];
        let dx: Vector4<f64> = s.to_vector() - nominal.states[k].to_vector();
        let du = g.k_ff * eps + g.k_fb * dx;
        let raw = Control::from_vector(&(nominal.controls[k].to_vector() + du));
        let p = project(&s, &raw, k, &ctx);
        override_any |= p.brake_override;
        cost += def.stage_cost_value(&s, &p.control);
        controls.push(p.control);
        s = step(s, p.control, dt);
        states.push(s);
    }
    (
        Trajectory {
            states,
            controls,
            cost,
        },
        override_any,
    )
}

fn stage_rows(def: &OcpDefinition, s: &EgoState, u: &Control, k: usize) -> Vec<ConstraintRow> {
    let ctx = def.ctx();
    let mut rows = linearize(s, u, k, &ctx);
    // When even full braking cannot honour the stop line, hold full braking instead.
    if def.corridor.stop_line(k + 1).is_some() {
        let (lo, _) = crate::dynamics::longitudinal_bounds(s, &def.limits);
        let cap = def
            .corridor
            .stop_line(k + 1)
            .map(|line| constraints::stop_line_accel_cap(s, &line, def.limits.dt, def.follow_decel))
            .unwrap_or(f64::INFINITY);
        if cap < lo {
            rows.retain(|r| !matches!(r.kind, ConstraintKind::StopLine | ConstraintKind::StopDistance));
            rows.push(brake_hold(s, u, &def.limits));
        }
    }
    rows
}

/// One backward pass about `nominal` with Levenberg regularization `reg`.
/// `warm` carries each stage's active set between iterations.
fn backward(
    def: &OcpDefinition,
    nominal: &Trajectory,
    reg: f64,
    opts: &SolverOptions,
    warm: &mut [Vec<ConstraintKind>],
) -> Result<BackwardPass, BackwardFailure> {
    let n = def.horizon;
    let dt = def.limits.dt;
    let mut next = ValueExpansion::zero();
    let mut gains = Vec::with_capacity(n);
    let mut qs = Vec::with_capacity(n);
    let (mut lin, mut quad) = (0.0, 0.0);
    for k in (0..n).rev() {
        let s = &nominal.states[k];
        let u = &nominal.controls[k];
        let c = stage_cost(s, u, &def.weights, def.v_dx, def.v_dy);
        let q = q_expansion(&c, &next, dt);
        let quu_reg = q.quu + Matrix2::identity() * reg;
        if Cholesky::new(quu_reg).is_none() {
            return Err(BackwardFailure::Degenerate(k));
        }
        let rows = stage_rows(def, s, u, k);
        let qp_rows: Vec<QpConstraint> = rows.iter().map(ConstraintRow::to_qp).collect();
        let warm_idx: Vec<usize> = warm[k]
            .iter()
            .filter_map(|kind| rows.iter().position(|r| r.kind == *kind))
            .collect();
        let mut g = Cols::zeros();
        g.set_column(0, &q.qu);
        for i in 0..4 {
            g.set_column(i + 1, &q.qux.column(i));
        }
        let sol = match qp::solve(&quu_reg, &g, &qp_rows, &warm_idx, opts.max_pivots, opts.qp_tolerance) {
            Some(sol) => sol,
            None => {
                // Linearized rows conflict; keep only the control bounds.
                let bounds: Vec<QpConstraint> = qp_rows[..3].to_vec();
                qp::solve(&quu_reg, &g, &bounds, &[], opts.max_pivots, opts.qp_tolerance)
                    .ok_or(BackwardFailure::Infeasible(k))?
            }
        };
        let k_ff: Vector2<f64> = sol.step();
        let k_fb = Matrix2x4::from_fn(|r, cidx| sol.d[(r, cidx + 1)]);
        let active_set: Vec<ConstraintKind> = sol.active.iter().map(|&i| rows[i].kind).collect();
        warm[k] = active_set.clone();

        // Value expansion with the (constrained) law substituted.
        let quu = q.quu;
        let vx = q.qx + k_fb.transpose() * (quu * k_ff) + k_fb.transpose() * q.qu + q.qux.transpose() * k_ff;
        let mut vxx = q.qxx + k_fb.transpose() * quu * k_fb + k_fb.transpose() * q.qux + q.qux.transpose() * k_fb;
        vxx = 0.5 * (vxx + vxx.transpose());
        next = ValueExpansion { vx, vxx };

        lin += k_ff.dot(&q.qu);
        quad += 0.5 * k_ff.dot(&(quu * k_ff));
        gains.push(Gains {
            k_ff,
            k_fb,
            active_set,
            multipliers: sol.multipliers,
            constraint_values: rows.iter().map(|r| (r.kind, r.value)).collect(),
        });
        qs.push(q);
    }
    gains.reverse();
    qs.reverse();
    Ok(BackwardPass {
        gains,
        q: qs,
        expected_linear: lin,
        expected_quadratic: quad,
    })
}

/// Public backward pass without warm-started active sets.
pub fn backward_pass(def: &OcpDefinition, nominal: &Trajectory, reg: f64) -> Result<BackwardPass, SolveError> {
    let mut warm = vec![Vec::new(); def.horizon];
    backward(def, nominal, reg, &SolverOptions::default(), &mut warm).map_err(|e| match e {
        BackwardFailure::Degenerate(stage) | BackwardFailure::Infeasible(stage) => {
            SolveError::DegenerateQuu { stage }
        }
    })
}

fn trajectory_violation(def: &OcpDefinition, t: &Trajectory) -> f64 {
    let ctx = def.ctx();
    (0..def.horizon)
        .map(|k| max_violation(&t.states[k], &t.controls[k], k, &ctx))
        .fold(0.0, f64::max)
}

/// Solves the problem from `warm_start` controls, or zero controls.
pub fn solve(
    def: &OcpDefinition,
    warm_start: Option<&[Control]>,
    opts: &SolverOptions,
) -> Result<SolveResult, SolveError> {
    def.validate()?;
    let zeros = vec![Control::ZERO; def.horizon];
    let (mut traj, mut override_any) = rollout(def, warm_start.unwrap_or(&zeros));
    let mut warm = vec![Vec::new(); def.horizon];
    let mut reg = opts.reg_init;
    let mut cost_trace = vec![traj.cost];
    let mut records = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut last_gains = Vec::new();
    let mut attempts = 0;
    let reg_floor = 1e-6;

    while iterations < opts.max_iters && attempts < 4 * opts.max_iters {
        attempts += 1;
        let bp = match backward(def, &traj, reg, opts, &mut warm) {
            Ok(bp) => bp,
            Err(BackwardFailure::Degenerate(stage)) | Err(BackwardFailure::Infeasible(stage)) => {
                reg = (reg * 10.0).max(reg_floor);
                if reg > opts.reg_max {
                    return Err(SolveError::DegenerateQuu { stage });
                }
                continue;
            }
        };
        let active: usize = bp.gains.iter().map(|g| g.active_set.len()).sum();
        if iterations > 0 && bp.feedforward_norm() < opts.tolerance {
            converged = true;
            last_gains = bp.gains;
            break;
        }

        let mut eps = 1.0;
        let mut accepted = None;
        while eps >= opts.min_step {
            let (cand, ov) = forward_pass(def, &traj, &bp, eps);
            let expected = bp.expected_change(eps).min(0.0);
            let slack = 1e-12 * (1.0 + traj.cost.abs());
            if cand.cost - traj.cost <= opts.armijo * expected + slack {
                accepted = Some((cand, ov, eps));
                break;
            }
            eps *= 0.5;
        }
        last_gains = bp.gains;
        match accepted {
            Some((cand, ov, eps)) => {
                let change = traj
                    .controls
                    .iter()
                    .zip(&cand.controls)
                    .map(|(a, b)| (a.to_vector() - b.to_vector()).norm_squared())
                    .sum::<f64>()
                    .sqrt();
                traj = cand;
                override_any = ov;
                iterations += 1;
                cost_trace.push(traj.cost);
                records.push(IterationRecord {
                    iteration: iterations,
                    cost: traj.cost,
                    step: eps,
                    reg,
                    active_constraints: active,
                    accepted: true,
                });
                reg = if reg * 0.5 < reg_floor { 0.0 } else { reg * 0.5 };
                if change < opts.tolerance {
                    converged = true;
                    break;
                }
            }
            None => {
                records.push(IterationRecord {
                    iteration: iterations,
                    cost: traj.cost,
                    step: 0.0,
                    reg,
                    active_constraints: active,
                    accepted: false,
                });
                reg = (reg * 10.0).max(reg_floor);
                if reg > opts.reg_max {
                    break;
                }
            }
        }
    }

    let result = SolveResult {
        max_violation: trajectory_violation(def, &traj),
        states: traj.states,
        controls: traj.controls,
        cost: traj.cost,
        iterations,
        converged,
        cost_trace,
        records,
        gains: last_gains,
        brake_override: override_any,
    };
    if converged {
        Ok(result)
    } else {
        Err(SolveError::NotConverged(Box::new(result)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corridor::RoadGeometry;

    fn open_def(initial: EgoState, horizon: usize) -> OcpDefinition {
        let road = RoadGeometry::new(3.6, 2);
        OcpDefinition {
            horizon,
            initial,
            weights: Weights::default(),
            v_dx: 15.0,
            v_dy: 0.0,
            corridor: CorridorSpec::open(road, (1.8, 5.4), horizon, 0.25),
            limits: VehicleLimits::default(),
            follow_decel: 4.0,
        }
    }

    #[test]
    fn stationary_point_converges_in_one_iteration() {
        let def = open_def(EgoState::new(0.0, 3.6, 15.0, 0.0), 20);
        let r = solve(&def, None, &SolverOptions::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.controls.iter().all(|u| u.ux == 0.0 && u.uy == 0.0));
        assert_eq!(r.cost, 0.0);
    }

    #[test]
    fn zero_gains_keep_nominal() {
        let def = open_def(EgoState::new(0.0, 3.6, 15.0, 0.0), 5);
        let (nominal, _) = rollout(&def, &[]);
        let bp = backward_pass(&def, &nominal, 0.0).unwrap();
        assert_eq!(bp.feedforward_norm(), 0.0);
        let (t, _) = forward_pass(&def, &nominal, &bp, 1.0);
        assert_eq!(t, nominal);
    }

    #[test]
    fn speed_floor_binds_when_braking_to_rest() {
        let mut def = open_def(EgoState::new(0.0, 3.6, 2.0, 0.0), 12);
        def.v_dx = -5.0;
        let r = solve(&def, None, &SolverOptions::default()).unwrap();
        assert!(r.states.iter().all(|s| s.vx >= -1e-12));
        assert!(r.is_feasible(1e-6));
        assert!(r.cost_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn invalid_definitions() {
        let mut def = open_def(EgoState::default(), 5);
        def.weights.w1 = 0.0;
        assert!(matches!(solve(&def, None, &SolverOptions::default()), Err(SolveError::InvalidDefinition(_))));
        let mut def = open_def(EgoState::default(), 5);
        def.horizon = 9;
        assert!(matches!(solve(&def, None, &SolverOptions::default()), Err(SolveError::InvalidDefinition(_))));
    }
}
