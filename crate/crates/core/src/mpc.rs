//! Receding-horizon driver: decide orientations, build the corridor, solve,
//! apply the first control, advance the world, repeat.

use std::io::{self, Write};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corridor::{
    obstacle_sigmoid_params, CorridorConfig, CorridorError, CorridorInputs, CorridorSpec,
    Obstacle, Orientation, Rect, RoadGeometry, StopLine,
};
use crate::ddp::constraints::{project, ConstraintContext};
use crate::ddp::cost::Weights;
use crate::ddp::{self, OcpDefinition, SolveError, SolveResult, SolverOptions};
use crate::dynamics::{longitudinal_bounds, step, Control, EgoState, VehicleLimits};
use crate::reasoner::llm::{AssignmentSource, AsyncLlm, LlmConfig};
use crate::reasoner::{
    decide_lambdas_or_static, DrivingConditionSummary, LambdaAssignment, ReasonerConfig,
};
use crate::sim::Scenario;

/// Speed below which a vehicle held by a stationary stop line counts as halted.
const HALT_SPEED: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ReasonerMode {
    Rules,
    Llm(LlmConfig),
}

/// Which corridor the planner may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorridorPolicy {
    /// The full road, with orientations from the reasoner.
    Adaptive,
    /// The ego's current lane only; no lane changes.
    LaneLocked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Horizon K in steps.
    pub horizon: usize,
    /// Acceleration limits and step length T.
    pub limits: VehicleLimits,
    /// Steps between replans; in between the stored plan is played back.
    pub replan_period: usize,
    pub warm_start: bool,
    /// Soft per-cycle budget [s]. Overruns are counted, never enforced.
    pub max_solve_time: Option<f64>,
    pub weights: Weights,
    pub corridor: CorridorConfig,
    pub solver: SolverOptions,
    /// Deceleration assumed for the stop-distance constraint [m/s²].
    pub follow_decel: f64,
    pub enumeration_cap: usize,
    pub reasoner: ReasonerMode,
    pub policy: CorridorPolicy,
    /// Consecutive fallback cycles tolerated before giving up.
    pub max_consecutive_failures: usize,
    /// Keep the corridor of every n-th cycle in the trace; 0 keeps none.
    pub snapshot_every: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 40,
            limits: VehicleLimits::default(),
            replan_period: 1,
            warm_start: true,
            max_solve_time: None,
            weights: Weights::default(),
            corridor: CorridorConfig::default(),
            solver: SolverOptions::default(),
            follow_decel: 4.0,
            enumeration_cap: 8,
            reasoner: ReasonerMode::Rules,
            policy: CorridorPolicy::Adaptive,
            max_consecutive_failures: 8,
            snapshot_every: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid MPC configuration: {0}")]
pub struct ConfigError(pub String);

impl MpcConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError(m.into()));
        if self.horizon < 2 {
            return bad("horizon must be at least 2 steps");
        }
        if self.replan_period < 1 {
            return bad("replan period must be at least 1 step");
        }
        if !self.limits.is_valid() {
            return bad("need ux_min < 0 < ux_max and a positive step length");
        }
        if !self.weights.is_valid() {
            return bad("weights must be positive and finite");
        }
        if !(self.follow_decel > 0.0) {
            return bad("follow deceleration must be positive");
        }
        if let ReasonerMode::Llm(c) = &self.reasoner {
            if c.endpoint.is_empty() || !(c.timeout_s > 0.0) {
                return bad("llm mode needs an endpoint and a positive timeout");
            }
        }
        Ok(())
    }

    pub fn reasoner_config(&self) -> ReasonerConfig {
        ReasonerConfig {
            corridor: self.corridor,
            limits: self.limits,
            horizon: self.horizon,
            enumeration_cap: self.enumeration_cap,
            ..ReasonerConfig::default()
        }
    }

    /// Corridor settings matched to the ego footprint.
    pub fn with_footprint(&self, length: f64, width: f64) -> MpcConfig {
        let mut c = self.clone();
        c.corridor.ego_half_length = 0.5 * length;
        c.corridor.ego_half_width = 0.5 * width;
        c
    }
}

/// What the planner sees at one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub ego: EgoState,
    pub obstacles: Vec<Obstacle>,
    pub road: RoadGeometry,
    pub desired_speed: f64,
    pub speed_limit: Option<f64>,
}

impl World {
    fn summary(&self) -> DrivingConditionSummary {
        DrivingConditionSummary {
            ego: self.ego,
            obstacles: self.obstacles.clone(),
            road: self.road,
            speed_limit: self.speed_limit,
            desired_speed: self.desired_speed,
        }
    }

    fn target_speed(&self) -> f64 {
        match self.speed_limit {
            Some(l) => self.desired_speed.min(l),
            None => self.desired_speed,
        }
    }
}

/// Constant-velocity poses at steps `0..=k`, one row per step.
pub fn predict_obstacles(obstacles: &[Obstacle], k: usize, dt: f64, road: &RoadGeometry) -> Vec<Vec<Obstacle>> {
    (0..=k)
        .map(|i| obstacles.iter().map(|o| o.extrapolate(i as f64 * dt, road)).collect())
        .collect()
}

/// Footprint overlap between the ego and any obstacle. No inflation.
pub fn collision_check(ego: &EgoState, length: f64, width: f64, obstacles: &[Obstacle]) -> bool {
    let e = Rect::centered(ego.x, ego.y, length, width);
    obstacles
        .iter()
        .any(|o| e.overlaps(&Rect::centered(o.x, o.y, o.length, o.width)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSource {
    Rules,
    /// Every candidate pinched; the previous assignment (or the static
    /// rules on the first cycle) was used.
    RulesPinched,
    Llm,
    LaneRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleStatus {
    Optimal,
    /// Iteration cap reached with a feasible plan, which is used.
    NotConverged,
    /// Braking fallback; the string says why.
    Fallback(String),
    /// Playback of a stored plan between replans.
    Playback,
}

impl CycleStatus {
    pub fn label(&self) -> &'static str {
        match self {
            CycleStatus::Optimal => "optimal",
            CycleStatus::NotConverged => "not_converged",
            CycleStatus::Fallback(_) => "fallback",
            CycleStatus::Playback => "playback",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleTiming {
    pub reasoner_ms: f64,
    pub corridor_ms: f64,
    pub solve_ms: f64,
    /// Whole planning cycle; this is what the computation-time metric uses.
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct CyclePlan {
    pub control: Control,
    pub solve: Option<SolveResult>,
    pub lambdas: LambdaAssignment,
    pub source: LambdaSource,
    pub corridor: CorridorSpec,
    pub timing: CycleTiming,
    pub status: CycleStatus,
    /// Orientations flipped because the predicted plateau left the road.
    pub repaired: Vec<usize>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Orientations for the lane-locked corridor: keep the ego's lane, flipped
/// when the plateau would leave the road.
fn lane_rule(world: &World, cfg: &MpcConfig) -> LambdaAssignment {
    let lane = world.road.lane_of(world.ego.y);
    let yc = world.road.lane_center(lane);
    world
        .obstacles
        .iter()
        .map(|o| {
            let dir = if o.y >= yc {
                Orientation::PassBelow
            } else {
                Orientation::PassAbove
            };
            match obstacle_sigmoid_params(o, dir, &world.ego, &world.road, &cfg.corridor) {
                Err(CorridorError::MarginOverflow { .. }) => dir.flipped(),
                _ => dir,
            }
        })
        .collect()
}

fn corridor_limits(world: &World, cfg: &MpcConfig) -> (f64, f64) {
    match cfg.policy {
        CorridorPolicy::Adaptive => cfg.corridor.road_limits(&world.road),
        CorridorPolicy::LaneLocked => {
            let yc = world.road.lane_center(world.road.lane_of(world.ego.y));
            let half = (0.5 * world.road.lane_width - cfg.corridor.ego_half_width).max(0.0);
            (yc - half, yc + half)
        }
    }
}

/// Longitudinal range searched for pinches: everything the ego could reach
/// within the horizon, plus one step of slack.
fn search_range(world: &World, cfg: &MpcConfig) -> (f64, f64) {
    let t = (cfg.horizon + 1) as f64 * cfg.limits.dt;
    let v = world.ego.vx.max(world.target_speed());
    (world.ego.x, world.ego.x + v * t + 0.5 * cfg.limits.ux_max * t * t)
}

/// Flips orientations whose predicted plateau leaves the road at some step,
/// which happens when a vehicle is predicted to drift across the centreline.
fn repair_orientations(inputs: &mut CorridorInputs, cfg: &CorridorConfig, horizon: usize) -> Vec<usize> {
    let mut flipped = Vec::new();
    for i in 0..inputs.obstacles.len() {
        let fails = |dir: Orientation| {
            (0..=horizon).any(|k| {
                let p = inputs.obstacles[i].extrapolate(k as f64 * inputs.dt, &inputs.road);
                obstacle_sigmoid_params(&p, dir, &inputs.ego, &inputs.road, cfg).is_err()
            })
        };
        let dir = inputs.orientations[i];
        if fails(dir) && !fails(dir.flipped()) {
            inputs.orientations[i] = dir.flipped();
            flipped.push(i);
        }
    }
    flipped
}

/// Brake at the lower longitudinal bound, steering only as much as needed to
/// stay inside the step-1 corridor.
fn fallback_control(ego: &EgoState, corridor: &CorridorSpec, cfg: &MpcConfig) -> Control {
    let (lo, _) = longitudinal_bounds(ego, &cfg.limits);
    let ctx = ConstraintContext {
        corridor,
        limits: &cfg.limits,
        follow_decel: cfg.follow_decel,
    };
    project(ego, &Control::new(lo, 0.0), 0, &ctx).control
}

/// Previous controls shifted by `by` steps, the last one repeated.
pub fn shift_controls(prev: &[Control], by: usize, horizon: usize) -> Vec<Control> {
    let last = prev.last().copied().unwrap_or(Control::ZERO);
    (0..horizon)
        .map(|k| prev.get(k + by).copied().unwrap_or(last))
        .collect()
}

/// One planning cycle with the rule-based (or lane-locked) orientations.
pub fn plan_cycle(world: &World, cfg: &MpcConfig, prev: Option<&SolveResult>) -> CyclePlan {
    plan_with(world, cfg, prev, None, None)
}

/// `sticky` is the previous cycle's assignment, kept when every candidate
/// pinches and the obstacle list is unchanged in length.
fn plan_with(
    world: &World,
    cfg: &MpcConfig,
    prev: Option<&SolveResult>,
    decided: Option<(LambdaAssignment, LambdaSource)>,
    sticky: Option<&LambdaAssignment>,
) -> CyclePlan {
    let start = Instant::now();
    let (lambdas, source) = match (cfg.policy, decided) {
        (CorridorPolicy::LaneLocked, _) => (lane_rule(world, cfg), LambdaSource::LaneRule),
        (CorridorPolicy::Adaptive, Some(d)) => d,
        (CorridorPolicy::Adaptive, None) => {
            let (a, err) = decide_lambdas_or_static(&world.summary(), &cfg.reasoner_config());
            match (err, sticky) {
                (None, _) => (a, LambdaSource::Rules),
                (Some(_), Some(p)) if p.len() == a.len() => (p.clone(), LambdaSource::RulesPinched),
                (Some(_), _) => (a, LambdaSource::RulesPinched),
            }
        }
    };
    let reasoned = Instant::now();

    let mut inputs = CorridorInputs {
        obstacles: world.obstacles.clone(),
        orientations: lambdas.clone(),
        ego: world.ego,
        road: world.road,
        limits: corridor_limits(world, cfg),
        dt: cfg.limits.dt,
        search: search_range(world, cfg),
    };
    let repaired = repair_orientations(&mut inputs, &cfg.corridor, cfg.horizon);
    let built = CorridorSpec::build(inputs.clone(), &cfg.corridor, cfg.horizon);
    let cornered = Instant::now();

    let mut timing = CycleTiming {
        reasoner_ms: ms(reasoned - start),
        corridor_ms: ms(cornered - reasoned),
        ..CycleTiming::default()
    };
    let lambdas = inputs.orientations.clone();

    let corridor = match built {
        Ok(c) => c,
        Err(e) => {
            // No corridor for the chosen orientations: brake inside the
            // obstacle-free band.
            let open = CorridorSpec::open(world.road, inputs.limits, cfg.horizon, cfg.limits.dt);
            let control = fallback_control(&world.ego, &open, cfg);
            timing.total_ms = ms(start.elapsed());
            return CyclePlan {
                control,
                solve: None,
                lambdas,
                source,
                corridor: open,
                timing,
                status: CycleStatus::Fallback(format!("corridor: {e}")),
                repaired,
            };
        }
    };

    let def = OcpDefinition {
        horizon: cfg.horizon,
        initial: world.ego,
        weights: cfg.weights,
        v_dx: world.target_speed(),
        v_dy: 0.0,
        corridor,
        limits: cfg.limits,
        follow_decel: cfg.follow_decel,
    };
    let warm = match (cfg.warm_start, prev) {
        (true, Some(p)) => Some(shift_controls(&p.controls, 1, cfg.horizon)),
        _ => None,
    };
    let solved = ddp::solve(&def, warm.as_deref(), &cfg.solver);
    let solve_end = Instant::now();
    timing.solve_ms = ms(solve_end - cornered);

    let tol = cfg.solver.feasibility_tolerance;
    let (solve, status) = match solved {
        Ok(r) if r.is_feasible(tol) => (Some(r), CycleStatus::Optimal),
        Ok(r) => (Some(r), CycleStatus::Fallback("infeasible plan".into())),
        Err(SolveError::NotConverged(r)) if r.is_feasible(tol) => (Some(*r), CycleStatus::NotConverged),
        Err(SolveError::NotConverged(r)) => (Some(*r), CycleStatus::Fallback("not converged and infeasible".into())),
        Err(e) => (None, CycleStatus::Fallback(format!("solver: {e}"))),
    };
    let control = match (&status, &solve) {
        (CycleStatus::Optimal | CycleStatus::NotConverged, Some(r)) => r.controls[0],
        _ => fallback_control(&world.ego, &def.corridor, cfg),
    };
    timing.total_ms = ms(start.elapsed());
    CyclePlan {
        control,
        solve,
        lambdas,
        source,
        corridor: def.corridor,
        timing,
        status,
        repaired,
    }
}

/// Holds the state kept between cycles: the previous solution and the
/// model adapter when one is configured.
#[derive(Debug)]
pub struct Planner {
    cfg: MpcConfig,
    llm: Option<AsyncLlm>,
    prev: Option<SolveResult>,
    lambdas: Option<LambdaAssignment>,
}

impl Planner {
    pub fn new(cfg: MpcConfig) -> Self {
        let llm = match &cfg.reasoner {
            ReasonerMode::Llm(c) => Some(AsyncLlm::new(c.clone(), cfg.reasoner_config())),
            ReasonerMode::Rules => None,
        };
        Self {
            cfg,
            llm,
            prev: None,
            lambdas: None,
        }
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn plan(&mut self, world: &World) -> CyclePlan {
        let decided = match (&mut self.llm, self.cfg.policy) {
            (Some(llm), CorridorPolicy::Adaptive) => {
                let (a, src) = llm.decide(&world.summary());
                let src = match src {
                    AssignmentSource::Llm => LambdaSource::Llm,
                    AssignmentSource::Rules => LambdaSource::Rules,
                };
                Some((a, src))
            }
            _ => None,
        };
        let plan = plan_with(world, &self.cfg, self.prev.as_ref(), decided, self.lambdas.as_ref());
        self.lambdas = Some(plan.lambdas.clone());
        self.prev = match plan.status {
            CycleStatus::Optimal | CycleStatus::NotConverged => plan.solve.clone(),
            _ => None,
        };
        plan
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    Completed,
    Collision,
    Pinched,
    SolverFailure,
}

impl TerminalStatus {
    pub fn label(self) -> &'static str {
        match self {
            TerminalStatus::Completed => "completed",
            TerminalStatus::Collision => "collision",
            TerminalStatus::Pinched => "pinched",
            TerminalStatus::SolverFailure => "solver-failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub t: f64,
    /// State at the start of the cycle.
    pub state: EgoState,
    pub control: Control,
    pub lambdas: Vec<Orientation>,
    pub source: LambdaSource,
    pub timing: CycleTiming,
    pub iterations: usize,
    pub status: CycleStatus,
    /// How far the next state lies outside this cycle's step-1 corridor [m].
    pub containment_violation: f64,
    pub brake_override: bool,
    pub stop_line: Option<StopLine>,
    /// Index into [`ClosedLoopTrace::snapshots`].
    pub snapshot: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CorridorSnapshot {
    pub cycle: usize,
    pub corridor: CorridorSpec,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopTrace {
    pub cycles: Vec<CycleRecord>,
    pub final_state: EgoState,
    pub final_time: f64,
    pub dt: f64,
    pub status: TerminalStatus,
    pub snapshots: Vec<CorridorSnapshot>,
    pub budget_overruns: usize,
}

impl ClosedLoopTrace {
    /// Ego states at every cycle start followed by the final state.
    pub fn states(&self) -> Vec<EgoState> {
        let mut v: Vec<EgoState> = self.cycles.iter().map(|c| c.state).collect();
        v.push(self.final_state);
        v
    }

    pub fn collided(&self) -> bool {
        self.status == TerminalStatus::Collision
    }

    pub fn max_containment_violation(&self) -> f64 {
        self.cycles
            .iter()
            .map(|c| c.containment_violation)
            .fold(0.0, f64::max)
    }

    pub fn planning_times_ms(&self) -> Vec<f64> {
        self.cycles
            .iter()
            .filter(|c| c.status != CycleStatus::Playback)
            .map(|c| c.timing.total_ms)
            .collect()
    }

    /// Columns: t, x, y, vx, vy, ux, uy, solve_ms, status, then iterations,
    /// lambdas (space-separated ±1) and containment violation. A final row
    /// carries the terminal state with empty control fields.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "t,x,y,vx,vy,ux,uy,solve_ms,status,iterations,lambdas,violation")?;
        for c in &self.cycles {
            let lambdas: Vec<String> = c.lambdas.iter().map(|o| format!("{:+}", o.sign())).collect();
            writeln!(
                out,
                "{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{},{},{},{:.3e}",
                c.t,
                c.state.x,
                c.state.y,
                c.state.vx,
                c.state.vy,
                c.control.ux,
                c.control.uy,
                c.timing.total_ms,
                c.status.label(),
                c.iterations,
                lambdas.join(" "),
                c.containment_violation
            )?;
        }
        let s = self.final_state;
        writeln!(
            out,
            "{:.4},{:.6},{:.6},{:.6},{:.6},,,,{},,,",
            self.final_time,
            s.x,
            s.y,
            s.vx,
            s.vy,
            self.status.label()
        )
    }
}

/// Distance by which `s` lies outside step `k` of `corridor`.
fn outside(corridor: &CorridorSpec, k: usize, s: &EgoState) -> f64 {
    let (lo, hi) = corridor.step(k).bounds(s.x);
    (lo - s.y).max(s.y - hi).max(0.0)
}

/// Closed-loop simulation of `scenario` for `duration` seconds.
pub fn run(scenario: &Scenario, duration: f64, cfg: &MpcConfig) -> ClosedLoopTrace {
    run_from(scenario, scenario.ego.state, 0.0, duration, cfg)
}

/// Like [`run`] but starting from `ego` at time `t0`, with obstacles at their
/// scripted poses for that time.
pub fn run_from(scenario: &Scenario, ego: EgoState, t0: f64, duration: f64, cfg: &MpcConfig) -> ClosedLoopTrace {
    let mut cfg = cfg.with_footprint(scenario.ego.length, scenario.ego.width);
    cfg.limits.dt = scenario.dt;
    let dt = scenario.dt;
    let (len, wid) = (scenario.ego.length, scenario.ego.width);
    let mut planner = Planner::new(cfg.clone());
    let n_cycles = ((duration - t0) / dt - 1e-9).ceil().max(0.0) as usize;

    let mut ego = ego;
    let mut cycles = Vec::with_capacity(n_cycles);
    let mut snapshots = Vec::new();
    let mut stored: Option<CyclePlan> = None;
    let mut since_plan = 0;
    let mut failures = 0;
    let mut overruns = 0;
    let mut status = TerminalStatus::Completed;
    let mut t = t0;

    for cycle in 0..n_cycles {
        t = t0 + cycle as f64 * dt;
        let obstacles = scenario.obstacles_at(t);
        if collision_check(&ego, len, wid, &obstacles) {
            status = TerminalStatus::Collision;
            break;
        }
        if scenario.road_length.is_some_and(|l| ego.x >= l) {
            break;
        }
        let world = World {
            ego,
            obstacles,
            road: scenario.road,
            desired_speed: scenario.ego.desired_speed,
            speed_limit: scenario.speed_limit,
        };

        let replan = stored.is_none() || since_plan >= cfg.replan_period;
        let (control, record_status, plan_ref) = if replan {
            let plan = planner.plan(&world);
            since_plan = 1;
            if cfg.max_solve_time.is_some_and(|b| plan.timing.total_ms > b * 1e3) {
                overruns += 1;
            }
            let st = plan.status.clone();
            let u = plan.control;
            stored = Some(plan);
            (u, st, true)
        } else {
            let plan = stored.as_ref().expect("stored plan");
            let u = match &plan.solve {
                Some(r) if !matches!(plan.status, CycleStatus::Fallback(_)) => {
                    let ctx = ConstraintContext {
                        corridor: &plan.corridor,
                        limits: &cfg.limits,
                        follow_decel: cfg.follow_decel,
                    };
                    let k = since_plan.min(r.controls.len() - 1);
                    project(&ego, &r.controls[k], k, &ctx).control
                }
                _ => fallback_control(&ego, &plan.corridor, &cfg),
            };
            since_plan += 1;
            (u, CycleStatus::Playback, false)
        };
        let plan = stored.as_ref().expect("stored plan");
        let k_plan = since_plan - 1;

        if matches!(record_status, CycleStatus::Fallback(_)) {
            failures += 1;
        } else if replan {
            failures = 0;
        }

        let next = step(ego, control, dt);
        let snapshot = if plan_ref && cfg.snapshot_every > 0 && cycle % cfg.snapshot_every == 0 {
            snapshots.push(CorridorSnapshot {
                cycle,
                corridor: plan.corridor.clone(),
            });
            Some(snapshots.len() - 1)
        } else {
            None
        };
        let stop_line = plan.corridor.stop_line(k_plan + 1);
        cycles.push(CycleRecord {
            cycle,
            t,
            state: ego,
            control,
            lambdas: plan.lambdas.clone(),
            source: plan.source,
            timing: if plan_ref { plan.timing } else { CycleTiming::default() },
            iterations: if plan_ref {
                plan.solve.as_ref().map_or(0, |r| r.iterations)
            } else {
                0
            },
            status: record_status,
            containment_violation: outside(&plan.corridor, k_plan + 1, &next),
            brake_override: plan_ref && plan.solve.as_ref().is_some_and(|r| r.brake_override),
            stop_line,
            snapshot,
        });
        ego = next;
        t += dt;

        if failures > cfg.max_consecutive_failures {
            status = TerminalStatus::SolverFailure;
            break;
        }
        let held = stop_line.is_some_and(|l| l.speed < HALT_SPEED);
        if held && ego.vx < HALT_SPEED {
            status = TerminalStatus::Pinched;
            break;
        }
    }
    if status == TerminalStatus::Completed && collision_check(&ego, len, wid, &scenario.obstacles_at(t)) {
        status = TerminalStatus::Collision;
    }
    ClosedLoopTrace {
        cycles,
        final_state: ego,
        final_time: t,
        dt,
        status,
        snapshots,
        budget_overruns: overruns,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn road() -> RoadGeometry {
        RoadGeometry::new(3.6, 2)
    }

    #[test]
    fn prediction_examples() {
        let r = road();
        let o = Obstacle::new(50.0, 1.8, 10.0, 4.5, 1.8);
        assert_eq!(predict_obstacles(&[o], 4, 0.25, &r)[4][0].x, 60.0);
        let mut drift = Obstacle::new(0.0, 5.4, 0.0, 4.5, 1.8);
        drift.vy = 1.0;
        for row in predict_obstacles(&[drift], 40, 0.25, &r) {
            assert!(row[0].y <= r.width() - 0.9 + 1e-12);
        }
        let still = Obstacle::new(12.0, 1.8, 0.0, 4.5, 1.8);
        let rows = predict_obstacles(&[still], 10, 0.25, &r);
        assert!(rows.iter().all(|row| row[0] == still));
    }

    #[test]
    fn collision_examples() {
        let ego = EgoState::new(0.0, 1.8, 10.0, 0.0);
        let far = Obstacle::new(14.5, 1.8, 0.0, 4.5, 1.8);
        assert!(!collision_check(&ego, 4.5, 1.8, &[far]));
        let same = Obstacle::new(0.0, 1.8, 0.0, 4.5, 1.8);
        assert!(collision_check(&ego, 4.5, 1.8, &[same]));
        let touching = Obstacle::new(4.5, 1.8, 0.0, 4.5, 1.8);
        assert!(!collision_check(&ego, 4.5, 1.8, &[touching]));
    }

    #[test]
    fn stationary_optimum_needs_no_control() {
        let world = World {
            ego: EgoState::new(0.0, 1.8, 15.0, 0.0),
            obstacles: vec![],
            road: road(),
            desired_speed: 15.0,
            speed_limit: None,
        };
        let plan = plan_cycle(&world, &MpcConfig::default(), None);
        assert_eq!(plan.status, CycleStatus::Optimal);
        assert!(plan.control.ux.abs() < 1e-6 && plan.control.uy.abs() < 1e-6);
    }

    #[test]
    fn shift_repeats_last() {
        let u: Vec<Control> = (0..3).map(|i| Control::new(i as f64, 0.0)).collect();
        let s = shift_controls(&u, 1, 3);
        assert_eq!(s.iter().map(|c| c.ux).collect::<Vec<_>>(), vec![1.0, 2.0, 2.0]);
    }

    #[test]
    fn config_validation() {
        assert!(MpcConfig::default().validate().is_ok());
        let c = MpcConfig {
            horizon: 1,
            ..MpcConfig::default()
        };
        assert!(c.validate().is_err());
        let c = MpcConfig {
            replan_period: 0,
            ..MpcConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
