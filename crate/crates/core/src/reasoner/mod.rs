//! Orientation (λ) decisions for every obstacle.
//!
//! Obstacles in the edge lanes are decided by which half of the road they
//! occupy. On roads with three or more lanes, obstacles in the interior lanes
//! are resolved by maximizing the free corridor area ahead of the ego.

pub mod llm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corridor::{
    CorridorConfig, CorridorError, CorridorInputs, CorridorSpec, CorridorStep, Obstacle,
    Orientation, RoadGeometry,
};
use crate::dynamics::{EgoState, VehicleLimits};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReasonerError {
    #[error("every orientation assignment pinches the corridor; braking is the only option")]
    AllPinched,
}

/// Everything the reasoner sees about the current situation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingConditionSummary {
    pub ego: EgoState,
    pub obstacles: Vec<Obstacle>,
    pub road: RoadGeometry,
    pub speed_limit: Option<f64>,
    pub desired_speed: f64,
}

pub type LambdaAssignment = Vec<Orientation>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReasonerConfig {
    pub corridor: CorridorConfig,
    pub limits: VehicleLimits,
    /// Planning horizon in steps; sets the scored span.
    pub horizon: usize,
    /// Largest number of interior-lane obstacles resolved by full enumeration.
    pub enumeration_cap: usize,
    /// How far outside the step-0 corridor the ego may sit and still count as
    /// contained [m]. Boundaries shift slightly between cycles as the
    /// speed-dependent margins change, so an ego riding a boundary can end up
    /// just outside the rebuilt corridor.
    pub containment_slack: f64,
}

impl ReasonerConfig {
    fn corridor_slack(&self) -> f64 {
        self.containment_slack.max(1e-6)
    }
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            corridor: CorridorConfig::default(),
            limits: VehicleLimits::default(),
            horizon: 40,
            enumeration_cap: 8,
            containment_slack: 0.5,
        }
    }
}

/// `PassBelow` when the obstacle sits in the upper half (inclusive), else `PassAbove`.
pub fn static_rule(y_o: f64, road: &RoadGeometry) -> Orientation {
    if y_o >= 0.5 * road.width() {
        Orientation::PassBelow
    } else {
        Orientation::PassAbove
    }
}

/// Indices of obstacles in interior lanes, where either orientation is
/// geometrically possible. Always empty on two-lane roads.
pub fn ambiguous_obstacles(summary: &DrivingConditionSummary) -> Vec<usize> {
    let road = &summary.road;
    if road.n_lanes <= 2 {
        return Vec::new();
    }
    summary
        .obstacles
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            let lane = road.lane_of(o.y);
            lane != 0 && lane != road.n_lanes - 1
        })
        .map(|(i, _)| i)
        .collect()
}

fn static_assignment(summary: &DrivingConditionSummary) -> LambdaAssignment {
    summary
        .obstacles
        .iter()
        .map(|o| static_rule(o.y, &summary.road))
        .collect()
}

/// Longitudinal span scored by the efficiency check.
pub fn scored_span(ego: &EgoState, cfg: &ReasonerConfig) -> (f64, f64) {
    let horizon_t = cfg.horizon as f64 * cfg.limits.dt;
    let reach = ego.vx * horizon_t + 0.5 * cfg.limits.ux_max * horizon_t * horizon_t;
    (ego.x, ego.x + reach.max(cfg.corridor.grid_step))
}

/// How a candidate assignment was judged.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub assignment: LambdaAssignment,
    /// Free corridor area summed over the first, middle and last horizon steps [m²].
    pub area: f64,
    /// Length of the scored span over which the ego's current `y` stays inside
    /// the step-0 corridor [m].
    pub containment: f64,
    /// Whether the step-0 corridor contains the ego (within the configured
    /// slack) and any pinch ahead can
    /// still be stopped for at full braking.
    pub valid: bool,
}

fn corridor_inputs(
    summary: &DrivingConditionSummary,
    assignment: &[Orientation],
    cfg: &ReasonerConfig,
    span: (f64, f64),
) -> CorridorInputs {
    CorridorInputs {
        obstacles: summary.obstacles.clone(),
        orientations: assignment.to_vec(),
        ego: summary.ego,
        road: summary.road,
        limits: cfg.corridor.road_limits(&summary.road),
        dt: cfg.limits.dt,
        search: span,
    }
}

/// Scores one assignment. Plateaus pushed off the road make it invalid.
pub fn score_assignment(
    summary: &DrivingConditionSummary,
    assignment: &[Orientation],
    cfg: &ReasonerConfig,
) -> CandidateScore {
    let invalid = CandidateScore {
        assignment: assignment.to_vec(),
        area: f64::NEG_INFINITY,
        containment: 0.0,
        valid: false,
    };
    let span = scored_span(&summary.ego, cfg);
    let inputs = corridor_inputs(summary, assignment, cfg, span);
    let k_end = cfg.horizon.max(1);
    let build = |k: usize| -> Result<CorridorStep, CorridorError> {
        CorridorSpec::step_for(&inputs, &cfg.corridor, k)
    };
    let (first, second, mid, last) = match (build(0), build(1), build(k_end / 2), build(k_end)) {
        (Ok(a), Ok(b), Ok(c), Ok(d)) => (a, b, c, d),
        _ => return invalid,
    };
    let step = cfg.corridor.grid_step;
    let area: f64 = [&first, &mid, &last]
        .iter()
        .map(|s| s.free_area(span.0, span.1, step))
        .sum();
    let ego = summary.ego;
    let containment = first.containment_length(ego.y, span.0, span.1, step);
    let valid = first.contains(ego.x, ego.y, cfg.corridor_slack()) && can_stop_before_pinch(&first, &second, &ego, cfg, span);
    CandidateScore {
        assignment: assignment.to_vec(),
        area,
        containment,
        valid,
    }
}

fn can_stop_before_pinch(
    first: &CorridorStep,
    second: &CorridorStep,
    ego: &EgoState,
    cfg: &ReasonerConfig,
    span: (f64, f64),
) -> bool {
    let c = &cfg.corridor;
    let Some(wall) = first.first_narrowing(span.0, span.1, c.min_passable_width, c.grid_step) else {
        return true;
    };
    let wall_speed = second
        .first_narrowing(span.0, span.1 + ego.vx * cfg.limits.dt, c.min_passable_width, c.grid_step)
        .map(|w| ((w - wall) / cfg.limits.dt).max(0.0))
        .unwrap_or(0.0);
    let decel = -cfg.limits.ux_min;
    let closing = (ego.vx * ego.vx - wall_speed * wall_speed).max(0.0);
    ego.x + closing / (2.0 * decel) <= wall
}

/// Preference order between two scored candidates: larger area, then longer
/// containment of the ego's lateral position, then more interior obstacles
/// routed on the side matching the ego's half of the road.
fn better(a: &CandidateScore, b: &CandidateScore, pref: Orientation, ambiguous: &[usize]) -> bool {
    if a.valid != b.valid {
        return a.valid;
    }
    let tol = 1e-9 * a.area.abs().max(b.area.abs()).max(1.0);
    if (a.area - b.area).abs() > tol {
        return a.area > b.area;
    }
    let ctol = 1e-9 * a.containment.max(b.containment).max(1.0);
    if (a.containment - b.containment).abs() > ctol {
        return a.containment > b.containment;
    }
    let agree = |s: &CandidateScore| ambiguous.iter().filter(|&&i| s.assignment[i] == pref).count();
    agree(a) > agree(b)
}

fn preferred_orientation(summary: &DrivingConditionSummary) -> Orientation {
    // An ego in the lower half prefers corridors passing below interior obstacles.
    if summary.ego.y < summary.road.center() {
        Orientation::PassBelow
    } else {
        Orientation::PassAbove
    }
}

/// Resolves interior-lane obstacles by maximizing free corridor area. All
/// `2^m` combinations are enumerated up to the configured cap; beyond it,
/// obstacles are settled one at a time from front to back.
pub fn efficiency_check(
    summary: &DrivingConditionSummary,
    ambiguous: &[usize],
    cfg: &ReasonerConfig,
) -> Result<LambdaAssignment, ReasonerError> {
    let base = static_assignment(summary);
    if ambiguous.is_empty() {
        return Ok(base);
    }
    let pref = preferred_orientation(summary);
    let best = if ambiguous.len() <= cfg.enumeration_cap {
        enumerate_candidates(summary, ambiguous, cfg)
            .into_iter()
            .reduce(|best, c| if better(&c, &best, pref, ambiguous) { c } else { best })
            .expect("at least one candidate")
    } else {
        greedy(summary, ambiguous, cfg, base, pref)
    };
    if best.valid {
        Ok(best.assignment)
    } else {
        Err(ReasonerError::AllPinched)
    }
}

/// Scores of every assignment of the ambiguous obstacles, in binary order with
/// bit `j` set meaning `ambiguous[j]` passes above.
pub fn enumerate_candidates(
    summary: &DrivingConditionSummary,
    ambiguous: &[usize],
    cfg: &ReasonerConfig,
) -> Vec<CandidateScore> {
    let base = static_assignment(summary);
    (0..1usize << ambiguous.len())
        .map(|mask| {
            let mut a = base.clone();
            for (j, &i) in ambiguous.iter().enumerate() {
                a[i] = if mask >> j & 1 == 1 {
                    Orientation::PassAbove
                } else {
                    Orientation::PassBelow
                };
            }
            score_assignment(summary, &a, cfg)
        })
        .collect()
}

fn greedy(
    summary: &DrivingConditionSummary,
    ambiguous: &[usize],
    cfg: &ReasonerConfig,
    mut assignment: LambdaAssignment,
    pref: Orientation,
) -> CandidateScore {
    let mut order = ambiguous.to_vec();
    order.sort_by(|&a, &b| summary.obstacles[a].x.total_cmp(&summary.obstacles[b].x).then(a.cmp(&b)));
    let mut current = score_assignment(summary, &assignment, cfg);
    for i in order {
        let mut trial = assignment.clone();
        trial[i] = trial[i].flipped();
        let s = score_assignment(summary, &trial, cfg);
        if better(&s, &current, pref, &[i]) {
            assignment = trial;
            current = s;
        }
    }
    current
}

/// Full rule-based pipeline: static rules, then the efficiency check on roads
/// with more than two lanes.
pub fn decide_lambdas(
    summary: &DrivingConditionSummary,
    cfg: &ReasonerConfig,
) -> Result<LambdaAssignment, ReasonerError> {
    if summary.road.n_lanes <= 2 {
        return Ok(static_assignment(summary));
    }
    let ambiguous = ambiguous_obstacles(summary);
    efficiency_check(summary, &ambiguous, cfg)
}

/// Like [`decide_lambdas`] but never fails: when every assignment is pinched
/// the static rules are returned and the planner is left to brake.
pub fn decide_lambdas_or_static(
    summary: &DrivingConditionSummary,
    cfg: &ReasonerConfig,
) -> (LambdaAssignment, Option<ReasonerError>) {
    match decide_lambdas(summary, cfg) {
        Ok(a) => (a, None),
        Err(e) => (static_assignment(summary), Some(e)),
    }
}
