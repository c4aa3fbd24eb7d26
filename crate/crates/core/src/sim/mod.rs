//! Scenario generation, batch evaluation and the closed-loop metrics.

mod scenario;

pub use scenario::*;

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corridor::{Rect, RoadGeometry};
use crate::dynamics::EgoState;
use crate::mpc::{self, ClosedLoopTrace, CorridorPolicy, MpcConfig, TerminalStatus};

pub const DEFAULT_LANE_WIDTH: f64 = 3.6;
pub const DEFAULT_DESIRED_SPEED: f64 = 15.0;
pub const DEFAULT_VEHICLE_LENGTH: f64 = 4.5;
pub const DEFAULT_VEHICLE_WIDTH: f64 = 1.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerateError {
    #[error("could not place obstacle {index} without overlap after {tries} tries")]
    PlacementFailure { index: usize, tries: usize },
    #[error("need at least two lanes")]
    TooFewLanes,
}

/// Generator knobs. Defaults give highway-like traffic ahead of the ego.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub lane_width: f64,
    pub desired_speed: f64,
    /// Obstacle speeds are drawn from this fraction range of the desired speed.
    pub speed_fraction: (f64, f64),
    /// Closest obstacle centre to the ego at t = 0 [m].
    pub min_lead: f64,
    /// Longitudinal extent the obstacles are spread over, per obstacle [m].
    pub spread_per_obstacle: f64,
    /// Smallest centre-to-centre gap between vehicles sharing a lane [m].
    pub min_headway: f64,
    pub duration: f64,
    pub dt: f64,
    pub max_tries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            lane_width: DEFAULT_LANE_WIDTH,
            desired_speed: DEFAULT_DESIRED_SPEED,
            speed_fraction: (0.5, 0.9),
            min_lead: 30.0,
            spread_per_obstacle: 25.0,
            min_headway: 15.0,
            duration: 10.0,
            dt: 0.25,
            max_tries: 1000,
        }
    }
}

pub fn generate_scenarios(
    lanes: usize,
    n_obstacles: usize,
    n_scenarios: usize,
    seed: u64,
) -> Result<Vec<Scenario>, GenerateError> {
    generate_with(lanes, n_obstacles, n_scenarios, seed, &GeneratorConfig::default())
}

pub fn generate_with(
    lanes: usize,
    n_obstacles: usize,
    n_scenarios: usize,
    seed: u64,
    g: &GeneratorConfig,
) -> Result<Vec<Scenario>, GenerateError> {
    if lanes < 2 {
        return Err(GenerateError::TooFewLanes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_scenarios)
        .map(|i| {
            let sub = rng.random::<u64>();
            generate_one(lanes, n_obstacles, sub, g).map(|mut s| {
                s.name = format!("l{lanes}_o{n_obstacles}_s{seed}_{i:03}");
                s
            })
        })
        .collect()
}

fn generate_one(lanes: usize, n: usize, seed: u64, g: &GeneratorConfig) -> Result<Scenario, GenerateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let road = RoadGeometry::new(g.lane_width, lanes);
    let (len, wid) = (DEFAULT_VEHICLE_LENGTH, DEFAULT_VEHICLE_WIDTH);
    let ego_lane = rng.random_range(0..lanes);
    let ego = EgoSpec {
        state: EgoState::new(0.0, road.lane_center(ego_lane), g.desired_speed, 0.0),
        length: len,
        width: wid,
        desired_speed: g.desired_speed,
    };
    let ego_rect = ego.footprint(&ego.state);
    let far = g.min_lead + g.spread_per_obstacle * n.max(1) as f64;

    let mut placed: Vec<(usize, f64)> = Vec::with_capacity(n);
    for index in 0..n {
        let mut tries = 0;
        loop {
            if tries >= g.max_tries {
                return Err(GenerateError::PlacementFailure { index, tries });
            }
            tries += 1;
            let lane = rng.random_range(0..lanes);
            let x = rng.random_range(g.min_lead..far);
            let rect = Rect::centered(x, road.lane_center(lane), len, wid);
            let clear = !rect.overlaps(&ego_rect)
                && placed
                    .iter()
                    .all(|&(l, px)| l != lane || (px - x).abs() >= g.min_headway);
            if clear {
                placed.push((lane, x));
                break;
            }
        }
    }

    let mut speeds: Vec<f64> = (0..n)
        .map(|_| rng.random_range(g.speed_fraction.0..=g.speed_fraction.1) * g.desired_speed)
        .collect();
    // Within a lane, speeds do not decrease towards the front so scripted
    // vehicles never run into each other.
    let mut obstacles = vec![None; n];
    for lane in 0..lanes {
        let mut members: Vec<usize> = (0..n).filter(|&i| placed[i].0 == lane).collect();
        members.sort_by(|&a, &b| placed[a].1.total_cmp(&placed[b].1));
        let mut lane_speeds: Vec<f64> = members.iter().map(|&i| speeds[i]).collect();
        lane_speeds.sort_by(f64::total_cmp);
        for (&i, v) in members.iter().zip(lane_speeds) {
            speeds[i] = v;
            obstacles[i] = Some(ObstacleSpec {
                x: placed[i].1,
                y: road.lane_center(lane),
                vx: v,
                length: len,
                width: wid,
                motion: MotionScript::ConstantSpeed,
            });
        }
    }
    let mut obstacles: Vec<ObstacleSpec> = obstacles.into_iter().map(|o| o.expect("every obstacle placed")).collect();
    obstacles.sort_by(|a, b| a.x.total_cmp(&b.x));

    Ok(Scenario {
        version: SCENARIO_VERSION,
        name: String::new(),
        road,
        ego,
        obstacles,
        duration: g.duration,
        dt: g.dt,
        seed,
        speed_limit: None,
        road_length: None,
    })
}

/// Per-run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub status: TerminalStatus,
    pub success: bool,
    pub cycles: usize,
    pub fallback_cycles: usize,
    pub mean_speed: f64,
    pub mean_abs_speed_error: f64,
    /// First time the speed is within 5 % of the desired speed.
    pub time_to_5pct: Option<f64>,
    pub max_containment_violation: f64,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    pub mean_iterations: f64,
}

impl RunSummary {
    pub fn from_trace(name: &str, desired_speed: f64, trace: &ClosedLoopTrace) -> Self {
        let states = trace.states();
        let n = states.len() as f64;
        let mean_speed = states.iter().map(|s| s.vx).sum::<f64>() / n;
        let mean_err = states.iter().map(|s| (s.vx - desired_speed).abs()).sum::<f64>() / n;
        let dt = trace.dt;
        let t0 = trace.cycles.first().map_or(trace.final_time, |c| c.t);
        let time_to_5pct = states
            .iter()
            .position(|s| (s.vx - desired_speed).abs() <= 0.05 * desired_speed)
            .map(|i| i as f64 * dt + t0);
        let times = trace.planning_times_ms();
        let planned: Vec<&mpc::CycleRecord> = trace
            .cycles
            .iter()
            .filter(|c| c.status != mpc::CycleStatus::Playback)
            .collect();
        Self {
            name: name.to_string(),
            status: trace.status,
            success: matches!(trace.status, TerminalStatus::Completed | TerminalStatus::Pinched),
            cycles: trace.cycles.len(),
            fallback_cycles: trace
                .cycles
                .iter()
                .filter(|c| matches!(c.status, mpc::CycleStatus::Fallback(_)))
                .count(),
            mean_speed,
            mean_abs_speed_error: mean_err,
            time_to_5pct,
            max_containment_violation: trace.max_containment_violation(),
            mean_solve_ms: mean(&times),
            max_solve_ms: times.iter().copied().fold(0.0, f64::max),
            mean_iterations: mean(&planned.iter().map(|c| c.iterations as f64).collect::<Vec<_>>()),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Nearest-rank percentile of unsorted data.
fn percentile(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    s[rank.min(s.len()) - 1]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub horizon: usize,
    pub cycles: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl TimingStats {
    pub fn from_samples(horizon: usize, samples: &[f64]) -> Self {
        Self {
            horizon,
            cycles: samples.len(),
            mean_ms: mean(samples),
            p95_ms: percentile(samples, 95.0),
            max_ms: samples.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: usize,
    pub success_rate: f64,
    pub collisions: usize,
    /// Runs that ended halted at a blockage. They count as successes.
    pub pinched: usize,
    pub solver_failures: usize,
    pub timing: TimingStats,
    /// Mean over runs that reached the band.
    pub mean_time_to_5pct: Option<f64>,
    pub runs_reaching_5pct: usize,
    pub mean_abs_speed_error: f64,
    pub mean_speed: f64,
    pub max_containment_violation: f64,
    pub per_run: Vec<RunSummary>,
}

impl MetricsReport {
    pub fn from_runs(horizon: usize, per_run: Vec<RunSummary>, solve_samples: &[f64]) -> Self {
        let n = per_run.len();
        let count = |f: &dyn Fn(&RunSummary) -> bool| per_run.iter().filter(|r| f(r)).count();
        let successes = count(&|r| r.success);
        let reach: Vec<f64> = per_run.iter().filter_map(|r| r.time_to_5pct).collect();
        Self {
            runs: n,
            success_rate: if n == 0 { 1.0 } else { successes as f64 / n as f64 },
            collisions: count(&|r| r.status == TerminalStatus::Collision),
            pinched: count(&|r| r.status == TerminalStatus::Pinched),
            solver_failures: count(&|r| r.status == TerminalStatus::SolverFailure),
            timing: TimingStats::from_samples(horizon, solve_samples),
            mean_time_to_5pct: if reach.is_empty() { None } else { Some(mean(&reach)) },
            runs_reaching_5pct: reach.len(),
            mean_abs_speed_error: mean(&per_run.iter().map(|r| r.mean_abs_speed_error).collect::<Vec<_>>()),
            mean_speed: mean(&per_run.iter().map(|r| r.mean_speed).collect::<Vec<_>>()),
            max_containment_violation: per_run.iter().map(|r| r.max_containment_violation).fold(0.0, f64::max),
            per_run,
        }
    }

    /// The report with every wall-clock field zeroed, for comparisons.
    pub fn without_timing(&self) -> MetricsReport {
        let mut r = self.clone();
        r.timing = TimingStats {
            horizon: r.timing.horizon,
            cycles: r.timing.cycles,
            ..TimingStats::default()
        };
        for run in &mut r.per_run {
            run.mean_solve_ms = 0.0;
            run.max_solve_ms = 0.0;
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per run.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(
            out,
            "name,status,success,cycles,fallback_cycles,mean_speed,mean_abs_speed_error,time_to_5pct,max_containment_violation,mean_solve_ms,max_solve_ms,mean_iterations"
        )?;
        for r in &self.per_run {
            writeln!(
                out,
                "{},{},{},{},{},{:.4},{:.4},{},{:.3e},{:.3},{:.3},{:.2}",
                r.name,
                r.status.label(),
                r.success,
                r.cycles,
                r.fallback_cycles,
                r.mean_speed,
                r.mean_abs_speed_error,
                r.time_to_5pct.map(|t| format!("{t:.2}")).unwrap_or_default(),
                r.max_containment_violation,
                r.mean_solve_ms,
                r.max_solve_ms,
                r.mean_iterations
            )?;
        }
        Ok(())
    }
}

/// A finished run with its summary.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub trace: ClosedLoopTrace,
    pub summary: RunSummary,
}

pub fn run_scenario(s: &Scenario, cfg: &MpcConfig) -> Evaluated {
    let trace = mpc::run(s, s.duration, cfg);
    let summary = RunSummary::from_trace(&s.name, s.ego.desired_speed, &trace);
    Evaluated { trace, summary }
}

/// Runs every scenario in sequence so timings are not disturbed by other runs.
pub fn evaluate(scenarios: &[Scenario], cfg: &MpcConfig) -> MetricsReport {
    evaluate_traces(scenarios, cfg).0
}

/// [`evaluate`], also returning the traces.
pub fn evaluate_traces(scenarios: &[Scenario], cfg: &MpcConfig) -> (MetricsReport, Vec<ClosedLoopTrace>) {
    let mut per_run = Vec::with_capacity(scenarios.len());
    let mut samples = Vec::new();
    let mut traces = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        let e = run_scenario(s, cfg);
        samples.extend(e.trace.planning_times_ms());
        per_run.push(e.summary);
        traces.push(e.trace);
    }
    (MetricsReport::from_runs(cfg.horizon, per_run, &samples), traces)
}

/// One report per horizon, every other setting unchanged.
pub fn horizon_sweep(scenarios: &[Scenario], cfg: &MpcConfig, horizons: &[usize]) -> Vec<MetricsReport> {
    horizons
        .iter()
        .map(|&k| {
            let c = MpcConfig {
                horizon: k,
                ..cfg.clone()
            };
            evaluate(scenarios, &c)
        })
        .collect()
}

/// Same planner restricted to the ego's starting lane.
pub fn lane_locked_baseline(scenario: &Scenario, cfg: &MpcConfig) -> ClosedLoopTrace {
    let cfg = MpcConfig {
        policy: CorridorPolicy::LaneLocked,
        ..cfg.clone()
    };
    mpc::run(scenario, scenario.duration, &cfg)
}

fn base_scenario(name: &str, lanes: usize, ego_lane: usize, vx: f64, obstacles: Vec<ObstacleSpec>, duration: f64) -> Scenario {
    let road = RoadGeometry::new(DEFAULT_LANE_WIDTH, lanes);
    Scenario {
        version: SCENARIO_VERSION,
        name: name.into(),
        road,
        ego: EgoSpec {
            state: EgoState::new(0.0, road.lane_center(ego_lane), vx, 0.0),
            length: DEFAULT_VEHICLE_LENGTH,
            width: DEFAULT_VEHICLE_WIDTH,
            desired_speed: DEFAULT_DESIRED_SPEED,
        },
        obstacles,
        duration,
        dt: 0.25,
        seed: 0,
        speed_limit: None,
        road_length: None,
    }
}

fn car(x: f64, y: f64, vx: f64) -> ObstacleSpec {
    ObstacleSpec {
        x,
        y,
        vx,
        length: DEFAULT_VEHICLE_LENGTH,
        width: DEFAULT_VEHICLE_WIDTH,
        motion: MotionScript::ConstantSpeed,
    }
}

/// Two-lane road, no traffic.
pub fn empty_road(vx: f64, duration: f64) -> Scenario {
    base_scenario("empty_road", 2, 0, vx, vec![], duration)
}

/// A leader at half the desired speed in the ego's lane; the other lane is
/// free. The ego starts below the desired speed.
pub fn slow_leader() -> Scenario {
    let road = RoadGeometry::new(DEFAULT_LANE_WIDTH, 2);
    base_scenario("slow_leader", 2, 0, 10.0, vec![car(40.0, road.lane_center(0), 7.5)], 20.0)
}

/// A stopped vehicle in the ego's lane with the adjacent lane free.
pub fn blocked_lane() -> Scenario {
    let road = RoadGeometry::new(DEFAULT_LANE_WIDTH, 2);
    base_scenario("blocked_lane", 2, 0, 12.0, vec![car(60.0, road.lane_center(0), 0.0)], 15.0)
}

/// Stopped vehicles across every lane.
pub fn full_blockage() -> Scenario {
    let road = RoadGeometry::new(DEFAULT_LANE_WIDTH, 2);
    base_scenario(
        "full_blockage",
        2,
        0,
        12.0,
        vec![car(60.0, road.lane_center(0), 0.0), car(60.0, road.lane_center(1), 0.0)],
        20.0,
    )
}

/// Hand-built scenarios used for the baseline comparison.
pub fn paired_scenarios() -> Vec<Scenario> {
    let road = RoadGeometry::new(DEFAULT_LANE_WIDTH, 2);
    let mut v = vec![empty_road(12.0, 10.0), slow_leader(), blocked_lane()];
    v.push(base_scenario(
        "slow_leader_with_traffic",
        2,
        0,
        DEFAULT_DESIRED_SPEED,
        vec![car(35.0, road.lane_center(0), 8.0), car(10.0, road.lane_center(1), 12.0)],
        20.0,
    ));
    let three = RoadGeometry::new(DEFAULT_LANE_WIDTH, 3);
    v.push(base_scenario(
        "three_lane_slow_middle",
        3,
        1,
        DEFAULT_DESIRED_SPEED,
        vec![car(40.0, three.lane_center(1), 8.0), car(70.0, three.lane_center(0), 10.0)],
        20.0,
    ));
    v
}
