use corridor_planner::corridor::{Obstacle, Orientation, Rect, RoadGeometry};
use corridor_planner::ddp::cost::Weights;
use corridor_planner::dynamics::{step, EgoState};
use corridor_planner::mpc::{
    self, plan_cycle, CorridorPolicy, CycleStatus, MpcConfig, TerminalStatus, World,
};
use corridor_planner::sim::{
    blocked_lane, empty_road, full_blockage, generate_scenarios, lane_locked_baseline,
    run_scenario, slow_leader, MotionScript, ObstacleSpec, RunSummary, Scenario,
};

fn cfg() -> MpcConfig {
    MpcConfig::default()
}

/// Closed-loop speed gain of receding-horizon LQ on the speed error
/// `e' = e + T u`, cost `Σ ½w3 e² + ½w1 u²` over K stages, no terminal term.
fn lq_speed_gain(w: &Weights, k: usize, dt: f64) -> f64 {
    let mut p = 0.0;
    let mut g = 0.0;
    for _ in 0..k {
        g = p * dt / (w.w1 + dt * dt * p);
        p = w.w3 + p - (p * dt) * (p * dt) / (w.w1 + dt * dt * p);
    }
    g
}

#[test]
fn empty_road_converges_to_desired_speed() {
    let s = empty_road(15.0, 10.0);
    let tr = mpc::run(&s, 10.0, &cfg());
    assert_eq!(tr.status, TerminalStatus::Completed);
    assert!((tr.final_state.vx - 15.0).abs() < 0.01);

    let slow = empty_road(12.0, 10.0);
    let tr = mpc::run(&slow, 10.0, &cfg());
    assert_eq!(tr.status, TerminalStatus::Completed);
    assert!((tr.final_state.vx - 15.0).abs() < 0.01, "final vx {}", tr.final_state.vx);
}

#[test]
fn settling_time_matches_lq_closed_form() {
    let c = cfg();
    let g = lq_speed_gain(&c.weights, c.horizon, c.limits.dt);
    let s = empty_road(12.0, 10.0);
    let v_d = s.ego.desired_speed;
    // e_n = (1 - T g)^n e_0 while the control stays inside its limits.
    let e0 = s.ego.state.vx - v_d;
    assert!(g * e0.abs() < c.limits.ux_max);
    let rho = 1.0 - c.limits.dt * g;
    let n = (0..).find(|&n| (rho.powi(n) * e0).abs() <= 0.05 * v_d).unwrap();
    let expected = n as f64 * c.limits.dt;
    let e = run_scenario(&s, &c);
    assert_eq!(e.summary.time_to_5pct, Some(expected));
    for (i, st) in e.trace.states().iter().take(10).enumerate() {
        let predicted = v_d + rho.powi(i as i32) * e0;
        assert!((st.vx - predicted).abs() < 1e-6, "step {i}: {} vs {predicted}", st.vx);
    }
}

#[test]
fn full_blockage_ends_pinched() {
    let s = full_blockage();
    let tr = mpc::run(&s, s.duration, &cfg());
    assert_eq!(tr.status, TerminalStatus::Pinched);
    assert!(tr.final_state.vx < 0.05);
    assert!(tr.cycles.iter().any(|c| c.control.ux < -1.0));
    assert!(tr.cycles.iter().all(|c| c.stop_line.is_some() || c.t < 1.0));
    let obstacles = s.obstacles_at(tr.final_time);
    assert!(!mpc::collision_check(&tr.final_state, 4.5, 1.8, &obstacles));
    assert!(tr.max_containment_violation() <= 1e-6);
}

#[test]
fn two_lane_figure_style_world() {
    // Two vehicles near the upper edge, one near the lower edge.
    let road = RoadGeometry::new(3.6, 2);
    let obstacles = vec![
        Obstacle::new(25.0, 5.4, 9.0, 4.5, 1.8),
        Obstacle::new(55.0, 5.4, 10.0, 4.5, 1.8),
        Obstacle::new(80.0, 1.8, 8.0, 4.5, 1.8),
    ];
    let world = World {
        ego: EgoState::new(0.0, 1.8, 14.0, 0.0),
        obstacles: obstacles.clone(),
        road,
        desired_speed: 15.0,
        speed_limit: None,
    };
    let plan = plan_cycle(&world, &cfg(), None);
    let signs: Vec<i64> = plan.lambdas.iter().map(|o| o.sign()).collect();
    assert_eq!(signs, vec![1, 1, -1]);
    assert!(matches!(plan.status, CycleStatus::Optimal | CycleStatus::NotConverged));
    // The planned trajectory never overlaps the predicted obstacles.
    let r = plan.solve.unwrap();
    for (k, s) in r.states.iter().enumerate() {
        let t = k as f64 * 0.25;
        let ego = Rect::centered(s.x, s.y, 4.5, 1.8);
        for o in &obstacles {
            let p = o.extrapolate(t, &road);
            assert!(!ego.overlaps(&Rect::centered(p.x, p.y, p.length, p.width)), "step {k}");
        }
    }
}

#[test]
fn warm_start_after_small_change_converges_fast() {
    let road = RoadGeometry::new(3.6, 2);
    let c = cfg();
    let mut world = World {
        ego: EgoState::new(0.0, 1.8, 13.0, 0.0),
        obstacles: vec![Obstacle::new(45.0, 1.8, 9.0, 4.5, 1.8), Obstacle::new(20.0, 5.4, 11.0, 4.5, 1.8)],
        road,
        desired_speed: 15.0,
        speed_limit: None,
    };
    let first = plan_cycle(&world, &c, None);
    let r = first.solve.clone().unwrap();
    assert!(r.converged);
    // Advance the world one step exactly as predicted, then nudge one obstacle.
    world.ego = step(world.ego, first.control, 0.25);
    for o in &mut world.obstacles {
        *o = o.extrapolate(0.25, &road);
    }
    world.obstacles[0].vx += 0.1;
    let warm = plan_cycle(&world, &c, Some(&r));
    let iters = warm.solve.as_ref().unwrap().iterations;
    assert!(iters <= 3, "warm start took {iters} iterations");
    let cold_cfg = MpcConfig {
        warm_start: false,
        ..c.clone()
    };
    let cold = plan_cycle(&world, &cold_cfg, Some(&r));
    assert!(cold.solve.unwrap().iterations >= iters);
}

#[test]
fn trace_states_follow_the_dynamics() {
    for s in generate_scenarios(2, 5, 3, 9).unwrap() {
        let tr = mpc::run(&s, s.duration, &cfg());
        let states = tr.states();
        for (i, c) in tr.cycles.iter().enumerate() {
            assert_eq!(step(c.state, c.control, s.dt), states[i + 1]);
        }
        assert!(tr.max_containment_violation() <= 1e-6);
    }
}

#[test]
fn resuming_mid_trace_reproduces_the_rest() {
    let c = MpcConfig {
        warm_start: false,
        ..cfg()
    };
    let s = &generate_scenarios(3, 7, 1, 4).unwrap()[0];
    let full = mpc::run(s, s.duration, &c);
    let mid = 13;
    let resumed = mpc::run_from(s, full.cycles[mid].state, full.cycles[mid].t, s.duration, &c);
    assert_eq!(resumed.status, full.status);
    for (a, b) in full.cycles[mid..].iter().zip(&resumed.cycles) {
        assert_eq!(a.state, b.state);
        assert_eq!(a.control, b.control);
        assert_eq!(a.lambdas, b.lambdas);
    }
    assert_eq!(full.final_state, resumed.final_state);
}

#[test]
fn runs_are_deterministic() {
    let s = &generate_scenarios(3, 9, 1, 21).unwrap()[0];
    let a = mpc::run(s, s.duration, &cfg());
    let b = mpc::run(s, s.duration, &cfg());
    assert_eq!(a.states(), b.states());
}

#[test]
fn replan_period_plays_back_stored_plan() {
    let c = MpcConfig {
        replan_period: 2,
        ..cfg()
    };
    let s = slow_leader();
    let tr = mpc::run(&s, 5.0, &c);
    assert_eq!(tr.status, TerminalStatus::Completed);
    assert!(tr.cycles.iter().skip(1).step_by(2).all(|c| c.status == CycleStatus::Playback));
    assert!(tr.max_containment_violation() <= 1e-6);
}

#[test]
fn lane_change_script_is_handled() {
    let mut s = slow_leader();
    s.obstacles.push(ObstacleSpec {
        x: 70.0,
        y: 5.4,
        vx: 9.0,
        length: 4.5,
        width: 1.8,
        motion: MotionScript::LaneChange {
            start: 2.0,
            duration: 3.0,
            target_lane: 0,
        },
    });
    s.validate().unwrap();
    let tr = mpc::run(&s, s.duration, &cfg());
    assert_eq!(tr.status, TerminalStatus::Completed);
    assert!(tr.max_containment_violation() <= 1e-6);
}

#[test]
fn baseline_matches_on_empty_road() {
    let s = empty_road(12.0, 10.0);
    let a = mpc::run(&s, s.duration, &cfg());
    let b = lane_locked_baseline(&s, &cfg());
    assert_eq!(a.states(), b.states());
}

#[test]
fn overtaking_beats_the_baseline() {
    let s = slow_leader();
    let full = run_scenario(&s, &cfg()).summary;
    let base = RunSummary::from_trace(&s.name, 15.0, &lane_locked_baseline(&s, &cfg()));
    assert!(full.time_to_5pct.is_some());
    assert!(base.time_to_5pct.is_none());
    assert!(full.mean_speed > base.mean_speed);

    let s = blocked_lane();
    let full = run_scenario(&s, &cfg()).summary;
    let base_trace = lane_locked_baseline(&s, &cfg());
    assert_eq!(full.status, TerminalStatus::Completed);
    // The baseline brakes hard and then creeps towards the stop line.
    assert!(base_trace.final_state.vx < 3.0);
    assert!(base_trace.cycles.iter().all(|c| c.stop_line.is_some_and(|l| c.state.x < l.position)));
    assert_ne!(base_trace.status, TerminalStatus::Collision);
    assert!(full.mean_speed > RunSummary::from_trace(&s.name, 15.0, &base_trace).mean_speed);
}

#[test]
fn mirrored_scenario_gives_mirrored_trace() {
    let s = &generate_scenarios(2, 5, 1, 17).unwrap()[0];
    let road = s.road;
    let mut m: Scenario = s.clone();
    m.ego.state.y = road.mirror_y(s.ego.state.y);
    for o in &mut m.obstacles {
        o.y = road.mirror_y(o.y);
    }
    let a = mpc::run(s, s.duration, &cfg());
    let b = mpc::run(&m, m.duration, &cfg());
    assert_eq!(a.status, b.status);
    for (x, y) in a.cycles.iter().zip(&b.cycles) {
        assert!((x.state.x - y.state.x).abs() < 1e-6);
        assert!((road.mirror_y(x.state.y) - y.state.y).abs() < 1e-6);
        let flipped: Vec<Orientation> = x.lambdas.iter().map(|o| o.flipped()).collect();
        assert_eq!(flipped, y.lambdas);
    }
}

#[test]
fn lane_locked_never_leaves_its_lane() {
    let c = MpcConfig {
        policy: CorridorPolicy::LaneLocked,
        ..cfg()
    };
    for s in generate_scenarios(3, 7, 3, 2).unwrap() {
        let tr = mpc::run(&s, s.duration, &c);
        assert_ne!(tr.status, TerminalStatus::Collision);
        let y0 = s.ego.state.y;
        assert!(tr.states().iter().all(|st| (st.y - y0).abs() <= 0.9 + 1e-6));
    }
}
