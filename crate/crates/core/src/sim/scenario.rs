//! Versioned scenario documents.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corridor::{Obstacle, Rect, RoadGeometry};
use crate::dynamics::EgoState;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported scenario version {found} (expected {SCENARIO_VERSION})")]
    Version { found: u32 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Scripted obstacle motion. Longitudinal speed is always constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MotionScript {
    ConstantSpeed,
    /// Smooth move to the centre of `target_lane` over `[start, start + duration]`.
    LaneChange {
        start: f64,
        duration: f64,
        target_lane: usize,
    },
}

impl Default for MotionScript {
    fn default() -> Self {
        MotionScript::ConstantSpeed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub length: f64,
    pub width: f64,
    #[serde(default)]
    pub motion: MotionScript,
}

impl ObstacleSpec {
    /// Pose and velocity at time `t` under the motion script.
    pub fn at(&self, t: f64, road: &RoadGeometry) -> Obstacle {
        let x = self.x + self.vx * t;
        let (y, vy) = match self.motion {
            MotionScript::ConstantSpeed => (self.y, 0.0),
            MotionScript::LaneChange {
                start,
                duration,
                target_lane,
            } => {
                let target = road.lane_center(target_lane);
                let d = target - self.y;
                let tau = ((t - start) / duration).clamp(0.0, 1.0);
                let y = self.y + d * 0.5 * (1.0 - (std::f64::consts::PI * tau).cos());
                let vy = if t > start && t < start + duration {
                    d * std::f64::consts::PI / (2.0 * duration) * (std::f64::consts::PI * tau).sin()
                } else {
                    0.0
                };
                (y, vy)
            }
        };
        Obstacle {
            x,
            y,
            vx: self.vx,
            vy,
            length: self.length,
            width: self.width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoSpec {
    pub state: EgoState,
    pub length: f64,
    pub width: f64,
    pub desired_speed: f64,
}

impl EgoSpec {
    pub fn footprint(&self, s: &EgoState) -> Rect {
        Rect::centered(s.x, s.y, self.length, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub road: RoadGeometry,
    pub ego: EgoSpec,
    pub obstacles: Vec<ObstacleSpec>,
    /// Simulated time [s].
    pub duration: f64,
    /// Step length [s].
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub speed_limit: Option<f64>,
    /// Runs end early once the ego passes this position.
    #[serde(default)]
    pub road_length: Option<f64>,
}

impl Scenario {
    pub fn obstacles_at(&self, t: f64) -> Vec<Obstacle> {
        self.obstacles.iter().map(|o| o.at(t, &self.road)).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.version != SCENARIO_VERSION {
            return Err(ScenarioError::Version {
                found: self.version,
            });
        }
        if !self.road.is_valid() {
            return bad("road needs at least two lanes of positive width".into());
        }
        if !(self.dt > 0.0 && self.duration > 0.0) {
            return bad("dt and duration must be positive".into());
        }
        if !(self.ego.desired_speed > 0.0) || !(self.ego.length > 0.0 && self.ego.width > 0.0) {
            return bad("ego needs a positive footprint and desired speed".into());
        }
        if self.ego.state.vx < 0.0 {
            return bad("ego starts with negative speed".into());
        }
        let width = self.road.width();
        let on_road = |y: f64, w: f64| y - 0.5 * w >= 0.0 && y + 0.5 * w <= width;
        if !on_road(self.ego.state.y, self.ego.width) {
            return bad("ego starts off the road".into());
        }
        let mut rects = vec![self.ego.footprint(&self.ego.state)];
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.length > 0.0 && o.width > 0.0) {
                return bad(format!("obstacle {i} needs a positive footprint"));
            }
            if !on_road(o.y, o.width) {
                return bad(format!("obstacle {i} starts off the road"));
            }
            if let MotionScript::LaneChange {
                duration,
                target_lane,
                ..
            } = o.motion
            {
                if !(duration > 0.0) || target_lane >= self.road.n_lanes {
                    return bad(format!("obstacle {i} has an invalid lane change"));
                }
            }
            rects.push(Rect::centered(o.x, o.y, o.length, o.width));
        }
        for i in 0..rects.len() {
            for j in i + 1..rects.len() {
                if rects[i].overlaps(&rects[j]) {
                    return bad(format!("vehicles {i} and {j} overlap initially (0 is the ego)"));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}
