//! Sigmoid safety corridors.
//!
//! Every obstacle carves a plateau into either the upper or the lower lateral
//! boundary of the drivable band, using the difference of two logistic
//! transitions placed behind and in front of it. The per-step corridor is the
//! pointwise min (upper) and max (lower) over all obstacles and the road edges.
//! Boundaries constrain the ego *centre*, so obstacle footprints are inflated by
//! the ego half-dimensions before margins are added.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::EgoState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorridorError {
    #[error("plateau {plateau:.3} m falls outside the road (0, {road_width:.3})")]
    MarginOverflow { plateau: f64, road_width: f64 },
    #[error("corridor pinched over x in [{start:.3}, {end:.3}]")]
    PinchedCorridor { start: f64, end: f64 },
}

/// Straight multi-lane road with lanes of equal width. `y = 0` is the lower edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadGeometry {
    pub lane_width: f64,
    pub n_lanes: usize,
}

impl RoadGeometry {
    pub const fn new(lane_width: f64, n_lanes: usize) -> Self {
        Self {
            lane_width,
            n_lanes,
        }
    }

    pub fn width(&self) -> f64 {
        self.lane_width * self.n_lanes as f64
    }

    pub fn center(&self) -> f64 {
        0.5 * self.width()
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }

    /// Lane index containing `y`, clamped to the road.
    pub fn lane_of(&self, y: f64) -> usize {
        let lane = (y / self.lane_width).floor();
        (lane.max(0.0) as usize).min(self.n_lanes - 1)
    }

    pub fn is_valid(&self) -> bool {
        self.n_lanes >= 2 && self.lane_width > 0.0
    }

    pub fn mirror_y(&self, y: f64) -> f64 {
        self.width() - y
    }
}

/// Orientation of an obstacle's corridor cut.
///
/// `PassBelow` (+1) lowers the upper boundary so the ego passes underneath the
/// obstacle; `PassAbove` (-1) raises the lower boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Orientation {
    PassBelow,
    PassAbove,
}

impl Orientation {
    pub fn sign(self) -> i64 {
        match self {
            Orientation::PassBelow => 1,
            Orientation::PassAbove => -1,
        }
    }

    pub fn from_sign(v: i64) -> Option<Self> {
        match v {
            1 => Some(Orientation::PassBelow),
            -1 => Some(Orientation::PassAbove),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Orientation::PassBelow => Orientation::PassAbove,
            Orientation::PassAbove => Orientation::PassBelow,
        }
    }

    pub fn side(self) -> Side {
        match self {
            Orientation::PassBelow => Side::Upper,
            Orientation::PassAbove => Side::Lower,
        }
    }
}

impl TryFrom<i64> for Orientation {
    type Error = String;

    fn try_from(v: i64) -> Result<Self, Self::Error> {
        Orientation::from_sign(v).ok_or_else(|| format!("orientation must be +1 or -1, got {v}"))
    }
}

impl From<Orientation> for i64 {
    fn from(o: Orientation) -> i64 {
        o.sign()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Upper,
    Lower,
}

/// A surrounding vehicle: centre pose, velocity and footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    #[serde(default)]
    pub vy: f64,
    pub length: f64,
    pub width: f64,
}

/// Seconds over which predicted lateral speed fades out.
pub const LATERAL_DECAY_HORIZON: f64 = 2.0;

impl Obstacle {
    pub fn new(x: f64, y: f64, vx: f64, length: f64, width: f64) -> Self {
        Self {
            x,
            y,
            vx,
            vy: 0.0,
            length,
            width,
        }
    }

    /// Constant-velocity pose after `t` seconds. Lateral speed decays linearly
    /// to zero over [`LATERAL_DECAY_HORIZON`]; the centre is kept on the road.
    pub fn extrapolate(&self, t: f64, road: &RoadGeometry) -> Obstacle {
        let tau = LATERAL_DECAY_HORIZON;
        let (dy, vy) = if t < tau {
            (self.vy * (t - 0.5 * t * t / tau), self.vy * (1.0 - t / tau))
        } else {
            (0.5 * self.vy * tau, 0.0)
        };
        let half = 0.5 * self.width;
        let y = (self.y + dy).clamp(half, road.width() - half);
        Obstacle {
            x: self.x + self.vx * t,
            y,
            vx: self.vx,
            vy,
            ..*self
        }
    }

    pub fn mirrored(&self, road: &RoadGeometry) -> Obstacle {
        Obstacle {
            y: road.mirror_y(self.y),
            vy: -self.vy,
            ..*self
        }
    }
}

/// Axis-aligned rectangle `[x_min, x_max] x [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn centered(x: f64, y: f64, length: f64, width: f64) -> Rect {
        Rect {
            x_min: x - 0.5 * length,
            x_max: x + 0.5 * length,
            y_min: y - 0.5 * width,
            y_max: y + 0.5 * width,
        }
    }

    /// Open-interval overlap: touching edges do not count.
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x_min < other.x_max
            && other.x_min < self.x_max
            && self.y_min < other.y_max
            && other.y_min < self.y_max
    }
}

/// Logistic function, evaluated without overflow for large `|z|`.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Shape parameters of one obstacle's sigmoid pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidParams {
    /// Steepness [1/m].
    pub slope: f64,
    /// Rear switch point [m].
    pub rear_switch: f64,
    /// Front switch point [m].
    pub front_switch: f64,
    /// Boundary value alongside the obstacle [m].
    pub plateau: f64,
}

impl SigmoidParams {
    pub fn is_valid(&self) -> bool {
        self.slope > 0.0 && self.rear_switch < self.front_switch
    }

    /// `σ(slope (x - rear)) - σ(slope (x - front))` and its x-derivative.
    ///
    /// Near 1 between the switch points and near 0 outside.
    pub fn dip(&self, x: f64) -> (f64, f64) {
        let a = self.slope * (x - self.rear_switch);
        let b = self.slope * (x - self.front_switch);
        let (sa, sb) = (logistic(a), logistic(b));
        // Past the front switch both terms sit near 1; subtract their complements instead.
        let value = if b > 0.0 {
            logistic(-b) - logistic(-a)
        } else {
            sa - sb
        };
        let slope = self.slope * (sa * (1.0 - sa) - sb * (1.0 - sb));
        (value, slope)
    }

    /// Amplitude of the cut measured from the road edge on `side`.
    pub fn amplitude(&self, road: &RoadGeometry, side: Side) -> f64 {
        match side {
            Side::Upper => road.width() - self.plateau,
            Side::Lower => self.plateau,
        }
    }
}

/// Boundary produced by one obstacle's sigmoid pair, without road clipping.
pub fn sigmoid_boundary(x: f64, p: &SigmoidParams, road: &RoadGeometry, side: Side) -> f64 {
    sigmoid_boundary_with_slope(x, p, road, side).0
}

/// [`sigmoid_boundary`] together with its derivative in `x`.
pub fn sigmoid_boundary_with_slope(
    x: f64,
    p: &SigmoidParams,
    road: &RoadGeometry,
    side: Side,
) -> (f64, f64) {
    let (dip, d_dip) = p.dip(x);
    let amp = p.amplitude(road, side);
    match side {
        Side::Upper => (road.width() - amp * dip, -amp * d_dip),
        Side::Lower => (amp * dip, amp * d_dip),
    }
}

/// Safety margins and ego footprint used when building corridors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorridorConfig {
    /// Sigmoid steepness [1/m].
    pub slope: f64,
    /// Longitudinal margin at zero relative speed [m].
    pub base_margin: f64,
    /// Extra longitudinal margin per m/s of relative speed [s].
    pub headway_gain: f64,
    /// Lateral clearance between the ego footprint and the obstacle [m].
    pub lateral_margin: f64,
    pub ego_half_length: f64,
    pub ego_half_width: f64,
    /// Distance from each road edge to the outermost admissible ego centre.
    /// `None` means half a lane width.
    pub edge_offset: Option<f64>,
    /// Narrower bands than this count as pinched when searching for stop lines.
    pub min_passable_width: f64,
    /// Sampling step for pinch searches and area integrals [m].
    pub grid_step: f64,
}

impl Default for CorridorConfig {
    fn default() -> Self {
        Self {
            slope: 1.5,
            base_margin: 2.0,
            headway_gain: 0.5,
            lateral_margin: 0.3,
            ego_half_length: 2.25,
            ego_half_width: 0.9,
            edge_offset: None,
            min_passable_width: 0.5,
            grid_step: 0.5,
        }
    }
}

impl CorridorConfig {
    pub fn road_limits(&self, road: &RoadGeometry) -> (f64, f64) {
        let off = self.edge_offset.unwrap_or(0.5 * road.lane_width);
        (off, road.width() - off)
    }

    /// The obstacle footprint grown by the ego half-dimensions. An ego centre
    /// strictly inside this rectangle means the footprints overlap.
    pub fn inflated_footprint(&self, o: &Obstacle) -> Rect {
        Rect::centered(
            o.x,
            o.y,
            o.length + 2.0 * self.ego_half_length,
            o.width + 2.0 * self.ego_half_width,
        )
    }
}

/// Distance from a switch point to where the sigmoid pair has closed to within
/// `lateral_margin` of the plateau, accounting for both tails.
fn transition_offset(amplitude: f64, lateral_margin: f64, slope: f64) -> f64 {
    if lateral_margin <= 0.0 {
        return f64::INFINITY;
    }
    let ratio = 2.0 * amplitude / lateral_margin - 1.0;
    if ratio > 1.0 {
        ratio.ln() / slope
    } else {
        0.0
    }
}

/// Switch points and plateau for one obstacle.
///
/// The longitudinal margin is `base + headway * |ego.vx - o.vx|`, raised if
/// needed so the boundary has reached the inflated footprint's lateral edge by
/// the footprint's ends.
pub fn obstacle_sigmoid_params(
    o: &Obstacle,
    orientation: Orientation,
    ego: &EgoState,
    road: &RoadGeometry,
    cfg: &CorridorConfig,
) -> Result<SigmoidParams, CorridorError> {
    let lateral = 0.5 * o.width + cfg.ego_half_width + cfg.lateral_margin;
    let plateau = match orientation {
        Orientation::PassBelow => o.y - lateral,
        Orientation::PassAbove => o.y + lateral,
    };
    let road_width = road.width();
    if !(plateau > 0.0 && plateau < road_width) {
        return Err(CorridorError::MarginOverflow {
            plateau,
            road_width,
        });
    }
    let amplitude = match orientation.side() {
        Side::Upper => road_width - plateau,
        Side::Lower => plateau,
    };
    let speed_margin = cfg.base_margin + cfg.headway_gain * (ego.vx - o.vx).abs();
    let margin = speed_margin.max(transition_offset(amplitude, cfg.lateral_margin, cfg.slope));
    let half = 0.5 * o.length + cfg.ego_half_length;
    Ok(SigmoidParams {
        slope: cfg.slope,
        rear_switch: o.x - half - margin,
        front_switch: o.x + half + margin,
        plateau,
    })
}

/// Beyond this many `1/slope` from the switch points a cut is treated as absent.
const RELEVANCE_SPAN: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cut {
    params: SigmoidParams,
    side: Side,
    from: f64,
    to: f64,
}

/// Boundary values and slopes at one longitudinal position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsAt {
    pub lower: f64,
    pub d_lower: f64,
    pub upper: f64,
    pub d_upper: f64,
}

impl BoundsAt {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Upper and lower boundary functions for one horizon step.
#[derive(Debug, Clone, PartialEq)]
pub struct CorridorStep {
    road: RoadGeometry,
    lower_limit: f64,
    upper_limit: f64,
    cuts: Vec<Cut>,
}

impl CorridorStep {
    /// Aggregates obstacle cuts without checking for pinches.
    pub fn new(
        road: RoadGeometry,
        limits: (f64, f64),
        cuts: impl IntoIterator<Item = (SigmoidParams, Orientation)>,
    ) -> Self {
        let cuts = cuts
            .into_iter()
            .map(|(params, o)| {
                let reach = RELEVANCE_SPAN / params.slope;
                Cut {
                    params,
                    side: o.side(),
                    from: params.rear_switch - reach,
                    to: params.front_switch + reach,
                }
            })
            .collect();
        Self {
            road,
            lower_limit: limits.0,
            upper_limit: limits.1,
            cuts,
        }
    }

    pub fn road(&self) -> &RoadGeometry {
        &self.road
    }

    pub fn limits(&self) -> (f64, f64) {
        (self.lower_limit, self.upper_limit)
    }

    pub fn cut_count(&self) -> usize {
        self.cuts.len()
    }

    /// `(lower, upper)` at `x`.
    pub fn bounds(&self, x: f64) -> (f64, f64) {
        let b = self.bounds_with_slope(x);
        (b.lower, b.upper)
    }

    /// Boundaries at `x` with the slope of whichever term is active.
    pub fn bounds_with_slope(&self, x: f64) -> BoundsAt {
        let mut out = BoundsAt {
            lower: self.lower_limit,
            d_lower: 0.0,
            upper: self.upper_limit,
            d_upper: 0.0,
        };
        for cut in &self.cuts {
            if x < cut.from || x > cut.to {
                continue;
            }
            let (v, d) = sigmoid_boundary_with_slope(x, &cut.params, &self.road, cut.side);
            match cut.side {
                Side::Upper if v < out.upper => {
                    out.upper = v;
                    out.d_upper = d;
                }
                Side::Lower if v > out.lower => {
                    out.lower = v;
                    out.d_lower = d;
                }
                _ => {}
            }
        }
        out
    }

    fn narrow(&self, x: f64, min_width: f64) -> bool {
        let (lo, hi) = self.bounds(x);
        hi - lo < min_width
    }

    fn grid(from: f64, to: f64, step: f64) -> impl Iterator<Item = f64> {
        let n = ((to - from) / step).ceil().max(0.0) as usize;
        (0..=n).map(move |i| (from + i as f64 * step).min(to))
    }

    /// Where `cut`'s boundary lies more than `gap` inside its road edge,
    /// padded by `pad`.
    fn dip_span(&self, cut: &Cut, gap: f64, pad: f64) -> Option<(f64, f64)> {
        let p = &cut.params;
        let amp = p.amplitude(&self.road, cut.side);
        if !(amp > 0.0) {
            return None;
        }
        let c = gap / amp;
        if c <= 0.0 {
            return Some((cut.from - pad, cut.to + pad));
        }
        let sd = p.slope * (p.front_switch - p.rear_switch);
        if sd > 600.0 {
            return Some((cut.from - pad, cut.to + pad));
        }
        // With u = exp(-slope (x - rear)) and q = exp(slope span), dip = c is
        // c q u² + (c (1 + q) - (q - 1)) u + c = 0; the roots bound the span.
        let q = sd.exp();
        let (a2, b1, c0) = (c * q, c * (1.0 + q) - (q - 1.0), c);
        let disc = b1 * b1 - 4.0 * a2 * c0;
        if !(disc > 0.0) || b1 >= 0.0 {
            return None;
        }
        let u_big = (-b1 + disc.sqrt()) / (2.0 * a2);
        let u_small = c0 / (a2 * u_big);
        let x_of = |u: f64| p.rear_switch - u.ln() / p.slope;
        let (left, right) = (x_of(u_big), x_of(u_small));
        // Analytic roots are exact up to rounding; 1e-6 covers that.
        let slack = pad + 1e-6 * (1.0 + left.abs().max(right.abs()));
        let (left, right) = (left.max(cut.from) - slack, right.min(cut.to) + slack);
        (left <= right).then_some((left, right))
    }

    /// Sorted, merged spans outside which no grid point can be narrow, or
    /// `None` when the limits alone are already too close.
    ///
    /// The band is narrow only where an upper and a lower cut both intrude
    /// past their limits, or where one cut alone reaches within `min_width`
    /// of the opposite limit.
    fn candidate_spans(&self, min_width: f64, pad: f64) -> Option<Vec<(f64, f64)>> {
        let (lo, hi) = (self.lower_limit, self.upper_limit);
        if hi - lo < min_width {
            return None;
        }
        let w = self.road.width();
        let mut spans = Vec::new();
        let mut upper = Vec::new();
        let mut lower = Vec::new();
        for cut in &self.cuts {
            let (own, solo) = match cut.side {
                Side::Upper => (w - hi, w - lo - min_width),
                Side::Lower => (lo, hi - min_width),
            };
            spans.extend(self.dip_span(cut, solo, pad));
            if let Some(s) = self.dip_span(cut, own, pad) {
                match cut.side {
                    Side::Upper => upper.push(s),
                    Side::Lower => lower.push(s),
                }
            }
        }
        for u in &upper {
            for l in &lower {
                let (a, b) = (u.0.max(l.0), u.1.min(l.1));
                if a <= b {
                    spans.push((a, b));
                }
            }
        }
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(spans.len());
        for s in spans {
            match merged.last_mut() {
                Some(last) if s.0 <= last.1 => last.1 = last.1.max(s.1),
                _ => merged.push(s),
            }
        }
        Some(merged)
    }

    /// First `x` in `[from, to]` where the band is narrower than `min_width`,
    /// refined by bisection between grid points.
    pub fn first_narrowing(&self, from: f64, to: f64, min_width: f64, step: f64) -> Option<f64> {
        let n = ((to - from) / step).ceil().max(0.0) as usize;
        let at = |i: usize| (from + i as f64 * step).min(to);
        let check = |i: usize| -> Option<f64> {
            let x = at(i);
            if !self.narrow(x, min_width) {
                return None;
            }
            if i == 0 {
                return Some(from);
            }
            let (mut a, mut b) = (at(i - 1), x);
            for _ in 0..30 {
                let m = 0.5 * (a + b);
                if self.narrow(m, min_width) {
                    b = m;
                } else {
                    a = m;
                }
            }
            Some(a)
        };
        match self.candidate_spans(min_width, step) {
            None => (0..=n).find_map(check),
            Some(spans) => spans.iter().find_map(|&(a, b)| {
                if b < from || a > to {
                    return None;
                }
                let first = ((a - from) / step).floor().max(0.0) as usize;
                let last = (((b - from) / step).ceil().max(0.0) as usize).min(n);
                (first..=last).find_map(check)
            }),
        }
    }

    /// Maximal intervals of the grid over `[from, to]` where `lower >= upper`.
    pub fn pinch_intervals(&self, from: f64, to: f64, step: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut open: Option<(f64, f64)> = None;
        for x in Self::grid(from, to, step) {
            if self.narrow(x, 0.0) {
                open = Some(match open {
                    Some((s, _)) => (s, x),
                    None => (x, x),
                });
            } else if let Some(iv) = open.take() {
                out.push(iv);
            }
        }
        out.extend(open);
        out
    }

    /// Integral of `max(upper - lower, 0)` over `[from, to]` (trapezoid rule).
    pub fn free_area(&self, from: f64, to: f64, step: f64) -> f64 {
        let xs: Vec<f64> = Self::grid(from, to, step).collect();
        let w: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let (lo, hi) = self.bounds(x);
                (hi - lo).max(0.0)
            })
            .collect();
        xs.windows(2)
            .zip(w.windows(2))
            .map(|(x, w)| 0.5 * (x[1] - x[0]) * (w[0] + w[1]))
            .sum()
    }

    /// Length of `[from, to]` over which `y` lies inside the band.
    pub fn containment_length(&self, y: f64, from: f64, to: f64, step: f64) -> f64 {
        let xs: Vec<f64> = Self::grid(from, to, step).collect();
        xs.windows(2)
            .filter(|seg| {
                let (lo, hi) = self.bounds(seg[0]);
                lo <= y && y <= hi
            })
            .map(|seg| seg[1] - seg[0])
            .sum()
    }

    pub fn contains(&self, x: f64, y: f64, tol: f64) -> bool {
        let (lo, hi) = self.bounds(x);
        lo - tol <= y && y <= hi + tol
    }

    /// Writes `x,lower,upper` rows sampled at `n` points over `[from, to]`.
    pub fn write_csv<W: Write>(&self, out: &mut W, from: f64, to: f64, n: usize) -> io::Result<()> {
        writeln!(out, "x,lower,upper")?;
        let n = n.max(2);
        for i in 0..n {
            let x = from + (to - from) * i as f64 / (n - 1) as f64;
            let (lo, hi) = self.bounds(x);
            writeln!(out, "{x:.4},{lo:.6},{hi:.6}")?;
        }
        Ok(())
    }
}

/// Builds one step's corridor and fails if it pinches anywhere on the grid
/// over `span`.
pub fn aggregate_corridor(
    obstacles: &[(Obstacle, SigmoidParams, Orientation)],
    road: &RoadGeometry,
    cfg: &CorridorConfig,
    span: (f64, f64),
) -> Result<CorridorStep, CorridorError> {
    let step = CorridorStep::new(
        *road,
        cfg.road_limits(road),
        obstacles.iter().map(|(_, p, o)| (*p, *o)),
    );
    match step.pinch_intervals(span.0, span.1, cfg.grid_step).first() {
        Some(&(start, end)) => Err(CorridorError::PinchedCorridor { start, end }),
        None => Ok(step),
    }
}

/// A moving longitudinal limit in front of a pinched stretch of corridor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopLine {
    pub position: f64,
    /// Forward speed of the limit [m/s], never negative.
    pub speed: f64,
}

/// Inputs shared by every step of a [`CorridorSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorridorInputs {
    pub obstacles: Vec<Obstacle>,
    pub orientations: Vec<Orientation>,
    pub ego: EgoState,
    pub road: RoadGeometry,
    pub limits: (f64, f64),
    pub dt: f64,
    /// Longitudinal range searched for pinches.
    pub search: (f64, f64),
}

/// Per-step corridors over a planning horizon, plus the stop lines implied by
/// pinches ahead of the ego.
#[derive(Debug, Clone, PartialEq)]
pub struct CorridorSpec {
    inputs: CorridorInputs,
    cfg: CorridorConfig,
    steps: Vec<CorridorStep>,
    stop_lines: Vec<Option<StopLine>>,
}

impl CorridorSpec {
    /// Builds steps `0..=horizon` from constant-velocity obstacle predictions.
    pub fn build(
        inputs: CorridorInputs,
        cfg: &CorridorConfig,
        horizon: usize,
    ) -> Result<Self, CorridorError> {
        let mut steps = Vec::with_capacity(horizon + 1);
        for k in 0..=horizon {
            steps.push(Self::step_for(&inputs, cfg, k)?);
        }
        let walls: Vec<Option<f64>> = steps
            .iter()
            .map(|s| {
                s.first_narrowing(
                    inputs.search.0,
                    inputs.search.1,
                    cfg.min_passable_width,
                    cfg.grid_step,
                )
            })
            .collect();
        let stop_lines = effective_stop_lines(&walls, inputs.dt);
        Ok(Self {
            inputs,
            cfg: *cfg,
            steps,
            stop_lines,
        })
    }

    /// A corridor with no obstacles between the given limits.
    pub fn open(road: RoadGeometry, limits: (f64, f64), horizon: usize, dt: f64) -> Self {
        let inputs = CorridorInputs {
            obstacles: Vec::new(),
            orientations: Vec::new(),
            ego: EgoState::default(),
            road,
            limits,
            dt,
            search: (0.0, 0.0),
        };
        Self {
            steps: vec![CorridorStep::new(road, limits, []); horizon + 1],
            stop_lines: vec![None; horizon + 1],
            cfg: CorridorConfig::default(),
            inputs,
        }
    }

    /// Corridor for a single step `k` without building the rest of the horizon.
    pub fn step_for(
        inputs: &CorridorInputs,
        cfg: &CorridorConfig,
        k: usize,
    ) -> Result<CorridorStep, CorridorError> {
        let t = k as f64 * inputs.dt;
        let mut cuts = Vec::with_capacity(inputs.obstacles.len());
        for (o, &dir) in inputs.obstacles.iter().zip(&inputs.orientations) {
            let predicted = o.extrapolate(t, &inputs.road);
            let p = obstacle_sigmoid_params(&predicted, dir, &inputs.ego, &inputs.road, cfg)?;
            cuts.push((p, dir));
        }
        Ok(CorridorStep::new(inputs.road, inputs.limits, cuts))
    }

    pub fn horizon(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn config(&self) -> &CorridorConfig {
        &self.cfg
    }

    pub fn inputs(&self) -> &CorridorInputs {
        &self.inputs
    }

    pub fn step(&self, k: usize) -> &CorridorStep {
        &self.steps[k.min(self.steps.len() - 1)]
    }

    pub fn steps(&self) -> &[CorridorStep] {
        &self.steps
    }

    pub fn stop_line(&self, k: usize) -> Option<StopLine> {
        self.stop_lines.get(k).copied().flatten()
    }

    /// `(lower, upper)` at step `k` and position `x`. Steps past the stored
    /// horizon are rebuilt from extrapolated obstacle poses.
    pub fn corridor_at(&self, k: usize, x: f64) -> (f64, f64) {
        if k < self.steps.len() {
            return self.steps[k].bounds(x);
        }
        match Self::step_for(&self.inputs, &self.cfg, k) {
            Ok(step) => step.bounds(x),
            // Extrapolation can only fail by pushing a plateau off the road;
            // fall back to the last stored step.
            Err(_) => self.steps[self.steps.len() - 1].bounds(x),
        }
    }
}

/// Turns per-step pinch positions into stop lines. A pinch appearing at a later
/// step is carried back in time at its own speed so that earlier steps already
/// respect it.
fn effective_stop_lines(walls: &[Option<f64>], dt: f64) -> Vec<Option<StopLine>> {
    let n = walls.len();
    let speed_at = |k: usize| -> f64 {
        let w = match walls[k] {
            Some(w) => w,
            None => return 0.0,
        };
        let diff = if k > 0 {
            walls[k - 1].map(|p| (w - p) / dt)
        } else {
            None
        }
        .or_else(|| walls.get(k + 1).copied().flatten().map(|p| (p - w) / dt));
        diff.unwrap_or(0.0).max(0.0)
    };
    let raw: Vec<Option<StopLine>> = (0..n)
        .map(|k| {
            walls[k].map(|position| StopLine {
                position,
                speed: speed_at(k),
            })
        })
        .collect();
    let mut out = vec![None; n];
    let mut carried: Option<(f64, StopLine)> = None;
    for k in (0..n).rev() {
        let t = k as f64 * dt;
        let from_future = carried.map(|(t_src, line)| StopLine {
            position: line.position - line.speed * (t_src - t),
            speed: line.speed,
        });
        let chosen = match (raw[k], from_future) {
            (Some(a), Some(b)) => Some(if b.position < a.position { b } else { a }),
            (a, b) => a.or(b),
        };
        if let Some(line) = chosen {
            carried = Some((t, line));
        }
        out[k] = chosen;
    }
    out
}
