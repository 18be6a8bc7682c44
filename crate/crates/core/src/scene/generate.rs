//! Procedural road templates with agents following lane centerlines.
//!
//! Every template is built in a local frame where traffic approaches along +x
//! and the template feature (curve onset, fork point, turn entry) sits ahead of
//! the target. The finished scene is rotated by a multiple of 90 degrees and
//! shifted by whole meters, so straight-road motion stays exactly linear after
//! coordinates are rounded to micrometers.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AgentTrack, MapData, Polygon, Polyline, Scene};
use crate::error::{Error, Result};
use crate::geometry::{Point, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadTemplate {
    Straight,
    Curve,
    Fork,
    Intersection,
}

impl RoadTemplate {
    pub const ALL: [RoadTemplate; 4] = [
        RoadTemplate::Straight,
        RoadTemplate::Curve,
        RoadTemplate::Fork,
        RoadTemplate::Intersection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RoadTemplate::Straight => "straight",
            RoadTemplate::Curve => "curve",
            RoadTemplate::Fork => "fork",
            RoadTemplate::Intersection => "intersection",
        }
    }
}

impl fmt::Display for RoadTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoadTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RoadTemplate::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown road template {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub template: RoadTemplate,
    pub lanes: usize,
    pub lane_width: f64,
    /// Agents to predict, not counting the autonomous vehicle.
    pub agents: usize,
    /// Speed interval in m/s.
    pub speed_range: [f64; 2],
    /// Standard deviation of the per-step lateral drift in meters.
    pub noise: f64,
    /// Probability of taking the left branch of a fork.
    pub fork_split: f64,
    pub curve_radius: [f64; 2],
    pub dt: f64,
    pub history: usize,
    pub horizon: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            template: RoadTemplate::Straight,
            lanes: 2,
            lane_width: 3.5,
            agents: 1,
            speed_range: [4.0, 9.0],
            noise: 0.03,
            fork_split: 0.5,
            curve_radius: [15.0, 40.0],
            dt: 0.1,
            history: 10,
            horizon: 50,
        }
    }
}

/// Longitudinal slots per lane, relative to the target.
const SLOT_OFFSETS: [f64; 3] = [0.0, -15.0, 15.0];
/// Length of straight road before the template feature.
const APPROACH: f64 = 100.0;
/// Length of straight road after curved sections.
const EXIT: f64 = 120.0;
const ARC_STEP: f64 = 0.25;
/// Grid for the reference arc length and per-step advance. Multiples of 1/64 are
/// exact binary fractions that print exactly with six decimals, so noise-free
/// straight motion survives both arithmetic and the dataset file bit for bit.
const TRACK_STEP: f64 = 1.0 / 64.0;
const TURN_RADIUS: f64 = 10.0;
/// Minimum clearance between an agent center and the road edge.
const EDGE_CLEARANCE: f64 = 0.5;

impl GenConfig {
    pub fn lane_capacity(&self) -> usize {
        self.lanes * SLOT_OFFSETS.len()
    }

    pub fn road_width(&self) -> f64 {
        self.lanes as f64 * self.lane_width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.lanes == 0 {
            return bad("at least one lane is required".into());
        }
        if !(self.lane_width > 2.0 * EDGE_CLEARANCE) || !self.lane_width.is_finite() {
            return bad(format!("lane width {} m is too narrow", self.lane_width));
        }
        if self.agents == 0 {
            return bad("at least one agent is required".into());
        }
        if self.agents + 1 > self.lane_capacity() {
            return bad(format!(
                "{} agents plus the autonomous vehicle exceed the capacity of {} lanes ({} slots)",
                self.agents,
                self.lanes,
                self.lane_capacity()
            ));
        }
        let [lo, hi] = self.speed_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("invalid speed range [{lo}, {hi}]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.fork_split) {
            return bad(format!("fork split must lie in [0, 1], got {}", self.fork_split));
        }
        let [r0, r1] = self.curve_radius;
        if !(r0 > self.road_width() && r1 >= r0 && r1.is_finite()) {
            return bad(format!(
                "curve radius range [{r0}, {r1}] must exceed the road width {}",
                self.road_width()
            ));
        }
        if self.template == RoadTemplate::Intersection && TURN_RADIUS <= self.road_width() {
            return bad("road too wide for the intersection turn radius".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) || self.history == 0 || self.horizon == 0 {
            return bad("dt, history and horizon must be positive".into());
        }
        Ok(())
    }
}

/// Arc-length parametrized polyline.
struct Route {
    pts: Vec<Point>,
    cum: Vec<f64>,
}

impl Route {
    fn new(pts: Vec<Point>) -> Route {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cum.push(cum.last().unwrap() + d);
        }
        Route { pts, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Position and left normal at arc length `s` (clamped to the route).
    fn at(&self, s: f64) -> (Point, Point) {
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.partition_point(|&c| c <= s) {
            0 => 0,
            i => (i - 1).min(self.pts.len() - 2),
        };
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        let f = (s - self.cum[i]) / len;
        let p = [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])];
        let n = [-(b[1] - a[1]) / len, (b[0] - a[0]) / len];
        (p, n)
    }

    /// Polyline shifted sideways by `offset` (positive to the left).
    fn offset(&self, offset: f64) -> Vec<Point> {
        let n = self.pts.len();
        (0..n)
            .map(|i| {
                let (a, b) = (self.pts[i.saturating_sub(1)], self.pts[(i + 1).min(n - 1)]);
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                let len = dx.hypot(dy);
                let p = self.pts[i];
                [p[0] - offset * dy / len, p[1] + offset * dx / len]
            })
            .collect()
    }

    fn corridor(&self, width: f64) -> Polygon {
        let mut v = self.offset(-width / 2.0);
        let mut left = self.offset(width / 2.0);
        left.reverse();
        v.extend(left);
        Polygon::new(v)
    }
}

/// Append a circular arc to `pts`, starting at the last point with heading
/// `heading`. `turn` is +1 for left and -1 for right.
fn push_arc(pts: &mut Vec<Point>, heading: f64, radius: f64, sweep: f64, turn: f64) -> f64 {
    let start = *pts.last().unwrap();
    let center = [
        start[0] - turn * radius * heading.sin(),
        start[1] + turn * radius * heading.cos(),
    ];
    let steps = ((radius * sweep) / ARC_STEP).ceil().max(1.0) as usize;
    let a0 = heading - turn * FRAC_PI_2;
    for k in 1..=steps {
        let a = a0 + turn * sweep * k as f64 / steps as f64;
        pts.push([center[0] + radius * a.cos(), center[1] + radius * a.sin()]);
    }
    heading + turn * sweep
}

fn push_straight(pts: &mut Vec<Point>, heading: f64, length: f64) {
    let p = *pts.last().unwrap();
    pts.push([p[0] + length * heading.cos(), p[1] + length * heading.sin()]);
}

/// A template instance: candidate routes with selection weights, and the
/// corridors forming the drivable area.
struct Layout {
    routes: Vec<Route>,
    weights: Vec<f64>,
    corridors: Vec<Route>,
    /// Arc length of the feature along every route.
    feature_s: f64,
}

fn curved_route(radius: f64, sweep: f64, turn: f64) -> Route {
    let mut pts = vec![[-APPROACH, 0.0], [0.0, 0.0]];
    let h = push_arc(&mut pts, 0.0, radius, sweep, turn);
    push_straight(&mut pts, h, EXIT);
    Route::new(pts)
}

fn build_layout(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Layout {
    let radius = |rng: &mut ChaCha8Rng| rng.gen_range(cfg.curve_radius[0]..=cfg.curve_radius[1]);
    match cfg.template {
        RoadTemplate::Straight => {
            let r = Route::new(vec![[-APPROACH, 0.0], [EXIT + 100.0, 0.0]]);
            Layout {
                routes: vec![r],
                weights: vec![1.0],
                corridors: vec![Route::new(vec![[-APPROACH, 0.0], [EXIT + 100.0, 0.0]])],
                feature_s: APPROACH,
            }
        }
        RoadTemplate::Curve => {
            let r = radius(rng);
            let sweep = rng.gen_range(FRAC_PI_3..=FRAC_PI_2);
            let turn = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Layout {
                routes: vec![curved_route(r, sweep, turn)],
                weights: vec![1.0],
                corridors: vec![curved_route(r, sweep, turn)],
                feature_s: APPROACH,
            }
        }
        RoadTemplate::Fork => {
            let (rl, rr) = (radius(rng), radius(rng));
            let sl = rng.gen_range(FRAC_PI_3..=FRAC_PI_2);
            let sr = rng.gen_range(FRAC_PI_3..=FRAC_PI_2);
            Layout {
                routes: vec![curved_route(rl, sl, 1.0), curved_route(rr, sr, -1.0)],
                weights: vec![cfg.fork_split, 1.0 - cfg.fork_split],
                corridors: vec![curved_route(rl, sl, 1.0), curved_route(rr, sr, -1.0)],
                feature_s: APPROACH,
            }
        }
        RoadTemplate::Intersection => {
            let make = |turn: f64| {
                let mut pts = vec![[-APPROACH, 0.0], [-TURN_RADIUS, 0.0]];
                let h = push_arc(&mut pts, 0.0, TURN_RADIUS, FRAC_PI_2, turn);
                push_straight(&mut pts, h, EXIT);
                Route::new(pts)
            };
            let straight = || Route::new(vec![[-APPROACH, 0.0], [EXIT + 100.0, 0.0]]);
            let cross = Route::new(vec![[0.0, -EXIT - 50.0], [0.0, EXIT + 50.0]]);
            Layout {
                routes: vec![straight(), make(1.0), make(-1.0)],
                weights: vec![1.0, 1.0, 1.0],
                corridors: vec![straight(), cross, make(1.0), make(-1.0)],
                feature_s: APPROACH - TURN_RADIUS,
            }
        }
    }
}

fn pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn quantize(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

fn round_micro(p: Point) -> Point {
    [(p[0] * 1e6).round() / 1e6, (p[1] * 1e6).round() / 1e6]
}

/// Exact rotation by `quarter` right angles followed by a shift.
fn place(p: Point, quarter: u8, shift: Point) -> Point {
    let [x, y] = p;
    let r = match quarter % 4 {
        0 => [x, y],
        1 => [-y, x],
        2 => [-x, -y],
        _ => [y, -x],
    };
    round_micro([r[0] + shift[0], r[1] + shift[1]])
}

/// Generate one scene. The same `(cfg, seed)` always yields the same scene.
pub fn generate_scene(cfg: &GenConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = build_layout(cfg, &mut rng);
    let m = cfg.history as i64;
    let h = cfg.horizon as i64;
    let ref_time = m;
    let width = cfg.road_width();
    let max_drift = cfg.lane_width / 2.0 - EDGE_CLEARANCE;

    // the target sees the feature 0..20 m ahead
    let s_ref = quantize(layout.feature_s - rng.gen_range(0.0..20.0), TRACK_STEP);

    let mut slots: Vec<(usize, usize)> = (0..cfg.lanes)
        .flat_map(|l| (0..SLOT_OFFSETS.len()).map(move |j| (l, j)))
        .collect();
    let target_lane = rng.gen_range(0..cfg.lanes);
    slots.retain(|&s| s != (target_lane, 0));
    slots.shuffle(&mut rng);
    let mut assigned = vec![(target_lane, 0)];
    assigned.extend(slots.into_iter().take(cfg.agents));
    // the last assigned slot goes to the autonomous vehicle, ids 1.. to the rest
    let quarter: u8 = rng.gen_range(0..4);
    let shift = [rng.gen_range(-500i32..=500) as f64, rng.gen_range(-500i32..=500) as f64];

    let mut agents = Vec::with_capacity(assigned.len());
    for (k, &(lane, slot)) in assigned.iter().enumerate() {
        let id = if k == cfg.agents { 0 } else { k as u32 + 1 };
        let route = &layout.routes[pick(&layout.weights, &mut rng)];
        let lane_offset = (lane as f64 + 0.5 - cfg.lanes as f64 / 2.0) * cfg.lane_width;
        let speed = rng.gen_range(cfg.speed_range[0]..=cfg.speed_range[1]);
        let ds = quantize(speed * cfg.dt, TRACK_STEP);
        let s0 = s_ref + SLOT_OFFSETS[slot];
        let mut drift = 0.0f64;
        let mut points = Vec::with_capacity((m + h + 1) as usize);
        for t in 0..=(m + h) {
            if t > 0 && cfg.noise > 0.0 {
                let e: f64 = rng.sample(StandardNormal);
                drift = (0.95 * drift + cfg.noise * e).clamp(-max_drift, max_drift);
            }
            let s = s0 + (t - ref_time) as f64 * ds;
            let (p, n) = route.at(s);
            let off = lane_offset + drift;
            points.push(place([p[0] + off * n[0], p[1] + off * n[1]], quarter, shift));
        }
        agents.push(AgentTrack {
            id,
            trajectory: Trajectory::from_points(0, &points, cfg.dt)?,
        });
    }
    agents.sort_by_key(|a| a.id);

    let drivable = layout
        .corridors
        .iter()
        .map(|c| c.corridor(width).transformed(|p| place(p, quarter, shift)))
        .collect();
    let mut lanes = Vec::new();
    for c in &layout.corridors {
        for l in 0..cfg.lanes {
            let off = (l as f64 + 0.5 - cfg.lanes as f64 / 2.0) * cfg.lane_width;
            lanes.push(Polyline {
                points: c.offset(off).into_iter().map(|p| place(p, quarter, shift)).collect(),
            });
        }
    }

    let scene = Scene {
        scene_id: format!("{}-{seed:016x}", cfg.template),
        template: Some(cfg.template),
        map: MapData { drivable, lanes },
        agents,
        av_id: 0,
        ref_time,
        history_len: cfg.history,
        horizon: cfg.horizon,
        dt: cfg.dt,
    };
    scene.validate()?;
    Ok(scene)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate `count` scenes cycling through `templates`; scene `i` uses a seed
/// derived from `(seed, i)` and the id `s{i:05}-{template}`.
pub fn generate_dataset(base: &GenConfig, templates: &[RoadTemplate], count: usize, seed: u64) -> Result<Vec<Scene>> {
    if templates.is_empty() {
        return Err(Error::invalid("at least one template is required"));
    }
    (0..count)
        .map(|i| {
            let template = templates[i % templates.len()];
            let cfg = GenConfig {
                template,
                ..base.clone()
            };
            let mut scene = generate_scene(&cfg, splitmix64(seed ^ splitmix64(i as u64)))?;
            scene.scene_id = format!("s{i:05}-{template}");
            Ok(scene)
        })
        .collect()
}
