//! Agent states, the actor-centered frame, derived kinematics and the
//! point-in-cell feasibility test used by the off-road loss and metric.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Position of an agent at an integer time step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub t: i64,
}

impl AgentState {
    pub fn new(t: i64, x: f64, y: f64) -> Self {
        AgentState { x, y, t }
    }

    pub fn point(&self) -> Point {
        [self.x, self.y]
    }
}

/// Consecutive states with a constant time gap.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    states: Vec<AgentState>,
    dt: f64,
}

impl Trajectory {
    pub fn new(states: Vec<AgentState>, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("trajectory dt must be positive, got {dt}")));
        }
        if let Some(w) = states.windows(2).find(|w| w[1].t != w[0].t + 1) {
            return Err(Error::invalid(format!(
                "trajectory steps must increase by one, got {} then {}",
                w[0].t, w[1].t
            )));
        }
        if states.iter().any(|s| !s.x.is_finite() || !s.y.is_finite()) {
            return Err(Error::invalid("trajectory contains non-finite coordinates"));
        }
        Ok(Trajectory { states, dt })
    }

    /// Build from points starting at step `t0`.
    pub fn from_points(t0: i64, points: &[Point], dt: f64) -> Result<Self> {
        let states = points
            .iter()
            .enumerate()
            .map(|(i, p)| AgentState::new(t0 + i as i64, p[0], p[1]))
            .collect();
        Self::new(states, dt)
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn points(&self) -> Vec<Point> {
        self.states.iter().map(AgentState::point).collect()
    }

    /// State at absolute step `t`, if recorded.
    pub fn at(&self, t: i64) -> Option<&AgentState> {
        let first = self.states.first()?.t;
        usize::try_from(t - first).ok().and_then(|i| self.states.get(i))
    }

    /// States with step index in `[from, to]`.
    pub fn window(&self, from: i64, to: i64) -> Result<Trajectory> {
        let states: Vec<AgentState> = self
            .states
            .iter()
            .filter(|s| s.t >= from && s.t <= to)
            .copied()
            .collect();
        if states.len() as i64 != to - from + 1 {
            return Err(Error::invalid(format!("trajectory does not cover steps {from}..={to}")));
        }
        Trajectory::new(states, self.dt)
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Origin and heading of an actor-centered frame, expressed in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    origin: Point,
    heading: f64,
}

impl Pose {
    pub fn new(origin: Point, heading: f64) -> Result<Self> {
        if !heading.is_finite() || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("pose must be finite"));
        }
        Ok(Pose {
            origin,
            heading: wrap_angle(heading),
        })
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }

    /// `(sin, cos)` of the heading, exact for multiples of a right angle.
    fn sin_cos(&self) -> (f64, f64) {
        let q = self.heading / FRAC_PI_2;
        if (q - q.round()).abs() < 1e-12 {
            match (q.round() as i64).rem_euclid(4) {
                0 => (0.0, 1.0),
                1 => (1.0, 0.0),
                2 => (0.0, -1.0),
                _ => (-1.0, 0.0),
            }
        } else {
            self.heading.sin_cos()
        }
    }

    /// World point to the frame where the heading is +x and its left is +y.
    pub fn to_local(&self, p: Point) -> Point {
        let (s, c) = self.sin_cos();
        let (dx, dy) = (p[0] - self.origin[0], p[1] - self.origin[1]);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: Point) -> Point {
        let (s, c) = self.sin_cos();
        [
            self.origin[0] + c * p[0] - s * p[1],
            self.origin[1] + s * p[0] + c * p[1],
        ]
    }
}

fn map_trajectory(traj: &Trajectory, f: impl Fn(Point) -> Point) -> Result<Trajectory> {
    if traj.is_empty() {
        return Err(Error::invalid("cannot transform an empty trajectory"));
    }
    let states = traj
        .states
        .iter()
        .map(|s| {
            let [x, y] = f(s.point());
            AgentState::new(s.t, x, y)
        })
        .collect();
    Trajectory::new(states, traj.dt)
}

pub fn to_actor_frame(traj: &Trajectory, reference: &Pose) -> Result<Trajectory> {
    map_trajectory(traj, |p| reference.to_local(p))
}

pub fn from_actor_frame(traj: &Trajectory, reference: &Pose) -> Result<Trajectory> {
    map_trajectory(traj, |p| reference.to_world(p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Kinematics {
    pub heading: Vec<f64>,
    pub speed: Vec<f64>,
}

/// Per-step heading and speed from forward displacements.
///
/// The last step repeats the previous value. A zero displacement keeps the
/// most recent defined heading (0 before any motion).
pub fn derive_kinematics(traj: &Trajectory) -> Result<Kinematics> {
    if traj.len() < 2 {
        return Err(Error::invalid("kinematics need at least two states"));
    }
    let mut heading = Vec::with_capacity(traj.len());
    let mut speed = Vec::with_capacity(traj.len());
    let mut last_heading = 0.0;
    for w in traj.states.windows(2) {
        let (dx, dy) = (w[1].x - w[0].x, w[1].y - w[0].y);
        let dist = dx.hypot(dy);
        if dist > 0.0 {
            last_heading = dy.atan2(dx);
        }
        heading.push(last_heading);
        speed.push(dist / traj.dt);
    }
    heading.push(*heading.last().unwrap());
    speed.push(*speed.last().unwrap());
    Ok(Kinematics { heading, speed })
}

/// A map grid cell with corners in boundary order: A upper-left, B upper-right,
/// C bottom-right, D bottom-left.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCell {
    pub a: Point,
    pub b: Point,
    pub c: Point,
    pub d: Point,
}

fn sub(p: Point, q: Point) -> Point {
    [p[0] - q[0], p[1] - q[1]]
}

fn dot(p: Point, q: Point) -> f64 {
    p[0] * q[0] + p[1] * q[1]
}

impl GridCell {
    /// Axis-aligned cell spanning `[min, max]`.
    pub fn axis_aligned(min: Point, max: Point) -> Self {
        GridCell {
            a: [min[0], max[1]],
            b: [max[0], max[1]],
            c: [max[0], min[1]],
            d: [min[0], min[1]],
        }
    }

    pub fn is_axis_aligned(&self) -> bool {
        self.a[1] == self.b[1] && self.c[1] == self.d[1] && self.a[0] == self.d[0] && self.b[0] == self.c[0]
    }

    pub fn center(&self) -> Point {
        [
            (self.a[0] + self.b[0] + self.c[0] + self.d[0]) / 4.0,
            (self.a[1] + self.b[1] + self.c[1] + self.d[1]) / 4.0,
        ]
    }
}

/// Whether `x` lies strictly inside `cell`:
/// `(AB.AX)(CD.CX) > 0` and `(DA.DX)(BC.BX) > 0`. Boundary points are outside.
pub fn point_in_cell(x: Point, cell: &GridCell) -> bool {
    let GridCell { a, b, c, d } = *cell;
    let first = dot(sub(b, a), sub(x, a)) * dot(sub(d, c), sub(x, c));
    let second = dot(sub(a, d), sub(x, d)) * dot(sub(c, b), sub(x, b));
    first > 0.0 && second > 0.0
}

/// Open-interval test for an axis-aligned cell; agrees with [`point_in_cell`].
pub fn point_in_axis_aligned(x: Point, min: Point, max: Point) -> bool {
    x[0] > min[0] && x[0] < max[0] && x[1] > min[1] && x[1] < max[1]
}
