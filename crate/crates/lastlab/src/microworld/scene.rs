//! Scene records and procedural scenario generation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::math::rng::stream;
use crate::microworld::geometry::{min_dist_linear_motion, Polyline, Vec2};
use crate::tokenizer::{Instruction, Trajectory, T_F, WAYPOINT_DT};

/// Ego footprint radius used by collision-style checks.
pub const EGO_RADIUS: f64 = 1.0;
/// Total scene duration in seconds; agent tracks are defined over it.
pub const SCENE_DURATION: f64 = 8.0;
/// Past ego poses in the prompt, at 0.5 s spacing.
pub const T_H: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn tag(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }
}

/// Single-corridor drivable area: all points within `half_width` of the
/// centerline, with an optional stop line at a centerline arc length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivableCorridor {
    pub centerline: Polyline,
    pub half_width: f64,
    pub stop_line_s: Option<f64>,
}

impl DrivableCorridor {
    pub fn contains(&self, p: Vec2) -> bool {
        self.centerline.distance_to(p) <= self.half_width
    }

    pub fn lateral_offset(&self, p: Vec2) -> f64 {
        self.centerline.project(p).lateral
    }

    pub fn arc_of(&self, p: Vec2) -> f64 {
        self.centerline.project(p).arc
    }

    /// Unit tangent per centerline segment.
    pub fn segment_directions(&self) -> Vec<Vec2> {
        self.centerline.segment_dirs()
    }
}

/// Piecewise-linear constant-velocity track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub footprint_radius: f64,
    /// (time, position) knots with strictly increasing times.
    pub knots: Vec<(f64, Vec2)>,
}

impl AgentTrack {
    pub fn constant_velocity(p0: Vec2, v: Vec2, until: f64) -> Self {
        Self {
            footprint_radius: 0.5,
            knots: vec![(0.0, p0), (until, p0 + v.scale(until))],
        }
    }

    pub fn position(&self, t: f64) -> Vec2 {
        let first = self.knots.first().unwrap();
        let last = self.knots.last().unwrap();
        if t <= first.0 {
            return first.1;
        }
        if t >= last.0 {
            return last.1;
        }
        for w in self.knots.windows(2) {
            if t <= w[1].0 {
                let span = w[1].0 - w[0].0;
                let u = if span < 1e-12 { 0.0 } else { (t - w[0].0) / span };
                return w[0].1 + (w[1].1 - w[0].1).scale(u);
            }
        }
        last.1
    }

    pub fn velocity(&self, t: f64) -> Vec2 {
        let first = self.knots.first().unwrap();
        let last = self.knots.last().unwrap();
        if t < first.0 || t >= last.0 {
            return Vec2::ZERO;
        }
        for w in self.knots.windows(2) {
            if t < w[1].0 {
                let span = w[1].0 - w[0].0;
                if span < 1e-12 {
                    return Vec2::ZERO;
                }
                return (w[1].1 - w[0].1).scale(1.0 / span);
            }
        }
        Vec2::ZERO
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub velocity: f64,
    pub acceleration: f64,
    pub position: Vec2,
    pub heading: f64,
}

/// One micro-world scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub corridor: DrivableCorridor,
    pub agents: Vec<AgentTrack>,
    pub ego: EgoState,
    /// Past poses (position, heading), oldest first, at t = -2.0 .. -0.5 s.
    pub history: Vec<(Vec2, f64)>,
    pub instruction: Instruction,
    pub gt_trajectory: Trajectory,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub duration: f64,
}

/// Ego motion along a trajectory: the implicit t=0 point is the ego position,
/// then waypoints at 0.5 s spacing, extended at constant velocity past the end.
#[derive(Debug, Clone)]
pub struct EgoPath {
    points: Vec<Vec2>,
    fallback_heading: f64,
}

impl EgoPath {
    pub fn new(ego: &EgoState, traj: &Trajectory) -> Self {
        let mut points = vec![ego.position];
        points.extend(traj.waypoints.iter().copied());
        Self {
            points,
            fallback_heading: ego.heading,
        }
    }

    pub fn position(&self, t: f64) -> Vec2 {
        let idx = t / WAYPOINT_DT;
        if idx <= 0.0 {
            return self.points[0];
        }
        let n = self.points.len();
        if idx >= (n - 1) as f64 {
            let v = self.velocity((n - 2) as f64 * WAYPOINT_DT + 1e-6);
            let overshoot = t - (n - 1) as f64 * WAYPOINT_DT;
            return self.points[n - 1] + v.scale(overshoot);
        }
        let i = idx.floor() as usize;
        let u = idx - i as f64;
        self.points[i] + (self.points[i + 1] - self.points[i]).scale(u)
    }

    /// Piecewise-constant velocity (slope of the active segment).
    pub fn velocity(&self, t: f64) -> Vec2 {
        let n = self.points.len();
        let i = ((t / WAYPOINT_DT).floor() as i64).clamp(0, n as i64 - 2) as usize;
        (self.points[i + 1] - self.points[i]).scale(1.0 / WAYPOINT_DT)
    }

    pub fn heading(&self, t: f64) -> f64 {
        let v = self.velocity(t);
        if v.norm() < 0.05 {
            // crawling or stopped: keep the last meaningful heading
            for i in (0..self.points.len() - 1).rev() {
                let d = self.points[i + 1] - self.points[i];
                if d.norm() > 0.025 {
                    return d.angle();
                }
            }
            self.fallback_heading
        } else {
            v.angle()
        }
    }
}

/// Net heading change over the trajectory, skipping near-zero steps.
pub fn net_heading_change(ego: &EgoState, traj: &Trajectory) -> f64 {
    let mut pts = vec![ego.position];
    pts.extend(traj.waypoints.iter().copied());
    let dirs: Vec<f64> = pts
        .windows(2)
        .filter(|w| w[0].dist(w[1]) > 0.05)
        .map(|w| (w[1] - w[0]).angle())
        .collect();
    if dirs.len() < 2 {
        return 0.0;
    }
    let mut d = dirs[dirs.len() - 1] - dirs[0];
    while d > std::f64::consts::PI {
        d -= 2.0 * std::f64::consts::PI;
    }
    while d < -std::f64::consts::PI {
        d += 2.0 * std::f64::consts::PI;
    }
    d
}

struct RouteDraw {
    corridor: DrivableCorridor,
    ego_arc: f64,
    instruction: Instruction,
    v0: f64,
    accel: f64,
    lateral: f64,
}

fn draw_route(rng: &mut ChaCha8Rng) -> RouteDraw {
    let instruction = match rng.gen_range(0..10u32) {
        0..=3 => Instruction::Straight,
        4..=5 => Instruction::Left,
        6..=7 => Instruction::Right,
        _ => Instruction::Stop,
    };
    let half_width = rng.gen_range(2.5..4.0);
    let mut v0: f64 = rng.gen_range(2.0..6.0);
    let mut accel: f64 = rng.gen_range(-0.5..0.5);

    let back = 6.0; // centerline starts this far behind the ego
    let mut pts = vec![Vec2::new(0.0, -back)];
    let mut stop_line_s = None;
    match instruction {
        Instruction::Straight => {
            pts.push(Vec2::new(0.0, 34.0));
        }
        Instruction::Stop => {
            pts.push(Vec2::new(0.0, 34.0));
            let ahead = rng.gen_range(6.0..10.0);
            stop_line_s = Some(back + ahead);
            // decelerate comfortably to rest before the line
            let vmax = (2.0 * 2.2 * (ahead - 1.0)).sqrt();
            v0 = v0.min(vmax).max(1.0);
            accel = 0.0;
        }
        Instruction::Left | Instruction::Right => {
            let run = rng.gen_range(1.0..2.5);
            let radius: f64 = rng.gen_range(6.0..10.0);
            // keep centripetal accel and entry jerk inside the comfort bounds
            v0 = v0.clamp(3.0, (2.2 * radius).sqrt());
            accel = 0.0;
            let total = rng.gen_range(1.05..1.55); // 60..89 degrees
            let sign = if instruction == Instruction::Left { 1.0 } else { -1.0 };
            pts.push(Vec2::new(0.0, run));
            let center = Vec2::new(-sign * radius, run);
            let step = 5f64.to_radians();
            let mut a = 0.0;
            while a < total {
                a = (a + step).min(total);
                pts.push(center + Vec2::new(sign * radius * a.cos(), radius * a.sin()));
            }
            // straight extension along the exit tangent
            let exit_dir = (pts[pts.len() - 1] - pts[pts.len() - 2]).normalized();
            let last = *pts.last().unwrap();
            pts.push(last + exit_dir.scale(10.0));
        }
    }
    let centerline = Polyline::new(pts);
    let lat_cap = if matches!(instruction, Instruction::Left | Instruction::Right) {
        0.4
    } else {
        0.8
    };
    let max_lat = (half_width - 1.4f64).max(0.0).min(lat_cap);
    let lateral = rng.gen_range(-max_lat..max_lat.max(1e-9));
    RouteDraw {
        corridor: DrivableCorridor {
            centerline,
            half_width,
            stop_line_s,
        },
        ego_arc: back,
        instruction,
        v0,
        accel,
        lateral,
    }
}

/// Speed at time `t` under the scene's profile.
fn speed_at(v0: f64, accel: f64, stop_decel: Option<f64>, t: f64) -> f64 {
    match stop_decel {
        Some(a) => (v0 + a * t).max(0.0),
        None => (v0 + accel * t).clamp(0.5, 8.0),
    }
}

fn arc_travelled(v0: f64, accel: f64, stop_decel: Option<f64>, t: f64) -> f64 {
    // integrate speed_at with a fine fixed step; profiles are near-linear so
    // trapezoid at 10 ms is far below the 0.1 m token grid
    let mut s = 0.0;
    let dt = 0.01;
    let n = (t / dt).round() as usize;
    for i in 0..n {
        let a = speed_at(v0, accel, stop_decel, i as f64 * dt);
        let b = speed_at(v0, accel, stop_decel, (i + 1) as f64 * dt);
        s += 0.5 * (a + b) * dt;
    }
    s
}

fn route_point(route: &RouteDraw, arc: f64, lateral: f64) -> Vec2 {
    let c = &route.corridor.centerline;
    let p = c.point_at_arc(arc);
    let n = c.tangent_at_arc(arc).perp();
    p + n.scale(lateral)
}

fn build_gt(route: &RouteDraw, stop_decel: Option<f64>) -> (EgoState, Vec<(Vec2, f64)>, Trajectory) {
    let ego_pos = route_point(route, route.ego_arc, route.lateral);
    let ego_heading = route.corridor.centerline.tangent_at_arc(route.ego_arc).angle();
    let ego = EgoState {
        velocity: route.v0,
        acceleration: stop_decel.unwrap_or(route.accel),
        position: ego_pos,
        heading: ego_heading,
    };
    // history: constant speed v0 backwards along the corridor, same lateral
    let mut history = Vec::with_capacity(T_H);
    for i in 0..T_H {
        let dt_back = (T_H - i) as f64 * WAYPOINT_DT;
        let arc = (route.ego_arc - route.v0 * dt_back).max(0.2);
        let p = route_point(route, arc, route.lateral);
        let h = route.corridor.centerline.tangent_at_arc(arc).angle();
        history.push((p, h));
    }
    // future waypoints: walk the centerline by the speed profile, bleeding the
    // lateral offset back to the centerline over the first few meters of travel
    // (distance-based, so stopping scenes keep a forward step direction)
    let mut waypoints = Vec::with_capacity(T_F);
    for k in 1..=T_F {
        let t = k as f64 * WAYPOINT_DT;
        let travelled = arc_travelled(route.v0, route.accel, stop_decel, t);
        let lat = route.lateral * (1.0 - (travelled / 4.0).min(1.0));
        waypoints.push(route_point(route, route.ego_arc + travelled, lat));
    }
    let gt = Trajectory::new(waypoints).expect("generated waypoints in range");
    (ego, history, gt)
}

/// Sweep the ground-truth rollout against one candidate agent: true when the
/// agent stays clear in both position and short-horizon velocity projection.
fn agent_safe_for_gt(path: &EgoPath, agent: &AgentTrack, horizon: f64) -> bool {
    let clearance = agent.footprint_radius + EGO_RADIUS;
    let mut t = 0.0;
    while t <= horizon {
        let e = path.position(t);
        let a = agent.position(t);
        if e.dist(a) < clearance + 0.6 {
            return false;
        }
        let dv = agent.velocity(t) - path.velocity(t);
        if min_dist_linear_motion(a - e, dv, 1.2) < clearance + 0.35 {
            return false;
        }
        t += 0.05;
    }
    true
}

fn place_background_agent(
    rng: &mut ChaCha8Rng,
    route: &RouteDraw,
    path: &EgoPath,
) -> Option<AgentTrack> {
    for _ in 0..30 {
        let radius = rng.gen_range(0.4..0.8);
        let kind = rng.gen_range(0..3u32);
        let cand = match kind {
            0 => {
                // parked off-corridor
                let arc = rng.gen_range(2.0..route.corridor.centerline.length() - 2.0);
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let lat = side * (route.corridor.half_width + radius + rng.gen_range(0.6..3.0));
                let p = route_point(route, arc, lat);
                AgentTrack {
                    footprint_radius: radius,
                    ..AgentTrack::constant_velocity(p, Vec2::ZERO, SCENE_DURATION)
                }
            }
            1 => {
                // lead vehicle further up the corridor, drifting forward
                let gap = rng.gen_range(9.0..16.0);
                let arc = route.ego_arc + route.v0 * 3.0 + gap;
                let p = route_point(route, arc, rng.gen_range(-0.5..0.5));
                let dir = route.corridor.centerline.tangent_at_arc(arc);
                let speed = rng.gen_range(route.v0 * 0.9..route.v0 * 1.4);
                AgentTrack {
                    footprint_radius: radius,
                    ..AgentTrack::constant_velocity(p, dir.scale(speed), SCENE_DURATION)
                }
            }
            _ => {
                // distant crosser, beyond the planning horizon
                let arc = route.ego_arc
                    + route.v0 * 4.0
                    + rng.gen_range(8.0..14.0f64).min(route.corridor.centerline.length() - route.ego_arc);
                let cross = route.corridor.centerline.tangent_at_arc(arc).perp();
                let start = route_point(route, arc, 0.0) + cross.scale(rng.gen_range(8.0..12.0));
                let speed = rng.gen_range(1.0..2.5);
                AgentTrack {
                    footprint_radius: radius,
                    ..AgentTrack::constant_velocity(start, cross.scale(-speed), SCENE_DURATION)
                }
            }
        };
        if agent_safe_for_gt(path, &cand, 4.5) {
            return Some(cand);
        }
    }
    None
}

/// Conflict agent for hard scenes: crosses the ground-truth path shortly
/// after the ego has passed, so the route is threatened but the expert
/// rollout stays collision-free.
fn place_conflict_agent(
    rng: &mut ChaCha8Rng,
    path: &EgoPath,
    route: &RouteDraw,
) -> Option<AgentTrack> {
    for _ in 0..60 {
        let radius = rng.gen_range(0.4..0.8);
        let t_star = rng.gen_range(1.2..2.4);
        let delta = rng.gen_range(1.0..(4.0 - t_star - 0.1f64).min(1.6));
        let crossing = path.position(t_star);
        let tangent = route
            .corridor
            .centerline
            .tangent_at_arc(route.corridor.arc_of(crossing));
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let rel = rng.gen_range(1.1..1.9); // 63..109 degrees off the tangent
        let dir = Vec2::from_angle(tangent.angle() + side * rel);
        let speed = rng.gen_range(1.5..3.5);
        let t_cross = t_star + delta;
        let start = crossing - dir.scale(speed * t_cross);
        let agent = AgentTrack {
            footprint_radius: radius,
            ..AgentTrack::constant_velocity(start, dir.scale(speed), SCENE_DURATION)
        };
        if agent_safe_for_gt(path, &agent, 4.5) {
            return Some(agent);
        }
    }
    None
}

/// Deterministic scenario synthesis. Same (seed, difficulty) yields the same
/// record bit for bit.
pub fn generate_scene(seed: u64, difficulty: Difficulty) -> SceneRecord {
    let mut rng = stream(seed, "scene.gen", &[difficulty as u64]);
    let route = draw_route(&mut rng);
    let stop_decel = route.corridor.stop_line_s.map(|s_stop| {
        let dist = (s_stop - route.ego_arc - 0.8).max(0.5);
        -(route.v0 * route.v0) / (2.0 * dist)
    });
    let (ego, history, gt) = build_gt(&route, stop_decel);
    let path = EgoPath::new(&ego, &gt);

    let mut agents = Vec::new();
    if difficulty == Difficulty::Hard {
        if let Some(a) = place_conflict_agent(&mut rng, &path, &route) {
            agents.push(a);
        }
    }
    let n_background = match difficulty {
        Difficulty::Easy => rng.gen_range(0..3u32),
        Difficulty::Hard => rng.gen_range(1..3u32),
    };
    for _ in 0..n_background {
        if let Some(a) = place_background_agent(&mut rng, &route, &path) {
            agents.push(a);
        }
    }

    let mut scene = SceneRecord {
        scene_id: (seed << 1) | (difficulty as u64),
        corridor: route.corridor,
        agents,
        ego,
        history,
        instruction: route.instruction,
        gt_trajectory: gt,
        seed,
        difficulty,
        duration: SCENE_DURATION,
    };
    normalize_to_ego_frame(&mut scene);
    scene
}

/// Re-express every scene element in the t=0 ego frame: ego at the origin,
/// heading +y. Trajectories and prompts then share a single frame.
fn normalize_to_ego_frame(scene: &mut SceneRecord) {
    let origin = scene.ego.position;
    let rot = std::f64::consts::FRAC_PI_2 - scene.ego.heading;
    let (sin, cos) = rot.sin_cos();
    let xf = |p: Vec2| {
        let d = p - origin;
        Vec2::new(d.x * cos - d.y * sin, d.x * sin + d.y * cos)
    };
    for p in &mut scene.corridor.centerline.points {
        *p = xf(*p);
    }
    for a in &mut scene.agents {
        for (_, p) in &mut a.knots {
            *p = xf(*p);
        }
    }
    for (p, h) in &mut scene.history {
        *p = xf(*p);
        *h += rot;
    }
    for w in &mut scene.gt_trajectory.waypoints {
        *w = xf(*w);
    }
    scene.ego.position = Vec2::ZERO;
    scene.ego.heading = std::f64::consts::FRAC_PI_2;
}

/// Constant-velocity fallback plan: keep current speed along current heading.
pub fn fallback_trajectory(ego: &EgoState) -> Trajectory {
    let dir = Vec2::from_angle(ego.heading);
    let v = ego.velocity.min(7.0);
    Trajectory::new(
        (1..=T_F)
            .map(|k| ego.position + dir.scale(v * k as f64 * WAYPOINT_DT))
            .collect(),
    )
    .expect("fallback in range")
}
