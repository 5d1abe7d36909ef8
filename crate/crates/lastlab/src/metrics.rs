//! Closed-loop sub-metrics, PDMS/EPDMS aggregation, and open-loop scoring on
//! the micro-world.

use serde::{Deserialize, Serialize};

use crate::microworld::geometry::{min_dist_linear_motion, Vec2};
use crate::microworld::scene::{EgoPath, SceneRecord, EGO_RADIUS};
use crate::tokenizer::{Trajectory, WAYPOINT_DT};

/// Progress below this is treated as "no route to make" (stopping scenes).
const MIN_GT_PROGRESS: f64 = 0.1;

/// Thresholds behind the sub-metrics; these are declared in run configs and
/// echoed in report headers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Interpolation step for collision/compliance checks, seconds.
    pub dt: f64,
    /// Projection horizon for the time-to-collision gate, seconds.
    pub ttc_horizon: f64,
    /// Comfort bounds.
    pub accel_max: f64,
    pub jerk_max: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            ttc_horizon: 1.0,
            accel_max: 4.0,
            jerk_max: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubScores {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub cf: f64,
    pub ep: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtSubScores {
    pub base: SubScores,
    pub ddc: f64,
    pub tlc: f64,
    pub lk: f64,
    pub hc: f64,
    pub ec: f64,
}

/// PDMS = NC x DAC x (5 EP + 5 TTC + 2 CF) / 12.
pub fn pdms(s: &SubScores) -> f64 {
    s.nc * s.dac * (5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.cf) / 12.0
}

/// EPDMS = NC x DAC x DDC x TLC x (5 EP + 2 LK + 2 HC + 5 TTC + 2 EC) / 16.
pub fn epdms(s: &ExtSubScores) -> f64 {
    s.base.nc
        * s.base.dac
        * s.ddc
        * s.tlc
        * (5.0 * s.base.ep + 2.0 * s.lk + 2.0 * s.hc + 5.0 * s.base.ttc + 2.0 * s.ec)
        / 16.0
}

/// Sampled ego states along the interpolated trajectory.
fn sample_path(
    scene: &SceneRecord,
    traj: &Trajectory,
    horizon: f64,
    dt: f64,
) -> Vec<(f64, Vec2, Vec2)> {
    let path = EgoPath::new(&scene.ego, traj);
    let n = (horizon / dt).round() as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 * dt;
            (t, path.position(t), path.velocity(t))
        })
        .collect()
}

/// Collision sweep: exact minimum distance within each sample interval
/// (both bodies move linearly between samples).
fn collides_with_agents(scene: &SceneRecord, traj: &Trajectory, horizon: f64, mc: &MetricConfig) -> bool {
    let samples = sample_path(scene, traj, horizon, mc.dt);
    for w in samples.windows(2) {
        let (t0, p0, _) = w[0];
        let (t1, p1, _) = w[1];
        let dt = t1 - t0;
        let ego_v = (p1 - p0).scale(1.0 / dt);
        for a in &scene.agents {
            let clearance = a.footprint_radius + EGO_RADIUS;
            // split at agent knots inside the interval so motion stays linear
            let mut cut_times: Vec<f64> = vec![t0, t1];
            for &(kt, _) in &a.knots {
                if kt > t0 && kt < t1 {
                    cut_times.push(kt);
                }
            }
            cut_times.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for c in cut_times.windows(2) {
                let (s0, s1) = (c[0], c[1]);
                let e0 = p0 + ego_v.scale(s0 - t0);
                let a0 = a.position(s0);
                let a1 = a.position(s1);
                let av = if s1 > s0 {
                    (a1 - a0).scale(1.0 / (s1 - s0))
                } else {
                    Vec2::ZERO
                };
                let rel_v = av - ego_v;
                if min_dist_linear_motion(a0 - e0, rel_v, s1 - s0) < clearance {
                    return true;
                }
            }
        }
    }
    false
}

fn no_collision_score(scene: &SceneRecord, traj: &Trajectory, mc: &MetricConfig) -> f64 {
    if collides_with_agents(scene, traj, 3.0, mc) {
        0.0
    } else {
        1.0
    }
}

fn drivable_area_score(scene: &SceneRecord, traj: &Trajectory, mc: &MetricConfig) -> f64 {
    let samples = sample_path(scene, traj, 3.0, mc.dt);
    for (_, p, _) in samples {
        if !scene.corridor.contains(p) {
            return 0.0;
        }
    }
    1.0
}

fn ttc_score(scene: &SceneRecord, traj: &Trajectory, mc: &MetricConfig) -> f64 {
    let samples = sample_path(scene, traj, 3.0, mc.dt);
    for (t, p, v) in samples {
        for a in &scene.agents {
            let clearance = a.footprint_radius + EGO_RADIUS;
            let rel_v = a.velocity(t) - v;
            if min_dist_linear_motion(a.position(t) - p, rel_v, mc.ttc_horizon) < clearance {
                return 0.0;
            }
        }
    }
    1.0
}

/// Waypoint-level accel/jerk bound check over a chain of positions at
/// [`WAYPOINT_DT`] spacing.
fn comfort_of_chain(points: &[Vec2], mc: &MetricConfig) -> f64 {
    let vels: Vec<Vec2> = points
        .windows(2)
        .map(|w| (w[1] - w[0]).scale(1.0 / WAYPOINT_DT))
        .collect();
    let accs: Vec<Vec2> = vels
        .windows(2)
        .map(|w| (w[1] - w[0]).scale(1.0 / WAYPOINT_DT))
        .collect();
    for a in &accs {
        if a.norm() > mc.accel_max {
            return 0.0;
        }
    }
    for w in accs.windows(2) {
        if (w[1] - w[0]).scale(1.0 / WAYPOINT_DT).norm() > mc.jerk_max {
            return 0.0;
        }
    }
    1.0
}

fn comfort_score(scene: &SceneRecord, traj: &Trajectory, mc: &MetricConfig) -> f64 {
    let mut pts = vec![scene.ego.position];
    pts.extend(traj.waypoints.iter().copied());
    comfort_of_chain(&pts, mc)
}

fn progress_of(scene: &SceneRecord, traj: &Trajectory) -> f64 {
    let start = scene.corridor.arc_of(scene.ego.position);
    let end = scene.corridor.arc_of(traj.endpoint());
    end - start
}

fn ego_progress_score(scene: &SceneRecord, traj: &Trajectory) -> f64 {
    let gt_progress = progress_of(scene, &scene.gt_trajectory);
    if gt_progress <= MIN_GT_PROGRESS {
        return 1.0;
    }
    (progress_of(scene, traj) / gt_progress).clamp(0.0, 1.0)
}

/// The five PDMS sub-metrics for a single scene and plan, at the default
/// thresholds.
pub fn sub_scores(scene: &SceneRecord, traj: &Trajectory) -> SubScores {
    sub_scores_with(scene, traj, &MetricConfig::default())
}

pub fn sub_scores_with(scene: &SceneRecord, traj: &Trajectory, mc: &MetricConfig) -> SubScores {
    SubScores {
        nc: no_collision_score(scene, traj, mc),
        dac: drivable_area_score(scene, traj, mc),
        ttc: ttc_score(scene, traj, mc),
        cf: comfort_score(scene, traj, mc),
        ep: ego_progress_score(scene, traj),
    }
}

fn direction_compliance_score(scene: &SceneRecord, traj: &Trajectory, mc: &MetricConfig) -> f64 {
    let samples = sample_path(scene, traj, 3.0, mc.dt);
    for w in samples.windows(2) {
        let d = w[1].1 - w[0].1;
        if d.norm() < 0.02 {
            continue;
        }
        let tangent = scene
            .corridor
            .centerline
            .tangent_at_arc(scene.corridor.arc_of(w[0].1));
        if d.dot(tangent) < -0.05 {
            return 0.0;
        }
    }
    1.0
}

fn traffic_light_score(scene: &SceneRecord, traj: &Trajectory) -> f64 {
    let Some(s_stop) = scene.corridor.stop_line_s else {
        return 1.0;
    };
    let end_arc = scene.corridor.arc_of(traj.endpoint());
    if end_arc <= s_stop + 0.25 {
        1.0
    } else {
        0.0
    }
}

fn lane_keeping_score(scene: &SceneRecord, traj: &Trajectory, mc: &MetricConfig) -> f64 {
    let samples = sample_path(scene, traj, 3.0, mc.dt);
    let bound = scene.corridor.half_width / 2.0;
    for (_, p, _) in samples {
        if scene.corridor.lateral_offset(p).abs() > bound {
            return 0.0;
        }
    }
    1.0
}

fn history_comfort_score(scene: &SceneRecord, traj: &Trajectory, mc: &MetricConfig) -> f64 {
    let mut pts: Vec<Vec2> = scene.history.iter().map(|(p, _)| *p).collect();
    pts.push(scene.ego.position);
    pts.extend(traj.waypoints.iter().copied());
    comfort_of_chain(&pts, mc)
}

/// Extended-comfort gate between a plan and its replan 0.5 s later: the
/// replanned overlap must stay within 0.5 m of the original plan.
pub fn extended_comfort(prev: &Trajectory, replan: &Trajectory) -> f64 {
    // replan waypoint k sits at the same absolute time as prev waypoint k+1
    for k in 0..prev.waypoints.len() - 1 {
        if prev.waypoints[k + 1].dist(replan.waypoints[k]) >= 0.5 {
            return 0.0;
        }
    }
    1.0
}

/// Extended sub-metrics. `replan` feeds the EC gate; single-shot evaluation
/// passes `None` and scores EC as 1 (callers flag this in reports).
pub fn ext_sub_scores(
    scene: &SceneRecord,
    traj: &Trajectory,
    replan: Option<&Trajectory>,
) -> ExtSubScores {
    ext_sub_scores_with(scene, traj, replan, &MetricConfig::default())
}

pub fn ext_sub_scores_with(
    scene: &SceneRecord,
    traj: &Trajectory,
    replan: Option<&Trajectory>,
    mc: &MetricConfig,
) -> ExtSubScores {
    ExtSubScores {
        base: sub_scores_with(scene, traj, mc),
        ddc: direction_compliance_score(scene, traj, mc),
        tlc: traffic_light_score(scene, traj),
        lk: lane_keeping_score(scene, traj, mc),
        hc: history_comfort_score(scene, traj, mc),
        ec: replan.map_or(1.0, |r| extended_comfort(traj, r)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopResult {
    pub l2: [f64; 3],
    pub l2_avg: f64,
    pub collision: [f64; 3],
    pub collision_avg: f64,
}

/// Open-loop trajectory quality: L2 at 1/2/3 s and cumulative collision
/// indicators against the scene agents.
pub fn open_loop(pred: &Trajectory, gt: &Trajectory, scene: &SceneRecord) -> OpenLoopResult {
    let mut l2 = [0.0; 3];
    for (i, sec) in [1.0, 2.0, 3.0].iter().enumerate() {
        let idx = (sec / WAYPOINT_DT).round() as usize - 1;
        l2[i] = pred.waypoints[idx].dist(gt.waypoints[idx]);
    }
    let mc = MetricConfig::default();
    let mut collision = [0.0; 3];
    for (i, sec) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        collision[i] = if collides_with_agents(scene, pred, *sec, &mc) {
            1.0
        } else {
            0.0
        };
    }
    OpenLoopResult {
        l2,
        l2_avg: l2.iter().sum::<f64>() / 3.0,
        collision,
        collision_avg: collision.iter().sum::<f64>() / 3.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub mean: f64,
    pub count: usize,
}

/// Dataset score is the arithmetic mean of per-scene scores (not the formula
/// applied to mean sub-scores).
pub fn aggregate(per_scene: &[f64]) -> DatasetScore {
    assert!(!per_scene.is_empty(), "aggregate needs at least one score");
    DatasetScore {
        mean: per_scene.iter().sum::<f64>() / per_scene.len() as f64,
        count: per_scene.len(),
    }
}
