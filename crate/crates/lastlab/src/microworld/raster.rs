//! Ego-centric bird's-eye-view rasterization.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::LastlabError;
use crate::microworld::geometry::Vec2;
use crate::microworld::scene::{EgoPath, SceneRecord};

pub const RASTER_SIZE: usize = 64;
pub const RASTER_RESOLUTION: f64 = 0.5;
/// Grid cells behind the ego row (the rest of the frame looks forward).
const CELLS_BEHIND: i64 = 8;
/// Patch edge in cells; 64/8 = 8 x 8 patches.
pub const PATCH_SIZE: usize = 8;
pub const N_PATCHES: usize = (RASTER_SIZE / PATCH_SIZE) * (RASTER_SIZE / PATCH_SIZE);
pub const PATCH_DIM: usize = 3 * PATCH_SIZE * PATCH_SIZE;

#[derive(Debug, Clone, Copy)]
pub enum Channel {
    Drivable = 0,
    Agents = 1,
    EgoGoal = 2,
}

/// 3 x 64 x 64 occupancy image in the ego frame (x right, y forward,
/// ego fixed at a known cell, heading up). Values stay in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub data: Vec<f64>,
    pub size: usize,
    pub resolution: f64,
}

impl Raster {
    fn zeros() -> Self {
        Self {
            data: vec![0.0; 3 * RASTER_SIZE * RASTER_SIZE],
            size: RASTER_SIZE,
            resolution: RASTER_RESOLUTION,
        }
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.size + row) * self.size + col]
    }

    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        self.data[(c * self.size + row) * self.size + col] = v;
    }

    /// Cell of an ego-frame point: x right, y forward.
    pub fn cell_of(&self, p_ego: Vec2) -> Option<(usize, usize)> {
        let col = (p_ego.x / self.resolution).floor() as i64 + (self.size as i64 / 2);
        let from_bottom = (p_ego.y / self.resolution).floor() as i64 + CELLS_BEHIND;
        let row = self.size as i64 - 1 - from_bottom;
        if col < 0 || col >= self.size as i64 || row < 0 || row >= self.size as i64 {
            None
        } else {
            Some((row as usize, col as usize))
        }
    }

    /// Ego-frame center of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> Vec2 {
        let x = (col as f64 - self.size as f64 / 2.0 + 0.5) * self.resolution;
        let from_bottom = self.size as f64 - 1.0 - row as f64;
        let y = (from_bottom - CELLS_BEHIND as f64 + 0.5) * self.resolution;
        Vec2::new(x, y)
    }

    pub fn ego_cell(&self) -> (usize, usize) {
        self.cell_of(Vec2::ZERO).unwrap()
    }

    /// 64 x 192 patch matrix: patches row-major over the 8 x 8 grid, features
    /// channel-major within each patch.
    pub fn patches(&self) -> Array2<f64> {
        let grid = RASTER_SIZE / PATCH_SIZE;
        let mut out = Array2::zeros((N_PATCHES, PATCH_DIM));
        for pr in 0..grid {
            for pc in 0..grid {
                let p = pr * grid + pc;
                let mut f = 0;
                for c in 0..3 {
                    for r in 0..PATCH_SIZE {
                        for col in 0..PATCH_SIZE {
                            out[(p, f)] = self.get(c, pr * PATCH_SIZE + r, pc * PATCH_SIZE + col);
                            f += 1;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Ego pose (position, heading) at scene time `t` along the ground truth.
pub fn ego_pose_at(scene: &SceneRecord, t: f64) -> (Vec2, f64) {
    if t == 0.0 {
        return (scene.ego.position, scene.ego.heading);
    }
    let path = EgoPath::new(&scene.ego, &scene.gt_trajectory);
    (path.position(t), path.heading(t))
}

/// World point expressed in the ego frame at heading `h`: x right, y forward.
pub fn world_to_ego(p: Vec2, ego_pos: Vec2, heading: f64) -> Vec2 {
    let fwd = Vec2::from_angle(heading);
    let right = Vec2::new(fwd.y, -fwd.x);
    let d = p - ego_pos;
    Vec2::new(d.dot(right), d.dot(fwd))
}

pub fn ego_to_world(p_ego: Vec2, ego_pos: Vec2, heading: f64) -> Vec2 {
    let fwd = Vec2::from_angle(heading);
    let right = Vec2::new(fwd.y, -fwd.x);
    ego_pos + right.scale(p_ego.x) + fwd.scale(p_ego.y)
}

/// Render the scene at time `t`: channel 0 corridor occupancy, channel 1
/// agent disks, channel 2 ego and goal markers.
pub fn rasterize(scene: &SceneRecord, t: f64) -> Result<Raster, LastlabError> {
    if !(0.0..=scene.duration).contains(&t) {
        return Err(LastlabError::Range(format!(
            "raster time {t} outside scene duration {}",
            scene.duration
        )));
    }
    let (ego_pos, heading) = ego_pose_at(scene, t);
    let mut r = Raster::zeros();
    let agent_states: Vec<(Vec2, f64)> = scene
        .agents
        .iter()
        .map(|a| (a.position(t), a.footprint_radius))
        .collect();
    for row in 0..RASTER_SIZE {
        for col in 0..RASTER_SIZE {
            let world = ego_to_world(r.cell_center(row, col), ego_pos, heading);
            if scene.corridor.contains(world) {
                r.set(Channel::Drivable as usize, row, col, 1.0);
            }
            for (p, radius) in &agent_states {
                if world.dist(*p) <= *radius {
                    r.set(Channel::Agents as usize, row, col, 1.0);
                    break;
                }
            }
        }
    }
    let (er, ec) = r.ego_cell();
    r.set(Channel::EgoGoal as usize, er, ec, 1.0);
    // goal marker: final gt waypoint, clamped into the frame
    let goal_ego = world_to_ego(scene.gt_trajectory.endpoint(), ego_pos, heading);
    let half = (RASTER_SIZE as f64 / 2.0 - 1.0) * RASTER_RESOLUTION;
    let clamped = Vec2::new(
        goal_ego.x.clamp(-half, half),
        goal_ego.y.clamp(-(CELLS_BEHIND as f64 - 1.0) * RASTER_RESOLUTION, half + 7.0),
    );
    if let Some((gr, gc)) = r.cell_of(clamped) {
        r.set(Channel::EgoGoal as usize, gr, gc, 1.0);
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::scene::{generate_scene, AgentTrack, Difficulty};

    #[test]
    fn empty_agents_channel_is_zero() {
        let mut scene = generate_scene(4, Difficulty::Easy);
        scene.agents.clear();
        let r = rasterize(&scene, 0.0).unwrap();
        for row in 0..RASTER_SIZE {
            for col in 0..RASTER_SIZE {
                assert_eq!(r.get(Channel::Agents as usize, row, col), 0.0);
            }
        }
    }

    #[test]
    fn agent_at_ego_position_marks_ego_cell() {
        let mut scene = generate_scene(4, Difficulty::Easy);
        scene.agents = vec![AgentTrack::constant_velocity(
            scene.ego.position,
            Vec2::ZERO,
            scene.duration,
        )];
        let r = rasterize(&scene, 0.0).unwrap();
        let (er, ec) = r.ego_cell();
        assert!(r.get(Channel::Agents as usize, er, ec) > 0.0);
    }

    #[test]
    fn ego_cell_marked_and_values_bounded() {
        for seed in 0..20 {
            let scene = generate_scene(seed, Difficulty::Hard);
            let r = rasterize(&scene, 0.0).unwrap();
            let (er, ec) = r.ego_cell();
            assert!(r.get(Channel::EgoGoal as usize, er, ec) > 0.0);
            assert!(r.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn drivable_channel_matches_point_in_corridor_oracle() {
        let scene = generate_scene(3, Difficulty::Easy);
        let r = rasterize(&scene, 0.0).unwrap();
        let raster_count: usize = (0..RASTER_SIZE)
            .flat_map(|row| (0..RASTER_SIZE).map(move |col| (row, col)))
            .filter(|&(row, col)| r.get(Channel::Drivable as usize, row, col) > 0.5)
            .count();
        // independent per-cell check straight from the segment distances
        let (ego_pos, heading) = ego_pose_at(&scene, 0.0);
        let mut oracle_count = 0;
        for row in 0..RASTER_SIZE {
            for col in 0..RASTER_SIZE {
                let w = ego_to_world(r.cell_center(row, col), ego_pos, heading);
                let mut best = f64::INFINITY;
                for seg in scene.corridor.centerline.points.windows(2) {
                    best = best.min(crate::microworld::geometry::dist_point_segment(
                        w, seg[0], seg[1],
                    ));
                }
                if best <= scene.corridor.half_width {
                    oracle_count += 1;
                    assert!(r.get(Channel::Drivable as usize, row, col) > 0.5);
                }
            }
        }
        assert_eq!(raster_count, oracle_count);
    }

    #[test]
    fn out_of_duration_time_is_range_error() {
        let scene = generate_scene(0, Difficulty::Easy);
        assert!(rasterize(&scene, 9.5).is_err());
        assert!(rasterize(&scene, -0.1).is_err());
    }

    #[test]
    fn patches_shape_and_content() {
        let scene = generate_scene(5, Difficulty::Easy);
        let r = rasterize(&scene, 0.0).unwrap();
        let p = r.patches();
        assert_eq!(p.dim(), (N_PATCHES, PATCH_DIM));
        // ego cell (row 55, col 32) lives in patch (6, 4) = 52, channel 2
        let (er, ec) = r.ego_cell();
        let patch = (er / PATCH_SIZE) * 8 + ec / PATCH_SIZE;
        let feat = 2 * PATCH_SIZE * PATCH_SIZE + (er % PATCH_SIZE) * PATCH_SIZE + ec % PATCH_SIZE;
        assert_eq!(p[(patch, feat)], 1.0);
    }
}
