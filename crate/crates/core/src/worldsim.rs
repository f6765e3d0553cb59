//! Agent simulation: depth rendering, entity visibility and waypoint planning.
//!
//! The world is 2.5D. Rays are traced through the full 3D lattice of a
//! [`Scene`], but the agent moves in the plane with its camera fixed at
//! [`CAMERA_HEIGHT_M`] and zero pitch.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontier::Frontier;
use crate::mapping::{CellState, Map2D};
use crate::scenario::Scene;

/// Camera height above the world origin; also the free-column height used by mapping.
pub const CAMERA_HEIGHT_M: f64 = 1.5;
/// Maximum distance travelled per planning step.
pub const MAX_STEP_M: f64 = 3.0;
/// Depth value for pixels whose ray hits nothing within range.
pub const NO_HIT: f64 = f64::INFINITY;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("pose ({x_m:.2}, {y_m:.2}) is not in free space")]
    PoseNotFree { x_m: f64, y_m: f64 },
    #[error("start pose lies outside the map")]
    StartOutsideMap,
    #[error("no known-free path to frontier cell {cell:?}")]
    Unreachable { cell: [usize; 2] },
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(a: f64) -> f64 {
    let wrapped = (a + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped >= PI {
        -PI
    } else {
        wrapped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x_m: f64,
    pub y_m: f64,
    pub yaw_rad: f64,
}

impl Pose {
    pub fn new(x_m: f64, y_m: f64, yaw_rad: f64) -> Self {
        Pose {
            x_m,
            y_m,
            yaw_rad: normalize_angle(yaw_rad),
        }
    }

    pub fn camera_height_m(&self) -> f64 {
        CAMERA_HEIGHT_M
    }

    pub fn camera_origin(&self) -> [f64; 3] {
        [self.x_m, self.y_m, CAMERA_HEIGHT_M]
    }

    pub fn distance_to(&self, x_m: f64, y_m: f64) -> f64 {
        (self.x_m - x_m).hypot(self.y_m - y_m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width_px: usize,
    pub height_px: usize,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub max_range_m: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            width_px: 80,
            height_px: 60,
            hfov_deg: 120.0,
            vfov_deg: 105.0,
            max_range_m: 10.0,
        }
    }
}

/// Point expressed in the camera frame: forward, right, up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPoint {
    pub forward: f64,
    pub right: f64,
    pub up: f64,
}

impl CameraIntrinsics {
    pub fn fx(&self) -> f64 {
        (self.width_px as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan()
    }

    pub fn fy(&self) -> f64 {
        (self.height_px as f64 / 2.0) / (self.vfov_deg.to_radians() / 2.0).tan()
    }

    /// Unit world-frame direction through the centre of pixel `(row, col)`.
    pub fn pixel_direction(&self, pose: &Pose, row: usize, col: usize) -> [f64; 3] {
        let right = (col as f64 + 0.5 - self.width_px as f64 / 2.0) / self.fx();
        let up = (self.height_px as f64 / 2.0 - row as f64 - 0.5) / self.fy();
        let (s, c) = pose.yaw_rad.sin_cos();
        let d = [c + right * s, s - right * c, up];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        [d[0] / n, d[1] / n, d[2] / n]
    }

    pub fn to_camera(&self, pose: &Pose, p: [f64; 3]) -> CameraPoint {
        let (s, c) = pose.yaw_rad.sin_cos();
        let (dx, dy) = (p[0] - pose.x_m, p[1] - pose.y_m);
        CameraPoint {
            forward: dx * c + dy * s,
            right: dx * s - dy * c,
            up: p[2] - CAMERA_HEIGHT_M,
        }
    }

    /// Continuous pixel coordinates `(row, col)` of a camera-frame point in
    /// front of the camera, or `None` if it falls outside the image.
    pub fn project(&self, q: CameraPoint) -> Option<(f64, f64)> {
        if q.forward <= 1e-9 {
            return None;
        }
        let col = self.fx() * q.right / q.forward + self.width_px as f64 / 2.0;
        let row = self.height_px as f64 / 2.0 - self.fy() * q.up / q.forward;
        let inside = (0.0..self.width_px as f64).contains(&col) && (0.0..self.height_px as f64).contains(&row);
        inside.then_some((row, col))
    }

    /// The explore window: middle half of the horizontal field of view and
    /// lower half of the vertical one.
    pub fn in_explore_window(&self, q: CameraPoint) -> bool {
        q.forward > 0.0 && q.right.atan2(q.forward).abs() <= self.hfov_deg.to_radians() / 4.0 && q.up <= 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub max_range_m: f64,
    /// Row-major ray ranges in metres; [`NO_HIT`] where nothing was hit.
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn is_hit(&self, row: usize, col: usize) -> bool {
        self.get(row, col).is_finite()
    }
}

/// Range along `dir` to the first solid cell, by exact voxel traversal.
/// Returns `None` when the ray leaves the lattice or exceeds `max_range`.
pub fn cast_ray(scene: &Scene, origin: [f64; 3], dir: [f64; 3], max_range: f64) -> Option<f64> {
    let l = scene.cell_size_m;
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        cell[a] = (origin[a] / l).floor() as i64;
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = ((cell[a] + 1) as f64 * l - origin[a]) / dir[a];
            t_delta[a] = l / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (cell[a] as f64 * l - origin[a]) / dir[a];
            t_delta[a] = -l / dir[a];
        }
    }
    if scene.is_solid(cell[0], cell[1], cell[2]) {
        return Some(0.0);
    }
    loop {
        let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        let t = t_max[axis];
        if t > max_range {
            return None;
        }
        cell[axis] += step[axis];
        t_max[axis] += t_delta[axis];
        if !scene.in_bounds(cell[0], cell[1], cell[2]) {
            return None;
        }
        if scene.is_solid(cell[0], cell[1], cell[2]) {
            return Some(t);
        }
    }
}

fn check_pose(scene: &Scene, pose: &Pose) -> Result<(), WorldError> {
    if scene.is_free_position(pose.x_m, pose.y_m) {
        Ok(())
    } else {
        Err(WorldError::PoseNotFree {
            x_m: pose.x_m,
            y_m: pose.y_m,
        })
    }
}

pub fn render_depth(scene: &Scene, pose: &Pose, intr: &CameraIntrinsics) -> Result<DepthImage, WorldError> {
    check_pose(scene, pose)?;
    let origin = pose.camera_origin();
    let mut data = Vec::with_capacity(intr.width_px * intr.height_px);
    for row in 0..intr.height_px {
        for col in 0..intr.width_px {
            let dir = intr.pixel_direction(pose, row, col);
            data.push(cast_ray(scene, origin, dir, intr.max_range_m).unwrap_or(NO_HIT));
        }
    }
    Ok(DepthImage {
        width: intr.width_px,
        height: intr.height_px,
        max_range_m: intr.max_range_m,
        data,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleEntity {
    pub entity_id: String,
    pub label: String,
    pub distance_m: f64,
    /// Angle from the optical axis, positive to the left.
    pub bearing_rad: f64,
    /// Continuous `(row, col)` image position of the entity centre.
    pub pixel: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticObservation {
    pub visible_entities: Vec<VisibleEntity>,
    pub pose: Pose,
    pub step: u32,
}

impl SemanticObservation {
    pub fn is_visible(&self, entity_id: &str) -> bool {
        self.visible_entities.iter().any(|v| v.entity_id == entity_id)
    }
}

pub fn observe(scene: &Scene, pose: &Pose, intr: &CameraIntrinsics, step: u32) -> Result<SemanticObservation, WorldError> {
    check_pose(scene, pose)?;
    let origin = pose.camera_origin();
    let mut visible = Vec::new();
    for e in &scene.entities {
        let q = intr.to_camera(pose, e.position_m);
        let Some(pixel) = intr.project(q) else {
            continue;
        };
        let rel = [
            e.position_m[0] - origin[0],
            e.position_m[1] - origin[1],
            e.position_m[2] - origin[2],
        ];
        let dist = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt();
        if dist > intr.max_range_m || dist < 1e-9 {
            continue;
        }
        let dir = [rel[0] / dist, rel[1] / dist, rel[2] / dist];
        if cast_ray(scene, origin, dir, dist).is_some() {
            continue;
        }
        visible.push(VisibleEntity {
            entity_id: e.id.clone(),
            label: e.label.clone(),
            distance_m: dist,
            bearing_rad: (-q.right).atan2(q.forward),
            pixel,
        });
    }
    Ok(SemanticObservation {
        visible_entities: visible,
        pose: *pose,
        step,
    })
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    index: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        other.f.total_cmp(&self.f).then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NEIGHBOURS: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];

/// 8-connected A* over known-free cells, without corner cutting. The start
/// cell is always passable. Returns the cell sequence from start to goal.
pub fn plan_path(map: &Map2D, start: [usize; 2], goal: [usize; 2]) -> Option<Vec<[usize; 2]>> {
    let (nx, ny) = (map.nx(), map.ny());
    let idx = |c: [usize; 2]| c[1] * nx + c[0];
    let start_i = idx(start);
    let passable = |x: i64, y: i64| {
        x >= 0
            && y >= 0
            && (x as usize) < nx
            && (y as usize) < ny
            && ((y as usize) * nx + x as usize == start_i || map.state(x as usize, y as usize) == CellState::Free)
    };
    if !passable(goal[0] as i64, goal[1] as i64) {
        return None;
    }
    let heuristic = |c: [usize; 2]| {
        let dx = c[0].abs_diff(goal[0]) as f64;
        let dy = c[1].abs_diff(goal[1]) as f64;
        dx.max(dy) + (std::f64::consts::SQRT_2 - 1.0) * dx.min(dy)
    };
    let mut g = vec![f64::INFINITY; nx * ny];
    let mut parent = vec![usize::MAX; nx * ny];
    let mut closed = vec![false; nx * ny];
    let mut open = BinaryHeap::new();
    g[start_i] = 0.0;
    open.push(Open {
        f: heuristic(start),
        index: start_i,
    });
    let goal_i = idx(goal);
    while let Some(Open { index, .. }) = open.pop() {
        if closed[index] {
            continue;
        }
        closed[index] = true;
        if index == goal_i {
            let mut path = vec![goal];
            let mut cur = index;
            while cur != start_i {
                cur = parent[cur];
                path.push([cur % nx, cur / nx]);
            }
            path.reverse();
            return Some(path);
        }
        let (x, y) = ((index % nx) as i64, (index / nx) as i64);
        for (dx, dy) in NEIGHBOURS {
            let (cx, cy) = (x + dx, y + dy);
            if !passable(cx, cy) {
                continue;
            }
            let diagonal = dx != 0 && dy != 0;
            if diagonal && !(passable(x + dx, y) && passable(x, y + dy)) {
                continue;
            }
            let ni = cy as usize * nx + cx as usize;
            if closed[ni] {
                continue;
            }
            let cost = g[index] + if diagonal { std::f64::consts::SQRT_2 } else { 1.0 };
            if cost < g[ni] {
                g[ni] = cost;
                parent[ni] = index;
                open.push(Open {
                    f: cost + heuristic([cx as usize, cy as usize]),
                    index: ni,
                });
            }
        }
    }
    None
}

/// Length in metres of a grid path, from exact orthogonal/diagonal step counts.
pub fn path_length_m(path: &[[usize; 2]], cell_size_m: f64) -> f64 {
    let (mut orth, mut diag) = (0u32, 0u32);
    for w in path.windows(2) {
        if w[0][0] != w[1][0] && w[0][1] != w[1][1] {
            diag += 1;
        } else {
            orth += 1;
        }
    }
    (orth as f64 + diag as f64 * std::f64::consts::SQRT_2) * cell_size_m
}

/// Moves toward `target` along the shortest known-free path, at most [`MAX_STEP_M`].
///
/// If the target is reached the pose faces along the frontier normal;
/// otherwise it faces along the path.
pub fn plan_step(map: &Map2D, from: &Pose, target: &Frontier) -> Result<Pose, WorldError> {
    let start = map.cell_of(from.x_m, from.y_m).ok_or(WorldError::StartOutsideMap)?;
    let path = plan_path(map, start, target.cell).ok_or(WorldError::Unreachable { cell: target.cell })?;
    let l = map.cell_size_m();
    let mut k = 0;
    for end in 1..path.len() {
        if path_length_m(&path[..=end], l) <= MAX_STEP_M + 1e-9 {
            k = end;
        } else {
            break;
        }
    }
    let [x, y] = map.cell_center(path[k]);
    let yaw = if k + 1 == path.len() {
        target.normal[1].atan2(target.normal[0])
    } else {
        let [px, py] = map.cell_center(path[k.saturating_sub(3)]);
        (y - py).atan2(x - px)
    };
    Ok(Pose::new(x, y, yaw))
}
