//! TSDF voxel fusion and the 2D planning map.
//!
//! Depth images are fused into a [`VoxelGrid`] by projecting every candidate
//! voxel into the image and averaging its truncated signed distance to the
//! observed surface. [`project_2d`] then collapses each voxel column into a
//! [`Map2D`] cell that is free, occupied or unknown, and explored or not.
//!
//! Column classification looks at a height band from [`BAND_MIN_M`] to
//! [`CAMERA_HEIGHT_M`]; the floor layer and the voxels just above it are
//! excluded so that the floor surface never reads as an obstacle.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{layers_for_height, FLOOR_HEIGHT_M};
use crate::worldsim::{CameraIntrinsics, DepthImage, Pose, CAMERA_HEIGHT_M};

pub const DEFAULT_TRUNC_M: f64 = 0.2;
pub const FREE_THRESHOLD: f32 = 0.2;
pub const OCC_THRESHOLD: f32 = -0.2;
/// Lower edge of the column band used for free/occupied classification.
pub const BAND_MIN_M: f64 = 0.3;

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("depth image is {got:?}, intrinsics expect {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("truncation {trunc_m} m is below two voxels ({min_m} m)")]
    Truncation { trunc_m: f64, min_m: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellState {
    Unknown,
    Free,
    Occupied,
}

/// Fused TSDF volume. The horizontal extent grows on demand; the height is
/// fixed at one floor.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    cell_size_m: f64,
    /// Lattice index of voxel `[0, 0]` in world cells.
    origin_cell: [i64; 2],
    dims: [usize; 3],
    tsdf: Vec<f32>,
    weight: Vec<f32>,
    explored: Vec<bool>,
}

impl VoxelGrid {
    pub fn new(cell_size_m: f64) -> Self {
        VoxelGrid {
            cell_size_m,
            origin_cell: [0, 0],
            dims: [0, 0, layers_for_height(FLOOR_HEIGHT_M, cell_size_m)],
            tsdf: Vec::new(),
            weight: Vec::new(),
            explored: Vec::new(),
        }
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_m
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin_m(&self) -> [f64; 2] {
        [
            self.origin_cell[0] as f64 * self.cell_size_m,
            self.origin_cell[1] as f64 * self.cell_size_m,
        ]
    }

    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn tsdf(&self, x: usize, y: usize, z: usize) -> f32 {
        self.tsdf[self.index(x, y, z)]
    }

    pub fn weight(&self, x: usize, y: usize, z: usize) -> f32 {
        self.weight[self.index(x, y, z)]
    }

    pub fn is_explored(&self, x: usize, y: usize, z: usize) -> bool {
        self.explored[self.index(x, y, z)]
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let l = self.cell_size_m;
        [
            (self.origin_cell[0] + x as i64) as f64 * l + 0.5 * l,
            (self.origin_cell[1] + y as i64) as f64 * l + 0.5 * l,
            (z as f64 + 0.5) * l,
        ]
    }

    /// Grid indices of the voxel containing a world point, if inside the grid.
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let l = self.cell_size_m;
        let x = (p[0] / l).floor() as i64 - self.origin_cell[0];
        let y = (p[1] / l).floor() as i64 - self.origin_cell[1];
        let z = (p[2] / l).floor() as i64;
        let inside = x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.dims[0]
            && (y as usize) < self.dims[1]
            && (z as usize) < self.dims[2];
        inside.then_some([x as usize, y as usize, z as usize])
    }

    /// Grows the grid so it covers world cells `[lo, hi]` (inclusive). Each
    /// growing axis at least doubles.
    fn ensure_covers(&mut self, lo: [i64; 2], hi: [i64; 2]) {
        let [nx, ny, nz] = self.dims;
        if nx > 0 && ny > 0 {
            let cur_hi = [self.origin_cell[0] + nx as i64 - 1, self.origin_cell[1] + ny as i64 - 1];
            if (0..2).all(|a| lo[a] >= self.origin_cell[a] && hi[a] <= cur_hi[a]) {
                return;
            }
        }
        let mut new_lo = lo;
        let mut new_hi = hi;
        if nx > 0 && ny > 0 {
            let old = [nx as i64, ny as i64];
            for a in 0..2 {
                let cur_lo = self.origin_cell[a];
                let cur_hi = cur_lo + old[a] - 1;
                new_lo[a] = new_lo[a].min(cur_lo);
                new_hi[a] = new_hi[a].max(cur_hi);
                let extent = new_hi[a] - new_lo[a] + 1;
                if extent > old[a] && extent < 2 * old[a] {
                    let extra = 2 * old[a] - extent;
                    if lo[a] < cur_lo {
                        new_lo[a] -= extra;
                    } else {
                        new_hi[a] += extra;
                    }
                }
            }
        }
        let new_dims = [
            (new_hi[0] - new_lo[0] + 1) as usize,
            (new_hi[1] - new_lo[1] + 1) as usize,
            nz,
        ];
        let total = new_dims[0] * new_dims[1] * nz;
        let mut tsdf = vec![1.0f32; total];
        let mut weight = vec![0.0f32; total];
        let mut explored = vec![false; total];
        let off = [
            (self.origin_cell[0] - new_lo[0]) as usize,
            (self.origin_cell[1] - new_lo[1]) as usize,
        ];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let src = self.index(x, y, z);
                    let dst = (x + off[0]) + new_dims[0] * ((y + off[1]) + new_dims[1] * z);
                    tsdf[dst] = self.tsdf[src];
                    weight[dst] = self.weight[src];
                    explored[dst] = self.explored[src];
                }
            }
        }
        self.origin_cell = new_lo;
        self.dims = new_dims;
        self.tsdf = tsdf;
        self.weight = weight;
        self.explored = explored;
    }

    /// Fuses one depth image taken from `pose`.
    pub fn integrate(
        &mut self,
        depth: &DepthImage,
        pose: &Pose,
        intr: &CameraIntrinsics,
        trunc_m: f64,
    ) -> Result<(), MappingError> {
        if (depth.height, depth.width) != (intr.height_px, intr.width_px) {
            return Err(MappingError::DimensionMismatch {
                expected: (intr.height_px, intr.width_px),
                got: (depth.height, depth.width),
            });
        }
        let l = self.cell_size_m;
        if trunc_m < 2.0 * l - 1e-9 {
            return Err(MappingError::Truncation {
                trunc_m,
                min_m: 2.0 * l,
            });
        }
        let cam = pose.camera_origin();
        let mut lo = [cam[0], cam[1]];
        let mut hi = lo;
        let mut any_hit = false;
        for row in 0..depth.height {
            for col in 0..depth.width {
                let r = depth.get(row, col);
                if !r.is_finite() {
                    continue;
                }
                any_hit = true;
                let d = intr.pixel_direction(pose, row, col);
                let reach = r + trunc_m;
                let p = [cam[0] + d[0] * reach, cam[1] + d[1] * reach];
                for a in 0..2 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
        if !any_hit {
            return Ok(());
        }
        let lo_cell = [(lo[0] / l).floor() as i64, (lo[1] / l).floor() as i64];
        let hi_cell = [(hi[0] / l).floor() as i64, (hi[1] / l).floor() as i64];
        self.ensure_covers(lo_cell, hi_cell);

        let (fx, fy) = (intr.fx(), intr.fy());
        let (w, h) = (intr.width_px as f64, intr.height_px as f64);
        let half_hfov = intr.hfov_deg.to_radians() / 2.0;
        let explore_tan = (half_hfov / 2.0).tan();
        let (s, c) = pose.yaw_rad.sin_cos();
        let trunc = trunc_m as f32;
        let [nx, ny, nz] = self.dims;
        let x0 = (lo_cell[0] - self.origin_cell[0]) as usize;
        let y0 = (lo_cell[1] - self.origin_cell[1]) as usize;
        let x1 = (hi_cell[0] - self.origin_cell[0]) as usize;
        let y1 = (hi_cell[1] - self.origin_cell[1]) as usize;
        for y in y0..=y1.min(ny - 1) {
            for x in x0..=x1.min(nx - 1) {
                let center = self.voxel_center(x, y, 0);
                let (dx, dy) = (center[0] - cam[0], center[1] - cam[1]);
                let forward = dx * c + dy * s;
                if forward <= 1e-9 {
                    continue;
                }
                let right = dx * s - dy * c;
                let col = fx * right / forward + w / 2.0;
                if !(0.0..w).contains(&col) {
                    continue;
                }
                let horiz2 = dx * dx + dy * dy;
                let in_hwindow = right.abs() <= explore_tan * forward;
                for z in 0..nz {
                    let up = (z as f64 + 0.5) * l - cam[2];
                    let row = h / 2.0 - fy * up / forward;
                    if !(0.0..h).contains(&row) {
                        continue;
                    }
                    let measured = depth.get(row as usize, col as usize);
                    if !measured.is_finite() {
                        continue;
                    }
                    let range = (horiz2 + up * up).sqrt();
                    if range > intr.max_range_m {
                        continue;
                    }
                    let sdf = (measured - range) as f32;
                    if sdf < -trunc {
                        continue;
                    }
                    let sample = (sdf / trunc).clamp(-1.0, 1.0);
                    let i = x + nx * (y + ny * z);
                    let wgt = self.weight[i];
                    self.tsdf[i] = ((self.tsdf[i] * wgt + sample) / (wgt + 1.0)).clamp(-1.0, 1.0);
                    self.weight[i] = wgt + 1.0;
                    if in_hwindow && up <= 0.0 {
                        self.explored[i] = true;
                    }
                }
            }
        }
        Ok(())
    }

    /// Inclusive z-index range of the classification band.
    fn band(&self) -> (usize, usize) {
        let l = self.cell_size_m;
        let lo = (BAND_MIN_M / l - 0.5 - 1e-9).ceil().max(0.0) as usize;
        let hi = (CAMERA_HEIGHT_M / l - 0.5 + 1e-9).floor() as usize;
        (lo, hi.min(self.dims[2] - 1))
    }

    fn classify_column(&self, x: usize, y: usize) -> (CellState, bool) {
        let (lo, hi) = self.band();
        let mut observed_free = false;
        let mut occupied = false;
        let mut explored = false;
        for z in lo..=hi {
            let i = self.index(x, y, z);
            if self.weight[i] <= 0.0 {
                continue;
            }
            let t = self.tsdf[i];
            if t < OCC_THRESHOLD {
                occupied = true;
            } else if t > FREE_THRESHOLD {
                observed_free = true;
            }
            explored |= self.explored[i];
        }
        let state = if occupied {
            CellState::Occupied
        } else if observed_free {
            CellState::Free
        } else {
            CellState::Unknown
        };
        (state, explored && state != CellState::Unknown)
    }
}

/// Projects the grid into a fresh 2D map with a zero semantic-value layer.
pub fn project_2d(grid: &VoxelGrid) -> Map2D {
    let [nx, ny, _] = grid.dims;
    let mut map = Map2D {
        cell_size_m: grid.cell_size_m,
        origin_cell: grid.origin_cell,
        nx,
        ny,
        state: vec![CellState::Unknown; nx * ny],
        explored: vec![false; nx * ny],
        sv: vec![0.0; nx * ny],
    };
    for y in 0..ny {
        for x in 0..nx {
            let (state, explored) = grid.classify_column(x, y);
            map.state[y * nx + x] = state;
            map.explored[y * nx + x] = explored;
        }
    }
    map
}

/// 2D planning map: per-cell state, explored flag and semantic value.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2D {
    cell_size_m: f64,
    origin_cell: [i64; 2],
    nx: usize,
    ny: usize,
    state: Vec<CellState>,
    explored: Vec<bool>,
    sv: Vec<f64>,
}

impl Map2D {
    /// Map with its origin at world `(0, 0)`, every cell in `state`.
    pub fn filled(nx: usize, ny: usize, cell_size_m: f64, state: CellState) -> Self {
        Map2D {
            cell_size_m,
            origin_cell: [0, 0],
            nx,
            ny,
            state: vec![state; nx * ny],
            explored: vec![state != CellState::Unknown; nx * ny],
            sv: vec![0.0; nx * ny],
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_m
    }

    pub fn origin_m(&self) -> [f64; 2] {
        [
            self.origin_cell[0] as f64 * self.cell_size_m,
            self.origin_cell[1] as f64 * self.cell_size_m,
        ]
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.nx && (y as usize) < self.ny
    }

    pub fn state(&self, x: usize, y: usize) -> CellState {
        self.state[y * self.nx + x]
    }

    pub fn set_state(&mut self, x: usize, y: usize, state: CellState) {
        let i = y * self.nx + x;
        self.state[i] = state;
        if state == CellState::Unknown {
            self.explored[i] = false;
        }
    }

    pub fn is_explored(&self, x: usize, y: usize) -> bool {
        self.explored[y * self.nx + x]
    }

    /// Marks a cell explored; ignored for unknown cells.
    pub fn set_explored(&mut self, x: usize, y: usize, explored: bool) {
        let i = y * self.nx + x;
        self.explored[i] = explored && self.state[i] != CellState::Unknown;
    }

    /// Explored flag with out-of-bounds cells treated as unexplored.
    pub fn explored_at(&self, x: i64, y: i64) -> bool {
        self.in_bounds(x, y) && self.is_explored(x as usize, y as usize)
    }

    pub fn sv(&self, x: usize, y: usize) -> f64 {
        self.sv[y * self.nx + x]
    }

    /// Semantic value with zero outside the map.
    pub fn sv_at(&self, x: i64, y: i64) -> f64 {
        if self.in_bounds(x, y) {
            self.sv(x as usize, y as usize)
        } else {
            0.0
        }
    }

    pub fn set_sv(&mut self, x: usize, y: usize, value: f64) {
        self.sv[y * self.nx + x] = value;
    }

    pub fn sv_layer(&self) -> &[f64] {
        &self.sv
    }

    /// Signed map cell of a world position (may lie outside the map).
    pub fn cell_of_signed(&self, x_m: f64, y_m: f64) -> [i64; 2] {
        [
            (x_m / self.cell_size_m).floor() as i64 - self.origin_cell[0],
            (y_m / self.cell_size_m).floor() as i64 - self.origin_cell[1],
        ]
    }

    pub fn cell_of(&self, x_m: f64, y_m: f64) -> Option<[usize; 2]> {
        let [x, y] = self.cell_of_signed(x_m, y_m);
        self.in_bounds(x, y).then_some([x as usize, y as usize])
    }

    pub fn cell_center(&self, cell: [usize; 2]) -> [f64; 2] {
        let l = self.cell_size_m;
        [
            (self.origin_cell[0] + cell[0] as i64) as f64 * l + 0.5 * l,
            (self.origin_cell[1] + cell[1] as i64) as f64 * l + 0.5 * l,
        ]
    }

    pub fn explored_count(&self) -> usize {
        self.explored.iter().filter(|e| **e).count()
    }

    pub fn count_state(&self, state: CellState) -> usize {
        self.state.iter().filter(|s| **s == state).count()
    }

    /// Re-projects state and explored flags from `grid`, carrying the
    /// semantic-value layer over to the (possibly grown) footprint.
    pub fn update_from(&mut self, grid: &VoxelGrid) {
        let mut fresh = project_2d(grid);
        for y in 0..self.ny {
            for x in 0..self.nx {
                let wx = self.origin_cell[0] + x as i64 - fresh.origin_cell[0];
                let wy = self.origin_cell[1] + y as i64 - fresh.origin_cell[1];
                if fresh.in_bounds(wx, wy) {
                    fresh.sv[wy as usize * fresh.nx + wx as usize] = self.sv[y * self.nx + x];
                }
            }
        }
        *self = fresh;
    }

    /// Writes `state`, `explored` and `sv` PGM layers plus a JSON sidecar.
    pub fn write_snapshot(&self, dir: &Path, stem: &str) -> Result<(), MappingError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| MappingError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let sv_max = self.sv.iter().copied().fold(0.0, f64::max);
        let layers: [(&str, Box<dyn Fn(usize) -> u8>); 3] = [
            (
                "state",
                Box::new(|i| match self.state[i] {
                    CellState::Unknown => 128,
                    CellState::Free => 255,
                    CellState::Occupied => 0,
                }),
            ),
            ("explored", Box::new(|i| if self.explored[i] { 255 } else { 0 })),
            (
                "sv",
                Box::new(move |i| {
                    if sv_max > 0.0 {
                        (self.sv[i] / sv_max * 255.0).round() as u8
                    } else {
                        0
                    }
                }),
            ),
        ];
        for (name, pixel) in layers.iter() {
            let mut bytes = format!("P5\n{} {}\n255\n", self.nx, self.ny).into_bytes();
            // Image rows run top-down, so the highest y comes first.
            for y in (0..self.ny).rev() {
                for x in 0..self.nx {
                    bytes.push(pixel(y * self.nx + x));
                }
            }
            let path = dir.join(format!("{stem}_{name}.pgm"));
            fs::write(&path, bytes).map_err(io(&path))?;
        }
        let sidecar = serde_json::json!({
            "format_version": 1,
            "origin_m": self.origin_m(),
            "cell_size_m": self.cell_size_m,
            "width": self.nx,
            "height": self.ny,
            "sv_max": sv_max,
            "state_levels": {"unknown": 128, "free": 255, "occupied": 0},
        });
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, serde_json::to_string_pretty(&sidecar).expect("sidecar serializes")).map_err(io(&path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scene;
    use crate::worldsim::render_depth;

    fn wall_scene() -> Scene {
        // Wall face at x = 4.0 m, camera at x = 2.0 m.
        let mut s = Scene::with_floor("t", 0.1, 60, 40);
        let nz = s.dims[2];
        s.fill_box([40, 0, 1], [42, 40, nz], true);
        s
    }

    fn fused(scene: &Scene, poses: &[Pose], intr: &CameraIntrinsics) -> VoxelGrid {
        let mut grid = VoxelGrid::new(scene.cell_size_m);
        for pose in poses {
            let depth = render_depth(scene, pose, intr).unwrap();
            grid.integrate(&depth, pose, intr, DEFAULT_TRUNC_M).unwrap();
        }
        grid
    }

    #[test]
    fn single_wall_tsdf_profile() {
        let scene = wall_scene();
        let pose = Pose::new(2.05, 2.05, 0.0);
        let intr = CameraIntrinsics::default();
        let grid = fused(&scene, &[pose], &intr);
        // Voxel well in front of the wall at camera height reads +1.
        let near = grid.voxel_of([3.0, 2.05, 1.45]).unwrap();
        assert_eq!(grid.tsdf(near[0], near[1], near[2]), 1.0);
        // Voxels straddling the surface are near zero: +-0.05 m over 0.2 m truncation.
        let front = grid.voxel_of([3.95, 2.05, 1.45]).unwrap();
        let back = grid.voxel_of([4.05, 2.05, 1.45]).unwrap();
        assert!((grid.tsdf(front[0], front[1], front[2]) - 0.25).abs() < 0.1);
        assert!((grid.tsdf(back[0], back[1], back[2]) + 0.25).abs() < 0.1);
    }

    #[test]
    fn integrating_twice_is_idempotent_on_tsdf() {
        let scene = wall_scene();
        let pose = Pose::new(2.05, 2.05, 0.3);
        let intr = CameraIntrinsics::default();
        let once = fused(&scene, &[pose], &intr);
        let twice = fused(&scene, &[pose, pose], &intr);
        assert_eq!(once.dims(), twice.dims());
        for (a, b) in once.tsdf.iter().zip(&twice.tsdf) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn corner_voxel_updates_but_is_not_explored() {
        let scene = wall_scene();
        let pose = Pose::new(2.05, 2.05, 0.0);
        let intr = CameraIntrinsics::default();
        let grid = fused(&scene, &[pose], &intr);
        // Left of the optical axis by 40 deg, above camera height.
        let p = [3.05, 2.05 + 40f64.to_radians().tan(), 2.2];
        let v = grid.voxel_of(p).unwrap();
        assert!(grid.weight(v[0], v[1], v[2]) > 0.0);
        assert!(!grid.is_explored(v[0], v[1], v[2]));
        // A voxel on the axis below the camera is explored.
        let q = grid.voxel_of([3.05, 2.05, 1.05]).unwrap();
        assert!(grid.is_explored(q[0], q[1], q[2]));
    }

    #[test]
    fn projection_states() {
        let scene = wall_scene();
        let intr = CameraIntrinsics::default();
        let grid = fused(&scene, &[Pose::new(2.05, 2.05, 0.0)], &intr);
        let map = project_2d(&grid);
        let free = map.cell_of(3.05, 2.05).unwrap();
        let wall = map.cell_of(4.05, 2.05).unwrap();
        assert_eq!(map.state(free[0], free[1]), CellState::Free);
        assert!(map.is_explored(free[0], free[1]));
        assert_eq!(map.state(wall[0], wall[1]), CellState::Occupied);
        // Behind the camera nothing was seen.
        if let Some(behind) = map.cell_of(1.0, 2.05) {
            assert_eq!(map.state(behind[0], behind[1]), CellState::Unknown);
            assert!(!map.is_explored(behind[0], behind[1]));
        }
        assert_eq!(project_2d(&grid), map);
    }

    #[test]
    fn high_obstacle_leaves_column_free() {
        // A shelf spanning 2.5 m to 3.5 m over x in [3, 3.5) m.
        let mut scene = Scene::with_floor("t", 0.1, 60, 40);
        let nz = scene.dims[2];
        scene.fill_box([30, 0, 25], [35, 40, nz], true);
        let intr = CameraIntrinsics::default();
        let grid = fused(&scene, &[Pose::new(1.05, 2.05, 0.0)], &intr);
        let map = project_2d(&grid);
        let c = map.cell_of(3.25, 2.05).unwrap();
        assert_eq!(map.state(c[0], c[1]), CellState::Free);
    }

    #[test]
    fn peripheral_column_free_but_not_explored() {
        let scene = Scene::with_floor("t", 0.1, 60, 60);
        let intr = CameraIntrinsics::default();
        let pose = Pose::new(3.05, 3.05, 0.0);
        let grid = fused(&scene, &[pose], &intr);
        let map = project_2d(&grid);
        // 45 deg off-axis is inside the 60 deg half-field but outside the 30 deg explore window.
        let c = map.cell_of(3.05 + 1.6, 3.05 + 1.6).unwrap();
        assert_eq!(map.state(c[0], c[1]), CellState::Free);
        assert!(!map.is_explored(c[0], c[1]));
    }

    #[test]
    fn never_observed_is_unknown() {
        let mut grid = VoxelGrid::new(0.1);
        grid.ensure_covers([0, 0], [9, 9]);
        let map = project_2d(&grid);
        assert_eq!(map.count_state(CellState::Unknown), 100);
        assert_eq!(map.explored_count(), 0);
    }

    #[test]
    fn growth_preserves_content_and_sv() {
        let scene = wall_scene();
        let intr = CameraIntrinsics::default();
        let pose_a = Pose::new(2.05, 2.05, 0.0);
        let mut grid = fused(&scene, &[pose_a], &intr);
        let mut map = project_2d(&grid);
        let c = map.cell_of(3.05, 2.05).unwrap();
        map.set_sv(c[0], c[1], 4.0);
        let probe = grid.voxel_of([3.05, 2.05, 1.05]).unwrap();
        let before = grid.tsdf(probe[0], probe[1], probe[2]);
        let pose_b = Pose::new(2.05, 2.05, std::f64::consts::PI);
        let depth = render_depth(&scene, &pose_b, &intr).unwrap();
        grid.integrate(&depth, &pose_b, &intr, DEFAULT_TRUNC_M).unwrap();
        map.update_from(&grid);
        let c2 = map.cell_of(3.05, 2.05).unwrap();
        assert_eq!(map.sv(c2[0], c2[1]), 4.0);
        let probe2 = grid.voxel_of([3.05, 2.05, 1.05]).unwrap();
        assert_eq!(grid.tsdf(probe2[0], probe2[1], probe2[2]), before);
    }

    #[test]
    fn rejects_bad_inputs() {
        let intr = CameraIntrinsics::default();
        let depth = DepthImage {
            width: 4,
            height: 3,
            max_range_m: 10.0,
            data: vec![1.0; 12],
        };
        let mut grid = VoxelGrid::new(0.1);
        let pose = Pose::new(1.0, 1.0, 0.0);
        assert!(matches!(
            grid.integrate(&depth, &pose, &intr, 0.2),
            Err(MappingError::DimensionMismatch { .. })
        ));
        let small = CameraIntrinsics {
            width_px: 4,
            height_px: 3,
            ..intr
        };
        assert!(matches!(
            grid.integrate(&depth, &pose, &small, 0.1),
            Err(MappingError::Truncation { .. })
        ));
    }

    #[test]
    fn snapshot_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut map = Map2D::filled(5, 4, 0.1, CellState::Free);
        map.set_sv(1, 1, 2.0);
        map.write_snapshot(dir.path(), "step_000").unwrap();
        let pgm = fs::read(dir.path().join("step_000_sv.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n5 4\n255\n"));
        assert_eq!(pgm.len(), "P5\n5 4\n255\n".len() + 20);
        assert!(dir.path().join("step_000.json").exists());
    }
}
