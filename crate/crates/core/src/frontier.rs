//! Frontier extraction on the 2D map.
//!
//! A frontier cell is an explored free cell with at least one 8-neighbour
//! that is not explored (unknown, seen but unexplored, or off the map).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::mapping::{CellState, Map2D};

pub const DEFAULT_MIN_CLUSTER: usize = 3;

const NEIGHBOURS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub cell: [usize; 2],
    pub position_m: [f64; 2],
    /// Unit vector pointing toward unexplored space.
    pub normal: [f64; 2],
    pub cluster_id: usize,
}

fn frontier_normal(map: &Map2D, x: usize, y: usize) -> Option<[f64; 2]> {
    let mut sum = [0.0, 0.0];
    let mut first = None;
    for (dx, dy) in NEIGHBOURS {
        if !map.explored_at(x as i64 + dx, y as i64 + dy) {
            let n = (dx as f64).hypot(dy as f64);
            let u = [dx as f64 / n, dy as f64 / n];
            sum[0] += u[0];
            sum[1] += u[1];
            first.get_or_insert(u);
        }
    }
    let first = first?;
    let norm = sum[0].hypot(sum[1]);
    Some(if norm > 1e-9 {
        [sum[0] / norm, sum[1] / norm]
    } else {
        first
    })
}

/// Returns frontier cells in row-major order, grouped into 8-connected
/// clusters; clusters with fewer than `min_cluster` cells are dropped.
pub fn extract_frontiers(map: &Map2D, min_cluster: usize) -> Vec<Frontier> {
    let (nx, ny) = (map.nx(), map.ny());
    let mut normals: Vec<Option<[f64; 2]>> = vec![None; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            if map.state(x, y) == CellState::Free && map.is_explored(x, y) {
                normals[y * nx + x] = frontier_normal(map, x, y);
            }
        }
    }

    // Label clusters by flood fill, seeding in row-major order.
    let mut label = vec![usize::MAX; nx * ny];
    let mut sizes = Vec::new();
    for start in 0..nx * ny {
        if normals[start].is_none() || label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        label[start] = id;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = ((i % nx) as i64, (i / nx) as i64);
            for (dx, dy) in NEIGHBOURS {
                let (cx, cy) = (x + dx, y + dy);
                if !map.in_bounds(cx, cy) {
                    continue;
                }
                let j = cy as usize * nx + cx as usize;
                if normals[j].is_some() && label[j] == usize::MAX {
                    label[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }

    // Renumber surviving clusters densely in order of first appearance.
    let mut remap = vec![usize::MAX; sizes.len()];
    let mut next = 0;
    let mut out = Vec::new();
    for i in 0..nx * ny {
        let Some(normal) = normals[i] else {
            continue;
        };
        let id = label[i];
        if sizes[id] < min_cluster {
            continue;
        }
        if remap[id] == usize::MAX {
            remap[id] = next;
            next += 1;
        }
        let cell = [i % nx, i / nx];
        out.push(Frontier {
            cell,
            position_m: map.cell_center(cell),
            normal,
            cluster_id: remap[id],
        });
    }
    out
}
