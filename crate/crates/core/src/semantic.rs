//! Semantic values on the map and semantic-value-weighted frontier sampling.
//!
//! Each step a few prompt points are picked from the visible free floor by
//! farthest point sampling. The oracle scores them; the scores are combined
//! into a semantic value `exp(tau_lsv * lsv + tau_gsv * gsv)` and deposited
//! onto the map as Gaussian bumps (max-combined). Frontiers are then weighted
//! by `exp(tau_sv * sv_p + tau_sv_normal * sv_normal)`, where `sv_normal`
//! averages the values along the frontier's normal ray.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontier::Frontier;
use crate::mapping::{CellState, Map2D};
use crate::worldsim::{CameraIntrinsics, DepthImage, Pose};

pub const DEFAULT_NUM_POINTS: usize = 3;
pub const POINT_LETTERS: [char; 3] = ['A', 'B', 'C'];

#[derive(Debug, Error, PartialEq)]
pub enum SemanticError {
    #[error("`{name}` = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("no frontiers to sample from")]
    NoFrontiers,
    #[error("{frontiers} frontiers but {weights} weights")]
    LengthMismatch { frontiers: usize, weights: usize },
    #[error("frontier weights must be positive and finite")]
    InvalidWeights,
    #[error("invalid semantic weights: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticWeights {
    pub tau_lsv: f64,
    pub tau_gsv: f64,
    pub tau_sv: f64,
    pub tau_sv_normal: f64,
    pub d_sv_m: f64,
    pub smoothing_sigma_m: f64,
}

impl Default for SemanticWeights {
    fn default() -> Self {
        SemanticWeights {
            tau_lsv: 3.0,
            tau_gsv: 3.0,
            tau_sv: 1.0,
            tau_sv_normal: 1.0,
            d_sv_m: 3.0,
            smoothing_sigma_m: 0.5,
        }
    }
}

impl SemanticWeights {
    /// All temperatures zero: sampling degenerates to uniform.
    pub fn uniform() -> Self {
        SemanticWeights {
            tau_lsv: 0.0,
            tau_gsv: 0.0,
            tau_sv: 0.0,
            tau_sv_normal: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SemanticError> {
        let temps = [self.tau_lsv, self.tau_gsv, self.tau_sv, self.tau_sv_normal];
        if temps.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(SemanticError::InvalidConfig("temperatures must be finite and >= 0".into()));
        }
        if !(self.d_sv_m > 0.0 && self.smoothing_sigma_m > 0.0) {
            return Err(SemanticError::InvalidConfig("d_sv_m and smoothing_sigma_m must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub map_cell: [usize; 2],
    /// `(row, col)` in the current image.
    pub pixel: (usize, usize),
    pub letter: char,
}

/// Greedy farthest point sampling starting at `seed`. Ties go to the lower index.
pub fn farthest_point_sampling(points: &[[f64; 2]], seed: usize, k: usize) -> Vec<usize> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let dist = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
    let mut chosen = vec![seed];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist(*p, points[seed])).collect();
    while chosen.len() < k.min(points.len()) {
        let mut best = None;
        for (i, d) in nearest.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            if best.is_none_or(|(_, bd)| *d > bd) {
                best = Some((i, *d));
            }
        }
        let Some((next, _)) = best else {
            break;
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(dist(*p, points[next]));
        }
    }
    chosen
}

/// Picks up to `k` well-spread free cells visible in the current view.
pub fn sample_prompt_points(
    map: &Map2D,
    depth: &DepthImage,
    pose: &Pose,
    intr: &CameraIntrinsics,
    k: usize,
) -> Vec<PromptPoint> {
    let cam = pose.camera_origin();
    // Map cell -> first pixel (row-major) whose surface hit lands in it.
    let mut cells: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for row in 0..depth.height {
        for col in 0..depth.width {
            let r = depth.get(row, col);
            if !r.is_finite() {
                continue;
            }
            let d = intr.pixel_direction(pose, row, col);
            let Some([x, y]) = map.cell_of(cam[0] + d[0] * r, cam[1] + d[1] * r) else {
                continue;
            };
            if map.state(x, y) == CellState::Free {
                cells.entry((y, x)).or_insert((row, col));
            }
        }
    }
    if cells.is_empty() {
        return Vec::new();
    }
    let entries: Vec<([usize; 2], (usize, usize))> = cells.into_iter().map(|((y, x), px)| ([x, y], px)).collect();
    let centre = (depth.height as f64 / 2.0, depth.width as f64 / 2.0);
    let pixel_dist = |px: (usize, usize)| {
        let (r, c) = (px.0 as f64 + 0.5 - centre.0, px.1 as f64 + 0.5 - centre.1);
        r * r + c * c
    };
    let seed = (0..entries.len())
        .min_by(|&a, &b| pixel_dist(entries[a].1).total_cmp(&pixel_dist(entries[b].1)))
        .expect("non-empty");
    let positions: Vec<[f64; 2]> = entries.iter().map(|(c, _)| map.cell_center(*c)).collect();
    farthest_point_sampling(&positions, seed, k.min(POINT_LETTERS.len()))
        .into_iter()
        .zip(POINT_LETTERS)
        .map(|(i, letter)| PromptPoint {
            map_cell: entries[i].0,
            pixel: entries[i].1,
            letter,
        })
        .collect()
}

fn unit_interval(name: &'static str, value: f64) -> Result<f64, SemanticError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(SemanticError::OutOfRange { name, value })
    }
}

/// `exp(tau_lsv * lsv + tau_gsv * gsv)`.
pub fn combine_sv(lsv: f64, gsv: f64, w: &SemanticWeights) -> Result<f64, SemanticError> {
    let lsv = unit_interval("lsv", lsv)?;
    let gsv = unit_interval("gsv", gsv)?;
    Ok((w.tau_lsv * lsv + w.tau_gsv * gsv).exp())
}

/// Max-combines a Gaussian bump of height `sv` centred on `cell` into the map.
pub fn deposit_sv(map: &mut Map2D, cell: [usize; 2], sv: f64, sigma_m: f64) {
    let l = map.cell_size_m();
    let radius_m = 3.0 * sigma_m;
    let r = (radius_m / l).ceil() as i64;
    let two_sigma2 = 2.0 * sigma_m * sigma_m;
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (cell[0] as i64 + dx, cell[1] as i64 + dy);
            if !map.in_bounds(x, y) {
                continue;
            }
            let d2 = ((dx * dx + dy * dy) as f64) * l * l;
            if d2 > radius_m * radius_m + 1e-12 {
                continue;
            }
            let candidate = sv * (-d2 / two_sigma2).exp();
            let (x, y) = (x as usize, y as usize);
            if candidate > map.sv(x, y) {
                map.set_sv(x, y, candidate);
            }
        }
    }
}

/// Mean semantic value over cells on the frontier's normal ray, `t` in `(0, d_sv]`.
pub fn normal_ray_sv(map: &Map2D, f: &Frontier, d_sv_m: f64) -> f64 {
    let l = map.cell_size_m();
    let n = ((d_sv_m / l) + 1e-9).floor() as usize;
    if n == 0 {
        return 0.0;
    }
    let total: f64 = (1..=n)
        .map(|i| {
            let t = i as f64 * l;
            let [x, y] = map.cell_of_signed(f.position_m[0] + t * f.normal[0], f.position_m[1] + t * f.normal[1]);
            map.sv_at(x, y)
        })
        .sum();
    total / n as f64
}

/// Natural log of the frontier weight; finite even when the weight overflows.
pub fn log_frontier_weight(map: &Map2D, f: &Frontier, w: &SemanticWeights) -> f64 {
    let sv_p = map.sv(f.cell[0], f.cell[1]);
    w.tau_sv * sv_p + w.tau_sv_normal * normal_ray_sv(map, f, w.d_sv_m)
}

pub fn frontier_weight(map: &Map2D, f: &Frontier, w: &SemanticWeights) -> f64 {
    log_frontier_weight(map, f, w).exp()
}

/// Categorical draw with probability proportional to `weights`.
pub fn sample_frontier<'a, R: Rng + ?Sized>(
    frontiers: &'a [Frontier],
    weights: &[f64],
    rng: &mut R,
) -> Result<&'a Frontier, SemanticError> {
    if frontiers.is_empty() {
        return Err(SemanticError::NoFrontiers);
    }
    if frontiers.len() != weights.len() {
        return Err(SemanticError::LengthMismatch {
            frontiers: frontiers.len(),
            weights: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(SemanticError::InvalidWeights);
    }
    let dist = WeightedIndex::new(weights).map_err(|_| SemanticError::InvalidWeights)?;
    Ok(&frontiers[dist.sample(rng)])
}

/// As [`sample_frontier`], from log-weights (shifted by their maximum before exponentiating).
pub fn sample_frontier_log<'a, R: Rng + ?Sized>(
    frontiers: &'a [Frontier],
    log_weights: &[f64],
    rng: &mut R,
) -> Result<&'a Frontier, SemanticError> {
    if log_weights.iter().any(|lw| !lw.is_finite()) {
        return Err(SemanticError::InvalidWeights);
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    sample_frontier(frontiers, &weights, rng)
}
