//! Episode loop, calibration, evaluation and metrics.
//!
//! One episode step renders depth, fuses it, refreshes the 2D map, asks the
//! oracle about the view and a few prompt points, deposits semantic values,
//! checks the stopping rule and, if still exploring, samples a frontier and
//! moves toward it.
//!
//! The planner and the oracle draw from separate seeded streams, and the
//! oracle consumes a fixed number of draws per step. A stopping rule
//! therefore only truncates an episode: the first `k` steps are identical
//! with or without it. Evaluation exploits this by rolling every test
//! scenario to its horizon once and replaying each stopping rule and step
//! budget over the logs.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{
    argmax_label, calibrate, fallback_answer, prediction_set, sequence_set, stop_entropy, stop_relevance,
    CalibrationModel, ConfidenceError, LabelSet, OnEmpty, PredictionSetState, SetStatus, StepRecord,
};
use crate::frontier::{extract_frontiers, Frontier, DEFAULT_MIN_CLUSTER};
use crate::mapping::{CellState, Map2D, MappingError, VoxelGrid, DEFAULT_TRUNC_M};
use crate::oracle::{build_prompts, query_synthetic, HttpOracle, OracleError, OracleOutputs, SyntheticOracleConfig};
use crate::scenario::{
    load_scenarios, load_scene_dir, AnswerLabel, Scenario, ScenarioError, Scene, SceneSet, PADDING_CHOICE,
};
use crate::semantic::{
    combine_sv, deposit_sv, log_frontier_weight, sample_frontier_log, sample_prompt_points, PromptPoint,
    SemanticError, SemanticWeights, DEFAULT_NUM_POINTS,
};
use crate::util::derive_seed;
use crate::worldsim::{observe, plan_step, render_depth, CameraIntrinsics, Pose, WorldError};

/// Fractions of the step budget at which success curves are sampled.
pub const BUDGETS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
const MAX_RESAMPLES: usize = 8;
/// A waypoint closer than this (position, metres) to a visited pose with a
/// similar heading counts as a revisit.
const REVISIT_DIST_M: f64 = 0.25;
const REVISIT_YAW_RAD: f64 = 0.5;
/// Frontiers within this radius of a target the agent already reached are
/// skipped while other frontiers remain.
const REACHED_RADIUS_M: f64 = 0.5;

fn is_revisit(next: &Pose, visited: &[Pose]) -> bool {
    visited.iter().any(|p| {
        let dyaw = (next.yaw_rad - p.yaw_rad + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
            - std::f64::consts::PI;
        p.distance_to(next.x_m, next.y_m) < REVISIT_DIST_M && dyaw.abs() < REVISIT_YAW_RAD
    })
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("scenario references unknown scene `{0}`")]
    UnknownScene(String),
    #[error("conformal stopping needs a calibration model")]
    MissingModel,
    #[error("HTTP oracle mode needs an endpoint")]
    MissingHttpOracle,
    #[error("split needs {needed} scenarios, dataset has {available}")]
    Split { needed: usize, available: usize },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    SemanticFbe,
    Fbe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingKind {
    #[default]
    Cp,
    Entropy,
    Relevance,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    #[default]
    Synthetic,
    Http,
}

/// Everything that determines an exploration trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreConfig {
    pub policy: Policy,
    pub seed: u64,
    pub weights: SemanticWeights,
    pub oracle_mode: OracleMode,
    pub synthetic: SyntheticOracleConfig,
    pub intrinsics: CameraIntrinsics,
    pub trunc_m: f64,
    pub min_cluster: usize,
    pub num_points: usize,
    /// Frontiers this close to an earlier pose are skipped while others remain.
    pub visited_radius_m: f64,
    /// End the episode at the first step a target is seen (measurement runs).
    pub halt_on_target: bool,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            policy: Policy::SemanticFbe,
            seed: 0,
            weights: SemanticWeights::default(),
            oracle_mode: OracleMode::Synthetic,
            synthetic: SyntheticOracleConfig::default(),
            intrinsics: CameraIntrinsics::default(),
            trunc_m: DEFAULT_TRUNC_M,
            min_cluster: DEFAULT_MIN_CLUSTER,
            num_points: DEFAULT_NUM_POINTS,
            visited_radius_m: 1.5,
            halt_on_target: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingConfig {
    pub kind: StoppingKind,
    pub epsilon: f64,
    pub entropy_thresh: f64,
    pub rel_thresh: f64,
    pub on_empty: OnEmpty,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        StoppingConfig {
            kind: StoppingKind::Cp,
            epsilon: 0.2,
            entropy_thresh: 0.1,
            rel_thresh: 0.4,
            on_empty: OnEmpty::Stop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub config_id: String,
    pub explore: ExploreConfig,
    pub stopping: StoppingConfig,
    pub cal_size: usize,
    pub test_size: usize,
    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            config_id: "default".into(),
            explore: ExploreConfig::default(),
            stopping: StoppingConfig::default(),
            cal_size: 300,
            test_size: 200,
            split_seed: 0,
        }
    }
}

/// A stopping rule ready to apply.
#[derive(Debug, Clone, PartialEq)]
pub enum StopRule {
    Cp { model: CalibrationModel, on_empty: OnEmpty },
    Entropy(f64),
    Relevance(f64),
    None,
}

impl StopRule {
    pub fn from_config(cfg: &StoppingConfig, model: Option<&CalibrationModel>) -> Result<Self, HarnessError> {
        Ok(match cfg.kind {
            StoppingKind::Cp => StopRule::Cp {
                model: model.ok_or(HarnessError::MissingModel)?.clone(),
                on_empty: cfg.on_empty,
            },
            StoppingKind::Entropy => StopRule::Entropy(cfg.entropy_thresh),
            StoppingKind::Relevance => StopRule::Relevance(cfg.rel_thresh),
            StoppingKind::None => StopRule::None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Singleton,
    Empty,
    Entropy,
    Relevance,
    Horizon,
    Aborted,
}

/// Applies a stopping rule step by step.
#[derive(Debug, Clone)]
pub struct StoppingMonitor<'a> {
    rule: &'a StopRule,
    state: PredictionSetState,
    records: Vec<StepRecord>,
    last_set: Option<LabelSet>,
    outcome: Option<(StopReason, AnswerLabel)>,
}

impl<'a> StoppingMonitor<'a> {
    pub fn new(rule: &'a StopRule) -> Self {
        let on_empty = match rule {
            StopRule::Cp { on_empty, .. } => *on_empty,
            _ => OnEmpty::Stop,
        };
        StoppingMonitor {
            rule,
            state: PredictionSetState::new(on_empty),
            records: Vec::new(),
            last_set: None,
            outcome: None,
        }
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn state(&self) -> &PredictionSetState {
        &self.state
    }

    pub fn last_set(&self) -> Option<LabelSet> {
        self.last_set
    }

    /// Feeds one step; returns the stop reason if the rule fires.
    pub fn observe(&mut self, record: StepRecord) -> Result<Option<StopReason>, ConfidenceError> {
        record.validate()?;
        if self.outcome.is_some() {
            return Err(ConfidenceError::Terminal(self.state.status));
        }
        self.records.push(record);
        let outcome = match self.rule {
            StopRule::Cp { model, .. } => {
                let set = prediction_set(&record, model);
                self.last_set = Some(set);
                match self.state.update(set)? {
                    SetStatus::StoppedSingleton => {
                        Some((StopReason::Singleton, self.state.intersection.single().expect("singleton")))
                    }
                    SetStatus::StoppedEmpty => Some((StopReason::Empty, fallback_answer(&self.records)?)),
                    _ => None,
                }
            }
            StopRule::Entropy(th) => {
                stop_entropy(&record, *th)?.then(|| (StopReason::Entropy, argmax_label(&record.answer_dist)))
            }
            StopRule::Relevance(th) => {
                stop_relevance(&record, *th).then(|| (StopReason::Relevance, argmax_label(&record.answer_dist)))
            }
            StopRule::None => None,
        };
        self.outcome = outcome;
        Ok(outcome.map(|(reason, _)| reason))
    }

    /// Final reason and answer; falls back to the most relevant step if the rule never fired.
    pub fn finish(&mut self) -> Result<(StopReason, AnswerLabel), ConfidenceError> {
        if let Some(o) = self.outcome {
            return Ok(o);
        }
        self.state.exhaust();
        Ok((StopReason::Horizon, fallback_answer(&self.records)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u32,
    pub pose: Pose,
    pub prompt_points: Vec<PromptPoint>,
    pub oracle: OracleOutputs,
    pub target_visible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_set: Option<LabelSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intersection: Option<LabelSet>,
    /// Frontier chosen at the end of this step, if the agent moved on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frontier: Option<Frontier>,
}

impl StepLog {
    pub fn record(&self) -> StepRecord {
        StepRecord {
            step: self.step,
            answer_dist: self.oracle.answer_dist,
            relevance: self.oracle.relevance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub scenario_id: String,
    pub config_id: String,
    pub seed: u64,
    pub max_steps: u32,
    pub steps: Vec<StepLog>,
    /// Number of steps consumed.
    pub stop_step: u32,
    pub stop_reason: StopReason,
    pub final_answer: AnswerLabel,
    pub truth: AnswerLabel,
    pub success: bool,
    pub normalized_stop: f64,
    pub first_target_step: Option<u32>,
    pub explored_cells: Vec<usize>,
    pub events: Vec<String>,
}

impl EpisodeLog {
    pub fn records(&self) -> Vec<StepRecord> {
        self.steps.iter().map(StepLog::record).collect()
    }
}

/// Scenes plus scenarios, with scenario ids derived from file position.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: SceneSet,
    pub scenarios: Vec<Scenario>,
}

impl Dataset {
    pub fn new(scenes: Vec<Scene>, scenarios: Vec<Scenario>) -> Self {
        Dataset {
            scenes: scenes.into_iter().map(|s| (s.id.clone(), s)).collect(),
            scenarios,
        }
    }

    pub fn load(scene_dir: &Path, scenario_path: &Path) -> Result<Self, HarnessError> {
        let scenes = load_scene_dir(scene_dir)?;
        let scenarios = load_scenarios(scenario_path, &scenes)?;
        Ok(Dataset { scenes, scenarios })
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn scene(&self, index: usize) -> Result<&Scene, HarnessError> {
        let id = &self.scenarios[index].scene_id;
        self.scenes.get(id).ok_or_else(|| HarnessError::UnknownScene(id.clone()))
    }

    pub fn scenario_id(&self, index: usize) -> String {
        format!("{}#{index:04}", self.scenarios[index].scene_id)
    }
}

fn stream_seed(run_seed: u64, index: usize, stream: &str) -> u64 {
    derive_seed(&[stream.as_bytes(), &run_seed.to_le_bytes(), &(index as u64).to_le_bytes()])
}

/// Free cells reachable from `start` over known-free cells (8-connected, no corner cutting).
fn reachable_free_cells(map: &Map2D, start: [usize; 2]) -> Vec<[usize; 2]> {
    let (nx, ny) = (map.nx(), map.ny());
    let start_i = start[1] * nx + start[0];
    let passable = |x: i64, y: i64| {
        map.in_bounds(x, y)
            && ((y as usize * nx + x as usize) == start_i || map.state(x as usize, y as usize) == CellState::Free)
    };
    let mut seen = vec![false; nx * ny];
    seen[start_i] = true;
    let mut queue = VecDeque::from([start]);
    let mut out = Vec::new();
    while let Some([x, y]) = queue.pop_front() {
        if [x, y] != start {
            out.push([x, y]);
        }
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)] {
            let (cx, cy) = (x as i64 + dx, y as i64 + dy);
            if !passable(cx, cy) || (dx != 0 && dy != 0 && !(passable(x as i64 + dx, y as i64) && passable(x as i64, y as i64 + dy))) {
                continue;
            }
            let i = cy as usize * nx + cx as usize;
            if !seen[i] {
                seen[i] = true;
                queue.push_back([cx as usize, cy as usize]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn next_pose<R: Rng>(
    map: &Map2D,
    scene: &Scene,
    pose: &Pose,
    visited: &[Pose],
    reached: &[[f64; 2]],
    cfg: &ExploreConfig,
    rng: &mut R,
    step: u32,
    events: &mut Vec<String>,
) -> (Pose, Option<Frontier>) {
    let mut frontiers = extract_frontiers(map, cfg.min_cluster);
    let unreached: Vec<Frontier> = frontiers
        .iter()
        .filter(|f| {
            reached
                .iter()
                .all(|r| (f.position_m[0] - r[0]).hypot(f.position_m[1] - r[1]) > REACHED_RADIUS_M)
        })
        .cloned()
        .collect();
    if !unreached.is_empty() {
        frontiers = unreached;
    }
    let fresh: Vec<Frontier> = frontiers
        .iter()
        .filter(|f| {
            visited
                .iter()
                .all(|p| p.distance_to(f.position_m[0], f.position_m[1]) > cfg.visited_radius_m)
        })
        .cloned()
        .collect();
    if !fresh.is_empty() {
        frontiers = fresh;
    }
    let mut log_weights: Vec<f64> = match cfg.policy {
        Policy::SemanticFbe => frontiers.iter().map(|f| log_frontier_weight(map, f, &cfg.weights)).collect(),
        Policy::Fbe => vec![0.0; frontiers.len()],
    };
    for _ in 0..MAX_RESAMPLES {
        let Ok(chosen) = sample_frontier_log(&frontiers, &log_weights, rng) else {
            break;
        };
        let chosen = chosen.clone();
        match plan_step(map, pose, &chosen) {
            Ok(next) if is_revisit(&next, visited) => events.push(format!(
                "step {step}: frontier {:?} leads back to a visited pose; resampling",
                chosen.cell
            )),
            Ok(next) if scene.is_free_position(next.x_m, next.y_m) => return (next, Some(chosen)),
            Ok(next) => events.push(format!(
                "step {step}: waypoint ({:.2}, {:.2}) collides with the scene; resampling",
                next.x_m, next.y_m
            )),
            Err(e) => events.push(format!("step {step}: {e}; resampling")),
        }
        let i = frontiers.iter().position(|f| f.cell == chosen.cell).expect("sampled frontier");
        frontiers.swap_remove(i);
        log_weights.swap_remove(i);
    }
    if let Some(start) = map.cell_of(pose.x_m, pose.y_m) {
        let cells = reachable_free_cells(map, start);
        for _ in 0..MAX_RESAMPLES.min(cells.len()) {
            let cell = cells[rng.random_range(0..cells.len())];
            let angle: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let target = Frontier {
                cell,
                position_m: map.cell_center(cell),
                normal: [angle.cos(), angle.sin()],
                cluster_id: usize::MAX,
            };
            if let Ok(next) = plan_step(map, pose, &target) {
                if scene.is_free_position(next.x_m, next.y_m) && !is_revisit(&next, visited) {
                    events.push(format!("step {step}: no usable frontier; moved to a random free cell"));
                    return (next, None);
                }
            }
        }
    }
    events.push(format!("step {step}: no reachable free cell; rotating in place"));
    (
        Pose::new(pose.x_m, pose.y_m, pose.yaw_rad + std::f64::consts::FRAC_PI_2),
        None,
    )
}

/// Runs one episode under `rule`. `index` identifies the scenario for seeding.
#[allow(clippy::too_many_arguments)]
pub fn run_episode_with_rule(
    dataset: &Dataset,
    index: usize,
    explore: &ExploreConfig,
    rule: &StopRule,
    config_id: &str,
    http: Option<&HttpOracle>,
    snapshot_dir: Option<&Path>,
) -> Result<EpisodeLog, HarnessError> {
    let scene = dataset.scene(index)?;
    let scenario = &dataset.scenarios[index];
    let scenario_id = dataset.scenario_id(index);
    if explore.oracle_mode == OracleMode::Http && http.is_none() {
        return Err(HarnessError::MissingHttpOracle);
    }
    let horizon = scenario.max_steps;
    let intr = &explore.intrinsics;
    let mut planner_rng = ChaCha8Rng::seed_from_u64(stream_seed(explore.seed, index, "planner"));
    let mut oracle_rng = ChaCha8Rng::seed_from_u64(stream_seed(explore.seed, index, "oracle"));
    let mut grid = VoxelGrid::new(scene.cell_size_m);
    let mut map = Map2D::filled(0, 0, scene.cell_size_m, CellState::Unknown);
    let mut monitor = StoppingMonitor::new(rule);
    let mut pose = scenario.start_pose;
    let mut visited = Vec::new();
    let mut reached = Vec::new();
    let mut steps = Vec::new();
    let mut events = Vec::new();
    let mut explored_cells = Vec::new();
    let mut first_target_step = None;
    let mut aborted = false;

    for t in 0..horizon {
        let depth = render_depth(scene, &pose, intr)?;
        grid.integrate(&depth, &pose, intr, explore.trunc_m)?;
        map.update_from(&grid);
        explored_cells.push(map.explored_count());
        let obs = observe(scene, &pose, intr, t)?;
        let target_visible = scenario.target_entity_ids.iter().any(|id| obs.is_visible(id));
        if target_visible && first_target_step.is_none() {
            first_target_step = Some(t);
        }
        let points = sample_prompt_points(&map, &depth, &pose, intr, explore.num_points);
        let outputs = match explore.oracle_mode {
            OracleMode::Synthetic => {
                let positions: Vec<[f64; 2]> = points.iter().map(|p| map.cell_center(p.map_cell)).collect();
                query_synthetic(&explore.synthetic, scenario, scene, &obs, &positions, &mut oracle_rng)
            }
            OracleMode::Http => {
                let letters: Vec<char> = points.iter().map(|p| p.letter).collect();
                let prompts = build_prompts(&scenario.question, &letters);
                let payload = serde_json::json!({ "observation": obs, "prompt_points": points });
                match http.expect("checked above").query(&payload, &prompts) {
                    Ok(o) => o,
                    Err(e) => {
                        events.push(format!("step {t}: oracle failed: {e}"));
                        aborted = true;
                        break;
                    }
                }
            }
        };
        for (p, (lsv, gsv)) in points.iter().zip(outputs.lsv.iter().zip(&outputs.gsv)) {
            let sv = combine_sv(*lsv, *gsv, &explore.weights)?;
            deposit_sv(&mut map, p.map_cell, sv, explore.weights.smoothing_sigma_m);
        }
        if let Some(dir) = snapshot_dir {
            map.write_snapshot(dir, &format!("{}_step{t:03}", scenario_id.replace('#', "_")))?;
        }
        let mut step_log = StepLog {
            step: t,
            pose,
            prompt_points: points,
            oracle: outputs,
            target_visible,
            prediction_set: None,
            intersection: None,
            frontier: None,
        };
        let stop = monitor.observe(step_log.record())?;
        if matches!(rule, StopRule::Cp { .. }) {
            step_log.prediction_set = monitor.last_set();
            step_log.intersection = Some(monitor.state().intersection);
        }
        let halt = stop.is_some() || t + 1 == horizon || (explore.halt_on_target && target_visible);
        if !halt {
            visited.push(pose);
            let (next, frontier) = next_pose(
                &map,
                scene,
                &pose,
                &visited,
                &reached,
                explore,
                &mut planner_rng,
                t,
                &mut events,
            );
            if let Some(f) = &frontier {
                if next.distance_to(f.position_m[0], f.position_m[1]) <= REACHED_RADIUS_M {
                    reached.push(f.position_m);
                }
            }
            step_log.frontier = frontier;
            pose = next;
        }
        steps.push(step_log);
        if halt {
            break;
        }
    }

    let stop_step = steps.len() as u32;
    let (stop_reason, final_answer) = if aborted {
        let answer = if monitor.records().is_empty() {
            AnswerLabel::A
        } else {
            fallback_answer(monitor.records())?
        };
        (StopReason::Aborted, answer)
    } else {
        monitor.finish()?
    };
    Ok(EpisodeLog {
        scenario_id,
        config_id: config_id.to_string(),
        seed: explore.seed,
        max_steps: horizon,
        steps,
        stop_step,
        stop_reason,
        final_answer,
        truth: scenario.answer,
        success: stop_reason != StopReason::Aborted && final_answer == scenario.answer,
        normalized_stop: stop_step as f64 / horizon as f64,
        first_target_step,
        explored_cells,
        events,
    })
}

/// Runs one episode under `config`; `model` is required for conformal stopping.
pub fn run_episode(
    dataset: &Dataset,
    index: usize,
    config: &RunConfig,
    model: Option<&CalibrationModel>,
    http: Option<&HttpOracle>,
) -> Result<EpisodeLog, HarnessError> {
    let rule = StopRule::from_config(&config.stopping, model)?;
    run_episode_with_rule(dataset, index, &config.explore, &rule, &config.config_id, http, None)
}

/// Full-horizon episodes (no stopping) for the given scenario indices, in order.
pub fn run_full_horizon(
    dataset: &Dataset,
    indices: &[usize],
    explore: &ExploreConfig,
    config_id: &str,
    http: Option<&HttpOracle>,
) -> Result<Vec<EpisodeLog>, HarnessError> {
    indices
        .par_iter()
        .map(|&i| run_episode_with_rule(dataset, i, explore, &StopRule::None, config_id, http, None))
        .collect()
}

pub fn calibrate_from_logs(logs: &[EpisodeLog], epsilon: f64) -> Result<CalibrationModel, HarnessError> {
    let episodes: Vec<(Vec<StepRecord>, AnswerLabel)> = logs
        .iter()
        .filter(|l| l.stop_reason != StopReason::Aborted)
        .map(|l| (l.records(), l.truth))
        .collect();
    Ok(calibrate(&episodes, epsilon)?)
}

/// Rolls calibration episodes to their horizon and calibrates on them.
pub fn run_calibration(
    dataset: &Dataset,
    indices: &[usize],
    config: &RunConfig,
    http: Option<&HttpOracle>,
) -> Result<(CalibrationModel, Vec<EpisodeLog>), HarnessError> {
    let logs = run_full_horizon(dataset, indices, &config.explore, &config.config_id, http)?;
    let model = calibrate_from_logs(&logs, config.stopping.epsilon)?;
    Ok((model, logs))
}

/// Seeded disjoint calibration/test split of scenario indices.
pub fn split_indices(n: usize, cal: usize, test: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), HarnessError> {
    if cal + test > n {
        return Err(HarnessError::Split {
            needed: cal + test,
            available: n,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[b"split", &seed.to_le_bytes()])));
    let test_idx = idx[cal..cal + test].to_vec();
    idx.truncate(cal);
    Ok((idx, test_idx))
}

/// Steps allowed at a budget fraction of the horizon.
pub fn budget_steps(budget: f64, horizon: u32) -> u32 {
    ((budget * horizon as f64).round() as u32).clamp(1, horizon.max(1))
}

/// Outcome of replaying a stopping rule over the first `budget` steps of a log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub stop_step: u32,
    pub reason: StopReason,
    pub answer: AnswerLabel,
    pub success: bool,
    /// Whether the truth lies in the sequence-level set (conformal rules only).
    pub covered: Option<bool>,
}

pub fn replay(log: &EpisodeLog, rule: &StopRule, budget: u32) -> Result<ReplayOutcome, HarnessError> {
    let records = log.records();
    let limit = (budget as usize).min(records.len());
    if limit == 0 {
        return Err(ConfidenceError::EmptyEpisode.into());
    }
    let mut monitor = StoppingMonitor::new(rule);
    let mut stop_step = limit as u32;
    for (i, r) in records[..limit].iter().enumerate() {
        if monitor.observe(*r)?.is_some() {
            stop_step = i as u32 + 1;
            break;
        }
    }
    let (reason, answer) = monitor.finish()?;
    let covered = match rule {
        StopRule::Cp { model, .. } => Some(sequence_set(&records[..limit], model)?.contains(log.truth)),
        _ => None,
    };
    Ok(ReplayOutcome {
        stop_step,
        reason,
        answer,
        success: answer == log.truth,
        covered,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub config_id: String,
    pub budget: f64,
    pub success_rate: f64,
    pub mean_norm_stop: f64,
    pub median_norm_stop: f64,
    pub coverage: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub rows: Vec<MetricsRow>,
    pub models: BTreeMap<String, CalibrationModel>,
    pub test_logs: BTreeMap<String, Vec<EpisodeLog>>,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Metrics rows for one rule over full-horizon test logs, one per budget.
pub fn budget_curve(config_id: &str, logs: &[EpisodeLog], rule: &StopRule) -> Result<Vec<MetricsRow>, HarnessError> {
    let usable: Vec<&EpisodeLog> = logs.iter().filter(|l| l.stop_reason != StopReason::Aborted).collect();
    let mut rows = Vec::new();
    for b in BUDGETS {
        let mut successes = 0usize;
        let mut covered = 0usize;
        let mut norm = Vec::with_capacity(usable.len());
        for log in &usable {
            let out = replay(log, rule, budget_steps(b, log.max_steps))?;
            successes += out.success as usize;
            covered += out.covered.unwrap_or(false) as usize;
            norm.push(out.stop_step as f64 / log.max_steps as f64);
        }
        let n = usable.len();
        let mean = norm.iter().sum::<f64>() / n.max(1) as f64;
        rows.push(MetricsRow {
            config_id: config_id.to_string(),
            budget: b,
            success_rate: successes as f64 / n.max(1) as f64,
            mean_norm_stop: mean,
            median_norm_stop: median(&mut norm),
            coverage: matches!(rule, StopRule::Cp { .. }).then(|| covered as f64 / n.max(1) as f64),
            n,
        });
    }
    Ok(rows)
}

/// Evaluates every config on a shared seeded test split. Configs that share
/// an exploration setup share their rollouts.
pub fn evaluate(dataset: &Dataset, configs: &[RunConfig], http: Option<&HttpOracle>) -> Result<Evaluation, HarnessError> {
    let mut rollouts: BTreeMap<String, BTreeMap<usize, EpisodeLog>> = BTreeMap::new();
    let mut eval = Evaluation::default();
    for cfg in configs {
        let (cal_idx, test_idx) = split_indices(dataset.len(), cal_size_for(cfg), cfg.test_size, cfg.split_seed)?;
        let key = serde_json::to_string(&cfg.explore).expect("config serializes");
        let cache = rollouts.entry(key).or_default();
        let needed: Vec<usize> = cal_idx
            .iter()
            .chain(&test_idx)
            .copied()
            .filter(|i| !cache.contains_key(i))
            .collect();
        let fresh = run_full_horizon(dataset, &needed, &cfg.explore, "rollout", http)?;
        for (i, log) in needed.into_iter().zip(fresh) {
            cache.insert(i, log);
        }
        let model = if cfg.stopping.kind == StoppingKind::Cp {
            let cal_logs: Vec<EpisodeLog> = cal_idx.iter().map(|i| cache[i].clone()).collect();
            let m = calibrate_from_logs(&cal_logs, cfg.stopping.epsilon)?;
            eval.models.insert(cfg.config_id.clone(), m.clone());
            Some(m)
        } else {
            None
        };
        let rule = StopRule::from_config(&cfg.stopping, model.as_ref())?;
        let test_logs: Vec<EpisodeLog> = test_idx
            .iter()
            .map(|i| {
                let mut l = cache[i].clone();
                l.config_id = cfg.config_id.clone();
                l
            })
            .collect();
        eval.rows.extend(budget_curve(&cfg.config_id, &test_logs, &rule)?);
        eval.test_logs.insert(cfg.config_id.clone(), test_logs);
    }
    Ok(eval)
}

fn cal_size_for(cfg: &RunConfig) -> usize {
    // Calibration episodes are still split off so all methods see the same test set.
    cfg.cal_size
}

pub fn write_metrics_csv<W: Write>(writer: W, rows: &[MetricsRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["config_id", "budget", "success_rate", "mean_norm_stop", "coverage", "n"])?;
    for r in rows {
        w.write_record([
            r.config_id.clone(),
            format!("{:.1}", r.budget),
            format!("{:.6}", r.success_rate),
            format!("{:.6}", r.mean_norm_stop),
            r.coverage.map(|c| format!("{c:.6}")).unwrap_or_default(),
            r.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Success rate against mean normalized stop step, one polyline per config.
pub fn metrics_svg(rows: &[MetricsRow]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const PAD: f64 = 60.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let sx = |x: f64| PAD + x * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y * (H - 2.0 * PAD);
    let mut groups: Vec<(&str, Vec<&MetricsRow>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(id, _)| *id == r.config_id) {
            Some((_, v)) => v.push(r),
            None => groups.push((&r.config_id, vec![r])),
        }
    }
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{PAD}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{y0}\" x2=\"{PAD}\" y2=\"{PAD}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{yl}\" text-anchor=\"middle\">normalized time step</text>\n\
         <text x=\"15\" y=\"{cy}\" transform=\"rotate(-90 15 {cy})\" text-anchor=\"middle\">success rate</text>\n",
        y0 = H - PAD,
        x1 = W - PAD,
        cx = W / 2.0,
        yl = H - 15.0,
        cy = H / 2.0,
    );
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.1}</text>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>\n",
            sx(v),
            H - PAD + 16.0,
            PAD - 6.0,
            sy(v) + 4.0
        ));
    }
    for (k, (id, pts)) in groups.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|r| format!("{:.1},{:.1}", sx(r.mean_norm_stop), sy(r.success_rate)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{id}</text>\n",
            path.join(" "),
            W - PAD - 150.0,
            PAD + 16.0 * k as f64
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_logs(path: &Path, logs: &[EpisodeLog]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log).expect("log serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_error(path, e))
}

pub fn read_logs(path: &Path) -> Result<Vec<EpisodeLog>, HarnessError> {
    let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
    let mut logs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_error(path, e))?;
        if !line.trim().is_empty() {
            logs.push(serde_json::from_str(&line).map_err(|e| io_error(path, e))?);
        }
    }
    Ok(logs)
}

/// Dataset lint: problems that loading alone does not catch.
pub fn lint_dataset(dataset: &Dataset) -> Vec<String> {
    let mut issues = Vec::new();
    for (i, s) in dataset.scenarios.iter().enumerate() {
        let id = dataset.scenario_id(i);
        let Ok(scene) = dataset.scene(i) else {
            issues.push(format!("{id}: unknown scene"));
            continue;
        };
        if s.question.choice(s.answer) == PADDING_CHOICE {
            issues.push(format!("{id}: answer is a padding choice"));
        }
        if s.target_entity_ids.is_empty() {
            issues.push(format!("{id}: no target entities"));
        }
        let Some(start) = scene.cell_of(s.start_pose.x_m, s.start_pose.y_m) else {
            issues.push(format!("{id}: start pose outside scene"));
            continue;
        };
        let reach = scene.reachable_from(start);
        for t in &s.target_entity_ids {
            let Some(e) = scene.entity(t) else {
                issues.push(format!("{id}: unknown target `{t}`"));
                continue;
            };
            let ok = scene
                .cell_of(e.position_m[0], e.position_m[1])
                .is_some_and(|[x, y]| reach[y * scene.dims[0] + x]);
            if !ok {
                issues.push(format!("{id}: target `{t}` unreachable from start"));
            }
        }
    }
    issues
}
