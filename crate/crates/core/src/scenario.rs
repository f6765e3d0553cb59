//! Scenarios, scenes and their file formats.
//!
//! A scenario bundles a scene, a step budget, a start pose, a four-choice
//! question and its ground-truth label. Scenes are axis-aligned block worlds
//! stored as a boolean voxel lattice (true = solid) with a solid floor layer
//! at `z = 0`.
//!
//! File formats (both carry `format_version: 1`):
//!
//! - scenario file: JSON lines, one [`Scenario`] per line;
//! - scene file: one JSON document with a run-length-encoded occupancy lattice.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::worldsim::{Pose, CAMERA_HEIGHT_M};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_CELL_SIZE_M: f64 = 0.1;
pub const FLOOR_HEIGHT_M: f64 = 3.5;
pub const DEFAULT_STEP_FACTOR: f64 = 3.0;
/// Text used for choices added to questions with fewer than four options.
pub const PADDING_CHOICE: &str = "(Do not choose this option)";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("record {record}: parse error: {message}")]
    Parse { record: usize, message: String },
    #[error("record {record}: invalid `{field}`: {reason}")]
    Invalid {
        record: usize,
        field: &'static str,
        reason: String,
    },
    #[error("question needs between 2 and 4 populated choices, got {0}")]
    ChoiceCount(usize),
    #[error("infeasible generator config: {0}")]
    Infeasible(String),
}

fn io_err(path: &Path, source: std::io::Error) -> ScenarioError {
    ScenarioError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnswerLabel {
    A,
    B,
    C,
    D,
}

impl AnswerLabel {
    pub const ALL: [AnswerLabel; 4] = [AnswerLabel::A, AnswerLabel::B, AnswerLabel::C, AnswerLabel::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }
}

impl fmt::Display for AnswerLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionCategory {
    Identification,
    Counting,
    Existence,
    State,
    Location,
    #[default]
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub choices: [String; 4],
    #[serde(default)]
    pub category: QuestionCategory,
}

impl Question {
    /// Builds a question from 2 to 4 choices, padding to exactly four.
    pub fn from_choices(
        text: impl Into<String>,
        choices: Vec<String>,
        category: QuestionCategory,
    ) -> Result<Self, ScenarioError> {
        if choices.len() > 4 {
            return Err(ScenarioError::ChoiceCount(choices.len()));
        }
        let mut slots: [String; 4] = Default::default();
        for (slot, choice) in slots.iter_mut().zip(choices) {
            *slot = choice;
        }
        pad_choices(Question {
            text: text.into(),
            choices: slots,
            category,
        })
    }

    pub fn choice(&self, label: AnswerLabel) -> &str {
        &self.choices[label.index()]
    }
}

/// Fills unpopulated (empty) choice slots with [`PADDING_CHOICE`].
pub fn pad_choices(mut question: Question) -> Result<Question, ScenarioError> {
    let populated = question.choices.iter().filter(|c| !c.trim().is_empty()).count();
    if populated < 2 {
        return Err(ScenarioError::ChoiceCount(populated));
    }
    for choice in question.choices.iter_mut() {
        if choice.trim().is_empty() {
            *choice = PADDING_CHOICE.to_string();
        }
    }
    Ok(question)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub label: String,
    pub position_m: [f64; 3],
    pub room: String,
}

/// Solid/empty voxel lattice of `dims = [nx, ny, nz]` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub cell_size_m: f64,
    pub dims: [usize; 3],
    occupancy: Vec<bool>,
    pub entities: Vec<Entity>,
}

impl Scene {
    /// Empty lattice with a solid floor layer.
    pub fn with_floor(id: impl Into<String>, cell_size_m: f64, nx: usize, ny: usize) -> Self {
        let nz = layers_for_height(FLOOR_HEIGHT_M, cell_size_m);
        let mut scene = Scene {
            id: id.into(),
            cell_size_m,
            dims: [nx, ny, nz],
            occupancy: vec![false; nx * ny * nz],
            entities: Vec::new(),
        };
        scene.fill_box([0, 0, 0], [nx, ny, 1], true);
        scene
    }

    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn in_bounds(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.dims[0]
            && (y as usize) < self.dims[1]
            && (z as usize) < self.dims[2]
    }

    /// Out-of-bounds cells are empty.
    pub fn is_solid(&self, x: i64, y: i64, z: i64) -> bool {
        self.in_bounds(x, y, z) && self.occupancy[self.index(x as usize, y as usize, z as usize)]
    }

    pub fn is_solid_at(&self, p: [f64; 3]) -> bool {
        let l = self.cell_size_m;
        self.is_solid(
            (p[0] / l).floor() as i64,
            (p[1] / l).floor() as i64,
            (p[2] / l).floor() as i64,
        )
    }

    pub fn set_solid(&mut self, x: usize, y: usize, z: usize, solid: bool) {
        let i = self.index(x, y, z);
        self.occupancy[i] = solid;
    }

    /// Sets every cell in the half-open box `[min, max)`.
    pub fn fill_box(&mut self, min: [usize; 3], max: [usize; 3], solid: bool) {
        for z in min[2]..max[2].min(self.dims[2]) {
            for y in min[1]..max[1].min(self.dims[1]) {
                for x in min[0]..max[0].min(self.dims[0]) {
                    self.set_solid(x, y, z, solid);
                }
            }
        }
    }

    /// Number of layers from the floor top up to and including camera height.
    fn clearance_layers(&self) -> usize {
        ((CAMERA_HEIGHT_M / self.cell_size_m).ceil() as usize).min(self.dims[2].saturating_sub(1))
    }

    /// A column is free when nothing is solid above the floor layer up to camera height.
    pub fn is_free_column(&self, x: usize, y: usize) -> bool {
        if x >= self.dims[0] || y >= self.dims[1] {
            return false;
        }
        (1..=self.clearance_layers()).all(|z| !self.occupancy[self.index(x, y, z)])
    }

    /// Free column with a solid floor underneath: somewhere the agent can stand.
    pub fn is_floor_cell(&self, x: usize, y: usize) -> bool {
        self.is_free_column(x, y) && self.occupancy[self.index(x, y, 0)]
    }

    pub fn cell_of(&self, x_m: f64, y_m: f64) -> Option<[usize; 2]> {
        let l = self.cell_size_m;
        let (x, y) = ((x_m / l).floor(), (y_m / l).floor());
        if x < 0.0 || y < 0.0 || x as usize >= self.dims[0] || y as usize >= self.dims[1] {
            return None;
        }
        Some([x as usize, y as usize])
    }

    pub fn cell_center(&self, cell: [usize; 2]) -> [f64; 2] {
        let l = self.cell_size_m;
        [(cell[0] as f64 + 0.5) * l, (cell[1] as f64 + 0.5) * l]
    }

    pub fn is_free_position(&self, x_m: f64, y_m: f64) -> bool {
        self.cell_of(x_m, y_m).is_some_and(|[x, y]| self.is_floor_cell(x, y))
    }

    pub fn free_floor_cells(&self) -> usize {
        (0..self.dims[1])
            .flat_map(|y| (0..self.dims[0]).map(move |x| (x, y)))
            .filter(|&(x, y)| self.is_floor_cell(x, y))
            .count()
    }

    pub fn area_m2(&self) -> f64 {
        self.free_floor_cells() as f64 * self.cell_size_m * self.cell_size_m
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.id == id)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.cell_size_m > 0.0) {
            return Err("cell_size_m must be positive".into());
        }
        if self.occupancy.len() != self.dims.iter().product::<usize>() {
            return Err("occupancy size does not match dims".into());
        }
        for y in 0..self.dims[1] {
            for x in 0..self.dims[0] {
                if self.is_free_column(x, y) && !self.occupancy[self.index(x, y, 0)] {
                    return Err(format!("free column ({x}, {y}) has no floor"));
                }
            }
        }
        for e in &self.entities {
            let [x, y, z] = e.position_m;
            let inside = x >= 0.0 && y >= 0.0 && z >= 0.0 && {
                let l = self.cell_size_m;
                self.in_bounds((x / l) as i64, (y / l) as i64, (z / l) as i64)
            };
            if !inside || self.is_solid_at(e.position_m) || !self.is_free_position(x, y) {
                return Err(format!("entity `{}` is not in free space", e.id));
            }
        }
        if !(self.area_m2() > 0.0) {
            return Err("scene has no free floor".into());
        }
        Ok(())
    }

    /// 4-connected flood fill over floor cells.
    pub fn reachable_from(&self, start: [usize; 2]) -> Vec<bool> {
        let [nx, ny, _] = self.dims;
        let mut seen = vec![false; nx * ny];
        if !self.is_floor_cell(start[0], start[1]) {
            return seen;
        }
        let mut queue = VecDeque::from([start]);
        seen[start[1] * nx + start[0]] = true;
        while let Some([x, y]) = queue.pop_front() {
            let neighbours = [
                (x.wrapping_sub(1), y),
                (x + 1, y),
                (x, y.wrapping_sub(1)),
                (x, y + 1),
            ];
            for (cx, cy) in neighbours {
                if cx < nx && cy < ny && !seen[cy * nx + cx] && self.is_floor_cell(cx, cy) {
                    seen[cy * nx + cx] = true;
                    queue.push_back([cx, cy]);
                }
            }
        }
        seen
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&SceneFile::from(self)).expect("scene serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let file: SceneFile = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            record: e.line(),
            message: e.to_string(),
        })?;
        let scene = file.into_scene()?;
        scene.validate().map_err(|reason| ScenarioError::Invalid {
            record: 1,
            field: "scene",
            reason,
        })?;
        Ok(scene)
    }
}

pub(crate) fn layers_for_height(height_m: f64, cell_size_m: f64) -> usize {
    (height_m / cell_size_m - 1e-9).ceil() as usize
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    format_version: u32,
    id: String,
    cell_size_m: f64,
    dims: [usize; 3],
    /// Alternating run lengths, starting with an empty run, x fastest then y then z.
    occupancy_rle: Vec<u32>,
    entities: Vec<Entity>,
}

impl From<&Scene> for SceneFile {
    fn from(scene: &Scene) -> Self {
        let mut runs = Vec::new();
        let mut current = false;
        let mut count = 0u32;
        for &cell in &scene.occupancy {
            if cell == current {
                count += 1;
            } else {
                runs.push(count);
                current = cell;
                count = 1;
            }
        }
        runs.push(count);
        SceneFile {
            format_version: FORMAT_VERSION,
            id: scene.id.clone(),
            cell_size_m: scene.cell_size_m,
            dims: scene.dims,
            occupancy_rle: runs,
            entities: scene.entities.clone(),
        }
    }
}

impl SceneFile {
    fn into_scene(self) -> Result<Scene, ScenarioError> {
        let invalid = |field, reason: String| ScenarioError::Invalid {
            record: 1,
            field,
            reason,
        };
        if self.format_version != FORMAT_VERSION {
            return Err(invalid(
                "format_version",
                format!("expected {FORMAT_VERSION}, got {}", self.format_version),
            ));
        }
        let total: usize = self.dims.iter().product();
        let mut occupancy = Vec::with_capacity(total);
        let mut value = false;
        for run in &self.occupancy_rle {
            occupancy.extend(std::iter::repeat_n(value, *run as usize));
            value = !value;
        }
        if occupancy.len() != total {
            return Err(invalid(
                "occupancy_rle",
                format!("decodes to {} cells, dims need {total}", occupancy.len()),
            ));
        }
        Ok(Scene {
            id: self.id,
            cell_size_m: self.cell_size_m,
            dims: self.dims,
            occupancy,
            entities: self.entities,
        })
    }
}

pub type SceneSet = BTreeMap<String, Scene>;

pub fn load_scene(path: &Path) -> Result<Scene, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Scene::from_json(&text)
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<(), ScenarioError> {
    fs::write(path, scene.to_json()).map_err(|e| io_err(path, e))
}

/// Loads every `*.json` scene in a directory, keyed by scene id.
pub fn load_scene_dir(dir: &Path) -> Result<SceneSet, ScenarioError> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    let mut scenes = SceneSet::new();
    for path in paths {
        let scene = load_scene(&path)?;
        scenes.insert(scene.id.clone(), scene);
    }
    Ok(scenes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scene_id: String,
    pub max_steps: u32,
    pub start_pose: Pose,
    pub question: Question,
    pub answer: AnswerLabel,
    pub target_entity_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    x_m: f64,
    y_m: f64,
    yaw_rad: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionRecord {
    text: String,
    choices: Vec<String>,
    #[serde(default)]
    category: QuestionCategory,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioRecord {
    format_version: u32,
    scene_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_steps: Option<u32>,
    start_pose: PoseRecord,
    question: QuestionRecord,
    answer: AnswerLabel,
    target_entity_ids: Vec<String>,
}

impl From<&Scenario> for ScenarioRecord {
    fn from(s: &Scenario) -> Self {
        ScenarioRecord {
            format_version: FORMAT_VERSION,
            scene_id: s.scene_id.clone(),
            max_steps: Some(s.max_steps),
            start_pose: PoseRecord {
                x_m: s.start_pose.x_m,
                y_m: s.start_pose.y_m,
                yaw_rad: s.start_pose.yaw_rad,
            },
            question: QuestionRecord {
                text: s.question.text.clone(),
                choices: s.question.choices.to_vec(),
                category: s.question.category,
            },
            answer: s.answer,
            target_entity_ids: s.target_entity_ids.clone(),
        }
    }
}

/// Returns `round(factor * sqrt(area))`, at least 1.
pub fn max_steps(scene: &Scene, factor: f64) -> u32 {
    max_steps_for_area(scene.area_m2(), factor)
}

pub fn max_steps_for_area(area_m2: f64, factor: f64) -> u32 {
    ((factor * area_m2.max(0.0).sqrt()).round() as u32).max(1)
}

fn validate_record(record: ScenarioRecord, index: usize, scenes: &SceneSet) -> Result<Scenario, ScenarioError> {
    let invalid = |field, reason: String| ScenarioError::Invalid {
        record: index,
        field,
        reason,
    };
    if record.format_version != FORMAT_VERSION {
        return Err(invalid(
            "format_version",
            format!("expected {FORMAT_VERSION}, got {}", record.format_version),
        ));
    }
    let scene = scenes
        .get(&record.scene_id)
        .ok_or_else(|| invalid("scene_id", format!("unknown scene `{}`", record.scene_id)))?;
    let max_steps = match record.max_steps {
        Some(0) => return Err(invalid("max_steps", "must be at least 1".into())),
        Some(t) => t,
        None => max_steps(scene, DEFAULT_STEP_FACTOR),
    };
    let PoseRecord { x_m, y_m, yaw_rad } = record.start_pose;
    if !(x_m.is_finite() && y_m.is_finite() && yaw_rad.is_finite()) {
        return Err(invalid("start_pose", "non-finite coordinate".into()));
    }
    if !scene.is_free_position(x_m, y_m) {
        return Err(invalid(
            "start_pose",
            format!("({x_m:.2}, {y_m:.2}) is not in free space"),
        ));
    }
    let question = Question::from_choices(
        record.question.text,
        record.question.choices,
        record.question.category,
    )
    .map_err(|e| invalid("question", e.to_string()))?;
    if question.choice(record.answer) == PADDING_CHOICE {
        return Err(invalid("answer", "points at a padding choice".into()));
    }
    for id in &record.target_entity_ids {
        if scene.entity(id).is_none() {
            return Err(invalid("target_entity_ids", format!("unknown entity `{id}`")));
        }
    }
    Ok(Scenario {
        scene_id: record.scene_id,
        max_steps,
        start_pose: Pose::new(x_m, y_m, yaw_rad),
        question,
        answer: record.answer,
        target_entity_ids: record.target_entity_ids,
    })
}

/// Parses JSON-lines scenario text. Record indices in errors are 1-based line numbers.
pub fn parse_scenarios(text: &str, scenes: &SceneSet) -> Result<Vec<Scenario>, ScenarioError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ScenarioRecord = serde_json::from_str(line).map_err(|e| ScenarioError::Parse {
            record: i + 1,
            message: e.to_string(),
        })?;
        out.push(validate_record(record, i + 1, scenes)?);
    }
    Ok(out)
}

pub fn load_scenarios(path: &Path, scenes: &SceneSet) -> Result<Vec<Scenario>, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_scenarios(&text, scenes)
}

pub fn scenarios_to_jsonl(scenarios: &[Scenario]) -> String {
    let mut out = String::new();
    for s in scenarios {
        out.push_str(&serde_json::to_string(&ScenarioRecord::from(s)).expect("scenario serializes"));
        out.push('\n');
    }
    out
}

pub fn save_scenarios(path: &Path, scenarios: &[Scenario]) -> Result<(), ScenarioError> {
    fs::write(path, scenarios_to_jsonl(scenarios)).map_err(|e| io_err(path, e))
}

/// Settings for the block-world generator. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub rooms: (u32, u32),
    pub extent_x_m: (f64, f64),
    pub extent_y_m: (f64, f64),
    pub entities: (u32, u32),
    pub questions_per_scene: u32,
    pub cell_size_m: f64,
    pub wall_thickness_cells: usize,
    pub door_width_m: f64,
    pub door_height_m: f64,
    pub min_room_m: f64,
    pub step_factor: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            rooms: (3, 5),
            extent_x_m: (8.0, 12.0),
            extent_y_m: (6.0, 10.0),
            entities: (5, 9),
            questions_per_scene: 5,
            cell_size_m: DEFAULT_CELL_SIZE_M,
            wall_thickness_cells: 2,
            door_width_m: 1.0,
            door_height_m: 2.1,
            min_room_m: 2.4,
            step_factor: DEFAULT_STEP_FACTOR,
        }
    }
}

const ROOM_NAMES: [&str; 10] = [
    "kitchen",
    "living room",
    "bedroom",
    "bathroom",
    "office",
    "dining room",
    "hallway",
    "storage room",
    "laundry room",
    "nursery",
];

const OBJECT_LABELS: [&str; 14] = [
    "stove", "sofa", "towel", "suitcase", "lamp", "plant", "laptop", "backpack", "mug", "chair",
    "television", "clock", "basket", "guitar",
];

const COLORS: [&str; 6] = ["red", "white", "black", "gray", "blue", "green"];
const STATES: [(&str, &str); 3] = [("on", "off"), ("open", "closed"), ("plugged in", "unplugged")];

#[derive(Debug, Clone, Copy)]
struct Room {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

/// A wall that splits a parent room, with its door interval along the wall.
#[derive(Debug, Clone, Copy)]
struct Door {
    vertical: bool,
    wall_start: usize,
    wall_end: usize,
    from: usize,
    to: usize,
}

fn uniform_usize(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn uniform_f64(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 <= range.0 {
        range.0
    } else {
        rng.random_range(range.0..=range.1)
    }
}

/// Generates a scene and its scenarios. Deterministic in `(seed, config)`.
pub fn generate_scene(seed: u64, config: &GeneratorConfig) -> Result<(Scene, Vec<Scenario>), ScenarioError> {
    let infeasible = |msg: String| ScenarioError::Infeasible(msg);
    if config.rooms.0 == 0 || config.rooms.0 > config.rooms.1 {
        return Err(infeasible(format!("bad room range {:?}", config.rooms)));
    }
    if config.entities.0 == 0 || config.entities.0 > config.entities.1 {
        return Err(infeasible(format!("bad entity range {:?}", config.entities)));
    }
    if config.rooms.1 as usize > ROOM_NAMES.len() {
        return Err(infeasible(format!("at most {} rooms supported", ROOM_NAMES.len())));
    }
    let l = config.cell_size_m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nx = (uniform_f64(&mut rng, config.extent_x_m) / l).round() as usize;
    let ny = (uniform_f64(&mut rng, config.extent_y_m) / l).round() as usize;
    let t = config.wall_thickness_cells;
    let min_room = (config.min_room_m / l).ceil() as usize;
    let door = (config.door_width_m / l).round() as usize;
    if nx < 2 * t + min_room || ny < 2 * t + min_room || min_room < door + 2 {
        return Err(infeasible(format!("extent {nx}x{ny} cells too small")));
    }

    let mut scene = Scene::with_floor(format!("scene_{seed:06}"), l, nx, ny);
    let nz = scene.dims[2];
    scene.fill_box([0, 0, 1], [t, ny, nz], true);
    scene.fill_box([nx - t, 0, 1], [nx, ny, nz], true);
    scene.fill_box([0, 0, 1], [nx, t, nz], true);
    scene.fill_box([0, ny - t, 1], [nx, ny, nz], true);

    let room_target = uniform_usize(&mut rng, config.rooms.0 as usize, config.rooms.1 as usize);
    let mut rooms = vec![Room {
        x0: t,
        y0: t,
        x1: nx - t,
        y1: ny - t,
    }];
    let mut doors: Vec<Door> = Vec::new();
    let door_top = layers_for_height(config.door_height_m, l).min(nz);
    while rooms.len() < room_target {
        let splittable = |r: &Room| (r.x1 - r.x0).max(r.y1 - r.y0) >= 2 * min_room + t;
        let Some((pick, _)) = rooms
            .iter()
            .enumerate()
            .filter(|(_, r)| splittable(r))
            .max_by_key(|(i, r)| ((r.x1 - r.x0) * (r.y1 - r.y0), std::cmp::Reverse(*i)))
        else {
            if rooms.len() >= config.rooms.0 as usize {
                break;
            }
            return Err(infeasible(format!(
                "cannot fit {room_target} rooms of at least {} m in {nx}x{ny} cells",
                config.min_room_m
            )));
        };
        let room = rooms.swap_remove(pick);
        let (w, h) = (room.x1 - room.x0, room.y1 - room.y0);
        let vertical = if w >= 2 * min_room + t && h >= 2 * min_room + t {
            if w == h {
                rng.random_bool(0.5)
            } else {
                w > h
            }
        } else {
            w >= 2 * min_room + t
        };
        let (lo, hi) = if vertical { (room.x0, room.x1) } else { (room.y0, room.y1) };
        let (span_lo, span_hi) = if vertical { (room.y0, room.y1) } else { (room.x0, room.x1) };
        // Keep the new wall clear of door openings in the walls it abuts.
        let mut pos = uniform_usize(&mut rng, lo + min_room, hi - min_room - t);
        for _ in 0..32 {
            let blocks_door = doors.iter().any(|d| {
                d.vertical != vertical
                    && (d.wall_end == span_lo || d.wall_start == span_hi)
                    && pos < d.to + 1
                    && d.from < pos + t + 1
            });
            if !blocks_door {
                break;
            }
            pos = uniform_usize(&mut rng, lo + min_room, hi - min_room - t);
        }
        let door_from = uniform_usize(&mut rng, span_lo + 1, span_hi - door - 1);
        if vertical {
            scene.fill_box([pos, room.y0, 1], [pos + t, room.y1, nz], true);
            scene.fill_box([pos, door_from, 1], [pos + t, door_from + door, door_top], false);
            rooms.push(Room { x1: pos, ..room });
            rooms.push(Room { x0: pos + t, ..room });
        } else {
            scene.fill_box([room.x0, pos, 1], [room.x1, pos + t, nz], true);
            scene.fill_box([door_from, pos, 1], [door_from + door, pos + t, door_top], false);
            rooms.push(Room { y1: pos, ..room });
            rooms.push(Room { y0: pos + t, ..room });
        }
        doors.push(Door {
            vertical,
            wall_start: pos,
            wall_end: pos + t,
            from: door_from,
            to: door_from + door,
        });
    }
    rooms.sort_by_key(|r| (r.y0, r.x0));

    let mut names: Vec<&str> = ROOM_NAMES.to_vec();
    names.shuffle(&mut rng);
    let room_names: Vec<String> = names[..rooms.len()].iter().map(|s| s.to_string()).collect();

    let margin = (0.4 / l).ceil() as usize;
    let entity_count = uniform_usize(&mut rng, config.entities.0 as usize, config.entities.1 as usize);
    for k in 0..entity_count {
        let ri = rng.random_range(0..rooms.len());
        let r = rooms[ri];
        let cx = uniform_usize(&mut rng, r.x0 + margin, r.x1 - margin - 1);
        let cy = uniform_usize(&mut rng, r.y0 + margin, r.y1 - margin - 1);
        let [x, y] = scene.cell_center([cx, cy]);
        let z = rng.random_range(0.4..1.2);
        scene.entities.push(Entity {
            id: format!("e{k}"),
            label: OBJECT_LABELS.choose(&mut rng).expect("labels").to_string(),
            position_m: [x, y, z],
            room: room_names[ri].clone(),
        });
    }
    scene
        .validate()
        .map_err(|e| infeasible(format!("generated scene invalid: {e}")))?;

    let start_cells = clear_floor_cells(&scene, (0.3 / l).ceil() as i64);
    if start_cells.is_empty() {
        return Err(infeasible("no start cell with clearance".into()));
    }
    let steps = max_steps(&scene, config.step_factor);
    let mut scenarios = Vec::new();
    for _ in 0..config.questions_per_scene {
        let (question, answer, targets) = make_question(&mut rng, &scene, &room_names)?;
        let mut start = None;
        for _ in 0..64 {
            let cell = *start_cells.choose(&mut rng).expect("non-empty");
            let reach = scene.reachable_from(cell);
            let ok = targets.iter().all(|id| {
                let e = scene.entity(id).expect("target exists");
                scene
                    .cell_of(e.position_m[0], e.position_m[1])
                    .is_some_and(|[x, y]| reach[y * nx + x])
            });
            if ok {
                start = Some(cell);
                break;
            }
        }
        let cell = start.ok_or_else(|| infeasible("targets unreachable from sampled starts".into()))?;
        let [x, y] = scene.cell_center(cell);
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        scenarios.push(Scenario {
            scene_id: scene.id.clone(),
            max_steps: steps,
            start_pose: Pose::new(x, y, yaw),
            question,
            answer,
            target_entity_ids: targets,
        });
    }
    Ok((scene, scenarios))
}

/// Floor cells whose whole `radius`-cell square neighbourhood is floor.
fn clear_floor_cells(scene: &Scene, radius: i64) -> Vec<[usize; 2]> {
    let [nx, ny, _] = scene.dims;
    let mut out = Vec::new();
    for y in 0..ny {
        for x in 0..nx {
            let clear = (-radius..=radius).all(|dy| {
                (-radius..=radius).all(|dx| {
                    let (cx, cy) = (x as i64 + dx, y as i64 + dy);
                    cx >= 0 && cy >= 0 && scene.is_floor_cell(cx as usize, cy as usize)
                })
            });
            if clear {
                out.push([x, y]);
            }
        }
    }
    out
}

fn shuffled_with_answer(rng: &mut ChaCha8Rng, mut choices: Vec<String>, correct: &str) -> (Vec<String>, AnswerLabel) {
    choices.shuffle(rng);
    let idx = choices.iter().position(|c| c == correct).expect("correct choice present");
    (choices, AnswerLabel::from_index(idx).expect("at most four choices"))
}

fn make_question(
    rng: &mut ChaCha8Rng,
    scene: &Scene,
    room_names: &[String],
) -> Result<(Question, AnswerLabel, Vec<String>), ScenarioError> {
    let entity = scene.entities.choose(rng).expect("scene has entities").clone();
    let categories = [
        QuestionCategory::Identification,
        QuestionCategory::Counting,
        QuestionCategory::Existence,
        QuestionCategory::State,
        QuestionCategory::Location,
    ];
    let mut category = *categories.choose(rng).expect("categories");
    let same: Vec<String> = scene
        .entities
        .iter()
        .filter(|e| e.label == entity.label && e.room == entity.room)
        .map(|e| e.id.clone())
        .collect();
    if category == QuestionCategory::Counting && same.len() > 4 {
        category = QuestionCategory::Location;
    }
    let label_elsewhere = scene
        .entities
        .iter()
        .any(|e| e.label == entity.label && e.room != entity.room);
    if category == QuestionCategory::Location && (room_names.len() < 2 || label_elsewhere) {
        category = QuestionCategory::Identification;
    }
    let yes_no = || vec!["Yes".to_string(), "No".to_string()];
    let (text, choices, answer, targets) = match category {
        QuestionCategory::Identification => {
            let mut palette: Vec<&str> = COLORS.to_vec();
            palette.shuffle(rng);
            let options: Vec<String> = palette[..4].iter().map(|s| s.to_string()).collect();
            let correct = options[rng.random_range(0..4)].clone();
            let (choices, answer) = shuffled_with_answer(rng, options, &correct);
            (
                format!("What color is the {} in the {}?", entity.label, entity.room),
                choices,
                answer,
                vec![entity.id.clone()],
            )
        }
        QuestionCategory::Counting => {
            let choices = ["One", "Two", "Three", "Four"].map(String::from).to_vec();
            let answer = AnswerLabel::from_index(same.len() - 1).expect("count in 1..=4");
            (
                format!("How many {}s are there in the {}?", entity.label, entity.room),
                choices,
                answer,
                same,
            )
        }
        QuestionCategory::Existence => {
            let ask_other = room_names.len() > 1 && rng.random_bool(0.5);
            let room = if ask_other {
                room_names
                    .iter()
                    .filter(|r| **r != entity.room)
                    .collect::<Vec<_>>()
                    .choose(rng)
                    .map(|r| r.to_string())
                    .expect("another room")
            } else {
                entity.room.clone()
            };
            let answer = if room == entity.room { AnswerLabel::A } else { AnswerLabel::B };
            (
                format!("Is the {} in the {}?", entity.label, room),
                yes_no(),
                answer,
                vec![entity.id.clone()],
            )
        }
        QuestionCategory::State => {
            let (state, _) = *STATES.choose(rng).expect("states");
            let answer = if rng.random_bool(0.5) { AnswerLabel::A } else { AnswerLabel::B };
            (
                format!("Is the {} in the {} {}?", entity.label, entity.room, state),
                yes_no(),
                answer,
                vec![entity.id.clone()],
            )
        }
        QuestionCategory::Location | QuestionCategory::Other => {
            let mut options: Vec<String> = room_names.iter().filter(|r| **r != entity.room).cloned().collect();
            options.shuffle(rng);
            options.truncate(3);
            options.push(entity.room.clone());
            let (choices, answer) = shuffled_with_answer(rng, options, &entity.room);
            (
                format!("Where is the {}?", entity.label),
                choices,
                answer,
                vec![entity.id.clone()],
            )
        }
    };
    let question = Question::from_choices(text, choices, category)?;
    Ok((question, answer, targets))
}

/// Generates `n_scenes` scenes with seeds derived from `seed`.
pub fn generate_dataset(
    seed: u64,
    n_scenes: usize,
    config: &GeneratorConfig,
) -> Result<(Vec<Scene>, Vec<Scenario>), ScenarioError> {
    let mut scenes = Vec::with_capacity(n_scenes);
    let mut scenarios = Vec::new();
    for k in 0..n_scenes {
        let (scene, mut s) = generate_scene(seed.wrapping_mul(1_000_003).wrapping_add(k as u64), config)?;
        scenes.push(scene);
        scenarios.append(&mut s);
    }
    Ok((scenes, scenarios))
}
