//! Desk-scale embodied question answering: a block-world simulator, TSDF
//! mapping, semantic-value-weighted frontier exploration and a multi-step
//! conformal stopping rule.
//!
//! The modules mirror the pipeline an episode runs through:
//!
//! - [`scenario`]: scenes, scenarios, file formats and the synthetic generator.
//! - [`worldsim`]: depth rendering, entity visibility and the waypoint planner.
//! - [`mapping`]: TSDF voxel fusion and the 2D planning map.
//! - [`frontier`]: frontier extraction.
//! - [`semantic`]: prompt-point sampling, semantic values and frontier weighting.
//! - [`oracle`]: prompts plus synthetic and HTTP semantic oracles.
//! - [`confidence`]: entropy/relevance baselines and conformal prediction sets.
//! - [`harness`]: the episode loop, calibration, evaluation and metrics.

pub mod confidence;
pub mod frontier;
pub mod harness;
pub mod mapping;
pub mod oracle;
pub mod scenario;
pub mod semantic;
pub mod worldsim;

mod util;

pub use confidence::{CalibrationModel, LabelSet, PredictionSetState, StepRecord};
pub use frontier::Frontier;
pub use mapping::{CellState, Map2D, VoxelGrid};
pub use oracle::{OracleOutputs, SyntheticOracleConfig};
pub use scenario::{AnswerLabel, Question, QuestionCategory, Scenario, Scene};
pub use semantic::{PromptPoint, SemanticWeights};
pub use worldsim::{CameraIntrinsics, DepthImage, Pose, SemanticObservation};
