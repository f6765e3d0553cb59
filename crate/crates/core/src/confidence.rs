//! Stopping machinery: entropy and relevance baselines, relevance-weighted
//! confidence, conformal calibration over whole episodes and the running
//! intersection of causal prediction sets.
//!
//! For a step with answer distribution `f` and relevance `rel`, the
//! confidence in label `y` is `rho_y = rel * (f_y - 1)`, in `[-1, 0]`. An
//! episode's confidence is the per-label minimum over its steps, and its
//! nonconformity score is `kappa = 1 - rho_bar_y` for the true label `y`.
//! Calibration picks `q_hat` as the `ceil((N + 1)(1 - eps))`-th smallest
//! score; the step-`t` prediction set keeps the labels with
//! `rho_y >= 1 - q_hat`. Intersecting these sets over time gives exactly the
//! set built from the episode-level minimum.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::AnswerLabel;
use crate::util::hex_digest;

const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ConfidenceError {
    #[error("answer distribution {0:?} is not on the simplex")]
    NotSimplex([f64; 4]),
    #[error("relevance {0} outside [0, 1]")]
    RelevanceRange(f64),
    #[error("episode has no steps")]
    EmptyEpisode,
    #[error("calibration set is empty")]
    EmptyDataset,
    #[error("epsilon {0} outside (0, 1)")]
    Epsilon(f64),
    #[error("prediction-set state already terminal ({0:?})")]
    Terminal(SetStatus),
}

/// Subset of the four answer labels.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(into = "Vec<AnswerLabel>", from = "Vec<AnswerLabel>")]
pub struct LabelSet(u8);

impl LabelSet {
    pub const FULL: LabelSet = LabelSet(0b1111);
    pub const EMPTY: LabelSet = LabelSet(0);

    pub fn contains(self, label: AnswerLabel) -> bool {
        self.0 & (1 << label.index()) != 0
    }

    pub fn insert(&mut self, label: AnswerLabel) {
        self.0 |= 1 << label.index();
    }

    pub fn intersect(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 & other.0)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: LabelSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn single(self) -> Option<AnswerLabel> {
        (self.len() == 1).then(|| AnswerLabel::from_index(self.0.trailing_zeros() as usize).expect("bit < 4"))
    }

    pub fn iter(self) -> impl Iterator<Item = AnswerLabel> {
        AnswerLabel::ALL.into_iter().filter(move |l| self.contains(*l))
    }
}

impl From<Vec<AnswerLabel>> for LabelSet {
    fn from(labels: Vec<AnswerLabel>) -> Self {
        labels.into_iter().collect()
    }
}

impl From<LabelSet> for Vec<AnswerLabel> {
    fn from(set: LabelSet) -> Self {
        set.iter().collect()
    }
}

impl FromIterator<AnswerLabel> for LabelSet {
    fn from_iter<I: IntoIterator<Item = AnswerLabel>>(iter: I) -> Self {
        let mut set = LabelSet::EMPTY;
        for l in iter {
            set.insert(l);
        }
        set
    }
}

impl fmt::Debug for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, l) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{l}")?;
        }
        write!(f, "}}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub answer_dist: [f64; 4],
    pub relevance: f64,
}

impl StepRecord {
    pub fn validate(&self) -> Result<(), ConfidenceError> {
        check_simplex(&self.answer_dist)?;
        if !(0.0..=1.0).contains(&self.relevance) {
            return Err(ConfidenceError::RelevanceRange(self.relevance));
        }
        Ok(())
    }
}

fn check_simplex(dist: &[f64; 4]) -> Result<(), ConfidenceError> {
    let sum: f64 = dist.iter().sum();
    if dist.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(ConfidenceError::NotSimplex(*dist));
    }
    Ok(())
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(dist: &[f64; 4]) -> Result<f64, ConfidenceError> {
    check_simplex(dist)?;
    Ok(dist.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum::<f64>().max(0.0))
}

/// First label with the highest probability.
pub fn argmax_label(dist: &[f64; 4]) -> AnswerLabel {
    let mut best = 0;
    for i in 1..4 {
        if dist[i] > dist[best] {
            best = i;
        }
    }
    AnswerLabel::from_index(best).expect("index < 4")
}

pub fn rho(record: &StepRecord) -> [f64; 4] {
    record.answer_dist.map(|f| record.relevance * (f - 1.0))
}

/// Per-label minimum of `rho` over the episode.
pub fn episode_rho(records: &[StepRecord]) -> Result<[f64; 4], ConfidenceError> {
    let (first, rest) = records.split_first().ok_or(ConfidenceError::EmptyEpisode)?;
    let mut out = rho(first);
    for r in rest {
        let step = rho(r);
        for y in 0..4 {
            out[y] = out[y].min(step[y]);
        }
    }
    Ok(out)
}

pub fn nonconformity(records: &[StepRecord], truth: AnswerLabel) -> Result<f64, ConfidenceError> {
    Ok(1.0 - episode_rho(records)?[truth.index()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub epsilon: f64,
    pub n_cal: usize,
    /// `None` stands for `+inf`: the quantile level exceeded one.
    pub q_hat: Option<f64>,
    pub created_from: String,
}

impl CalibrationModel {
    /// A model with a fixed threshold, for tests and ablations.
    pub fn with_q_hat(q_hat: Option<f64>) -> Self {
        CalibrationModel {
            epsilon: f64::NAN,
            n_cal: 1,
            q_hat,
            created_from: "manual".into(),
        }
    }

    /// Lower bound on `rho` for a label to stay in the set.
    pub fn rho_threshold(&self) -> f64 {
        self.q_hat.map_or(f64::NEG_INFINITY, |q| 1.0 - q)
    }

    pub fn q_hat_value(&self) -> f64 {
        self.q_hat.unwrap_or(f64::INFINITY)
    }
}

/// Rank (1-based) of the conformal quantile, `ceil((n + 1)(1 - eps))`.
pub fn quantile_rank(n: usize, epsilon: f64) -> usize {
    ((n as f64 + 1.0) * (1.0 - epsilon) - 1e-9).ceil().max(1.0) as usize
}

/// Calibrates from precomputed nonconformity scores.
pub fn calibrate_scores(scores: &[f64], epsilon: f64, created_from: String) -> Result<CalibrationModel, ConfidenceError> {
    if scores.is_empty() {
        return Err(ConfidenceError::EmptyDataset);
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ConfidenceError::Epsilon(epsilon));
    }
    let n = scores.len();
    let k = quantile_rank(n, epsilon);
    let q_hat = (k <= n).then(|| {
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted[k - 1]
    });
    Ok(CalibrationModel {
        epsilon,
        n_cal: n,
        q_hat,
        created_from,
    })
}

pub fn calibrate(episodes: &[(Vec<StepRecord>, AnswerLabel)], epsilon: f64) -> Result<CalibrationModel, ConfidenceError> {
    let mut scores = Vec::with_capacity(episodes.len());
    let mut bytes = Vec::new();
    for (records, truth) in episodes {
        for r in records {
            r.validate()?;
            for v in r.answer_dist.iter().chain([&r.relevance]) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes.push(truth.index() as u8);
        scores.push(nonconformity(records, *truth)?);
    }
    calibrate_scores(&scores, epsilon, hex_digest(&bytes))
}

/// Causal prediction set at one step.
pub fn prediction_set(record: &StepRecord, model: &CalibrationModel) -> LabelSet {
    let threshold = model.rho_threshold();
    let r = rho(record);
    AnswerLabel::ALL.into_iter().filter(|l| r[l.index()] >= threshold).collect()
}

/// Sequence-level set built from the episode-level confidence.
pub fn sequence_set(records: &[StepRecord], model: &CalibrationModel) -> Result<LabelSet, ConfidenceError> {
    let threshold = model.rho_threshold();
    let r = episode_rho(records)?;
    Ok(AnswerLabel::ALL.into_iter().filter(|l| r[l.index()] >= threshold).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnEmpty {
    #[default]
    Stop,
    Continue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetStatus {
    Running,
    StoppedSingleton,
    StoppedEmpty,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSetState {
    pub intersection: LabelSet,
    pub per_step_sets: Vec<LabelSet>,
    pub status: SetStatus,
    pub on_empty: OnEmpty,
}

impl PredictionSetState {
    pub fn new(on_empty: OnEmpty) -> Self {
        PredictionSetState {
            intersection: LabelSet::FULL,
            per_step_sets: Vec::new(),
            status: SetStatus::Running,
            on_empty,
        }
    }

    pub fn update(&mut self, step_set: LabelSet) -> Result<SetStatus, ConfidenceError> {
        if self.status != SetStatus::Running {
            return Err(ConfidenceError::Terminal(self.status));
        }
        self.per_step_sets.push(step_set);
        self.intersection = self.intersection.intersect(step_set);
        self.status = match self.intersection.len() {
            1 => SetStatus::StoppedSingleton,
            0 if self.on_empty == OnEmpty::Stop => SetStatus::StoppedEmpty,
            _ => SetStatus::Running,
        };
        Ok(self.status)
    }

    /// Marks a still-running state as having reached the horizon.
    pub fn exhaust(&mut self) {
        if self.status == SetStatus::Running {
            self.status = SetStatus::Exhausted;
        }
    }
}

/// Highest-probability label at the most relevant step (earliest on ties).
pub fn fallback_answer(records: &[StepRecord]) -> Result<AnswerLabel, ConfidenceError> {
    let (first, rest) = records.split_first().ok_or(ConfidenceError::EmptyEpisode)?;
    let mut best = first;
    for r in rest {
        if r.relevance > best.relevance {
            best = r;
        }
    }
    Ok(argmax_label(&best.answer_dist))
}

pub fn stop_entropy(record: &StepRecord, threshold: f64) -> Result<bool, ConfidenceError> {
    Ok(entropy(&record.answer_dist)? < threshold)
}

pub fn stop_relevance(record: &StepRecord, threshold: f64) -> bool {
    record.relevance > threshold
}
