//! The semantic oracle: prompt construction, a synthetic oracle and an HTTP client.
//!
//! Each step asks four things of the oracle: an answer distribution over the
//! four choices, a relevance score for the current view, a local semantic
//! value for each prompt point and a global semantic value for the view.

use std::time::Duration;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{AnswerLabel, Question, Scenario, Scene};
use crate::util::{derive_seed, logistic, logit, softmax};
use crate::worldsim::SemanticObservation;

pub const PROMPT_VERSION: &str = "v1";
pub const ORACLE_URL_ENV: &str = "EQA_ORACLE_URL";

const ANSWER_TEMPLATE: &str = include_str!("../resources/prompts/v1/answer.txt");
const LSV_TEMPLATE: &str = include_str!("../resources/prompts/v1/lsv.txt");
const GSV_TEMPLATE: &str = include_str!("../resources/prompts/v1/gsv.txt");
const REL_TEMPLATE: &str = include_str!("../resources/prompts/v1/relevance.txt");

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("yes/no confidences are both zero")]
    ZeroConfidence,
    #[error("`{0}` probabilities sum to zero")]
    ZeroMass(&'static str),
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP status {status} after {attempts} attempts")]
    Status { status: u16, attempts: u32 },
    #[error("malformed oracle response: {0}")]
    Malformed(String),
    #[error("observation payload is {size} bytes, limit {limit}")]
    PayloadTooLarge { size: usize, limit: usize },
    #[error("{ORACLE_URL_ENV} is not set")]
    MissingEndpoint,
    #[error("invalid oracle output: {0}")]
    InvalidOutput(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub version: String,
    pub answer_prompt: String,
    /// Absent when no prompt points were offered.
    pub lsv_prompt: Option<String>,
    pub lsv_options: Vec<String>,
    pub gsv_prompt: String,
    pub rel_prompt: String,
}

pub fn build_prompts(question: &Question, point_letters: &[char]) -> PromptBundle {
    let choices = AnswerLabel::ALL
        .iter()
        .map(|l| format!("{l}) {}", question.choice(*l)))
        .collect::<Vec<_>>()
        .join("\n");
    let fill = |template: &str| template.replace("{question}", &question.text);
    let lsv_options: Vec<String> = point_letters.iter().map(|c| c.to_string()).collect();
    let lsv_prompt = (!point_letters.is_empty()).then(|| {
        let letters = lsv_options.join(", ");
        LSV_TEMPLATE
            .replace("{letters}", &letters)
            .replace("{question}", &question.text)
    });
    PromptBundle {
        version: PROMPT_VERSION.to_string(),
        answer_prompt: ANSWER_TEMPLATE
            .replace("{choices}", &choices)
            .replace("{question}", &question.text),
        lsv_prompt,
        lsv_options,
        gsv_prompt: fill(GSV_TEMPLATE),
        rel_prompt: fill(REL_TEMPLATE),
    }
}

/// `p_yes / (p_yes + p_no)`.
pub fn relevance_from_yes_no(p_yes: f64, p_no: f64) -> Result<f64, OracleError> {
    let total = p_yes + p_no;
    if !(total > 0.0) || p_yes < 0.0 || p_no < 0.0 {
        return Err(OracleError::ZeroConfidence);
    }
    Ok(p_yes / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOutputs {
    pub answer_dist: [f64; 4],
    pub relevance: f64,
    pub lsv: Vec<f64>,
    pub gsv: Vec<f64>,
}

impl OracleOutputs {
    pub fn validate(&self) -> Result<(), OracleError> {
        let bad = |msg: String| Err(OracleError::InvalidOutput(msg));
        let sum: f64 = self.answer_dist.iter().sum();
        if self.answer_dist.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return bad(format!("answer_dist {:?} is not a distribution", self.answer_dist));
        }
        if !(0.0..=1.0).contains(&self.relevance) {
            return bad(format!("relevance {} outside [0, 1]", self.relevance));
        }
        if !self.lsv.is_empty() {
            let lsum: f64 = self.lsv.iter().sum();
            if self.lsv.iter().any(|p| !(0.0..=1.0).contains(p)) || (lsum - 1.0).abs() > 1e-6 {
                return bad(format!("lsv {:?} is not a distribution", self.lsv));
            }
        }
        if self.gsv.len() != self.lsv.len() || self.gsv.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return bad(format!("gsv {:?} invalid", self.gsv));
        }
        Ok(())
    }
}

/// Controllable stand-in for a vision-language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticOracleConfig {
    /// Mass on the true label when a target is visible within `answer_range_m`.
    pub p_correct: f64,
    pub answer_range_m: f64,
    /// Seeds each scenario's biased prior used for uninformative views.
    pub bias_seed: u64,
    /// Range of the prior's logit advantage for its favoured label.
    pub bias_strength: (f64, f64),
    pub rel_midpoint_m: f64,
    pub rel_slope: f64,
    /// Relevance of views with no target in sight.
    pub rel_baseline: f64,
    /// Lower end of a per-scenario multiplicative relevance gain drawn from `[rel_gain_min, 1]`.
    pub rel_gain_min: f64,
    /// Informativeness of local semantic values; 0 is uninformative.
    pub beta_lsv: f64,
    pub gsv_midpoint_m: f64,
    pub gsv_slope: f64,
    /// Logit noise on answer prior, relevance and local values.
    pub noise_sd: f64,
    /// Logit noise on global values.
    pub gsv_noise_sd: f64,
}

impl Default for SyntheticOracleConfig {
    fn default() -> Self {
        SyntheticOracleConfig {
            p_correct: 0.9,
            answer_range_m: 3.0,
            bias_seed: 0,
            bias_strength: (1.0, 4.0),
            rel_midpoint_m: 2.5,
            rel_slope: 0.6,
            rel_baseline: 0.1,
            rel_gain_min: 0.5,
            beta_lsv: 1.0,
            gsv_midpoint_m: 4.0,
            gsv_slope: 1.5,
            noise_sd: 0.5,
            gsv_noise_sd: 0.0,
        }
    }
}

impl SyntheticOracleConfig {
    /// Noise-free oracle that is always right when a target is in range.
    pub fn perfect() -> Self {
        SyntheticOracleConfig {
            p_correct: 1.0 - 1e-9,
            rel_baseline: 0.0,
            rel_gain_min: 1.0,
            rel_slope: 0.05,
            rel_midpoint_m: 1e6,
            noise_sd: 0.0,
            gsv_noise_sd: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let bad = |m: &str| Err(OracleError::InvalidOutput(format!("synthetic oracle config: {m}")));
        if !(self.p_correct > 0.0 && self.p_correct < 1.0) {
            return bad("p_correct must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.rel_baseline) || !(0.0..=1.0).contains(&self.rel_gain_min) {
            return bad("rel_baseline and rel_gain_min must be probabilities");
        }
        if self.beta_lsv < 0.0 || self.noise_sd < 0.0 || self.gsv_noise_sd < 0.0 {
            return bad("beta_lsv and noise levels must be >= 0");
        }
        if !(self.rel_slope > 0.0 && self.gsv_slope > 0.0) || self.bias_strength.0 > self.bias_strength.1 {
            return bad("slopes must be > 0 and bias_strength ordered");
        }
        Ok(())
    }
}

/// Per-scenario traits of the synthetic oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBias {
    pub favoured: AnswerLabel,
    pub strength: f64,
    pub rel_gain: f64,
}

pub fn scenario_bias(cfg: &SyntheticOracleConfig, scenario: &Scenario) -> ScenarioBias {
    let seed = derive_seed(&[
        b"bias",
        &cfg.bias_seed.to_le_bytes(),
        scenario.scene_id.as_bytes(),
        scenario.question.text.as_bytes(),
        &scenario.start_pose.x_m.to_le_bytes(),
        &scenario.start_pose.y_m.to_le_bytes(),
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let favoured = AnswerLabel::from_index(rng.random_range(0..4)).expect("index < 4");
    let (lo, hi) = cfg.bias_strength;
    let strength = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let rel_gain = if cfg.rel_gain_min < 1.0 {
        rng.random_range(cfg.rel_gain_min..=1.0)
    } else {
        1.0
    };
    ScenarioBias {
        favoured,
        strength,
        rel_gain,
    }
}

fn noisy(p: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        p
    } else {
        logistic(logit(p) + noise)
    }
}

/// Queries the synthetic oracle. `point_positions` are the world positions
/// of the prompt points. Always consumes the same number of random draws.
pub fn query_synthetic<R: Rng + ?Sized>(
    cfg: &SyntheticOracleConfig,
    scenario: &Scenario,
    scene: &Scene,
    obs: &SemanticObservation,
    point_positions: &[[f64; 2]],
    rng: &mut R,
) -> OracleOutputs {
    let mut normal = |sd: f64| -> f64 { sd * rng.sample::<f64, _>(StandardNormal) };
    let answer_noise: [f64; 4] = std::array::from_fn(|_| normal(cfg.noise_sd));
    let rel_noise = normal(cfg.noise_sd);
    let lsv_noise: [f64; 3] = std::array::from_fn(|_| normal(cfg.noise_sd));
    let gsv_noise: [f64; 3] = std::array::from_fn(|_| normal(cfg.gsv_noise_sd));

    let bias = scenario_bias(cfg, scenario);
    let nearest_visible = obs
        .visible_entities
        .iter()
        .filter(|v| scenario.target_entity_ids.contains(&v.entity_id))
        .map(|v| v.distance_m)
        .fold(f64::INFINITY, f64::min);

    let answer_dist = if nearest_visible <= cfg.answer_range_m {
        let rest = (1.0 - cfg.p_correct) / 3.0;
        let mut d = [rest; 4];
        d[scenario.answer.index()] = cfg.p_correct;
        d
    } else {
        let mut logits = answer_noise;
        logits[bias.favoured.index()] += bias.strength;
        let p = softmax(&logits);
        [p[0], p[1], p[2], p[3]]
    };

    let base_rel = if nearest_visible.is_finite() {
        logistic((cfg.rel_midpoint_m - nearest_visible) / cfg.rel_slope)
    } else {
        cfg.rel_baseline
    };
    let relevance = noisy(base_rel * bias.rel_gain, rel_noise).clamp(0.0, 1.0);

    let targets: Vec<[f64; 2]> = scenario
        .target_entity_ids
        .iter()
        .filter_map(|id| scene.entity(id))
        .map(|e| [e.position_m[0], e.position_m[1]])
        .collect();
    let target_distance = |p: [f64; 2]| {
        targets
            .iter()
            .map(|t| (t[0] - p[0]).hypot(t[1] - p[1]))
            .fold(f64::INFINITY, f64::min)
    };
    let n = point_positions.len().min(3);
    let distances: Vec<f64> = point_positions[..n].iter().map(|p| target_distance(*p)).collect();
    let lsv_logits: Vec<f64> = distances
        .iter()
        .zip(lsv_noise)
        .map(|(d, e)| if d.is_finite() { -cfg.beta_lsv * d + e } else { e })
        .collect();
    let lsv = softmax(&lsv_logits);
    let gsv = distances
        .iter()
        .zip(gsv_noise)
        .map(|(d, e)| {
            let base = if d.is_finite() {
                logistic((cfg.gsv_midpoint_m - d) / cfg.gsv_slope)
            } else {
                0.0
            };
            noisy(base, e)
        })
        .collect();
    OracleOutputs {
        answer_dist,
        relevance,
        lsv,
        gsv,
    }
}

#[derive(Serialize)]
struct OracleRequest<'a> {
    observation_json: &'a serde_json::Value,
    prompt: &'a str,
    options: &'a [String],
}

#[derive(Deserialize)]
struct OracleResponse {
    probs: std::collections::BTreeMap<String, f64>,
}

/// Blocking client for a model endpoint that scores answer options.
#[derive(Debug, Clone)]
pub struct HttpOracle {
    pub endpoint: String,
    pub max_retries: u32,
    pub max_payload_bytes: usize,
    client: reqwest::blocking::Client,
}

impl HttpOracle {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_retries: u32) -> Result<Self, OracleError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| OracleError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(HttpOracle {
            endpoint: endpoint.into(),
            max_retries,
            max_payload_bytes: 8 << 20,
            client,
        })
    }

    pub fn from_env(timeout: Duration, max_retries: u32) -> Result<Self, OracleError> {
        let url = std::env::var(ORACLE_URL_ENV).map_err(|_| OracleError::MissingEndpoint)?;
        Self::new(url, timeout, max_retries)
    }

    fn score(&self, observation: &serde_json::Value, prompt: &str, options: &[String]) -> Result<Vec<f64>, OracleError> {
        let body = OracleRequest {
            observation_json: observation,
            prompt,
            options,
        };
        let mut attempts = 0;
        loop {
            attempts += 1;
            let retryable = match self.client.post(&self.endpoint).json(&body).send() {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: OracleResponse = resp.json().map_err(|e| OracleError::Malformed(e.to_string()))?;
                    return options
                        .iter()
                        .map(|o| {
                            let p = parsed.probs.get(o).copied().unwrap_or(0.0);
                            if p.is_finite() && p >= 0.0 {
                                Ok(p)
                            } else {
                                Err(OracleError::Malformed(format!("score for `{o}` is {p}")))
                            }
                        })
                        .collect();
                }
                Ok(resp) if resp.status().is_server_error() => OracleError::Status {
                    status: resp.status().as_u16(),
                    attempts,
                },
                Ok(resp) => {
                    return Err(OracleError::Status {
                        status: resp.status().as_u16(),
                        attempts,
                    })
                }
                Err(e) => OracleError::Transport {
                    attempts,
                    message: e.to_string(),
                },
            };
            if attempts > self.max_retries {
                return Err(retryable);
            }
            log::warn!("oracle request failed ({retryable}); retrying");
            std::thread::sleep(Duration::from_millis(50 * attempts as u64));
        }
    }

    /// Sends the four prompts concurrently and assembles the outputs.
    pub fn query(&self, observation: &serde_json::Value, prompts: &PromptBundle) -> Result<OracleOutputs, OracleError> {
        let size = observation.to_string().len();
        if size > self.max_payload_bytes {
            return Err(OracleError::PayloadTooLarge {
                size,
                limit: self.max_payload_bytes,
            });
        }
        let letters: Vec<String> = AnswerLabel::ALL.iter().map(|l| l.to_string()).collect();
        let yes_no = vec!["Yes".to_string(), "No".to_string()];
        let (answer, lsv, gsv, rel) = std::thread::scope(|s| {
            let answer = s.spawn(|| self.score(observation, &prompts.answer_prompt, &letters));
            let lsv = s.spawn(|| match &prompts.lsv_prompt {
                Some(p) => self.score(observation, p, &prompts.lsv_options),
                None => Ok(Vec::new()),
            });
            let gsv = s.spawn(|| self.score(observation, &prompts.gsv_prompt, &yes_no));
            let rel = s.spawn(|| self.score(observation, &prompts.rel_prompt, &yes_no));
            (
                answer.join().expect("answer query thread"),
                lsv.join().expect("lsv query thread"),
                gsv.join().expect("gsv query thread"),
                rel.join().expect("relevance query thread"),
            )
        });
        let answer = normalize(answer?, "answer")?;
        let lsv = if prompts.lsv_prompt.is_some() {
            normalize(lsv?, "lsv")?
        } else {
            Vec::new()
        };
        let gsv_raw = gsv?;
        let gsv_value = relevance_from_yes_no(gsv_raw[0], gsv_raw[1])?;
        let rel_raw = rel?;
        let outputs = OracleOutputs {
            answer_dist: [answer[0], answer[1], answer[2], answer[3]],
            relevance: relevance_from_yes_no(rel_raw[0], rel_raw[1])?,
            gsv: vec![gsv_value; lsv.len()],
            lsv,
        };
        outputs.validate()?;
        Ok(outputs)
    }
}

fn normalize(scores: Vec<f64>, what: &'static str) -> Result<Vec<f64>, OracleError> {
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return Err(OracleError::ZeroMass(what));
    }
    Ok(scores.into_iter().map(|s| s / total).collect())
}
