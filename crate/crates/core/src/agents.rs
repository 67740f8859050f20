//! Synthetic participants that combine their own estimate with the AI's by
//! precision weighting, learning the AI's error from training feedback.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{FeatureSchema, GRADE_MAX};
use crate::protocol::{
    CreateSession, Demographics, Education, ExplanationQuality, Gender, Page, Phase,
    StepDescriptor, Submission,
};
use crate::rng::{mix, seeded};
use crate::service::{ExperimentService, ManualClock, Outcome, ServiceError};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("simulation stalled in session {token} at {step}")]
    Stalled { token: String, step: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplanationGains {
    pub good: f64,
    pub poor: f64,
    pub none: f64,
}

impl Default for ExplanationGains {
    fn default() -> Self {
        Self {
            good: 1.3,
            poor: 1.15,
            none: 1.0,
        }
    }
}

impl ExplanationGains {
    pub fn get(&self, condition: ExplanationQuality) -> f64 {
        match condition {
            ExplanationQuality::Good => self.good,
            ExplanationQuality::Poor => self.poor,
            ExplanationQuality::None => self.none,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub skill_sigma: f64,
    pub bias: f64,
    pub prior_ai_sigma: f64,
    pub trust_learning: bool,
    pub explanation_gain: ExplanationGains,
    /// Confidence range is first prediction +- `range_width_c * skill_sigma`.
    pub range_width_c: f64,
    pub n_ticked: usize,
    /// Simulated response times are uniform in this range.
    pub response_time_ms: (u64, u64),
    pub seed: u64,
}

impl AgentParams {
    pub fn validate(&self) -> Result<(), AgentError> {
        let g = self.explanation_gain;
        if !(self.skill_sigma > 0.0) || !(self.prior_ai_sigma > 0.0) {
            return Err(AgentError::Params("sigmas must be positive".into()));
        }
        if !(g.good > 0.0 && g.poor > 0.0 && g.none > 0.0 && self.range_width_c > 0.0) {
            return Err(AgentError::Params("multipliers must be positive".into()));
        }
        if self.response_time_ms.0 > self.response_time_ms.1 {
            return Err(AgentError::Params("response time range is reversed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstResponse {
    pub prediction: f64,
    pub ticked_features: Vec<String>,
    pub range_lo: f64,
    pub range_hi: f64,
}

fn clamp_grade(x: f64) -> f64 {
    x.clamp(0.0, f64::from(GRADE_MAX))
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub params: AgentParams,
    /// Welford accumulators over observed AI errors (ai - truth).
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
    pub trial_counter: u64,
    rng: ChaCha8Rng,
}

impl AgentState {
    pub fn new(params: AgentParams) -> Result<AgentState, AgentError> {
        params.validate()?;
        Ok(AgentState {
            params,
            n: 0,
            mean: 0.0,
            m2: 0.0,
            trial_counter: 0,
            rng: seeded(params.seed, 0xA6),
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn first_response(&mut self, truth: f64, schema: &FeatureSchema) -> FirstResponse {
        let p = self.params;
        let eps = Normal::new(0.0, p.skill_sigma)
            .expect("positive sigma")
            .sample(&mut self.rng);
        let prediction = clamp_grade(truth + p.bias + eps);
        let half = p.range_width_c * p.skill_sigma;
        let ticked_features = schema
            .features
            .choose_multiple(&mut self.rng, p.n_ticked.min(schema.len()))
            .map(|f| f.key.clone())
            .collect();
        self.trial_counter += 1;
        FirstResponse {
            prediction,
            ticked_features,
            range_lo: clamp_grade(prediction - half),
            range_hi: clamp_grade(prediction + half),
        }
    }

    /// Training-phase prediction: same generative model, no range.
    pub fn training_prediction(&mut self, truth: f64) -> f64 {
        let p = self.params;
        let eps = Normal::new(0.0, p.skill_sigma)
            .expect("positive sigma")
            .sample(&mut self.rng);
        self.trial_counter += 1;
        clamp_grade(truth + p.bias + eps)
    }

    pub fn observe_training_feedback(&mut self, ai_prediction: f64, truth: f64, phase: Phase) {
        if phase != Phase::Training || !self.params.trust_learning {
            return;
        }
        let e = ai_prediction - truth;
        self.n += 1;
        let delta = e - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (e - self.mean);
    }

    /// Prior blended with the observed mean squared AI error, the prior
    /// counting as one observation.
    pub fn posterior_ai_sigma(&self) -> f64 {
        let prior = self.params.prior_ai_sigma;
        if self.n == 0 {
            return prior;
        }
        let n = self.n as f64;
        let mse = self.m2 / n + self.mean * self.mean;
        ((prior * prior + n * mse) / (1.0 + n)).sqrt()
    }

    pub fn second_response(
        &self,
        first: f64,
        ai_prediction: f64,
        condition: ExplanationQuality,
    ) -> f64 {
        combine(
            first,
            ai_prediction,
            self.params.skill_sigma,
            self.posterior_ai_sigma(),
            self.params.explanation_gain.get(condition),
        )
    }
}

/// Precision-weighted average, clamped to the grade scale.
pub fn combine(first: f64, ai: f64, self_sigma: f64, ai_sigma: f64, gain: f64) -> f64 {
    let tau_self = 1.0 / (self_sigma * self_sigma);
    let tau_ai = gain / (ai_sigma * ai_sigma);
    let total = tau_self + tau_ai;
    if total == 0.0 || !total.is_finite() {
        return clamp_grade(if tau_ai.is_infinite() && tau_self.is_finite() {
            ai
        } else {
            first
        });
    }
    clamp_grade((tau_self * first + tau_ai * ai) / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentDistributions {
    pub skill_sigma_min: f64,
    pub skill_sigma_max: f64,
    pub bias_sd: f64,
    pub prior_ai_sigma: f64,
    pub trust_learning: bool,
    pub explanation_gain: ExplanationGains,
    pub range_width_c: f64,
    pub n_ticked: usize,
    pub response_time_ms_min: u64,
    pub response_time_ms_max: u64,
}

impl Default for AgentDistributions {
    fn default() -> Self {
        Self {
            skill_sigma_min: 2.5,
            skill_sigma_max: 5.0,
            bias_sd: 0.5,
            prior_ai_sigma: 5.0,
            trust_learning: true,
            explanation_gain: ExplanationGains::default(),
            range_width_c: 1.0,
            n_ticked: 5,
            response_time_ms_min: 2_000,
            response_time_ms_max: 12_000,
        }
    }
}

impl AgentDistributions {
    pub fn draw(&self, seed: u64, agent_id: u64) -> AgentParams {
        let s = mix(seed, agent_id);
        let mut rng = seeded(s, 0xD1);
        let bias = if self.bias_sd > 0.0 {
            Normal::new(0.0, self.bias_sd)
                .expect("bias sd")
                .sample(&mut rng)
        } else {
            0.0
        };
        AgentParams {
            skill_sigma: rng.random_range(self.skill_sigma_min..=self.skill_sigma_max),
            bias,
            prior_ai_sigma: self.prior_ai_sigma,
            trust_learning: self.trust_learning,
            explanation_gain: self.explanation_gain,
            range_width_c: self.range_width_c,
            n_ticked: self.n_ticked,
            response_time_ms: (self.response_time_ms_min, self.response_time_ms_max),
            seed: s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_agents_per_branch: usize,
    pub seed: u64,
    pub agents: AgentDistributions,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_agents_per_branch: 50,
            seed: 2024,
            agents: AgentDistributions::default(),
        }
    }
}

/// Drive one agent through a full session via the service API.
pub fn run_agent(
    service: &ExperimentService,
    clock: &ManualClock,
    params: AgentParams,
) -> Result<String, AgentError> {
    let mut agent = AgentState::new(params)?;
    let genders = [
        Gender::Female,
        Gender::Male,
        Gender::NonBinary,
        Gender::Other,
        Gender::PreferNotToSay,
    ];
    let educations = [
        Education::Secondary,
        Education::SomeCollege,
        Education::Bachelor,
        Education::Master,
    ];
    let rng = agent.rng();
    let request = CreateSession {
        consent: true,
        demographics: Some(Demographics {
            gender: *genders.choose(rng).expect("non-empty"),
            age: rng.random_range(18..=65),
            education: *educations.choose(rng).expect("non-empty"),
        }),
        likert: Some((0..3).map(|_| rng.random_range(1..=5)).collect()),
        synthetic: true,
    };
    let created = service.create_session(&request)?;
    let token = created.token;
    // the harness knows the condition; a human would infer it
    let branch = service.branch_of(&token)?;
    let exp = service.experiment();
    let (rt_lo, rt_hi) = params.response_time_ms;

    for _ in 0..1000 {
        let rt = agent.rng().random_range(rt_lo..=rt_hi);
        clock.advance(rt);
        let step = service.step(&token)?;
        let submission = match &step {
            StepDescriptor::Instructions { page, .. } => Submission::Acknowledge { page: *page },
            StepDescriptor::TrainingTrial {
                trial, stimulus, ..
            } => {
                let truth = f64::from(
                    exp.stimulus(&stimulus.stimulus_id)
                        .map_err(ServiceError::from)?
                        .grade,
                );
                Submission::TrainingPrediction {
                    trial: *trial,
                    prediction: agent.training_prediction(truth),
                    response_time_ms: rt,
                }
            }
            StepDescriptor::FirstResponse {
                trial, stimulus, ..
            } => {
                let truth = f64::from(
                    exp.stimulus(&stimulus.stimulus_id)
                        .map_err(ServiceError::from)?
                        .grade,
                );
                let r = agent.first_response(truth, &exp.schema);
                Submission::FirstResponse {
                    trial: *trial,
                    prediction: r.prediction,
                    ticked_features: r.ticked_features,
                    range_lo: r.range_lo,
                    range_hi: r.range_hi,
                    response_time_ms: rt,
                }
            }
            StepDescriptor::SecondResponse {
                trial,
                first_prediction,
                ai_prediction,
                explanation,
                ..
            } => {
                let condition = match explanation {
                    None => ExplanationQuality::None,
                    Some(_) => branch.test_explanation,
                };
                Submission::SecondResponse {
                    trial: *trial,
                    prediction: agent.second_response(*first_prediction, *ai_prediction, condition),
                    response_time_ms: rt,
                }
            }
            StepDescriptor::ScoreInterstitial { .. } => Submission::Acknowledge {
                page: Page::ScoreInterstitial,
            },
            StepDescriptor::Feedback { .. } => Submission::Finish { comment: None },
            StepDescriptor::Complete { .. } => return Ok(token),
            StepDescriptor::Abandoned => {
                return Err(AgentError::Stalled {
                    token,
                    step: "abandoned".into(),
                })
            }
        };
        if let Outcome::TrainingFeedback {
            truth,
            ai_prediction,
            ..
        } = service.submit(&token, &submission, None)?
        {
            agent.observe_training_feedback(ai_prediction, truth, Phase::Training);
        }
    }
    Err(AgentError::Stalled {
        token,
        step: "step limit".into(),
    })
}

/// Run `12 * n_agents_per_branch` agents sequentially; returns their tokens.
pub fn run_simulation(
    service: &ExperimentService,
    clock: &ManualClock,
    cfg: &SimConfig,
) -> Result<Vec<String>, AgentError> {
    let n = cfg.n_agents_per_branch * 12;
    (0..n as u64)
        .map(|id| run_agent(service, clock, cfg.agents.draw(cfg.seed, id)))
        .collect()
}
