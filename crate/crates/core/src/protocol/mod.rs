//! The experiment state machine.
//!
//! Sessions are event-sourced: `decide` validates a submission against the
//! current state and turns it into an [`Event`]; `Session::apply` folds
//! events into state. Replaying a session's events needs no models or
//! explanations because every derived value is recorded in the event.

mod branch;
mod view;

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use branch::{Branch, BranchCounter, ExplanationQuality, Phase, TrainExplanation};
pub use view::{ExplanationView, FeatureCell, FeatureGroup, StepDescriptor, StimulusView};

use crate::dataset::{FeatureSchema, StudentRecord, GRADE_MAX};
use crate::explainer::{ExplainError, ExplanationCache};
use crate::predictor::{AiQuality, ModelParams, Predict};
use crate::rng::{mix, seeded};
use crate::scoring::{self, ScoreConfig};

pub const N_TRAINING: usize = 30;
/// Practice trial plus the scored trials.
pub const N_TESTING: usize = 31;
pub const LIKERT_ITEMS: usize = 3;
pub const EVENT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        FieldError {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("expected {expected}, got {got}")]
    OutOfOrder { expected: String, got: String },
    #[error("invalid submission: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error("session is {0}")]
    Closed(&'static str),
    #[error("session is not complete")]
    Incomplete,
    #[error("no AI prediction for trial {0} before its first response")]
    NotRevealed(usize),
    #[error("event log: {0}")]
    Replay(String),
    #[error("experiment setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Explain(#[from] ExplainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
    NonBinary,
    Other,
    PreferNotToSay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Education {
    LessThanSecondary,
    Secondary,
    SomeCollege,
    Bachelor,
    Master,
    Doctorate,
    Other,
    PreferNotToSay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub gender: Gender,
    pub age: i64,
    pub education: Education,
}

/// Payload that opens a session: consent, demographics and questionnaire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub consent: bool,
    pub demographics: Option<Demographics>,
    pub likert: Option<Vec<i64>>,
    #[serde(default)]
    pub synthetic: bool,
}

impl CreateSession {
    pub fn validate(&self) -> Result<(Demographics, [u8; LIKERT_ITEMS]), ProtocolError> {
        let mut errs = Vec::new();
        if !self.consent {
            errs.push(FieldError::new("consent", "consent is required"));
        }
        match &self.demographics {
            None => errs.push(FieldError::new("demographics", "missing")),
            Some(d) if !(16..=120).contains(&d.age) => {
                errs.push(FieldError::new("demographics.age", "must be 16-120"))
            }
            _ => {}
        }
        let mut likert = [0u8; LIKERT_ITEMS];
        match &self.likert {
            None => errs.push(FieldError::new("likert", "missing")),
            Some(v) if v.len() != LIKERT_ITEMS => errs.push(FieldError::new(
                "likert",
                format!("expected {LIKERT_ITEMS} answers, got {}", v.len()),
            )),
            Some(v) => {
                for (i, &a) in v.iter().enumerate() {
                    if (1..=5).contains(&a) {
                        likert[i] = a as u8;
                    } else {
                        errs.push(FieldError::new(
                            &format!("likert[{i}]"),
                            format!("{a} is not on the 1-5 scale"),
                        ));
                    }
                }
            }
        }
        if errs.is_empty() {
            Ok((self.demographics.expect("checked"), likert))
        } else {
            Err(ProtocolError::Invalid(errs))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Page {
    TrainInstructions,
    TestInstructions,
    ScoreInterstitial,
}

/// What the client sends, tagged by the step it answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum Submission {
    Acknowledge {
        page: Page,
    },
    TrainingPrediction {
        trial: usize,
        prediction: f64,
        #[serde(default)]
        response_time_ms: u64,
    },
    FirstResponse {
        trial: usize,
        prediction: f64,
        #[serde(default)]
        ticked_features: Vec<String>,
        range_lo: f64,
        range_hi: f64,
        #[serde(default)]
        response_time_ms: u64,
    },
    SecondResponse {
        trial: usize,
        prediction: f64,
        #[serde(default)]
        response_time_ms: u64,
    },
    Finish {
        #[serde(default)]
        comment: Option<String>,
    },
}

impl Submission {
    fn label(&self) -> String {
        match self {
            Submission::Acknowledge { page } => format!("acknowledge {page:?}"),
            Submission::TrainingPrediction { trial, .. } => format!("training prediction {trial}"),
            Submission::FirstResponse { trial, .. } => format!("first response {trial}"),
            Submission::SecondResponse { trial, .. } => format!("second response {trial}"),
            Submission::Finish { .. } => "finish".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum State {
    Consent,
    Demographics,
    TrainInstructions,
    /// Awaiting training trial `trial` (1-based).
    Training {
        trial: usize,
    },
    TestInstructions,
    /// Awaiting the first response; trial 0 is the practice trial.
    TestFirst {
        trial: usize,
    },
    TestSecond {
        trial: usize,
    },
    ScoreInterstitial {
        after_trial: usize,
    },
    Feedback,
    Complete,
    Abandoned,
}

impl State {
    fn expected(&self) -> String {
        match self {
            State::TrainInstructions => "acknowledge TrainInstructions".into(),
            State::Training { trial } => format!("training prediction {trial}"),
            State::TestInstructions => "acknowledge TestInstructions".into(),
            State::TestFirst { trial } => format!("first response {trial}"),
            State::TestSecond { trial } => format!("second response {trial}"),
            State::ScoreInterstitial { .. } => "acknowledge ScoreInterstitial".into(),
            State::Feedback => "finish".into(),
            other => format!("{other:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrial {
    pub trial: usize,
    pub stimulus_id: String,
    pub human_prediction: f64,
    pub truth: f64,
    pub ai_prediction: f64,
    /// Model whose explanation was shown, if any.
    pub explanation_source: Option<AiQuality>,
    pub score: f64,
    pub response_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestingTrial {
    pub trial: usize,
    pub stimulus_id: String,
    pub is_practice: bool,
    pub first_prediction: f64,
    pub ticked_features: Vec<String>,
    pub range_lo: f64,
    pub range_hi: f64,
    pub ai_prediction: f64,
    pub explanation_source: Option<AiQuality>,
    pub second_prediction: Option<f64>,
    pub truth: f64,
    pub score: Option<f64>,
    pub first_rt_ms: u64,
    pub second_rt_ms: Option<u64>,
}

impl TestingTrial {
    pub fn shift(&self) -> Option<f64> {
        self.second_prediction
            .map(|s| (s - self.first_prediction).abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub completion_code: String,
    pub total_score: f64,
    pub bonus_amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        branch: Branch,
        demographics: Demographics,
        likert: [u8; LIKERT_ITEMS],
        synthetic: bool,
        training_order: Vec<String>,
        testing_order: Vec<String>,
    },
    Acknowledged {
        page: Page,
    },
    TrainingAnswered {
        trial: TrainingTrial,
    },
    FirstAnswered {
        trial: usize,
        stimulus_id: String,
        prediction: f64,
        ticked_features: Vec<String>,
        range_lo: f64,
        range_hi: f64,
        response_time_ms: u64,
        truth: f64,
        ai_prediction: f64,
        explanation_source: Option<AiQuality>,
    },
    SecondAnswered {
        trial: usize,
        prediction: f64,
        response_time_ms: u64,
        score: f64,
    },
    Completed {
        record: CompletionRecord,
        comment: Option<String>,
    },
    Abandoned,
}

/// One line of a session's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub v: u32,
    pub seq: u64,
    pub at_ms: u64,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub branch: Branch,
    pub demographics: Demographics,
    pub likert_answers: [u8; LIKERT_ITEMS],
    pub synthetic: bool,
    pub training_order: Vec<String>,
    pub testing_order: Vec<String>,
    pub training_trials: Vec<TrainingTrial>,
    pub testing_trials: Vec<TestingTrial>,
    pub cumulative_score: f64,
    pub state: State,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    pub events: u64,
    pub completion: Option<CompletionRecord>,
    pub comment: Option<String>,
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

pub fn display_prediction(raw: f64) -> f64 {
    round1(raw).clamp(0.0, f64::from(GRADE_MAX))
}

pub fn completion_code(session_id: &str) -> String {
    let d = Sha256::digest(format!("completion:{session_id}").as_bytes());
    format!("TS-{}", hex::encode_upper(&d[..5]))
}

fn check_grade(field: &str, v: f64, errs: &mut Vec<FieldError>) {
    if !v.is_finite() || !(0.0..=f64::from(GRADE_MAX)).contains(&v) {
        errs.push(FieldError::new(field, format!("{v} is outside 0-20")));
    }
}

impl Session {
    pub fn from_created(record: &EventRecord) -> Result<Session, ProtocolError> {
        let Event::Created {
            session_id,
            branch,
            demographics,
            likert,
            synthetic,
            training_order,
            testing_order,
        } = &record.event
        else {
            return Err(ProtocolError::Replay("first event must be created".into()));
        };
        Ok(Session {
            session_id: session_id.clone(),
            branch: *branch,
            demographics: *demographics,
            likert_answers: *likert,
            synthetic: *synthetic,
            training_order: training_order.clone(),
            testing_order: testing_order.clone(),
            training_trials: Vec::new(),
            testing_trials: Vec::new(),
            cumulative_score: 0.0,
            state: State::TrainInstructions,
            created_at_ms: record.at_ms,
            updated_at_ms: record.at_ms,
            events: 1,
            completion: None,
            comment: None,
        })
    }

    pub fn replay(records: &[EventRecord]) -> Result<Session, ProtocolError> {
        let (first, rest) = records
            .split_first()
            .ok_or_else(|| ProtocolError::Replay("empty event log".into()))?;
        let mut s = Session::from_created(first)?;
        for r in rest {
            s.apply(r)?;
        }
        Ok(s)
    }

    pub fn is_complete(&self) -> bool {
        self.state == State::Complete
    }

    pub fn is_open(&self) -> bool {
        !matches!(self.state, State::Complete | State::Abandoned)
    }

    fn next_after_second(trial: usize) -> State {
        if trial == 0 {
            State::TestFirst { trial: 1 }
        } else if trial % 2 == 0 {
            State::ScoreInterstitial { after_trial: trial }
        } else {
            State::TestFirst { trial: trial + 1 }
        }
    }

    /// Fold one event into the session.
    pub fn apply(&mut self, record: &EventRecord) -> Result<(), ProtocolError> {
        if record.seq != self.events {
            return Err(ProtocolError::Replay(format!(
                "expected seq {}, got {}",
                self.events, record.seq
            )));
        }
        let bad = |what: &str| ProtocolError::Replay(format!("{what} in state {:?}", self.state));
        match (&record.event, self.state) {
            (
                Event::Acknowledged {
                    page: Page::TrainInstructions,
                },
                State::TrainInstructions,
            ) => {
                self.state = State::Training { trial: 1 };
            }
            (Event::TrainingAnswered { trial }, State::Training { trial: t })
                if trial.trial == t =>
            {
                self.training_trials.push(trial.clone());
                self.state = if t == N_TRAINING {
                    State::TestInstructions
                } else {
                    State::Training { trial: t + 1 }
                };
            }
            (
                Event::Acknowledged {
                    page: Page::TestInstructions,
                },
                State::TestInstructions,
            ) => {
                self.state = State::TestFirst { trial: 0 };
            }
            (
                Event::FirstAnswered {
                    trial,
                    stimulus_id,
                    prediction,
                    ticked_features,
                    range_lo,
                    range_hi,
                    response_time_ms,
                    truth,
                    ai_prediction,
                    explanation_source,
                },
                State::TestFirst { trial: t },
            ) if *trial == t => {
                self.testing_trials.push(TestingTrial {
                    trial: t,
                    stimulus_id: stimulus_id.clone(),
                    is_practice: t == 0,
                    first_prediction: *prediction,
                    ticked_features: ticked_features.clone(),
                    range_lo: *range_lo,
                    range_hi: *range_hi,
                    ai_prediction: *ai_prediction,
                    explanation_source: *explanation_source,
                    second_prediction: None,
                    truth: *truth,
                    score: None,
                    first_rt_ms: *response_time_ms,
                    second_rt_ms: None,
                });
                self.state = State::TestSecond { trial: t };
            }
            (
                Event::SecondAnswered {
                    trial,
                    prediction,
                    response_time_ms,
                    score,
                },
                State::TestSecond { trial: t },
            ) if *trial == t => {
                let tt = self
                    .testing_trials
                    .last_mut()
                    .ok_or_else(|| bad("second answer"))?;
                tt.second_prediction = Some(*prediction);
                tt.second_rt_ms = Some(*response_time_ms);
                tt.score = Some(*score);
                if t > 0 {
                    self.cumulative_score += score;
                }
                self.state = Session::next_after_second(t);
            }
            (
                Event::Acknowledged {
                    page: Page::ScoreInterstitial,
                },
                State::ScoreInterstitial { after_trial },
            ) => {
                self.state = if after_trial == N_TESTING - 1 {
                    State::Feedback
                } else {
                    State::TestFirst {
                        trial: after_trial + 1,
                    }
                };
            }
            (Event::Completed { record, comment }, State::Feedback) => {
                self.completion = Some(record.clone());
                self.comment = comment.clone();
                self.state = State::Complete;
            }
            (Event::Abandoned, s) if !matches!(s, State::Complete | State::Abandoned) => {
                self.state = State::Abandoned;
            }
            (e, _) => return Err(bad(&format!("{e:?}"))),
        }
        self.events += 1;
        self.updated_at_ms = record.at_ms;
        Ok(())
    }

    /// Validate a submission against the current state and produce the
    /// event it implies.
    pub fn decide(
        &self,
        exp: &Experiment,
        submission: &Submission,
    ) -> Result<Event, ProtocolError> {
        match self.state {
            State::Complete => return Err(ProtocolError::Closed("complete")),
            State::Abandoned => return Err(ProtocolError::Closed("abandoned")),
            _ => {}
        }
        let out_of_order = || ProtocolError::OutOfOrder {
            expected: self.state.expected(),
            got: submission.label(),
        };
        let mut errs = Vec::new();
        let event = match (submission, self.state) {
            (
                Submission::Acknowledge {
                    page: Page::TrainInstructions,
                },
                State::TrainInstructions,
            ) => Event::Acknowledged {
                page: Page::TrainInstructions,
            },
            (
                Submission::Acknowledge {
                    page: Page::TestInstructions,
                },
                State::TestInstructions,
            ) => Event::Acknowledged {
                page: Page::TestInstructions,
            },
            (
                Submission::Acknowledge {
                    page: Page::ScoreInterstitial,
                },
                State::ScoreInterstitial { .. },
            ) => Event::Acknowledged {
                page: Page::ScoreInterstitial,
            },
            (
                Submission::TrainingPrediction {
                    trial,
                    prediction,
                    response_time_ms,
                },
                State::Training { trial: t },
            ) if *trial == t => {
                check_grade("prediction", *prediction, &mut errs);
                if !errs.is_empty() {
                    return Err(ProtocolError::Invalid(errs));
                }
                let prediction = round1(*prediction);
                let stim = exp.stimulus(&self.training_order[t - 1])?;
                let truth = f64::from(stim.grade);
                let explanation =
                    exp.explanations
                        .assign(self.branch, Phase::Training, &stim.id)?;
                Event::TrainingAnswered {
                    trial: TrainingTrial {
                        trial: t,
                        stimulus_id: stim.id.clone(),
                        human_prediction: prediction,
                        truth,
                        ai_prediction: exp.ai_prediction(self.branch.ai_quality, stim)?,
                        explanation_source: explanation.and_then(|e| e.source_model),
                        score: scoring::training_trial_score(prediction, truth, &exp.score),
                        response_time_ms: *response_time_ms,
                    },
                }
            }
            (
                Submission::FirstResponse {
                    trial,
                    prediction,
                    ticked_features,
                    range_lo,
                    range_hi,
                    response_time_ms,
                },
                State::TestFirst { trial: t },
            ) if *trial == t => {
                check_grade("prediction", *prediction, &mut errs);
                check_grade("range_lo", *range_lo, &mut errs);
                check_grade("range_hi", *range_hi, &mut errs);
                let (p, lo, hi) = (round1(*prediction), round1(*range_lo), round1(*range_hi));
                if errs.is_empty() && !(lo <= p && p <= hi) {
                    errs.push(FieldError::new(
                        "range",
                        format!("need lo <= prediction <= hi, got {lo} <= {p} <= {hi}"),
                    ));
                }
                let mut seen = BTreeSet::new();
                for f in ticked_features {
                    if exp.schema.index_of(f).is_none() {
                        errs.push(FieldError::new(
                            "ticked_features",
                            format!("unknown feature {f}"),
                        ));
                    } else if !seen.insert(f.as_str()) {
                        errs.push(FieldError::new(
                            "ticked_features",
                            format!("duplicate feature {f}"),
                        ));
                    }
                }
                if !errs.is_empty() {
                    return Err(ProtocolError::Invalid(errs));
                }
                let stim = exp.stimulus(&self.testing_order[t])?;
                let explanation = exp
                    .explanations
                    .assign(self.branch, Phase::Testing, &stim.id)?;
                Event::FirstAnswered {
                    trial: t,
                    stimulus_id: stim.id.clone(),
                    prediction: p,
                    ticked_features: ticked_features.clone(),
                    range_lo: lo,
                    range_hi: hi,
                    response_time_ms: *response_time_ms,
                    truth: f64::from(stim.grade),
                    ai_prediction: exp.ai_prediction(self.branch.ai_quality, stim)?,
                    explanation_source: explanation.and_then(|e| e.source_model),
                }
            }
            (
                Submission::SecondResponse {
                    trial,
                    prediction,
                    response_time_ms,
                },
                State::TestSecond { trial: t },
            ) if *trial == t => {
                check_grade("prediction", *prediction, &mut errs);
                if !errs.is_empty() {
                    return Err(ProtocolError::Invalid(errs));
                }
                let tt = self
                    .testing_trials
                    .last()
                    .ok_or(ProtocolError::NotRevealed(t))?;
                let score =
                    scoring::test_trial_score(tt.truth, tt.range_lo, tt.range_hi, &exp.score)
                        .map_err(|e| {
                            ProtocolError::Invalid(vec![FieldError::new("range", e.to_string())])
                        })?;
                Event::SecondAnswered {
                    trial: t,
                    prediction: round1(*prediction),
                    response_time_ms: *response_time_ms,
                    score,
                }
            }
            (Submission::Finish { comment }, State::Feedback) => Event::Completed {
                record: self.completion_record(&exp.score),
                comment: comment.clone(),
            },
            _ => return Err(out_of_order()),
        };
        Ok(event)
    }

    pub fn completion_record(&self, cfg: &ScoreConfig) -> CompletionRecord {
        CompletionRecord {
            completion_code: completion_code(&self.session_id),
            total_score: self.cumulative_score,
            bonus_amount: scoring::bonus(self.cumulative_score, cfg),
        }
    }

    /// The record written to the results store; only complete sessions
    /// have one.
    pub fn finalize(&self) -> Result<&CompletionRecord, ProtocolError> {
        match (&self.state, &self.completion) {
            (State::Complete, Some(r)) => Ok(r),
            _ => Err(ProtocolError::Incomplete),
        }
    }

    /// AI prediction and explanation for a testing trial whose first
    /// response is in.
    pub fn reveal_ai<'a>(
        &self,
        exp: &'a Experiment,
        trial: usize,
    ) -> Result<(f64, Option<ExplanationView>), ProtocolError> {
        let tt = self
            .testing_trials
            .iter()
            .find(|t| t.trial == trial)
            .ok_or(ProtocolError::NotRevealed(trial))?;
        let e = exp
            .explanations
            .assign(self.branch, Phase::Testing, &tt.stimulus_id)?;
        Ok((tt.ai_prediction, e.map(ExplanationView::from)))
    }
}

/// Everything a live session needs: stimuli, both models, cached
/// explanations and the score scheme.
pub struct Experiment {
    pub schema: FeatureSchema,
    pub training: Vec<StudentRecord>,
    pub testing: Vec<StudentRecord>,
    pub good: ModelParams,
    pub poor: ModelParams,
    pub explanations: ExplanationCache,
    pub score: ScoreConfig,
    by_id: HashMap<String, usize>,
}

impl Experiment {
    pub fn new(
        schema: FeatureSchema,
        training: Vec<StudentRecord>,
        testing: Vec<StudentRecord>,
        good: ModelParams,
        poor: ModelParams,
        explanations: ExplanationCache,
        score: ScoreConfig,
    ) -> Result<Experiment, ProtocolError> {
        if training.len() != N_TRAINING || testing.len() != N_TESTING {
            return Err(ProtocolError::Setup(format!(
                "need {N_TRAINING} training and {N_TESTING} testing stimuli, got {} and {}",
                training.len(),
                testing.len()
            )));
        }
        score
            .validate()
            .map_err(|e| ProtocolError::Setup(e.to_string()))?;
        let mut by_id = HashMap::new();
        for (i, r) in training.iter().chain(&testing).enumerate() {
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(ProtocolError::Setup(format!(
                    "stimulus {} appears twice",
                    r.id
                )));
            }
            schema
                .encode(r)
                .map_err(|e| ProtocolError::Setup(e.to_string()))?;
        }
        let exp = Experiment {
            schema,
            training,
            testing,
            good,
            poor,
            explanations,
            score,
            by_id,
        };
        for b in Branch::all() {
            for r in &exp.training {
                exp.explanations.assign(b, Phase::Training, &r.id)?;
            }
            for r in &exp.testing {
                exp.explanations.assign(b, Phase::Testing, &r.id)?;
            }
        }
        Ok(exp)
    }

    pub fn stimulus(&self, id: &str) -> Result<&StudentRecord, ProtocolError> {
        self.by_id
            .get(id)
            .map(|&i| {
                if i < N_TRAINING {
                    &self.training[i]
                } else {
                    &self.testing[i - N_TRAINING]
                }
            })
            .ok_or_else(|| ProtocolError::Replay(format!("unknown stimulus {id}")))
    }

    pub fn model(&self, quality: AiQuality) -> &ModelParams {
        match quality {
            AiQuality::Good => &self.good,
            AiQuality::Poor => &self.poor,
        }
    }

    pub fn ai_prediction(
        &self,
        quality: AiQuality,
        stimulus: &StudentRecord,
    ) -> Result<f64, ProtocolError> {
        let x = self
            .schema
            .encode(stimulus)
            .map_err(|e| ProtocolError::Setup(e.to_string()))?;
        Ok(display_prediction(
            self.model(quality).predict(&x.components),
        ))
    }

    /// Per-session stimulus orders. The practice stimulus always comes
    /// first; the rest are shuffled with a seed derived from the session id.
    pub fn stimulus_orders(&self, session_id: &str) -> (Vec<String>, Vec<String>) {
        let d = Sha256::digest(session_id.as_bytes());
        let seed = mix(
            u64::from_le_bytes(d[..8].try_into().expect("8 bytes")),
            0x5717,
        );
        let mut rng = seeded(seed, 0);
        let mut training: Vec<String> = self.training.iter().map(|r| r.id.clone()).collect();
        training.shuffle(&mut rng);
        let mut rest: Vec<String> = self.testing[1..].iter().map(|r| r.id.clone()).collect();
        rest.shuffle(&mut rng);
        let mut testing = vec![self.testing[0].id.clone()];
        testing.extend(rest);
        (training, testing)
    }

    pub fn created_event(
        &self,
        session_id: &str,
        branch: Branch,
        request: &CreateSession,
    ) -> Result<Event, ProtocolError> {
        let (demographics, likert) = request.validate()?;
        let (training_order, testing_order) = self.stimulus_orders(session_id);
        Ok(Event::Created {
            session_id: session_id.to_string(),
            branch,
            demographics,
            likert,
            synthetic: request.synthetic,
            training_order,
            testing_order,
        })
    }
}

#[cfg(test)]
pub(crate) mod testkit {
    use super::*;
    use crate::dataset::{split_and_select, synthetic_students, SplitConfig};
    use crate::explainer::{Background, ExplainerConfig};

    /// Untrained models and a coarse explanation cache; enough to drive the
    /// state machine.
    pub fn experiment() -> Experiment {
        let schema = FeatureSchema::student();
        let recs = synthetic_students(200, 11);
        let split = split_and_select(&recs, &SplitConfig::default()).unwrap();
        let mut good = ModelParams::init(1);
        good.meta.quality = Some(AiQuality::Good);
        let mut poor = ModelParams::init(2);
        poor.meta.quality = Some(AiQuality::Poor);
        let bg = Background::from_records(&schema, &split.model_train).unwrap();
        let cfg = ExplainerConfig {
            n_perturbations: 100,
            ..Default::default()
        };
        let stimuli: Vec<StudentRecord> = split
            .training_stimuli
            .iter()
            .chain(&split.testing_stimuli)
            .cloned()
            .collect();
        let cache = ExplanationCache::build(
            &[
                (AiQuality::Good, &good, "g".into()),
                (AiQuality::Poor, &poor, "p".into()),
            ],
            &stimuli,
            &schema,
            &bg,
            &cfg,
        )
        .unwrap();
        Experiment::new(
            schema,
            split.training_stimuli,
            split.testing_stimuli,
            good,
            poor,
            cache,
            ScoreConfig::default(),
        )
        .unwrap()
    }

    pub fn create_request() -> CreateSession {
        CreateSession {
            consent: true,
            demographics: Some(Demographics {
                gender: Gender::NonBinary,
                age: 30,
                education: Education::Bachelor,
            }),
            likert: Some(vec![3, 4, 5]),
            synthetic: false,
        }
    }
}
