//! What a client renders next. Nothing here carries a truth label before
//! its reveal, or the branch itself.

use serde::{Deserialize, Serialize};

use super::{
    CompletionRecord, Experiment, Page, ProtocolError, Session, State, N_TESTING, N_TRAINING,
};
use crate::dataset::{Category, StudentRecord};
use crate::explainer::{Explanation, ExplanationItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCell {
    pub key: String,
    pub label: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub category: Category,
    pub features: Vec<FeatureCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusView {
    pub stimulus_id: String,
    pub groups: Vec<FeatureGroup>,
}

impl StimulusView {
    pub fn new(exp: &Experiment, record: &StudentRecord) -> StimulusView {
        let groups = Category::ALL
            .iter()
            .map(|&category| FeatureGroup {
                category,
                features: exp
                    .schema
                    .features
                    .iter()
                    .zip(&record.values)
                    .filter(|(f, _)| f.category == category)
                    .map(|(f, &v)| FeatureCell {
                        key: f.key.clone(),
                        label: f.label.clone(),
                        value: f.display(v),
                    })
                    .collect(),
            })
            .collect();
        StimulusView {
            stimulus_id: record.id.clone(),
            groups,
        }
    }
}

/// Client-facing explanation: which model produced it is withheld.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationView {
    pub items: Vec<ExplanationItem>,
    pub intercept: f64,
    pub surrogate_prediction: f64,
}

impl From<&Explanation> for ExplanationView {
    fn from(e: &Explanation) -> Self {
        ExplanationView {
            items: e.items.clone(),
            intercept: e.intercept,
            surrogate_prediction: e.surrogate_prediction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepDescriptor {
    Instructions {
        page: Page,
        content_id: String,
    },
    TrainingTrial {
        trial: usize,
        of: usize,
        stimulus: StimulusView,
    },
    FirstResponse {
        trial: usize,
        of: usize,
        is_practice: bool,
        stimulus: StimulusView,
    },
    SecondResponse {
        trial: usize,
        of: usize,
        is_practice: bool,
        stimulus: StimulusView,
        first_prediction: f64,
        range_lo: f64,
        range_hi: f64,
        ai_prediction: f64,
        explanation: Option<ExplanationView>,
        /// The second slider starts at the first response.
        default_prediction: f64,
    },
    ScoreInterstitial {
        after_trial: usize,
        cumulative_score: f64,
        content_id: String,
    },
    Feedback {
        total_score: f64,
        content_id: String,
    },
    Complete {
        completion: CompletionRecord,
        content_id: String,
    },
    Abandoned,
}

impl Session {
    pub fn step(&self, exp: &Experiment) -> Result<StepDescriptor, ProtocolError> {
        let actual = N_TESTING - 1;
        Ok(match self.state {
            State::Consent | State::Demographics => {
                return Err(ProtocolError::Replay(
                    "sessions start after consent and demographics".into(),
                ))
            }
            State::TrainInstructions => StepDescriptor::Instructions {
                page: Page::TrainInstructions,
                content_id: "train_instructions".into(),
            },
            State::Training { trial } => StepDescriptor::TrainingTrial {
                trial,
                of: N_TRAINING,
                stimulus: StimulusView::new(exp, exp.stimulus(&self.training_order[trial - 1])?),
            },
            State::TestInstructions => StepDescriptor::Instructions {
                page: Page::TestInstructions,
                content_id: "test_instructions".into(),
            },
            State::TestFirst { trial } => StepDescriptor::FirstResponse {
                trial,
                of: actual,
                is_practice: trial == 0,
                stimulus: StimulusView::new(exp, exp.stimulus(&self.testing_order[trial])?),
            },
            State::TestSecond { trial } => {
                let tt = self
                    .testing_trials
                    .last()
                    .ok_or(ProtocolError::NotRevealed(trial))?;
                let (ai_prediction, explanation) = self.reveal_ai(exp, trial)?;
                StepDescriptor::SecondResponse {
                    trial,
                    of: actual,
                    is_practice: trial == 0,
                    stimulus: StimulusView::new(exp, exp.stimulus(&tt.stimulus_id)?),
                    first_prediction: tt.first_prediction,
                    range_lo: tt.range_lo,
                    range_hi: tt.range_hi,
                    ai_prediction,
                    explanation,
                    default_prediction: tt.first_prediction,
                }
            }
            State::ScoreInterstitial { after_trial } => StepDescriptor::ScoreInterstitial {
                after_trial,
                cumulative_score: self.cumulative_score,
                content_id: "score_interstitial".into(),
            },
            State::Feedback => StepDescriptor::Feedback {
                total_score: self.cumulative_score,
                content_id: "feedback".into(),
            },
            State::Complete => StepDescriptor::Complete {
                completion: self.finalize()?.clone(),
                content_id: "completion".into(),
            },
            State::Abandoned => StepDescriptor::Abandoned,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testkit::*;
    use super::super::*;

    #[test]
    fn stimulus_view_groups_thirty_features() {
        let exp = experiment();
        let v = StimulusView::new(&exp, &exp.training[0]);
        let sizes: Vec<usize> = v.groups.iter().map(|g| g.features.len()).collect();
        assert_eq!(sizes, vec![9, 10, 11]);
        let json = serde_json::to_value(&v).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["groups", "stimulus_id"]);
    }

    #[test]
    fn reveal_hides_model_identity() {
        let exp = experiment();
        let b = Branch::new(
            AiQuality::Good,
            ExplanationQuality::Poor,
            TrainExplanation::Shown,
        );
        let e = exp
            .explanations
            .get(AiQuality::Poor, &exp.testing[0].id)
            .unwrap();
        let json = serde_json::to_string(&ExplanationView::from(e)).unwrap();
        assert!(!json.contains("Poor") && !json.contains("Good") && !json.contains("source"));
        let ev = exp.created_event("s", b, &create_request()).unwrap();
        let s = Session::from_created(&EventRecord {
            v: EVENT_VERSION,
            seq: 0,
            at_ms: 0,
            event: ev,
        })
        .unwrap();
        assert!(matches!(
            s.step(&exp).unwrap(),
            StepDescriptor::Instructions { .. }
        ));
    }
}
