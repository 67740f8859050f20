#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use trustshift_core::dataset::FeatureSchema;
use trustshift_core::explainer::ExplainerConfig;
use trustshift_core::pipeline::{train_models, DataSource, ModelTraining, PipelineConfig};
use trustshift_core::protocol::{
    CreateSession, Demographics, Education, Experiment, Gender, StepDescriptor, Submission,
};
use trustshift_core::service::{ExperimentService, IdSource, ManualClock, ServiceConfig};

/// Small models and a light explanation cache; enough to drive the protocol.
pub fn quick_experiment() -> Experiment {
    let schema = FeatureSchema::student();
    let cfg = PipelineConfig {
        data: DataSource {
            synthetic_rows: 200,
            ..Default::default()
        },
        training: ModelTraining {
            epochs: 5,
            max_seed_attempts: 1,
            ..Default::default()
        },
        explainer: ExplainerConfig {
            n_perturbations: 200,
            ..Default::default()
        },
        ..Default::default()
    };
    let models = train_models(&schema, &cfg).unwrap();
    let cache = models.explain(&schema, &cfg.explainer).unwrap();
    models.experiment(schema, cache, cfg.score).unwrap()
}

pub fn open_service(
    exp: Arc<Experiment>,
    dir: &Path,
    clock: Arc<ManualClock>,
) -> ExperimentService {
    ExperimentService::open(
        exp,
        dir,
        ServiceConfig {
            fsync: false,
            ..Default::default()
        },
        clock,
        IdSource::seeded(77),
    )
    .unwrap()
}

pub fn create_request() -> CreateSession {
    CreateSession {
        consent: true,
        demographics: Some(Demographics {
            gender: Gender::Female,
            age: 34,
            education: Education::Master,
        }),
        likert: Some(vec![4, 2, 5]),
        synthetic: false,
    }
}

/// A fixed, valid answer for whatever the session is asking.
pub fn scripted_answer(step: &StepDescriptor) -> Option<Submission> {
    Some(match step {
        StepDescriptor::Instructions { page, .. } => Submission::Acknowledge { page: *page },
        StepDescriptor::TrainingTrial { trial, .. } => Submission::TrainingPrediction {
            trial: *trial,
            prediction: 10.0 + (*trial % 5) as f64,
            response_time_ms: 3000,
        },
        StepDescriptor::FirstResponse { trial, .. } => Submission::FirstResponse {
            trial: *trial,
            prediction: 11.0,
            ticked_features: vec!["studytime".into(), "failures".into()],
            range_lo: 9.0,
            range_hi: 13.0,
            response_time_ms: 4000,
        },
        StepDescriptor::SecondResponse {
            trial,
            ai_prediction,
            first_prediction,
            ..
        } => Submission::SecondResponse {
            trial: *trial,
            prediction: (first_prediction + ai_prediction) / 2.0,
            response_time_ms: 2500,
        },
        StepDescriptor::ScoreInterstitial { .. } => Submission::Acknowledge {
            page: trustshift_core::protocol::Page::ScoreInterstitial,
        },
        StepDescriptor::Feedback { .. } => Submission::Finish {
            comment: Some("scripted".into()),
        },
        StepDescriptor::Complete { .. } | StepDescriptor::Abandoned => return None,
    })
}
