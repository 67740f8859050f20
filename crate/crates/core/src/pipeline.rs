//! Offline preparation: load the student file (or the stand-in), train both
//! networks, cache explanations and assemble an [`Experiment`].
//!
//! ```text
//! <models>/good.json  <models>/poor.json   trained networks
//! <models>/split.json                      stimuli and held-out partition
//! <models>/training_report.json            RMSE of every seed tried
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    load_dataset, split_and_select, synthetic_students, Course, DatasetError, FeatureSchema, Split,
    SplitConfig, StudentRecord, SYNTHETIC_ROWS,
};
use crate::explainer::{Background, ExplainError, ExplainerConfig, ExplanationCache};
use crate::predictor::{
    train_quality_with, AdamConfig, AiQuality, ModelParams, PredictorError, QualityReport,
    TrainConfig, GOOD_LEARNING_RATE, POOR_LEARNING_RATE,
};
use crate::protocol::{Experiment, ProtocolError};
use crate::scoring::ScoreConfig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("explanations were computed from {model} model {cached:?}, loaded model is {current}")]
    StaleExplanations {
        model: AiQuality,
        cached: String,
        current: String,
    },
}

/// Where student records come from. Without a path the stand-in generator
/// is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSource {
    pub path: Option<PathBuf>,
    pub course: Course,
    pub synthetic_rows: usize,
    pub synthetic_seed: u64,
}

impl Default for DataSource {
    fn default() -> Self {
        Self {
            path: None,
            course: Course::Math,
            synthetic_rows: SYNTHETIC_ROWS,
            synthetic_seed: 395,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataOrigin {
    File { path: String, course: Course },
    StandIn { rows: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelTraining {
    pub seed: u64,
    pub good_learning_rate: f64,
    pub poor_learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds tried in turn (`seed`, `seed + 1`, ...) until the good network
    /// beats the poor one on held-out RMSE. 1 disables the search.
    pub max_seed_attempts: usize,
}

impl Default for ModelTraining {
    fn default() -> Self {
        Self {
            seed: 42,
            good_learning_rate: GOOD_LEARNING_RATE,
            poor_learning_rate: POOR_LEARNING_RATE,
            epochs: 100,
            batch_size: 5,
            max_seed_attempts: 20,
        }
    }
}

impl ModelTraining {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let lr_ok = |lr: f64| lr.is_finite() && lr > 0.0;
        if !lr_ok(self.good_learning_rate) || !lr_ok(self.poor_learning_rate) {
            return Err(PipelineError::Config(
                "learning rates must be positive".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_seed_attempts == 0 {
            return Err(PipelineError::Config(
                "epochs, batch_size and max_seed_attempts must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn train_config(&self, quality: AiQuality, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: match quality {
                AiQuality::Good => self.good_learning_rate,
                AiQuality::Poor => self.poor_learning_rate,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig::default(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataSource,
    pub split: SplitConfig,
    pub training: ModelTraining,
    pub explainer: ExplainerConfig,
    pub score: ScoreConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedAttempt {
    pub seed: u64,
    pub good: QualityReport,
    pub poor: QualityReport,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub origin: DataOrigin,
    pub n_records: usize,
    pub n_model_train: usize,
    pub n_model_test: usize,
    pub attempts: Vec<SeedAttempt>,
    pub chosen_seed: u64,
    /// Whether the chosen pair has good held-out RMSE below poor.
    pub ordered: bool,
}

impl TrainingReport {
    pub fn chosen(&self) -> &SeedAttempt {
        self.attempts
            .iter()
            .find(|a| a.seed == self.chosen_seed)
            .expect("chosen seed was attempted")
    }
}

#[derive(Clone)]
pub struct TrainedModels {
    pub good: ModelParams,
    pub poor: ModelParams,
    pub split: Split,
    pub report: TrainingReport,
}

pub fn load_records(
    schema: &FeatureSchema,
    src: &DataSource,
) -> Result<(Vec<StudentRecord>, DataOrigin), PipelineError> {
    match &src.path {
        Some(path) => Ok((
            load_dataset(path, schema, src.course)?,
            DataOrigin::File {
                path: path.display().to_string(),
                course: src.course,
            },
        )),
        None => Ok((
            synthetic_students(src.synthetic_rows, src.synthetic_seed),
            DataOrigin::StandIn {
                rows: src.synthetic_rows,
                seed: src.synthetic_seed,
            },
        )),
    }
}

/// Split the records and train both networks. When the first seed does not
/// order the pair, later seeds are tried up to `max_seed_attempts`; if none
/// does, the first attempt is kept and `ordered` is false.
pub fn train_models(
    schema: &FeatureSchema,
    cfg: &PipelineConfig,
) -> Result<TrainedModels, PipelineError> {
    cfg.training.validate()?;
    let (records, origin) = load_records(schema, &cfg.data)?;
    let split = split_and_select(&records, &cfg.split)?;
    let mut attempts = Vec::new();
    let mut chosen: Option<(ModelParams, ModelParams, u64)> = None;
    let mut first: Option<(ModelParams, ModelParams, u64)> = None;
    for i in 0..cfg.training.max_seed_attempts as u64 {
        let seed = cfg.training.seed.wrapping_add(i);
        let (good, gr) = train_quality_with(
            schema,
            &split,
            AiQuality::Good,
            &cfg.training.train_config(AiQuality::Good, seed),
        )?;
        let (poor, pr) = train_quality_with(
            schema,
            &split,
            AiQuality::Poor,
            &cfg.training.train_config(AiQuality::Poor, seed),
        )?;
        let accepted = gr.heldout_rmse < pr.heldout_rmse;
        attempts.push(SeedAttempt {
            seed,
            good: gr,
            poor: pr,
            accepted,
        });
        if accepted {
            chosen = Some((good, poor, seed));
            break;
        }
        if first.is_none() {
            first = Some((good, poor, seed));
        }
    }
    let ordered = chosen.is_some();
    let (good, poor, chosen_seed) = chosen.or(first).expect("at least one attempt");
    let report = TrainingReport {
        origin,
        n_records: records.len(),
        n_model_train: split.model_train.len(),
        n_model_test: split.model_test.len(),
        attempts,
        chosen_seed,
        ordered,
    };
    Ok(TrainedModels {
        good,
        poor,
        split,
        report,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    crate::fsutil::write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn model_path(dir: &Path, quality: AiQuality) -> PathBuf {
    dir.join(match quality {
        AiQuality::Good => "good.json",
        AiQuality::Poor => "poor.json",
    })
}

impl TrainedModels {
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.good.save(model_path(dir, AiQuality::Good))?;
        self.poor.save(model_path(dir, AiQuality::Poor))?;
        write_json(&dir.join("split.json"), &self.split)?;
        write_json(&dir.join("training_report.json"), &self.report)
    }

    pub fn load(dir: &Path) -> Result<TrainedModels, PipelineError> {
        Ok(TrainedModels {
            good: ModelParams::load(model_path(dir, AiQuality::Good))?,
            poor: ModelParams::load(model_path(dir, AiQuality::Poor))?,
            split: read_json(&dir.join("split.json"))?,
            report: read_json(&dir.join("training_report.json"))?,
        })
    }

    pub fn stimuli(&self) -> Vec<StudentRecord> {
        self.split
            .training_stimuli
            .iter()
            .chain(&self.split.testing_stimuli)
            .cloned()
            .collect()
    }

    /// Explain every stimulus under both networks against the training
    /// marginals.
    pub fn explain(
        &self,
        schema: &FeatureSchema,
        cfg: &ExplainerConfig,
    ) -> Result<ExplanationCache, PipelineError> {
        let background = Background::from_records(schema, &self.split.model_train)?;
        Ok(ExplanationCache::build(
            &[
                (AiQuality::Good, &self.good, self.good.fingerprint()),
                (AiQuality::Poor, &self.poor, self.poor.fingerprint()),
            ],
            &self.stimuli(),
            schema,
            &background,
            cfg,
        )?)
    }

    /// Assemble the live experiment; refuses a cache built from other models.
    pub fn experiment(
        self,
        schema: FeatureSchema,
        explanations: ExplanationCache,
        score: ScoreConfig,
    ) -> Result<Experiment, PipelineError> {
        for (q, m) in [(AiQuality::Good, &self.good), (AiQuality::Poor, &self.poor)] {
            let current = m.fingerprint();
            let cached = explanations
                .model_fingerprints
                .get(&q)
                .cloned()
                .unwrap_or_default();
            if cached != current {
                return Err(PipelineError::StaleExplanations {
                    model: q,
                    cached,
                    current,
                });
            }
        }
        Ok(Experiment::new(
            schema,
            self.split.training_stimuli,
            self.split.testing_stimuli,
            self.good,
            self.poor,
            explanations,
            score,
        )?)
    }
}

/// Load models and explanations from disk and assemble the experiment.
pub fn load_experiment(
    models_dir: &Path,
    explanations: &Path,
    score: ScoreConfig,
) -> Result<Experiment, PipelineError> {
    let models = TrainedModels::load(models_dir)?;
    let cache = ExplanationCache::load(explanations)?;
    models.experiment(FeatureSchema::student(), cache, score)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> PipelineConfig {
        PipelineConfig {
            data: DataSource {
                synthetic_rows: 200,
                ..Default::default()
            },
            training: ModelTraining {
                epochs: 3,
                max_seed_attempts: 3,
                ..Default::default()
            },
            explainer: ExplainerConfig {
                n_perturbations: 100,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_through_disk() {
        let schema = FeatureSchema::student();
        let cfg = quick();
        let models = train_models(&schema, &cfg).unwrap();
        assert!(!models.report.attempts.is_empty() && models.report.attempts.len() <= 3);
        assert_eq!(models.report.ordered, models.report.chosen().accepted);
        let dir = tempfile::tempdir().unwrap();
        models.save(dir.path()).unwrap();
        let cache = models.explain(&schema, &cfg.explainer).unwrap();
        cache.save(dir.path().join("explanations.json")).unwrap();
        let exp =
            load_experiment(dir.path(), &dir.path().join("explanations.json"), cfg.score).unwrap();
        assert_eq!(exp.training.len(), 30);
        assert_eq!(exp.good, models.good);
    }

    #[test]
    fn stale_cache_is_refused() {
        let schema = FeatureSchema::student();
        let cfg = quick();
        let models = train_models(&schema, &cfg).unwrap();
        let cache = models.explain(&schema, &cfg.explainer).unwrap();
        let mut other = quick();
        other.training.seed = 99;
        other.training.max_seed_attempts = 1;
        let retrained = train_models(&schema, &other).unwrap();
        assert!(matches!(
            retrained.experiment(schema, cache, cfg.score),
            Err(PipelineError::StaleExplanations { .. })
        ));
    }

    #[test]
    fn config_round_trips_and_rejects_bad_rates() {
        let cfg = PipelineConfig::default();
        let back: PipelineConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"training":{"seed":3}}"#).unwrap();
        assert_eq!(partial.training.seed, 3);
        assert_eq!(partial.training.poor_learning_rate, POOR_LEARNING_RATE);
        let bad = ModelTraining {
            poor_learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
