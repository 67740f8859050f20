use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trustshift_core::agents::SimConfig;
use trustshift_core::dataset::SplitConfig;
use trustshift_core::explainer::ExplainerConfig;
use trustshift_core::pipeline::{DataSource, ModelTraining, PipelineConfig};
use trustshift_core::scoring::ScoreConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub models: PathBuf,
    pub explanations: PathBuf,
    pub store: PathBuf,
    pub analysis: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            models: "artifacts/models".into(),
            explanations: "artifacts/explanations.json".into(),
            store: "artifacts/store".into(),
            analysis: "artifacts/analysis".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSettings {
    pub host: String,
    pub port: u16,
    pub session_timeout_minutes: u64,
    pub fsync: bool,
    /// Replacement for the shipped content file.
    pub content: Option<PathBuf>,
}

impl Default for ServerSettings {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            session_timeout_minutes: 120,
            fsync: true,
            content: None,
        }
    }
}

/// Everything a subcommand might need. Loaded from TOML; command-line flags
/// and `TRUSTSHIFT_*` variables override individual values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub paths: Paths,
    pub data: DataSource,
    pub split: SplitConfig,
    pub training: ModelTraining,
    pub explainer: ExplainerConfig,
    pub score: ScoreConfig,
    pub simulation: SimConfig,
    pub server: ServerSettings,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config, CliError> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            data: self.data.clone(),
            split: self.split,
            training: self.training.clone(),
            explainer: self.explainer,
            score: self.score,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.training.validate().map_err(|e| bad(&e))?;
        self.score.validate().map_err(|e| bad(&e))?;
        if self.explainer.n_perturbations < 100 {
            return Err(CliError::Config(format!(
                "explainer.n_perturbations must be at least 100, got {}",
                self.explainer.n_perturbations
            )));
        }
        if self.simulation.n_agents_per_branch == 0 {
            return Err(CliError::Config(
                "simulation.n_agents_per_branch must be positive".into(),
            ));
        }
        if self.server.session_timeout_minutes == 0 {
            return Err(CliError::Config(
                "server.session_timeout_minutes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        let back: Config = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c: Config =
            toml::from_str("[training]\nseed = 9\n[explainer]\nk_features = 6\n").unwrap();
        assert_eq!(c.training.seed, 9);
        assert_eq!(c.training.epochs, 100);
        assert_eq!(c.explainer.k_features, 6);
        assert_eq!(c.explainer.n_perturbations, 5000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("[pathz]\nstore = \"x\"\n").is_err());
        assert!(toml::from_str::<Config>("[paths]\nstroe = \"x\"\n").is_err());
    }
}
