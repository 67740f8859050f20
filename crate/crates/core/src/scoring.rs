//! Trial scores, the "score if correct" preview and the bonus mapping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GRADE_MAX;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("range width {0} is outside [0, 20]")]
    WidthOutOfBounds(f64),
    #[error("invalid range [{lo}, {hi}]")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("invalid score config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub base_points: f64,
    pub width_penalty_per_point: f64,
    /// Training score is `max(0, full_marks_band - |error|) * slope`.
    pub training_full_marks_band: f64,
    pub training_slope: f64,
    /// Currency per point.
    pub bonus_rate: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            base_points: 100.0,
            width_penalty_per_point: 5.0,
            training_full_marks_band: 20.0,
            training_slope: 5.0,
            bonus_rate: 0.001,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if !(self.base_points > 0.0) {
            return Err(ScoringError::Config("base_points must be positive".into()));
        }
        if !(self.width_penalty_per_point >= 0.0)
            || !(self.training_slope >= 0.0)
            || !(self.bonus_rate >= 0.0)
        {
            return Err(ScoringError::Config(
                "penalties, slopes and rates must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

pub fn preview_score(width: f64, cfg: &ScoreConfig) -> Result<f64, ScoringError> {
    if !(0.0..=f64::from(GRADE_MAX)).contains(&width) {
        return Err(ScoringError::WidthOutOfBounds(width));
    }
    Ok((cfg.base_points - cfg.width_penalty_per_point * width).max(0.0))
}

pub fn test_trial_score(
    truth: f64,
    lo: f64,
    hi: f64,
    cfg: &ScoreConfig,
) -> Result<f64, ScoringError> {
    if !(lo <= hi) || lo < 0.0 || hi > f64::from(GRADE_MAX) {
        return Err(ScoringError::InvalidRange { lo, hi });
    }
    if lo <= truth && truth <= hi {
        preview_score(hi - lo, cfg)
    } else {
        Ok(0.0)
    }
}

pub fn training_trial_score(prediction: f64, truth: f64, cfg: &ScoreConfig) -> f64 {
    (cfg.training_full_marks_band - (prediction - truth).abs()).max(0.0) * cfg.training_slope
}

/// Linear in points, rounded down to cents.
pub fn bonus(total_points: f64, cfg: &ScoreConfig) -> f64 {
    let cents = (total_points.max(0.0) * cfg.bonus_rate * 100.0 + 1e-9).floor();
    cents / 100.0
}

/// Preview score at every slider width, 0.0 to 20.0 in steps of 0.1.
pub fn golden_table(cfg: &ScoreConfig) -> Vec<(f64, f64)> {
    (0..=200)
        .map(|tenths| {
            let w = f64::from(tenths) / 10.0;
            (w, preview_score(w, cfg).expect("width within bounds"))
        })
        .collect()
}

pub fn golden_table_csv(cfg: &ScoreConfig) -> String {
    let mut out = String::from("width,preview\n");
    for (w, p) in golden_table(cfg) {
        out.push_str(&format!("{w:.1},{p}\n"));
    }
    out
}

/// The table shipped for client conformance checks.
pub const GOLDEN_SCORES_CSV: &str = include_str!("../data/golden_scores.csv");

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ScoreConfig {
        ScoreConfig::default()
    }

    #[test]
    fn preview_examples() {
        assert_eq!(preview_score(0.0, &cfg()), Ok(100.0));
        assert_eq!(preview_score(4.0, &cfg()), Ok(80.0));
        assert_eq!(preview_score(20.0, &cfg()), Ok(0.0));
        assert!(preview_score(20.1, &cfg()).is_err());
        assert!(preview_score(-0.1, &cfg()).is_err());
    }

    #[test]
    fn interval_examples() {
        assert_eq!(test_trial_score(12.0, 10.0, 14.0, &cfg()), Ok(80.0));
        assert_eq!(test_trial_score(12.0, 13.0, 15.0, &cfg()), Ok(0.0));
        assert_eq!(test_trial_score(12.0, 12.0, 12.0, &cfg()), Ok(100.0));
        assert!(test_trial_score(12.0, 14.0, 10.0, &cfg()).is_err());
    }

    #[test]
    fn training_examples() {
        assert_eq!(training_trial_score(9.0, 9.0, &cfg()), 100.0);
        assert_eq!(training_trial_score(13.0, 9.0, &cfg()), 80.0);
        assert_eq!(training_trial_score(0.0, 20.0, &cfg()), 0.0);
    }

    #[test]
    fn bonus_examples() {
        assert_eq!(bonus(0.0, &cfg()), 0.0);
        assert_eq!(bonus(3000.0, &cfg()), 3.0);
        assert_eq!(bonus(1234.0, &cfg()), 1.23);
        let mut last = 0.0;
        for p in 0..5000 {
            let b = bonus(f64::from(p), &cfg());
            assert!(b >= last);
            last = b;
        }
    }

    #[test]
    fn shipped_golden_table_is_current() {
        assert_eq!(GOLDEN_SCORES_CSV, golden_table_csv(&cfg()));
    }
}
