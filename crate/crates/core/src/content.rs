//! Participant-facing text: instruction pages and the questionnaire.
//!
//! The shipped file holds placeholder wording; deployments replace it with
//! their approved text.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::LIKERT_ITEMS;

const CONTENT_JSON: &str = include_str!("../data/content.json");

/// Content ids the step descriptors refer to.
pub const REQUIRED_PAGES: [&str; 5] = [
    "train_instructions",
    "test_instructions",
    "score_interstitial",
    "feedback",
    "completion",
];

#[derive(Debug, Error)]
pub enum ContentError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed content file: {0}")]
    Format(String),
    #[error("content file is missing page {0}")]
    MissingPage(String),
    #[error("questionnaire must have {LIKERT_ITEMS} questions, found {0}")]
    Questions(usize),
    #[error("questionnaire scale must have 5 labels, found {0}")]
    Scale(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Questionnaire {
    pub scale: Vec<String>,
    pub questions: Vec<Question>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Content {
    pub format: String,
    pub version: u32,
    pub questionnaire: Questionnaire,
    pub pages: BTreeMap<String, String>,
}

impl Content {
    pub fn shipped() -> Content {
        Self::from_json(CONTENT_JSON).expect("shipped content is valid")
    }

    pub fn shipped_json() -> &'static str {
        CONTENT_JSON
    }

    pub fn from_json(text: &str) -> Result<Content, ContentError> {
        let content: Content =
            serde_json::from_str(text).map_err(|e| ContentError::Format(e.to_string()))?;
        content.validate()?;
        Ok(content)
    }

    pub fn load(path: &Path) -> Result<Content, ContentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ContentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ContentError> {
        if let Some(missing) = REQUIRED_PAGES
            .iter()
            .find(|p| !self.pages.contains_key(**p))
        {
            return Err(ContentError::MissingPage(missing.to_string()));
        }
        if self.questionnaire.questions.len() != LIKERT_ITEMS {
            return Err(ContentError::Questions(self.questionnaire.questions.len()));
        }
        if self.questionnaire.scale.len() != 5 {
            return Err(ContentError::Scale(self.questionnaire.scale.len()));
        }
        Ok(())
    }

    pub fn page(&self, id: &str) -> Option<&str> {
        self.pages.get(id).map(String::as_str)
    }
}
