//! Local surrogate explanations for tabular stimuli.
//!
//! A stimulus is perturbed by resampling a random subset of its features from
//! the training marginals. Each perturbation gets a binary interpretable
//! representation (does feature j still fall in the original's bin/level?),
//! a kernel weight from its distance to the original, and the model's
//! prediction. A weighted ridge regression over the interpretable features
//! gives signed feature weights; the `k` largest are reported.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{FeatureSchema, StudentRecord, ENCODED_DIM};
use crate::predictor::{AiQuality, Predict};
use crate::protocol::{Branch, ExplanationQuality, Phase};
use crate::rng::{mix, seeded};

const CACHE_FORMAT: &str = "trustshift-explanations";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("kernel width must be positive, got {0}")]
    NonPositiveWidth(f64),
    #[error("invalid explainer config: {0}")]
    Config(String),
    #[error("weighted normal equations are singular even with ridge damping")]
    Singular,
    #[error("no background data")]
    EmptyBackground,
    #[error("stimulus {id}: {reason}")]
    Stimulus { id: String, reason: String },
    #[error("no cached explanation for {model} model, stimulus {stimulus}")]
    MissingCached { model: AiQuality, stimulus: String },
    #[error("explanation cache {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("explanation cache is not valid: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerConfig {
    pub n_perturbations: usize,
    pub kernel_width: f64,
    pub k_features: usize,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            n_perturbations: 5000,
            kernel_width: 0.75 * (ENCODED_DIM as f64).sqrt(),
            k_features: 8,
            ridge: 1e-6,
            seed: 17,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<(), ExplainError> {
        if self.n_perturbations < 100 {
            return Err(ExplainError::Config(
                "n_perturbations must be at least 100".into(),
            ));
        }
        if self.k_features < 1 {
            return Err(ExplainError::Config("k_features must be at least 1".into()));
        }
        if !(self.kernel_width > 0.0) {
            return Err(ExplainError::NonPositiveWidth(self.kernel_width));
        }
        if self.ridge < 0.0 {
            return Err(ExplainError::Config("ridge must be non-negative".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

/// Training marginals for one feature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Marginal {
    Categorical {
        freqs: Vec<f64>,
    },
    /// Quartile discretisation: `edges` are the distinct 25/50/75th
    /// percentiles; bin b holds values in `(edges[b-1], edges[b]]`.
    Binned {
        edges: Vec<f64>,
        freqs: Vec<f64>,
        values: Vec<Vec<i32>>,
    },
}

impl Marginal {
    fn bin(&self, value: i32) -> usize {
        match self {
            Marginal::Categorical { .. } => value as usize,
            Marginal::Binned { edges, .. } => {
                edges.iter().filter(|&&e| f64::from(value) > e).count()
            }
        }
    }
}

/// Per-feature training marginals used for perturbation and discretisation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Background {
    pub marginals: Vec<Marginal>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

impl Background {
    pub fn from_records(
        schema: &FeatureSchema,
        records: &[StudentRecord],
    ) -> Result<Background, ExplainError> {
        if records.is_empty() {
            return Err(ExplainError::EmptyBackground);
        }
        let n = records.len() as f64;
        let marginals = schema
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| {
                if f.is_categorical() {
                    let mut freqs = vec![0.0; f.levels.len()];
                    records
                        .iter()
                        .for_each(|r| freqs[r.values[j] as usize] += 1.0 / n);
                    return Marginal::Categorical { freqs };
                }
                let mut sorted: Vec<f64> = records.iter().map(|r| f64::from(r.values[j])).collect();
                sorted.sort_by(f64::total_cmp);
                let mut edges: Vec<f64> = [0.25, 0.5, 0.75]
                    .iter()
                    .map(|&q| percentile(&sorted, q))
                    .collect();
                edges.dedup();
                let mut values = vec![Vec::new(); edges.len() + 1];
                for r in records {
                    let v = r.values[j];
                    values[edges.iter().filter(|&&e| f64::from(v) > e).count()].push(v);
                }
                let freqs = values.iter().map(|b| b.len() as f64 / n).collect();
                Marginal::Binned {
                    edges,
                    freqs,
                    values,
                }
            })
            .collect();
        Ok(Background { marginals })
    }

    fn sample(&self, feature: usize, rng: &mut impl Rng) -> i32 {
        match &self.marginals[feature] {
            Marginal::Categorical { freqs } => {
                WeightedIndex::new(freqs).expect("freqs").sample(rng) as i32
            }
            Marginal::Binned { freqs, values, .. } => {
                let b = WeightedIndex::new(freqs).expect("freqs").sample(rng);
                *values[b].choose(rng).expect("non-empty bin")
            }
        }
    }

    /// Human-readable condition describing the original's bin or level.
    pub fn condition(&self, schema: &FeatureSchema, feature: usize, value: i32) -> String {
        let f = &schema.features[feature];
        match &self.marginals[feature] {
            Marginal::Categorical { .. } => format!("{} = {}", f.label, f.display(value)),
            Marginal::Binned { edges, .. } => {
                let b = self.marginals[feature].bin(value);
                let fmt = |e: f64| format!("{}", (e * 100.0).round() / 100.0);
                if edges.is_empty() {
                    format!("{} = {}", f.label, value)
                } else if b == 0 {
                    format!("{} <= {}", f.label, fmt(edges[0]))
                } else if b == edges.len() {
                    format!("{} > {}", f.label, fmt(edges[b - 1]))
                } else {
                    format!("{} < {} <= {}", fmt(edges[b - 1]), f.label, fmt(edges[b]))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Perturbations {
    /// Raw feature values per sample; sample 0 is the original.
    pub values: Vec<Vec<i32>>,
    /// 1 where the sample keeps the original's bin/level.
    pub interpretable: Vec<Vec<u8>>,
}

pub fn perturb(
    stimulus: &StudentRecord,
    background: &Background,
    cfg: &ExplainerConfig,
) -> Perturbations {
    let n_feat = stimulus.values.len();
    let mut rng = seeded(mix(cfg.seed, id_hash(&stimulus.id)), 0xE7);
    let original_bins: Vec<usize> = (0..n_feat)
        .map(|j| background.marginals[j].bin(stimulus.values[j]))
        .collect();
    let mut out = Perturbations::default();
    out.values.push(stimulus.values.clone());
    out.interpretable.push(vec![1; n_feat]);
    let mut order: Vec<usize> = (0..n_feat).collect();
    for _ in 1..cfg.n_perturbations {
        let size = rng.random_range(1..=n_feat);
        order.shuffle(&mut rng);
        let mut values = stimulus.values.clone();
        for &j in &order[..size] {
            values[j] = background.sample(j, &mut rng);
        }
        let z = (0..n_feat)
            .map(|j| u8::from(background.marginals[j].bin(values[j]) == original_bins[j]))
            .collect();
        out.values.push(values);
        out.interpretable.push(z);
    }
    out
}

pub fn kernel_weight(distance: f64, width: f64) -> Result<f64, ExplainError> {
    if !(width > 0.0) {
        return Err(ExplainError::NonPositiveWidth(width));
    }
    Ok((-(distance * distance) / (width * width)).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationItem {
    pub feature: String,
    pub feature_label: String,
    pub condition: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub stimulus_id: String,
    pub source_model: Option<AiQuality>,
    /// Sorted by |weight| descending.
    pub items: Vec<ExplanationItem>,
    pub intercept: f64,
    pub surrogate_prediction: f64,
    pub model_prediction: f64,
    pub fidelity_r2: f64,
}

struct Fit {
    intercept: f64,
    coefs: Vec<f64>,
    r2: f64,
}

/// Weighted ridge regression with an unpenalised intercept.
fn weighted_ridge(
    columns: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    ridge: f64,
) -> Result<Fit, ExplainError> {
    let k = columns.len();
    let sw: f64 = w.iter().sum();
    let wmean = |v: &[f64]| v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let y_bar = wmean(y);
    let x_bar: Vec<f64> = columns.iter().map(|c| wmean(c)).collect();

    let mut a = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for i in 0..k {
        for j in i..k {
            let s: f64 = (0..y.len())
                .map(|n| w[n] * (columns[i][n] - x_bar[i]) * (columns[j][n] - x_bar[j]))
                .sum();
            a[i * k + j] = s;
            a[j * k + i] = s;
        }
        a[i * k + i] += ridge;
        rhs[i] = (0..y.len())
            .map(|n| w[n] * (columns[i][n] - x_bar[i]) * (y[n] - y_bar))
            .sum();
    }
    let coefs = if k == 0 {
        Vec::new()
    } else {
        solve_spd(&mut a, &rhs, k).ok_or(ExplainError::Singular)?
    };
    let intercept = y_bar - coefs.iter().zip(&x_bar).map(|(c, m)| c * m).sum::<f64>();

    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for n in 0..y.len() {
        let fit = intercept + (0..k).map(|i| coefs[i] * columns[i][n]).sum::<f64>();
        ss_res += w[n] * (y[n] - fit).powi(2);
        ss_tot += w[n] * (y[n] - y_bar).powi(2);
    }
    let r2 = if ss_tot <= 1e-12 * sw {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(Fit {
        intercept,
        coefs,
        r2,
    })
}

/// Cholesky solve of a symmetric positive-definite system.
fn solve_spd(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    let mut z = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            z[i] -= a[i * n + k] * z[k];
        }
        z[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            z[i] -= a[k * n + i] * z[k];
        }
        z[i] /= a[i * n + i];
    }
    Some(z)
}

pub fn explain(
    model: &impl Predict,
    stimulus: &StudentRecord,
    schema: &FeatureSchema,
    background: &Background,
    cfg: &ExplainerConfig,
) -> Result<Explanation, ExplainError> {
    cfg.validate()?;
    let encode = |values: &[i32]| {
        schema
            .encode(&StudentRecord {
                id: stimulus.id.clone(),
                values: values.to_vec(),
                grade: stimulus.grade,
            })
            .map(|v| v.components)
            .map_err(|e| ExplainError::Stimulus {
                id: stimulus.id.clone(),
                reason: e.to_string(),
            })
    };
    encode(&stimulus.values)?;

    let samples = perturb(stimulus, background, cfg);
    let preds: Vec<f64> = samples
        .values
        .iter()
        .map(|v| encode(v).map(|x| model.predict(&x)))
        .collect::<Result<_, _>>()?;
    let weights: Vec<f64> = samples
        .interpretable
        .iter()
        .map(|z| {
            let d = z.iter().filter(|&&b| b == 0).count() as f64;
            kernel_weight(d.sqrt(), cfg.kernel_width)
        })
        .collect::<Result<_, _>>()?;
    let n_feat = schema.len();
    let column = |j: usize| {
        samples
            .interpretable
            .iter()
            .map(|z| f64::from(z[j]))
            .collect::<Vec<f64>>()
    };

    let full: Vec<Vec<f64>> = (0..n_feat).map(column).collect();
    let fit = weighted_ridge(&full, &preds, &weights, cfg.ridge)?;
    let mut ranked: Vec<usize> = (0..n_feat).collect();
    ranked.sort_by(|&a, &b| {
        fit.coefs[b]
            .abs()
            .total_cmp(&fit.coefs[a].abs())
            .then(a.cmp(&b))
    });
    let items: Vec<ExplanationItem> = ranked
        .into_iter()
        .take(cfg.k_features.min(n_feat))
        .map(|j| ExplanationItem {
            feature: schema.features[j].key.clone(),
            feature_label: schema.features[j].label.clone(),
            condition: background.condition(schema, j, stimulus.values[j]),
            weight: fit.coefs[j],
        })
        .collect();
    // the original has every interpretable indicator set
    let surrogate_prediction = fit.intercept + items.iter().map(|i| i.weight).sum::<f64>();

    Ok(Explanation {
        stimulus_id: stimulus.id.clone(),
        source_model: None,
        items,
        intercept: fit.intercept,
        surrogate_prediction,
        model_prediction: preds[0],
        fidelity_r2: fit.r2,
    })
}

fn id_hash(id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Which explanation a participant sees for a stimulus, if any.
///
/// The faced model's own explanation counts as good, the other model's as
/// poor. Training with explanations under a no-explanation test condition
/// shows the good one.
pub fn assign_explanation<'a>(
    branch: Branch,
    phase: Phase,
    good_ai: Option<&'a Explanation>,
    poor_ai: Option<&'a Explanation>,
    stimulus_id: &str,
) -> Result<Option<&'a Explanation>, ExplainError> {
    let shown = match phase {
        Phase::Testing => branch.test_explanation,
        Phase::Training if !branch.train_explanation_shown() => ExplanationQuality::None,
        Phase::Training => match branch.test_explanation {
            ExplanationQuality::None => ExplanationQuality::Good,
            q => q,
        },
    };
    let source = match shown {
        ExplanationQuality::None => return Ok(None),
        ExplanationQuality::Good => branch.ai_quality,
        ExplanationQuality::Poor => branch.ai_quality.other(),
    };
    let found = match source {
        AiQuality::Good => good_ai,
        AiQuality::Poor => poor_ai,
    };
    found.map(Some).ok_or_else(|| ExplainError::MissingCached {
        model: source,
        stimulus: stimulus_id.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub model: AiQuality,
    pub stimulus_id: String,
    pub explanation: Explanation,
}

/// Precomputed explanations keyed by (model quality, stimulus id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationCache {
    pub format: String,
    pub version: u32,
    pub config: ExplainerConfig,
    pub config_hash: String,
    /// Fingerprint of each model file the explanations were computed from.
    pub model_fingerprints: BTreeMap<AiQuality, String>,
    pub entries: Vec<CacheEntry>,
    #[serde(skip)]
    index: BTreeMap<(AiQuality, String), usize>,
}

impl ExplanationCache {
    /// Explain every stimulus under both models, in parallel.
    pub fn build(
        models: &[(AiQuality, &dyn Predict, String)],
        stimuli: &[StudentRecord],
        schema: &FeatureSchema,
        background: &Background,
        cfg: &ExplainerConfig,
    ) -> Result<ExplanationCache, ExplainError> {
        let jobs: Vec<(usize, &StudentRecord)> = models
            .iter()
            .enumerate()
            .flat_map(|(m, _)| stimuli.iter().map(move |s| (m, s)))
            .collect();
        let entries = jobs
            .par_iter()
            .map(|&(m, s)| {
                let (quality, model, _) = &models[m];
                let mut e = explain(&PredictRef(*model), s, schema, background, cfg)?;
                e.source_model = Some(*quality);
                Ok(CacheEntry {
                    model: *quality,
                    stimulus_id: s.id.clone(),
                    explanation: e,
                })
            })
            .collect::<Result<Vec<_>, ExplainError>>()?;
        let mut cache = ExplanationCache {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            config: *cfg,
            config_hash: cfg.hash(),
            model_fingerprints: models.iter().map(|(q, _, fp)| (*q, fp.clone())).collect(),
            entries,
            index: BTreeMap::new(),
        };
        cache.reindex();
        Ok(cache)
    }

    fn reindex(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.model, e.stimulus_id.clone()), i))
            .collect();
    }

    pub fn get(&self, model: AiQuality, stimulus_id: &str) -> Option<&Explanation> {
        self.index
            .get(&(model, stimulus_id.to_string()))
            .map(|&i| &self.entries[i].explanation)
    }

    pub fn assign(
        &self,
        branch: Branch,
        phase: Phase,
        stimulus_id: &str,
    ) -> Result<Option<&Explanation>, ExplainError> {
        assign_explanation(
            branch,
            phase,
            self.get(AiQuality::Good, stimulus_id),
            self.get(AiQuality::Poor, stimulus_id),
            stimulus_id,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cache serialises")
    }

    pub fn from_json(text: &str) -> Result<ExplanationCache, ExplainError> {
        let mut cache: ExplanationCache =
            serde_json::from_str(text).map_err(|e| ExplainError::Format(e.to_string()))?;
        if cache.format != CACHE_FORMAT || cache.version != CACHE_VERSION {
            return Err(ExplainError::Format(format!(
                "unsupported {} v{}",
                cache.format, cache.version
            )));
        }
        if cache.config_hash != cache.config.hash() {
            return Err(ExplainError::Format(
                "config hash does not match config".into(),
            ));
        }
        cache.reindex();
        Ok(cache)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExplainError> {
        let path = path.as_ref();
        crate::fsutil::write_atomic(path, self.to_json().as_bytes()).map_err(|source| {
            ExplainError::Io {
                path: path.display().to_string(),
                source,
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExplanationCache, ExplainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ExplainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

struct PredictRef<'a>(&'a dyn Predict);

impl Predict for PredictRef<'_> {
    fn predict(&self, x: &[f64]) -> f64 {
        self.0.predict(x)
    }
}
