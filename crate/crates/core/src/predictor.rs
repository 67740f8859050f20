//! The grade-prediction networks: a ReLU multilayer perceptron with a linear
//! output neuron, trained with Adam on mean squared error.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{FeatureSchema, FeatureVector, Split, ENCODED_DIM};
use crate::rng::seeded;
use sha2::{Digest, Sha256};

/// Layer widths of the prediction network.
pub const NETWORK_LAYERS: [usize; 4] = [ENCODED_DIM, 32, 16, 1];
pub const GOOD_LEARNING_RATE: f64 = 0.003;
pub const POOR_LEARNING_RATE: f64 = 0.00065;

const MODEL_FORMAT: &str = "trustshift-model";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("input has {got} components, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("no data")]
    EmptyData,
    #[error("{inputs} inputs but {targets} targets")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("model file is not valid: {0}")]
    Format(#[from] serde_json::Error),
}

/// Anything that maps an encoded stimulus to a grade.
pub trait Predict: Sync {
    fn predict(&self, x: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Sync> Predict for F {
    fn predict(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AiQuality {
    Good,
    Poor,
}

impl AiQuality {
    pub const ALL: [AiQuality; 2] = [AiQuality::Good, AiQuality::Poor];

    pub fn other(self) -> AiQuality {
        match self {
            AiQuality::Good => AiQuality::Poor,
            AiQuality::Poor => AiQuality::Good,
        }
    }

    pub fn learning_rate(self) -> f64 {
        match self {
            AiQuality::Good => GOOD_LEARNING_RATE,
            AiQuality::Poor => POOR_LEARNING_RATE,
        }
    }
}

impl fmt::Display for AiQuality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Fully connected layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.biases.iter().enumerate().map(|(o, b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }
}

/// ReLU hidden layers, identity output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Uniform initialisation in ±1/√fan_in for weights and biases.
    pub fn init(sizes: &[usize], seed: u64) -> Mlp {
        let mut rng = seeded(seed, 0x1417);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let bound = 1.0 / (i as f64).sqrt();
                let mut d = Dense::zeros(i, o);
                d.weights
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..bound));
                d.biases
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..bound));
                d
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Mlp {
        Mlp {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers.first().map_or(0, |l| l.inputs)];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.biases);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count(), "parameter count");
        let mut at = 0;
        for l in &mut self.layers {
            let (w, b) = (l.weights.len(), l.biases.len());
            l.weights.copy_from_slice(&p[at..at + w]);
            l.biases.copy_from_slice(&p[at + w..at + w + b]);
            at += w + b;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64, PredictorError> {
        if x.len() != self.input_dim() {
            return Err(PredictorError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.apply(&cur, &mut next);
            if i != last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    /// Mean squared error over the batch and its gradient w.r.t. `params()`.
    pub fn loss_and_gradient(&self, xs: &[&[f64]], ys: &[f64]) -> (f64, Vec<f64>) {
        let mut grads: Vec<Dense> = self
            .layers
            .iter()
            .map(|l| Dense::zeros(l.inputs, l.outputs))
            .collect();
        let n = xs.len() as f64;
        let last = self.layers.len() - 1;
        let mut loss = 0.0;
        // activations[0] = input, activations[k] = output of layer k-1
        let mut acts: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len() + 1];
        for (x, &y) in xs.iter().zip(ys) {
            acts[0].clear();
            acts[0].extend_from_slice(x);
            for (i, l) in self.layers.iter().enumerate() {
                let (head, tail) = acts.split_at_mut(i + 1);
                l.apply(&head[i], &mut tail[0]);
                if i != last {
                    tail[0].iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            let residual = acts[last + 1][0] - y;
            loss += residual * residual;

            let mut delta = vec![2.0 * residual / n];
            for i in (0..self.layers.len()).rev() {
                let l = &self.layers[i];
                let g = &mut grads[i];
                let input = &acts[i];
                for (o, d) in delta.iter().enumerate() {
                    g.biases[o] += d;
                    let row = &mut g.weights[o * l.inputs..(o + 1) * l.inputs];
                    row.iter_mut().zip(input).for_each(|(gw, a)| *gw += d * a);
                }
                if i == 0 {
                    break;
                }
                // input[j] > 0 exactly when the ReLU was active
                delta = (0..l.inputs)
                    .map(|j| {
                        if input[j] > 0.0 {
                            delta
                                .iter()
                                .enumerate()
                                .map(|(o, d)| d * l.weights[o * l.inputs + j])
                                .sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
        let flat = Mlp { layers: grads }.params();
        (loss / n, flat)
    }
}

impl Predict for Mlp {
    fn predict(&self, x: &[f64]) -> f64 {
        self.forward_unchecked(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_quality(quality: AiQuality, seed: u64) -> Self {
        Self {
            learning_rate: quality.learning_rate(),
            epochs: 100,
            batch_size: 5,
            adam: AdamConfig::default(),
            seed,
        }
    }
}

struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Mlp,
    /// Mean training loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Mini-batch Adam on MSE. Batches are reshuffled every epoch from a stream
/// derived from `(cfg.seed, epoch)`, so runs are bit-reproducible.
pub fn train(
    init: &Mlp,
    inputs: &[Vec<f64>],
    targets: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, PredictorError> {
    if inputs.is_empty() {
        return Err(PredictorError::EmptyData);
    }
    if inputs.len() != targets.len() {
        return Err(PredictorError::LengthMismatch {
            inputs: inputs.len(),
            targets: targets.len(),
        });
    }
    if let Some(bad) = inputs.iter().find(|x| x.len() != init.input_dim()) {
        return Err(PredictorError::DimensionMismatch {
            expected: init.input_dim(),
            got: bad.len(),
        });
    }
    let mut net = init.clone();
    let mut params = net.params();
    let mut adam = Adam::new(params.len(), cfg.learning_rate, cfg.adam);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded(cfg.seed, 1_000 + epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| inputs[i].as_slice()).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grad) = net.loss_and_gradient(&xs, &ys);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(PredictorError::Diverged { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.step(&mut params, &grad);
            net.set_params(&params);
        }
        loss_trace.push(epoch_loss / inputs.len() as f64);
    }
    Ok(TrainOutcome {
        network: net,
        loss_trace,
    })
}

pub fn evaluate_rmse(
    model: &impl Predict,
    inputs: &[Vec<f64>],
    targets: &[f64],
) -> Result<f64, PredictorError> {
    if inputs.is_empty() {
        return Err(PredictorError::EmptyData);
    }
    if inputs.len() != targets.len() {
        return Err(PredictorError::LengthMismatch {
            inputs: inputs.len(),
            targets: targets.len(),
        });
    }
    let sse: f64 = inputs
        .iter()
        .zip(targets)
        .map(|(x, y)| (model.predict(x) - y).powi(2))
        .sum();
    Ok((sse / inputs.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub quality: Option<AiQuality>,
    pub learning_rate: f64,
    pub seed: u64,
    pub epochs_trained: usize,
    pub final_rmse: Option<f64>,
    pub init: String,
}

/// A trained network plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub network: Mlp,
    pub meta: ModelMeta,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    network: Mlp,
    meta: ModelMeta,
}

impl ModelParams {
    pub fn init(seed: u64) -> ModelParams {
        ModelParams {
            network: Mlp::init(&NETWORK_LAYERS, seed),
            meta: ModelMeta {
                quality: None,
                learning_rate: 0.0,
                seed,
                epochs_trained: 0,
                final_rmse: None,
                init: "uniform(+-1/sqrt(fan_in))".into(),
            },
        }
    }

    /// First 16 hex chars of the SHA-256 of the serialised model file.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn quality(&self) -> Option<AiQuality> {
        self.meta.quality
    }

    /// Shapes exactly 43→32→16→1 and every parameter finite.
    pub fn validate(&self) -> Result<(), PredictorError> {
        validate_network(&self.network, &NETWORK_LAYERS)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            layer_sizes: self.network.sizes(),
            network: self.network.clone(),
            meta: self.meta.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<ModelParams, PredictorError> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(PredictorError::Invalid(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        validate_network(&file.network, &file.layer_sizes)?;
        Ok(ModelParams {
            network: file.network,
            meta: file.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PredictorError> {
        let path = path.as_ref();
        crate::fsutil::write_atomic(path, self.to_json().as_bytes()).map_err(|source| {
            PredictorError::Io {
                path: path.display().to_string(),
                source,
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelParams, PredictorError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PredictorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

impl Predict for ModelParams {
    fn predict(&self, x: &[f64]) -> f64 {
        self.network.predict(x)
    }
}

fn validate_network(net: &Mlp, sizes: &[usize]) -> Result<(), PredictorError> {
    if net.sizes() != sizes {
        return Err(PredictorError::Invalid(format!(
            "layer sizes {:?}, expected {sizes:?}",
            net.sizes()
        )));
    }
    for (i, l) in net.layers.iter().enumerate() {
        if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
            return Err(PredictorError::Invalid(format!(
                "layer {i} has inconsistent shape"
            )));
        }
        if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
            return Err(PredictorError::Invalid(format!(
                "layer {i} has non-finite values"
            )));
        }
    }
    Ok(())
}

/// Encoded inputs and grade targets for a record set.
pub fn design_matrix(
    schema: &FeatureSchema,
    records: &[crate::dataset::StudentRecord],
) -> Result<(Vec<Vec<f64>>, Vec<f64>), crate::dataset::DatasetError> {
    let mut xs = Vec::with_capacity(records.len());
    let mut ys = Vec::with_capacity(records.len());
    for r in records {
        let FeatureVector { components, .. } = schema.encode(r)?;
        xs.push(components);
        ys.push(f64::from(r.grade));
    }
    Ok((xs, ys))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityReport {
    pub quality: AiQuality,
    pub learning_rate: f64,
    pub train_rmse: f64,
    pub heldout_rmse: f64,
    pub heldout_n: usize,
    pub final_epoch_loss: f64,
}

/// Train one network of the given quality on `split.model_train` and score
/// it on `split.model_test`. Both qualities share the same initial weights.
pub fn train_quality(
    schema: &FeatureSchema,
    split: &Split,
    quality: AiQuality,
    seed: u64,
) -> Result<(ModelParams, QualityReport), PredictorError> {
    train_quality_with(
        schema,
        split,
        quality,
        &TrainConfig::for_quality(quality, seed),
    )
}

/// [`train_quality`] with explicit hyperparameters.
pub fn train_quality_with(
    schema: &FeatureSchema,
    split: &Split,
    quality: AiQuality,
    cfg: &TrainConfig,
) -> Result<(ModelParams, QualityReport), PredictorError> {
    let (xs, ys) = design_matrix(schema, &split.model_train)
        .map_err(|e| PredictorError::Invalid(e.to_string()))?;
    let (tx, ty) = design_matrix(schema, &split.model_test)
        .map_err(|e| PredictorError::Invalid(e.to_string()))?;
    let mut model = ModelParams::init(cfg.seed);
    let out = train(&model.network, &xs, &ys, cfg)?;
    model.network = out.network;
    let heldout = evaluate_rmse(&model, &tx, &ty)?;
    model.meta.quality = Some(quality);
    model.meta.learning_rate = cfg.learning_rate;
    model.meta.epochs_trained = cfg.epochs;
    model.meta.final_rmse = Some(heldout);
    let report = QualityReport {
        quality,
        learning_rate: cfg.learning_rate,
        train_rmse: evaluate_rmse(&model, &xs, &ys)?,
        heldout_rmse: heldout,
        heldout_n: tx.len(),
        final_epoch_loss: *out.loss_trace.last().unwrap_or(&f64::NAN),
    };
    Ok((model, report))
}
