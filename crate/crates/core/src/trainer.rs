//! Training loop with early stopping, evaluation metrics and the
//! filter-size/activation sweep runner.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_update, AdamConfig, AdamState};
use crate::complexity;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    backward, forward, Activation, ArchConfig, LayerParams, NetworkParams, NetworkSpec,
    BN_MOMENTUM,
};
use crate::tensor::Tensor;

/// Probabilities below this clip contribute `-ln(1e-15) ~ 34.54` to the
/// log-loss.
pub const LOGLOSS_CLIP: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    /// Initialization seeds; `train` uses the first, sweeps run all of them.
    pub seeds: Vec<u64>,
    pub shuffle_seed: u64,
    /// Momentum of the batch-norm moving-statistics update. The 0.99
    /// default suits full-scale training; small datasets with few steps
    /// per epoch converge their inference statistics faster at 0.9.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_epochs: 1000,
            patience: 20,
            adam: AdamConfig::default(),
            seeds: vec![0],
            shuffle_seed: 0,
            bn_momentum: BN_MOMENTUM,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_logloss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned (0 when no epoch ran).
    pub best_epoch: usize,
    pub best_val_logloss: f64,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
    /// Training hit a non-finite loss and aborted; the returned weights are
    /// the best snapshot before divergence.
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Fraction of argmax-correct predictions, in percent.
    pub accuracy: f64,
    /// Mean categorical cross-entropy, natural log, clipped at 1e-15.
    pub log_loss: f64,
    /// `confusion[true * classes + predicted]`.
    pub confusion: Vec<u64>,
    pub class_count: usize,
}

impl Evaluation {
    pub fn confusion_csv(&self) -> String {
        let mut out = String::new();
        for row in self.confusion.chunks(self.class_count) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Metrics for externally computed probability rows.
pub fn metrics_from_probs(
    probs: &Tensor<f32>,
    labels: &[usize],
    class_count: usize,
) -> Result<Evaluation> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if probs.shape() != [n, class_count] {
        return Err(Error::shape(
            "probability rows",
            format!("[{n}, {class_count}]"),
            format!("{:?}", probs.shape()),
        ));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let mut confusion = vec![0u64; class_count * class_count];
    for (i, &label) in labels.iter().enumerate() {
        let row = &probs.data()[i * class_count..(i + 1) * class_count];
        let mut argmax = 0;
        for (k, v) in row.iter().enumerate() {
            if *v > row[argmax] {
                argmax = k;
            }
        }
        if argmax == label {
            correct += 1;
        }
        confusion[label * class_count + argmax] += 1;
        let p = (row[label] as f64).clamp(LOGLOSS_CLIP, 1.0);
        loss_sum -= p.ln();
    }
    Ok(Evaluation {
        accuracy: 100.0 * correct as f64 / n as f64,
        log_loss: loss_sum / n as f64,
        confusion,
        class_count,
    })
}

/// Inference-mode accuracy, log-loss and confusion matrix over a dataset.
pub fn evaluate(
    spec: &NetworkSpec,
    params: &NetworkParams<f32>,
    dataset: &Dataset,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut all_probs = Vec::with_capacity(dataset.len() * spec.class_count);
    let mut labels = Vec::with_capacity(dataset.len());
    for chunk in indices.chunks(256) {
        let (batch, _) = dataset.batch(chunk)?;
        let trace = forward(spec, params, &batch, false)?;
        all_probs.extend_from_slice(trace.probabilities.data());
        labels.extend(chunk.iter().map(|i| dataset.examples[*i].label));
    }
    let probs = Tensor::from_vec(&[dataset.len(), spec.class_count], all_probs)?;
    metrics_from_probs(&probs, &labels, spec.class_count)
}

fn apply_bn_updates(
    params: &mut NetworkParams<f32>,
    stats: &[(usize, Vec<f32>, Vec<f32>)],
    momentum: f64,
) {
    let momentum = momentum as f32;
    for (layer, mean, var) in stats {
        if let LayerParams::BatchNorm(bn) = &mut params.layers[*layer] {
            for (m, b) in bn.moving_mean.iter_mut().zip(mean) {
                *m = *m * momentum + *b * (1.0 - momentum);
            }
            for (v, b) in bn.moving_variance.iter_mut().zip(var) {
                *v = *v * momentum + *b * (1.0 - momentum);
            }
        }
    }
}

/// Core loop: seeded shuffling each epoch, Adam updates, per-epoch
/// validation, and early stopping on the validation log-loss. Returns the
/// weights of the best validation epoch.
pub fn finetune(
    spec: &NetworkSpec,
    initial: &NetworkParams<f32>,
    train_data: &Dataset,
    val_data: &Dataset,
    config: &TrainConfig,
) -> Result<(NetworkParams<f32>, MetricsRecord)> {
    config.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    initial.validate(spec)?;

    let mut params = initial.clone();
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);

    let mut best_params = params.clone();
    let mut best_logloss = f64::INFINITY;
    let mut best_accuracy = 0.0;
    let mut best_epoch = 0usize;
    let mut epochs_since_best = 0usize;
    let mut records = Vec::new();
    let mut stopped_early = false;
    let mut diverged = false;

    let mut indices: Vec<usize> = (0..train_data.len()).collect();
    'training: for epoch in 1..=config.max_epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in indices.chunks(config.batch_size) {
            let (batch, labels) = train_data.batch(chunk)?;
            let result = match backward(spec, &params, &batch, &labels) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break 'training;
                }
                Err(e) => return Err(e),
            };
            loss_sum += result.loss as f64 * chunk.len() as f64;
            apply_bn_updates(&mut params, &result.bn_stats, config.bn_momentum);
            match adam_update(&mut params, &result.grads, &mut state, &config.adam) {
                Ok(()) => {}
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break 'training;
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = loss_sum / train_data.len() as f64;
        let val = evaluate(spec, &params, val_data)?;
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy: val.accuracy,
            val_logloss: val.log_loss,
        });
        if val.log_loss < best_logloss {
            best_logloss = val.log_loss;
            best_accuracy = val.accuracy;
            best_epoch = epoch;
            best_params = params.clone();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let metrics = MetricsRecord {
        epochs: records,
        best_epoch,
        best_val_logloss: best_logloss,
        best_val_accuracy: best_accuracy,
        stopped_early,
        diverged,
    };
    if best_epoch == 0 {
        // no epoch completed (max_epochs == 0 or first-batch divergence)
        return Ok((initial.clone(), metrics));
    }
    Ok((best_params, metrics))
}

/// Trains from a fresh Glorot initialization seeded by the first entry of
/// `config.seeds`.
pub fn train(
    spec: &NetworkSpec,
    train_data: &Dataset,
    val_data: &Dataset,
    config: &TrainConfig,
) -> Result<(NetworkParams<f32>, MetricsRecord)> {
    let seed = config.seeds.first().copied().unwrap_or(0);
    let params = NetworkParams::init(spec, seed)?;
    finetune(spec, &params, train_data, val_data, config)
}

// ------------------------------------------------------------------ sweep

/// Grid axes: every kernel size crossed with every activation pattern.
/// Patterns are four letters from {T, R} for (C1, C2, C3, Dense), e.g.
/// "TRTT".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub kernel_sizes: Vec<usize>,
    pub activation_patterns: Vec<String>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            kernel_sizes: vec![1, 3, 5, 7],
            activation_patterns: vec!["TRTT".into()],
        }
    }
}

pub fn parse_activation_pattern(pattern: &str) -> Result<[Activation; 4]> {
    let chars: Vec<char> = pattern.chars().collect();
    if chars.len() != 4 {
        return Err(Error::Config(format!(
            "activation pattern {pattern:?} must have 4 letters (C1, C2, C3, Dense)"
        )));
    }
    let mut out = [Activation::Tanh; 4];
    for (i, c) in chars.iter().enumerate() {
        out[i] = match c.to_ascii_uppercase() {
            'T' => Activation::Tanh,
            'R' => Activation::Relu,
            other => {
                return Err(Error::Config(format!(
                    "activation pattern {pattern:?}: unknown letter {other:?}"
                )))
            }
        };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_id: String,
    /// Seed as text; summary rows carry "mean".
    pub seed: String,
    pub accuracy: f64,
    pub log_loss: f64,
    pub params: u64,
    pub macs: u64,
    /// Empty on success; failed configs keep their error and NaN metrics.
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<SweepRow>,
}

impl SweepResults {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["config_id", "seed", "accuracy", "logloss", "params", "macs", "error"])?;
        for row in self.rows.iter().chain(&self.summaries) {
            w.write_record([
                row.config_id.clone(),
                row.seed.clone(),
                format!("{:.4}", row.accuracy),
                format!("{:.6}", row.log_loss),
                row.params.to_string(),
                row.macs.to_string(),
                row.error.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains one configuration per grid point per seed; per-seed rows come
/// first, then one mean summary row per configuration. Failures are
/// recorded and the sweep continues. Grid points run in parallel but
/// results keep configuration order.
pub fn run_sweep(
    base: &ArchConfig,
    grid: &SweepGrid,
    train_data: &Dataset,
    val_data: &Dataset,
    config: &TrainConfig,
) -> Result<SweepResults> {
    let mut jobs = Vec::new();
    for &kernel in &grid.kernel_sizes {
        for pattern in &grid.activation_patterns {
            let activations = parse_activation_pattern(pattern)?;
            let arch = ArchConfig {
                kernel,
                activations,
                ..base.clone()
            };
            let config_id = format!("k{kernel}-{}", pattern.to_ascii_uppercase());
            for &seed in &config.seeds {
                jobs.push((config_id.clone(), arch.clone(), seed));
            }
        }
    }

    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|(config_id, arch, seed)| {
            let spec = arch.build();
            let run_config = TrainConfig {
                seeds: vec![*seed],
                ..config.clone()
            };
            let outcome = spec
                .validate()
                .map_err(|e| e.to_string())
                .and_then(|_| {
                    train(&spec, train_data, val_data, &run_config).map_err(|e| e.to_string())
                });
            let (params, macs) = (
                complexity::count_params(&spec).unwrap_or(0),
                complexity::count_macs(&spec).unwrap_or(0),
            );
            match outcome {
                Ok((_, metrics)) => SweepRow {
                    config_id: config_id.clone(),
                    seed: seed.to_string(),
                    accuracy: metrics.best_val_accuracy,
                    log_loss: metrics.best_val_logloss,
                    params,
                    macs,
                    error: String::new(),
                },
                Err(e) => SweepRow {
                    config_id: config_id.clone(),
                    seed: seed.to_string(),
                    accuracy: f64::NAN,
                    log_loss: f64::NAN,
                    params,
                    macs,
                    error: e,
                },
            }
        })
        .collect();

    let mut summaries = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for row in &rows {
        if !seen.insert(row.config_id.clone()) {
            continue;
        }
        let group: Vec<&SweepRow> = rows
            .iter()
            .filter(|r| r.config_id == row.config_id && r.error.is_empty())
            .collect();
        if group.is_empty() {
            summaries.push(SweepRow {
                config_id: row.config_id.clone(),
                seed: "mean".into(),
                accuracy: f64::NAN,
                log_loss: f64::NAN,
                params: row.params,
                macs: row.macs,
                error: "all seeds failed".into(),
            });
            continue;
        }
        let n = group.len() as f64;
        summaries.push(SweepRow {
            config_id: row.config_id.clone(),
            seed: "mean".into(),
            accuracy: group.iter().map(|r| r.accuracy).sum::<f64>() / n,
            log_loss: group.iter().map(|r| r.log_loss).sum::<f64>() / n,
            params: row.params,
            macs: row.macs,
            error: String::new(),
        });
    }

    Ok(SweepResults { rows, summaries })
}
