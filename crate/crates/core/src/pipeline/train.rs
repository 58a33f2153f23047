//! Training loop, evaluation and run records.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{aggregate, EvalPair, MetricsReport, Stratify};
use crate::nn::{AdamConfig, AdamState};
use crate::rng::{derive_seed, SplitMix64};
use crate::synthbench::Split;

use super::config::TrainConfig;
use super::model::{Estimate, Predictor, PreparedSample, Trainable};

/// Fits `model` on the training split with Adam on the log-ratio loss and
/// returns the mean loss of every epoch.
pub fn train<M: Trainable>(model: &mut M, data: &[PreparedSample], tc: &TrainConfig) -> Result<Vec<f64>> {
    tc.validate()?;
    let train: Vec<&PreparedSample> = data
        .iter()
        .filter(|s| s.split == Split::Train && model.accepts(s))
        .collect();
    if train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let mut grads = model.gradient_buffer();
    let mut adam = AdamState::new(AdamConfig::with_lr(tc.lr), model.num_params())?;
    let mut flat_params = Vec::new();
    let mut flat_grads = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        order.sort_unstable();
        order.shuffle(&mut SplitMix64::new(derive_seed(tc.shuffle_seed, epoch as u64)));
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            grads.zero();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = train[i];
                // A forward pass that overflows surfaces as a domain or
                // contract error; treat it as a non-finite loss.
                let loss = match model.accumulate(s, &mut grads, scale) {
                    Ok(l) => l,
                    Err(Error::Domain(_) | Error::Contract(_)) => f64::NAN,
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        sample: s.id.clone(),
                        loss,
                    });
                }
                total += loss;
            }
            model.flatten_into(&mut flat_params);
            grads.flatten_into(&mut flat_grads);
            adam.step(&mut flat_params, &flat_grads)?;
            model.unflatten(&flat_params);
        }
        losses.push(total / train.len() as f64);
    }
    Ok(losses)
}

/// One row of the per-instance predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub split: String,
    pub category: String,
    pub seen: bool,
    pub mass: f64,
    pub volume: Option<f64>,
    pub density: Option<f64>,
    pub predicted: f64,
    pub w_image: Option<f64>,
    pub w_geometry: Option<f64>,
    pub w_text: Option<f64>,
}

impl PredictionRow {
    pub fn new(s: &PreparedSample, e: &Estimate) -> Self {
        let w = e.gate_weights;
        Self {
            id: s.id.clone(),
            split: s.split.as_str().to_string(),
            category: s.category.clone(),
            seen: s.seen,
            mass: s.mass,
            volume: e.volume,
            density: e.density,
            predicted: e.mass,
            w_image: w.map(|w| w[0]),
            w_geometry: w.map(|w| w[1]),
            w_text: w.map(|w| w[2]),
        }
    }

    pub fn eval_pair(&self) -> EvalPair {
        EvalPair {
            id: self.id.clone(),
            mass: self.mass,
            predicted: self.predicted,
            category: self.category.clone(),
            seen: self.seen,
        }
    }

    pub fn gate_weights(&self) -> Option<[f64; 3]> {
        Some([self.w_image?, self.w_geometry?, self.w_text?])
    }
}

/// Predictions for every sample accepted by the model in the given splits.
pub fn predict_all<M: Predictor + ?Sized>(
    model: &M,
    data: &[PreparedSample],
    splits: &[Split],
) -> Result<Vec<PredictionRow>> {
    data.iter()
        .filter(|s| splits.contains(&s.split) && model.accepts(s))
        .map(|s| Ok(PredictionRow::new(s, &model.estimate(s)?)))
        .collect()
}

/// Metrics over `rows`; the top-level row is labelled "Total".
pub fn report(rows: &[PredictionRow], stratify: Stratify) -> Result<MetricsReport> {
    let pairs: Vec<EvalPair> = rows.iter().map(PredictionRow::eval_pair).collect();
    aggregate(&pairs, stratify)
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Mean gate weights over rows that carry them.
pub fn mean_gate_weights(rows: &[PredictionRow]) -> Option<[f64; 3]> {
    let ws: Vec<[f64; 3]> = rows.iter().filter_map(PredictionRow::gate_weights).collect();
    if ws.is_empty() {
        return None;
    }
    let mut m = [0.0; 3];
    for w in &ws {
        for k in 0..3 {
            m[k] += w[k];
        }
    }
    Some(m.map(|x| x / ws.len() as f64))
}

/// Everything a training run produced, serialised as JSON next to its reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config: BTreeMap<String, String>,
    pub epoch_losses: Vec<f64>,
    /// Keyed by split name: "train" and "test".
    pub reports: BTreeMap<String, MetricsReport>,
    pub mean_gate_weights: Option<[f64; 3]>,
    pub checkpoint: Option<String>,
    /// Excluded from reproducibility comparisons.
    pub wall_clock_secs: f64,
    pub notes: Vec<String>,
}

impl RunRecord {
    pub fn test_report(&self) -> Option<&MetricsReport> {
        self.reports.get("test")
    }

    pub fn test_alde(&self) -> f64 {
        self.test_report().map_or(f64::NAN, |r| r.alde)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Output of [`fit_and_evaluate`].
#[derive(Debug, Clone)]
pub struct Fitted<M> {
    pub model: M,
    pub record: RunRecord,
    pub test_predictions: Vec<PredictionRow>,
}

/// Trains, then evaluates on train (unstratified) and test (seen/unseen).
pub fn fit_and_evaluate<M: Trainable>(
    name: &str,
    mut model: M,
    data: &[PreparedSample],
    tc: &TrainConfig,
    config: BTreeMap<String, String>,
) -> Result<Fitted<M>> {
    let start = Instant::now();
    let epoch_losses = train(&mut model, data, tc)?;
    let train_rows = predict_all(&model, data, &[Split::Train])?;
    let test_rows = predict_all(&model, data, &[Split::TestSeen, Split::TestUnseen])?;
    let mut reports = BTreeMap::new();
    reports.insert("train".to_string(), report(&train_rows, Stratify::None)?);
    reports.insert("test".to_string(), report(&test_rows, Stratify::SeenUnseen)?);
    let record = RunRecord {
        name: name.to_string(),
        config,
        epoch_losses,
        reports,
        mean_gate_weights: mean_gate_weights(&test_rows),
        checkpoint: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        notes: Vec::new(),
    };
    Ok(Fitted {
        model,
        record,
        test_predictions: test_rows,
    })
}
