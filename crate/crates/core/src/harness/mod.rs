//! Training and evaluation: Adam, the epoch loop, accuracy reports, the
//! repeated-split protocols and the attention/loss ablation matrix.

mod adam;
mod protocol;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use protocol::{
    ablation_matrix, expected_attention_params, run_protocol, stratified_split, AblationRow, AblationTable,
    ParamCounts, Protocol, ProtocolReport, RunReport,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AudioConfig, Dataset, Sampling};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, pcce, pcce_weights, polarity_gate, weighted_nll_loss, LossConfig, LossKind, Prediction};
use crate::model::{ModelConfig, Vaanet};
use crate::numerics::{Checkpoint, Graph, Real};
use crate::params::Binder;

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub audio: AudioConfig,
    pub lr: Real,
    #[serde(default)]
    pub weight_decay: Real,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub lambda: Real,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-size settings: lr 2e-4, batch 32, 150 epochs, PCCE with λ = 1.
    pub fn paper(classes: usize) -> Self {
        Self {
            model: ModelConfig::paper(classes),
            audio: AudioConfig::default(),
            lr: 2e-4,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 150,
            loss: LossKind::Pcce,
            lambda: 1.0,
            seed: 0,
        }
    }

    /// Laptop-scale settings for the synthetic dataset.
    pub fn desk(classes: usize) -> Self {
        Self {
            model: ModelConfig::desk(classes),
            lr: 1e-3,
            batch_size: 8,
            epochs: 30,
            ..Self::paper(classes)
        }
    }

    /// Smallest useful settings, for tests.
    pub fn micro(classes: usize) -> Self {
        let mut audio = AudioConfig::default();
        audio.mfcc.n_mfcc = 8;
        Self {
            model: ModelConfig::micro(classes),
            audio,
            lr: 1e-3,
            batch_size: 4,
            epochs: 2,
            ..Self::paper(classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(format!(
                "batch_size ({}) and epochs ({}) must be positive",
                self.batch_size, self.epochs
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "lr ({}) must be positive and weight_decay ({}) non-negative",
                self.lr, self.weight_decay
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.audio.mfcc.n_mfcc != self.model.n_mfcc {
            return Err(Error::Config(format!(
                "audio.mfcc.n_mfcc = {} but model.n_mfcc = {}",
                self.audio.mfcc.n_mfcc, self.model.n_mfcc
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean of the optimized objective over batches.
    pub loss: Real,
    /// Cross-entropy and PCCE of every batch, on the parameters before its step.
    pub batch_ce: Vec<Real>,
    pub batch_pcce: Vec<Real>,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_acc: f64,
    /// Deterministic accuracy on the validation indices, when there are any.
    pub val_acc: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub last: Vaanet,
    /// Parameters at the best validation (or training) accuracy.
    pub best: Vaanet,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | epoch as u64);
    rng
}

/// Records loss and gradients for one batch and applies one optimizer step.
/// Returns the objective, CE, PCCE and the training-mode predictions.
fn train_step(
    model: &mut Vaanet,
    opt: &mut Adam,
    batch: &crate::model::Batch,
    kind: LossKind,
    loss_cfg: &LossConfig,
) -> Result<(Real, Real, Real, Vec<usize>)> {
    let mut g = Graph::new().with_finite_check(true);
    let mut b = Binder::new(&model.store, true);
    let out = model.forward(&mut g, &mut b, batch)?;
    let preds = Prediction::batch(g.value(out.logits));
    let ce = cross_entropy(&preds, &batch.labels)?;
    let pc = pcce(&preds, &batch.labels, loss_cfg)?;
    let weights = match kind {
        LossKind::Ce => vec![1.0; batch.len()],
        LossKind::Pcce => pcce_weights(&preds, &batch.labels, loss_cfg)?,
    };
    let loss = weighted_nll_loss(&mut g, out.logits, &batch.labels, &weights)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, v) in b.bound() {
        if let Some(grad) = g.grad(*v) {
            if !grad.is_finite() {
                return Err(Error::Divergence(format!("non-finite gradient for parameter {name}")));
            }
            grads.insert(name.clone(), grad.clone());
        }
    }
    let updates = b.into_updates();
    opt.step(&mut model.store, &grads)?;
    model.store.apply_buffer_updates(updates);
    if let Some((name, _)) = model.store.params.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Divergence(format!("parameter {name} became non-finite after an update")));
    }
    Ok((value, ce, pc, preds.iter().map(|p| p.predicted).collect()))
}

/// Checkpoint metadata written next to the parameters.
fn checkpoint(model: &Vaanet, cfg: &TrainConfig, data: &Dataset, epoch: usize, acc: Option<f64>) -> Result<Checkpoint> {
    model.to_checkpoint(serde_json::json!({
        "epoch": epoch,
        "val_acc": acc,
        "audio": serde_json::to_value(&cfg.audio)?,
        "taxonomy": serde_json::from_str::<serde_json::Value>(&data.manifest.taxonomy.to_json())?,
    }))
}

/// Trains a freshly initialized model; see [`train_from`].
pub fn train(cfg: &TrainConfig, data: &Dataset, train_idx: &[usize], val_idx: &[usize], out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_from(Vaanet::new(cfg.model.clone(), cfg.seed)?, cfg, data, train_idx, val_idx, out)
}

/// Runs `cfg.epochs` epochs of Adam on `train_idx`. With `out`, writes
/// `metrics.jsonl`, `best.ckpt` and `last.ckpt` there.
pub fn train_from(
    mut model: Vaanet,
    cfg: &TrainConfig,
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.cfg.classes != data.manifest.taxonomy.len() {
        return Err(Error::Contract(format!(
            "model has {} classes, dataset taxonomy {}",
            model.cfg.classes,
            data.manifest.taxonomy.len()
        )));
    }
    if train_idx.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let loss_cfg = LossConfig::new(cfg.lambda, data.manifest.taxonomy.clone())?;
    let mut opt = Adam::new(cfg.adam());
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.to_vec();
        order.shuffle(&mut shuffle_rng(cfg.seed, epoch));
        let mode = Sampling::Train { seed: cfg.seed, epoch };
        let (mut total, mut correct) = (0.0, 0usize);
        let (mut batch_ce, mut batch_pcce) = (Vec::new(), Vec::new());
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(chunk, mode, model.cfg.uses_visual())?;
            let (value, ce, pc, predicted) = train_step(&mut model, &mut opt, &batch, cfg.loss, &loss_cfg)?;
            total += value * chunk.len() as Real;
            correct += predicted.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
            batch_ce.push(ce);
            batch_pcce.push(pc);
        }
        let val_acc = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate(&model, data, val_idx, cfg.batch_size)?.average)
        };
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            loss: total / order.len() as Real,
            batch_ce,
            batch_pcce,
            train_acc: correct as f64 / order.len() as f64,
            val_acc,
        };
        let score = metrics.val_acc.unwrap_or(metrics.train_acc);
        if score > best.2 {
            best = (model.clone(), epoch + 1, score);
            if let Some(dir) = out {
                checkpoint(&model, cfg, data, epoch + 1, metrics.val_acc)?.save(dir.join("best.ckpt"))?;
            }
        }
        if let Some(f) = log.as_mut() {
            serde_json::to_writer(&mut *f, &metrics)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        history.push(metrics);
    }
    if let Some(dir) = out {
        let last = history.last().and_then(|m| m.val_acc);
        checkpoint(&model, cfg, data, cfg.epochs, last)?.save(dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome {
        last: model,
        best: best.0,
        best_epoch: best.1,
        history,
    })
}

/// Accuracy summary over a labelled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    /// `None` for classes absent from the set.
    pub per_class: Vec<Option<f64>>,
    pub support: Vec<usize>,
    /// Correct over total.
    pub average: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Fraction of samples predicted with the wrong polarity.
    pub polarity_violation_rate: f64,
    pub total: usize,
}

impl EvalReport {
    pub fn from_predictions(tax: &crate::loss::EmotionTaxonomy, predicted: &[usize], labels: &[usize]) -> Result<Self> {
        let c = tax.len();
        let mut confusion = vec![vec![0usize; c]; c];
        let mut violations = 0usize;
        for (&p, &y) in predicted.iter().zip(labels) {
            confusion[y][p] += 1;
            violations += polarity_gate(p, y, tax)? as usize;
        }
        let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let total = labels.len();
        let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
        let rate = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
        Ok(Self {
            classes: tax.classes().to_vec(),
            per_class: (0..c)
                .map(|i| (support[i] > 0).then(|| confusion[i][i] as f64 / support[i] as f64))
                .collect(),
            support,
            average: rate(correct),
            confusion,
            polarity_violation_rate: rate(violations),
            total,
        })
    }

    /// Aligned plain-text rendering: per-class accuracies, then the confusion matrix.
    pub fn to_text(&self) -> String {
        let w = self.classes.iter().map(String::len).max().unwrap_or(0).max(7);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>8}  {:>7}", "class", "accuracy", "support");
        for (i, name) in self.classes.iter().enumerate() {
            let acc = self.per_class[i].map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
            let _ = writeln!(s, "{name:<w$}  {acc:>8}  {:>7}", self.support[i]);
        }
        let _ = writeln!(s, "{:<w$}  {:>8.2}  {:>7}", "average", 100.0 * self.average, self.total);
        let _ = writeln!(s, "polarity violations: {:.2}%", 100.0 * self.polarity_violation_rate);
        let _ = writeln!(s, "\nconfusion (rows truth, columns predicted)");
        let cw = self.confusion.iter().flatten().map(|n| n.to_string().len()).max().unwrap_or(1).max(3);
        for (i, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|n| format!("{n:>cw$}")).collect();
            let _ = writeln!(s, "{:<w$}  {}", self.classes[i], cells.join(" "));
        }
        s
    }
}

/// Eval-mode predictions for `indices`, in order.
pub fn predict(model: &Vaanet, data: &Dataset, indices: &[usize], batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk, Sampling::Eval, model.cfg.uses_visual())?;
        let (logits, _) = model.predict(&batch)?;
        out.extend(Prediction::batch(&logits).iter().map(|p| p.predicted));
    }
    Ok(out)
}

/// Deterministic center-snippet evaluation.
pub fn evaluate(model: &Vaanet, data: &Dataset, indices: &[usize], batch_size: usize) -> Result<EvalReport> {
    let tax = &data.manifest.taxonomy;
    if model.cfg.classes != tax.len() {
        return Err(Error::Contract(format!(
            "model predicts {} classes, dataset taxonomy has {}",
            model.cfg.classes,
            tax.len()
        )));
    }
    let predicted = predict(model, data, indices, batch_size)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.label(i)).collect();
    EvalReport::from_predictions(tax, &predicted, &labels)
}

/// Loads a dataset whose media match the model's input geometry.
pub fn load_dataset(cfg: &TrainConfig, manifest: crate::data::DatasetManifest) -> Result<Dataset> {
    Dataset::load(manifest, &cfg.model, &cfg.audio)
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}
