//! Deterministic training, evaluation, threshold sweep and ablation.
//!
//! Every number produced here is a pure function of (seed, config, data):
//! shuffling, weight init and dropout all draw from streams derived from the
//! config seed, and batch members may be evaluated on worker threads only
//! because their results are reduced in a fixed order afterwards.

use rayon::prelude::*;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, aggregate_cells, aggregate_pooled, binarize, confusion, ConfusionCounts,
    MetricReport, MetricRow,
};
use crate::network::{
    model_forward_on, ForwardSession, Mode, ModelConfig, ModelNodes, ModelParams,
};
use crate::tape::{BnStats, Tape};
use crate::tensor::Tensor;

/// Pixelwise loss selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Dice,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Bce => "bce",
            LossKind::Dice => "dice",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "dice" => Ok(LossKind::Dice),
            other => Err(Error::invalid(format!(
                "unknown loss `{other}` (expected bce or dice)"
            ))),
        }
    }
}

/// Full training-run configuration. The model seed also drives the data
/// split, epoch shuffles and dropout streams.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            lr: 1e-3,
            batch_size: 6,
            epochs: 30,
            loss: LossKind::Bce,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid(format!("learning rate {} invalid", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid(format!(
                "val_fraction {} outside [0,1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_iou: f64,
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters at the best validation IoU.
    pub params: ModelParams,
    /// Parameters after the final step.
    pub final_params: ModelParams,
    pub logs: Vec<EpochLog>,
    /// Mean loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_val_iou: f64,
    pub best_epoch: usize,
}

impl TrainResult {
    /// The training log as CSV.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,val_iou\n");
        for log in &self.logs {
            out.push_str(&format!(
                "{},{:.6},{:.4}\n",
                log.epoch, log.mean_loss, log.val_iou
            ));
        }
        out
    }
}

/// Adam optimizer over the flat parameter list.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid("optimizer state does not match parameters"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((tensor, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((theta, &g), (mi, vi)) in tensor
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// stream tags separating the derived RNG seeds
const SPLIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    z = (z ^ (z >> 33)).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    z ^ (z >> 33)
}

fn derive_seed(base: u64, a: u64, b: u64, c: u64) -> u64 {
    mix(base ^ mix(a ^ mix(b ^ mix(c))))
}

/// Deterministic train/validation index split. With a zero validation
/// fraction the validation set falls back to the training set.
pub fn split_dataset(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SPLIT_STREAM, 0, 0));
    indices.shuffle(&mut rng);
    let mut val_count = (n as f64 * val_fraction).round() as usize;
    if val_count >= n {
        val_count = n - 1;
    }
    let val: Vec<usize> = indices[..val_count].to_vec();
    let train: Vec<usize> = indices[val_count..].to_vec();
    if val.is_empty() {
        (train.clone(), train)
    } else {
        (train, val)
    }
}

struct SamplePass {
    loss: f64,
    grads: Vec<Vec<f64>>,
    bn_updates: Vec<BnStats>,
}

fn sample_pass(
    params: &ModelParams,
    cfg: &TrainConfig,
    sample: &Sample,
    dropout_seed: u64,
) -> Result<SamplePass> {
    let mut tape = Tape::new();
    let image = tape.leaf(sample.image.clone(), false);
    let nodes = ModelNodes::insert(&mut tape, params, true);
    let mut session = ForwardSession::train(ChaCha8Rng::seed_from_u64(dropout_seed));
    let out = model_forward_on(&mut tape, image, &nodes, params, &cfg.model, &mut session)?;
    let loss = match cfg.loss {
        LossKind::Bce => tape.bce_with_logits(out.logits, &sample.mask)?,
        LossKind::Dice => tape.dice_loss(out.probs, &sample.mask, 1.0)?,
    };
    let loss_val = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = nodes
        .flat()
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
        })
        .collect();
    // bn sites are encountered deepest-first; store them in level order
    let mut bn_updates = session.bn_updates;
    bn_updates.reverse();
    Ok(SamplePass {
        loss: loss_val,
        grads,
        bn_updates,
    })
}

const BN_MOMENTUM: f64 = 0.9;

/// Train a model on `data`, tracking the best validation IoU.
pub fn train(cfg: &TrainConfig, data: &[Sample]) -> Result<TrainResult> {
    train_with_progress(cfg, data, |_| {})
}

/// [`train`] with a per-epoch progress callback.
pub fn train_with_progress(
    cfg: &TrainConfig,
    data: &[Sample],
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    let size = cfg.model.input_size;
    for s in data {
        if s.image.shape() != [1, size, size] || s.mask.shape() != [1, size, size] {
            return Err(Error::invalid(format!(
                "sample {} has shape {:?}, config expects [1,{size},{size}]",
                s.id,
                s.image.shape()
            )));
        }
    }

    let seed = cfg.model.seed;
    let (train_idx, val_idx) = split_dataset(data.len(), cfg.val_fraction, seed);
    let mut params = ModelParams::init(&cfg.model)?;
    let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(cfg.lr, &sizes);

    let mut best = params.clone();
    let mut best_val_iou = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut global_step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_STREAM, epoch as u64, 0));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let step = global_step;
            let passes: Result<Vec<SamplePass>> = chunk
                .par_iter()
                .map(|&i| {
                    let dropout_seed = derive_seed(seed, epoch as u64, step, i as u64);
                    sample_pass(&params, cfg, &data[i], dropout_seed).map_err(|e| {
                        e.with_context(format!("epoch {epoch} step {step} sample {}", data[i].id))
                    })
                })
                .collect();
            let passes = passes?;

            // fixed-order reductions keep parallel evaluation bit-identical
            // to sequential
            let inv = 1.0 / passes.len() as f64;
            let batch_loss: f64 = passes.iter().map(|p| p.loss).sum::<f64>() * inv;
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for pass in &passes {
                for (acc, g) in grads.iter_mut().zip(&pass.grads) {
                    for (a, &gv) in acc.iter_mut().zip(g) {
                        *a += gv;
                    }
                }
            }
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }

            let mut tensors = params.tensors_mut();
            adam.step(&mut tensors, &grads)?;

            // fold the batch's normalization statistics into the running
            // averages, one update per batch
            let n_bn = passes[0].bn_updates.len();
            for layer in 0..n_bn {
                let channels = passes[0].bn_updates[layer].mean.len();
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for pass in &passes {
                    for c in 0..channels {
                        mean[c] += pass.bn_updates[layer].mean[c];
                        var[c] += pass.bn_updates[layer].var[c];
                    }
                }
                for c in 0..channels {
                    mean[c] *= inv;
                    var[c] *= inv;
                }
                let mut stats = params.stats_mut();
                for c in 0..channels {
                    stats[layer].mean[c] =
                        BN_MOMENTUM * stats[layer].mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
                    stats[layer].var[c] =
                        BN_MOMENTUM * stats[layer].var[c] + (1.0 - BN_MOMENTUM) * var[c];
                }
            }

            if !params.all_finite() {
                return Err(Error::non_finite("adam step")
                    .with_context(format!("epoch {epoch} step {global_step}")));
            }
            step_losses.push(batch_loss);
            epoch_loss += batch_loss;
            batches += 1;
            global_step += 1;
        }

        let report = evaluate_subset(&params, &cfg.model, data, &val_idx, false)?;
        let log = EpochLog {
            epoch,
            mean_loss: epoch_loss / batches.max(1) as f64,
            val_iou: report.mean.iou,
        };
        progress(&log);
        if log.val_iou > best_val_iou {
            best_val_iou = log.val_iou;
            best = params.clone();
            best_epoch = epoch;
        }
        logs.push(log);
    }

    Ok(TrainResult {
        params: best,
        final_params: params,
        logs,
        step_losses,
        best_val_iou,
        best_epoch,
    })
}

/// Eval-mode forward + binarize + metrics for every sample; aggregate
/// per-image (default) or over pooled pixel counts.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    data: &[Sample],
    pooled: bool,
) -> Result<MetricReport> {
    let all: Vec<usize> = (0..data.len()).collect();
    evaluate_subset(params, cfg, data, &all, pooled)
}

fn evaluate_subset(
    params: &ModelParams,
    cfg: &ModelConfig,
    data: &[Sample],
    indices: &[usize],
    pooled: bool,
) -> Result<MetricReport> {
    if indices.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let results: Result<Vec<(String, MetricRow, ConfusionCounts)>> = indices
        .par_iter()
        .map(|&i| {
            let sample = &data[i];
            let probs = crate::network::model_forward(&sample.image, params, cfg, Mode::Eval)
                .map_err(|e| e.with_context(format!("sample {}", sample.id)))?;
            let pred = binarize(&probs, 0.5)?;
            let counts = confusion(&pred, &sample.mask)?;
            Ok((sample.id.clone(), MetricRow::from_counts(&counts), counts))
        })
        .collect();
    let mut results = results?;
    results.sort_by(|a, b| a.0.cmp(&b.0));

    let rows: Vec<(String, MetricRow)> = results.iter().map(|(id, row, _)| (id.clone(), *row)).collect();
    if pooled {
        let mut total = ConfusionCounts::default();
        for (_, _, c) in &results {
            total.merge(c);
        }
        aggregate_pooled(rows, &total)
    } else {
        aggregate(rows)
    }
}

/// One row of a sweep or ablation table.
#[derive(Debug, Clone)]
pub struct VariantRow {
    pub label: String,
    pub mean: MetricRow,
    pub std: MetricRow,
}

/// Threshold-sweep output: one trained model per shrinkage value, evaluated
/// on the shared held-out split.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<VariantRow>,
    /// Qualitative shape of the IoU-vs-threshold curve; reported, not
    /// asserted.
    pub trend: String,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("th,dsc,iou,sen,spec,acc\n");
        for row in &self.rows {
            out.push_str(&format!("{},{}\n", row.label, aggregate_cells(&row.mean, &row.std)));
        }
        out
    }
}

/// Train one model per threshold from an identical seed and report the
/// held-out metrics per value.
pub fn sweep_threshold(
    base: &TrainConfig,
    th_values: &[f64],
    data: &[Sample],
) -> Result<SweepReport> {
    if th_values.len() < 2 {
        return Err(Error::invalid("threshold sweep needs at least two values"));
    }
    let (_, val_idx) = split_dataset(data.len(), base.val_fraction, base.model.seed);
    let mut rows = Vec::with_capacity(th_values.len());
    for &th in th_values {
        let mut cfg = base.clone();
        cfg.model.th = th;
        let result = train(&cfg, data)?;
        let report = evaluate_subset(&result.params, &cfg.model, data, &val_idx, false)?;
        rows.push(VariantRow {
            label: format!("{th}"),
            mean: report.mean,
            std: report.std,
        });
    }
    let ious: Vec<f64> = rows.iter().map(|r| r.mean.iou).collect();
    let trend = format!(
        "iou across th {:?}: {} (expected shape: rise then fall)",
        th_values,
        classify_trend(&ious)
    );
    Ok(SweepReport { rows, trend })
}

/// Ablation output for the full / no-encoder-attention /
/// no-decoder-attention variants.
#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<VariantRow>,
    /// Whether held-out IoU satisfied full >= no_tatt >= no_datt within the
    /// tolerance band; an expectation, never a hard gate.
    pub ordering_holds: bool,
    pub ordering: String,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,dsc,iou,sen,spec,acc\n");
        for row in &self.rows {
            out.push_str(&format!("{},{}\n", row.label, aggregate_cells(&row.mean, &row.std)));
        }
        out
    }
}

const ORDERING_BAND: f64 = 0.02;

/// Train the full model and both ablations from identical seeds.
pub fn ablate(base: &TrainConfig, data: &[Sample]) -> Result<AblationReport> {
    let (_, val_idx) = split_dataset(data.len(), base.val_fraction, base.model.seed);
    let variants: [(&str, bool, bool); 3] = [
        ("full", true, true),
        ("no_tatt", false, true),
        ("no_datt", true, false),
    ];
    let mut rows = Vec::with_capacity(3);
    for (label, enc, dec) in variants {
        let mut cfg = base.clone();
        cfg.model.enable_encoder_attention = enc;
        cfg.model.enable_decoder_attention = dec;
        let result = train(&cfg, data)?;
        let report = evaluate_subset(&result.params, &cfg.model, data, &val_idx, false)?;
        rows.push(VariantRow {
            label: label.to_string(),
            mean: report.mean,
            std: report.std,
        });
    }
    let (full, no_tatt, no_datt) = (rows[0].mean.iou, rows[1].mean.iou, rows[2].mean.iou);
    let ordering_holds =
        full >= no_tatt - ORDERING_BAND && no_tatt >= no_datt - ORDERING_BAND;
    let ordering = format!(
        "held-out iou: full {full:.4}, no_tatt {no_tatt:.4}, no_datt {no_datt:.4}; \
         expected ordering full >= no_tatt >= no_datt (band {ORDERING_BAND}): {}",
        if ordering_holds { "holds" } else { "does not hold" }
    );
    Ok(AblationReport {
        rows,
        ordering_holds,
        ordering,
    })
}

fn classify_trend(values: &[f64]) -> &'static str {
    let peak = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite metrics"))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let rising = values.windows(2).all(|w| w[0] <= w[1]);
    let falling = values.windows(2).all(|w| w[0] >= w[1]);
    let rise_then_fall = values[..=peak].windows(2).all(|w| w[0] <= w[1])
        && values[peak..].windows(2).all(|w| w[0] >= w[1]);
    if rising {
        "monotonically non-decreasing"
    } else if falling {
        "monotonically non-increasing"
    } else if rise_then_fall {
        "rises then falls"
    } else {
        "mixed"
    }
}
