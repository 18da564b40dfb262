//! Training loop: seeded initialization, per-epoch shuffling, batched
//! gradient accumulation, RMSprop updates with a piecewise-constant learning
//! rate schedule, metric renormalization after every step, checkpointing,
//! and per-epoch history logging.
//!
//! Everything is deterministic: (config, dataset) fully determine the final
//! parameters and the history.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metric_grouping::{renormalize_metric, MetricParams};
use crate::model::{
    forward, loss_and_grads, mean_pool_forward, mean_pool_loss_and_grads, AggMode, Gradients,
    LossConfig, ModelDims, ModelParams, PipelineKind,
};
use crate::numerics::{rmsprop_step, Matrix, RmspropState, SeededStream};

/// Magic bytes at the start of every checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FMCP";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// One span of the learning-rate schedule; epochs are 1-based and inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSpan {
    pub start: usize,
    pub end: usize,
    pub lr: f64,
}

/// The default schedule: 1e-5 for epochs 1–50, 5e-6 for 51–75, 1e-6 for
/// 76–100. Tuned for pretrained features; from-scratch runs usually override
/// it with a constant rate.
pub fn default_lr_schedule() -> Vec<LrSpan> {
    vec![
        LrSpan { start: 1, end: 50, lr: 1e-5 },
        LrSpan { start: 51, end: 75, lr: 5e-6 },
        LrSpan { start: 76, end: 100, lr: 1e-6 },
    ]
}

/// Training configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub seed: u64,
    pub lr_schedule: Vec<LrSpan>,
    /// Metric rank; `None` selects min(encoder_dim, 64).
    pub rank: Option<usize>,
    pub agg_mode: AggMode,
    pub encoder_dim: usize,
    pub pipeline: PipelineKind,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 2,
            gamma: 0.1,
            seed: 0,
            lr_schedule: default_lr_schedule(),
            rank: None,
            agg_mode: AggMode::CentroidWeighted,
            encoder_dim: 32,
            pipeline: PipelineKind::Full,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite and >= 0".into()));
        }
        if self.encoder_dim == 0 {
            return Err(Error::Config("encoder_dim must be >= 1".into()));
        }
        if self.lr_schedule.is_empty() {
            return Err(Error::Config("empty learning-rate schedule".into()));
        }
        for span in &self.lr_schedule {
            if span.lr <= 0.0 {
                return Err(Error::Config(format!("learning rate {} must be > 0", span.lr)));
            }
            if span.start == 0 || span.end < span.start {
                return Err(Error::Config(format!(
                    "bad schedule span {}..{}",
                    span.start, span.end
                )));
            }
        }
        // spans must cover 1..=epochs without overlap
        let mut covered = vec![false; self.epochs];
        for span in &self.lr_schedule {
            for e in span.start..=span.end.min(self.epochs) {
                if covered[e - 1] {
                    return Err(Error::Config(format!("schedule overlaps at epoch {e}")));
                }
                covered[e - 1] = true;
            }
        }
        if let Some(gap) = covered.iter().position(|&c| !c) {
            return Err(Error::Config(format!("schedule leaves epoch {} uncovered", gap + 1)));
        }
        Ok(())
    }

    /// Piecewise-constant learning-rate lookup; 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch == 0 || epoch > self.epochs {
            return Err(Error::Config(format!(
                "epoch {epoch} outside 1..={}",
                self.epochs
            )));
        }
        self.lr_schedule
            .iter()
            .find(|s| s.start <= epoch && epoch <= s.end)
            .map(|s| s.lr)
            .ok_or_else(|| Error::Config(format!("no learning rate for epoch {epoch}")))
    }

    pub fn resolved_rank(&self) -> usize {
        self.rank.unwrap_or_else(|| MetricParams::default_rank(self.encoder_dim))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { gamma: self.gamma, agg_mode: self.agg_mode }
    }
}

/// Per-epoch training statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub mean_d_reg: f64,
    pub degenerate_fraction: f64,
    pub lr: f64,
}

/// Full training history, one entry per completed epoch.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// Writes the history as CSV with columns
    /// epoch, loss, train_acc, val_acc, mean_d_reg, lr.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,loss,train_acc,val_acc,mean_d_reg,lr\n");
        for e in &self.epochs {
            let val = e.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.mean_loss, e.train_accuracy, val, e.mean_d_reg, e.lr
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

fn accuracy_on(params: &ModelParams, ds: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let loss_cfg = cfg.loss_config();
    let mut correct = 0usize;
    for bag in &ds.bags {
        let pred = match cfg.pipeline {
            PipelineKind::Full => forward(params, bag, &loss_cfg)?.predicted(),
            PipelineKind::MeanPool => mean_pool_forward(params, bag)?.0.argmax(),
        };
        if pred == bag.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

struct OptimizerStates {
    encoder_w: RmspropState,
    encoder_b: RmspropState,
    head_w: RmspropState,
    head_b: RmspropState,
    metric_a: RmspropState,
}

impl OptimizerStates {
    fn new(dims: &ModelDims, decay: f64, epsilon: f64) -> Result<Self> {
        Ok(OptimizerStates {
            encoder_w: RmspropState::new(dims.encoder_dim * dims.d_in, decay, epsilon)?,
            encoder_b: RmspropState::new(dims.encoder_dim, decay, epsilon)?,
            head_w: RmspropState::new(dims.num_classes * dims.encoder_dim, decay, epsilon)?,
            head_b: RmspropState::new(dims.num_classes, decay, epsilon)?,
            metric_a: RmspropState::new(dims.rank * dims.encoder_dim, decay, epsilon)?,
        })
    }
}

fn apply_update(
    params: &mut ModelParams,
    grads: &Gradients,
    states: &mut OptimizerStates,
    lr: f64,
) -> Result<()> {
    rmsprop_step(params.encoder.weights.data_mut(), grads.encoder_w.data(), &mut states.encoder_w, lr)?;
    rmsprop_step(&mut params.encoder.bias, &grads.encoder_b, &mut states.encoder_b, lr)?;
    rmsprop_step(params.head.weights.data_mut(), grads.head_w.data(), &mut states.head_w, lr)?;
    rmsprop_step(&mut params.head.bias, &grads.head_b, &mut states.head_b, lr)?;
    rmsprop_step(params.metric.factor_mut().data_mut(), grads.metric_a.data(), &mut states.metric_a, lr)?;
    // keep the metric on the Frobenius sphere after every step
    renormalize_metric(&mut params.metric)?;
    Ok(())
}

/// Trains a model on `train_ds`, optionally reporting validation accuracy
/// per epoch. Deterministic given (cfg, datasets).
pub fn train(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    let dims = ModelDims {
        d_in: train_ds.feature_dim,
        encoder_dim: cfg.encoder_dim,
        num_classes: train_ds.num_classes,
        rank: cfg.resolved_rank(),
    };
    let mut stream = SeededStream::new(cfg.seed);
    let mut params = ModelParams::init(&dims, &mut stream)?;
    let mut states = OptimizerStates::new(&dims, cfg.rmsprop_decay, cfg.rmsprop_epsilon)?;
    let loss_cfg = cfg.loss_config();

    let mut history = TrainHistory::default();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch)?;
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        SeededStream::derived(cfg.seed, epoch as u64).shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut d_reg_sum = 0.0;
        let mut degenerate = 0usize;
        let mut correct = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let mut batch_grads = Gradients::zeros(&dims);
            for &bi in batch {
                let bag = &train_ds.bags[bi];
                let (loss, grads, predicted, d_reg, is_degenerate) = match cfg.pipeline {
                    PipelineKind::Full => {
                        let (loss, grads, trace) = loss_and_grads(&params, bag, bag.label, &loss_cfg)?;
                        (loss, grads, trace.predicted(), trace.d_reg, trace.degenerate())
                    }
                    PipelineKind::MeanPool => {
                        let (loss, grads, probs) = mean_pool_loss_and_grads(&params, bag, bag.label)?;
                        (loss, grads, probs.argmax(), 0.0, false)
                    }
                };
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch}, bag {}",
                        bag.bag_id
                    )));
                }
                loss_sum += loss;
                d_reg_sum += d_reg;
                degenerate += usize::from(is_degenerate);
                correct += usize::from(predicted == bag.label);
                batch_grads.add_scaled(&grads, 1.0);
            }
            batch_grads.scale(1.0 / batch.len() as f64);
            apply_update(&mut params, &batch_grads, &mut states, lr)?;
        }

        let n = train_ds.len() as f64;
        let val_accuracy = match val_ds {
            Some(ds) => Some(accuracy_on(&params, ds, cfg)?),
            None => None,
        };
        history.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_accuracy,
            mean_d_reg: d_reg_sum / n,
            degenerate_fraction: degenerate as f64 / n,
            lr,
        });
    }
    Ok((params, history))
}

/// Checkpoint header (JSON), followed by binary f64 blobs for the encoder,
/// head, and metric factor in declared order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub d_in: usize,
    pub encoder_dim: usize,
    pub num_classes: usize,
    pub rank: usize,
    pub agg_mode: AggMode,
    pub gamma: f64,
    pub seed: u64,
    pub epoch: usize,
    pub pipeline: PipelineKind,
}

impl CheckpointMeta {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_in: self.d_in,
            encoder_dim: self.encoder_dim,
            num_classes: self.num_classes,
            rank: self.rank,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { gamma: self.gamma, agg_mode: self.agg_mode }
    }
}

fn push_floats(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes a checkpoint: magic, version, u32 header length, JSON header, then
/// f64 blobs (encoder weights, encoder bias, head weights, head bias, A).
pub fn save_checkpoint(params: &ModelParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let dims = params.dims();
    if dims != meta.dims() {
        return Err(Error::Dimension(format!(
            "checkpoint meta {:?} does not match params {:?}",
            meta.dims(),
            dims
        )));
    }
    let header = serde_json::to_vec(meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    push_floats(&mut buf, params.encoder.weights.data());
    push_floats(&mut buf, &params.encoder.bias);
    push_floats(&mut buf, params.head.weights.data());
    push_floats(&mut buf, &params.head.bias);
    push_floats(&mut buf, params.metric.factor().data());
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |offset: usize, message: String| Error::Format { offset: offset as u64, message };
    if bytes.len() < 12 {
        return Err(fail(bytes.len(), "truncated checkpoint header".into()));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(4, format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if 12 + header_len > bytes.len() {
        return Err(fail(12, "truncated checkpoint header".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..12 + header_len])?;
    let dims = meta.dims();
    let counts = [
        dims.encoder_dim * dims.d_in,
        dims.encoder_dim,
        dims.num_classes * dims.encoder_dim,
        dims.num_classes,
        dims.rank * dims.encoder_dim,
    ];
    let total: usize = counts.iter().sum();
    let blob_start = 12 + header_len;
    if bytes.len() != blob_start + total * 8 {
        return Err(fail(
            bytes.len().min(blob_start + total * 8),
            format!(
                "checkpoint payload is {} bytes, expected {}",
                bytes.len() - blob_start,
                total * 8
            ),
        ));
    }
    let mut offset = blob_start;
    let mut read_block = |count: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(count);
        for chunk in bytes[offset..offset + count * 8].chunks_exact(8) {
            out.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        offset += count * 8;
        out
    };
    let encoder_w = read_block(counts[0]);
    let encoder_b = read_block(counts[1]);
    let head_w = read_block(counts[2]);
    let head_b = read_block(counts[3]);
    let metric_a = read_block(counts[4]);
    let params = ModelParams {
        encoder: crate::model::LinearLayer::new(
            Matrix::from_vec(dims.encoder_dim, dims.d_in, encoder_w)?,
            encoder_b,
        )?,
        head: crate::model::LinearLayer::new(
            Matrix::from_vec(dims.num_classes, dims.encoder_dim, head_w)?,
            head_b,
        )?,
        metric: MetricParams::new(Matrix::from_vec(dims.rank, dims.encoder_dim, metric_a)?)?,
    };
    Ok((params, meta))
}
