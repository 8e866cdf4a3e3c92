//! Dynamic-time training, RAdam with Lookahead, and the evaluation protocol.

mod data;
mod eval;
mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::Slot;
use crate::losses::{self, LossConfig, LossReport};
use crate::model::{Normalization, TrafficModel};
use crate::{Error, Result};

pub use data::{crop_example, sample_slot, Batch, Dataset, Example, TileData};
pub use eval::{
    argmax_bins, evaluate, f1, mae, mean_target, predict_segments, r2, rmse, top1,
    ConstantPredictor, EvalReport, NetworkPredictor, OraclePredictor, Predictor, SlotMetrics,
    TilePrediction, TimePolicy,
};
pub use optim::{Lookahead, LookaheadConfig, Optimizer, RAdam, RAdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Clamped to the tile size when larger.
    pub crop_size: usize,
    pub seed: u64,
    /// Steps per epoch; by default one pass over the training tiles.
    pub steps_per_epoch: Option<usize>,
    pub optimizer: RAdamConfig,
    pub lookahead: LookaheadConfig,
    /// Validation slots used for model selection.
    pub validation: TimePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 20,
            crop_size: 64,
            seed: 0,
            steps_per_epoch: None,
            optimizer: RAdamConfig::default(),
            lookahead: LookaheadConfig::default(),
            validation: TimePolicy::default_macro(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, multiple: usize) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::Config(
                "batch_size, epochs and steps_per_epoch must be positive".into(),
            ));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(multiple) {
            return Err(Error::Config(format!(
                "crop_size {} is not a multiple of {multiple}",
                self.crop_size
            )));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub road: f64,
    pub orientation: f64,
    pub speed: f64,
    pub reg: f64,
    pub total: f64,
}

impl LogRow {
    fn new(epoch: usize, step: usize, r: &LossReport) -> Self {
        Self {
            epoch,
            step,
            road: r.road,
            orientation: r.orientation,
            speed: r.speed,
            reg: r.reg,
            total: r.total,
        }
    }
}

pub fn write_log<W: Write>(rows: &[LogRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation speed RMSE.
    pub model: TrafficModel,
    pub log: Vec<LogRow>,
    /// Validation RMSE after each epoch, when a validation split exists.
    pub val_rmse: Vec<f64>,
    pub best_epoch: usize,
}

/// One optimizer step on a prepared batch; returns the pre-step losses.
pub fn train_step(
    model: &mut TrafficModel,
    opt: &mut Optimizer,
    batch: &Batch,
    loss: &LossConfig,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let (out, bn) = model.forward(&mut tape, &batch.images, &batch.contexts, true)?;
    let (total, report) = losses::total_loss(&mut tape, &out, &batch.targets, loss)?;
    if !report.total.is_finite() {
        return Err(Error::domain("training loss diverged"));
    }
    tape.backward(total)?;
    model.params.zero_grad();
    tape.accumulate_into(&mut model.params);
    opt.step(&mut model.params)?;
    model.apply_bn_updates(&bn);
    Ok(report)
}

/// Loss of a batch without touching the model.
pub fn batch_loss(
    model: &TrafficModel,
    batch: &Batch,
    loss: &LossConfig,
    train_mode: bool,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let (out, _) = model.forward(&mut tape, &batch.images, &batch.contexts, train_mode)?;
    Ok(losses::total_loss(&mut tape, &out, &batch.targets, loss)?.1)
}

/// Draws one example: a tile, a random crop, and a slot with supervision on that tile.
pub fn draw_example<R: Rng>(
    rng: &mut R,
    data: &Dataset,
    tile: &TileData,
    crop: usize,
) -> Result<Example> {
    let size = tile.size();
    let crop = crop.min(size);
    let r0 = rng.random_range(0..=size - crop);
    let c0 = rng.random_range(0..=size - crop);
    let slot = sample_slot(rng, &tile.slots)
        .unwrap_or_else(|| Slot::from_index(rng.random_range(0..crate::dataset::SLOTS)));
    crop_example(tile, &data.table, slot, r0, c0, crop)
}

pub fn train(
    mut model: TrafficModel,
    data: &Dataset,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome> {
    loss.validate()?;
    model.config.validate()?;
    let train_tiles: Vec<&TileData> = data
        .split
        .train
        .iter()
        .map(|t| data.tile(t))
        .collect::<Result<_>>()?;
    if train_tiles.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    if train_tiles.iter().all(|t| t.slots.is_empty()) {
        return Err(Error::Config(
            "no training tile has any supervised slot".into(),
        ));
    }
    let full = train_tiles.iter().map(|t| t.size()).min().unwrap_or(0);
    let crop = cfg.crop_size.min(full);
    cfg.validate(model.config.size_multiple())?;
    if crop % model.config.size_multiple() != 0 {
        return Err(Error::Config(format!(
            "tile size {full} is not a multiple of {}",
            model.config.size_multiple()
        )));
    }
    model.norm = Normalization::fit(&data.train_centers()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lookahead, &model.params)?;
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| train_tiles.len().div_ceil(cfg.batch_size));
    let predictor_k = loss.effective_k();
    let mut log = Vec::with_capacity(cfg.epochs * steps);
    let mut val_rmse = Vec::new();
    let mut best: Option<(f64, usize, TrafficModel)> = None;
    let mut order: Vec<usize> = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..steps {
            let mut examples = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                if order.is_empty() {
                    order = (0..train_tiles.len()).collect();
                    order.shuffle(&mut rng);
                }
                let tile = train_tiles[order.pop().expect("refilled above")];
                examples.push(draw_example(&mut rng, data, tile, crop)?);
            }
            let batch = Batch::from_examples(examples, model.config.in_channels)?;
            let report = train_step(&mut model, &mut opt, &batch, loss)?;
            log.push(LogRow::new(epoch, step, &report));
            step += 1;
        }
        if !data.split.val.is_empty() {
            let p = NetworkPredictor {
                model: &model,
                k: predictor_k,
            };
            let r = evaluate(&p, data, &data.split.val, &cfg.validation)?;
            val_rmse.push(r.rmse);
            if best.as_ref().is_none_or(|b| r.rmse < b.0) {
                best = Some((r.rmse, epoch, model.clone()));
            }
        }
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, cfg.epochs - 1),
    };
    Ok(TrainOutcome {
        model,
        log,
        val_rmse,
        best_epoch,
    })
}
