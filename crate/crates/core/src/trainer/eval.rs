use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::dataset::{Slot, SynthWorld};
use crate::geo::TileIndex;
use crate::losses::LossConfig;
use crate::model::{compose_speed, ContextInput, TrafficModel};
use crate::{Error, Result};

use super::data::{sample_slot, Dataset, TileData};

fn check(y: &[f64], p: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::domain("metrics need at least one value"));
    }
    if y.len() != p.len() {
        return Err(Error::shape(format!(
            "{} targets but {} predictions",
            y.len(),
            p.len()
        )));
    }
    Ok(())
}

pub fn rmse(y: &[f64], p: &[f64]) -> Result<f64> {
    check(y, p)?;
    Ok((y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt())
}

pub fn mae(y: &[f64], p: &[f64]) -> Result<f64> {
    check(y, p)?;
    Ok(y.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Coefficient of determination; constant targets leave it undefined.
pub fn r2(y: &[f64], p: &[f64]) -> Result<f64> {
    check(y, p)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::domain("R² is undefined for zero-variance targets"));
    }
    let ss_res: f64 = y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// F1 of probabilities thresholded at 0.5 against a binary mask. Two empty masks score 1.
pub fn f1(truth: &[u8], prob: &[f64]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::domain("metrics need at least one value"));
    }
    if truth.len() != prob.len() {
        return Err(Error::shape("mask and prediction sizes differ"));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (t, p) in truth.iter().zip(prob) {
        match (*t != 0, *p >= 0.5) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

pub fn top1(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::domain("metrics need at least one value"));
    }
    if truth.len() != pred.len() {
        return Err(Error::shape("label and prediction counts differ"));
    }
    Ok(truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
}

/// Network or oracle output for one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePrediction {
    /// Road probability per pixel, row-major.
    pub road: Vec<f64>,
    /// Predicted orientation bin per pixel.
    pub orient: Vec<usize>,
    /// For each requested slot, the mean speed over each footprint.
    pub segment_speeds: Vec<BTreeMap<String, f64>>,
}

pub trait Predictor {
    fn k_bins(&self) -> usize;
    fn predict(&self, tile: &TileData, slots: &[Slot]) -> Result<TilePrediction>;
}

/// The network, composing its K speed channels with each footprint pixel's own angle.
#[derive(Debug, Clone, Copy)]
pub struct NetworkPredictor<'a> {
    pub model: &'a TrafficModel,
    pub k: f64,
}

impl<'a> NetworkPredictor<'a> {
    pub fn new(model: &'a TrafficModel, loss: &LossConfig) -> Self {
        Self {
            model,
            k: loss.effective_k(),
        }
    }
}

impl Predictor for NetworkPredictor<'_> {
    fn k_bins(&self) -> usize {
        self.model.config.k_bins
    }

    fn predict(&self, tile: &TileData, slots: &[Slot]) -> Result<TilePrediction> {
        let img = &tile.image;
        let n = slots.len().max(1);
        let plane = img.channels * img.height * img.width;
        let mut data = Vec::with_capacity(n * plane);
        for _ in 0..n {
            data.extend_from_slice(&img.data);
        }
        let images = Tensor::new(&[n, img.channels, img.height, img.width], data)?;
        let ctx: Vec<ContextInput> = if slots.is_empty() {
            vec![ContextInput {
                point: tile.center,
                slot: Slot::from_index(0),
            }]
        } else {
            slots
                .iter()
                .map(|s| ContextInput {
                    point: tile.center,
                    slot: *s,
                })
                .collect()
        };
        let mut tape = Tape::new();
        let (out, _) = self.model.forward(&mut tape, &images, &ctx, false)?;
        let kb = self.model.config.k_bins;
        let hw = img.height * img.width;
        let road = tape.value(out.road).data()[..hw]
            .iter()
            .map(|z| 1.0 / (1.0 + (-z).exp()))
            .collect();
        let logits = &tape.value(out.orient).data()[..kb * hw];
        let orient = argmax_bins(logits, kb);
        let speed = tape.value(out.speed).data();
        let mut segment_speeds = Vec::with_capacity(slots.len());
        for i in 0..slots.len() {
            let raw = &speed[i * kb * hw..(i + 1) * kb * hw];
            let mut m = BTreeMap::new();
            for f in &tile.footprints {
                if f.pixels.is_empty() {
                    continue;
                }
                // Gather the K channels at the footprint pixels, then compose per pixel.
                let np = f.pixels.len();
                let mut sub = vec![0.0; kb * np];
                for (j, px) in f.pixels.iter().enumerate() {
                    let at = px.row as usize * img.width + px.col as usize;
                    for b in 0..kb {
                        sub[b * np + j] = raw[b * hw + at];
                    }
                }
                let v = compose_speed(&sub, kb, &f.thetas, self.k)?;
                m.insert(f.segment_id.clone(), v.iter().sum::<f64>() / np as f64);
            }
            segment_speeds.push(m);
        }
        Ok(TilePrediction {
            road,
            orient,
            segment_speeds,
        })
    }
}

/// Ground truth of a synthetic world; scores perfectly by construction.
#[derive(Debug, Clone)]
pub struct OraclePredictor<'a> {
    pub world: &'a SynthWorld,
    pub k_bins: usize,
}

impl Predictor for OraclePredictor<'_> {
    fn k_bins(&self) -> usize {
        self.k_bins
    }

    fn predict(&self, tile: &TileData, slots: &[Slot]) -> Result<TilePrediction> {
        let size = tile.size();
        let road = tile.mask.data.iter().map(|&m| f64::from(m)).collect();
        let mut orient = vec![0; size * size];
        for l in &tile.labels {
            orient[l.pixel.row as usize * size + l.pixel.col as usize] = l.bin;
        }
        let mut segment_speeds = Vec::new();
        for s in slots {
            let mut m = BTreeMap::new();
            for f in &tile.footprints {
                let idx = self
                    .world
                    .segment_index(&f.segment_id)
                    .ok_or_else(|| Error::BadReference(format!("segment {}", f.segment_id)))?;
                m.insert(f.segment_id.clone(), self.world.speed_at(idx, *s));
            }
            segment_speeds.push(m);
        }
        Ok(TilePrediction {
            road,
            orient,
            segment_speeds,
        })
    }
}

/// Predicts one constant speed everywhere and no roads.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor {
    pub speed_kmh: f64,
    pub k_bins: usize,
}

impl Predictor for ConstantPredictor {
    fn k_bins(&self) -> usize {
        self.k_bins
    }

    fn predict(&self, tile: &TileData, slots: &[Slot]) -> Result<TilePrediction> {
        let size = tile.size();
        Ok(TilePrediction {
            road: vec![0.0; size * size],
            orient: vec![0; size * size],
            segment_speeds: slots
                .iter()
                .map(|_| {
                    tile.footprints
                        .iter()
                        .map(|f| (f.segment_id.clone(), self.speed_kmh))
                        .collect()
                })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimePolicy {
    /// One slot per tile, drawn from its supervised slots with a fixed seed.
    FixedRandomPerImage { seed: u64 },
    /// Metrics per listed slot, averaged with equal weight.
    SlotList { slots: Vec<Slot> },
}

impl TimePolicy {
    /// Monday and Saturday at six hours spread over the day.
    pub fn default_macro() -> Self {
        let slots = [0u8, 5]
            .iter()
            .flat_map(|d| [0u8, 4, 8, 12, 17, 20].map(move |h| Slot { day: *d, hour: h }))
            .collect();
        TimePolicy::SlotList { slots }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotMetrics {
    pub slot: Slot,
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub mae: f64,
    /// None when the targets have zero variance.
    pub r2: Option<f64>,
    pub road_f1: f64,
    pub orientation_top1: f64,
    /// Number of (segment, slot) pairs scored.
    pub n: usize,
    pub per_slot: Vec<SlotMetrics>,
}

/// Segment-level (target, prediction) pairs per slot, each segment taken from the
/// tile holding most of its footprint.
type Pairs = BTreeMap<Slot, BTreeMap<String, (usize, f64, f64)>>;

fn scored(y: &[f64], p: &[f64]) -> Result<(f64, f64, Option<f64>)> {
    Ok((rmse(y, p)?, mae(y, p)?, r2(y, p).ok()))
}

pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    data: &Dataset,
    tiles: &[TileIndex],
    policy: &TimePolicy,
) -> Result<EvalReport> {
    if tiles.is_empty() {
        return Err(Error::domain("nothing to evaluate"));
    }
    let mut rng = match policy {
        TimePolicy::FixedRandomPerImage { seed } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        TimePolicy::SlotList { .. } => None,
    };
    let mut pairs: Pairs = BTreeMap::new();
    let (mut mask_t, mut mask_p) = (Vec::new(), Vec::new());
    let (mut lab_t, mut lab_p) = (Vec::new(), Vec::new());
    for t in tiles {
        let tile = data.tile(t)?;
        let slots: Vec<Slot> = match (policy, rng.as_mut()) {
            (TimePolicy::FixedRandomPerImage { .. }, Some(r)) => {
                sample_slot(r, &tile.slots).into_iter().collect()
            }
            (TimePolicy::SlotList { slots }, _) => slots.clone(),
            _ => unreachable!(),
        };
        let pred = predictor.predict(tile, &slots)?;
        mask_t.extend_from_slice(&tile.mask.data);
        mask_p.extend_from_slice(&pred.road);
        let size = tile.size();
        for l in &tile.labels {
            lab_t.push(l.bin);
            lab_p.push(pred.orient[l.pixel.row as usize * size + l.pixel.col as usize]);
        }
        for (slot, speeds) in slots.iter().zip(&pred.segment_speeds) {
            for f in &tile.footprints {
                let (Some(stat), Some(p)) = (
                    data.table.get(&f.segment_id, *slot),
                    speeds.get(&f.segment_id),
                ) else {
                    continue;
                };
                let e = pairs
                    .entry(*slot)
                    .or_default()
                    .entry(f.segment_id.clone())
                    .or_insert((0, 0.0, 0.0));
                if f.pixels.len() > e.0 {
                    *e = (f.pixels.len(), stat.speed_kmh, *p);
                }
            }
        }
    }
    let road_f1 = f1(&mask_t, &mask_p)?;
    let orientation_top1 = if lab_t.is_empty() {
        0.0
    } else {
        top1(&lab_t, &lab_p)?
    };
    let mut per_slot = Vec::new();
    let (mut all_y, mut all_p) = (Vec::new(), Vec::new());
    for (slot, segs) in &pairs {
        let y: Vec<f64> = segs.values().map(|v| v.1).collect();
        let p: Vec<f64> = segs.values().map(|v| v.2).collect();
        let (rm, ma, r) = scored(&y, &p)?;
        per_slot.push(SlotMetrics {
            slot: *slot,
            n: y.len(),
            rmse: rm,
            mae: ma,
            r2: r,
        });
        all_y.extend(y);
        all_p.extend(p);
    }
    if all_y.is_empty() {
        return Err(Error::domain(
            "no supervised segments under the evaluation policy",
        ));
    }
    let (rmse, mae, r2) = match policy {
        TimePolicy::FixedRandomPerImage { .. } => scored(&all_y, &all_p)?,
        TimePolicy::SlotList { .. } => {
            let m = per_slot.len() as f64;
            let r2s: Vec<f64> = per_slot.iter().filter_map(|s| s.r2).collect();
            (
                per_slot.iter().map(|s| s.rmse).sum::<f64>() / m,
                per_slot.iter().map(|s| s.mae).sum::<f64>() / m,
                (!r2s.is_empty()).then(|| r2s.iter().sum::<f64>() / r2s.len() as f64),
            )
        }
    };
    Ok(EvalReport {
        rmse,
        mae,
        r2,
        road_f1,
        orientation_top1,
        n: all_y.len(),
        per_slot,
    })
}

/// Mean target over (segment, slot) pairs of the given tiles, for the global-mean baseline.
pub fn mean_target(data: &Dataset, tiles: &[TileIndex]) -> Result<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for t in tiles {
        for f in &data.tile(t)?.footprints {
            for (_, stat) in data.table.segment_slots(&f.segment_id) {
                s += stat.speed_kmh;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::domain("no supervised segments"));
    }
    Ok(s / n as f64)
}

/// Bin index per pixel from K×P logits.
pub fn argmax_bins(logits: &[f64], k_bins: usize) -> Vec<usize> {
    let hw = logits.len() / k_bins.max(1);
    (0..hw)
        .map(|p| {
            (0..k_bins).fold(0, |best, b| {
                if logits[b * hw + p] > logits[best * hw + p] {
                    b
                } else {
                    best
                }
            })
        })
        .collect()
}

/// Predicted speed of every segment seen in `tiles` at each slot, read from the
/// tile that holds most of the segment's footprint.
pub fn predict_segments<P: Predictor + ?Sized>(
    predictor: &P,
    data: &Dataset,
    tiles: &[TileIndex],
    slots: &[Slot],
) -> Result<BTreeMap<Slot, BTreeMap<String, f64>>> {
    let mut best: BTreeMap<Slot, BTreeMap<String, (usize, f64)>> = BTreeMap::new();
    for t in tiles {
        let tile = data.tile(t)?;
        let pred = predictor.predict(tile, slots)?;
        for (slot, speeds) in slots.iter().zip(&pred.segment_speeds) {
            let per = best.entry(*slot).or_default();
            for f in &tile.footprints {
                if let Some(v) = speeds.get(&f.segment_id) {
                    let e = per.entry(f.segment_id.clone()).or_insert((0, 0.0));
                    if f.pixels.len() > e.0 {
                        *e = (f.pixels.len(), *v);
                    }
                }
            }
        }
    }
    Ok(best
        .into_iter()
        .map(|(s, m)| (s, m.into_iter().map(|(k, v)| (k, v.1)).collect()))
        .collect())
}
