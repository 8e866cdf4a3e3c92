//! Multi-task segmentation network with location/time context fused into the speed decoder.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, BnStats, ParamId, ParamStore, Tape, Tensor, Var};
use crate::dataset::Slot;
use crate::geo::{self, GeoPoint};
use crate::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub encoder_depth: usize,
    pub k_bins: usize,
    pub embed_dim: usize,
    pub context_into_last_n_convs: usize,
    /// Multiplier on the softplus output so raw speeds live in km/h.
    pub speed_scale: f64,
    pub use_image: bool,
    pub use_loc: bool,
    pub use_time: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 16,
            encoder_depth: 4,
            k_bins: 16,
            embed_dim: 3,
            context_into_last_n_convs: 2,
            speed_scale: 40.0,
            use_image: true,
            use_loc: true,
            use_time: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.k_bins == 0 {
            return bad("k_bins must be at least 1");
        }
        if self.encoder_depth < 2 {
            return bad("encoder_depth must be at least 2");
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return bad("channel counts must be positive");
        }
        if !(self.speed_scale > 0.0) {
            return bad("speed_scale must be positive");
        }
        if self.context_into_last_n_convs > self.encoder_depth + 2 {
            return bad("context_into_last_n_convs exceeds the speed decoder's convolutions");
        }
        if self.context_dim() > 0 && self.context_into_last_n_convs == 0 {
            return bad("context features need at least one fusion point");
        }
        if !self.use_image && self.context_dim() == 0 {
            return bad("a model without the image needs location or time context");
        }
        Ok(())
    }

    pub fn context_dim(&self) -> usize {
        let loc = if self.use_loc { 2 } else { 0 };
        let time = if self.use_time { 2 * self.embed_dim } else { 0 };
        loc + time
    }

    /// Channel width of encoder stage s (stage 0 is the stem).
    pub fn width(&self, stage: usize) -> usize {
        self.base_channels << stage.saturating_sub(1)
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.encoder_depth
    }
}

/// Frozen lat/lon standardization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub lat_mean: f64,
    pub lat_std: f64,
    pub lon_mean: f64,
    pub lon_std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            lat_mean: 0.0,
            lat_std: 1.0,
            lon_mean: 0.0,
            lon_std: 1.0,
        }
    }
}

impl Normalization {
    /// Mean and population standard deviation of the given points; a zero spread becomes 1.
    pub fn fit(points: &[GeoPoint]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("normalization needs at least one point"));
        }
        let n = points.len() as f64;
        let stat = |f: &dyn Fn(&GeoPoint) -> f64| {
            let m = points.iter().map(f).sum::<f64>() / n;
            let v = points.iter().map(|p| (f(p) - m).powi(2)).sum::<f64>() / n;
            (m, if v > 0.0 { v.sqrt() } else { 1.0 })
        };
        let (lat_mean, lat_std) = stat(&|p| p.lat());
        let (lon_mean, lon_std) = stat(&|p| p.lon());
        Ok(Self {
            lat_mean,
            lat_std,
            lon_mean,
            lon_std,
        })
    }
}

/// Where an image was taken and which (day, hour) slot is queried.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextInput {
    pub point: GeoPoint,
    pub slot: Slot,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvBn {
    conv: Conv,
    bn: Bn,
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock {
    c1: ConvBn,
    c2: ConvBn,
    proj: Option<ConvBn>,
}

#[derive(Debug, Clone, PartialEq)]
struct Decoder {
    /// One conv per upsampling level, deepest first.
    levels: Vec<Option<ConvBn>>,
    head3: Conv,
    head1: Conv,
}

/// Pending running-statistics updates from a training-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    stats: BnStats,
}

#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// N×1×H×W, before the sigmoid.
    pub road: Var,
    /// N×K×H×W, before the softmax.
    pub orient: Var,
    /// N×K×H×W, non-negative km/h.
    pub speed: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficModel {
    pub config: ModelConfig,
    pub norm: Normalization,
    pub params: ParamStore,
    stem: ConvBn,
    stages: Vec<ResBlock>,
    road: Decoder,
    orient: Decoder,
    speed: Decoder,
    day_table: Option<ParamId>,
    hour_table: Option<ParamId>,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize, bias: bool) -> Result<Conv> {
        let fan_in = (inp * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let n = out * inp * k * k;
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        let w = self
            .store
            .add(&format!("{name}.w"), Tensor::new(&[out, inp, k, k], data)?)?;
        let b = if bias {
            Some(
                self.store
                    .add(&format!("{name}.b"), Tensor::zeros(&[out]))?,
            )
        } else {
            None
        };
        Ok(Conv { w, b, pad: k / 2 })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<Bn> {
        Ok(Bn {
            gamma: self
                .store
                .add(&format!("{name}.gamma"), Tensor::full(&[c], 1.0))?,
            beta: self
                .store
                .add(&format!("{name}.beta"), Tensor::zeros(&[c]))?,
            mean: self
                .store
                .add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            var: self
                .store
                .add_buffer(&format!("{name}.running_var"), Tensor::full(&[c], 1.0))?,
        })
    }

    fn conv_bn(&mut self, name: &str, out: usize, inp: usize, k: usize) -> Result<ConvBn> {
        Ok(ConvBn {
            conv: self.conv(&format!("{name}.conv"), out, inp, k, false)?,
            bn: self.bn(&format!("{name}.bn"), out)?,
        })
    }

    fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> Result<ParamId> {
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let data = (0..rows * dim)
            .map(|_| normal.sample(&mut self.rng) * 0.01)
            .collect();
        self.store.add(name, Tensor::new(&[rows, dim], data)?)
    }

    /// Decoder whose final `ctx_convs` convolutions also read `ctx` context channels.
    ///
    /// Convolutions are indexed 0..depth for the upsampling levels (deepest first),
    /// then `depth` for the 3×3 head and `depth + 1` for the 1×1 head. Without the
    /// image only the convolutions from the first fusion point onward are kept.
    fn decoder(
        &mut self,
        name: &str,
        cfg: &ModelConfig,
        out: usize,
        ctx: usize,
        ctx_convs: usize,
        image: bool,
    ) -> Result<Decoder> {
        let depth = cfg.encoder_depth;
        let first_fused = depth + 2 - ctx_convs;
        let fused = |i: usize| if i >= first_fused { ctx } else { 0 };
        // channels arriving from the previous kept conv (or the encoder)
        let prev = |i: usize, width: usize| if image || i > first_fused { width } else { 0 };
        let mut levels = Vec::with_capacity(depth);
        for (i, s) in (1..=depth).rev().enumerate() {
            levels.push(if image || i >= first_fused {
                let skip = if image { cfg.width(s - 1) } else { 0 };
                let inp = prev(i, cfg.width(s)) + skip + fused(i);
                Some(self.conv_bn(&format!("{name}.up{s}"), cfg.width(s - 1), inp, 3)?)
            } else {
                None
            });
        }
        let b = cfg.base_channels;
        let head3 = self.conv(
            &format!("{name}.head3"),
            b,
            prev(depth, b) + fused(depth),
            3,
            true,
        )?;
        let head1 = self.conv(&format!("{name}.head1"), out, b + fused(depth + 1), 1, true)?;
        Ok(Decoder {
            levels,
            head3,
            head1,
        })
    }
}

impl TrafficModel {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut bld = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let cfg = config;
        let stem = bld.conv_bn("enc.stem", cfg.width(0), cfg.in_channels, 3)?;
        let mut stages = Vec::with_capacity(cfg.encoder_depth);
        for s in 1..=cfg.encoder_depth {
            let (cin, cout) = (cfg.width(s - 1), cfg.width(s));
            let name = format!("enc.stage{s}");
            stages.push(ResBlock {
                c1: bld.conv_bn(&format!("{name}.c1"), cout, cin, 3)?,
                c2: bld.conv_bn(&format!("{name}.c2"), cout, cout, 3)?,
                proj: if cin != cout {
                    Some(bld.conv_bn(&format!("{name}.proj"), cout, cin, 1)?)
                } else {
                    None
                },
            });
        }
        let road = bld.decoder("road", cfg, 1, 0, 0, true)?;
        let orient = bld.decoder("orient", cfg, cfg.k_bins, 0, 0, true)?;
        let speed = bld.decoder(
            "speed",
            cfg,
            cfg.k_bins,
            cfg.context_dim(),
            cfg.context_into_last_n_convs,
            cfg.use_image,
        )?;
        let (day_table, hour_table) = if cfg.use_time {
            (
                Some(bld.embedding("ctx.day", 7, cfg.embed_dim)?),
                Some(bld.embedding("ctx.hour", 24, cfg.embed_dim)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config: config.clone(),
            norm: Normalization::default(),
            params: bld.store,
            stem,
            stages,
            road,
            orient,
            speed,
            day_table,
            hour_table,
        })
    }

    /// (normalized lat, normalized lon, day embedding, hour embedding), restricted to enabled parts.
    pub fn context_feature(&self, p: GeoPoint, day: u8, hour: u8) -> Result<Vec<f64>> {
        let slot = Slot::new(day, hour)?;
        let mut out = Vec::with_capacity(self.config.context_dim());
        if self.config.use_loc {
            out.push((p.lat() - self.norm.lat_mean) / self.norm.lat_std);
            out.push((p.lon() - self.norm.lon_mean) / self.norm.lon_std);
        }
        let e = self.config.embed_dim;
        if let (Some(d), Some(h)) = (self.day_table, self.hour_table) {
            let (dt, ht) = (self.params.value(d).data(), self.params.value(h).data());
            let (di, hi) = (usize::from(slot.day), usize::from(slot.hour));
            out.extend_from_slice(&dt[di * e..(di + 1) * e]);
            out.extend_from_slice(&ht[hi * e..(hi + 1) * e]);
        }
        Ok(out)
    }

    fn p(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(&self.params, id)
    }

    fn conv(&self, tape: &mut Tape, x: Var, c: &Conv) -> Result<Var> {
        let w = self.p(tape, c.w);
        let y = tape.conv2d(x, w, 1, c.pad)?;
        match c.b {
            Some(b) => {
                let bv = self.p(tape, b);
                tape.add_channel_bias(y, bv)
            }
            None => Ok(y),
        }
    }

    fn conv_bn(
        &self,
        tape: &mut Tape,
        x: Var,
        l: &ConvBn,
        train: bool,
        upd: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let y = self.conv(tape, x, &l.conv)?;
        let g = self.p(tape, l.bn.gamma);
        let b = self.p(tape, l.bn.beta);
        let mode = if train {
            BnMode::Train
        } else {
            BnMode::Eval {
                mean: self.params.value(l.bn.mean).data(),
                var: self.params.value(l.bn.var).data(),
            }
        };
        let (out, stats) = tape.batch_norm(y, g, b, mode)?;
        if let Some(stats) = stats {
            upd.push(BnUpdate {
                mean: l.bn.mean,
                var: l.bn.var,
                stats,
            });
        }
        Ok(out)
    }

    fn context(&self, tape: &mut Tape, ctx: &[ContextInput]) -> Result<Option<Var>> {
        let mut parts = Vec::new();
        if self.config.use_loc {
            let mut data = Vec::with_capacity(2 * ctx.len());
            for c in ctx {
                data.push((c.point.lat() - self.norm.lat_mean) / self.norm.lat_std);
                data.push((c.point.lon() - self.norm.lon_mean) / self.norm.lon_std);
            }
            parts.push(tape.constant(Tensor::new(&[ctx.len(), 2], data)?));
        }
        if let (Some(d), Some(h)) = (self.day_table, self.hour_table) {
            let days: Vec<usize> = ctx.iter().map(|c| usize::from(c.slot.day)).collect();
            let hours: Vec<usize> = ctx.iter().map(|c| usize::from(c.slot.hour)).collect();
            let dt = self.p(tape, d);
            parts.push(tape.embedding(dt, &days)?);
            let ht = self.p(tape, h);
            parts.push(tape.embedding(ht, &hours)?);
        }
        if parts.is_empty() {
            return Ok(None);
        }
        tape.concat(&parts).map(Some)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        tape: &mut Tape,
        dec: &Decoder,
        feats: &[Var],
        ctx: Option<Var>,
        hw: (usize, usize),
        train: bool,
        upd: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let depth = self.config.encoder_depth;
        let with_ctx = |tape: &mut Tape, parts: Vec<Var>, fused: bool| -> Result<Var> {
            let mut parts = parts;
            if let (true, Some(c)) = (fused, ctx) {
                let (h, w) = match parts.first() {
                    Some(v) => {
                        let s = tape.value(*v).shape();
                        (s[2], s[3])
                    }
                    None => hw,
                };
                parts.push(tape.tile_spatial(c, h, w)?);
            }
            if parts.len() == 1 {
                Ok(parts[0])
            } else {
                tape.concat(&parts)
            }
        };
        let image = !feats.is_empty();
        let mut d: Option<Var> = image.then(|| feats[depth]);
        for (i, (level, s)) in dec.levels.iter().zip((1..=depth).rev()).enumerate() {
            let Some(level) = level else { continue };
            let fused = ctx.is_some() && self.fused(i);
            let mut parts = Vec::new();
            if image {
                let up = tape.upsample_nearest2x(d.expect("features"))?;
                parts.push(up);
                parts.push(feats[s - 1]);
            } else if let Some(prev) = d {
                parts.push(prev);
            }
            let x = with_ctx(tape, parts, fused)?;
            let y = self.conv_bn(tape, x, level, train, upd)?;
            d = Some(tape.relu(y));
        }
        let x = with_ctx(
            tape,
            d.into_iter().collect(),
            ctx.is_some() && self.fused(depth),
        )?;
        let y = self.conv(tape, x, &dec.head3)?;
        let y = tape.relu(y);
        let x = with_ctx(tape, vec![y], ctx.is_some() && self.fused(depth + 1))?;
        self.conv(tape, x, &dec.head1)
    }

    fn fused(&self, conv_index: usize) -> bool {
        conv_index + self.config.context_into_last_n_convs >= self.config.encoder_depth + 2
    }

    /// Runs all three heads. In training mode batch statistics are used and returned.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        ctx: &[ContextInput],
        train: bool,
    ) -> Result<(Outputs, Vec<BnUpdate>)> {
        let (n, c, h, w) = images.dims4()?;
        let m = self.config.size_multiple();
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "expected {} channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "image {h}×{w} is not divisible by {m}"
            )));
        }
        if ctx.len() != n {
            return Err(Error::shape(format!(
                "{} contexts for {n} images",
                ctx.len()
            )));
        }
        let mut upd = Vec::new();
        let x = tape.constant(images.clone());
        let s = self.conv_bn(tape, x, &self.stem, train, &mut upd)?;
        let mut feats = vec![tape.relu(s)];
        for st in &self.stages {
            let x = tape.maxpool2x(*feats.last().expect("stem"))?;
            let a = self.conv_bn(tape, x, &st.c1, train, &mut upd)?;
            let a = tape.relu(a);
            let b = self.conv_bn(tape, a, &st.c2, train, &mut upd)?;
            let skip = match &st.proj {
                Some(p) => self.conv_bn(tape, x, p, train, &mut upd)?,
                None => x,
            };
            let sum = tape.add(b, skip)?;
            feats.push(tape.relu(sum));
        }
        let road = self.decode(tape, &self.road, &feats, None, (h, w), train, &mut upd)?;
        let orient = self.decode(tape, &self.orient, &feats, None, (h, w), train, &mut upd)?;
        let context = self.context(tape, ctx)?;
        let speed_feats: &[Var] = if self.config.use_image { &feats } else { &[] };
        let z = self.decode(
            tape,
            &self.speed,
            speed_feats,
            context,
            (h, w),
            train,
            &mut upd,
        )?;
        let sp = tape.softplus(z);
        let speed = tape.scale(sp, self.config.speed_scale);
        Ok((
            Outputs {
                road,
                orient,
                speed,
            },
            upd,
        ))
    }

    /// Folds batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (id, new) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let p = self.params.get_mut(id);
                for (r, v) in p.value.data_mut().iter_mut().zip(new) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
    }

    /// Per-pixel speed for one image using either supplied angles or the orientation argmax.
    pub fn predict_with_angle_source(
        &self,
        image: &Tensor,
        ctx: ContextInput,
        source: AngleSource<'_>,
        k: f64,
    ) -> Result<Vec<f64>> {
        let (_, _, h, w) = image.dims4()?;
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, image, &[ctx], false)?;
        let kb = self.config.k_bins;
        let speed = &tape.value(out.speed).data()[..kb * h * w];
        let theta = match source {
            AngleSource::TrueAngles(Some(t)) => {
                if t.len() != h * w {
                    return Err(Error::shape("theta raster size differs from the image"));
                }
                t.to_vec()
            }
            AngleSource::TrueAngles(None) => {
                return Err(Error::Usage(
                    "true-angle prediction needs a theta raster".into(),
                ));
            }
            AngleSource::PredictedArgmax => {
                predicted_angles(&tape.value(out.orient).data()[..kb * h * w], kb, h * w)
            }
        };
        compose_speed(speed, kb, &theta, k)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum AngleSource<'a> {
    TrueAngles(Option<&'a [f64]>),
    PredictedArgmax,
}

/// Bin-center angle of the per-pixel argmax of K×P logits.
pub fn predicted_angles(logits: &[f64], k_bins: usize, pixels: usize) -> Vec<f64> {
    (0..pixels)
        .map(|p| {
            let mut best = 0;
            for b in 1..k_bins {
                if logits[b * pixels + p] > logits[best * pixels + p] {
                    best = b;
                }
            }
            geo::bin_center(best, k_bins)
        })
        .collect()
}

/// Orientation-weighted speed from K×P channels and per-pixel angles.
pub fn compose_speed(speed_raw: &[f64], k_bins: usize, theta: &[f64], k: f64) -> Result<Vec<f64>> {
    if !(k >= 0.0) {
        return Err(Error::domain("concentration k must be non-negative"));
    }
    let pixels = theta.len();
    if speed_raw.len() != k_bins * pixels {
        return Err(Error::shape("speed channels and theta raster disagree"));
    }
    Ok(theta
        .iter()
        .enumerate()
        .map(|(p, t)| {
            let w = crate::autodiff::orientation_weights(*t, k_bins, k);
            (0..k_bins).map(|b| w[b] * speed_raw[b * pixels + p]).sum()
        })
        .collect())
}

/// Equal-weight mean over the K channels.
pub fn compose_speed_uniform(speed_raw: &[f64], k_bins: usize) -> Result<Vec<f64>> {
    if k_bins == 0 || !speed_raw.len().is_multiple_of(k_bins) {
        return Err(Error::shape("speed channels are not a multiple of K"));
    }
    let pixels = speed_raw.len() / k_bins;
    Ok((0..pixels)
        .map(|p| (0..k_bins).map(|b| speed_raw[b * pixels + p]).sum::<f64>() / k_bins as f64)
        .collect())
}
