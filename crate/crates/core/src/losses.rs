//! Training objectives over the three network heads.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CePick, ComposeQuery, Tape, Tensor, Var};
use crate::geo::Pixel;
use crate::model::Outputs;
use crate::raster::{OrientationLabels, RoadMask, SpeedSupervision};
use crate::{Error, Result};

pub const DICE_EPS: f64 = 1e-6;

/// How segment-level speed labels supervise pixel predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Average the composed pixels of a segment, then compare once per segment.
    #[default]
    Region,
    /// Copy the segment label to each of its pixels and compare per pixel.
    Replicate,
}

/// How the K speed channels are combined at a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    #[default]
    Weighted,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha_r: f64,
    pub delta: f64,
    pub k: f64,
    pub aggregation: Aggregation,
    pub composition: Composition,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_r: 1e-2,
            delta: 2.0,
            k: 25.0,
            aggregation: Aggregation::Region,
            composition: Composition::Weighted,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_r >= 0.0) || !(self.delta > 0.0) || !(self.k >= 0.0) {
            return Err(Error::Config(
                "loss needs alpha_r ≥ 0, delta > 0, k ≥ 0".into(),
            ));
        }
        Ok(())
    }

    /// Concentration actually used for composition (zero means equal weights).
    pub fn effective_k(&self) -> f64 {
        match self.composition {
            Composition::Weighted => self.k,
            Composition::Uniform => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub road: f64,
    pub orientation: f64,
    pub speed: f64,
    pub reg: f64,
    pub total: f64,
}

/// Per-image targets for one (day, hour) slot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Targets {
    pub masks: Vec<RoadMask>,
    pub labels: Vec<OrientationLabels>,
    pub speeds: Vec<SpeedSupervision>,
}

pub fn charbonnier(a: f64, delta: f64) -> f64 {
    delta * delta * ((1.0 + (a / delta).powi(2)).sqrt() - 1.0)
}

fn dims(tape: &Tape, v: Var) -> Result<(usize, usize, usize, usize)> {
    tape.value(v).dims4()
}

/// Mean BCE over all pixels plus one minus the batch-mean soft dice.
pub fn road_loss(tape: &mut Tape, logits: Var, masks: &[RoadMask]) -> Result<Var> {
    let (n, c, h, w) = dims(tape, logits)?;
    if c != 1 || masks.len() != n || masks.iter().any(|m| m.size != h || h != w) {
        return Err(Error::shape("road masks do not match the logits"));
    }
    let target: Vec<f64> = masks
        .iter()
        .flat_map(|m| m.data.iter().map(|v| f64::from(*v)))
        .collect();
    let bce = tape.bce_with_logits(logits, &target)?;
    let p = tape.sigmoid(logits);
    let dice = tape.dice(p, &target, DICE_EPS)?;
    let md = tape.mean(dice)?;
    let one_minus = tape.scale(md, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    tape.add(bce, one_minus)
}

/// Cross entropy averaged over every label instance in the batch; zero when there are none.
pub fn orientation_loss(tape: &mut Tape, logits: Var, labels: &[OrientationLabels]) -> Result<Var> {
    let (n, k, h, w) = dims(tape, logits)?;
    if labels.len() != n {
        return Err(Error::shape("one label list per image is required"));
    }
    let total: usize = labels.iter().map(Vec::len).sum();
    let hw = h * w;
    let mut picks = Vec::with_capacity(total);
    for (b, ls) in labels.iter().enumerate() {
        for l in ls {
            let (r, c) = (l.pixel.row as usize, l.pixel.col as usize);
            if r >= h || c >= w || l.bin >= k {
                return Err(Error::Bounds {
                    index: r * w + c,
                    len: hw,
                });
            }
            picks.push(CePick {
                base: b * k * hw + r * w + c,
                stride: hw,
                label: l.bin,
                weight: 1.0 / total as f64,
            });
        }
    }
    tape.cross_entropy(logits, k, &picks)
}

fn pixel_index(p: Pixel, h: usize, w: usize) -> Result<usize> {
    let (r, c) = (p.row as usize, p.col as usize);
    if r >= h || c >= w {
        return Err(Error::Bounds {
            index: r * w + c,
            len: h * w,
        });
    }
    Ok(r * w + c)
}

/// Mean of a planar field over each region, given as (image, pixels).
pub fn region_aggregate(
    tape: &mut Tape,
    speed: Var,
    regions: &[(usize, Vec<Pixel>)],
) -> Result<Var> {
    let shape = tape.value(speed).shape().to_vec();
    let (planes, h, w) = match shape[..] {
        [h, w] => (1, h, w),
        [n, 1, h, w] => (n, h, w),
        _ => {
            return Err(Error::shape(format!(
                "cannot aggregate a field of shape {shape:?}"
            )))
        }
    };
    let mut groups = Vec::with_capacity(regions.len());
    for (img, px) in regions {
        if *img >= planes {
            return Err(Error::Bounds {
                index: *img,
                len: planes,
            });
        }
        let g = px
            .iter()
            .map(|p| pixel_index(*p, h, w).map(|i| img * h * w + i))
            .collect::<Result<Vec<_>>>()?;
        groups.push(g);
    }
    tape.gather_mean(speed, &groups)
}

/// Region-aggregated (or replicated) Charbonnier loss on composed speeds.
pub fn speed_loss(
    tape: &mut Tape,
    speed_raw: Var,
    sups: &[SpeedSupervision],
    cfg: &LossConfig,
) -> Result<Var> {
    let (n, k, h, w) = dims(tape, speed_raw)?;
    if sups.len() != n {
        return Err(Error::shape("one supervision set per image is required"));
    }
    let hw = h * w;
    let mut queries = Vec::new();
    let mut groups = Vec::new();
    let mut targets = Vec::new();
    for (b, sup) in sups.iter().enumerate() {
        for e in &sup.entries {
            if e.pixels.is_empty() || e.pixels.len() != e.thetas.len() {
                return Err(Error::domain(format!(
                    "segment {} has an empty or ragged footprint",
                    e.segment_id
                )));
            }
            let start = queries.len();
            for (p, t) in e.pixels.iter().zip(&e.thetas) {
                queries.push(ComposeQuery {
                    base: b * k * hw + pixel_index(*p, h, w)?,
                    stride: hw,
                    theta: *t,
                });
            }
            match cfg.aggregation {
                Aggregation::Region => {
                    groups.push((start..queries.len()).collect::<Vec<_>>());
                    targets.push(e.target_kmh);
                }
                Aggregation::Replicate => {
                    targets.extend(std::iter::repeat_n(e.target_kmh, e.pixels.len()))
                }
            }
        }
    }
    if targets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let composed = tape.compose(speed_raw, k, &queries, cfg.effective_k())?;
    let pred = match cfg.aggregation {
        Aggregation::Region => tape.gather_mean(composed, &groups)?,
        Aggregation::Replicate => composed,
    };
    let t = tape.constant(Tensor::new(&[targets.len()], targets)?);
    let resid = tape.sub(pred, t)?;
    let c = tape.charbonnier(resid, cfg.delta)?;
    tape.mean(c)
}

pub fn tv_reg(tape: &mut Tape, speed_raw: Var) -> Result<Var> {
    tape.total_variation(speed_raw)
}

/// Weighted sum of all objectives, with the individual values.
pub fn total_loss(
    tape: &mut Tape,
    out: &Outputs,
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<(Var, LossReport)> {
    let road = road_loss(tape, out.road, &targets.masks)?;
    let orient = orientation_loss(tape, out.orient, &targets.labels)?;
    let speed = speed_loss(tape, out.speed, &targets.speeds, cfg)?;
    let reg = tv_reg(tape, out.speed)?;
    let a = tape.add(road, orient)?;
    let b = tape.add(a, speed)?;
    let r = tape.scale(reg, cfg.alpha_r);
    let total = tape.add(b, r)?;
    let item = |v: Var| tape.value(v).item();
    let report = LossReport {
        road: item(road),
        orientation: item(orient),
        speed: item(speed),
        reg: item(reg),
        total: item(total),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{OrientationLabel, SupervisionEntry};
    use proptest::prelude::*;

    fn mask(size: usize, on: &[usize]) -> RoadMask {
        let mut m = RoadMask::empty(size);
        for &i in on {
            m.data[i] = 1;
        }
        m
    }

    fn value(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t).unwrap();
        t.value(v).item()
    }

    fn entry(id: &str, pixels: Vec<Pixel>, target: f64) -> SupervisionEntry {
        let n = pixels.len();
        SupervisionEntry {
            segment_id: id.into(),
            pixels,
            target_kmh: target,
            thetas: vec![0.0; n],
        }
    }

    #[test]
    fn road_loss_examples() {
        let m = mask(2, &[0, 3]);
        let sat = Tensor::new(&[1, 1, 2, 2], vec![60.0, -60.0, -60.0, 60.0]).unwrap();
        let l = value(|t| {
            let x = t.constant(sat);
            road_loss(t, x, std::slice::from_ref(&m))
        });
        assert!(l < 1e-6, "{l}");
        let empty = mask(2, &[]);
        let off = Tensor::full(&[1, 1, 2, 2], -60.0);
        let l = value(|t| {
            let x = t.constant(off);
            road_loss(t, x, &[empty])
        });
        assert!(l < 1e-6, "{l}");
    }

    #[test]
    fn hard_dice_half_overlap() {
        // P = {a, b}, G = {b, c}
        let p = Tensor::new(&[1, 1, 1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        let d = value(|t| {
            let x = t.constant(p);
            t.dice(x, &[0.0, 1.0, 1.0], DICE_EPS)
        });
        assert!((d - 0.5).abs() < 1e-6);
    }

    #[test]
    fn orientation_loss_examples() {
        let uniform = Tensor::zeros(&[1, 16, 2, 2]);
        let labels = vec![vec![
            OrientationLabel {
                pixel: Pixel::new(0, 1),
                bin: 3,
            },
            OrientationLabel {
                pixel: Pixel::new(0, 1),
                bin: 3,
            },
        ]];
        let l = value(|t| {
            let x = t.constant(uniform);
            orientation_loss(t, x, &labels)
        });
        assert!((l - 16f64.ln()).abs() < 1e-12);
        let mut peaked = Tensor::zeros(&[1, 16, 2, 2]);
        peaked.data_mut()[3 * 4 + 1] = 60.0;
        let l = value(|t| {
            let x = t.constant(peaked);
            orientation_loss(t, x, &labels)
        });
        assert!(l < 1e-20);
        let l = value(|t| {
            let x = t.constant(Tensor::zeros(&[1, 16, 2, 2]));
            orientation_loss(t, x, &[vec![]])
        });
        assert_eq!(l, 0.0);
    }

    #[test]
    fn charbonnier_examples() {
        assert_eq!(charbonnier(0.0, 2.0), 0.0);
        assert!((charbonnier(2.0, 2.0) - 4.0 * (2f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!((charbonnier(200.0, 2.0) - 396.02).abs() < 5e-3);
    }

    #[test]
    fn region_aggregate_examples() {
        let field = Tensor::new(&[2, 2], vec![2.0, 4.0, 7.0, 7.0]).unwrap();
        let mut t = Tape::new();
        let x = t.input(field);
        let regions = vec![
            (0, vec![Pixel::new(0, 0), Pixel::new(0, 1)]),
            (
                0,
                vec![Pixel::new(1, 0), Pixel::new(1, 1), Pixel::new(0, 1)],
            ),
        ];
        let r = region_aggregate(&mut t, x, &regions).unwrap();
        assert_eq!(t.value(r).data()[0], 3.0);
        assert_eq!(t.value(r).data()[1], 6.0);
        let s = t.sum(r);
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap();
        assert_eq!(g, &[0.5, 0.5 + 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert!(matches!(
            region_aggregate(&mut t, x, &[(0, vec![])]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn speed_loss_examples() {
        let cfg = LossConfig::default();
        let k = 4;
        let field = |v: f64| Tensor::full(&[1, k, 2, 2], v);
        let one = SpeedSupervision {
            entries: vec![entry("a", vec![Pixel::new(0, 0), Pixel::new(1, 1)], 30.0)],
        };
        let l = value(|t| {
            let x = t.constant(field(30.0));
            speed_loss(t, x, std::slice::from_ref(&one), &cfg)
        });
        assert_eq!(l, 0.0);
        let l = value(|t| {
            let x = t.constant(field(32.0));
            speed_loss(t, x, std::slice::from_ref(&one), &cfg)
        });
        assert!((l - 4.0 * (2f64.sqrt() - 1.0)).abs() < 1e-12);
        let two = SpeedSupervision {
            entries: vec![
                entry("a", vec![Pixel::new(0, 0)], 32.0),
                entry("b", vec![Pixel::new(1, 0)], 30.0),
            ],
        };
        let l = value(|t| {
            let x = t.constant(field(32.0));
            speed_loss(t, x, &[two], &cfg)
        });
        assert!((l - 0.8284).abs() < 1e-4);
        let l = value(|t| {
            let x = t.constant(field(32.0));
            speed_loss(t, x, &[SpeedSupervision::default()], &cfg)
        });
        assert_eq!(l, 0.0);
    }

    #[test]
    fn replicate_weights_pixels() {
        let cfg = LossConfig {
            aggregation: Aggregation::Replicate,
            ..LossConfig::default()
        };
        // pixel values 30 and 34 against a target of 32: per-pixel residuals ±2
        let mut x = Tensor::full(&[1, 1, 1, 2], 30.0);
        x.data_mut()[1] = 34.0;
        let sup = SpeedSupervision {
            entries: vec![entry("a", vec![Pixel::new(0, 0), Pixel::new(0, 1)], 32.0)],
        };
        let rep = value(|t| {
            let v = t.constant(x.clone());
            speed_loss(t, v, std::slice::from_ref(&sup), &cfg)
        });
        assert!((rep - charbonnier(2.0, 2.0)).abs() < 1e-12);
        let reg = value(|t| {
            let v = t.constant(x);
            speed_loss(t, v, &[sup], &LossConfig::default())
        });
        assert_eq!(reg, 0.0);
    }

    #[test]
    fn tv_examples() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        // vertical diffs 0, 0; horizontal diffs 1, 1; four terms
        let l = value(|t| {
            let v = t.constant(x.clone());
            tv_reg(t, v)
        });
        assert_eq!(l, 0.5);
        let scaled =
            Tensor::new(&[1, 1, 2, 2], x.data().iter().map(|v| 3.0 * v).collect()).unwrap();
        let l3 = value(|t| {
            let v = t.constant(scaled);
            tv_reg(t, v)
        });
        assert!((l3 - 9.0 * l).abs() < 1e-12);
        let c = value(|t| {
            let v = t.constant(Tensor::full(&[2, 3, 4, 4], 5.0));
            tv_reg(t, v)
        });
        assert_eq!(c, 0.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut t = Tape::new();
        let road = t.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let orient = t.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let mut sp = Tensor::full(&[1, 4, 4, 4], 10.0);
        sp.data_mut()[5] = 14.0;
        let speed = t.constant(sp);
        let out = Outputs {
            road,
            orient,
            speed,
        };
        let targets = Targets {
            masks: vec![mask(4, &[1, 2])],
            labels: vec![vec![OrientationLabel {
                pixel: Pixel::new(1, 1),
                bin: 2,
            }]],
            speeds: vec![SpeedSupervision {
                entries: vec![entry("a", vec![Pixel::new(1, 1), Pixel::new(2, 2)], 12.0)],
            }],
        };
        for alpha in [0.0, 1e-2, 3.0] {
            let cfg = LossConfig {
                alpha_r: alpha,
                ..LossConfig::default()
            };
            let (v, rep) = total_loss(&mut t, &out, &targets, &cfg).unwrap();
            let recomputed = rep.road + rep.orientation + rep.speed + alpha * rep.reg;
            assert!((rep.total - recomputed).abs() < 1e-12);
            assert_eq!(t.value(v).item(), rep.total);
            if alpha == 0.0 {
                assert_eq!(rep.total, rep.road + rep.orientation + rep.speed);
            }
        }
    }

    proptest! {
        #[test]
        fn charbonnier_is_even_monotone_and_bounded(a in -500.0f64..500.0, b in -500.0f64..500.0, delta in 0.1f64..10.0) {
            prop_assert_eq!(charbonnier(a, delta), charbonnier(-a, delta));
            if a.abs() <= b.abs() {
                prop_assert!(charbonnier(a, delta) <= charbonnier(b, delta));
            }
            prop_assert!(charbonnier(a, delta) <= a.abs() * delta + 1e-9);
        }

        #[test]
        fn road_loss_nonnegative_and_dice_in_unit_range(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::new(&[2, 1, 3, 3], (0..18).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
            let masks: Vec<RoadMask> = (0..2)
                .map(|_| {
                    let on: Vec<usize> = (0..9).filter(|_| rng.random_bool(0.4)).collect();
                    mask(3, &on)
                })
                .collect();
            let mut t = Tape::new();
            let x = t.constant(logits);
            let l = road_loss(&mut t, x, &masks).unwrap();
            prop_assert!(t.value(l).item() >= 0.0);
            let p = t.sigmoid(x);
            let target: Vec<f64> = masks.iter().flat_map(|m| m.data.iter().map(|v| f64::from(*v))).collect();
            let d = t.dice(p, &target, DICE_EPS).unwrap();
            prop_assert!(t.value(d).data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn speed_loss_ignores_segment_order(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            use rand::seq::SliceRandom;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(&[1, 4, 3, 3], (0..36).map(|_| rng.random_range(0.0..60.0)).collect()).unwrap();
            let mut entries: Vec<SupervisionEntry> = (0..5)
                .map(|i| {
                    let px: Vec<Pixel> = (0..rng.random_range(1..4))
                        .map(|_| Pixel::new(rng.random_range(0..3), rng.random_range(0..3)))
                        .collect();
                    let n = px.len();
                    SupervisionEntry {
                        segment_id: format!("s{i}"),
                        pixels: px,
                        target_kmh: rng.random_range(5.0..80.0),
                        thetas: (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
                    }
                })
                .collect();
            let cfg = LossConfig::default();
            let a = value(|t| {
                let v = t.constant(x.clone());
                speed_loss(t, v, &[SpeedSupervision { entries: entries.clone() }], &cfg)
            });
            entries.shuffle(&mut rng);
            let b = value(|t| {
                let v = t.constant(x);
                speed_loss(t, v, &[SpeedSupervision { entries }], &cfg)
            });
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
