//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. `DYNAFLOW_ACCEPT=2,3` limits the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use dynaflow::autodiff::*;
use dynaflow::dataset::*;
use dynaflow::geo::*;
use dynaflow::graphapp::*;
use dynaflow::losses::*;
use dynaflow::model::*;
use dynaflow::raster::*;
use dynaflow::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_EPS: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-3;
const ORACLE_TOL: f64 = 1e-10;

const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 20;
const STEPS_PER_EPOCH: usize = 96;
const BASE_CHANNELS: usize = 8;
const ASYMMETRY: f64 = 0.3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries at least 0.1 from zero, so relu kinks stay outside the probe interval.
fn offset_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// A permutation of evenly spaced values, so pooling winners are unambiguous.
fn distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, vals).unwrap()
}

fn project(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = rand_tensor(&mut rng, tape.value(v).shape());
    let c = tape.constant(w);
    let m = tape.mul(v, c).unwrap();
    tape.sum(m)
}

// ---------------------------------------------------------------- gradients

fn op_checks(seed: u64, worst: &mut BTreeMap<&'static str, f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run =
        |name: &'static str, x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> dynaflow::Result<Var>| {
            let e = grad_check(f, x, GRAD_EPS).unwrap();
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(e);
        };
    let (n, c, h, w) = (2, rng.random_range(1..4), 4, 4);
    let x = offset_tensor(&mut rng, &[n, c, h, w]);
    let other = rand_tensor(&mut rng, &[n, c, h, w]);
    let dx = distinct_tensor(&mut rng, &[n, c, h, w]);
    let kernel = rand_tensor(&mut rng, &[2, c, 3, 3]);
    let bias = rand_tensor(&mut rng, &[c]);
    let gamma = rand_tensor(&mut rng, &[c]);
    let beta = rand_tensor(&mut rng, &[c]);
    let k = c + 1;
    let logits = rand_tensor(&mut rng, &[n, k, h, w]);
    let target: Vec<f64> = (0..logits.len())
        .map(|_| f64::from(rng.random_range(0..2u8)))
        .collect();
    let hw = h * w;

    run("conv2d", &x, &|t, v| {
        let kk = t.constant(kernel.clone());
        let y = t.conv2d(v, kk, 1, 1)?;
        Ok(project(t, y, seed))
    });
    run("conv2d (weights, stride 2)", &kernel, &|t, kk| {
        let xi = t.constant(x.clone());
        let y = t.conv2d(xi, kk, 2, 1)?;
        Ok(project(t, y, seed))
    });
    run("add_channel_bias", &bias, &|t, b| {
        let xi = t.constant(x.clone());
        let y = t.add_channel_bias(xi, b)?;
        Ok(project(t, y, seed))
    });
    run("add/sub/mul/scale/add_scalar", &x, &|t, v| {
        let o = t.constant(other.clone());
        let a = t.add(v, o)?;
        let b = t.sub(a, v)?;
        let m = t.mul(a, v)?;
        let s = t.scale(m, -1.3);
        let e = t.add(s, b)?;
        let f = t.add_scalar(e, 0.7);
        Ok(project(t, f, seed))
    });
    run("relu", &x, &|t, v| {
        let y = t.relu(v);
        Ok(project(t, y, seed))
    });
    run("sigmoid", &x, &|t, v| {
        let y = t.sigmoid(v);
        Ok(project(t, y, seed))
    });
    run("softplus", &x, &|t, v| {
        let y = t.softplus(v);
        Ok(project(t, y, seed))
    });
    run("softmax_channels", &x, &|t, v| {
        let y = t.softmax_channels(v)?;
        Ok(project(t, y, seed))
    });
    run("upsample_nearest2x", &x, &|t, v| {
        let y = t.upsample_nearest2x(v)?;
        Ok(project(t, y, seed))
    });
    run("maxpool2x", &dx, &|t, v| {
        let y = t.maxpool2x(v)?;
        Ok(project(t, y, seed))
    });
    run("concat", &x, &|t, v| {
        let o = t.constant(other.clone());
        let y = t.concat(&[o, v, v])?;
        Ok(project(t, y, seed))
    });
    run("batch_norm (train)", &x, &|t, v| {
        let g = t.constant(gamma.clone());
        let b = t.constant(beta.clone());
        let (y, _) = t.batch_norm(v, g, b, BnMode::Train)?;
        Ok(project(t, y, seed))
    });
    run("batch_norm (train, gamma)", &gamma, &|t, g| {
        let xi = t.constant(x.clone());
        let b = t.constant(beta.clone());
        let (y, _) = t.batch_norm(xi, g, b, BnMode::Train)?;
        Ok(project(t, y, seed))
    });
    let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
    let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
    run("batch_norm (eval)", &x, &|t, v| {
        let g = t.constant(gamma.clone());
        let b = t.constant(beta.clone());
        let (y, _) = t.batch_norm(
            v,
            g,
            b,
            BnMode::Eval {
                mean: &mean,
                var: &var,
            },
        )?;
        Ok(project(t, y, seed))
    });
    run("sum/mean", &x, &|t, v| {
        let m = t.mul(v, v)?;
        let a = t.mean(m)?;
        let s = t.sum(v);
        t.add(a, s)
    });
    let table = rand_tensor(&mut rng, &[7, 3]);
    let idx = [rng.random_range(0..7), rng.random_range(0..7), 2];
    run("embedding + tile_spatial", &table, &|t, v| {
        let e = t.embedding(v, &idx)?;
        let y = t.tile_spatial(e, 2, 3)?;
        Ok(project(t, y, seed))
    });
    run("bce_with_logits", &logits, &|t, v| {
        t.bce_with_logits(v, &target)
    });
    run("dice", &logits, &|t, v| {
        let p = t.sigmoid(v);
        let d = t.dice(p, &target, DICE_EPS)?;
        Ok(project(t, d, seed))
    });
    let picks: Vec<CePick> = (0..6)
        .map(|_| CePick {
            base: rng.random_range(0..n) * k * hw + rng.random_range(0..hw),
            stride: hw,
            label: rng.random_range(0..k),
            weight: rng.random_range(0.1..1.0),
        })
        .collect();
    run("cross_entropy", &logits, &|t, v| {
        t.cross_entropy(v, k, &picks)
    });
    run("charbonnier", &logits, &|t, v| {
        let s = t.scale(v, 6.0);
        let y = t.charbonnier(s, 2.0)?;
        Ok(project(t, y, seed))
    });
    let queries: Vec<ComposeQuery> = (0..5)
        .map(|_| ComposeQuery {
            base: rng.random_range(0..n) * k * hw + rng.random_range(0..hw),
            stride: hw,
            theta: rng.random_range(-3.1..3.1),
        })
        .collect();
    let groups = vec![vec![0, 1], vec![1, 2, 3], vec![4]];
    run("compose + gather_mean", &logits, &|t, v| {
        let y = t.compose(v, k, &queries, 25.0)?;
        let g = t.gather_mean(y, &groups)?;
        Ok(project(t, g, seed))
    });
    run("total_variation", &x, &|t, v| t.total_variation(v));
}

fn random_targets(rng: &mut ChaCha8Rng, n: usize, size: usize, k: usize) -> Targets {
    let mut t = Targets::default();
    for b in 0..n {
        t.masks.push(RoadMask {
            size,
            data: (0..size * size).map(|_| rng.random_range(0..2u8)).collect(),
        });
        t.labels.push(
            (0..6)
                .map(|_| OrientationLabel {
                    pixel: Pixel::new(
                        rng.random_range(0..size as u32),
                        rng.random_range(0..size as u32),
                    ),
                    bin: rng.random_range(0..k),
                })
                .collect(),
        );
        let entries = (0..3)
            .map(|e| {
                let m = rng.random_range(1..5);
                SupervisionEntry {
                    segment_id: format!("s{b}_{e}"),
                    pixels: (0..m)
                        .map(|_| {
                            Pixel::new(
                                rng.random_range(0..size as u32),
                                rng.random_range(0..size as u32),
                            )
                        })
                        .collect(),
                    target_kmh: rng.random_range(10.0..80.0),
                    thetas: (0..m).map(|_| rng.random_range(-3.1..3.1)).collect(),
                }
            })
            .collect();
        t.speeds.push(SpeedSupervision { entries });
    }
    t
}

fn full_loss_check(aggregation: Aggregation) -> GradCheckReport {
    let cfg = ModelConfig {
        base_channels: 2,
        encoder_depth: 2,
        k_bins: 4,
        ..Default::default()
    };
    let model = TrafficModel::build(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let images = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let ctx: Vec<ContextInput> = (0..2)
        .map(|i| ContextInput {
            point: GeoPoint::new(40.75 + 1e-3 * i as f64, -73.98).unwrap(),
            slot: Slot::new(i as u8, 8 + i as u8).unwrap(),
        })
        .collect();
    let targets = random_targets(&mut rng, 2, 8, 4);
    let loss = LossConfig {
        aggregation,
        ..Default::default()
    };
    grad_check_params(
        &model.params,
        |tape, store| {
            let mut m = model.clone();
            m.params = store.clone();
            let (out, _) = m.forward(tape, &images, &ctx, true)?;
            Ok(total_loss(tape, &out, &targets, &loss)?.0)
        },
        GRAD_EPS,
    )
    .unwrap()
}

fn gradients() -> Verdict {
    let mut worst = BTreeMap::new();
    for seed in 0..10 {
        op_checks(seed, &mut worst);
    }
    let (op, op_err) = worst
        .iter()
        .fold(("", 0.0f64), |a, (k, v)| if *v > a.1 { (k, *v) } else { a });
    let region = full_loss_check(Aggregation::Region);
    let replicate = full_loss_check(Aggregation::Replicate);
    let pass = op_err < GRAD_TOL
        && region.max_rel_error < GRAD_TOL
        && replicate.max_rel_error < GRAD_TOL
        && region.checked > 0
        && replicate.checked > 0;
    verdict(
        pass,
        format!(
            "{} ops, worst {op} {op_err:.2e}; full loss {:.2e} over {} params ({} kink-straddling skipped), replicated {:.2e}",
            worst.len(),
            region.max_rel_error,
            region.checked,
            region.skipped_kinks,
            replicate.max_rel_error
        ),
    )
}

// ---------------------------------------------------------------- loss oracles

fn brute_charbonnier(a: f64, d: f64) -> f64 {
    d * ((d * d + a * a).sqrt() - d)
}

fn loss_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, a: f64, b: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max((a - b).abs());
    };
    let cases = 120;
    for _ in 0..cases {
        let n = rng.random_range(1..4);
        let k = rng.random_range(2..6);
        let size = rng.random_range(2..7);
        let hw = size * size;
        let targets = random_targets(&mut rng, n, size, k);

        // charbonnier, elementwise and as the Region speed loss
        let delta = rng.random_range(0.5..4.0);
        let xs: Vec<f64> = (0..8).map(|_| rng.random_range(-50.0..50.0)).collect();
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(&[8], xs.clone()).unwrap());
        let c = t.charbonnier(v, delta).unwrap();
        for (got, x) in t.value(c).data().iter().zip(&xs) {
            note("charbonnier", *got, brute_charbonnier(*x, delta));
            note(
                "charbonnier",
                charbonnier(*x, delta),
                brute_charbonnier(*x, delta),
            );
        }

        // dice via the road loss
        let road: Vec<f64> = (0..n * hw).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut t = Tape::new();
        let rv = t.constant(Tensor::new(&[n, 1, size, size], road.clone()).unwrap());
        let v = road_loss(&mut t, rv, &targets.masks).unwrap();
        let got = t.value(v).item();
        let (mut bce, mut dice) = (0.0, 0.0);
        for b in 0..n {
            let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for i in 0..hw {
                let z = road[b * hw + i];
                let g = f64::from(targets.masks[b].data[i]);
                let p = 1.0 / (1.0 + (-z).exp());
                bce += -(g * p.ln() + (1.0 - g) * (1.0 - p).ln());
                inter += p * g;
                sp += p;
                sg += g;
            }
            dice += (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS);
        }
        note("dice", got, bce / (n * hw) as f64 + 1.0 - dice / n as f64);

        // cross entropy via the orientation loss
        let logits: Vec<f64> = (0..n * k * hw)
            .map(|_| rng.random_range(-4.0..4.0))
            .collect();
        let mut t = Tape::new();
        let lv = t.constant(Tensor::new(&[n, k, size, size], logits.clone()).unwrap());
        let v = orientation_loss(&mut t, lv, &targets.labels).unwrap();
        let got = t.value(v).item();
        let (mut s, mut m) = (0.0, 0usize);
        for (b, ls) in targets.labels.iter().enumerate() {
            for l in ls {
                let at = |ch: usize| {
                    logits
                        [((b * k + ch) * size + l.pixel.row as usize) * size + l.pixel.col as usize]
                };
                let z: f64 = (0..k).map(|ch| at(ch).exp()).sum();
                s += -(at(l.bin).exp() / z).ln();
                m += 1;
            }
        }
        note("cross entropy", got, s / m as f64);

        // total variation
        let field: Vec<f64> = (0..n * k * hw)
            .map(|_| rng.random_range(0.0..90.0))
            .collect();
        let mut t = Tape::new();
        let fv = t.constant(Tensor::new(&[n, k, size, size], field.clone()).unwrap());
        let v = tv_reg(&mut t, fv).unwrap();
        let got = t.value(v).item();
        let (mut s, mut m) = (0.0, 0usize);
        for plane in 0..n * k {
            for r in 0..size {
                for c in 0..size {
                    let here = field[plane * hw + r * size + c];
                    for (dr, dc) in [(1, 0), (0, 1)] {
                        if r + dr < size && c + dc < size {
                            s += (field[plane * hw + (r + dr) * size + c + dc] - here).powi(2);
                            m += 1;
                        }
                    }
                }
            }
        }
        note("tv", got, s / m as f64);

        // region aggregation of an N×1×H×W field
        let plane: Vec<f64> = (0..n * hw).map(|_| rng.random_range(0.0..90.0)).collect();
        let regions: Vec<(usize, Vec<Pixel>)> = (0..4)
            .map(|_| {
                let m = rng.random_range(1..6);
                let px = (0..m)
                    .map(|_| {
                        Pixel::new(
                            rng.random_range(0..size as u32),
                            rng.random_range(0..size as u32),
                        )
                    })
                    .collect();
                (rng.random_range(0..n), px)
            })
            .collect();
        let mut t = Tape::new();
        let pv = t.constant(Tensor::new(&[n, 1, size, size], plane.clone()).unwrap());
        let agg = region_aggregate(&mut t, pv, &regions).unwrap();
        for (got, (img, px)) in t.value(agg).data().iter().zip(&regions) {
            let mut s = 0.0;
            for p in px {
                s += plane[img * hw + p.row as usize * size + p.col as usize];
            }
            note("region_aggregate", *got, s / px.len() as f64);
        }

        // the Region speed loss: compose, aggregate per segment, charbonnier, mean
        let raw: Vec<f64> = (0..n * k * hw)
            .map(|_| rng.random_range(0.0..90.0))
            .collect();
        let cfg = LossConfig {
            delta,
            ..Default::default()
        };
        let mut t = Tape::new();
        let sv = t.constant(Tensor::new(&[n, k, size, size], raw.clone()).unwrap());
        let v = speed_loss(&mut t, sv, &targets.speeds, &cfg).unwrap();
        let got = t.value(v).item();
        let (mut s, mut m) = (0.0, 0usize);
        for (b, sup) in targets.speeds.iter().enumerate() {
            for e in &sup.entries {
                let mut acc = 0.0;
                for (p, th) in e.pixels.iter().zip(&e.thetas) {
                    let w: Vec<f64> = (0..k)
                        .map(|i| (cfg.k * (th - bin_center(i, k)).cos()).exp())
                        .collect();
                    let z: f64 = w.iter().sum();
                    acc += (0..k)
                        .map(|i| {
                            w[i] / z
                                * raw[((b * k + i) * size + p.row as usize) * size + p.col as usize]
                        })
                        .sum::<f64>();
                }
                s += brute_charbonnier(acc / e.pixels.len() as f64 - e.target_kmh, delta);
                m += 1;
            }
        }
        note("region speed loss", got, s / m as f64);
    }
    let (name, err) = worst
        .iter()
        .fold(("", 0.0f64), |a, (k, v)| if *v > a.1 { (k, *v) } else { a });
    verdict(
        err <= ORACLE_TOL,
        format!(
            "{cases} random cases × {} objectives, worst {name} {err:.2e}",
            worst.len()
        ),
    )
}

// ---------------------------------------------------------------- training trends

#[derive(Clone, Copy, PartialEq, Eq)]
enum Variant {
    Full,
    Replicate,
    ImageOnly,
    Uniform,
}

struct Trained {
    rmse: f64,
    pooled_r2: f64,
    baseline_r2: f64,
    rush: (f64, f64),
    took: Duration,
}

struct Setup {
    world: SynthWorld,
    data: Dataset,
}

fn setup(seed: u64, asymmetry: f64, k_bins: usize) -> Setup {
    let world = SynthWorld::generate(SynthConfig {
        seed,
        direction_asymmetry: asymmetry,
        ..Default::default()
    })
    .unwrap();
    let ratios = SplitRatios {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };
    let split = split_tiles(&world.tiles, ratios, seed).unwrap();
    let data = Dataset::from_world(&world, split, k_bins).unwrap();
    Setup { world, data }
}

fn macro_slots() -> Vec<Slot> {
    match TimePolicy::default_macro() {
        TimePolicy::SlotList { slots } => slots,
        TimePolicy::FixedRandomPerImage { .. } => unreachable!(),
    }
}

fn r_squared(y: &[f64], p: &[f64]) -> f64 {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// User plus system CPU time of this process.
fn cpu_time() -> Duration {
    // SAFETY: getrusage only writes into the zeroed struct it is given.
    let u = unsafe {
        let mut u: libc::rusage = std::mem::zeroed();
        libc::getrusage(libc::RUSAGE_SELF, &mut u);
        u
    };
    let tv = |t: libc::timeval| Duration::new(t.tv_sec as u64, t.tv_usec as u32 * 1000);
    tv(u.ru_utime) + tv(u.ru_stime)
}

fn train_variant(s: &Setup, variant: Variant, seed: u64) -> Trained {
    let start = cpu_time();
    let mut model_cfg = ModelConfig {
        base_channels: BASE_CHANNELS,
        ..Default::default()
    };
    let mut loss = LossConfig::default();
    match variant {
        Variant::Full => {}
        Variant::Replicate => loss.aggregation = Aggregation::Replicate,
        Variant::ImageOnly => {
            model_cfg.use_loc = false;
            model_cfg.use_time = false;
        }
        Variant::Uniform => loss.composition = Composition::Uniform,
    }
    let model = TrafficModel::build(&model_cfg, seed).unwrap();
    let cfg = TrainConfig {
        epochs: EPOCHS,
        steps_per_epoch: Some(STEPS_PER_EPOCH),
        seed,
        ..Default::default()
    };
    let out = train(model, &s.data, &cfg, &loss).unwrap();
    let p = NetworkPredictor::new(&out.model, &loss);
    let test = &s.data.split.test;
    let report = evaluate(&p, &s.data, test, &TimePolicy::default_macro()).unwrap();

    let slots = macro_slots();
    let pred = predict_segments(&p, &s.data, test, &slots).unwrap();
    let (mut y, mut yhat) = (Vec::new(), Vec::new());
    for (slot, segs) in &pred {
        for (id, v) in segs {
            if let Some(stat) = s.data.table.get(id, *slot) {
                y.push(stat.speed_kmh);
                yhat.push(*v);
            }
        }
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let baseline_r2 = r_squared(&y, &vec![mean; y.len()]);

    let rush_slots = [Slot::new(0, 8).unwrap(), Slot::new(0, 4).unwrap()];
    let rush = predict_segments(&p, &s.data, test, &rush_slots).unwrap();
    let residential = |slot: &Slot| {
        let v: Vec<f64> = rush[slot]
            .iter()
            .filter(|(id, _)| s.world.class_of(id) == Some(RoadClass::Residential))
            .map(|(_, v)| *v)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    Trained {
        rmse: report.rmse,
        pooled_r2: r_squared(&y, &yhat),
        baseline_r2,
        rush: (residential(&rush_slots[0]), residential(&rush_slots[1])),
        took: cpu_time() - start,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn list(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.2}"))
        .collect::<Vec<_>>()
        .join("/")
}

#[derive(Default)]
struct Trends {
    full: Vec<Trained>,
    replicate: Vec<Trained>,
    image_only: Vec<Trained>,
    weighted: Vec<Trained>,
    uniform: Vec<Trained>,
}

fn cpu(runs: &[&[Trained]]) -> Duration {
    runs.iter().flat_map(|r| r.iter()).map(|t| t.took).sum()
}

fn rmses(r: &[Trained]) -> Vec<f64> {
    r.iter().map(|t| t.rmse).collect()
}

fn aggregation_trend(t: &Trends) -> Verdict {
    let (a, b) = (rmses(&t.full), rmses(&t.replicate));
    let took = cpu(&[&t.full, &t.replicate]);
    let pass = median(a.clone()) < median(b.clone()) && took < Duration::from_secs(30 * 60);
    verdict(
        pass,
        format!(
            "median test RMSE region {:.3} vs replicate {:.3} (seeds {} vs {}), {:.0} CPU s",
            median(a.clone()),
            median(b.clone()),
            list(&a),
            list(&b),
            took.as_secs_f64()
        ),
    )
}

fn context_trend(t: &Trends) -> Verdict {
    let (a, b) = (rmses(&t.full), rmses(&t.image_only));
    let took = cpu(&[&t.full, &t.image_only]);
    let dips = t.full.iter().filter(|r| r.rush.0 < r.rush.1).count();
    let rush: Vec<String> = t
        .full
        .iter()
        .map(|r| format!("{:.1}<{:.1}", r.rush.0, r.rush.1))
        .collect();
    let pass = median(a.clone()) < median(b.clone())
        && dips == t.full.len()
        && took < Duration::from_secs(45 * 60);
    verdict(
        pass,
        format!(
            "median test RMSE image+loc+time {:.3} vs image only {:.3} (seeds {} vs {}); residential Mon 8 vs Mon 4 km/h {}; {:.0} CPU s",
            median(a.clone()),
            median(b.clone()),
            list(&a),
            list(&b),
            rush.join(", "),
            took.as_secs_f64()
        ),
    )
}

fn weighting_trend(t: &Trends) -> Verdict {
    let (a, b) = (rmses(&t.weighted), rmses(&t.uniform));
    let took = cpu(&[&t.weighted, &t.uniform]);
    let wins = a.iter().zip(&b).filter(|(x, y)| x < y).count();
    let pass = median(a.clone()) < median(b.clone()) && took < Duration::from_secs(30 * 60);
    verdict(
        pass,
        format!(
            "asymmetry {ASYMMETRY}: median test RMSE weighted {:.3} vs uniform {:.3} (seeds {} vs {}, weighted ahead on {wins}/3), {:.0} CPU s",
            median(a.clone()),
            median(b.clone()),
            list(&a),
            list(&b),
            took.as_secs_f64()
        ),
    )
}

fn learnability(t: &Trends) -> Verdict {
    let r2: Vec<f64> = t.full.iter().map(|r| r.pooled_r2).collect();
    let base: Vec<f64> = t.full.iter().map(|r| r.baseline_r2).collect();
    let pass = median(r2.clone()) > 0.5 && base.iter().all(|b| b.abs() < 1e-9);
    verdict(
        pass,
        format!(
            "held-out R² median {:.3} (seeds {}), global-mean baseline R² {:.1e}",
            median(r2.clone()),
            list(&r2),
            base.iter().fold(0.0f64, |a, b| a.max(b.abs()))
        ),
    )
}

fn run_trends(wanted: &dyn Fn(u32) -> bool) -> Trends {
    let mut t = Trends::default();
    let need_full = wanted(4) || wanted(5) || wanted(7);
    let k = ModelConfig::default().k_bins;
    for seed in SEEDS {
        if need_full || wanted(4) || wanted(5) {
            let s = setup(seed, 0.0, k);
            if need_full {
                t.full.push(train_variant(&s, Variant::Full, seed));
            }
            if wanted(4) {
                t.replicate
                    .push(train_variant(&s, Variant::Replicate, seed));
            }
            if wanted(5) {
                t.image_only
                    .push(train_variant(&s, Variant::ImageOnly, seed));
            }
        }
        if wanted(6) {
            let s = setup(seed, ASYMMETRY, k);
            t.weighted.push(train_variant(&s, Variant::Full, seed));
            t.uniform.push(train_variant(&s, Variant::Uniform, seed));
        }
    }
    t
}

// ---------------------------------------------------------------- graphs

fn random_graph(rng: &mut ChaCha8Rng) -> RoadGraph {
    let n = rng.random_range(2..=8);
    let m = rng.random_range(0..=n * 3);
    let nodes = (0..n)
        .map(|i| GeoPoint::new(40.0 + 1e-3 * i as f64, -74.0).unwrap())
        .collect();
    let edges = (0..m)
        .map(|i| Edge {
            from: rng.random_range(0..n),
            to: rng.random_range(0..n),
            segment_id: format!("e{i}"),
            length_m: rng.random_range(1.0..100.0),
        })
        .collect();
    RoadGraph::from_parts(nodes, edges).unwrap()
}

/// Minimum over all simple paths, by exhaustive search.
fn enumerate(g: &RoadGraph, w: &dyn Fn(usize) -> f64, src: usize) -> Vec<f64> {
    fn go(
        g: &RoadGraph,
        w: &dyn Fn(usize) -> f64,
        at: usize,
        acc: f64,
        seen: &mut Vec<bool>,
        best: &mut Vec<f64>,
    ) {
        best[at] = best[at].min(acc);
        for (i, e) in g.edges.iter().enumerate() {
            if e.from == at && !seen[e.to] {
                seen[e.to] = true;
                go(g, w, e.to, acc + w(i), seen, best);
                seen[e.to] = false;
            }
        }
    }
    let mut best = vec![f64::INFINITY; g.node_count()];
    let mut seen = vec![false; g.node_count()];
    seen[src] = true;
    go(g, w, src, 0.0, &mut seen, &mut best);
    best
}

/// Equal up to summation order.
fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

fn graphs() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    let mut pairs = 0;
    let mut nesting_ok = true;
    let mut ladders = 0;
    for _ in 0..100 {
        let g = random_graph(&mut rng);
        let speeds: BTreeMap<String, f64> = g
            .edges
            .iter()
            .map(|e| (e.segment_id.clone(), rng.random_range(5.0..90.0)))
            .collect();
        let times = if speeds.is_empty() {
            None
        } else {
            Some(assign_speeds(&g, &speeds).unwrap())
        };
        for src in 0..g.node_count() {
            let len = enumerate(&g, &|e| g.edges[e].length_m, src);
            let (dist, _) = dijkstra(&g, src, Metric::Length).unwrap();
            for dst in 0..g.node_count() {
                pairs += 1;
                let route = shortest_path(&g, src, dst, Metric::Length).unwrap();
                let same = match route {
                    None => len[dst].is_infinite(),
                    Some(r) => close(r.total_length_m, len[dst]),
                };
                if !same || !close(dist[dst], len[dst]) {
                    mismatches += 1;
                }
            }
            if let Some(times) = &times {
                let tt = enumerate(&g, &|e| times.time_s[e], src);
                let (dist, _) = dijkstra(&g, src, Metric::Time(times)).unwrap();
                for dst in 0..g.node_count() {
                    pairs += 1;
                    if !close(dist[dst], tt[dst]) {
                        mismatches += 1;
                    }
                }
                let mut ladder: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..30.0)).collect();
                ladder.sort_by(f64::total_cmp);
                ladder.dedup();
                let iso = isochrone(&g, src, &ladder, times).unwrap();
                ladders += 1;
                for w in iso.levels.windows(2) {
                    nesting_ok &= w[0].nodes.iter().all(|n| w[1].nodes.contains(n));
                }
                for l in &iso.levels {
                    nesting_ok &= l.nodes.iter().all(|&n| tt[n] <= l.budget_s);
                }
            }
        }
    }

    // nesting on the synthetic city with world speeds, at many ladders
    let w = synth_city(4, 20, 5).unwrap();
    let g = build_graph(&w.segments).unwrap();
    let slot = Slot::new(0, 8).unwrap();
    let speeds: BTreeMap<String, f64> = w
        .segments
        .iter()
        .map(|s| {
            (
                s.id.clone(),
                w.speed_fn(&s.id, slot.day, slot.hour).unwrap(),
            )
        })
        .collect();
    let times = assign_speeds(&g, &speeds).unwrap();
    for _ in 0..50 {
        let src = rng.random_range(0..g.node_count());
        let mut ladder: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..120.0)).collect();
        ladder.sort_by(f64::total_cmp);
        ladder.dedup();
        let iso = isochrone(&g, src, &ladder, &times).unwrap();
        ladders += 1;
        for l in iso.levels.windows(2) {
            nesting_ok &= l[0].nodes.iter().all(|n| l[1].nodes.contains(n));
        }
    }

    let one = RoadGraph::from_parts(
        vec![
            GeoPoint::new(40.0, -74.0).unwrap(),
            GeoPoint::new(40.001, -74.0).unwrap(),
        ],
        vec![Edge {
            from: 0,
            to: 1,
            segment_id: "a".into(),
            length_m: 100.0,
        }],
    )
    .unwrap();
    let t = assign_speeds(&one, &BTreeMap::from([("a".to_string(), 36.0)])).unwrap();
    let exact = t.time_s[0] == 10.0 && travel_time_s(100.0, 36.0) == 10.0;
    let route = shortest_path(&one, 0, 1, Metric::Time(&t))
        .unwrap()
        .unwrap();
    let exact = exact && route.total_time_s == Some(10.0);
    verdict(
        mismatches == 0 && nesting_ok && exact,
        format!(
            "{pairs} source/target pairs on 100 graphs, {mismatches} mismatches; {ladders} isochrone ladders nested: {nesting_ok}; 100 m at 36 km/h = {} s",
            t.time_s[0]
        ),
    )
}

// ---------------------------------------------------------------- determinism

const CLI_CONFIG: &str = r#"
[split]
train = 0.6
val = 0.2
test = 0.2

[model]
base_channels = 4
encoder_depth = 2
k_bins = 8

[train]
batch_size = 2
epochs = 2
steps_per_epoch = 3
crop_size = 16
"#;

fn cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_dynaflow"))
        .args(args)
        .env("DYNAFLOW_THREADS", "1")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let config = root.join("run.toml");
    std::fs::write(&config, CLI_CONFIG).unwrap();
    let c = config.to_str().unwrap();
    let mut ok = true;
    let mut files = 0;
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let dir = root.join(name);
        let data = dir.join("data");
        let out = dir.join("out");
        std::fs::create_dir_all(&out).unwrap();
        let (d, o) = (
            data.to_str().unwrap().to_string(),
            out.to_str().unwrap().to_string(),
        );
        ok &= cli(&[
            "synth", "--config", c, "--out", &d, "--grid-n", "3", "--seed", "7",
        ]);
        let ck = format!("{o}/model.ckpt");
        ok &= cli(&[
            "train", "--config", c, "--data", &d, "--out", &ck, "--seed", "3",
        ]);
        ok &= cli(&[
            "eval",
            "--config",
            c,
            "--data",
            &d,
            "--checkpoint",
            &ck,
            "--split",
            "all",
            "--out",
            &format!("{o}/eval.json"),
        ]);
        let args = [
            "predict",
            "--config",
            c,
            "--data",
            &d,
            "--checkpoint",
            &ck,
            "--slot",
            "Mon:8",
            "--slot",
            "Sat:3",
        ];
        let mut a = args.to_vec();
        let p = format!("{o}/pred.csv");
        a.extend(["--out", &p]);
        ok &= cli(&a);
        let both = (tree(&data), tree(&out));
        files += both.0.len() + both.1.len();
        runs.push(both);
    }
    let same = runs[0] == runs[1];
    let expected = ["model.ckpt", "train_log.csv", "eval.json", "pred.csv"];
    let complete = expected
        .iter()
        .all(|f| runs[0].1.contains_key(Path::new(f)));
    verdict(
        ok && same && complete,
        format!("synth, train, eval, predict run twice: commands ok {ok}, {files} files, byte-identical {same}"),
    )
}

// ---------------------------------------------------------------- geometry

fn brute_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let mut t = ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2;
    t = t.clamp(0.0, 1.0);
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

/// Scans every pixel for the one whose square holds the local point.
fn brute_pixel(frame: &PixelFrame, q: [f64; 2]) -> Option<Pixel> {
    let (mx, my) = (frame.meters_per_pixel(), frame.meters_per_pixel_y());
    let mut hit = None;
    for r in 0..frame.size_px {
        for c in 0..frame.size_px {
            let ctr = frame.pixel_center_local(r, c);
            let inside_x = q[0] >= ctr[0] - 0.5 * mx && q[0] < ctr[0] + 0.5 * mx;
            let inside_y = q[1] <= ctr[1] + 0.5 * my && q[1] > ctr[1] - 0.5 * my;
            if inside_x && inside_y {
                hit = Some(Pixel::new(r, c));
            }
        }
    }
    hit
}

fn geometry() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let tile = latlon_to_tile(GeoPoint::new(40.7484, -73.9857).unwrap(), 19).unwrap();
    let frame = tile_pixel_frame(tile, 64).unwrap();
    let half = 0.5 * 64.0 * frame.meters_per_pixel();
    let (mut buffer_bad, mut sample_bad, mut pixels, mut samples) = (0, 0, 0, 0);
    for i in 0..50 {
        let m = rng.random_range(2..5);
        let local: Vec<[f64; 2]> = (0..m)
            .map(|_| {
                [
                    rng.random_range(-1.2 * half..1.2 * half),
                    rng.random_range(-1.2 * half..1.2 * half),
                ]
            })
            .collect();
        let points: Vec<GeoPoint> = local
            .iter()
            .map(|p| frame.from_local(*p).unwrap())
            .collect();
        let seg = RoadSegment::new(format!("g{i}"), points, None).unwrap();
        let pts: Vec<[f64; 2]> = seg.points.iter().map(|p| frame.to_local(p)).collect();

        let width = rng.random_range(0.5..6.0);
        let got = buffer_segment(&seg, &frame, width).unwrap();
        let mut want = PixelSet::new();
        for r in 0..64 {
            for c in 0..64 {
                let ctr = frame.pixel_center_local(r, c);
                if pts
                    .windows(2)
                    .any(|w| brute_distance(ctr, w[0], w[1]) <= width + 1e-9)
                {
                    want.insert(Pixel::new(r, c));
                }
            }
        }
        pixels += want.len();
        buffer_bad += usize::from(got != want);

        let spacing = rng.random_range(0.5..3.0);
        let lateral = f64::from(rng.random_range(0..4u8));
        let got = sample_along(&seg, &frame, spacing, lateral).unwrap();
        let pieces: Vec<([f64; 2], [f64; 2], f64)> = pts
            .windows(2)
            .map(|w| {
                let d = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
                (w[0], d, d[0].hypot(d[1]))
            })
            .collect();
        let total: f64 = pieces.iter().map(|p| p.2).sum();
        let mut want = Vec::new();
        let mut i = 0;
        while i as f64 * spacing <= total + 1e-6 * spacing {
            let at = (i as f64 * spacing).min(total);
            let (mut start, mut j) = (0.0, 0);
            while j + 1 < pieces.len() && at >= start + pieces[j].2 {
                start += pieces[j].2;
                j += 1;
            }
            let (o, d, len) = pieces[j];
            let t = ((at - start) / len).clamp(0.0, 1.0);
            let pos = [o[0] + t * d[0], o[1] + t * d[1]];
            let theta = d[1].atan2(d[0]);
            let nrm = [-d[1] / len, d[0] / len];
            for off in -(lateral as i64)..=lateral as i64 {
                let q = [pos[0] + off as f64 * nrm[0], pos[1] + off as f64 * nrm[1]];
                if let Some(px) = brute_pixel(&frame, q) {
                    want.push((px, theta));
                }
            }
            i += 1;
        }
        samples += want.len();
        let got: Vec<(Pixel, f64)> = got.iter().map(|d| (d.pixel, d.theta)).collect();
        sample_bad += usize::from(got != want);
    }
    verdict(
        buffer_bad == 0 && sample_bad == 0,
        format!("50 segments on a 64×64 frame: buffer mismatches {buffer_bad} ({pixels} pixels), sample mismatches {sample_bad} ({samples} samples)"),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let only: Option<Vec<u32>> = std::env::var("DYNAFLOW_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |c: u32| only.as_ref().is_none_or(|o| o.contains(&c));
    let mut failed = 0;
    let mut report = |id: u32, name: &str, start: Instant, v: Verdict| {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "{tag} criterion {id} ({name}): {} [{:.1}s]",
            v.detail,
            start.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed += 1;
        }
    };
    if wanted(2) {
        let t = Instant::now();
        report(2, "gradient integrity", t, gradients());
    }
    if wanted(3) {
        let t = Instant::now();
        report(3, "loss oracles", t, loss_oracles());
    }
    if (4..=7).any(&wanted) {
        let t = Instant::now();
        let trends = run_trends(&wanted);
        if wanted(4) {
            report(
                4,
                "region aggregation beats replication",
                t,
                aggregation_trend(&trends),
            );
        }
        if wanted(5) {
            report(
                5,
                "time and location context helps",
                t,
                context_trend(&trends),
            );
        }
        if wanted(6) {
            report(
                6,
                "orientation weighting beats uniform",
                t,
                weighting_trend(&trends),
            );
        }
        if wanted(7) {
            report(7, "end-to-end learnability", t, learnability(&trends));
        }
    }
    if wanted(8) {
        let t = Instant::now();
        report(8, "graph correctness", t, graphs());
    }
    if wanted(9) {
        let t = Instant::now();
        report(9, "determinism", t, determinism());
    }
    if wanted(10) {
        let t = Instant::now();
        report(10, "geometry oracles", t, geometry());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
