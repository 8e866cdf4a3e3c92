//! Procedural street-grid city with a deterministic ground-truth speed
//! function and rendered overhead imagery.
//!
//! Streets run along an irregular grid. Every block between two grid nodes
//! is cut at tile boundaries, so each directed segment lies inside a single
//! tile at `tile_zoom`. Speeds combine a class base speed, a diurnal
//! profile with weekday rush-hour dips, a per-segment factor (a smooth
//! congested-district field times noise), an optional
//! direction asymmetry and a slowdown near intersections averaged over the
//! segment's extent.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Slot, SpeedRecord, SpeedTable, SLOTS};
use crate::geo::{self, GeoPoint, PixelFrame, RoadSegment, TileIndex};
use crate::{Error, Result};

pub const MIN_SPEED_KMH: f64 = 5.0;
pub const MAX_SPEED_KMH: f64 = 110.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadClass {
    Highway,
    Residential,
}

impl RoadClass {
    pub fn base_speed_kmh(self) -> f64 {
        match self {
            RoadClass::Highway => 80.0,
            RoadClass::Residential => 40.0,
        }
    }

    /// Half width of the painted carriageway in the rendered imagery.
    pub fn render_half_width_m(self) -> f64 {
        match self {
            RoadClass::Highway => 5.0,
            RoadClass::Residential => 3.0,
        }
    }

    fn albedo(self) -> [f64; 3] {
        match self {
            RoadClass::Highway => [0.18, 0.18, 0.21],
            RoadClass::Residential => [0.52, 0.51, 0.49],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub grid_n: usize,
    pub tile_zoom: u8,
    pub tile_px: u32,
    pub seed: u64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub block_min_m: f64,
    pub block_max_m: f64,
    pub highway_fraction: f64,
    /// Forward (east/north bound) speeds scale by 1 + a, reverse by 1 - a.
    pub direction_asymmetry: f64,
    /// Fractional speed loss at the center of a congested district, fading
    /// as a Gaussian of distance with scale `district_radius_m`.
    pub district_slowdown: f64,
    pub district_radius_m: f64,
    /// Fractional speed loss right at an intersection.
    pub intersection_slowdown: f64,
    pub intersection_scale_m: f64,
    /// Probability that a (segment, slot) pair has observed data.
    pub coverage: f64,
    pub samples_per_slot: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_n: 6,
            tile_zoom: 20,
            tile_px: 32,
            seed: 0,
            origin_lat: 40.7484,
            origin_lon: -73.9857,
            block_min_m: 35.0,
            block_max_m: 55.0,
            highway_fraction: 0.3,
            direction_asymmetry: 0.0,
            district_slowdown: 0.3,
            district_radius_m: 100.0,
            intersection_slowdown: 0.5,
            intersection_scale_m: 8.0,
            coverage: 0.9,
            samples_per_slot: 52,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTruth {
    pub class: RoadClass,
    pub street: String,
    pub forward: bool,
    pub factor: f64,
    pub intersection_factor: f64,
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub segments: Vec<RoadSegment>,
    pub truth: Vec<SegmentTruth>,
    pub grid_nodes: Vec<GeoPoint>,
    pub tiles: Vec<TileIndex>,
    index: BTreeMap<String, usize>,
    origin_frame: PixelFrame,
}

pub fn synth_city(grid_n: usize, tile_zoom: u8, seed: u64) -> Result<SynthWorld> {
    SynthWorld::generate(SynthConfig {
        grid_n,
        tile_zoom,
        seed,
        ..SynthConfig::default()
    })
}

/// Multiplicative diurnal profile. Day 0 is Monday.
pub fn diurnal_profile(slot: Slot, class: RoadClass) -> f64 {
    let weekday = slot.day < 5;
    let rush = match class {
        RoadClass::Highway => 0.6,
        RoadClass::Residential => 0.5,
    };
    match (weekday, slot.hour) {
        (_, 0..=5) => 1.0,
        (true, 8 | 17) => rush,
        (true, 7 | 9 | 16 | 18) => 0.5 * (1.0 + rush) + 0.05,
        (true, 10..=15) => 0.85,
        (true, _) => 0.92,
        (false, 10..=20) => 0.88,
        (false, _) => 0.95,
    }
}

impl SynthWorld {
    pub fn generate(config: SynthConfig) -> Result<Self> {
        if config.grid_n < 2 {
            return Err(Error::Config("grid_n must be at least 2".into()));
        }
        if !(config.block_min_m > 0.0 && config.block_max_m >= config.block_min_m) {
            return Err(Error::Config("block length range is invalid".into()));
        }
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(config.direction_asymmetry)
            || !unit(config.intersection_slowdown)
            || !unit(config.district_slowdown)
        {
            return Err(Error::Config(
                "asymmetry and slowdowns must lie in [0, 1)".into(),
            ));
        }
        if !(config.district_radius_m > 0.0) {
            return Err(Error::Config("district_radius_m must be positive".into()));
        }
        if config.tile_px < 16 {
            return Err(Error::Config("tile_px must be at least 16".into()));
        }
        let n = config.grid_n;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let axis = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut v = vec![0.0];
            for _ in 1..n {
                let gap = rng.random_range(config.block_min_m..=config.block_max_m);
                v.push(v.last().unwrap() + gap);
            }
            let mid = 0.5 * v[n - 1];
            v.iter_mut().for_each(|x| *x -= mid);
            v
        };
        let xs = axis(&mut rng);
        let ys = axis(&mut rng);
        let downtown = [
            rng.random_range(xs[0]..=xs[n - 1]),
            rng.random_range(ys[0]..=ys[n - 1]),
        ];
        let district = |m: [f64; 2]| {
            let d2 = (m[0] - downtown[0]).powi(2) + (m[1] - downtown[1]).powi(2);
            1.0 - config.district_slowdown * (-0.5 * d2 / config.district_radius_m.powi(2)).exp()
        };

        // street classes: rows first, then columns
        let mut classes: Vec<RoadClass> = (0..2 * n)
            .map(|_| {
                if rng.random_bool(config.highway_fraction.clamp(0.0, 1.0)) {
                    RoadClass::Highway
                } else {
                    RoadClass::Residential
                }
            })
            .collect();
        if !classes.contains(&RoadClass::Highway) {
            let i = rng.random_range(0..classes.len());
            classes[i] = RoadClass::Highway;
        }
        if !classes.contains(&RoadClass::Residential) {
            let i = rng.random_range(0..classes.len());
            classes[i] = RoadClass::Residential;
        }

        let origin = GeoPoint::new(config.origin_lat, config.origin_lon)?;
        let origin_tile = geo::latlon_to_tile(origin, config.tile_zoom)?;
        let origin_frame = geo::tile_pixel_frame(origin_tile, config.tile_px)?;
        let to_geo = |x: f64, y: f64| origin_frame.from_local([x, y]);

        let mut grid_nodes = Vec::with_capacity(n * n);
        for &y in &ys {
            for &x in &xs {
                grid_nodes.push(to_geo(x, y)?);
            }
        }

        let zoom_n = (1u64 << config.tile_zoom) as f64;
        let lon_edges = |a: f64, b: f64| -> Vec<f64> {
            let (lo, hi) = (a.min(b), a.max(b));
            let first = ((lo + 180.0) / 360.0 * zoom_n).floor() as i64 + 1;
            let mut out = Vec::new();
            let mut k = first;
            loop {
                let lon = k as f64 / zoom_n * 360.0 - 180.0;
                if lon >= hi {
                    break;
                }
                if lon > lo {
                    out.push(lon);
                }
                k += 1;
            }
            out
        };
        let lat_edges = |a: f64, b: f64| -> Vec<f64> {
            let (lo, hi) = (a.min(b), a.max(b));
            let ty = |lat: f64| {
                let r = lat.to_radians();
                (1.0 - (r.tan() + 1.0 / r.cos()).ln() / std::f64::consts::PI) / 2.0 * zoom_n
            };
            let (y_hi, y_lo) = (ty(hi), ty(lo));
            let mut out = Vec::new();
            let mut k = y_hi.floor() as i64 + 1;
            while (k as f64) < y_lo {
                let lat = (std::f64::consts::PI * (1.0 - 2.0 * k as f64 / zoom_n))
                    .sinh()
                    .atan()
                    .to_degrees();
                if lat > lo && lat < hi {
                    out.push(lat);
                }
                k += 1;
            }
            out
        };

        let mut segments = Vec::new();
        let mut truth = Vec::new();
        let slowdown =
            |d: f64| 1.0 - config.intersection_slowdown * (-d / config.intersection_scale_m).exp();
        for (street_idx, class) in classes.iter().enumerate() {
            let horizontal = street_idx < n;
            let line = street_idx % n;
            let street = if horizontal {
                format!("h{line}")
            } else {
                format!("v{line}")
            };
            for block in 0..n - 1 {
                let (a, b) = if horizontal {
                    (
                        grid_nodes[line * n + block],
                        grid_nodes[line * n + block + 1],
                    )
                } else {
                    (
                        grid_nodes[block * n + line],
                        grid_nodes[(block + 1) * n + line],
                    )
                };
                let mut cuts: Vec<GeoPoint> = vec![a];
                if horizontal {
                    for lon in lon_edges(a.lon(), b.lon()) {
                        cuts.push(GeoPoint::new(a.lat(), lon)?);
                    }
                } else {
                    for lat in lat_edges(a.lat(), b.lat()) {
                        cuts.push(GeoPoint::new(lat, a.lon())?);
                    }
                }
                cuts.sort_by(|p, q| a.distance_m(p).total_cmp(&a.distance_m(q)));
                cuts.push(b);
                let block_len = a.distance_m(&b);
                for piece in 0..cuts.len() - 1 {
                    let (p, q) = (cuts[piece], cuts[piece + 1]);
                    let s0 = a.distance_m(&p);
                    let s1 = a.distance_m(&q);
                    // mean of the intersection slowdown over [s0, s1] of the block
                    let steps = 256;
                    let mean_slow = (0..steps)
                        .map(|k| {
                            let s = s0 + (k as f64 + 0.5) / steps as f64 * (s1 - s0);
                            slowdown(s.min(block_len - s).max(0.0))
                        })
                        .sum::<f64>()
                        / steps as f64;
                    let base_id = format!("{street}-{block}-{piece}");
                    let fwd_id = format!("{base_id}f");
                    let rev_id = format!("{base_id}r");
                    let fwd = RoadSegment::new(fwd_id, vec![p, q], Some(rev_id.clone()))?;
                    let rev = fwd.reversed(rev_id);
                    let (lp, lq) = (origin_frame.to_local(&p), origin_frame.to_local(&q));
                    let area = district([0.5 * (lp[0] + lq[0]), 0.5 * (lp[1] + lq[1])]);
                    for (seg, forward) in [(fwd, true), (rev, false)] {
                        truth.push(SegmentTruth {
                            class: *class,
                            street: street.clone(),
                            forward,
                            factor: area * rng.random_range(0.95..=1.05),
                            intersection_factor: mean_slow,
                        });
                        segments.push(seg);
                    }
                }
            }
        }

        let index = segments
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        let mut tiles = BTreeSet::new();
        for s in &segments {
            let mid = GeoPoint::new(
                0.5 * (s.start().lat() + s.end().lat()),
                0.5 * (s.start().lon() + s.end().lon()),
            )?;
            tiles.insert(geo::latlon_to_tile(mid, config.tile_zoom)?);
        }
        Ok(SynthWorld {
            config,
            segments,
            truth,
            grid_nodes,
            tiles: tiles.into_iter().collect(),
            index,
            origin_frame,
        })
    }

    pub fn segment_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn class_of(&self, id: &str) -> Option<RoadClass> {
        self.segment_index(id).map(|i| self.truth[i].class)
    }

    /// Ground-truth mean speed of segment `idx` during `slot`, in km/h.
    pub fn speed_at(&self, idx: usize, slot: Slot) -> f64 {
        let t = &self.truth[idx];
        let a = self.config.direction_asymmetry;
        let dir = if t.forward { 1.0 + a } else { 1.0 - a };
        let v = t.class.base_speed_kmh()
            * diurnal_profile(slot, t.class)
            * t.factor
            * dir
            * t.intersection_factor;
        v.clamp(MIN_SPEED_KMH, MAX_SPEED_KMH)
    }

    pub fn speed_fn(&self, segment_id: &str, day: u8, hour: u8) -> Result<f64> {
        let idx = self
            .segment_index(segment_id)
            .ok_or_else(|| Error::BadReference(format!("segment {segment_id}")))?;
        Ok(self.speed_at(idx, Slot::new(day, hour)?))
    }

    /// Observed slot means: every covered (segment, slot) pair carries the
    /// ground-truth speed.
    pub fn speed_table(&self) -> SpeedTable {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_7ab1e);
        let mut table = SpeedTable::new();
        for (i, s) in self.segments.iter().enumerate() {
            for k in 0..SLOTS {
                let slot = Slot::from_index(k);
                if rng.random::<f64>() >= self.config.coverage {
                    continue;
                }
                table
                    .insert(SpeedRecord {
                        segment_id: s.id.clone(),
                        slot,
                        speed_kmh: self.speed_at(i, slot),
                        n_samples: self.config.samples_per_slot.max(1),
                    })
                    .expect("synthetic speeds are positive and unique per slot");
            }
        }
        table
    }

    pub fn frame(&self, tile: TileIndex) -> Result<PixelFrame> {
        geo::tile_pixel_frame(tile, self.config.tile_px)
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin_frame.center()
    }

    /// Sidecar: configuration plus the segment class map.
    pub fn sidecar(&self) -> WorldSidecar {
        WorldSidecar {
            config: self.config.clone(),
            classes: self
                .segments
                .iter()
                .zip(&self.truth)
                .map(|(s, t)| (s.id.clone(), t.class))
                .collect(),
        }
    }

    pub fn from_sidecar(sidecar: &WorldSidecar) -> Result<Self> {
        let world = SynthWorld::generate(sidecar.config.clone())?;
        if !sidecar.classes.is_empty() && world.sidecar().classes != sidecar.classes {
            return Err(Error::Format(
                "sidecar class map does not match its configuration".into(),
            ));
        }
        Ok(world)
    }

    pub fn geojson(&self) -> serde_json::Value {
        let mut doc = geo::segments_to_geojson(&self.segments);
        if let Some(features) = doc["features"].as_array_mut() {
            for (f, t) in features.iter_mut().zip(&self.truth) {
                f["properties"]["class"] = serde_json::json!(t.class);
                f["properties"]["street"] = serde_json::json!(t.street);
            }
        }
        doc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSidecar {
    pub config: SynthConfig,
    pub classes: BTreeMap<String, RoadClass>,
}

/// Channel-major raster with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.height + r) * self.width + col]
    }

    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f64) {
        self.data[(c * self.height + r) * self.width + col] = v;
    }

    /// Interleaved 8-bit RGB (first three channels).
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.height * self.width * 3);
        for r in 0..self.height {
            for c in 0..self.width {
                for ch in 0..3.min(self.channels) {
                    out.push((self.get(ch, r, c).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }
}

fn hash_unit(seed: u64, a: i64, b: i64, salt: u64) -> f64 {
    let mut z = seed
        ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ salt.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Renders the overhead image of `tile`: textured ground, then residential
/// and highway carriageways with class-specific width and albedo.
pub fn render_image(world: &SynthWorld, tile: TileIndex, size_px: u32) -> Result<Image> {
    if size_px < 16 {
        return Err(Error::domain("rendered images must be at least 16 px"));
    }
    let frame = geo::tile_pixel_frame(tile, size_px)?;
    let size = size_px as usize;
    let mut img = Image::new(3, size, size);
    let seed = world.config.seed;
    // global pixel coordinates keep the texture continuous across tiles
    let gx0 = i64::from(tile.x) * i64::from(size_px);
    let gy0 = i64::from(tile.y) * i64::from(size_px);
    const GROUND: [f64; 3] = [0.33, 0.42, 0.24];
    for r in 0..size {
        for c in 0..size {
            let (gx, gy) = (gx0 + c as i64, gy0 + r as i64);
            let patch = hash_unit(seed, gx.div_euclid(8), gy.div_euclid(8), 1) - 0.5;
            for ch in 0..3 {
                let fine = hash_unit(seed, gx, gy, 2 + ch as u64) - 0.5;
                img.set(
                    ch,
                    r,
                    c,
                    (GROUND[ch] + 0.12 * patch + 0.08 * fine).clamp(0.0, 1.0),
                );
            }
        }
    }
    let margin = 2.0 * RoadClass::Highway.render_half_width_m();
    let (n, s, w, e) = (frame.north, frame.south, frame.west, frame.east);
    let near_tile = |seg: &RoadSegment| {
        let pad_lat = margin / 111_000.0;
        let pad_lon = pad_lat / frame.center().lat().to_radians().cos();
        seg.points.iter().any(|p| {
            p.lat() <= n + pad_lat
                && p.lat() >= s - pad_lat
                && p.lon() >= w - pad_lon
                && p.lon() <= e + pad_lon
        }) || {
            let lat_lo = seg
                .points
                .iter()
                .map(GeoPoint::lat)
                .fold(f64::INFINITY, f64::min);
            let lat_hi = seg
                .points
                .iter()
                .map(GeoPoint::lat)
                .fold(f64::NEG_INFINITY, f64::max);
            let lon_lo = seg
                .points
                .iter()
                .map(GeoPoint::lon)
                .fold(f64::INFINITY, f64::min);
            let lon_hi = seg
                .points
                .iter()
                .map(GeoPoint::lon)
                .fold(f64::NEG_INFINITY, f64::max);
            lat_lo <= n + pad_lat
                && lat_hi >= s - pad_lat
                && lon_lo <= e + pad_lon
                && lon_hi >= w - pad_lon
        }
    };
    for class in [RoadClass::Residential, RoadClass::Highway] {
        for (seg, t) in world.segments.iter().zip(&world.truth) {
            if t.class != class || !t.forward || !near_tile(seg) {
                continue;
            }
            let albedo = class.albedo();
            for px in geo::buffer_segment(seg, &frame, class.render_half_width_m())? {
                let (gx, gy) = (gx0 + i64::from(px.col), gy0 + i64::from(px.row));
                for (ch, a) in albedo.iter().enumerate() {
                    let fine = hash_unit(seed, gx, gy, 10 + ch as u64) - 0.5;
                    img.set(
                        ch,
                        px.row as usize,
                        px.col as usize,
                        (a + 0.04 * fine).clamp(0.0, 1.0),
                    );
                }
            }
        }
    }
    Ok(img)
}
