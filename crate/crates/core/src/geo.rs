//! Geographic primitives: spherical-Mercator tiles, per-tile pixel frames,
//! directed road segments and their rasterization into pixel sets and
//! directed samples.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{Error, Result};

/// Sphere radius of the spherical-Mercator projection, in meters.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;
/// Latitude limit of the square Mercator world.
pub const MERCATOR_MAX_LAT: f64 = 85.051_128_779_806_59;
pub const MAX_ZOOM: u8 = 22;

const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::domain(format!("latitude {lat} outside [-90, 90]")));
        }
        if !lon.is_finite() || !(-180.0..180.0).contains(&lon) {
            return Err(Error::domain(format!(
                "longitude {lon} outside [-180, 180)"
            )));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Great-circle distance on the Mercator sphere.
    pub fn distance_m(&self, other: &GeoPoint) -> f64 {
        let (p1, p2) = (self.lat.to_radians(), other.lat.to_radians());
        let dp = p2 - p1;
        let dl = (other.lon - self.lon).to_radians();
        let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileIndex {
    pub zoom: u8,
    pub x: u32,
    pub y: u32,
}

impl TileIndex {
    pub fn new(zoom: u8, x: u32, y: u32) -> Result<Self> {
        if zoom > MAX_ZOOM {
            return Err(Error::domain(format!("zoom {zoom} exceeds {MAX_ZOOM}")));
        }
        let n = 1u64 << zoom;
        if u64::from(x) >= n || u64::from(y) >= n {
            return Err(Error::domain(format!(
                "tile ({x}, {y}) outside zoom {zoom} grid"
            )));
        }
        Ok(Self { zoom, x, y })
    }

    /// Geographic bounds as (north, south, west, east) in degrees.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let n = (1u64 << self.zoom) as f64;
        let west = f64::from(self.x) / n * 360.0 - 180.0;
        let east = f64::from(self.x + 1) / n * 360.0 - 180.0;
        (
            tile_y_to_lat(f64::from(self.y), n),
            tile_y_to_lat(f64::from(self.y + 1), n),
            west,
            east,
        )
    }

    pub fn center(&self) -> GeoPoint {
        let (north, south, west, east) = self.bounds();
        GeoPoint {
            lat: 0.5 * (north + south),
            lon: 0.5 * (west + east),
        }
    }
}

impl fmt::Display for TileIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.zoom, self.x, self.y)
    }
}

impl FromStr for TileIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['/', '_']).collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("tile '{s}' is not z/x/y")));
        }
        let parse = |p: &str| -> Result<u32> {
            p.trim()
                .parse()
                .map_err(|_| Error::Format(format!("tile '{s}' has a non-integer component")))
        };
        let zoom = parse(parts[0])?;
        let zoom =
            u8::try_from(zoom).map_err(|_| Error::domain(format!("zoom {zoom} too large")))?;
        TileIndex::new(zoom, parse(parts[1])?, parse(parts[2])?)
    }
}

impl Serialize for TileIndex {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TileIndex {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn tile_y_to_lat(y: f64, n: f64) -> f64 {
    (PI * (1.0 - 2.0 * y / n)).sinh().atan().to_degrees()
}

/// Standard slippy-map XYZ index of the tile containing `p`.
pub fn latlon_to_tile(p: GeoPoint, zoom: u8) -> Result<TileIndex> {
    if zoom > MAX_ZOOM {
        return Err(Error::domain(format!("zoom {zoom} exceeds {MAX_ZOOM}")));
    }
    if p.lat.abs() > MERCATOR_MAX_LAT {
        return Err(Error::domain(format!(
            "latitude {} beyond the Mercator limit {MERCATOR_MAX_LAT}",
            p.lat
        )));
    }
    let n = (1u64 << zoom) as f64;
    let last = (1u64 << zoom) - 1;
    let x = ((p.lon + 180.0) / 360.0 * n).floor();
    let lat = p.lat.to_radians();
    let y = ((1.0 - (lat.tan() + 1.0 / lat.cos()).ln() / PI) / 2.0 * n).floor();
    let clamp = |v: f64| (v.max(0.0) as u64).min(last) as u32;
    Ok(TileIndex {
        zoom,
        x: clamp(x),
        y: clamp(y),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub row: u32,
    pub col: u32,
}

impl Pixel {
    pub fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }
}

pub type PixelSet = BTreeSet<Pixel>;

/// Raster frame of one tile. Geometry inside the frame is planar: meters
/// come from an equirectangular projection about the tile center.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFrame {
    pub tile: TileIndex,
    pub size_px: u32,
    pub north: f64,
    pub south: f64,
    pub west: f64,
    pub east: f64,
    center_lat: f64,
    center_lon: f64,
    cos_center: f64,
    mpp_x: f64,
    mpp_y: f64,
}

pub fn tile_pixel_frame(tile: TileIndex, size_px: u32) -> Result<PixelFrame> {
    if size_px == 0 {
        return Err(Error::domain("frame size must be at least one pixel"));
    }
    let (north, south, west, east) = tile.bounds();
    let center_lat = 0.5 * (north + south);
    let center_lon = 0.5 * (west + east);
    let cos_center = center_lat.to_radians().cos();
    let width_m = (east - west) * METERS_PER_DEGREE * cos_center;
    let height_m = (north - south) * METERS_PER_DEGREE;
    Ok(PixelFrame {
        tile,
        size_px,
        north,
        south,
        west,
        east,
        center_lat,
        center_lon,
        cos_center,
        mpp_x: width_m / f64::from(size_px),
        mpp_y: height_m / f64::from(size_px),
    })
}

impl PixelFrame {
    /// Ground resolution along the east axis.
    pub fn meters_per_pixel(&self) -> f64 {
        self.mpp_x
    }

    pub fn meters_per_pixel_y(&self) -> f64 {
        self.mpp_y
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: self.center_lat,
            lon: self.center_lon,
        }
    }

    /// Local (east, north) meters about the tile center.
    pub fn to_local(&self, p: &GeoPoint) -> [f64; 2] {
        [
            (p.lon - self.center_lon) * METERS_PER_DEGREE * self.cos_center,
            (p.lat - self.center_lat) * METERS_PER_DEGREE,
        ]
    }

    pub fn from_local(&self, m: [f64; 2]) -> Result<GeoPoint> {
        GeoPoint::new(
            self.center_lat + m[1] / METERS_PER_DEGREE,
            self.center_lon + m[0] / (METERS_PER_DEGREE * self.cos_center),
        )
    }

    fn half_extent(&self) -> [f64; 2] {
        let s = f64::from(self.size_px) * 0.5;
        [s * self.mpp_x, s * self.mpp_y]
    }

    /// Local meters of the center of pixel (row, col).
    pub fn pixel_center_local(&self, row: u32, col: u32) -> [f64; 2] {
        let [hx, hy] = self.half_extent();
        [
            -hx + (f64::from(col) + 0.5) * self.mpp_x,
            hy - (f64::from(row) + 0.5) * self.mpp_y,
        ]
    }

    /// Continuous (row, col) raster coordinates of a local point.
    pub fn local_to_raster(&self, m: [f64; 2]) -> [f64; 2] {
        let [hx, hy] = self.half_extent();
        [(hy - m[1]) / self.mpp_y, (m[0] + hx) / self.mpp_x]
    }

    /// Pixel containing a local point, if it falls inside the frame.
    pub fn pixel_of_local(&self, m: [f64; 2]) -> Option<Pixel> {
        let [r, c] = self.local_to_raster(m);
        let size = f64::from(self.size_px);
        if r < 0.0 || c < 0.0 || r >= size || c >= size {
            return None;
        }
        Some(Pixel::new(r as u32, c as u32))
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        p.lat <= self.north && p.lat > self.south && p.lon >= self.west && p.lon < self.east
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadSegment {
    pub id: String,
    pub points: Vec<GeoPoint>,
    pub twin_id: Option<String>,
    pub length_m: f64,
}

impl RoadSegment {
    pub fn new(
        id: impl Into<String>,
        points: Vec<GeoPoint>,
        twin_id: Option<String>,
    ) -> Result<Self> {
        let id = id.into();
        if points.len() < 2 {
            return Err(Error::domain(format!(
                "segment {id} needs at least two points"
            )));
        }
        let length_m = polyline_length(&points);
        if length_m <= 0.0 {
            return Err(Error::domain(format!("segment {id} has zero length")));
        }
        Ok(Self {
            id,
            points,
            twin_id,
            length_m,
        })
    }

    pub fn start(&self) -> GeoPoint {
        self.points[0]
    }

    pub fn end(&self) -> GeoPoint {
        self.points[self.points.len() - 1]
    }

    /// Opposite-direction copy with the given id, linked to `self` as twin.
    pub fn reversed(&self, id: impl Into<String>) -> RoadSegment {
        let mut points = self.points.clone();
        points.reverse();
        RoadSegment {
            id: id.into(),
            points,
            twin_id: Some(self.id.clone()),
            length_m: self.length_m,
        }
    }

    pub fn to_feature(&self) -> Value {
        let coords: Vec<Value> = self.points.iter().map(|p| json!([p.lon, p.lat])).collect();
        json!({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": coords},
            "properties": {"id": self.id, "twin_id": self.twin_id},
        })
    }

    pub fn from_feature(feature: &Value) -> Result<Self> {
        let geometry = &feature["geometry"];
        if geometry["type"] != "LineString" {
            return Err(Error::Format("feature geometry is not a LineString".into()));
        }
        let id = feature["properties"]["id"]
            .as_str()
            .ok_or_else(|| Error::Format("feature lacks a string 'id' property".into()))?;
        let twin_id = feature["properties"]["twin_id"].as_str().map(str::to_owned);
        let coords = geometry["coordinates"]
            .as_array()
            .ok_or_else(|| Error::Format(format!("segment {id}: coordinates missing")))?;
        let points = coords
            .iter()
            .map(|c| match (c[0].as_f64(), c[1].as_f64()) {
                (Some(lon), Some(lat)) => GeoPoint::new(lat, lon),
                _ => Err(Error::Format(format!("segment {id}: bad coordinate {c}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        RoadSegment::new(id, points, twin_id)
    }
}

pub fn polyline_length(points: &[GeoPoint]) -> f64 {
    points.windows(2).map(|w| w[0].distance_m(&w[1])).sum()
}

pub fn segments_to_geojson(segments: &[RoadSegment]) -> Value {
    json!({
        "type": "FeatureCollection",
        "features": segments.iter().map(RoadSegment::to_feature).collect::<Vec<_>>(),
    })
}

pub fn segments_from_geojson(doc: &Value) -> Result<Vec<RoadSegment>> {
    let features = doc["features"]
        .as_array()
        .ok_or_else(|| Error::Format("GeoJSON document has no feature array".into()))?;
    features.iter().map(RoadSegment::from_feature).collect()
}

/// Angle of a direction vector given in (east, north) meters, in (-π, π].
pub fn direction_to_angle(d: [f64; 2]) -> Result<f64> {
    if d[0] == 0.0 && d[1] == 0.0 || !d[0].is_finite() || !d[1].is_finite() {
        return Err(Error::domain(
            "direction vector must be finite and non-zero",
        ));
    }
    let theta = d[1].atan2(d[0]);
    Ok(if theta <= -PI { PI } else { theta })
}

/// Bin `i` covers (-π + iΔ, -π + (i+1)Δ] with Δ = 2π/K.
pub fn angle_to_bin(theta: f64, bins: usize) -> usize {
    assert!(bins >= 1, "at least one angular bin is required");
    let width = 2.0 * PI / bins as f64;
    let idx = ((theta + PI) / width).ceil() - 1.0;
    if idx <= 0.0 {
        0
    } else {
        (idx as usize).min(bins - 1)
    }
}

pub fn bin_center(bin: usize, bins: usize) -> f64 {
    let width = 2.0 * PI / bins as f64;
    -PI + (bin as f64 + 0.5) * width
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectedSample {
    pub pixel: Pixel,
    pub theta: f64,
    pub segment_id: String,
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * d[0], a[1] + t * d[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// Pixels whose centers lie within `half_width_m` of the segment polyline.
pub fn buffer_segment(
    segment: &RoadSegment,
    frame: &PixelFrame,
    half_width_m: f64,
) -> Result<PixelSet> {
    if !(half_width_m > 0.0) {
        return Err(Error::domain("buffer half width must be positive"));
    }
    let local: Vec<[f64; 2]> = segment.points.iter().map(|p| frame.to_local(p)).collect();
    let mut out = PixelSet::new();
    let size = i64::from(frame.size_px);
    for w in local.windows(2) {
        let (a, b) = (w[0], w[1]);
        // candidate window: the piece's raster bounding box grown by the radius
        let ra = frame.local_to_raster(a);
        let rb = frame.local_to_raster(b);
        let pad_r = half_width_m / frame.mpp_y + 1.0;
        let pad_c = half_width_m / frame.mpp_x + 1.0;
        let r0 = ((ra[0].min(rb[0]) - pad_r).floor() as i64).max(0);
        let r1 = ((ra[0].max(rb[0]) + pad_r).ceil() as i64).min(size - 1);
        let c0 = ((ra[1].min(rb[1]) - pad_c).floor() as i64).max(0);
        let c1 = ((ra[1].max(rb[1]) + pad_c).ceil() as i64).min(size - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let center = frame.pixel_center_local(r as u32, c as u32);
                if point_segment_distance(center, a, b) <= half_width_m + 1e-9 {
                    out.insert(Pixel::new(r as u32, c as u32));
                }
            }
        }
    }
    Ok(out)
}

/// Samples every `spacing_m` of arc length, replicated at integer-meter
/// perpendicular offsets in [-lateral_m, lateral_m]. Samples falling
/// outside the frame are dropped.
pub fn sample_along(
    segment: &RoadSegment,
    frame: &PixelFrame,
    spacing_m: f64,
    lateral_m: f64,
) -> Result<Vec<DirectedSample>> {
    if !(spacing_m > 0.0) {
        return Err(Error::domain("sample spacing must be positive"));
    }
    if !(lateral_m >= 0.0) {
        return Err(Error::domain("lateral extent must be non-negative"));
    }
    let local: Vec<[f64; 2]> = segment.points.iter().map(|p| frame.to_local(p)).collect();
    let pieces: Vec<([f64; 2], [f64; 2], f64)> = local
        .windows(2)
        .map(|w| {
            let d = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
            (w[0], d, (d[0] * d[0] + d[1] * d[1]).sqrt())
        })
        .filter(|p| p.2 > 0.0)
        .collect();
    let total: f64 = pieces.iter().map(|p| p.2).sum();
    if pieces.is_empty() {
        return Ok(Vec::new());
    }
    let count = (total / spacing_m + 1e-6).floor() as usize + 1;
    let max_offset = (lateral_m + 1e-9).floor() as i64;
    let mut out = Vec::with_capacity(count * (2 * max_offset as usize + 1));
    let mut piece = 0;
    let mut piece_start = 0.0;
    for i in 0..count {
        let s = (i as f64 * spacing_m).min(total);
        while piece + 1 < pieces.len() && s >= piece_start + pieces[piece].2 {
            piece_start += pieces[piece].2;
            piece += 1;
        }
        let (origin, d, len) = pieces[piece];
        let t = ((s - piece_start) / len).clamp(0.0, 1.0);
        let pos = [origin[0] + t * d[0], origin[1] + t * d[1]];
        let theta = direction_to_angle(d)?;
        let normal = [-d[1] / len, d[0] / len];
        for off in -max_offset..=max_offset {
            let o = off as f64;
            let q = [pos[0] + o * normal[0], pos[1] + o * normal[1]];
            if let Some(pixel) = frame.pixel_of_local(q) {
                out.push(DirectedSample {
                    pixel,
                    theta,
                    segment_id: segment.id.clone(),
                });
            }
        }
    }
    Ok(out)
}
