//! Per-tile training targets: dense road masks, sparse orientation labels
//! and per-segment speed supervision, plus PNG encoders for rasters.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{Slot, SpeedTable};
use crate::geo::{self, Pixel, PixelFrame, RoadSegment};
use crate::{Error, Result};

pub const ROAD_HALF_WIDTH_M: f64 = 2.0;
pub const SAMPLE_SPACING_M: f64 = 1.0;
pub const SAMPLE_LATERAL_M: f64 = 2.0;
/// Upper end of the fixed speed color scale.
pub const SPEED_SCALE_MAX_KMH: f64 = 110.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoadMask {
    pub size: usize,
    pub data: Vec<u8>,
}

impl RoadMask {
    pub fn empty(size: usize) -> Self {
        Self {
            size,
            data: vec![0; size * size],
        }
    }

    pub fn get(&self, p: Pixel) -> u8 {
        self.data[p.row as usize * self.size + p.col as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }
}

pub fn road_mask(
    frame: &PixelFrame,
    segments: &[RoadSegment],
    half_width_m: f64,
) -> Result<RoadMask> {
    let mut mask = RoadMask::empty(frame.size_px as usize);
    for s in segments {
        for p in geo::buffer_segment(s, frame, half_width_m)? {
            mask.data[p.row as usize * mask.size + p.col as usize] = 1;
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrientationLabel {
    pub pixel: Pixel,
    pub bin: usize,
}

pub type OrientationLabels = Vec<OrientationLabel>;

/// One label per directed sample; a pixel hit by several samples keeps
/// every label.
pub fn orientation_labels(
    frame: &PixelFrame,
    segments: &[RoadSegment],
    bins: usize,
) -> Result<OrientationLabels> {
    if bins == 0 {
        return Err(Error::domain("at least one angular bin is required"));
    }
    let mut out = Vec::new();
    for s in segments {
        for d in geo::sample_along(s, frame, SAMPLE_SPACING_M, SAMPLE_LATERAL_M)? {
            out.push(OrientationLabel {
                pixel: d.pixel,
                bin: geo::angle_to_bin(d.theta, bins),
            });
        }
    }
    Ok(out)
}

/// Time-independent part of a segment's supervision inside one tile: the
/// distinct sample pixels, each with the tangent angle of its first sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFootprint {
    pub segment_id: String,
    pub pixels: Vec<Pixel>,
    pub thetas: Vec<f64>,
}

pub fn footprints(frame: &PixelFrame, segments: &[RoadSegment]) -> Result<Vec<SegmentFootprint>> {
    let mut out = Vec::new();
    for s in segments {
        let mut first: BTreeMap<Pixel, f64> = BTreeMap::new();
        for d in geo::sample_along(s, frame, SAMPLE_SPACING_M, SAMPLE_LATERAL_M)? {
            first.entry(d.pixel).or_insert(d.theta);
        }
        if first.is_empty() {
            continue;
        }
        let (pixels, thetas) = first.into_iter().unzip();
        out.push(SegmentFootprint {
            segment_id: s.id.clone(),
            pixels,
            thetas,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionEntry {
    pub segment_id: String,
    pub pixels: Vec<Pixel>,
    pub target_kmh: f64,
    pub thetas: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeedSupervision {
    pub entries: Vec<SupervisionEntry>,
}

impl SpeedSupervision {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// Keeps the footprints whose segment has a table value at `slot`;
/// segments without data are omitted.
pub fn supervise(
    footprints: &[SegmentFootprint],
    table: &SpeedTable,
    slot: Slot,
) -> SpeedSupervision {
    let entries = footprints
        .iter()
        .filter_map(|f| {
            table.get(&f.segment_id, slot).map(|stat| SupervisionEntry {
                segment_id: f.segment_id.clone(),
                pixels: f.pixels.clone(),
                target_kmh: stat.speed_kmh,
                thetas: f.thetas.clone(),
            })
        })
        .collect();
    SpeedSupervision { entries }
}

pub fn speed_supervision(
    frame: &PixelFrame,
    segments: &[RoadSegment],
    table: &SpeedTable,
    slot: Slot,
) -> Result<SpeedSupervision> {
    Ok(supervise(&footprints(frame, segments)?, table, slot))
}

/// Green-to-red color for a speed on the fixed 0-110 km/h scale.
pub fn speed_color(kmh: f64) -> [u8; 3] {
    let t = (kmh / SPEED_SCALE_MAX_KMH).clamp(0.0, 1.0);
    [
        ((1.0 - t) * 255.0).round() as u8,
        (t * 255.0).round() as u8,
        0,
    ]
}

/// RGBA raster: colored pixels where a speed is present, transparent
/// elsewhere.
pub fn render_speed_raster(size: usize, values: &[Option<f64>]) -> Result<Vec<u8>> {
    if values.len() != size * size {
        return Err(Error::shape(format!(
            "{} values for a {size}x{size} raster",
            values.len()
        )));
    }
    let mut rgba = Vec::with_capacity(values.len() * 4);
    for v in values {
        match v {
            Some(kmh) => {
                let [r, g, b] = speed_color(*kmh);
                rgba.extend_from_slice(&[r, g, b, 255]);
            }
            None => rgba.extend_from_slice(&[0, 0, 0, 0]),
        }
    }
    encode_png(size as u32, size as u32, png::ColorType::Rgba, &rgba)
}

/// Per-pixel mean of supervision targets, for visualizing a slot's labels.
pub fn supervision_values(size: usize, supervision: &SpeedSupervision) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; size * size];
    let mut cnt = vec![0u32; size * size];
    for e in &supervision.entries {
        for p in &e.pixels {
            let i = p.row as usize * size + p.col as usize;
            sum[i] += e.target_kmh;
            cnt[i] += 1;
        }
    }
    sum.into_iter()
        .zip(cnt)
        .map(|(s, c)| (c > 0).then(|| s / f64::from(c)))
        .collect()
}

pub fn encode_png(width: u32, height: u32, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(buf)
}

pub fn mask_png(mask: &RoadMask) -> Result<Vec<u8>> {
    let gray: Vec<u8> = mask.data.iter().map(|v| v * 255).collect();
    encode_png(
        mask.size as u32,
        mask.size as u32,
        png::ColorType::Grayscale,
        &gray,
    )
}

/// Decodes an 8-bit PNG into (width, height, channels, bytes).
pub fn decode_png(bytes: &[u8]) -> Result<(u32, u32, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, info.color_type.samples(), buf))
}

pub fn write_supervision<W: Write>(sup: &SpeedSupervision, writer: W) -> Result<()> {
    serde_json::to_writer(writer, sup)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SpeedRecord;
    use crate::geo::GeoPoint;

    fn frame() -> PixelFrame {
        let t = geo::latlon_to_tile(GeoPoint::new(40.7484, -73.9857).unwrap(), 19).unwrap();
        geo::tile_pixel_frame(t, 64).unwrap()
    }

    fn seg(f: &PixelFrame, id: &str, a: [f64; 2], b: [f64; 2]) -> RoadSegment {
        RoadSegment::new(
            id,
            vec![f.from_local(a).unwrap(), f.from_local(b).unwrap()],
            None,
        )
        .unwrap()
    }

    #[test]
    fn empty_inputs() {
        let f = frame();
        assert_eq!(road_mask(&f, &[], 2.0).unwrap().count(), 0);
        assert!(orientation_labels(&f, &[], 16).unwrap().is_empty());
        let s = seg(&f, "a", [-10.0, 0.3], [10.0, 0.3]);
        assert!(
            speed_supervision(&f, &[s], &SpeedTable::new(), Slot { day: 0, hour: 8 })
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn crossing_segments_union() {
        let f = frame();
        let a = seg(&f, "a", [-20.0, 0.3], [20.0, 0.3]);
        let b = seg(&f, "b", [0.2, -20.0], [0.2, 20.0]);
        let ma = road_mask(&f, std::slice::from_ref(&a), 2.0).unwrap();
        let mb = road_mask(&f, std::slice::from_ref(&b), 2.0).unwrap();
        let both = road_mask(&f, &[a, b], 2.0).unwrap();
        let overlap = ma
            .data
            .iter()
            .zip(&mb.data)
            .filter(|(x, y)| **x == 1 && **y == 1)
            .count();
        assert!(overlap > 0);
        assert_eq!(both.count(), ma.count() + mb.count() - overlap);
    }

    #[test]
    fn east_west_labels_and_twin_offset() {
        let f = frame();
        let a = seg(&f, "a", [-15.0, 0.3], [15.0, 0.3]);
        let labels = orientation_labels(&f, std::slice::from_ref(&a), 16).unwrap();
        assert!(!labels.is_empty());
        assert!(labels.iter().all(|l| l.bin == 7 || l.bin == 8));
        let twin = a.reversed("b");
        let rev = orientation_labels(&f, &[twin], 16).unwrap();
        assert_eq!(labels.len(), rev.len());
        let fwd: std::collections::BTreeMap<_, _> =
            labels.iter().map(|l| (l.pixel, l.bin)).collect();
        let shared: Vec<_> = rev
            .iter()
            .filter_map(|l| fwd.get(&l.pixel).map(|b| (*b, l.bin)))
            .collect();
        assert!(
            shared.len() * 10 >= labels.len() * 9,
            "{} of {}",
            shared.len(),
            labels.len()
        );
        for (f, r) in shared {
            assert_eq!((f + 8) % 16, r);
        }
    }

    #[test]
    fn supervision_masks_missing_segments() {
        let f = frame();
        let segs = vec![
            seg(&f, "a", [-15.0, 0.3], [15.0, 0.3]),
            seg(&f, "b", [0.2, -15.0], [0.2, 15.0]),
            seg(&f, "c", [-15.0, 10.3], [15.0, 10.3]),
        ];
        let mut t = SpeedTable::new();
        let slot = Slot { day: 0, hour: 8 };
        for (id, v) in [("a", 31.5), ("c", 12.25)] {
            t.insert(SpeedRecord {
                segment_id: id.into(),
                slot,
                speed_kmh: v,
                n_samples: 3,
            })
            .unwrap();
        }
        let sup = speed_supervision(&f, &segs, &t, slot).unwrap();
        assert_eq!(sup.len(), 2);
        assert_eq!(sup.entries[0].target_kmh, 31.5);
        assert_eq!(sup.entries[1].target_kmh, 12.25);
        assert!(sup
            .entries
            .iter()
            .all(|e| !e.pixels.is_empty() && e.pixels.len() == e.thetas.len()));
        assert!(speed_supervision(&f, &segs, &t, Slot { day: 1, hour: 8 })
            .unwrap()
            .is_empty());
    }

    #[test]
    fn speed_colors() {
        assert_eq!(speed_color(0.0), [255, 0, 0]);
        assert_eq!(speed_color(110.0), [0, 255, 0]);
        let png = render_speed_raster(2, &[Some(0.0), Some(110.0), None, Some(55.0)]).unwrap();
        let (w, h, ch, data) = decode_png(&png).unwrap();
        assert_eq!((w, h, ch), (2, 2, 4));
        assert_eq!(&data[0..4], &[255, 0, 0, 255]);
        assert_eq!(&data[4..8], &[0, 255, 0, 255]);
        assert_eq!(data[11], 0);
        assert!(render_speed_raster(3, &[None]).is_err());
    }
}
